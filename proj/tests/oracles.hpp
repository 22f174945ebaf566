#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <queue>
#include <span>
#include <string_view>
#include <vector>

namespace oracle {

// Background components (4-connected) that do not touch the image border.
inline int count_holes(std::span<const double> mask, int w, int h) {
  std::vector<int> label(mask.size(), 0);
  int holes = 0;
  for (int start = 0; start < w * h; ++start) {
    if (mask[start] > 0.0 || label[start]) continue;
    bool border = false;
    std::queue<int> q;
    q.push(start);
    label[start] = 1;
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int x = p % w, y = p / w;
      if (x == 0 || y == 0 || x == w - 1 || y == h - 1) border = true;
      const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
        const int k = n[1] * w + n[0];
        if (mask[k] > 0.0 || label[k]) continue;
        label[k] = 1;
        q.push(k);
      }
    }
    if (!border) ++holes;
  }
  return holes;
}

inline double mask_iou(std::span<const double> a, std::span<const double> b) {
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.0, y = b[i] > 0.0;
    inter += x && y;
    uni += x || y;
  }
  return uni > 0.0 ? inter / uni : 1.0;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Index of the closest point (lowest index on ties) and its distance, by
// exhaustive search.
inline std::pair<std::size_t, double> brute_nearest(std::span<const std::array<double, 3>> pts,
                                                    const std::array<double, 3>& q) {
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1], dz = pts[i][2] - q[2];
    const double d2 = dx * dx + dy * dy + dz * dz;
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return {best, std::sqrt(best_d2)};
}

// Yaw-rotated box: center (x, y, z), dims (length, width, height), yaw about
// y with the length axis at (cos, -sin) in (x, z).
struct Box {
  double c[3];
  double d[3];
  double yaw;

  bool inside(double x, double y, double z) const {
    const double dx = x - c[0], dz = z - c[2];
    const double a = std::cos(yaw) * dx - std::sin(yaw) * dz;
    const double b = std::sin(yaw) * dx + std::cos(yaw) * dz;
    return std::abs(a) <= d[0] / 2 && std::abs(b) <= d[1] / 2 && std::abs(y - c[1]) <= d[2] / 2;
  }
};

// Monte-Carlo IoU: uniform samples inside a estimate the fraction p of a
// inside b, then IoU = p Va / (Va + Vb - p Va). With bev = true the height is
// ignored and the sampling is over the footprint.
inline double mc_iou(const Box& a, const Box& b, bool bev, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  const double c = std::cos(a.yaw), s = std::sin(a.yaw);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double la = a.d[0] * u(rng), lb = a.d[1] * u(rng);
    const double y = bev ? b.c[1] : a.c[1] + a.d[2] * u(rng);
    // Inverse of the box-local mapping used by inside().
    const double x = a.c[0] + c * la + s * lb;
    const double z = a.c[2] - s * la + c * lb;
    hits += b.inside(x, y, z);
  }
  const double va = bev ? a.d[0] * a.d[1] : a.d[0] * a.d[1] * a.d[2];
  const double vb = bev ? b.d[0] * b.d[1] : b.d[0] * b.d[1] * b.d[2];
  const double inter = va * static_cast<double>(hits) / static_cast<double>(samples);
  return inter / (va + vb - inter);
}

}  // namespace oracle
