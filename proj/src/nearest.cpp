#include "sdfal/nearest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sdfal/errors.hpp"

namespace sdfal {

namespace {
constexpr double kMaxCells = 1 << 21;
}

PointIndex::PointIndex(std::span<const Vec3> points, double cell)
    : points_(points.begin(), points.end()), cell_(cell) {
  if (!(cell > 0.0) || !std::isfinite(cell)) throw UsageError("PointIndex: cell size must be positive");
  if (points_.empty()) return;
  Vec3 lo = points_.front();
  Vec3 hi = points_.front();
  for (const Vec3& p : points_) {
    if (!p.allFinite()) throw NumericError("PointIndex: non-finite point");
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  origin_ = lo;
  const Vec3 extent = hi - lo;
  for (;;) {
    double total = 1.0;
    for (int a = 0; a < 3; ++a) {
      dims_[a] = static_cast<int>(std::floor(extent[a] / cell_)) + 1;
      total *= dims_[a];
    }
    if (total <= kMaxCells) break;
    cell_ *= 2.0;
  }
  const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  auto cell_of = [&](const Vec3& p) {
    std::size_t id = 0;
    for (int a = 2; a >= 0; --a) {
      const int c = std::min(dims_[a] - 1, static_cast<int>(std::floor((p[a] - origin_[a]) / cell_)));
      id = id * dims_[a] + static_cast<std::size_t>(c);
    }
    return id;
  };
  cell_begin_.assign(ncell + 1, 0);
  std::vector<std::size_t> ids(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) {
    ids[i] = cell_of(points_[i]);
    ++cell_begin_[ids[i] + 1];
  }
  for (std::size_t c = 0; c < ncell; ++c) cell_begin_[c + 1] += cell_begin_[c];
  order_.resize(points_.size());
  std::vector<std::uint32_t> fill(cell_begin_.begin(), cell_begin_.end() - 1);
  for (std::size_t i = 0; i < points_.size(); ++i) order_[fill[ids[i]]++] = static_cast<std::uint32_t>(i);
}

std::optional<Neighbor> PointIndex::nearest(const Vec3& q, double max_distance) const {
  if (points_.empty() || !(max_distance >= 0.0)) return std::nullopt;
  int qc[3];
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((q[a] - origin_[a]) / cell_);
    qc[a] = static_cast<int>(std::clamp(f, -1e9, 1e9));
  }
  double best2 = std::numeric_limits<double>::infinity();
  std::uint32_t best = 0;
  const double limit2 = max_distance * max_distance;
  auto visit = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
    const std::size_t id = (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
    for (std::uint32_t k = cell_begin_[id]; k < cell_begin_[id + 1]; ++k) {
      const std::uint32_t i = order_[k];
      const double d2 = (points_[i] - q).squaredNorm();
      if (d2 > limit2) continue;
      if (d2 < best2 || (d2 == best2 && i < best)) {
        best2 = d2;
        best = i;
      }
    }
  };
  // Shell r holds cells at Chebyshev distance r from q's cell; every point in
  // shell r + 1 or beyond is at least r * cell away from q.
  const int max_ring = static_cast<int>(std::ceil(max_distance / cell_)) + 1;
  int first_ring = 0;
  for (int a = 0; a < 3; ++a) {
    first_ring = std::max(first_ring, std::max(-qc[a], qc[a] - (dims_[a] - 1)));
  }
  for (int r = first_ring; r <= max_ring; ++r) {
    for (int dz = -r; dz <= r; ++dz) {
      for (int dy = -r; dy <= r; ++dy) {
        const bool face = std::abs(dz) == r || std::abs(dy) == r;
        for (int dx = -r; dx <= r; dx += (face ? 1 : 2 * std::max(r, 1))) {
          visit(qc[0] + dx, qc[1] + dy, qc[2] + dz);
        }
      }
    }
    if (best2 < std::numeric_limits<double>::infinity()) {
      const double reach = r * cell_;
      if (best2 < reach * reach) break;
    }
  }
  if (!(best2 <= limit2)) return std::nullopt;
  return Neighbor{best, std::sqrt(best2)};
}

}  // namespace sdfal
