#include "sdfal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sdfal/errors.hpp"

namespace sdfal {

void Cuboid::validate() const {
  if (!center.allFinite() || !dims.allFinite() || !std::isfinite(yaw) || !(dims.minCoeff() > 0.0)) {
    throw UsageError("cuboid: dimensions must be positive and values finite");
  }
}

std::vector<Vec2> Cuboid::footprint() const {
  // Length axis maps to (cos, -sin) in (x, z), width axis to (sin, cos).
  const double c = std::cos(yaw), s = std::sin(yaw);
  const Vec2 u(c, -s), v(s, c);
  const Vec2 o(center.x(), center.z());
  const double hl = dims.x() / 2, hw = dims.y() / 2;
  std::vector<Vec2> out = {o - hl * u - hw * v, o + hl * u - hw * v, o + hl * u + hw * v, o - hl * u + hw * v};
  if (polygon_area(out) < 0.0) std::reverse(out.begin(), out.end());
  return out;
}

bool Cuboid::contains(const Vec3& p) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double dx = p.x() - center.x(), dz = p.z() - center.z();
  const double along = c * dx - s * dz;
  const double across = s * dx + c * dz;
  return std::abs(along) <= dims.x() / 2 && std::abs(across) <= dims.y() / 2 &&
         std::abs(p.y() - center.y()) <= dims.z() / 2;
}

double polygon_area(std::span<const Vec2> polygon) {
  double a = 0.0;
  for (std::size_t i = 0, j = polygon.size() - 1; i < polygon.size(); j = i++) {
    a += polygon[j].x() * polygon[i].y() - polygon[i].x() * polygon[j].y();
  }
  return polygon.empty() ? 0.0 : 0.5 * a;
}

std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip) {
  std::vector<Vec2> out(subject.begin(), subject.end());
  auto side = [](const Vec2& a, const Vec2& b, const Vec2& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  };
  for (std::size_t i = 0; i < clip.size() && !out.empty(); ++i) {
    const Vec2& a = clip[i];
    const Vec2& b = clip[(i + 1) % clip.size()];
    std::vector<Vec2> in = std::move(out);
    out.clear();
    for (std::size_t k = 0; k < in.size(); ++k) {
      const Vec2& p = in[k];
      const Vec2& q = in[(k + 1) % in.size()];
      const double sp = side(a, b, p), sq = side(a, b, q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) out.push_back(p + (q - p) * (sp / (sp - sq)));
    }
  }
  return out;
}

namespace {

double bev_intersection(const Cuboid& a, const Cuboid& b) {
  const std::vector<Vec2> pa = a.footprint();
  const std::vector<Vec2> pb = b.footprint();
  return std::max(0.0, polygon_area(clip_convex(pa, pb)));
}

double height_overlap(const Cuboid& a, const Cuboid& b) {
  const double lo = std::max(a.center.y() - a.dims.z() / 2, b.center.y() - b.dims.z() / 2);
  const double hi = std::min(a.center.y() + a.dims.z() / 2, b.center.y() + b.dims.z() / 2);
  return std::max(0.0, hi - lo);
}

// Orders the pair so that the result is exactly symmetric.
bool swap_order(const Cuboid& a, const Cuboid& b) {
  const double ka[7] = {a.center.x(), a.center.y(), a.center.z(), a.dims.x(), a.dims.y(), a.dims.z(), a.yaw};
  const double kb[7] = {b.center.x(), b.center.y(), b.center.z(), b.dims.x(), b.dims.y(), b.dims.z(), b.yaw};
  return std::lexicographical_compare(kb, kb + 7, ka, ka + 7);
}

}  // namespace

double bev_iou(const Cuboid& a, const Cuboid& b) {
  a.validate();
  b.validate();
  if (swap_order(a, b)) return bev_iou(b, a);
  const double inter = bev_intersection(a, b);
  const double uni = a.dims.x() * a.dims.y() + b.dims.x() * b.dims.y() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Cuboid& a, const Cuboid& b) {
  a.validate();
  b.validate();
  if (swap_order(a, b)) return iou_3d(b, a);
  const double inter = bev_intersection(a, b) * height_overlap(a, b);
  const double uni = a.dims.prod() + b.dims.prod() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double center_distance(const Cuboid& a, const Cuboid& b) {
  return std::hypot(a.center.x() - b.center.x(), a.center.z() - b.center.z());
}

bool ns_match(const Cuboid& a, const Cuboid& b, double cutoff) { return center_distance(a, b) <= cutoff; }

std::string metric_name(MatchMetric metric, double cutoff) {
  std::ostringstream s;
  switch (metric) {
    case MatchMetric::kBev: s << "BEV@"; break;
    case MatchMetric::kIou3d: s << "3D@"; break;
    case MatchMetric::kCenterDistance: s << "NS@"; break;
  }
  s << cutoff;
  return s.str();
}

PRCurve average_precision(std::span<const ScoredCuboid> predictions, std::span<const GroundTruthCuboid> truths,
                          MatchMetric metric, double cutoff) {
  PRCurve curve;
  std::vector<std::size_t> order(predictions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return predictions[a].score > predictions[b].score; });
  std::vector<bool> taken(truths.size(), false);
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const ScoredCuboid& p = predictions[order[rank]];
    std::ptrdiff_t best = -1;
    double best_value = 0.0;
    for (std::size_t g = 0; g < truths.size(); ++g) {
      if (taken[g] || truths[g].frame != p.frame) continue;
      double value = 0.0;
      bool ok = false;
      switch (metric) {
        case MatchMetric::kBev:
          value = bev_iou(p.cuboid, truths[g].cuboid);
          ok = value >= cutoff;
          break;
        case MatchMetric::kIou3d:
          value = iou_3d(p.cuboid, truths[g].cuboid);
          ok = value >= cutoff;
          break;
        case MatchMetric::kCenterDistance:
          value = -center_distance(p.cuboid, truths[g].cuboid);
          ok = -value <= cutoff;
          break;
      }
      if (ok && (best < 0 || value > best_value)) {
        best = static_cast<std::ptrdiff_t>(g);
        best_value = value;
      }
    }
    const bool hit = best >= 0;
    if (hit) {
      taken[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    curve.scores.push_back(p.score);
    curve.true_positive.push_back(hit);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    curve.recall.push_back(truths.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(truths.size()));
  }
  if (truths.empty() || order.empty()) return curve;
  // All-point interpolation: recall steps of 1/|GT| at each true positive,
  // weighted by the precision envelope. Extended precision so that small
  // fixtures round to the double nearest the exact rational.
  std::vector<long double> envelope(order.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    hits += curve.true_positive[i];
    envelope[i] = static_cast<long double>(hits) / static_cast<long double>(i + 1);
  }
  for (std::size_t i = envelope.size() - 1; i-- > 0;) envelope[i] = std::max(envelope[i], envelope[i + 1]);
  long double sum = 0.0L;
  for (std::size_t i = 0; i < envelope.size(); ++i) {
    if (curve.true_positive[i]) sum += envelope[i];
  }
  curve.ap = static_cast<double>(sum / static_cast<long double>(truths.size()));
  return curve;
}

}  // namespace sdfal
