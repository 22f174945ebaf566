#pragma once

// Cuboid metrics: bird's-eye-view IoU, 3D IoU, center-distance matching and
// all-point average precision.
//
// Cuboids live in the camera frame (x right, y down, z forward). The ground
// plane is x-z, height runs along y, and yaw rotates the length axis about y.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sdfal/vec.hpp"

namespace sdfal {

struct Cuboid {
  Vec3 center = Vec3::Zero();
  Vec3 dims = Vec3::Ones();  // length, width, height
  double yaw = 0.0;          // (-pi, pi]

  // Throws UsageError unless dims > 0 and everything is finite.
  void validate() const;
  // Ground-plane (x, z) corners, counter-clockwise in (x, z).
  std::vector<Vec2> footprint() const;
  bool contains(const Vec3& p) const;
};

double polygon_area(std::span<const Vec2> polygon);
// Sutherland-Hodgman clipping of a polygon against a convex polygon (both
// counter-clockwise).
std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip);

double bev_iou(const Cuboid& a, const Cuboid& b);
double iou_3d(const Cuboid& a, const Cuboid& b);
double center_distance(const Cuboid& a, const Cuboid& b);  // ground plane
bool ns_match(const Cuboid& a, const Cuboid& b, double cutoff);

enum class MatchMetric { kBev, kIou3d, kCenterDistance };

std::string metric_name(MatchMetric metric, double cutoff);

struct ScoredCuboid {
  Cuboid cuboid;
  double score = 0.0;
  int frame = 0;  // predictions only match ground truths with the same frame
};

struct GroundTruthCuboid {
  Cuboid cuboid;
  int frame = 0;
};

struct PRCurve {
  std::vector<double> scores;  // descending
  std::vector<bool> true_positive;
  std::vector<double> precision;
  std::vector<double> recall;
  double ap = 0.0;
};

// Greedy matching by descending score (ties keep prediction order); each
// prediction takes the best unmatched ground truth of its frame that passes
// the cutoff (IoU >= cutoff, or center distance <= cutoff). AP uses all-point
// interpolation of the precision envelope.
PRCurve average_precision(std::span<const ScoredCuboid> predictions, std::span<const GroundTruthCuboid> truths,
                          MatchMetric metric, double cutoff);

}  // namespace sdfal
