#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "sdfal/errors.hpp"
#include "sdfal/metrics.hpp"
#include "sdfal/transform.hpp"

using namespace sdfal;

namespace {

Cuboid box(double x, double y, double z, double l, double w, double h, double yaw) {
  Cuboid c;
  c.center = Vec3(x, y, z);
  c.dims = Vec3(l, w, h);
  c.yaw = yaw;
  return c;
}

oracle::Box to_oracle(const Cuboid& c) {
  return {{c.center.x(), c.center.y(), c.center.z()}, {c.dims.x(), c.dims.y(), c.dims.z()}, c.yaw};
}

Cuboid random_cuboid(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return box(2.0 * u(rng), 0.5 * u(rng), 2.0 * u(rng), 1.0 + 3.0 * u(rng), 1.0 + u(rng), 1.0 + u(rng),
             std::numbers::pi * (2.0 * u(rng) - 1.0));
}

}  // namespace

TEST_CASE("bev iou examples") {
  const Cuboid a = box(0, 0, 0, 1, 1, 1, 0);
  CHECK(bev_iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bev_iou(a, box(0.5, 0, 0, 1, 1, 1, 0)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const double octagon = 2.0 * (std::sqrt(2.0) - 1.0);  // intersection area; IoU = a / (2 - a)
  CHECK(bev_iou(a, box(0, 0, 0, 1, 1, 1, std::numbers::pi / 4)) ==
        doctest::Approx(octagon / (2.0 - octagon)).epsilon(1e-12));
  CHECK(bev_iou(a, box(5, 0, 0, 1, 1, 1, 0)) == 0.0);
}

TEST_CASE("rotated square intersection is the regular octagon") {
  // Unit square and its 45 degree copy intersect in a regular octagon of
  // area 2 (sqrt 2 - 1); the shoelace area of the clipped polygon must match.
  const Cuboid a = box(0, 0, 0, 1, 1, 1, 0);
  const Cuboid b = box(0, 0, 0, 1, 1, 1, std::numbers::pi / 4);
  const std::vector<Vec2> pa = a.footprint(), pb = b.footprint();
  const std::vector<Vec2> clipped = clip_convex(pa, pb);
  CHECK(clipped.size() == 8);
  CHECK(polygon_area(clipped) == doctest::Approx(2.0 * (std::sqrt(2.0) - 1.0)).epsilon(1e-12));
}

TEST_CASE("3d iou examples") {
  const Cuboid a = box(0, 0, 0, 1, 1, 1, 0);
  CHECK(iou_3d(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(iou_3d(a, box(0, 3, 0, 1, 1, 1, 0)) == 0.0);
  // Offset 0.5 along x and 0.5 along the height axis: 0.25 / 1.75.
  CHECK(iou_3d(a, box(0.5, 0.5, 0, 1, 1, 1, 0)) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("center distance matching is inclusive") {
  const Cuboid a = box(0, 0, 0, 4, 2, 1.5, 0.3);
  CHECK(ns_match(a, box(0, 5, 0, 1, 1, 1, -2.0), 0.5));
  CHECK_FALSE(ns_match(a, box(0.7, 0, 0, 4, 2, 1.5, 0.3), 0.5));
  CHECK(ns_match(a, box(0.7, 0, 0, 4, 2, 1.5, 0.3), 1.0));
  CHECK(ns_match(a, box(0.6, 0, 0.8, 4, 2, 1.5, 0.3), 1.0));  // exactly 1 m
}

TEST_CASE("iou is symmetric and invariant to a shared rigid motion") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Cuboid a = random_cuboid(rng), b = random_cuboid(rng);
    CHECK(bev_iou(a, b) == bev_iou(b, a));
    CHECK(iou_3d(a, b) == iou_3d(b, a));
    const double yaw = std::numbers::pi * u(rng);
    const Vec3 shift(5.0 * u(rng), u(rng), 5.0 * u(rng));
    auto move = [&](Cuboid c) {
      // Rotation about y by yaw maps (x, z) so that the cuboid yaw grows by yaw.
      const double cy = std::cos(yaw), sy = std::sin(yaw);
      const Vec3 p = c.center;
      c.center = Vec3(cy * p.x() + sy * p.z(), p.y(), -sy * p.x() + cy * p.z()) + shift;
      c.yaw = wrap_angle(c.yaw + yaw);
      return c;
    };
    CHECK(std::abs(bev_iou(move(a), move(b)) - bev_iou(a, b)) < 1e-9);
    CHECK(std::abs(iou_3d(move(a), move(b)) - iou_3d(a, b)) < 1e-9);
    CHECK(iou_3d(a, b) <= bev_iou(a, b) + 1e-12);
  }
}

TEST_CASE("3d iou equals bev iou for identical aligned heights") {
  const Cuboid a = box(0, 0.2, 0, 4, 2, 1.5, 0.4);
  const Cuboid b = box(0.7, 0.2, -0.3, 3.5, 1.8, 1.5, -0.2);
  CHECK(iou_3d(a, b) == doctest::Approx(bev_iou(a, b)).epsilon(1e-12));
}

TEST_CASE("iou agrees with a Monte-Carlo oracle") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    const Cuboid a = random_cuboid(rng), b = random_cuboid(rng);
    CHECK(std::abs(bev_iou(a, b) - oracle::mc_iou(to_oracle(a), to_oracle(b), true, 200000, i)) < 0.005);
    CHECK(std::abs(iou_3d(a, b) - oracle::mc_iou(to_oracle(a), to_oracle(b), false, 200000, i)) < 0.005);
  }
}

TEST_CASE("invalid cuboids are rejected") {
  CHECK_THROWS_AS(bev_iou(box(0, 0, 0, 0, 1, 1, 0), box(0, 0, 0, 1, 1, 1, 0)), UsageError);
  CHECK_THROWS_AS(iou_3d(box(0, 0, 0, 1, 1, 1, NAN), box(0, 0, 0, 1, 1, 1, 0)), UsageError);
}

TEST_CASE("average precision") {
  const Cuboid g0 = box(0, 0, 10, 4, 2, 1.5, 0), g1 = box(8, 0, 20, 4, 2, 1.5, 0);
  const std::vector<GroundTruthCuboid> gt = {{g0, 0}, {g1, 0}};

  SUBCASE("hand-computed steps") {
    // TP(0.9), FP(0.8), TP(0.7): precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    // Envelope 1 over [0, 1/2] and 2/3 over [1/2, 1]: 1/2 + 1/3 = 5/6.
    const std::vector<ScoredCuboid> pred = {{g0, 0.9, 0}, {box(-20, 0, 30, 4, 2, 1.5, 0), 0.8, 0}, {g1, 0.7, 0}};
    for (MatchMetric m : {MatchMetric::kBev, MatchMetric::kIou3d, MatchMetric::kCenterDistance}) {
      const PRCurve c = average_precision(pred, gt, m, 0.5);
      CHECK(c.ap == 5.0 / 6.0);
      CHECK(c.true_positive == std::vector<bool>{true, false, true});
    }
  }
  SUBCASE("perfect and empty") {
    const std::vector<ScoredCuboid> pred = {{g1, 0.3, 0}, {g0, 0.6, 0}};
    CHECK(average_precision(pred, gt, MatchMetric::kIou3d, 0.7).ap == 1.0);
    CHECK(average_precision(std::vector<ScoredCuboid>{}, gt, MatchMetric::kBev, 0.5).ap == 0.0);
  }
  SUBCASE("each ground truth matches once and frames are separate") {
    const std::vector<ScoredCuboid> pred = {{g0, 0.9, 0}, {g0, 0.8, 0}, {g1, 0.7, 1}};
    const PRCurve c = average_precision(pred, gt, MatchMetric::kBev, 0.5);
    CHECK(c.true_positive == std::vector<bool>{true, false, false});
    CHECK(c.ap == doctest::Approx(0.5));
  }
  SUBCASE("monotone rescoring leaves AP unchanged") {
    const std::vector<ScoredCuboid> pred = {
        {g0, 0.9, 0}, {box(0.8, 0, 10.2, 4, 2, 1.5, 0.1), 0.8, 0}, {box(8.3, 0, 20, 4, 2, 1.5, 0), 0.4, 0}};
    std::vector<ScoredCuboid> rescored = pred;
    for (ScoredCuboid& p : rescored) p.score = std::exp(3.0 * p.score) - 7.0;
    for (MatchMetric m : {MatchMetric::kBev, MatchMetric::kIou3d, MatchMetric::kCenterDistance}) {
      CHECK(average_precision(pred, gt, m, 0.5).ap == average_precision(rescored, gt, m, 0.5).ap);
    }
  }
  SUBCASE("recall is non-decreasing and ap lies in [0, 1]") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredCuboid> pred;
    for (int i = 0; i < 20; ++i) pred.push_back({box(10 * u(rng), 0, 10 + 10 * u(rng), 4, 2, 1.5, 0), u(rng), 0});
    const PRCurve c = average_precision(pred, gt, MatchMetric::kCenterDistance, 2.0);
    for (std::size_t i = 1; i < c.recall.size(); ++i) CHECK(c.recall[i] >= c.recall[i - 1]);
    CHECK(c.ap >= 0.0);
    CHECK(c.ap <= 1.0);
  }
}
