#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "sdfal/alignment.hpp"
#include "sdfal/errors.hpp"
#include "sdfal/experiments.hpp"

using namespace sdfal;

namespace {

const SurfaceExtractor& cars() {
  static const SurfaceExtractor ex(ShapeSpace::default_cars(), QueryGrid{});
  return ex;
}

std::vector<V3v> constants(std::span<const Vec3> v) {
  std::vector<V3v> out;
  for (const Vec3& p : v) out.emplace_back(p);
  return out;
}

double deg(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace

TEST_CASE("point index equals brute force") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts;
  std::vector<std::array<double, 3>> raw;
  for (int i = 0; i < 2000; ++i) {
    // Quantized coordinates produce exact ties.
    const Vec3 p(std::round(20 * u(rng)) / 20, std::round(20 * u(rng)) / 20, u(rng) * 0.3);
    pts.push_back(p);
    raw.push_back({p.x(), p.y(), p.z()});
  }
  for (double cell : {0.01, 0.07, 0.5}) {
    const PointIndex index(pts, cell);
    for (int q = 0; q < 500; ++q) {
      const Vec3 x(1.5 * u(rng), 1.5 * u(rng), 1.5 * u(rng));  // some queries lie outside the grid
      const auto [best, dist] = oracle::brute_nearest(raw, {x.x(), x.y(), x.z()});
      const auto nn = index.nearest(x, 10.0);
      REQUIRE(nn);
      CHECK(nn->index == best);
      CHECK(nn->distance == doctest::Approx(dist).epsilon(1e-12));
      const auto capped = index.nearest(x, 0.9 * dist);
      CHECK_FALSE(capped);
    }
  }
  CHECK_THROWS_AS(PointIndex(pts, 0.0), UsageError);
  CHECK_FALSE(PointIndex(std::vector<Vec3>{}, 0.1).nearest(Vec3::Zero(), 1.0));
}

TEST_CASE("nocs correspondences") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec3> colors;
  for (int i = 0; i < 300; ++i) colors.emplace_back(u(rng), u(rng), u(rng));

  SUBCASE("identical sets pair up one to one") {
    const CorrespondenceSet c = nocs_correspondences(colors, colors);
    REQUIRE(c.size() == colors.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      CHECK(c[i].model == i);
      CHECK(c[i].scene == i);
      CHECK(c[i].distance == 0.0);
    }
  }
  SUBCASE("offset beyond the threshold leaves nothing") {
    std::vector<Vec3> shifted;
    for (const Vec3& c : colors) shifted.push_back(c + Vec3::Constant(0.3));  // 0.5196 apart
    std::vector<Vec3> model = {Vec3::Zero(), Vec3::Constant(0.1), Vec3::Constant(0.2), Vec3::Constant(0.25)};
    CHECK_THROWS_AS(nocs_correspondences(model, std::vector<Vec3>(4, Vec3::Constant(0.8))),
                    InsufficientCorrespondencesError);
    std::vector<Vec3> one = {Vec3(0.5, 0.5, 0.5)};
    std::vector<Vec3> far = {Vec3(0.8, 0.8, 0.8)};
    CHECK_THROWS_AS(nocs_correspondences(one, far), InsufficientCorrespondencesError);
  }
  SUBCASE("model points appear at most once and distances stay below the threshold") {
    std::vector<Vec3> scene;
    for (int i = 0; i < 60; ++i) scene.emplace_back(u(rng), u(rng), u(rng));
    const CorrespondenceSet c = nocs_correspondences(colors, scene, 0.2);
    std::vector<int> seen_model(colors.size(), 0), seen_scene(scene.size(), 0);
    for (const Correspondence& p : c) {
      CHECK(++seen_model[p.model] == 1);
      CHECK(++seen_scene[p.scene] == 1);
      CHECK(p.distance < 0.2);
      CHECK(p.distance == doctest::Approx((colors[p.model] - scene[p.scene]).norm()));
    }
  }
  CHECK_THROWS_AS(nocs_correspondences(std::vector<Vec3>{}, colors), InsufficientCorrespondencesError);
}

TEST_CASE("procrustes") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> a;
  for (int i = 0; i < 20; ++i) a.emplace_back(u(rng), u(rng), u(rng));

  SUBCASE("identity") {
    const SimilarityTransform T = procrustes(a, a);
    CHECK((T.R - Mat3::Identity()).norm() < 1e-12);
    CHECK(T.t.norm() < 1e-12);
    CHECK(T.s == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("known transform is recovered") {
    SimilarityTransform truth;
    truth.R = fixture::random_rotation(rng);
    truth.t = Vec3(3.0, -1.0, 12.0);
    truth.s = 4.2;
    std::vector<Vec3> b;
    for (const Vec3& p : a) b.push_back(truth.apply(p));
    const SimilarityTransform T = procrustes(a, b);
    CHECK((T.R - truth.R).norm() < 1e-9);
    CHECK((T.t - truth.t).norm() < 1e-9);
    CHECK(std::abs(T.s - truth.s) < 1e-9);
  }
  SUBCASE("a reflected target still yields a proper rotation") {
    std::vector<Vec3> b;
    for (const Vec3& p : a) b.push_back(Vec3(-p.x(), p.y(), p.z()) + 0.01 * Vec3(u(rng), u(rng), u(rng)));
    const SimilarityTransform T = procrustes(a, b);
    CHECK(T.R.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((T.R.transpose() * T.R - Mat3::Identity()).norm() < 1e-9);
    CHECK(T.s > 0.0);
  }
  SUBCASE("degenerate input") {
    CHECK_THROWS_AS(procrustes(std::span(a).first(2), std::span(a).first(2)), RankError);
    std::vector<Vec3> line;
    for (int i = 0; i < 10; ++i) line.push_back(Vec3(1, 2, 3) * i);
    CHECK_THROWS_AS(procrustes(line, line), RankError);
    CHECK_THROWS_AS(procrustes(std::span(a).first(5), std::span(a).first(6)), UsageError);
  }
}

TEST_CASE("ransac iteration count") {
  // log(0.1) / log(1 - 0.7^4) = 8.39; log(0.01) / log(1 - 0.7^4) = 16.8.
  CHECK(ransac_iterations(0.9, 0.7, 4) == 9);
  CHECK(ransac_iterations(0.99, 0.7, 4) == 17);
  for (int n : {1, 3, 4, 10}) CHECK(ransac_iterations(0.9, 1.0, n) == 1);
  CHECK(ransac_iterations(0.5, 0.5, 1) == 1);
  CHECK_THROWS_AS(ransac_iterations(0.9, 0.0, 4), UsageError);
  CHECK_THROWS_AS(ransac_iterations(1.0, 0.7, 4), UsageError);
  CHECK_THROWS_AS(ransac_iterations(0.9, 0.7, 0), UsageError);
}

TEST_CASE("ransac procrustes") {
  SUBCASE("noise-free pairs are all inliers") {
    const fixture::PairSet f = fixture::similarity_pairs(1, 50, 0);
    const RansacResult r = ransac_procrustes(f.source, f.target, RansacConfig{});
    CHECK(r.inliers.size() == 50);
    CHECK(r.iterations == 9);
    CHECK((r.pose.t - f.truth.t).norm() < 1e-9);
  }
  SUBCASE("all outliers fail to initialize") {
    const fixture::PairSet f = fixture::similarity_pairs(2, 50, 50);
    CHECK_THROWS_AS(ransac_procrustes(f.source, f.target, RansacConfig{}), InitializationError);
  }
  SUBCASE("too few pairs") {
    const fixture::PairSet f = fixture::similarity_pairs(3, 3, 0);
    CHECK_THROWS_AS(ransac_procrustes(f.source, f.target, RansacConfig{}), InsufficientCorrespondencesError);
  }
  SUBCASE("same seed, same result") {
    const fixture::PairSet f = fixture::similarity_pairs(4, 50, 15);
    RansacConfig cfg;
    cfg.seed = 77;
    const RansacResult a = ransac_procrustes(f.source, f.target, cfg);
    const RansacResult b = ransac_procrustes(f.source, f.target, cfg);
    CHECK(a.inliers == b.inliers);
    CHECK(a.pose.t == b.pose.t);
  }
  SUBCASE("success rate with 30% gross outliers follows the sampling probability") {
    // Success needs one all-inlier sample among 9 draws of 4 out of 50 with
    // 35 inliers: 1 - (1 - C(35,4)/C(50,4))^9.
    const double q = (35.0 * 34 * 33 * 32) / (50.0 * 49 * 48 * 47);
    const double expected = 1.0 - std::pow(1.0 - q, 9);
    const int trials = 400;
    int ok = 0;
    for (int t = 0; t < trials; ++t) {
      const fixture::PairSet f = fixture::similarity_pairs(1000 + t, 50, 15);
      RansacConfig cfg;
      cfg.seed = static_cast<std::uint64_t>(t);
      try {
        const RansacResult r = ransac_procrustes(f.source, f.target, cfg);
        ok += (r.pose.t - f.truth.t).norm() < 0.05 && deg(rotation_angle(r.pose.R, f.truth.R)) < 2.0;
      } catch (const InitializationError&) {
      }
    }
    const double rate = static_cast<double>(ok) / trials;
    const double sd = std::sqrt(expected * (1.0 - expected) / trials);
    MESSAGE("success " << rate << ", all-inlier sample probability " << expected);
    // A lucky contaminated hypothesis may also succeed, so only the lower side
    // is bounded by the sampling probability.
    CHECK(rate > expected - 4.0 * sd);
  }
}

TEST_CASE("2d loss examples") {
  // Colors on a 0.2 grid: a uniform 0.05 shift keeps every color's own copy
  // (0.0866 away) strictly nearest, since the next copy is >= 0.26 away.
  std::vector<Vec3> rendered;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      for (int k = 0; k < 5; ++k) rendered.emplace_back(0.1 + 0.2 * i, 0.1 + 0.2 * j, 0.1 + 0.2 * k);
    }
  }
  const std::vector<V3v> r = constants(rendered);
  const LossTerm same = loss_2d(r, rendered);
  CHECK_FALSE(same.empty);
  CHECK(same.value.value() == 0.0);
  std::vector<Vec3> shifted;
  for (const Vec3& c : rendered) shifted.push_back(c + Vec3::Constant(0.05));
  const LossTerm off = loss_2d(r, shifted);
  CHECK(off.pairs.size() == rendered.size());
  CHECK(off.value.value() == doctest::Approx(std::sqrt(3.0) * 0.05).epsilon(1e-12));
  std::vector<Vec3> far;
  for (const Vec3& c : rendered) far.push_back(c + Vec3::Constant(2.0));
  const LossTerm none = loss_2d(r, far);
  CHECK(none.empty);
  CHECK(none.value.value() == 0.0);
}

TEST_CASE("3d loss examples") {
  std::vector<Vec3> lidar;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) lidar.emplace_back(i, 0.5 * j, 10.0 + j);
  }
  auto shifted = [&](double dx) {
    std::vector<Vec3> out;
    for (const Vec3& l : lidar) out.push_back(l + Vec3(dx, 0, 0));
    return constants(out);
  };
  CHECK(loss_3d(shifted(0.0), lidar).value.value() == 0.0);
  const LossTerm a = loss_3d(shifted(0.1), lidar);
  CHECK(a.value.value() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(a.pairs.size() == lidar.size());
  const LossTerm b = loss_3d(shifted(0.3), lidar);
  CHECK(b.empty);
  CHECK(b.pairs.empty());
  CHECK(b.value.value() == 0.0);
  // The threshold is strict.
  CHECK(loss_3d(shifted(0.25), lidar).empty);
}

TEST_CASE("3d loss gradient is the mean unit residual") {
  ad::Tape tape;
  const std::vector<Vec3> lidar = {Vec3(0, 0, 10), Vec3(2, 0, 10)};
  const ad::Var tx = tape.variable(0.1);
  const std::vector<V3v> pts = {V3v(tx, 0.0, 10.0), V3v(tx + 2.0, 0.1, 10.0)};
  const LossTerm t = loss_3d(pts, lidar);
  const ad::Adjoints adj = tape.backward(t.value);
  const double expected = 0.5 * (1.0 + 0.1 / std::hypot(0.1, 0.1));
  CHECK(adj[tx] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("objective gradient matches finite differences") {
  const GradientFixture f = gradient_fixture(cars(), 32, 1);
  for (LossFlags flags : {LossFlags{true, true}, LossFlags{true, false}, LossFlags{false, true}}) {
    const ad::GradCheckResult r = check_objective_gradient(f.objective, f.pose, f.z, flags, 1e-6);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("objective reports pairs and is zero-pair safe") {
  const GradientFixture f = gradient_fixture(cars(), 32, 1);
  ad::Tape tape;
  const std::vector<double> x = pack_params(f.truth, project_latent(Vec3(0.3, 0.4, 0.8)));
  const std::vector<ad::Var> v = tape.variables(x);
  const ObjectiveValue at_truth = f.objective.evaluate(f.truth.R, v, LossFlags{});
  CHECK(at_truth.count_2d > 100);
  CHECK(at_truth.count_3d > 100);
  CHECK(at_truth.loss_2d.value() < 1e-12);  // the prediction is the ground-truth render

  SimilarityTransform away = f.truth;
  away.t += Vec3(0, 0, 30.0);
  ad::Tape t2;
  const std::vector<ad::Var> v2 = t2.variables(pack_params(away, f.z));
  const ObjectiveValue far = f.objective.evaluate(away.R, v2, LossFlags{false, true});
  CHECK(far.empty_3d);
  CHECK(far.loss_3d.value() == 0.0);
  CHECK(std::isfinite(far.total.value()));
}

TEST_CASE("refinement") {
  const GradientFixture f = gradient_fixture(cars(), 64, 2);
  const LatentCode z_true = project_latent(Vec3(0.3, 0.4, 0.8));

  SUBCASE("ground truth is kept") {
    const RefineResult r = refine(f.objective, f.truth, z_true, RefineConfig{});
    REQUIRE_FALSE(r.failed);
    CHECK(r.trace.size() == 51);
    CHECK((r.pose.t - f.truth.t).norm() < 0.05);
    CHECK(deg(rotation_angle(r.pose.R, f.truth.R)) < 2.0);
  }
  SUBCASE("3d loss recovers a translated start") {
    SimilarityTransform start = f.truth;
    start.t += Vec3(0.2, 0.0, -0.15);
    RefineConfig cfg;
    cfg.loss.use_2d = false;
    const RefineResult r = refine(f.objective, start, z_true, cfg);
    REQUIRE_FALSE(r.failed);
    CHECK((r.pose.t - f.truth.t).norm() < 0.05);
    CHECK(r.trace[r.best_iteration].total() < r.trace.front().total());
  }
  SUBCASE("joint loss improves on a perturbed start") {
    const RefineResult r = refine(f.objective, f.pose, f.z, RefineConfig{});
    REQUIRE_FALSE(r.failed);
    CHECK(r.trace[r.best_iteration].total() < r.trace.front().total());
    CHECK((r.pose.t - f.truth.t).norm() < (f.pose.t - f.truth.t).norm());
    CHECK(std::abs(r.z.vec().norm() - 1.0) < 1e-12);
  }
  SUBCASE("frozen variables stay put") {
    RefineConfig cfg;
    cfg.iterations = 5;
    cfg.optimize_rotation = cfg.optimize_scale = cfg.optimize_shape = false;
    const RefineResult r = refine(f.objective, f.pose, f.z, cfg);
    CHECK(r.pose.R == f.pose.R);
    CHECK(r.pose.s == f.pose.s);
    CHECK(r.z.vec() == f.z.vec());
  }
  SUBCASE("invalid start or schedule is a usage error") {
    SimilarityTransform bad = f.pose;
    bad.s = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(refine(f.objective, bad, f.z, RefineConfig{}), UsageError);
    RefineConfig cfg;
    cfg.pose_lr = 0.0;
    CHECK_THROWS_AS(refine(f.objective, f.pose, f.z, cfg), UsageError);
  }
  SUBCASE("trace csv") {
    RefineConfig cfg;
    cfg.iterations = 2;
    const RefineResult r = refine(f.objective, f.pose, f.z, cfg);
    std::ostringstream out;
    write_trace_csv(out, r.trace);
    std::string line;
    std::istringstream in(out.str());
    std::getline(in, line);
    CHECK(line == "iteration,loss_2d,loss_3d,c2d,c3d");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 3);
  }
}
