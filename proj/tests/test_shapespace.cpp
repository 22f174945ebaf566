#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "sdfal/shapespace.hpp"

using namespace sdfal;

namespace {

ShapeSpace two_spheres(double r0, double r1) {
  return ShapeSpace({make_sphere_shape(r0), make_sphere_shape(r1)}, {Vec3::UnitX(), -Vec3::UnitX()}, 8.0);
}

}  // namespace

TEST_CASE("sphere basis values") {
  ShapeSpace space({make_sphere_shape(0.5)}, {Vec3::UnitX()}, 8.0);
  const LatentCode z = LatentCode::from(Vec3::UnitY());
  CHECK(space.sdf(Vec3(0, 0, 0), z) == doctest::Approx(-0.5));
  CHECK(space.sdf(Vec3(1, 0, 0), z) == doctest::Approx(0.5));
}

TEST_CASE("blend at latent midpoint") {
  ShapeSpace space = two_spheres(0.4, 0.5);
  // z orthogonal to both anchors: equal scores, weights 1/2 each.
  const LatentCode z = LatentCode::from(Vec3::UnitZ());
  const auto w = space.blend_weights(z);
  CHECK(w[0] == doctest::Approx(0.5));
  CHECK(space.sdf(Vec3(1, 0, 0), z) == doctest::Approx(0.5 * 0.6 + 0.5 * 0.5));
  CHECK(space.sdf(Vec3(1, 0, 0), z) == doctest::Approx(0.55));
}

TEST_CASE("non-unit latent is rejected") {
  CHECK_THROWS_AS(LatentCode::from(Vec3(2, 0, 0)), UsageError);
}

TEST_CASE("nocs color") {
  CHECK((nocs_color(Vec3(0, 0, 0)) - Vec3(0.5, 0.5, 0.5)).norm() < 1e-15);
  CHECK((nocs_color(Vec3(0.5, 0, 0)) - Vec3(1.0, 0.5, 0.5)).norm() < 1e-15);
  CHECK((nocs_color(Vec3(-0.25, 0.1, 0)) - Vec3(0.25, 0.6, 0.5)).norm() < 1e-15);
  CHECK((nocs_color(Vec3(0.9, -0.9, 0)) - Vec3(1.0, 0.0, 0.5)).norm() < 1e-15);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.28, 0.28);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    CHECK((nocs_decode(nocs_color(p)) - p).norm() < 1e-12);
  }
}

TEST_CASE("project latent") {
  CHECK((project_latent(Vec3(2, 0, 0)).vec() - Vec3(1, 0, 0)).norm() < 1e-15);
  const Vec3 d = project_latent(Vec3(1, 1, 1)).vec();
  CHECK(d.x() == doctest::Approx(0.5774).epsilon(1e-4));
  CHECK(d.z() == doctest::Approx(0.5774).epsilon(1e-4));
  const Vec3 unit = Vec3(0.6, 0.0, 0.8);
  CHECK(project_latent(unit).vec() == unit);
  CHECK_THROWS_AS(project_latent(Vec3::Zero()), NumericError);
}

TEST_CASE("exact primitives have unit gradient and are 1-Lipschitz") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  const std::vector<BasisShape> shapes = {
      make_sphere_shape(0.3, Vec3(0.05, 0, 0)), make_box_shape(Vec3(0.3, 0.15, 0.2), 0.03),
      make_capsule_shape(Vec3(-0.2, 0, 0), Vec3(0.2, 0.1, 0), 0.12)};
  for (const BasisShape& shape : shapes) {
    ShapeSpace space({shape}, {Vec3::UnitX()}, 8.0);
    const auto z = LatentCode::from(Vec3::UnitX());
    int checked = 0;
    for (int i = 0; i < 300; ++i) {
      const Vec3 x(u(rng), u(rng), u(rng));
      ad::Tape tape;
      V3v xv(tape.variable(x.x()), tape.variable(x.y()), tape.variable(x.z()));
      const ad::Var s = space.sdf(xv, std::array<ad::Var, 3>{1.0, 0.0, 0.0});
      if (std::abs(s.value()) < 1e-3) continue;
      const auto adj = tape.backward(s);
      const double g = std::sqrt(std::pow(adj[xv.x], 2) + std::pow(adj[xv.y], 2) + std::pow(adj[xv.z], 2));
      // Interior points equidistant to two faces are kinks; skip the exact ties.
      if (std::abs(g - 1.0) > 1e-6) {
        CHECK(s.value() < 0.0);
        continue;
      }
      ++checked;
      const Vec3 y(u(rng), u(rng), u(rng));
      CHECK(std::abs(space.sdf(x, z) - space.sdf(y, z)) <= (x - y).norm() + 1e-12);
    }
    CHECK(checked > 200);
  }
}

TEST_CASE("car basis shapes fit in the unit-diameter ball") {
  ShapeSpace space = ShapeSpace::default_cars();
  REQUIRE(space.basis_count() == 6);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (const BasisShape& b : space.basis_shapes()) {
    // Points on the sphere of radius 0.5 are never inside.
    for (int i = 0; i < 2000; ++i) {
      const Vec3 d = Vec3(n(rng), n(rng), n(rng)).normalized();
      CHECK(b.sdf(V3d(0.5 * d)) >= 0.0);
    }
    CHECK(b.sdf(V3d(Vec3::Zero())) < 0.0);
  }
}

TEST_CASE("latent interpolation continuity") {
  ShapeSpace space = ShapeSpace::default_cars();
  const Vec3 x(0.2, -0.05, 0.1);
  const Vec3 z1 = Vec3(0.3, 0.5, 0.8).normalized();
  double prev = 1e9;
  for (double gap = 1e-1; gap > 1e-7; gap /= 10.0) {
    const Vec3 z2 = (z1 + Vec3(gap, -gap, 0.0)).normalized();
    const double diff = std::abs(space.sdf(x, LatentCode::from(z1)) - space.sdf(x, LatentCode::from(z2)));
    CHECK(diff <= prev);
    prev = diff;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("blended sdf gradient wrt latent matches finite differences") {
  ShapeSpace space = ShapeSpace::default_cars();
  const Vec3 x(0.21, 0.02, -0.07);
  const std::vector<double> z0 = {0.2, -0.6, 0.77};
  auto r = ad::grad_check(
      [&](ad::Tape&, std::span<const ad::Var> z) {
        return space.sdf(V3v(x), std::array<ad::Var, 3>{z[0], z[1], z[2]});
      },
      z0, 1e-6);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("shape space file round trip") {
  ShapeSpace space = ShapeSpace::default_cars();
  std::stringstream ss;
  space.save(ss);
  ShapeSpace back = ShapeSpace::load(ss);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int i = 0; i < 100; ++i) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const LatentCode z = project_latent(Vec3(u(rng), u(rng), u(rng)));
    CHECK(space.sdf(x, z) == back.sdf(x, z));
  }
  std::stringstream bad("{\"schema\": \"other\"}");
  CHECK_THROWS_AS(ShapeSpace::load(bad), DataError);
}

TEST_CASE("decoder weights round trip bit-exact") {
  TinyDecoder d = TinyDecoder::initialize({8, 8}, 42);
  std::stringstream ss;
  d.save(ss);
  TinyDecoder back = TinyDecoder::load(ss);
  CHECK(back == d);
  CHECK(back.forward(Vec3(0.1, 0.2, 0.3), Vec3(0, 0, 1)) == d.forward(Vec3(0.1, 0.2, 0.3), Vec3(0, 0, 1)));
}

TEST_CASE("decoder manual gradient matches tape gradient") {
  // One SGD-free check: the latent gradient of the training backprop equals
  // the tape gradient of the forward pass.
  TinyDecoder d = TinyDecoder::initialize({6, 5}, 3);
  const Vec3 x(0.1, -0.2, 0.05);
  const std::vector<double> z0 = {0.0, 0.6, 0.8};
  auto r = ad::grad_check(
      [&](ad::Tape&, std::span<const ad::Var> z) {
        return d.forward(V3v(x), std::array<ad::Var, 3>{z[0], z[1], z[2]});
      },
      z0, 1e-6);
  CHECK(r.max_relative_error < 1e-7);
}

TEST_CASE("decoder with zero epochs equals initialization") {
  ShapeSpace space = two_spheres(0.3, 0.4);
  const std::vector<LatentCode> zs = {LatentCode::from(Vec3::UnitX())};
  auto samples = sample_sdf(space, zs, 200, 0.5, 1);
  DecoderTrainConfig cfg;
  cfg.epochs = 0;
  auto result = train_decoder(samples, cfg);
  CHECK(result.decoder == TinyDecoder::initialize(cfg.hidden, cfg.seed));
  CHECK(std::isfinite(decoder_mae(result, samples, cfg.clamp)));
}

TEST_CASE("decoder divergence is reported") {
  ShapeSpace space = two_spheres(0.3, 0.4);
  const std::vector<LatentCode> zs = {LatentCode::from(Vec3::UnitX())};
  auto samples = sample_sdf(space, zs, 64, 0.5, 1);
  samples[3].s = std::nan("");
  DecoderTrainConfig cfg;
  cfg.epochs = 2;
  CHECK_THROWS_AS(train_decoder(samples, cfg), TrainingError);
}

TEST_CASE("decoder fits two spheres") {
  const ShapeSpace space = two_spheres(0.3, 0.4);
  const std::vector<LatentCode> zs = {LatentCode::from(Vec3::UnitX()), LatentCode::from(-Vec3::UnitX())};
  const auto train = sample_sdf(space, zs, 10000, 0.5, 1);
  const auto held_out = sample_sdf(space, zs, 2000, 0.5, 2);
  const DecoderTrainConfig cfg;  // 200 epochs
  const auto result = train_decoder(train, cfg);
  const double mae = decoder_mae(result, held_out, cfg.clamp);
  MESSAGE("held-out MAE " << mae);
  CHECK(mae < 0.02);
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
}

TEST_CASE("decoder on a single-shape space ignores the code") {
  const ShapeSpace space({make_sphere_shape(0.35)}, {Vec3::UnitX()}, 8.0);
  const std::vector<LatentCode> zs = {LatentCode::from(Vec3::UnitX()), LatentCode::from(Vec3::UnitY())};
  const auto train = sample_sdf(space, zs, 10000, 0.5, 3);
  const auto held_out = sample_sdf(space, zs, 2000, 0.5, 4);
  const DecoderTrainConfig cfg;
  const auto result = train_decoder(train, cfg);
  CHECK(decoder_mae(result, held_out, cfg.clamp) < 0.02);
  const Vec3 a = result.code_for(zs[0].vec()), b = result.code_for(zs[1].vec());
  double diff = 0.0;
  for (const DecoderSample& s : held_out) {
    diff += std::abs(std::clamp(result.decoder.forward(s.x, a), -cfg.clamp, cfg.clamp) -
                     std::clamp(result.decoder.forward(s.x, b), -cfg.clamp, cfg.clamp));
  }
  CHECK(diff / held_out.size() < 0.02);
}
