#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "sdfal/renderer.hpp"

using namespace sdfal;

namespace {

const LatentCode kZ = LatentCode::from(Vec3::UnitX());

ShapeSpace sphere_space() { return ShapeSpace({make_sphere_shape(0.5)}, {Vec3::UnitX()}, 8.0); }

Camera cam128() { return Camera{500.0, 500.0, 64.0, 64.0, 128, 128}; }

SimilarityTransform at(const Vec3& t, double s = 1.0, double yaw = 0.0) {
  SimilarityTransform p;
  p.R = yaw_rotation(yaw);
  p.t = t;
  p.s = s;
  return p;
}

}  // namespace

TEST_CASE("plane depth") {
  const Camera cam = cam128();
  const Vec3 n(0, 0, -1), p(0, 0, 5);
  CHECK(*plane_depth(n, p, cam.cx, cam.cy, cam) == doctest::Approx(5.0).epsilon(1e-15));
  for (double u : {0.5, 17.5, 127.5}) CHECK(*plane_depth(n, p, u, 3.5, cam) == doctest::Approx(5.0).epsilon(1e-15));
  const double a = 10.0 * std::numbers::pi / 180.0;
  const Vec3 tilted(std::sin(a), 0, -std::cos(a));
  const Vec3 q(0.2, -0.1, 5.0);
  for (double u : {3.5, 64.0, 120.5}) {
    const double d = *plane_depth(tilted, q, u, 40.5, cam);
    const Vec3 P = d * cam.ray(u, 40.5);
    CHECK(std::abs(tilted.dot(P - q)) < 1e-9);
  }
  // Plane containing the ray: grazing, skipped.
  CHECK_FALSE(plane_depth(Vec3(1, 0, 0), Vec3(0, 0, 5), cam.cx, cam.cy, cam).has_value());
}

TEST_CASE("disc mask") {
  const Vec3 p(0, 0, 5);
  CHECK(disc_mask(p, p, 0.04) == 0.04);
  CHECK(disc_mask(p, p + Vec3(0.04, 0, 0), 0.04) == 0.0);
  CHECK(disc_mask(p, p + Vec3(0.02, 0, 0), 0.04) == doctest::Approx(0.02));
  CHECK(disc_mask(p, p + Vec3(1, 0, 0), 0.04) == 0.0);
}

TEST_CASE("composite") {
  RenderConfig cfg;
  const Vec3 red(1, 0, 0), blue(0, 0, 1);
  auto one = composite(std::vector<DiscSample>{{5.0, 0.02, red}}, cfg);
  CHECK(one.weights[0] == 1.0);
  CHECK(to_eigen(one.color) == red);
  auto two = composite(std::vector<DiscSample>{{5.0, 0.02, red}, {5.0, 0.02, blue}}, cfg);
  CHECK(two.weights[0] == doctest::Approx(0.5));
  CHECK((to_eigen(two.color) - Vec3(0.5, 0, 0.5)).norm() < 1e-15);
  cfg.sigma = 1e4;
  auto front = composite(std::vector<DiscSample>{{4.0, 0.02, red}, {6.0, 0.02, blue}}, cfg);
  CHECK(front.weights[0] > 1.0 - 1e-12);
  // Non-contributing discs get zero weight and do not affect the rest.
  auto masked = composite(std::vector<DiscSample>{{4.0, 0.0, blue}, {6.0, 0.01, red}}, cfg);
  CHECK(masked.weights[0] == 0.0);
  CHECK(masked.weights[1] == 1.0);
  auto none = composite(std::vector<DiscSample>{{4.0, 0.0, blue}}, cfg);
  CHECK_FALSE(none.covered);
  CHECK(std::isinf(none.depth));
}

TEST_CASE("sphere silhouette is a filled disc and weights are normalized") {
  const SurfacePointSet pts = project_surface(sphere_space(), QueryGrid{}, kZ);
  const RenderOutput out = render(pts, at(Vec3(0, 0, 5)), cam128(), RenderConfig{});
  CHECK_FALSE(out.empty);
  CHECK(oracle::count_holes(out.mask, out.width, out.height) == 0);
  double worst = 0.0;
  for (std::size_t px = 0; px < out.mask.size(); ++px) {
    const std::size_t b = out.fragments.pixel_begin[px], e = out.fragments.pixel_begin[px + 1];
    if (b == e) continue;
    double total = 0.0;
    for (std::size_t k = b; k < e; ++k) total += out.weight[k];
    worst = std::max(worst, std::abs(total - 1.0));
    CHECK(out.depth[px] > 0.0);
  }
  CHECK(worst < 1e-9);
  // Radius of the covered region against the projected sphere radius.
  int covered = 0;
  for (double m : out.mask) covered += m > 0.0;
  const double r_px = 500.0 * 0.5 / std::sqrt(25.0 - 0.25);
  const double r_est = std::sqrt(covered / std::numbers::pi);
  CHECK(r_est > r_px);
  CHECK(r_est < r_px + 500.0 * 2.0 * disc_diameter(QueryGrid{}) / 5.0);
}

TEST_CASE("coarse grid silhouette agrees with the default grid") {
  const SurfacePointSet fine = project_surface(sphere_space(), QueryGrid{}, kZ);
  const SurfacePointSet coarse = project_surface(sphere_space(), QueryGrid::cube(24), kZ);
  const RenderOutput a = render(fine, at(Vec3(0, 0, 5)), cam128(), RenderConfig{});
  const RenderOutput b = render(coarse, at(Vec3(0, 0, 5)), cam128(), RenderConfig{});
  CHECK(oracle::mask_iou(a.mask, b.mask) >= 0.95);
}

TEST_CASE("bounding-box rasterization is bit-identical to a full scan") {
  ShapeSpace space = ShapeSpace::default_cars();
  const SurfacePointSet pts = project_surface(space, QueryGrid::cube(24), project_latent(Vec3(0.3, 0.2, 0.9)));
  RenderConfig cfg;
  const Camera cam{300.0, 300.0, 40.0, 30.0, 80, 60};
  const RenderOutput a = render(pts, at(Vec3(0.3, 0.1, 6), 4.5, 0.7), cam, cfg);
  cfg.full_scan = true;
  const RenderOutput b = render(pts, at(Vec3(0.3, 0.1, 6), 4.5, 0.7), cam, cfg);
  CHECK(a.fragments.disc == b.fragments.disc);
  CHECK(a.fragments.depth == b.fragments.depth);
  CHECK(a.fragments.mask == b.fragments.mask);
  CHECK(a.weight == b.weight);
  CHECK(a.depth == b.depth);
  bool same = true;
  for (std::size_t i = 0; i < a.nocs.size(); ++i) same = same && a.nocs[i] == b.nocs[i];
  CHECK(same);
}

TEST_CASE("golden render") {
  ShapeSpace space = ShapeSpace::default_cars();
  const SurfacePointSet pts = project_surface(space, QueryGrid::cube(32), project_latent(Vec3(0.5, -0.2, 0.4)));
  const Camera cam{240.0, 240.0, 32.0, 24.0, 64, 48};
  const RenderOutput out = render(pts, at(Vec3(0.2, 0.3, 8), 4.4, 2.1), cam, RenderConfig{});
  std::ostringstream img;
  write_ppm(img, out.width, out.height, out.nocs);
  // Pinned after inspecting the exported image.
  CHECK(oracle::fnv1a(img.str()) == 8666805898651663111ULL);
}

TEST_CASE("monotone opacity of the lowest-score disc") {
  ShapeSpace space = ShapeSpace::default_cars();
  const SurfacePointSet pts = project_surface(space, QueryGrid::cube(24), project_latent(Vec3(0.1, 0.4, 0.9)));
  const Camera cam{300.0, 300.0, 40.0, 30.0, 80, 60};
  std::vector<double> prev;
  for (double sigma : {1.0, 10.0, 40.0, 400.0, 1e4}) {
    RenderConfig cfg;
    cfg.sigma = sigma;
    const RenderOutput out = render(pts, at(Vec3(0, 0, 6), 4.5, 0.4), cam, cfg);
    std::vector<double> best(out.mask.size(), 0.0);
    for (std::size_t px = 0; px < out.mask.size(); ++px) {
      const std::size_t b = out.fragments.pixel_begin[px], e = out.fragments.pixel_begin[px + 1];
      std::size_t arg = b;
      for (std::size_t k = b; k < e; ++k) {
        if (out.fragments.depth[k] * out.fragments.mask[k] < out.fragments.depth[arg] * out.fragments.mask[arg]) arg = k;
      }
      if (b < e) best[px] = out.weight[arg];
    }
    if (!prev.empty()) {
      bool monotone = true;
      for (std::size_t px = 0; px < best.size(); ++px) monotone = monotone && best[px] >= prev[px] - 1e-15;
      CHECK(monotone);
    }
    prev = best;
  }
}

TEST_CASE("depth ordering at high sigma") {
  // Two stacked fronto-parallel layers of jittered discs (no exact score
  // ties) with distinct colors.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  DiscSet discs;
  discs.diameter = 0.05;
  for (int i = -10; i <= 10; ++i) {
    for (int j = -10; j <= 10; ++j) {
      discs.centers.emplace_back(0.03 * i + jitter(rng), 0.03 * j + jitter(rng), 4.0);
      discs.normals.emplace_back(0, 0, -1);
      discs.colors.emplace_back(0.5 + 0.02 * i, 0.5 + 0.02 * j, 0.1);
      discs.centers.emplace_back(0.03 * i + jitter(rng), 0.03 * j + jitter(rng), 6.0);
      discs.normals.emplace_back(0, 0, -1);
      discs.colors.emplace_back(0.1, 0.5 + 0.02 * i, 0.9);
    }
  }
  RenderConfig cfg;
  cfg.sigma = 1e4;
  const Camera cam{300.0, 300.0, 32.0, 32.0, 64, 64};
  const RenderOutput out = render_discs(discs, cam, cfg);
  // "Nearest" is the disc with the lowest score D * M, which is what the
  // softmax of -D * sigma * M selects as sigma grows. Pixels whose two best
  // scores differ by less than 12 / sigma are near-ties and stay blended.
  std::size_t covered = 0, matched = 0, separated = 0, separated_matched = 0, front = 0;
  for (std::size_t px = 0; px < out.mask.size(); ++px) {
    const std::size_t b = out.fragments.pixel_begin[px], e = out.fragments.pixel_begin[px + 1];
    if (b == e) continue;
    std::vector<double> score;
    for (std::size_t k = b; k < e; ++k) score.push_back(out.fragments.depth[k] * out.fragments.mask[k]);
    const std::size_t arg = b + (std::min_element(score.begin(), score.end()) - score.begin());
    std::sort(score.begin(), score.end());
    const bool ok = (out.nocs[px] - discs.colors[out.fragments.disc[arg]]).cwiseAbs().maxCoeff() < 1e-3;
    ++covered;
    matched += ok;
    if (score.size() == 1 || cfg.sigma * (score[1] - score[0]) >= 12.0) {
      ++separated;
      separated_matched += ok;
    }
    front += out.fragments.depth[arg] < 5.0;
  }
  MESSAGE("matched " << matched << " / " << covered << ", front layer wins " << front);
  CHECK(separated_matched == separated);
  CHECK(static_cast<double>(matched) / covered >= 0.95);
}

namespace {

// Builds camera-frame differentiable discs: z -> surface -> cull -> pose.
struct Scene {
  SurfaceExtractor extractor;
  std::vector<std::uint32_t> band;
  std::vector<std::uint32_t> visible;
  Mat3 R;
};

DiffDiscs make_discs(const Scene& sc, std::span<const ad::Var> v) {
  // v = (tx, ty, tz, s, zx, zy, zz)
  const DiffSurface surf = sc.extractor.extract_diff({v[4], v[5], v[6]}, &sc.band);
  DiffDiscs d;
  const V3v t(v[0], v[1], v[2]);
  for (std::uint32_t i : sc.visible) {
    d.centers.push_back(mul(sc.R, surf.points[i]) * v[3] + t);
    d.normals.push_back(mul(sc.R, surf.normals[i]));
    d.colors.push_back(surf.colors[i]);
  }
  d.diameter = v[3] * surf.diameter;
  return d;
}

}  // namespace

TEST_CASE("fused render gradient matches finite differences and the primitive route") {
  ShapeSpace space = ShapeSpace::default_cars();
  Scene sc{SurfaceExtractor(space, QueryGrid::cube(20)), {}, {}, yaw_rotation(0.6)};
  const Vec3 z0 = Vec3(0.3, 0.4, 0.8).normalized();
  const SurfacePointSet pts = sc.extractor.extract(project_latent(z0));
  sc.band = pts.grid_index;
  const SimilarityTransform pose = at(Vec3(0.2, 0.1, 7.0), 4.5, 0.6);
  sc.visible = visible_indices(pts.points, pts.normals, pose);
  const Camera cam{200.0, 200.0, 16.0, 16.0, 32, 32};
  RenderConfig cfg;
  const std::vector<double> x0 = {0.2, 0.1, 7.0, 4.5, z0.x(), z0.y(), z0.z()};

  // Structure at x0.
  ad::Tape tape;
  const std::vector<ad::Var> v0 = tape.variables(x0);
  const DiffRender base = render_diff(make_discs(sc, v0), cam, cfg);
  REQUIRE(base.colors.size() > 100);
  const Fragments frozen = base.fragments;

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> coeff(cam.width * cam.height);
  for (Vec3& c : coeff) c = Vec3(u(rng), u(rng), u(rng));

  auto loss = [&](ad::Tape&, std::span<const ad::Var> v) {
    const DiffRender r = render_diff(make_discs(sc, v), cam, cfg, &frozen);
    ad::Var total = 0.0;
    for (std::uint32_t px : r.covered_pixels) {
      total = total + dot(r.colors[r.slot[px]], V3v(coeff[px]));
    }
    return total / static_cast<double>(r.covered_pixels.size());
  };
  const auto check = ad::grad_check(loss, x0, 1e-5);
  CHECK(check.max_relative_error < 1e-3);

  // Same loss through primitive tape ops: depth, mask and softmax per pixel.
  ad::Tape t2;
  const std::vector<ad::Var> v2 = t2.variables(x0);
  const DiffDiscs d2 = make_discs(sc, v2);
  ad::Var total = 0.0;
  std::size_t count = 0;
  for (std::size_t px = 0; px + 1 < frozen.pixel_begin.size(); ++px) {
    const std::size_t b = frozen.pixel_begin[px], e = frozen.pixel_begin[px + 1];
    if (b == e) continue;
    const V3v ray(cam.pixel_ray(static_cast<int>(px % cam.width), static_cast<int>(px / cam.width)));
    std::vector<ad::Var> depth, mask;
    std::vector<V3v> colors;
    for (std::size_t k = b; k < e; ++k) {
      const std::uint32_t i = frozen.disc[k];
      const ad::Var D = dot(d2.normals[i], d2.centers[i]) / dot(d2.normals[i], ray);
      depth.push_back(D);
      mask.push_back(d2.diameter - length(d2.centers[i] - ray * D));
      colors.push_back(d2.colors[i]);
    }
    const Composite<ad::Var> c = composite<ad::Var>(depth, mask, colors, cfg);
    total = total + dot(c.color, V3v(coeff[px]));
    ++count;
  }
  total = total / static_cast<double>(count);
  const ad::Adjoints a2 = t2.backward(total);
  double worst = 0.0;
  for (std::size_t j = 0; j < x0.size(); ++j) {
    worst = std::max(worst, std::abs(a2[v2[j]] - check.analytic[j]) / std::max(1.0, std::abs(a2[v2[j]])));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("empty render is flagged") {
  const SurfacePointSet pts = project_surface(sphere_space(), QueryGrid::cube(16), kZ);
  const RenderOutput behind = render(pts, at(Vec3(0, 0, -5)), cam128(), RenderConfig{});
  CHECK(behind.empty);
  const RenderOutput aside = render(pts, at(Vec3(50, 0, 5)), cam128(), RenderConfig{});
  CHECK(aside.empty);
}

TEST_CASE("image export") {
  const SurfacePointSet pts = project_surface(sphere_space(), QueryGrid::cube(16), kZ);
  const Camera cam{100.0, 100.0, 8.0, 6.0, 16, 12};
  const RenderOutput out = render(pts, at(Vec3(0, 0, 5), 0.5), cam, RenderConfig{});
  std::ostringstream ppm;
  write_ppm(ppm, out.width, out.height, out.nocs);
  const std::string s = ppm.str();
  CHECK(s.rfind("P6\n", 0) == 0);
  CHECK(s.size() == std::string("P6\n# sdfal/nocs/v1\n16 12\n255\n").size() + 16 * 12 * 3);
  std::ostringstream dep;
  write_depth(dep, out.width, out.height, out.depth);
  std::istringstream in(dep.str());
  std::string schema;
  std::getline(in, schema);
  CHECK(schema == "# sdfal/depth/v1");
  int w = 0, h = 0;
  in >> w >> h;
  CHECK(w == 16);
  CHECK(h == 12);
  std::string first;
  in >> first;
  CHECK(first == "inf");
}

TEST_CASE("camera validation") {
  Camera c{100.0, 100.0, 8.0, 6.0, 16, 12};
  CHECK_NOTHROW(c.validate());
  c.cx = -3.0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK_NOTHROW(c.validate(false));
  c.fx = 0.0;
  CHECK_THROWS_AS(c.validate(false), UsageError);
  RenderConfig cfg;
  cfg.sigma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}
