#pragma once

// Soft rasterization of oriented tangent discs. For pixel ray r = K^-1(u, v, 1)
// and a disc with centre p, normal n and diameter diam (camera frame):
//   D = (n . p) / (n . r)              depth of the tangent-plane hit P = D r
//   M = max(diam - |p - P|, 0)         tangential weight
//   w = softmax over discs with M > 0 of (-D * sigma * M)
//   I = sum w * color,  depth = sum w * D

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "sdfal/autodiff.hpp"
#include "sdfal/camera.hpp"
#include "sdfal/isosurface.hpp"
#include "sdfal/shapespace.hpp"
#include "sdfal/transform.hpp"

namespace sdfal {

struct RenderConfig {
  double sigma = 40.0;
  Vec3 background = Vec3::Zero();
  double epsilon = 1e-6;  // minimum |n . r|
  bool full_scan = false;  // rasterize every disc over the whole image (debug)

  void validate() const;
};

// Depth of the tangent plane along the ray through (u, v); nullopt when the
// plane is grazing (|n . r| < epsilon).
std::optional<double> plane_depth(const Vec3& n, const Vec3& p, double u, double v, const Camera& camera,
                                  double epsilon = 1e-6);

double disc_mask(const Vec3& p, const Vec3& P, double diam);

struct DiscSample {
  double depth = 0.0;
  double mask = 0.0;
  Vec3 color = Vec3::Zero();
};

template <class T>
struct Composite {
  std::vector<T> weights;  // one per input disc, 0 where mask <= 0
  V3<T> color;
  T depth{};
  bool covered = false;
};

// Per-pixel compositing over any number of discs. Works on doubles and on
// tape variables; the renderer uses a fused equivalent.
template <class T>
Composite<T> composite(std::span<const T> depth, std::span<const T> mask, std::span<const V3<T>> colors,
                       const RenderConfig& config);
Composite<double> composite(std::span<const DiscSample> discs, const RenderConfig& config);

// CSR list of (pixel, disc) pairs with M > 0, discs in index order per pixel.
struct Fragments {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> pixel_begin;  // width * height + 1
  std::vector<std::uint32_t> disc;
  std::vector<double> depth;
  std::vector<double> mask;

  std::size_t size() const { return disc.size(); }
};

// Camera-frame discs.
struct DiscSet {
  std::vector<Vec3> centers;
  std::vector<Vec3> normals;
  std::vector<Vec3> colors;
  double diameter = 0.0;
};

Fragments rasterize(const DiscSet& discs, const Camera& camera, const RenderConfig& config);

struct RenderOutput {
  int width = 0;
  int height = 0;
  std::vector<Vec3> nocs;       // row-major, background where uncovered
  std::vector<double> depth;    // +inf where uncovered
  std::vector<double> mask;     // 1 where any disc has M > 0
  std::vector<int> coverage;    // contributing discs per pixel
  Fragments fragments;          // weights live in `weight`, aligned with fragments.disc
  std::vector<double> weight;
  std::vector<std::uint32_t> disc_source;  // disc index -> index in the input point set
  bool empty = true;            // no visible disc covered any pixel

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

// Transforms discs to the camera frame with the given pose. Only the points
// kept by back-face culling are returned; disc_source maps back.
DiscSet pose_discs(const SurfacePointSet& points, const SimilarityTransform& pose,
                   std::vector<std::uint32_t>* disc_source = nullptr);

RenderOutput render(const SurfacePointSet& points, const SimilarityTransform& pose, const Camera& camera,
                    const RenderConfig& config);
RenderOutput render_discs(const DiscSet& discs, const Camera& camera, const RenderConfig& config);

// ---- differentiable rendering ----

struct DiffDiscs {
  std::vector<V3v> centers;  // camera frame
  std::vector<V3v> normals;
  std::vector<V3v> colors;
  ad::Var diameter;
};

struct DiffRender {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> slot;  // pixel -> index into colors, -1 if uncovered
  std::vector<V3v> colors;         // rendered NOCS at covered pixels
  std::vector<std::uint32_t> covered_pixels;
  Fragments fragments;             // structure used (values at the current point)
};

// One custom tape operation for the whole image. With `frozen`, the fragment
// list is taken from a previous call instead of being rasterized, and mask
// values are used unclamped, which evaluates the smooth piece active at
// recording time.
DiffRender render_diff(const DiffDiscs& discs, const Camera& camera, const RenderConfig& config,
                       const Fragments* frozen = nullptr);

// ---- image export ----

// Binary PPM (P6), colors in [0, 1] quantized to 8 bits.
void write_ppm(std::ostream& out, int width, int height, std::span<const Vec3> rgb);
void write_mask_ppm(std::ostream& out, int width, int height, std::span<const double> mask);
// ASCII float dump: schema line, "width height", then one row per line; "inf"
// for background.
void write_depth(std::ostream& out, int width, int height, std::span<const double> depth);

// ---- template implementation ----

template <class T>
Composite<T> composite(std::span<const T> depth, std::span<const T> mask, std::span<const V3<T>> colors,
                       const RenderConfig& config) {
  using std::exp;
  Composite<T> out;
  out.weights.assign(depth.size(), T(0.0));
  std::vector<std::size_t> live;
  std::vector<T> scores;
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (value_of(mask[i]) > 0.0) {
      live.push_back(i);
      scores.push_back(-depth[i] * T(config.sigma) * mask[i]);
    }
  }
  out.color = V3<T>(config.background);
  if (live.empty()) {
    out.depth = T(std::numeric_limits<double>::infinity());
    return out;
  }
  out.covered = true;
  std::vector<T> w;
  if constexpr (std::is_same_v<T, double>) {
    w = softmax_values(scores);
  } else {
    w = ad::softmax(scores);
  }
  out.color = V3<T>(T(0.0), T(0.0), T(0.0));
  out.depth = T(0.0);
  for (std::size_t k = 0; k < live.size(); ++k) {
    out.weights[live[k]] = w[k];
    out.color = out.color + colors[live[k]] * w[k];
    out.depth = out.depth + depth[live[k]] * w[k];
  }
  return out;
}

}  // namespace sdfal
