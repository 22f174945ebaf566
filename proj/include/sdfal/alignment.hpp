#pragma once

// Pose, scale and shape recovery for one instance: NOCS correspondences,
// RANSAC-Procrustes initialization and joint 2D/3D refinement through the
// differentiable renderer.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "sdfal/autodiff.hpp"
#include "sdfal/camera.hpp"
#include "sdfal/isosurface.hpp"
#include "sdfal/nearest.hpp"
#include "sdfal/renderer.hpp"
#include "sdfal/shapespace.hpp"
#include "sdfal/transform.hpp"

namespace sdfal {

// ---- initialization ----

struct Correspondence {
  std::uint32_t model = 0;
  std::uint32_t scene = 0;
  double distance = 0.0;  // NOCS distance
};
using CorrespondenceSet = std::vector<Correspondence>;

// For every model point, the scene point with the nearest NOCS color; pairs
// with distance >= threshold are dropped, and so are pairs where the model
// point is not also the nearest model point of that scene point. Throws
// InsufficientCorrespondencesError if fewer than 4 pairs survive.
CorrespondenceSet nocs_correspondences(std::span<const Vec3> model_colors, std::span<const Vec3> scene_colors,
                                       double threshold = 0.2);

// Least-squares similarity with target ~ s R source + t (Umeyama), det R = +1.
// RankError for fewer than 3 pairs or collinear sources.
SimilarityTransform procrustes(std::span<const Vec3> source, std::span<const Vec3> target);

// ceil(log(1 - p) / log(1 - w^n)); 1 when w = 1. UsageError outside
// 0 < p < 1, 0 < w <= 1, n >= 1.
int ransac_iterations(double p, double w, int n);

struct RansacConfig {
  double p = 0.9;
  double w = 0.7;
  int sample_size = 4;
  double inlier_threshold = 0.2;  // meters
  std::uint64_t seed = 0;
};

struct RansacResult {
  SimilarityTransform pose;
  std::vector<std::uint32_t> inliers;  // of the refit transform
  int iterations = 0;
  int degenerate_samples = 0;
};

// Pairs are source[i] <-> target[i]. The best hypothesis by inlier count
// (residual < threshold) is refit on its inliers. InitializationError if
// the best hypothesis has fewer than sample_size inliers.
RansacResult ransac_procrustes(std::span<const Vec3> source, std::span<const Vec3> target,
                               const RansacConfig& config);

// ---- losses ----

using IndexPair = std::pair<std::uint32_t, std::uint32_t>;

// For each query, the nearest target with distance < threshold.
std::vector<IndexPair> match_nearest(std::span<const Vec3> queries, const PointIndex& targets,
                                     double threshold);

// Mean |a_i - b_j| over pairs; constant 0 for no pairs.
ad::Var mean_pair_distance(std::span<const V3v> a, std::span<const Vec3> b, std::span<const IndexPair> pairs);

struct LossTerm {
  ad::Var value;
  std::vector<IndexPair> pairs;
  bool empty = true;  // no correspondences; value is 0
};

// Rendered NOCS values against predicted foreground colors.
LossTerm loss_2d(std::span<const V3v> rendered, std::span<const Vec3> predicted, double threshold = 0.2);
// Posed model points against LIDAR points (meters).
LossTerm loss_3d(std::span<const V3v> points, std::span<const Vec3> lidar, double threshold = 0.25);

// ---- objective ----

// Dense NOCS prediction over a patch.
struct NocsMap {
  int width = 0;
  int height = 0;
  std::vector<Vec3> colors;
  std::vector<std::uint8_t> valid;

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

struct AlignmentProblem {
  const SurfaceExtractor* extractor = nullptr;
  Camera camera;              // patch camera
  NocsMap predicted;          // same size as the patch
  std::vector<Vec3> lidar;    // frustum points, camera frame
  RenderConfig render;
  double nocs_threshold = 0.2;
  double lidar_threshold = 0.25;
  // kSpatial compares R and M at the rendered pixel once its nearest predicted
  // color is within nocs_threshold; kMatched compares R with that nearest color.
  enum class Nocs2d { kSpatial, kMatched } nocs_2d = Nocs2d::kMatched;
};

struct LossFlags {
  bool use_2d = true;
  bool use_3d = true;
};

// Everything that is discrete in one evaluation. Replaying it evaluates the
// smooth piece that was active when it was recorded.
struct LossStructure {
  std::vector<std::uint32_t> band;     // grid indices
  std::vector<std::uint32_t> visible;  // indices into the band points
  Fragments fragments;
  std::vector<IndexPair> pairs_2d;     // (patch pixel, predicted pixel)
  std::vector<IndexPair> pairs_3d;     // (visible point, lidar point)
};

struct ObjectiveValue {
  ad::Var total;
  ad::Var loss_2d;
  ad::Var loss_3d;
  std::size_t count_2d = 0;
  std::size_t count_3d = 0;
  bool empty_2d = true;
  bool empty_3d = true;
};

// Parameter vector layout: omega (3), t (3), s, z (3).
constexpr std::size_t kParamCount = 10;

class AlignmentObjective {
 public:
  explicit AlignmentObjective(AlignmentProblem problem);

  const AlignmentProblem& problem() const { return problem_; }

  // loss = loss_2d + loss_3d at R = (I + [omega]x) R0, translation t, scale s
  // and latent z (used as given, not normalized).
  ObjectiveValue evaluate(const Mat3& R0, std::span<const ad::Var> params, const LossFlags& flags,
                          LossStructure* record = nullptr, const LossStructure* replay = nullptr) const;

 private:
  AlignmentProblem problem_;
  std::vector<std::uint32_t> predicted_pixels_;
  std::vector<Vec3> predicted_colors_;
  PointIndex predicted_index_;
  PointIndex lidar_index_;
};

// Parameter values for a pose and latent (omega = 0).
std::vector<double> pack_params(const SimilarityTransform& pose, const LatentCode& z);

// Gradient check of the full objective w.r.t. all parameters with the
// structure frozen at the given point.
ad::GradCheckResult check_objective_gradient(const AlignmentObjective& objective, const SimilarityTransform& pose,
                                             const LatentCode& z, const LossFlags& flags, double h);

// ---- refinement ----

struct RefineConfig {
  int iterations = 50;
  double pose_lr = 0.03;    // Adam, rotation increment and translation
  double scale_lr = 0.01;   // plain gradient descent
  double shape_lr = 0.0005; // plain gradient descent, then projection to the sphere
  bool optimize_rotation = true;
  bool optimize_translation = true;
  bool optimize_scale = true;
  bool optimize_shape = true;
  bool keep_best = true;  // return the lowest-loss iterate instead of the last one
  LossFlags loss;
};

struct TraceRow {
  int iteration = 0;
  double loss_2d = 0.0;
  double loss_3d = 0.0;
  std::size_t count_2d = 0;
  std::size_t count_3d = 0;

  double total() const { return loss_2d + loss_3d; }
};

struct RefineResult {
  SimilarityTransform pose;
  LatentCode z = LatentCode::from(Vec3::UnitX());
  std::vector<TraceRow> trace;  // one row per evaluated iterate, the last after the final update
  int best_iteration = 0;       // iterate returned in pose and z
  bool failed = false;          // non-finite loss or scale; pose and z hold the best finite iterate
};

// Runs `iterations` optimizer steps. Among the evaluated iterates with
// correspondences for every active loss, returns the one with the lowest loss
// (keep_best) or the last one.
RefineResult refine(const AlignmentObjective& objective, const SimilarityTransform& init, const LatentCode& z0,
                    const RefineConfig& config);

// "iteration,loss_2d,loss_3d,c2d,c3d" rows after a header.
void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace);

}  // namespace sdfal
