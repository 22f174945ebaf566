#pragma once

// Autolabeling loop on synthetic scenes: scene generation with simulated
// LIDAR, CSS predictors, curriculum gating, per-instance
// initialize-refine-verify, and a label pool.

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfal/alignment.hpp"
#include "sdfal/camera.hpp"
#include "sdfal/isosurface.hpp"
#include "sdfal/metrics.hpp"
#include "sdfal/renderer.hpp"
#include "sdfal/shapespace.hpp"
#include "sdfal/transform.hpp"

namespace sdfal {

// KITTI-like left color camera.
Camera kitti_camera();

// Independent stream seed from a base seed and up to three keys (splitmix64).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

struct Autolabel;

// ---- scenes ----

// Pixel rectangle [x0, x1) x [y0, y1).
struct Box2D {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return static_cast<long>(std::max(0, width())) * std::max(0, height()); }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
};

double box_iou(const Box2D& a, const Box2D& b);

enum class Difficulty { kEasy = 0, kModerate = 1, kHard = 2 };
std::string to_string(Difficulty d);
Difficulty difficulty_from_string(const std::string& s);

struct SceneInstance {
  int id = 0;
  SimilarityTransform pose;
  LatentCode latent = LatentCode::from(Vec3::UnitX());
  Box2D box;
  bool border = false;             // box touches the image border
  std::vector<std::uint8_t> mask;  // 2D label region, box-local, row-major
  std::vector<Vec3> lidar;         // frustum points, camera frame (m)
  Difficulty difficulty = Difficulty::kHard;

  bool mask_at(int x, int y) const;  // image coordinates
  std::size_t mask_area() const;
};

struct Scene {
  int id = 0;
  std::vector<SceneInstance> instances;
};

struct Dataset {
  Camera camera;
  std::vector<Scene> scenes;

  std::size_t instance_count() const;
};

struct LidarConfig {
  int beams = 64;
  double elevation_min_deg = -24.9;  // below the horizon
  double elevation_max_deg = 2.0;
  double azimuth_step_deg = 0.16;
  double dropout = 0.0;
  double range_noise = 0.0;  // meters, Gaussian along the ray
  double max_range = 80.0;
  int max_steps = 64;
  double tolerance = 1e-4;  // meters
};

struct CurriculumConfig {
  double easy_min_height = 40.0;      // px, strict
  double moderate_min_height = 25.0;  // px, strict
  double moderate_max_iou = 0.30;
};

struct SceneConfig {
  Camera camera = kitti_camera();
  int scenes = 4;
  int instances_per_scene = 4;
  double depth_min = 5.0;
  double depth_max = 40.0;
  double scale_min = 3.9;  // meters per model unit
  double scale_max = 5.0;
  double camera_height = 1.65;
  bool yaw_only = true;
  int max_retries = 50;
  int min_label_pixels = 16;
  LidarConfig lidar;
  CurriculumConfig curriculum;
};

Difficulty classify_difficulty(const Box2D& box, bool border, std::span<const Box2D> others,
                               const CurriculumConfig& config);

// Posed SDF of one instance in meters.
double instance_sdf(const ShapeSpace& space, const SimilarityTransform& pose, const LatentCode& z,
                    const Vec3& x_camera);

// Sphere-traced hit distance along a unit ray against the posed instances.
std::optional<double> trace_ray(const ShapeSpace& space, std::span<const SceneInstance> instances,
                                const Vec3& origin, const Vec3& direction, const LidarConfig& config);

// Simulated LIDAR returns (camera frame) for all rays of the fan inside the
// camera field of view.
std::vector<Vec3> simulate_lidar(const ShapeSpace& space, std::span<const SceneInstance> instances,
                                 const Camera& camera, const LidarConfig& config, std::uint64_t seed);

// Deterministic in (config, extractor, seed). Instances that collide, fall
// outside the image or have too few label pixels are redrawn; DataError after
// max_retries failed draws.
Dataset generate_scenes(const SceneConfig& config, const SurfaceExtractor& extractor, std::uint64_t seed);

// Per-instance surface label from a full-camera render of the instance.
void label_instance(SceneInstance& instance, const SurfaceExtractor& extractor, const Camera& camera,
                    const RenderConfig& render);

void save_dataset(std::ostream& out, const Dataset& dataset);
Dataset load_dataset(std::istream& in);

// ---- predictions ----

struct CssPrediction {
  NocsMap nocs;
  LatentCode latent = LatentCode::from(Vec3::UnitX());
};

// Patch camera for a 2D box: the longer side is resampled to patch_size.
Camera patch_camera(const Camera& camera, const Box2D& box, int patch_size);

class CssPredictor {
 public:
  virtual ~CssPredictor() = default;
  virtual std::string id() const = 0;
  // Must be thread-safe and deterministic in its arguments.
  virtual CssPrediction predict(const Scene& scene, const SceneInstance& instance, const Camera& patch) const = 0;
  // Called once at the end of every loop with the whole pool.
  virtual void update(std::span<const Autolabel> pool) { (void)pool; }
};

struct OracleNoise {
  double nocs_sigma = 0.0;    // per channel, clipped to [0, 1]
  double dropout = 0.0;       // fraction of foreground pixels removed
  double latent_angle = 0.0;  // radians
};

// Renders the ground truth into the patch and corrupts it. The schedule
// entry used is the number of update() calls so far, clamped to the last.
class OraclePredictor : public CssPredictor {
 public:
  OraclePredictor(const SurfaceExtractor& extractor, RenderConfig render, std::vector<OracleNoise> schedule,
                  std::uint64_t seed);

  std::string id() const override { return "oracle"; }
  CssPrediction predict(const Scene& scene, const SceneInstance& instance, const Camera& patch) const override;
  void update(std::span<const Autolabel> pool) override;

  const OracleNoise& noise() const;
  int updates() const { return updates_; }

 private:
  const SurfaceExtractor* extractor_;
  RenderConfig render_;
  std::vector<OracleNoise> schedule_;
  std::uint64_t seed_;
  int updates_ = 0;
};

// Rotates z by exactly `angle` about a random axis perpendicular to it.
LatentCode perturb_latent(const LatentCode& z, double angle, std::uint64_t seed);

// Predictions read from a file (schema "sdfal/predictions/v1"), keyed by
// (scene, instance).
class FilePredictor : public CssPredictor {
 public:
  explicit FilePredictor(std::istream& in);
  std::string id() const override { return "file"; }
  CssPrediction predict(const Scene& scene, const SceneInstance& instance, const Camera& patch) const override;

 private:
  struct Entry {
    int scene;
    int instance;
    CssPrediction prediction;
  };
  std::vector<Entry> entries_;
};

void save_predictions(std::ostream& out, const std::vector<std::pair<std::pair<int, int>, CssPrediction>>& items);

// ---- labels ----

// Tight box of the 0-level set in the model frame, scaled and posed. Yaw is
// that of the nearest yaw-only rotation.
Cuboid derive_cuboid(const SurfacePointSet& surface, const SimilarityTransform& pose);
Cuboid derive_cuboid(const SurfaceExtractor& extractor, const SimilarityTransform& pose, const LatentCode& z);
// Angle between R and the yaw-only rotation used for the cuboid.
double yaw_projection_error(const Mat3& R);

struct Autolabel {
  int scene = 0;
  int instance = 0;
  int loop = 0;
  std::string predictor;
  SimilarityTransform pose;
  LatentCode latent = LatentCode::from(Vec3::UnitX());
  Cuboid cuboid;
  double yaw_error = 0.0;
  double band_fraction = 0.0;
  double mask_iou = 0.0;
};

struct VerifyConfig {
  double band = 0.2;  // meters
  double min_band_fraction = 0.60;
  double min_mask_iou = 0.70;
};

struct Verification {
  bool pass = false;
  double band_fraction = 0.0;
  double mask_iou = 0.0;
  std::string diagnostic;
};

// Accepts iff at least min_band_fraction of the frustum points are within
// `band` of the posed surface and the rendered mask has IoU >= min_mask_iou
// with the label region.
Verification verify(const SurfaceExtractor& extractor, const SimilarityTransform& pose, const LatentCode& z,
                    const SceneInstance& instance, const Camera& camera, const RenderConfig& render,
                    const VerifyConfig& config);

// ---- loop ----

enum class InstanceStatus { kVerified, kVerifyFailed, kInitFailed, kNumericFailed };
std::string to_string(InstanceStatus s);

struct InstanceRecord {
  int scene = 0;
  int instance = 0;
  Difficulty difficulty = Difficulty::kHard;
  InstanceStatus status = InstanceStatus::kInitFailed;
  std::string detail;
  double band_fraction = 0.0;
  double mask_iou = 0.0;
  double translation_error = 0.0;  // against ground truth (m), NaN before refinement
  double yaw_error = 0.0;          // against ground truth (rad)
  std::size_t correspondences = 0;
  std::size_t ransac_inliers = 0;
  std::optional<Autolabel> label;  // set for refined instances, verified or not
  std::optional<SimilarityTransform> initial_pose;
};

struct LoopConfig {
  Difficulty stage = Difficulty::kEasy;
  int patch_size = 64;
  double nocs_threshold = 0.2;
  double lidar_threshold = 0.25;
  AlignmentProblem::Nocs2d nocs_2d = AlignmentProblem::Nocs2d::kMatched;
  RansacConfig ransac;
  RefineConfig refine;
  bool skip_refinement = false;
  VerifyConfig verify;
  RenderConfig render;
  int jobs = 1;
};

struct Initialization {
  Camera patch;
  CssPrediction prediction;
  SimilarityTransform pose;
  std::size_t correspondences = 0;
  std::size_t inliers = 0;
};

// Predict, correspond and run RANSAC-Procrustes. Throws on failure
// (InsufficientCorrespondencesError, InitializationError, ...).
Initialization initialize_instance(const Dataset& dataset, const Scene& scene, const SceneInstance& instance,
                                  const SurfaceExtractor& extractor, const CssPredictor& predictor,
                                  const LoopConfig& config);
AlignmentObjective make_objective(const Initialization& init, const SceneInstance& instance,
                                  const SurfaceExtractor& extractor, const LoopConfig& config);

// One instance: predict, correspond, initialize, refine, verify.
InstanceRecord process_instance(const Dataset& dataset, const Scene& scene, const SceneInstance& instance,
                                const SurfaceExtractor& extractor, const CssPredictor& predictor, int loop,
                                const LoopConfig& config);

struct LoopResult {
  std::vector<InstanceRecord> records;  // processed instances in (scene, instance) order
  std::vector<Autolabel> accepted;      // pool delta, same order

  double verified_fraction() const;
};

// Processes every instance with difficulty <= stage, appends verified labels to
// the pool and then calls predictor.update(pool). Results do not depend on
// config.jobs.
LoopResult run_loop(const Dataset& dataset, const SurfaceExtractor& extractor, CssPredictor& predictor, int loop,
                    const LoopConfig& config, std::vector<Autolabel>& pool);

// JSON lines, one autolabel per line with schema "sdfal/autolabel/v1".
void write_label(std::ostream& out, const Autolabel& label);
std::vector<Autolabel> read_labels(std::istream& in);
void write_records_csv(std::ostream& out, std::span<const InstanceRecord> records, int loop, bool header);

}  // namespace sdfal
