#pragma once

// Fixed fixtures and the optimization ablation harness, shared by the CLI and
// the acceptance suite.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdfal/alignment.hpp"
#include "sdfal/metrics.hpp"
#include "sdfal/pipeline.hpp"

namespace sdfal {

// A size x size patch looking at one car, with oracle NOCS and LIDAR sampled
// from the visible ground-truth surface. The evaluation point is off the
// ground truth in every parameter so that both losses have pairs with
// non-zero residuals.
struct GradientFixture {
  AlignmentObjective objective;
  SimilarityTransform truth;
  SimilarityTransform pose;
  LatentCode z;
};

GradientFixture gradient_fixture(const SurfaceExtractor& extractor, int size, std::uint64_t seed);

enum class GradModule { kAutodiff, kRenderer, kAlignment };

GradModule grad_module_from_string(const std::string& name);

// Analytic against central-difference gradients for one module:
// autodiff, a composite of every differentiable primitive at a fixed point;
// renderer, the 2D loss of a 16x16 render w.r.t. rotation, t, s and z;
// alignment, the full 2D + 3D loss of the 32x32 gradient fixture.
ad::GradCheckResult module_gradcheck(GradModule module, const SurfaceExtractor& extractor);

// `count` isolated easy instances, one per scene, depth 5-20 m.
Dataset easy_fixture(const SurfaceExtractor& extractor, int count, std::uint64_t seed);

// Ground-truth cuboid of an instance.
Cuboid truth_cuboid(const SurfaceExtractor& extractor, const SceneInstance& instance);

struct AblationConfig {
  std::string name;
  bool skip_refinement = false;
  bool rotation = true;
  bool translation = true;
  bool scale = true;
  bool shape = true;
  LossFlags loss;
};

// ransac-only, pose, pose+scale, pose+scale+shape, 2D-only, 3D-only.
std::vector<AblationConfig> ablation_configs();

struct MetricColumn {
  MatchMetric metric;
  double cutoff;
};

// BEV@0.5, 3D@0.5, NS@0.5, NS@1.0.
std::vector<MetricColumn> default_metric_columns();

struct AblationRow {
  std::string name;
  std::vector<double> ap;  // one per metric column
  std::size_t predictions = 0;
  std::size_t failures = 0;
};

// Every instance at or below loop.stage is initialized once; each config then
// refines from that shared initialization. Predictions are scored by their
// band fraction and are not gated by verification. Results do not depend on
// loop.jobs.
std::vector<AblationRow> run_ablation(const Dataset& dataset, const SurfaceExtractor& extractor,
                                      const CssPredictor& predictor, const LoopConfig& loop,
                                      std::span<const AblationConfig> configs);

// The label from the latest loop for every (scene, instance), in that order.
std::vector<Autolabel> latest_labels(std::span<const Autolabel> labels);

// AP of pool labels against the ground truth of a dataset (frame = scene id).
std::vector<double> evaluate_labels(std::span<const Autolabel> labels, const Dataset& dataset,
                                    const SurfaceExtractor& extractor, std::span<const MetricColumn> columns,
                                    std::optional<Difficulty> max_difficulty = std::nullopt);

void write_ap_table(std::ostream& out, std::span<const AblationRow> rows, std::span<const MetricColumn> columns);
void write_ap_csv(std::ostream& out, std::span<const AblationRow> rows, std::span<const MetricColumn> columns);

}  // namespace sdfal
