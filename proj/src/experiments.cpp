#include "sdfal/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <ostream>
#include <thread>

#include "sdfal/errors.hpp"

namespace sdfal {

GradientFixture gradient_fixture(const SurfaceExtractor& extractor, int size, std::uint64_t seed) {
  if (size < 8) throw UsageError("gradient_fixture: size must be at least 8");
  const LatentCode z_true = project_latent(Vec3(0.3, 0.4, 0.8));
  SimilarityTransform truth;
  truth.R = yaw_rotation(0.5);
  truth.t = Vec3(0.2, 0.1, 9.0);
  truth.s = 4.3;
  // The car spans about 7/8 of the patch width.
  const double f = 0.875 * size * truth.t.z() / truth.s;
  const Camera camera{f, f, size / 2.0, size / 2.0, size, size};

  const SurfacePointSet surface = extractor.extract(z_true);
  const RenderOutput img = render(surface, truth, camera, RenderConfig{});
  AlignmentProblem problem;
  problem.extractor = &extractor;
  problem.camera = camera;
  problem.predicted.width = size;
  problem.predicted.height = size;
  problem.predicted.colors = img.nocs;
  problem.predicted.valid.resize(img.mask.size());
  for (std::size_t i = 0; i < img.mask.size(); ++i) problem.predicted.valid[i] = img.mask[i] > 0.0 ? 1 : 0;
  for (std::uint32_t i : visible_indices(surface.points, surface.normals, truth)) {
    if (i % 3 == 0) problem.lidar.push_back(truth.apply(surface.points[i]));
  }

  SimilarityTransform pose = truth;
  pose.R = yaw_rotation(0.03) * truth.R;
  pose.t += Vec3(0.05, -0.03, 0.08);
  pose.s *= 1.02;
  const LatentCode z = perturb_latent(z_true, 3.0 * std::numbers::pi / 180.0, seed);
  return GradientFixture{AlignmentObjective(std::move(problem)), truth, pose, z};
}

Dataset easy_fixture(const SurfaceExtractor& extractor, int count, std::uint64_t seed) {
  SceneConfig config;
  config.instances_per_scene = 1;
  config.depth_max = 20.0;
  Dataset out;
  out.camera = config.camera;
  // Draw in batches until enough easy instances exist; batch b uses its own
  // seed, so the result only depends on (count, seed).
  for (std::uint64_t batch = 0; static_cast<int>(out.scenes.size()) < count; ++batch) {
    if (batch > 64) throw DataError("easy_fixture: too few easy instances generated");
    config.scenes = count;
    const Dataset d = generate_scenes(config, extractor, derive_seed(seed, 3, batch));
    for (const Scene& s : d.scenes) {
      if (static_cast<int>(out.scenes.size()) >= count) break;
      if (s.instances.front().difficulty != Difficulty::kEasy) continue;
      Scene scene = s;
      scene.id = static_cast<int>(out.scenes.size());
      out.scenes.push_back(std::move(scene));
    }
  }
  return out;
}

Cuboid truth_cuboid(const SurfaceExtractor& extractor, const SceneInstance& instance) {
  return derive_cuboid(extractor, instance.pose, instance.latent);
}

std::vector<AblationConfig> ablation_configs() {
  auto named = [](const char* name) {
    AblationConfig c;
    c.name = name;
    return c;
  };
  std::vector<AblationConfig> out;
  AblationConfig ransac = named("ransac-only");
  ransac.skip_refinement = true;
  out.push_back(ransac);
  AblationConfig pose = named("pose");
  pose.scale = pose.shape = false;
  out.push_back(pose);
  AblationConfig pose_scale = named("pose+scale");
  pose_scale.shape = false;
  out.push_back(pose_scale);
  out.push_back(named("pose+scale+shape"));
  AblationConfig only_2d = named("2D-only");
  only_2d.loss.use_3d = false;
  out.push_back(only_2d);
  AblationConfig only_3d = named("3D-only");
  only_3d.loss.use_2d = false;
  out.push_back(only_3d);
  return out;
}

std::vector<MetricColumn> default_metric_columns() {
  return {{MatchMetric::kBev, 0.5}, {MatchMetric::kIou3d, 0.5}, {MatchMetric::kCenterDistance, 0.5},
          {MatchMetric::kCenterDistance, 1.0}};
}

namespace {

struct AblationOutcome {
  std::vector<std::optional<ScoredCuboid>> per_config;
};

template <class F>
void parallel_for(std::size_t n, int jobs, F&& body) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) body(i);
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (threads == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int j = 0; j < threads; ++j) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
}

}  // namespace

GradModule grad_module_from_string(const std::string& name) {
  if (name == "autodiff") return GradModule::kAutodiff;
  if (name == "renderer") return GradModule::kRenderer;
  if (name == "alignment") return GradModule::kAlignment;
  throw UsageError("unknown module '" + name + "' (autodiff, renderer, alignment)");
}

ad::GradCheckResult module_gradcheck(GradModule module, const SurfaceExtractor& extractor) {
  switch (module) {
    case GradModule::kAutodiff: {
      const std::vector<double> x = {0.3, -0.7, 1.2, 0.45};
      const ad::ScalarFunction f = [](ad::Tape&, std::span<const ad::Var> v) {
        const std::vector<ad::Var> w = ad::softmax(v);
        const ad::Var a = ad::dot(w, v) + ad::norm(v) * ad::tanh(v[0]);
        const ad::Var b = ad::log(ad::exp(v[1]) + ad::square(v[2])) / ad::sqrt(1.0 + ad::square(v[3]));
        return a * ad::sin(v[2]) + b * ad::cos(v[1]) + ad::max(v[0], v[3]) - ad::abs(v[1]);
      };
      return ad::grad_check(f, x, 1e-6);
    }
    case GradModule::kRenderer: {
      const GradientFixture g = gradient_fixture(extractor, 16, 1);
      return check_objective_gradient(g.objective, g.pose, g.z, LossFlags{true, false}, 1e-6);
    }
    case GradModule::kAlignment: {
      const GradientFixture g = gradient_fixture(extractor, 32, 1);
      return check_objective_gradient(g.objective, g.pose, g.z, LossFlags{true, true}, 1e-6);
    }
  }
  throw UsageError("unknown gradient-check module");
}

std::vector<AblationRow> run_ablation(const Dataset& dataset, const SurfaceExtractor& extractor,
                                      const CssPredictor& predictor, const LoopConfig& loop,
                                      std::span<const AblationConfig> configs) {
  std::vector<std::pair<const Scene*, const SceneInstance*>> work;
  std::vector<GroundTruthCuboid> truths;
  for (const Scene& scene : dataset.scenes) {
    for (const SceneInstance& inst : scene.instances) {
      if (static_cast<int>(inst.difficulty) > static_cast<int>(loop.stage)) continue;
      work.emplace_back(&scene, &inst);
      truths.push_back({truth_cuboid(extractor, inst), scene.id});
    }
  }
  std::vector<AblationOutcome> outcomes(work.size());
  parallel_for(work.size(), loop.jobs, [&](std::size_t i) {
    const Scene& scene = *work[i].first;
    const SceneInstance& inst = *work[i].second;
    AblationOutcome& out = outcomes[i];
    out.per_config.resize(configs.size());
    Initialization init;
    try {
      init = initialize_instance(dataset, scene, inst, extractor, predictor, loop);
    } catch (const Error&) {
      return;
    }
    const AlignmentObjective objective = make_objective(init, inst, extractor, loop);
    for (std::size_t c = 0; c < configs.size(); ++c) {
      const AblationConfig& cfg = configs[c];
      try {
        SimilarityTransform pose = init.pose;
        LatentCode z = init.prediction.latent;
        if (!cfg.skip_refinement) {
          RefineConfig rc = loop.refine;
          rc.optimize_rotation = cfg.rotation;
          rc.optimize_translation = cfg.translation;
          rc.optimize_scale = cfg.scale;
          rc.optimize_shape = cfg.shape;
          rc.loss = cfg.loss;
          const RefineResult r = refine(objective, init.pose, init.prediction.latent, rc);
          if (r.failed) continue;
          pose = r.pose;
          z = r.z;
        }
        const Verification v = verify(extractor, pose, z, inst, dataset.camera, loop.render, loop.verify);
        out.per_config[c] = ScoredCuboid{derive_cuboid(extractor, pose, z), v.band_fraction, scene.id};
      } catch (const Error&) {
        // Counted as a missing prediction.
      }
    }
  });

  const std::vector<MetricColumn> columns = default_metric_columns();
  std::vector<AblationRow> rows;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    AblationRow row;
    row.name = configs[c].name;
    std::vector<ScoredCuboid> predictions;
    for (const AblationOutcome& o : outcomes) {
      if (o.per_config.size() > c && o.per_config[c]) {
        predictions.push_back(*o.per_config[c]);
      } else {
        ++row.failures;
      }
    }
    row.predictions = predictions.size();
    for (const MetricColumn& col : columns) {
      row.ap.push_back(average_precision(predictions, truths, col.metric, col.cutoff).ap);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<Autolabel> latest_labels(std::span<const Autolabel> labels) {
  std::map<std::pair<int, int>, const Autolabel*> latest;
  for (const Autolabel& l : labels) {
    const Autolabel*& slot = latest[{l.scene, l.instance}];
    if (slot == nullptr || l.loop >= slot->loop) slot = &l;
  }
  std::vector<Autolabel> out;
  out.reserve(latest.size());
  for (const auto& [key, l] : latest) out.push_back(*l);
  return out;
}

std::vector<double> evaluate_labels(std::span<const Autolabel> labels, const Dataset& dataset,
                                    const SurfaceExtractor& extractor, std::span<const MetricColumn> columns,
                                    std::optional<Difficulty> max_difficulty) {
  std::vector<GroundTruthCuboid> truths;
  for (const Scene& scene : dataset.scenes) {
    for (const SceneInstance& inst : scene.instances) {
      if (max_difficulty && static_cast<int>(inst.difficulty) > static_cast<int>(*max_difficulty)) continue;
      truths.push_back({truth_cuboid(extractor, inst), scene.id});
    }
  }
  std::vector<ScoredCuboid> predictions;
  for (const Autolabel& l : labels) predictions.push_back({l.cuboid, l.band_fraction, l.scene});
  std::vector<double> out;
  for (const MetricColumn& col : columns) {
    out.push_back(average_precision(predictions, truths, col.metric, col.cutoff).ap);
  }
  return out;
}

void write_ap_table(std::ostream& out, std::span<const AblationRow> rows, std::span<const MetricColumn> columns) {
  const auto flags = out.flags();
  out << std::left << std::setw(18) << "config";
  for (const MetricColumn& c : columns) out << std::right << std::setw(10) << metric_name(c.metric, c.cutoff);
  out << std::right << std::setw(8) << "n" << "\n";
  for (const AblationRow& r : rows) {
    out << std::left << std::setw(18) << r.name << std::right << std::fixed << std::setprecision(2);
    for (double ap : r.ap) out << std::setw(10) << 100.0 * ap;
    out << std::setw(8) << r.predictions << "\n";
  }
  out.flags(flags);
}

void write_ap_csv(std::ostream& out, std::span<const AblationRow> rows, std::span<const MetricColumn> columns) {
  out << "config";
  for (const MetricColumn& c : columns) out << "," << metric_name(c.metric, c.cutoff);
  out << ",predictions,failures\n";
  const auto flags = out.flags();
  out << std::setprecision(12);
  for (const AblationRow& r : rows) {
    out << r.name;
    for (double ap : r.ap) out << "," << ap;
    out << "," << r.predictions << "," << r.failures << "\n";
  }
  out.flags(flags);
}

}  // namespace sdfal
