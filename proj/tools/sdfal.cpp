// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
// runtime error, 3 a gradient check above its tolerance.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "sdfal/config.hpp"
#include "sdfal/decoder.hpp"
#include "sdfal/errors.hpp"
#include "sdfal/experiments.hpp"
#include "sdfal/pipeline.hpp"
#include "sdfal/renderer.hpp"

using namespace sdfal;

namespace {

constexpr int kCheckFailed = 3;

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

void close_out(std::ofstream& out, const std::string& path) {
  out.close();
  if (!out) throw DataError("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in = open_in(path);
  return load_dataset(in);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

MatchMetric parse_metric(const std::string& name) {
  if (name == "bev") return MatchMetric::kBev;
  if (name == "3d") return MatchMetric::kIou3d;
  if (name == "ns") return MatchMetric::kCenterDistance;
  throw UsageError("unknown metric '" + name + "' (bev, 3d, ns)");
}

double parse_number(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw UsageError("not a number: '" + s + "'");
  return v;
}

struct Global {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool dump_config = false;
};

RunConfig resolve(const Global& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config_file(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.jobs) c.jobs = *g.jobs;
  if (c.jobs <= 0) c.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return c;
}

// ---- gen-scenes ----

struct GenOptions {
  std::string out;
  std::optional<int> scenes;
  std::optional<int> instances;
};

int gen_scenes(RunConfig c, const GenOptions& o) {
  if (o.scenes) c.scene.scenes = *o.scenes;
  if (o.instances) c.scene.instances_per_scene = *o.instances;
  const SurfaceExtractor extractor = c.extractor();
  const Dataset d = generate_scenes(c.scene, extractor, c.seed);
  std::ofstream out = open_out(o.out);
  save_dataset(out, d);
  close_out(out, o.out);
  std::size_t counts[3] = {};
  for (const Scene& s : d.scenes) {
    for (const SceneInstance& i : s.instances) ++counts[static_cast<int>(i.difficulty)];
  }
  std::cout << d.scenes.size() << " scenes, " << d.instance_count() << " instances (easy " << counts[0]
            << ", moderate " << counts[1] << ", hard " << counts[2] << ") -> " << o.out << "\n";
  return 0;
}

// ---- render ----

struct RenderOptions {
  std::string scenes;
  int scene = 0;
  int instance = 0;
  std::string prefix;
  std::optional<double> sigma;
  std::optional<int> grid_res;
};

int render_instance(RunConfig c, const RenderOptions& o) {
  if (o.sigma) c.loop.render.sigma = *o.sigma;
  if (o.grid_res) c.grid = QueryGrid::cube(*o.grid_res);
  c.loop.render.validate();
  const Dataset d = read_dataset(o.scenes);
  const SceneInstance* inst = nullptr;
  for (const Scene& s : d.scenes) {
    if (s.id != o.scene) continue;
    for (const SceneInstance& i : s.instances) {
      if (i.id == o.instance) inst = &i;
    }
  }
  if (inst == nullptr) {
    throw DataError("no instance " + std::to_string(o.instance) + " in scene " + std::to_string(o.scene));
  }
  const SurfaceExtractor extractor = c.extractor();
  const RenderOutput r = render(extractor.extract(inst->latent), inst->pose, d.camera, c.loop.render);
  const std::string nocs = o.prefix + "_nocs.ppm", mask = o.prefix + "_mask.ppm", depth = o.prefix + "_depth.txt";
  std::ofstream f1 = open_out(nocs);
  write_ppm(f1, r.width, r.height, r.nocs);
  close_out(f1, nocs);
  std::ofstream f2 = open_out(mask);
  write_mask_ppm(f2, r.width, r.height, r.mask);
  close_out(f2, mask);
  std::ofstream f3 = open_out(depth);
  write_depth(f3, r.width, r.height, r.depth);
  close_out(f3, depth);
  std::size_t covered = 0;
  for (double m : r.mask) covered += m > 0.0;
  std::cout << covered << " covered pixels -> " << nocs << ", " << mask << ", " << depth << "\n";
  return 0;
}

// ---- autolabel ----

struct AutolabelOptions {
  std::string scenes;
  std::string predictor = "oracle";
  std::string predictions;
  std::optional<std::string> stage;
  std::optional<int> loops;
  std::string out;
  std::string records;
};

int autolabel(RunConfig c, const AutolabelOptions& o) {
  if (o.stage) c.stage = difficulty_from_string(*o.stage);
  if (o.loops) c.loops = *o.loops;
  if (c.loops < 1) throw UsageError("--loops must be >= 1");
  const Dataset d = read_dataset(o.scenes);
  const SurfaceExtractor extractor = c.extractor();

  std::unique_ptr<CssPredictor> predictor;
  if (o.predictor == "oracle") {
    predictor = std::make_unique<OraclePredictor>(extractor, c.loop.render, c.oracle, c.seed);
  } else {
    if (o.predictions.empty()) throw UsageError("--predictor file needs --predictions");
    std::ifstream in = open_in(o.predictions);
    predictor = std::make_unique<FilePredictor>(in);
  }

  LoopConfig lc = c.loop;
  lc.jobs = c.jobs;
  lc.ransac.seed = c.loop.ransac.seed ^ c.seed;
  std::vector<Autolabel> pool;
  std::vector<InstanceRecord> records;
  std::vector<int> record_loop;
  for (int i = 0; i < c.loops; ++i) {
    lc.stage = c.stage_of(i);
    const LoopResult r = run_loop(d, extractor, *predictor, i, lc, pool);
    std::size_t verified = r.accepted.size();
    std::cout << "loop " << i + 1 << " (" << to_string(lc.stage) << "): " << r.records.size() << " processed, "
              << verified << " verified, pool " << pool.size() << "\n";
    for (const InstanceRecord& rec : r.records) {
      records.push_back(rec);
      record_loop.push_back(i);
    }
  }

  std::ofstream labels = open_out(o.out);
  for (const Autolabel& l : pool) write_label(labels, l);
  close_out(labels, o.out);
  const std::string records_path = o.records.empty() ? o.out + ".csv" : o.records;
  std::ofstream csv = open_out(records_path);
  for (std::size_t k = 0; k < records.size(); ++k) {
    write_records_csv(csv, std::span<const InstanceRecord>(&records[k], 1), record_loop[k], k == 0);
  }
  close_out(csv, records_path);
  std::cout << "labels -> " << o.out << ", records -> " << records_path << "\n";
  return 0;
}

// ---- eval ----

struct EvalOptions {
  std::string labels;
  std::string truth;
  std::string metrics;
  std::string cutoffs;
  std::optional<std::string> max_difficulty;
  std::string csv;
};

int evaluate(const RunConfig& c, const EvalOptions& o) {
  std::vector<MetricColumn> columns = c.metrics;
  if (!o.metrics.empty() || !o.cutoffs.empty()) {
    if (o.metrics.empty() || o.cutoffs.empty()) throw UsageError("--metrics and --cutoffs go together");
    const std::vector<std::string> names = split(o.metrics), cuts = split(o.cutoffs);
    if (cuts.size() != 1 && cuts.size() != names.size()) {
      throw UsageError("--cutoffs needs one value or one per metric");
    }
    columns.clear();
    for (std::size_t i = 0; i < names.size(); ++i) {
      columns.push_back({parse_metric(names[i]), parse_number(cuts[cuts.size() == 1 ? 0 : i])});
    }
  }
  std::optional<Difficulty> max_difficulty;
  if (o.max_difficulty) max_difficulty = difficulty_from_string(*o.max_difficulty);

  const Dataset d = read_dataset(o.truth);
  std::ifstream in = open_in(o.labels);
  const std::vector<Autolabel> labels = latest_labels(read_labels(in));
  const SurfaceExtractor extractor = c.extractor();
  AblationRow row;
  row.name = "labels";
  row.ap = evaluate_labels(labels, d, extractor, columns, max_difficulty);
  row.predictions = labels.size();
  write_ap_table(std::cout, std::span<const AblationRow>(&row, 1), columns);
  if (!o.csv.empty()) {
    std::ofstream out = open_out(o.csv);
    write_ap_csv(out, std::span<const AblationRow>(&row, 1), columns);
    close_out(out, o.csv);
  }
  return 0;
}

// ---- gradcheck ----

int gradcheck(const RunConfig& c, const std::string& module, double tol) {
  const GradModule m = grad_module_from_string(module);
  const SurfaceExtractor extractor = c.extractor();
  const ad::GradCheckResult r = module_gradcheck(m, extractor);
  const bool pass = r.max_relative_error <= tol;
  std::cout << module << ": max relative error " << std::setprecision(3) << std::scientific << r.max_relative_error
            << " over " << r.analytic.size() << " parameters (tol " << tol << ") " << (pass ? "ok" : "FAILED")
            << "\n";
  return pass ? 0 : kCheckFailed;
}

// ---- train-decoder ----

struct DecoderOptions {
  std::string out;
  std::size_t samples = 10000;
  double near_fraction = 0.5;
  std::optional<int> epochs;
};

int train(RunConfig c, const DecoderOptions& o) {
  if (o.epochs) c.decoder.epochs = *o.epochs;
  const ShapeSpace space = ShapeSpace::default_cars();
  std::vector<LatentCode> latents;
  for (const Vec3& a : space.anchors()) latents.push_back(LatentCode::from(a));
  const auto train_set = sample_sdf(space, latents, o.samples, o.near_fraction, c.seed);
  const auto held_out = sample_sdf(space, latents, std::max<std::size_t>(1, o.samples / 5), o.near_fraction,
                                   c.seed ^ 0x5bd1e995u);
  const DecoderTrainResult r = train_decoder(train_set, c.decoder);
  std::ofstream out = open_out(o.out);
  r.decoder.save(out);
  close_out(out, o.out);
  std::cout << "decoder: " << train_set.size() << " samples, " << c.decoder.epochs << " epochs, MAE train "
            << std::setprecision(4) << decoder_mae(r, train_set, c.decoder.clamp) << ", held-out "
            << decoder_mae(r, held_out, c.decoder.clamp) << " -> " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdfal: 3D cuboid autolabeling with a differentiable SDF renderer"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Global g;
  app.add_option("--config", g.config, "JSON run configuration (flags override it)");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--jobs", g.jobs, "Worker threads (default: available cores)")->check(CLI::PositiveNumber);
  app.add_flag("--dump-config", g.dump_config, "Print the effective configuration and exit");

  GenOptions gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-scenes", "Generate synthetic scenes with LIDAR and 2D labels");
  cmd_gen->add_option("--out", gen.out, "Scene file")->required();
  cmd_gen->add_option("--scenes", gen.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  cmd_gen->add_option("--instances", gen.instances, "Instances per scene")->check(CLI::PositiveNumber);

  RenderOptions ren;
  CLI::App* cmd_render = app.add_subcommand("render", "Render the ground-truth NOCS of one instance");
  cmd_render->add_option("--scenes", ren.scenes, "Scene file")->required();
  cmd_render->add_option("--scene", ren.scene, "Scene id")->required();
  cmd_render->add_option("--instance", ren.instance, "Instance id")->required();
  cmd_render->add_option("--out-prefix", ren.prefix, "Output prefix")->required();
  cmd_render->add_option("--sigma", ren.sigma, "Transparency constant");
  cmd_render->add_option("--grid-res", ren.grid_res, "Query grid resolution");

  AutolabelOptions al;
  CLI::App* cmd_auto = app.add_subcommand("autolabel", "Run the curriculum of autolabeling loops");
  cmd_auto->add_option("--scenes", al.scenes, "Scene file")->required();
  cmd_auto->add_option("--predictor", al.predictor, "NOCS/shape predictor")->check(CLI::IsMember({"oracle", "file"}));
  cmd_auto->add_option("--predictions", al.predictions, "Prediction file for --predictor file");
  cmd_auto->add_option("--stage", al.stage, "Hardest curriculum stage")->check(CLI::IsMember({"easy", "moderate", "hard"}));
  cmd_auto->add_option("--loops", al.loops, "Number of loops")->check(CLI::PositiveNumber);
  cmd_auto->add_option("--out", al.out, "Label pool (JSON lines)")->required();
  cmd_auto->add_option("--records", al.records, "Per-instance CSV (default: <out>.csv)");

  EvalOptions ev;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Average precision of labels against ground truth");
  cmd_eval->add_option("--labels", ev.labels, "Label pool")->required();
  cmd_eval->add_option("--ground-truth", ev.truth, "Scene file")->required();
  cmd_eval->add_option("--metrics", ev.metrics, "Comma list of bev, 3d, ns");
  cmd_eval->add_option("--cutoffs", ev.cutoffs, "Comma list, one per metric or one for all");
  cmd_eval->add_option("--max-difficulty", ev.max_difficulty, "Ignore harder ground truth")
      ->check(CLI::IsMember({"easy", "moderate", "hard"}));
  cmd_eval->add_option("--csv", ev.csv, "Also write the table as CSV");

  std::string module;
  double tol = 1e-3;
  CLI::App* cmd_grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  cmd_grad->add_option("--module", module, "autodiff, renderer or alignment")
      ->required()
      ->check(CLI::IsMember({"autodiff", "renderer", "alignment"}));
  cmd_grad->add_option("--tol", tol, "Maximum relative error")->check(CLI::PositiveNumber);

  DecoderOptions dec;
  CLI::App* cmd_dec = app.add_subcommand("train-decoder", "Fit the tiny SDF decoder to the car shape space");
  cmd_dec->add_option("--out", dec.out, "Decoder file")->required();
  cmd_dec->add_option("--samples", dec.samples, "Training samples")->check(CLI::PositiveNumber);
  cmd_dec->add_option("--near-fraction", dec.near_fraction, "Share of near-surface samples")->check(CLI::Range(0.0, 1.0));
  cmd_dec->add_option("--epochs", dec.epochs, "Epochs")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 1;
  }

  try {
    const RunConfig c = resolve(g);
    if (g.dump_config) {
      write_run_config(std::cout, c);
      return 0;
    }
    if (cmd_gen->parsed()) return gen_scenes(c, gen);
    if (cmd_render->parsed()) return render_instance(c, ren);
    if (cmd_auto->parsed()) return autolabel(c, al);
    if (cmd_eval->parsed()) return evaluate(c, ev);
    if (cmd_grad->parsed()) return gradcheck(c, module, tol);
    if (cmd_dec->parsed()) return train(c, dec);
    std::cerr << "error: a subcommand is required\n\n" << app.help();
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
