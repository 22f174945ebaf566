#include "sdfal/config.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"
#include "sdfal/errors.hpp"

namespace sdfal {

namespace {

using json = nlohmann::ordered_json;

// Reads the keys of one JSON object into fields and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError("config: " + path_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw UsageError("config: bad value for " + path_ + "." + key);
    }
  }

  // Nested object; absent keys leave the defaults untouched.
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.contains(item.key())) throw UsageError("config: unknown key " + path_ + "." + item.key());
    }
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* metric_key(MatchMetric m) {
  switch (m) {
    case MatchMetric::kBev: return "bev";
    case MatchMetric::kIou3d: return "3d";
    case MatchMetric::kCenterDistance: return "ns";
  }
  return "";
}

MatchMetric metric_from_key(const std::string& s) {
  if (s == "bev") return MatchMetric::kBev;
  if (s == "3d") return MatchMetric::kIou3d;
  if (s == "ns") return MatchMetric::kCenterDistance;
  throw UsageError("config: unknown metric '" + s + "' (bev, 3d, ns)");
}

void read_camera(Section& s, Camera& c) {
  s.get("fx", c.fx);
  s.get("fy", c.fy);
  s.get("cx", c.cx);
  s.get("cy", c.cy);
  s.get("width", c.width);
  s.get("height", c.height);
  s.finish();
}

void read_lidar(Section& s, LidarConfig& c) {
  s.get("beams", c.beams);
  s.get("elevation_min_deg", c.elevation_min_deg);
  s.get("elevation_max_deg", c.elevation_max_deg);
  s.get("azimuth_step_deg", c.azimuth_step_deg);
  s.get("dropout", c.dropout);
  s.get("range_noise", c.range_noise);
  s.get("max_range", c.max_range);
  s.get("max_steps", c.max_steps);
  s.get("tolerance", c.tolerance);
  s.finish();
}

void read_curriculum(Section& s, CurriculumConfig& c) {
  s.get("easy_min_height", c.easy_min_height);
  s.get("moderate_min_height", c.moderate_min_height);
  s.get("moderate_max_iou", c.moderate_max_iou);
  s.finish();
}

void read_scene(Section& s, SceneConfig& c) {
  s.get("scenes", c.scenes);
  s.get("instances_per_scene", c.instances_per_scene);
  s.get("depth_min", c.depth_min);
  s.get("depth_max", c.depth_max);
  s.get("scale_min", c.scale_min);
  s.get("scale_max", c.scale_max);
  s.get("camera_height", c.camera_height);
  s.get("yaw_only", c.yaw_only);
  s.get("max_retries", c.max_retries);
  s.get("min_label_pixels", c.min_label_pixels);
  if (const json* j = s.child("camera")) {
    Section sub(*j, s.path() + ".camera");
    read_camera(sub, c.camera);
  }
  if (const json* j = s.child("lidar")) {
    Section sub(*j, s.path() + ".lidar");
    read_lidar(sub, c.lidar);
  }
  if (const json* j = s.child("curriculum")) {
    Section sub(*j, s.path() + ".curriculum");
    read_curriculum(sub, c.curriculum);
  }
  s.finish();
}

void read_shape(Section& s, RunConfig& c) {
  s.get("grid_resolution", c.grid.resolution);
  std::vector<double> lo(c.grid.lo.data(), c.grid.lo.data() + 3), hi(c.grid.hi.data(), c.grid.hi.data() + 3);
  s.get("grid_lo", lo);
  s.get("grid_hi", hi);
  if (lo.size() != 3 || hi.size() != 3) throw UsageError("config: shape.grid_lo and grid_hi need 3 values");
  c.grid.lo = Vec3(lo[0], lo[1], lo[2]);
  c.grid.hi = Vec3(hi[0], hi[1], hi[2]);
  s.get("band", c.band);
  s.finish();
}

void read_render(Section& s, RenderConfig& c) {
  s.get("sigma", c.sigma);
  std::vector<double> bg(c.background.data(), c.background.data() + 3);
  s.get("background", bg);
  if (bg.size() != 3) throw UsageError("config: render.background needs 3 values");
  c.background = Vec3(bg[0], bg[1], bg[2]);
  s.get("epsilon", c.epsilon);
  s.finish();
}

void read_ransac(Section& s, RansacConfig& c) {
  s.get("p", c.p);
  s.get("w", c.w);
  s.get("sample_size", c.sample_size);
  s.get("inlier_threshold", c.inlier_threshold);
  s.get("seed", c.seed);
  s.finish();
}

void read_refine(Section& s, RefineConfig& c) {
  s.get("iterations", c.iterations);
  s.get("pose_lr", c.pose_lr);
  s.get("scale_lr", c.scale_lr);
  s.get("shape_lr", c.shape_lr);
  s.get("optimize_rotation", c.optimize_rotation);
  s.get("optimize_translation", c.optimize_translation);
  s.get("optimize_scale", c.optimize_scale);
  s.get("optimize_shape", c.optimize_shape);
  s.get("keep_best", c.keep_best);
  s.get("use_2d", c.loss.use_2d);
  s.get("use_3d", c.loss.use_3d);
  s.finish();
}

void read_verify(Section& s, VerifyConfig& c) {
  s.get("band", c.band);
  s.get("min_band_fraction", c.min_band_fraction);
  s.get("min_mask_iou", c.min_mask_iou);
  s.finish();
}

void read_loop(Section& s, LoopConfig& c) {
  s.get("patch_size", c.patch_size);
  s.get("nocs_threshold", c.nocs_threshold);
  s.get("lidar_threshold", c.lidar_threshold);
  std::string mode = c.nocs_2d == AlignmentProblem::Nocs2d::kMatched ? "matched" : "spatial";
  s.get("nocs_2d", mode);
  if (mode == "matched") {
    c.nocs_2d = AlignmentProblem::Nocs2d::kMatched;
  } else if (mode == "spatial") {
    c.nocs_2d = AlignmentProblem::Nocs2d::kSpatial;
  } else {
    throw UsageError("config: loop.nocs_2d must be 'matched' or 'spatial'");
  }
  s.get("skip_refinement", c.skip_refinement);
  if (const json* j = s.child("ransac")) {
    Section sub(*j, s.path() + ".ransac");
    read_ransac(sub, c.ransac);
  }
  if (const json* j = s.child("refine")) {
    Section sub(*j, s.path() + ".refine");
    read_refine(sub, c.refine);
  }
  if (const json* j = s.child("verify")) {
    Section sub(*j, s.path() + ".verify");
    read_verify(sub, c.verify);
  }
  s.finish();
}

void read_oracle(const json& j, std::vector<OracleNoise>& out) {
  if (!j.is_array() || j.empty()) throw UsageError("config: oracle must be a non-empty array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    Section s(j[i], "oracle[" + std::to_string(i) + "]");
    OracleNoise n;
    s.get("nocs_sigma", n.nocs_sigma);
    s.get("dropout", n.dropout);
    s.get("latent_angle", n.latent_angle);
    s.finish();
    out.push_back(n);
  }
}

void read_metrics(const json& j, std::vector<MetricColumn>& out) {
  if (!j.is_array() || j.empty()) throw UsageError("config: metrics must be a non-empty array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    Section s(j[i], "metrics[" + std::to_string(i) + "]");
    std::string name;
    double cutoff = 0.0;
    s.get("metric", name);
    s.get("cutoff", cutoff);
    s.finish();
    out.push_back({metric_from_key(name), cutoff});
  }
}

void read_decoder(Section& s, DecoderTrainConfig& c) {
  s.get("hidden", c.hidden);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("learning_rate", c.learning_rate);
  s.get("latent_learning_rate", c.latent_learning_rate);
  s.get("clamp", c.clamp);
  s.get("optimize_latents", c.optimize_latents);
  s.get("seed", c.seed);
  s.finish();
}

json vec3(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

std::vector<OracleNoise> RunConfig::default_oracle_schedule() {
  constexpr double deg = std::numbers::pi / 180.0;
  return {OracleNoise{0.08, 0.10, 10.0 * deg}, OracleNoise{0.03, 0.05, 5.0 * deg}};
}

SurfaceExtractor RunConfig::extractor() const { return SurfaceExtractor(ShapeSpace::default_cars(), grid, band); }

Difficulty RunConfig::stage_of(int loop) const {
  return static_cast<Difficulty>(std::min(loop, static_cast<int>(stage)));
}

RunConfig load_run_config(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "config");
  root.get("seed", c.seed);
  root.get("loops", c.loops);
  std::string stage = to_string(c.stage);
  root.get("stage", stage);
  c.stage = difficulty_from_string(stage);
  root.get("jobs", c.jobs);
  if (const json* s = root.child("scene")) {
    Section sub(*s, "scene");
    read_scene(sub, c.scene);
  }
  if (const json* s = root.child("shape")) {
    Section sub(*s, "shape");
    read_shape(sub, c);
  }
  if (const json* s = root.child("render")) {
    Section sub(*s, "render");
    read_render(sub, c.loop.render);
  }
  if (const json* s = root.child("loop")) {
    Section sub(*s, "loop");
    read_loop(sub, c.loop);
  }
  if (const json* s = root.child("oracle")) read_oracle(*s, c.oracle);
  if (const json* s = root.child("metrics")) read_metrics(*s, c.metrics);
  if (const json* s = root.child("decoder")) {
    Section sub(*s, "decoder");
    read_decoder(sub, c.decoder);
  }
  root.finish();
  if (c.loops < 1) throw UsageError("config: loops must be >= 1");
  if (c.jobs < 0) throw UsageError("config: jobs must be >= 0");
  return c;
}

RunConfig load_run_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open " + path);
  return load_run_config(in);
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  const SceneConfig& sc = c.scene;
  const LoopConfig& lc = c.loop;
  json j;
  j["seed"] = c.seed;
  j["loops"] = c.loops;
  j["stage"] = to_string(c.stage);
  j["jobs"] = c.jobs;
  j["scene"] = {
      {"scenes", sc.scenes},
      {"instances_per_scene", sc.instances_per_scene},
      {"depth_min", sc.depth_min},
      {"depth_max", sc.depth_max},
      {"scale_min", sc.scale_min},
      {"scale_max", sc.scale_max},
      {"camera_height", sc.camera_height},
      {"yaw_only", sc.yaw_only},
      {"max_retries", sc.max_retries},
      {"min_label_pixels", sc.min_label_pixels},
      {"camera",
       {{"fx", sc.camera.fx},
        {"fy", sc.camera.fy},
        {"cx", sc.camera.cx},
        {"cy", sc.camera.cy},
        {"width", sc.camera.width},
        {"height", sc.camera.height}}},
      {"lidar",
       {{"beams", sc.lidar.beams},
        {"elevation_min_deg", sc.lidar.elevation_min_deg},
        {"elevation_max_deg", sc.lidar.elevation_max_deg},
        {"azimuth_step_deg", sc.lidar.azimuth_step_deg},
        {"dropout", sc.lidar.dropout},
        {"range_noise", sc.lidar.range_noise},
        {"max_range", sc.lidar.max_range},
        {"max_steps", sc.lidar.max_steps},
        {"tolerance", sc.lidar.tolerance}}},
      {"curriculum",
       {{"easy_min_height", sc.curriculum.easy_min_height},
        {"moderate_min_height", sc.curriculum.moderate_min_height},
        {"moderate_max_iou", sc.curriculum.moderate_max_iou}}},
  };
  j["shape"] = {{"grid_resolution", c.grid.resolution},
                {"grid_lo", vec3(c.grid.lo)},
                {"grid_hi", vec3(c.grid.hi)},
                {"band", c.band}};
  j["render"] = {{"sigma", lc.render.sigma}, {"background", vec3(lc.render.background)}, {"epsilon", lc.render.epsilon}};
  j["loop"] = {
      {"patch_size", lc.patch_size},
      {"nocs_threshold", lc.nocs_threshold},
      {"lidar_threshold", lc.lidar_threshold},
      {"nocs_2d", lc.nocs_2d == AlignmentProblem::Nocs2d::kMatched ? "matched" : "spatial"},
      {"skip_refinement", lc.skip_refinement},
      {"ransac",
       {{"p", lc.ransac.p},
        {"w", lc.ransac.w},
        {"sample_size", lc.ransac.sample_size},
        {"inlier_threshold", lc.ransac.inlier_threshold},
        {"seed", lc.ransac.seed}}},
      {"refine",
       {{"iterations", lc.refine.iterations},
        {"pose_lr", lc.refine.pose_lr},
        {"scale_lr", lc.refine.scale_lr},
        {"shape_lr", lc.refine.shape_lr},
        {"optimize_rotation", lc.refine.optimize_rotation},
        {"optimize_translation", lc.refine.optimize_translation},
        {"optimize_scale", lc.refine.optimize_scale},
        {"optimize_shape", lc.refine.optimize_shape},
        {"keep_best", lc.refine.keep_best},
        {"use_2d", lc.refine.loss.use_2d},
        {"use_3d", lc.refine.loss.use_3d}}},
      {"verify",
       {{"band", lc.verify.band},
        {"min_band_fraction", lc.verify.min_band_fraction},
        {"min_mask_iou", lc.verify.min_mask_iou}}},
  };
  j["oracle"] = json::array();
  for (const OracleNoise& n : c.oracle) {
    j["oracle"].push_back({{"nocs_sigma", n.nocs_sigma}, {"dropout", n.dropout}, {"latent_angle", n.latent_angle}});
  }
  j["metrics"] = json::array();
  for (const MetricColumn& m : c.metrics) j["metrics"].push_back({{"metric", metric_key(m.metric)}, {"cutoff", m.cutoff}});
  j["decoder"] = {{"hidden", c.decoder.hidden},
                  {"epochs", c.decoder.epochs},
                  {"batch_size", c.decoder.batch_size},
                  {"learning_rate", c.decoder.learning_rate},
                  {"latent_learning_rate", c.decoder.latent_learning_rate},
                  {"clamp", c.decoder.clamp},
                  {"optimize_latents", c.decoder.optimize_latents},
                  {"seed", c.decoder.seed}};
  out << j.dump(2) << "\n";
}

}  // namespace sdfal
