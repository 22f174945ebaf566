#include "sdfal/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <thread>

#include <Eigen/Geometry>

#include "json.hpp"
#include "sdfal/errors.hpp"

namespace sdfal {

using nlohmann::json;

Camera kitti_camera() { return Camera{721.5377, 721.5377, 609.5593, 172.854, 1242, 375}; }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::uint64_t h = mix(base);
  h = mix(h ^ a);
  h = mix(h ^ b);
  return mix(h ^ c);
}

// ---- scenes ----

double box_iou(const Box2D& a, const Box2D& b) {
  const Box2D i{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const double inter = static_cast<double>(i.area());
  const double uni = static_cast<double>(a.area() + b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return "easy";
    case Difficulty::kModerate: return "moderate";
    case Difficulty::kHard: return "hard";
  }
  return "hard";
}

Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::kEasy;
  if (s == "moderate") return Difficulty::kModerate;
  if (s == "hard") return Difficulty::kHard;
  throw UsageError("unknown difficulty '" + s + "' (expected easy, moderate or hard)");
}

bool SceneInstance::mask_at(int x, int y) const {
  if (x < box.x0 || x >= box.x1 || y < box.y0 || y >= box.y1) return false;
  return mask[static_cast<std::size_t>(y - box.y0) * box.width() + (x - box.x0)] != 0;
}

std::size_t SceneInstance::mask_area() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

std::size_t Dataset::instance_count() const {
  std::size_t n = 0;
  for (const Scene& s : scenes) n += s.instances.size();
  return n;
}

Difficulty classify_difficulty(const Box2D& box, bool border, std::span<const Box2D> others,
                               const CurriculumConfig& config) {
  double max_iou = 0.0;
  bool overlaps = false;
  for (const Box2D& o : others) {
    const Box2D i{std::max(box.x0, o.x0), std::max(box.y0, o.y0), std::min(box.x1, o.x1), std::min(box.y1, o.y1)};
    overlaps = overlaps || !i.empty();
    max_iou = std::max(max_iou, box_iou(box, o));
  }
  const double h = box.height();
  if (h > config.easy_min_height && !overlaps && !border) return Difficulty::kEasy;
  if (h > config.moderate_min_height && max_iou <= config.moderate_max_iou) return Difficulty::kModerate;
  return Difficulty::kHard;
}

double instance_sdf(const ShapeSpace& space, const SimilarityTransform& pose, const LatentCode& z,
                    const Vec3& x_camera) {
  return pose.s * space.sdf(pose.inverse_apply(x_camera), z);
}

std::optional<double> trace_ray(const ShapeSpace& space, std::span<const SceneInstance> instances,
                                const Vec3& origin, const Vec3& direction, const LidarConfig& config) {
  std::optional<double> best;
  for (const SceneInstance& inst : instances) {
    // Every basis surface lies in the ball of radius 0.5 around the model origin.
    const double radius = 0.5 * inst.pose.s;
    const Vec3 oc = origin - inst.pose.t;
    const double b = direction.dot(oc);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    const double root = std::sqrt(disc);
    const double t_exit = -b + root;
    double t = std::max(0.0, -b - root);
    if (t_exit < 0.0 || t > config.max_range) continue;
    if (best && t >= *best) continue;
    for (int step = 0; step < config.max_steps; ++step) {
      const double f = instance_sdf(space, inst.pose, inst.latent, origin + t * direction);
      if (f < config.tolerance) {
        if (t <= config.max_range && (!best || t < *best)) best = t;
        break;
      }
      t += f;
      if (t > t_exit) break;
    }
  }
  return best;
}

std::vector<Vec3> simulate_lidar(const ShapeSpace& space, std::span<const SceneInstance> instances,
                                 const Camera& camera, const LidarConfig& config, std::uint64_t seed) {
  if (config.beams < 1 || !(config.azimuth_step_deg > 0.0) || config.dropout < 0.0 || config.dropout > 1.0 ||
      config.range_noise < 0.0) {
    throw UsageError("simulate_lidar: invalid configuration");
  }
  constexpr double kDeg = std::numbers::pi / 180.0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double az_lo = std::atan2(0.0 - camera.cx, camera.fx);
  const double az_hi = std::atan2(camera.width - camera.cx, camera.fx);
  const int az_count = static_cast<int>(std::floor((az_hi - az_lo) / (config.azimuth_step_deg * kDeg))) + 1;
  std::vector<Vec3> out;
  for (int beam = 0; beam < config.beams; ++beam) {
    const double el = config.beams == 1 ? config.elevation_min_deg
                                        : config.elevation_min_deg + beam * (config.elevation_max_deg -
                                                                             config.elevation_min_deg) /
                                                                            (config.beams - 1);
    const double ce = std::cos(el * kDeg), se = std::sin(el * kDeg);
    for (int a = 0; a < az_count; ++a) {
      const double az = az_lo + a * config.azimuth_step_deg * kDeg;
      const Vec3 dir(ce * std::sin(az), -se, ce * std::cos(az));
      const double drop = unit(rng);
      const double n = noise(rng);
      if (drop < config.dropout) continue;
      const std::optional<double> hit = trace_ray(space, instances, Vec3::Zero(), dir, config);
      if (!hit) continue;
      const Vec3 p = (*hit + config.range_noise * n) * dir;
      const Vec2 uv = camera.project(p);
      if (p.z() <= 0.0 || uv.x() < 0.0 || uv.y() < 0.0 || uv.x() >= camera.width || uv.y() >= camera.height) {
        continue;
      }
      out.push_back(p);
    }
  }
  return out;
}

void label_instance(SceneInstance& instance, const SurfaceExtractor& extractor, const Camera& camera,
                    const RenderConfig& render_config) {
  const SurfacePointSet surface = extractor.extract(instance.latent);
  const RenderOutput img = render(surface, instance.pose, camera, render_config);
  Box2D box{camera.width, camera.height, 0, 0};
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      if (img.mask[img.pixel(x, y)] > 0.0) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
    }
  }
  instance.mask.clear();
  if (box.empty()) {
    instance.box = Box2D{};
    instance.border = false;
    return;
  }
  instance.box = box;
  instance.border = box.x0 == 0 || box.y0 == 0 || box.x1 == camera.width || box.y1 == camera.height;
  instance.mask.reserve(static_cast<std::size_t>(box.area()));
  for (int y = box.y0; y < box.y1; ++y) {
    for (int x = box.x0; x < box.x1; ++x) instance.mask.push_back(img.mask[img.pixel(x, y)] > 0.0 ? 1 : 0);
  }
}

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    const Vec3 v(g(rng), g(rng), g(rng));
    if (v.norm() > 1e-6) return v.normalized();
  }
}

}  // namespace

Dataset generate_scenes(const SceneConfig& config, const SurfaceExtractor& extractor, std::uint64_t seed) {
  config.camera.validate();
  if (config.scenes < 0 || config.instances_per_scene < 0 || !(config.depth_min > 0.0) ||
      config.depth_max < config.depth_min || !(config.scale_min > 0.0) || config.scale_max < config.scale_min) {
    throw UsageError("generate_scenes: invalid configuration");
  }
  constexpr double kPi = std::numbers::pi;
  const Camera& cam = config.camera;
  const RenderConfig render_config;
  Dataset dataset;
  dataset.camera = cam;
  for (int sid = 0; sid < config.scenes; ++sid) {
    std::mt19937_64 rng(derive_seed(seed, 1, static_cast<std::uint64_t>(sid)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Scene scene;
    scene.id = sid;
    std::vector<Cuboid> placed;
    for (int k = 0; k < config.instances_per_scene; ++k) {
      bool accepted = false;
      for (int attempt = 0; attempt <= config.max_retries && !accepted; ++attempt) {
        SceneInstance inst;
        inst.id = k;
        const double depth = config.depth_min + (config.depth_max - config.depth_min) * unit(rng);
        const double u = cam.width * (0.05 + 0.9 * unit(rng));
        const double yaw = kPi * (2.0 * unit(rng) - 1.0);
        const Vec3 z = random_unit(rng);
        const double s = config.scale_min + (config.scale_max - config.scale_min) * unit(rng);
        const Mat3 R = config.yaw_only ? yaw_rotation(yaw) : random_rotation(rng);
        inst.latent = project_latent(z);
        const SurfacePointSet surface = extractor.extract(inst.latent);
        double bottom = -std::numeric_limits<double>::infinity();
        for (const Vec3& p : surface.points) bottom = std::max(bottom, (R * p).y());
        inst.pose.R = R;
        inst.pose.s = s;
        inst.pose.t = Vec3((u - cam.cx) * depth / cam.fx, config.camera_height - s * bottom, depth);
        const Cuboid cuboid = derive_cuboid(surface, inst.pose);
        bool collides = false;
        for (const Cuboid& other : placed) collides = collides || bev_iou(cuboid, other) > 0.0;
        if (collides) continue;
        label_instance(inst, extractor, cam, render_config);
        if (inst.box.empty() || inst.mask_area() < static_cast<std::size_t>(config.min_label_pixels)) continue;
        placed.push_back(cuboid);
        scene.instances.push_back(std::move(inst));
        accepted = true;
      }
      if (!accepted) {
        throw DataError("generate_scenes: could not place instance " + std::to_string(k) + " of scene " +
                        std::to_string(sid) + " after " + std::to_string(config.max_retries + 1) + " draws");
      }
    }
    const std::vector<Vec3> lidar = simulate_lidar(extractor.space(), scene.instances, cam, config.lidar,
                                                   derive_seed(seed, 2, static_cast<std::uint64_t>(sid)));
    std::vector<Box2D> boxes;
    for (const SceneInstance& inst : scene.instances) boxes.push_back(inst.box);
    for (std::size_t i = 0; i < scene.instances.size(); ++i) {
      SceneInstance& inst = scene.instances[i];
      for (const Vec3& p : lidar) {
        const Vec2 uv = cam.project(p);
        const int x = static_cast<int>(std::floor(uv.x()));
        const int y = static_cast<int>(std::floor(uv.y()));
        if (x >= inst.box.x0 && x < inst.box.x1 && y >= inst.box.y0 && y < inst.box.y1) inst.lidar.push_back(p);
      }
      std::vector<Box2D> others;
      for (std::size_t j = 0; j < boxes.size(); ++j) {
        if (j != i) others.push_back(boxes[j]);
      }
      inst.difficulty = classify_difficulty(inst.box, inst.border, others, config.curriculum);
    }
    dataset.scenes.push_back(std::move(scene));
  }
  return dataset;
}

// ---- scene IO ----

namespace {

constexpr const char* kScenesSchema = "sdfal/scenes/v1";
constexpr const char* kLabelSchema = "sdfal/autolabel/v1";
constexpr const char* kPredictionsSchema = "sdfal/predictions/v1";

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json mat_json(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  }
  return a;
}

Mat3 mat_from(const json& j) {
  if (!j.is_array() || j.size() != 9) throw DataError("expected a row-major 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = j[r * 3 + c].get<double>();
  }
  return m;
}

json camera_json(const Camera& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

Camera camera_from(const json& j) {
  Camera c{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
           j.at("cy").get<double>(), j.at("width").get<int>(),  j.at("height").get<int>()};
  c.validate();
  return c;
}

// Alternating run lengths, starting with a (possibly empty) run of zeros.
json rle_json(const std::vector<std::uint8_t>& mask) {
  json runs = json::array();
  std::uint8_t current = 0;
  long run = 0;
  for (std::uint8_t m : mask) {
    const std::uint8_t v = m ? 1 : 0;
    if (v != current) {
      runs.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

std::vector<std::uint8_t> rle_from(const json& j, std::size_t expected) {
  std::vector<std::uint8_t> mask;
  std::uint8_t current = 0;
  for (const json& r : j) {
    const long n = r.get<long>();
    if (n < 0 || mask.size() + static_cast<std::size_t>(n) > expected) throw DataError("mask: bad run length");
    mask.insert(mask.end(), static_cast<std::size_t>(n), current);
    current ^= 1;
  }
  if (mask.size() != expected) throw DataError("mask: run lengths do not cover the box");
  return mask;
}

SimilarityTransform pose_from(const json& j) {
  SimilarityTransform p;
  p.R = mat_from(j.at("R"));
  p.t = vec_from(j.at("t"));
  p.s = j.at("s").get<double>();
  p.validate();
  return p;
}

void pose_to(json& j, const SimilarityTransform& p) {
  j["R"] = mat_json(p.R);
  j["t"] = vec_json(p.t);
  j["s"] = p.s;
}

LatentCode latent_from(const json& j) {
  const Vec3 z = vec_from(j);
  if (std::abs(z.norm() - 1.0) > 1e-6) throw DataError("latent code is not on the unit sphere");
  return project_latent(z);
}

template <class F>
auto parse_guard(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

void save_dataset(std::ostream& out, const Dataset& dataset) {
  json j;
  j["schema"] = kScenesSchema;
  j["camera"] = camera_json(dataset.camera);
  j["scenes"] = json::array();
  for (const Scene& scene : dataset.scenes) {
    json js;
    js["id"] = scene.id;
    js["instances"] = json::array();
    for (const SceneInstance& inst : scene.instances) {
      json ji;
      ji["id"] = inst.id;
      pose_to(ji, inst.pose);
      ji["latent"] = vec_json(inst.latent.vec());
      ji["box"] = {inst.box.x0, inst.box.y0, inst.box.x1, inst.box.y1};
      ji["border"] = inst.border;
      ji["difficulty"] = to_string(inst.difficulty);
      ji["mask_rle"] = rle_json(inst.mask);
      json pts = json::array();
      for (const Vec3& p : inst.lidar) {
        pts.push_back(p.x());
        pts.push_back(p.y());
        pts.push_back(p.z());
      }
      ji["lidar"] = std::move(pts);
      js["instances"].push_back(std::move(ji));
    }
    j["scenes"].push_back(std::move(js));
  }
  out << j.dump() << "\n";
}

Dataset load_dataset(std::istream& in) {
  return parse_guard("scene file", [&] {
    const json j = json::parse(in);
    if (j.value("schema", std::string()) != kScenesSchema) {
      throw DataError(std::string("scene file: expected schema ") + kScenesSchema);
    }
    Dataset d;
    d.camera = camera_from(j.at("camera"));
    for (const json& js : j.at("scenes")) {
      Scene scene;
      scene.id = js.at("id").get<int>();
      for (const json& ji : js.at("instances")) {
        SceneInstance inst;
        inst.id = ji.at("id").get<int>();
        inst.pose = pose_from(ji);
        inst.latent = latent_from(ji.at("latent"));
        const json& b = ji.at("box");
        if (!b.is_array() || b.size() != 4) throw DataError("scene file: box needs 4 entries");
        inst.box = Box2D{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
        if (inst.box.x0 < 0 || inst.box.y0 < 0 || inst.box.x1 > d.camera.width || inst.box.y1 > d.camera.height) {
          throw DataError("scene file: box outside the image");
        }
        inst.border = ji.at("border").get<bool>();
        inst.difficulty = difficulty_from_string(ji.at("difficulty").get<std::string>());
        inst.mask = rle_from(ji.at("mask_rle"), static_cast<std::size_t>(inst.box.area()));
        const json& pts = ji.at("lidar");
        if (pts.size() % 3 != 0) throw DataError("scene file: lidar block length is not a multiple of 3");
        for (std::size_t k = 0; k < pts.size(); k += 3) {
          inst.lidar.emplace_back(pts[k].get<double>(), pts[k + 1].get<double>(), pts[k + 2].get<double>());
        }
        scene.instances.push_back(std::move(inst));
      }
      d.scenes.push_back(std::move(scene));
    }
    return d;
  });
}

// ---- predictions ----

Camera patch_camera(const Camera& camera, const Box2D& box, int patch_size) {
  if (box.empty() || patch_size < 4) throw UsageError("patch_camera: empty box or patch size < 4");
  const double k = static_cast<double>(patch_size) / std::max(box.width(), box.height());
  const int w = std::max(1, static_cast<int>(std::lround(box.width() * k)));
  const int h = std::max(1, static_cast<int>(std::lround(box.height() * k)));
  return camera.crop(box.x0, box.y0, box.x1, box.y1, w, h);
}

OraclePredictor::OraclePredictor(const SurfaceExtractor& extractor, RenderConfig render,
                                 std::vector<OracleNoise> schedule, std::uint64_t seed)
    : extractor_(&extractor), render_(render), schedule_(std::move(schedule)), seed_(seed) {
  if (schedule_.empty()) schedule_.push_back(OracleNoise{});
  for (const OracleNoise& n : schedule_) {
    if (n.nocs_sigma < 0.0 || n.dropout < 0.0 || n.dropout > 1.0 || n.latent_angle < 0.0) {
      throw UsageError("OraclePredictor: invalid noise level");
    }
  }
}

const OracleNoise& OraclePredictor::noise() const {
  return schedule_[std::min<std::size_t>(static_cast<std::size_t>(updates_), schedule_.size() - 1)];
}

void OraclePredictor::update(std::span<const Autolabel>) { ++updates_; }

LatentCode perturb_latent(const LatentCode& z, double angle, std::uint64_t seed) {
  if (angle == 0.0) return z;
  std::mt19937_64 rng(seed);
  const Vec3& v = z.vec();
  Vec3 axis;
  do {
    axis = random_unit(rng);
    axis -= axis.dot(v) * v;
  } while (axis.norm() < 1e-3);
  axis.normalize();
  return project_latent(std::cos(angle) * v + std::sin(angle) * axis);
}

CssPrediction OraclePredictor::predict(const Scene& scene, const SceneInstance& instance, const Camera& patch) const {
  const OracleNoise& n = noise();
  std::mt19937_64 rng(derive_seed(seed_, static_cast<std::uint64_t>(updates_), static_cast<std::uint64_t>(scene.id),
                                  static_cast<std::uint64_t>(instance.id)));
  const SurfacePointSet surface = extractor_->extract(instance.latent);
  const RenderOutput img = render(surface, instance.pose, patch, render_);
  CssPrediction out;
  out.nocs.width = patch.width;
  out.nocs.height = patch.height;
  out.nocs.colors.assign(img.nocs.size(), Vec3::Zero());
  out.nocs.valid.assign(img.nocs.size(), 0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t px = 0; px < img.nocs.size(); ++px) {
    if (!(img.mask[px] > 0.0)) continue;
    Vec3 c = img.nocs[px];
    if (n.nocs_sigma > 0.0) {
      for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k] + n.nocs_sigma * gauss(rng), 0.0, 1.0);
    }
    if (n.dropout > 0.0 && unit(rng) < n.dropout) continue;
    out.nocs.colors[px] = c;
    out.nocs.valid[px] = 1;
  }
  out.latent = perturb_latent(instance.latent, n.latent_angle, rng());
  return out;
}

FilePredictor::FilePredictor(std::istream& in) {
  entries_ = parse_guard("prediction file", [&] {
    const json j = json::parse(in);
    if (j.value("schema", std::string()) != kPredictionsSchema) {
      throw DataError(std::string("prediction file: expected schema ") + kPredictionsSchema);
    }
    std::vector<Entry> entries;
    for (const json& e : j.at("predictions")) {
      Entry entry{e.at("scene").get<int>(), e.at("instance").get<int>(), CssPrediction{}};
      NocsMap& m = entry.prediction.nocs;
      m.width = e.at("width").get<int>();
      m.height = e.at("height").get<int>();
      const std::size_t n = static_cast<std::size_t>(m.width) * static_cast<std::size_t>(m.height);
      const json& valid = e.at("valid");
      const json& nocs = e.at("nocs");
      if (m.width <= 0 || m.height <= 0 || valid.size() != n || nocs.size() != 3 * n) {
        throw DataError("prediction file: map size does not match width x height");
      }
      m.colors.resize(n);
      m.valid.resize(n);
      for (std::size_t k = 0; k < n; ++k) {
        m.valid[k] = valid[k].get<int>() != 0 ? 1 : 0;
        m.colors[k] = Vec3(nocs[3 * k].get<double>(), nocs[3 * k + 1].get<double>(), nocs[3 * k + 2].get<double>());
      }
      entry.prediction.latent = project_latent(vec_from(e.at("latent")));
      entries.push_back(std::move(entry));
    }
    return entries;
  });
}

CssPrediction FilePredictor::predict(const Scene& scene, const SceneInstance& instance, const Camera& patch) const {
  for (const Entry& e : entries_) {
    if (e.scene == scene.id && e.instance == instance.id) {
      if (e.prediction.nocs.width != patch.width || e.prediction.nocs.height != patch.height) {
        throw DataError("prediction file: patch size mismatch for scene " + std::to_string(scene.id) +
                        " instance " + std::to_string(instance.id));
      }
      return e.prediction;
    }
  }
  throw DataError("prediction file: no entry for scene " + std::to_string(scene.id) + " instance " +
                  std::to_string(instance.id));
}

void save_predictions(std::ostream& out, const std::vector<std::pair<std::pair<int, int>, CssPrediction>>& items) {
  json j;
  j["schema"] = kPredictionsSchema;
  j["predictions"] = json::array();
  for (const auto& [key, p] : items) {
    json e;
    e["scene"] = key.first;
    e["instance"] = key.second;
    e["width"] = p.nocs.width;
    e["height"] = p.nocs.height;
    e["latent"] = vec_json(p.latent.vec());
    json valid = json::array(), nocs = json::array();
    for (std::size_t k = 0; k < p.nocs.colors.size(); ++k) {
      valid.push_back(static_cast<int>(p.nocs.valid[k]));
      for (int c = 0; c < 3; ++c) nocs.push_back(p.nocs.colors[k][c]);
    }
    e["valid"] = std::move(valid);
    e["nocs"] = std::move(nocs);
    j["predictions"].push_back(std::move(e));
  }
  out << j.dump() << "\n";
}

// ---- labels ----

Cuboid derive_cuboid(const SurfacePointSet& surface, const SimilarityTransform& pose) {
  if (surface.points.empty()) throw DegenerateShapeError("derive_cuboid: empty surface");
  Vec3 lo = surface.points.front(), hi = surface.points.front();
  for (const Vec3& p : surface.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 extent = hi - lo;
  Cuboid c;
  c.center = pose.apply(0.5 * (lo + hi));
  c.dims = Vec3(extent.x(), extent.z(), extent.y()) * pose.s;
  c.yaw = yaw_of(pose.R);
  return c;
}

Cuboid derive_cuboid(const SurfaceExtractor& extractor, const SimilarityTransform& pose, const LatentCode& z) {
  return derive_cuboid(extractor.extract(z), pose);
}

double yaw_projection_error(const Mat3& R) { return rotation_angle(R, yaw_rotation(yaw_of(R))); }

Verification verify(const SurfaceExtractor& extractor, const SimilarityTransform& pose, const LatentCode& z,
                    const SceneInstance& instance, const Camera& camera, const RenderConfig& render_config,
                    const VerifyConfig& config) {
  Verification v;
  if (instance.lidar.empty()) {
    v.diagnostic = "no frustum LIDAR points";
  } else {
    std::size_t inside = 0;
    for (const Vec3& l : instance.lidar) {
      if (std::abs(instance_sdf(extractor.space(), pose, z, l)) <= config.band) ++inside;
    }
    v.band_fraction = static_cast<double>(inside) / static_cast<double>(instance.lidar.size());
  }
  const RenderOutput img = render(extractor.extract(z), pose, camera, render_config);
  std::size_t inter = 0, rendered = 0;
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      const bool a = img.mask[img.pixel(x, y)] > 0.0;
      rendered += a;
      inter += a && instance.mask_at(x, y);
    }
  }
  const std::size_t label = instance.mask_area();
  const std::size_t uni = rendered + label - inter;
  v.mask_iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  const bool band_ok = !instance.lidar.empty() && v.band_fraction >= config.min_band_fraction;
  const bool iou_ok = v.mask_iou >= config.min_mask_iou;
  v.pass = band_ok && iou_ok;
  if (v.diagnostic.empty() && !band_ok) v.diagnostic = "band fraction below threshold";
  if (!iou_ok) v.diagnostic += std::string(v.diagnostic.empty() ? "" : "; ") + "mask IoU below threshold";
  return v;
}

// ---- loop ----

std::string to_string(InstanceStatus s) {
  switch (s) {
    case InstanceStatus::kVerified: return "verified";
    case InstanceStatus::kVerifyFailed: return "verify-fail";
    case InstanceStatus::kInitFailed: return "init-fail";
    case InstanceStatus::kNumericFailed: return "nan";
  }
  return "unknown";
}

Initialization initialize_instance(const Dataset& dataset, const Scene& scene, const SceneInstance& instance,
                                  const SurfaceExtractor& extractor, const CssPredictor& predictor,
                                  const LoopConfig& config) {
  Initialization init;
  init.patch = patch_camera(dataset.camera, instance.box, config.patch_size);
  init.prediction = predictor.predict(scene, instance, init.patch);
  const NocsMap& nocs = init.prediction.nocs;
  const SurfacePointSet model = extractor.extract(init.prediction.latent);
  // Frustum points take the NOCS color of the patch pixel they project to.
  std::vector<Vec3> scene_points, scene_colors;
  for (const Vec3& l : instance.lidar) {
    if (l.z() <= 0.0) continue;
    const Vec2 uv = init.patch.project(l);
    const int x = static_cast<int>(std::floor(uv.x()));
    const int y = static_cast<int>(std::floor(uv.y()));
    if (x < 0 || y < 0 || x >= init.patch.width || y >= init.patch.height) continue;
    const std::size_t px = nocs.pixel(x, y);
    if (!nocs.valid[px]) continue;
    scene_points.push_back(l);
    scene_colors.push_back(nocs.colors[px]);
  }
  if (scene_points.empty()) throw InsufficientCorrespondencesError("no frustum point has a NOCS prediction");
  const CorrespondenceSet pairs = nocs_correspondences(model.colors, scene_colors, config.nocs_threshold);
  init.correspondences = pairs.size();
  std::vector<Vec3> source, target;
  source.reserve(pairs.size());
  target.reserve(pairs.size());
  for (const Correspondence& c : pairs) {
    source.push_back(model.points[c.model]);
    target.push_back(scene_points[c.scene]);
  }
  RansacConfig ransac = config.ransac;
  ransac.seed = derive_seed(config.ransac.seed, static_cast<std::uint64_t>(scene.id),
                            static_cast<std::uint64_t>(instance.id));
  const RansacResult r = ransac_procrustes(source, target, ransac);
  init.inliers = r.inliers.size();
  init.pose = r.pose;
  return init;
}

AlignmentObjective make_objective(const Initialization& init, const SceneInstance& instance,
                                  const SurfaceExtractor& extractor, const LoopConfig& config) {
  AlignmentProblem problem;
  problem.extractor = &extractor;
  problem.camera = init.patch;
  problem.predicted = init.prediction.nocs;
  problem.lidar = instance.lidar;
  problem.render = config.render;
  problem.nocs_threshold = config.nocs_threshold;
  problem.lidar_threshold = config.lidar_threshold;
  problem.nocs_2d = config.nocs_2d;
  return AlignmentObjective(std::move(problem));
}

InstanceRecord process_instance(const Dataset& dataset, const Scene& scene, const SceneInstance& instance,
                                const SurfaceExtractor& extractor, const CssPredictor& predictor, int loop,
                                const LoopConfig& config) {
  InstanceRecord rec;
  rec.scene = scene.id;
  rec.instance = instance.id;
  rec.difficulty = instance.difficulty;
  rec.translation_error = std::numeric_limits<double>::quiet_NaN();
  rec.yaw_error = std::numeric_limits<double>::quiet_NaN();

  Initialization init;
  try {
    init = initialize_instance(dataset, scene, instance, extractor, predictor, config);
  } catch (const Error& e) {
    rec.status = InstanceStatus::kInitFailed;
    rec.detail = e.what();
    return rec;
  }
  rec.correspondences = init.correspondences;
  rec.ransac_inliers = init.inliers;
  rec.initial_pose = init.pose;

  SimilarityTransform pose = init.pose;
  LatentCode z = init.prediction.latent;
  if (!config.skip_refinement) {
    try {
      const RefineResult res =
          refine(make_objective(init, instance, extractor, config), init.pose, init.prediction.latent, config.refine);
      if (res.failed) {
        rec.status = InstanceStatus::kNumericFailed;
        rec.detail = "refinement stopped at iteration " + std::to_string(res.trace.size() - 1);
        return rec;
      }
      pose = res.pose;
      z = res.z;
    } catch (const Error& e) {
      rec.status = InstanceStatus::kNumericFailed;
      rec.detail = e.what();
      return rec;
    }
  }

  rec.translation_error = (pose.t - instance.pose.t).norm();
  rec.yaw_error = std::abs(wrap_angle(yaw_of(pose.R) - yaw_of(instance.pose.R)));
  Verification v;
  Autolabel label;
  try {
    v = verify(extractor, pose, z, instance, dataset.camera, config.render, config.verify);
    label.cuboid = derive_cuboid(extractor, pose, z);
  } catch (const Error& e) {
    rec.status = InstanceStatus::kNumericFailed;
    rec.detail = e.what();
    return rec;
  }
  rec.band_fraction = v.band_fraction;
  rec.mask_iou = v.mask_iou;
  rec.status = v.pass ? InstanceStatus::kVerified : InstanceStatus::kVerifyFailed;
  rec.detail = v.diagnostic;
  label.scene = scene.id;
  label.instance = instance.id;
  label.loop = loop;
  label.predictor = predictor.id();
  label.pose = pose;
  label.latent = z;
  label.yaw_error = yaw_projection_error(pose.R);
  label.band_fraction = v.band_fraction;
  label.mask_iou = v.mask_iou;
  rec.label = label;
  return rec;
}

double LoopResult::verified_fraction() const {
  if (records.empty()) return 0.0;
  const auto n = std::count_if(records.begin(), records.end(),
                               [](const InstanceRecord& r) { return r.status == InstanceStatus::kVerified; });
  return static_cast<double>(n) / static_cast<double>(records.size());
}

LoopResult run_loop(const Dataset& dataset, const SurfaceExtractor& extractor, CssPredictor& predictor, int loop,
                    const LoopConfig& config, std::vector<Autolabel>& pool) {
  std::vector<std::pair<const Scene*, const SceneInstance*>> work;
  for (const Scene& scene : dataset.scenes) {
    for (const SceneInstance& inst : scene.instances) {
      if (static_cast<int>(inst.difficulty) <= static_cast<int>(config.stage)) work.emplace_back(&scene, &inst);
    }
  }
  LoopResult result;
  result.records.resize(work.size());
  const CssPredictor& const_predictor = predictor;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      result.records[i] =
          process_instance(dataset, *work[i].first, *work[i].second, extractor, const_predictor, loop, config);
    }
  };
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(work.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
  }
  for (const InstanceRecord& r : result.records) {
    if (r.status == InstanceStatus::kVerified && r.label) result.accepted.push_back(*r.label);
  }
  pool.insert(pool.end(), result.accepted.begin(), result.accepted.end());
  predictor.update(pool);
  return result;
}

void write_label(std::ostream& out, const Autolabel& label) {
  json j;
  j["schema"] = kLabelSchema;
  j["scene"] = label.scene;
  j["instance"] = label.instance;
  j["loop"] = label.loop;
  j["predictor"] = label.predictor;
  pose_to(j, label.pose);
  j["latent"] = vec_json(label.latent.vec());
  j["cuboid"] = {{"center", vec_json(label.cuboid.center)},
                 {"dims", vec_json(label.cuboid.dims)},
                 {"yaw", label.cuboid.yaw}};
  j["yaw_error"] = label.yaw_error;
  j["band_fraction"] = label.band_fraction;
  j["mask_iou"] = label.mask_iou;
  out << j.dump() << "\n";
}

std::vector<Autolabel> read_labels(std::istream& in) {
  std::vector<Autolabel> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_guard("label pool", [&] {
      const json j = json::parse(line);
      if (j.value("schema", std::string()) != kLabelSchema) {
        throw DataError(std::string("label pool: expected schema ") + kLabelSchema);
      }
      Autolabel a;
      a.scene = j.at("scene").get<int>();
      a.instance = j.at("instance").get<int>();
      a.loop = j.at("loop").get<int>();
      a.predictor = j.at("predictor").get<std::string>();
      a.pose = pose_from(j);
      a.latent = latent_from(j.at("latent"));
      const json& c = j.at("cuboid");
      a.cuboid.center = vec_from(c.at("center"));
      a.cuboid.dims = vec_from(c.at("dims"));
      a.cuboid.yaw = c.at("yaw").get<double>();
      a.cuboid.validate();
      a.yaw_error = j.at("yaw_error").get<double>();
      a.band_fraction = j.at("band_fraction").get<double>();
      a.mask_iou = j.at("mask_iou").get<double>();
      return a;
    }));
  }
  return out;
}

void write_records_csv(std::ostream& out, std::span<const InstanceRecord> records, int loop, bool header) {
  if (header) {
    out << "loop,scene,instance,difficulty,status,band_fraction,mask_iou,translation_error,yaw_error_deg,"
           "correspondences,inliers,detail\n";
  }
  const auto flags = out.flags();
  out << std::setprecision(9);
  for (const InstanceRecord& r : records) {
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    out << loop << "," << r.scene << "," << r.instance << "," << to_string(r.difficulty) << ","
        << to_string(r.status) << "," << r.band_fraction << "," << r.mask_iou << "," << r.translation_error << ","
        << r.yaw_error * 180.0 / std::numbers::pi << "," << r.correspondences << "," << r.ransac_inliers << ","
        << detail << "\n";
  }
  out.flags(flags);
}

}  // namespace sdfal
