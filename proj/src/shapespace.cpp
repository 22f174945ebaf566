#include "sdfal/shapespace.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <random>

#include "json.hpp"

namespace sdfal {

namespace {

constexpr const char* kShapeSpaceSchema = "sdfal/shapespace/v1";

using nlohmann::json;

json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw DataError(std::string("shape space: ") + what + " must be a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

const char* kind_name(CsgKind k) {
  switch (k) {
    case CsgKind::kSphere: return "sphere";
    case CsgKind::kBox: return "box";
    case CsgKind::kCapsule: return "capsule";
    case CsgKind::kCylinder: return "cylinder";
    case CsgKind::kEllipsoid: return "ellipsoid";
    case CsgKind::kExtrusion: return "extrusion";
    case CsgKind::kUnion: return "union";
    case CsgKind::kSubtract: return "subtract";
  }
  return "?";
}

CsgKind kind_from(const std::string& s) {
  for (CsgKind k : {CsgKind::kSphere, CsgKind::kBox, CsgKind::kCapsule, CsgKind::kCylinder,
                    CsgKind::kEllipsoid, CsgKind::kExtrusion, CsgKind::kUnion, CsgKind::kSubtract}) {
    if (s == kind_name(k)) return k;
  }
  throw DataError("shape space: unknown node kind '" + s + "'");
}

void check_tree(const std::vector<CsgNode>& nodes, int root) {
  if (root < 0 || root >= static_cast<int>(nodes.size())) throw DataError("shape space: bad root index");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const CsgNode& n = nodes[i];
    if (n.kind == CsgKind::kExtrusion) {
      if (n.polygon.size() < 3) throw DataError("shape space: extrusion needs at least 3 vertices");
      for (std::size_t k = 0; k < n.polygon.size(); ++k) {
        if ((n.polygon[k] - n.polygon[(k + 1) % n.polygon.size()]).norm() == 0.0) {
          throw DataError("shape space: repeated polygon vertex");
        }
      }
    }
    if (n.kind == CsgKind::kUnion || n.kind == CsgKind::kSubtract) {
      // Children must precede their parent so evaluation terminates.
      if (n.lhs < 0 || n.rhs < 0 || n.lhs >= static_cast<int>(i) || n.rhs >= static_cast<int>(i)) {
        throw DataError("shape space: operator children must precede the operator");
      }
    }
  }
}

}  // namespace

// ---- latent codes and NOCS ----

LatentCode LatentCode::from(const Vec3& z) {
  if (!z.allFinite() || std::abs(z.norm() - 1.0) > 1e-9) {
    throw UsageError("latent code must lie on the unit sphere");
  }
  return LatentCode(z);
}

LatentCode project_latent(const Vec3& z) {
  const double n = z.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("project_latent: zero or non-finite vector");
  return LatentCode(z / n);
}

Vec3 nocs_color(const Vec3& p) {
  return (p.array() + 0.5).min(1.0).max(0.0).matrix();
}

Vec3 nocs_decode(const Vec3& color) { return color.array() - 0.5; }

std::vector<double> softmax_values(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  std::vector<double> w(xs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    w[i] = std::exp(xs[i] - m);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// ---- basis shapes ----

BasisShape::BasisShape(std::string name, std::vector<CsgNode> nodes, int root)
    : name_(std::move(name)), nodes_(std::move(nodes)), root_(root) {
  check_tree(nodes_, root_);
  scale_ = 0.5 / bound(root_);
}

BasisShape::BasisShape(std::string name, std::vector<CsgNode> nodes, int root, double scale)
    : name_(std::move(name)), nodes_(std::move(nodes)), root_(root), scale_(scale) {
  check_tree(nodes_, root_);
  if (!(scale_ > 0.0)) throw DataError("shape space: basis scale must be positive");
}

bool BasisShape::is_exact_primitive() const {
  const CsgKind k = nodes_[root_].kind;
  return k == CsgKind::kSphere || k == CsgKind::kBox || k == CsgKind::kCapsule ||
         k == CsgKind::kCylinder || k == CsgKind::kExtrusion;
}

double BasisShape::bound(int index) const {
  const CsgNode& n = nodes_[index];
  switch (n.kind) {
    case CsgKind::kSphere:
      return n.center.norm() + n.radius;
    case CsgKind::kBox:
      return (n.center.cwiseAbs() + n.size).norm();
    case CsgKind::kCapsule:
      return std::max(n.a.norm(), n.b.norm()) + n.radius;
    case CsgKind::kCylinder:
      return (n.center.cwiseAbs() + Vec3(n.radius, n.radius, n.half_height)).norm();
    case CsgKind::kEllipsoid:
      return n.center.norm() + n.size.maxCoeff();
    case CsgKind::kExtrusion: {
      double r2 = 0.0;
      for (const Vec2& v : n.polygon) r2 = std::max(r2, (v + n.center.head<2>()).squaredNorm());
      return std::sqrt(r2 + std::pow(std::abs(n.center.z()) + n.half_height, 2));
    }
    case CsgKind::kUnion:
      // Polynomial smooth-min grows the shape by at most k/4.
      return std::max(bound(n.lhs), bound(n.rhs)) + n.smoothing / 4.0;
    case CsgKind::kSubtract:
      return bound(n.lhs);
  }
  return 0.0;
}

BasisShape make_sphere_shape(double radius, const Vec3& center) {
  CsgNode n;
  n.kind = CsgKind::kSphere;
  n.radius = radius;
  n.center = center;
  return BasisShape("sphere", {n}, 0, 1.0);
}

BasisShape make_box_shape(const Vec3& half_extents, double rounding) {
  CsgNode n;
  n.kind = CsgKind::kBox;
  n.size = half_extents;
  n.radius = rounding;
  return BasisShape("box", {n}, 0, 1.0);
}

BasisShape make_capsule_shape(const Vec3& a, const Vec3& b, double radius) {
  CsgNode n;
  n.kind = CsgKind::kCapsule;
  n.a = a;
  n.b = b;
  n.radius = radius;
  return BasisShape("capsule", {n}, 0, 1.0);
}

std::vector<Vec2> car_profile(const CarParams& p) {
  // Built in (x, height above ground), then flipped to y-down and centred.
  const double half = p.length / 2.0;
  const double c = p.clearance;
  const double top_body = c + p.body_height;
  const double roof = top_body + p.cabin_height;
  const double cab_lo = p.cabin_offset - p.cabin_length / 2.0;
  const double cab_hi = p.cabin_offset + p.cabin_length / 2.0;
  const double windshield = std::min(cab_hi + 0.9 * p.cabin_height, half - 0.2);
  const double rear_window = std::max(cab_lo - 0.5 * p.cabin_height, -half);
  const double wheel_x = p.wheelbase_fraction * half;
  const double r = p.wheel_radius;
  const double arch = c + 0.55 * r;

  std::vector<Vec2> up = {{-half + 0.1, c},
                          {-wheel_x - r, c},
                          {-wheel_x - 0.65 * r, arch},
                          {-wheel_x + 0.65 * r, arch},
                          {-wheel_x + r, c},
                          {wheel_x - r, c},
                          {wheel_x - 0.65 * r, arch},
                          {wheel_x + 0.65 * r, arch},
                          {wheel_x + r, c},
                          {half - 0.1, c},
                          {half, c + 0.15},
                          {half, c + 0.8 * p.body_height},
                          {windshield, top_body},
                          {cab_hi, roof},
                          {cab_lo, roof},
                          {rear_window, top_body},
                          {-half, top_body},
                          {-half, c + 0.15}};
  // Drop consecutive duplicates (a cabin reaching the tail merges two vertices).
  std::vector<Vec2> out;
  for (const Vec2& v : up) {
    if (out.empty() || (v - out.back()).norm() > 1e-9) out.push_back(v);
  }
  if ((out.front() - out.back()).norm() <= 1e-9) out.pop_back();
  const double mid = roof / 2.0;
  for (Vec2& v : out) v = Vec2(v.x(), mid - v.y());
  return out;
}

BasisShape make_car_shape(const CarParams& p) {
  CsgNode n;
  n.kind = CsgKind::kExtrusion;
  n.polygon = car_profile(p);
  n.half_height = p.width / 2.0;
  n.radius = p.rounding;
  return BasisShape(p.name, {n}, 0);
}

std::vector<CarParams> default_car_params() {
  // name, length, width, body h, cabin l, cabin h, cabin offset, wheel r,
  // wheelbase fraction, rounding, clearance
  return {
      {"sedan", 4.6, 1.80, 0.75, 2.5, 0.65, -0.20, 0.36, 0.62, 0.0, 0.18},
      {"hatchback", 4.0, 1.75, 0.80, 2.3, 0.70, -0.45, 0.34, 0.64, 0.0, 0.18},
      {"suv", 4.7, 1.90, 1.00, 3.1, 0.75, -0.40, 0.40, 0.62, 0.0, 0.24},
      {"van", 5.0, 1.95, 1.25, 3.9, 0.75, -0.35, 0.38, 0.64, 0.0, 0.20},
      {"pickup", 5.3, 1.90, 1.00, 1.9, 0.75, 0.70, 0.40, 0.64, 0.0, 0.24},
      {"coupe", 4.4, 1.85, 0.60, 1.9, 0.52, -0.10, 0.34, 0.60, 0.0, 0.14},
  };
}

// ---- shape space ----

ShapeSpace::ShapeSpace(std::vector<BasisShape> basis, std::vector<Vec3> anchors, double sharpness)
    : backend_(ShapeBackend::kAnalyticBlend),
      basis_(std::move(basis)),
      anchors_(std::move(anchors)),
      sharpness_(sharpness) {
  if (basis_.empty() || basis_.size() != anchors_.size()) {
    throw UsageError("shape space: need one anchor per basis shape");
  }
  if (!(sharpness_ > 0.0)) throw UsageError("shape space: sharpness must be positive");
  for (Vec3& a : anchors_) {
    const double n = a.norm();
    if (!(n > 0.0)) throw UsageError("shape space: anchors must be non-zero");
    a /= n;
  }
}

ShapeSpace::ShapeSpace(std::shared_ptr<const TinyDecoder> decoder)
    : backend_(ShapeBackend::kTinyDecoder), decoder_(std::move(decoder)) {
  if (!decoder_) throw UsageError("shape space: null decoder");
}

ShapeSpace ShapeSpace::default_cars() {
  std::vector<BasisShape> basis;
  for (const CarParams& p : default_car_params()) basis.push_back(make_car_shape(p));
  std::vector<Vec3> anchors = {Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(),
                               -Vec3::UnitY(), Vec3::UnitZ(), -Vec3::UnitZ()};
  return ShapeSpace(std::move(basis), std::move(anchors), 8.0);
}

double ShapeSpace::sdf(const Vec3& x, const LatentCode& z) const {
  return sdf(V3d(x), z.array());
}

std::vector<double> ShapeSpace::blend_weights(const LatentCode& z) const {
  return blend_weights(z.array());
}

void ShapeSpace::save(std::ostream& out) const {
  if (backend_ != ShapeBackend::kAnalyticBlend) {
    throw UsageError("shape space: only analytic spaces have a definition file");
  }
  json j;
  j["schema"] = kShapeSpaceSchema;
  j["backend"] = "analytic";
  j["sharpness"] = sharpness_;
  json anchors = json::array();
  for (const Vec3& a : anchors_) anchors.push_back(to_json(a));
  j["anchors"] = anchors;
  json basis = json::array();
  for (const BasisShape& b : basis_) {
    json jb;
    jb["name"] = b.name();
    jb["scale"] = b.scale();
    jb["root"] = b.root();
    json nodes = json::array();
    for (const CsgNode& n : b.nodes()) {
      json jn;
      jn["kind"] = kind_name(n.kind);
      switch (n.kind) {
        case CsgKind::kSphere:
          jn["center"] = to_json(n.center);
          jn["radius"] = n.radius;
          break;
        case CsgKind::kBox:
          jn["center"] = to_json(n.center);
          jn["half_extents"] = to_json(n.size);
          jn["rounding"] = n.radius;
          break;
        case CsgKind::kCapsule:
          jn["a"] = to_json(n.a);
          jn["b"] = to_json(n.b);
          jn["radius"] = n.radius;
          break;
        case CsgKind::kCylinder:
          jn["center"] = to_json(n.center);
          jn["radius"] = n.radius;
          jn["half_height"] = n.half_height;
          break;
        case CsgKind::kEllipsoid:
          jn["center"] = to_json(n.center);
          jn["radii"] = to_json(n.size);
          break;
        case CsgKind::kExtrusion: {
          jn["center"] = to_json(n.center);
          json poly = json::array();
          for (const Vec2& v : n.polygon) poly.push_back(json::array({v.x(), v.y()}));
          jn["polygon"] = poly;
          jn["half_width"] = n.half_height;
          jn["rounding"] = n.radius;
          break;
        }
        case CsgKind::kUnion:
        case CsgKind::kSubtract:
          jn["lhs"] = n.lhs;
          jn["rhs"] = n.rhs;
          jn["smoothing"] = n.smoothing;
          break;
      }
      nodes.push_back(jn);
    }
    jb["nodes"] = nodes;
    basis.push_back(jb);
  }
  j["basis"] = basis;
  out << j.dump(2) << "\n";
}

ShapeSpace ShapeSpace::load(std::istream& in) {
  json j;
  try {
    in >> j;
    if (j.value("schema", std::string()) != kShapeSpaceSchema) {
      throw DataError(std::string("shape space: expected schema ") + kShapeSpaceSchema);
    }
    if (j.at("backend").get<std::string>() != "analytic") {
      throw DataError("shape space: unsupported backend");
    }
    std::vector<Vec3> anchors;
    for (const json& a : j.at("anchors")) anchors.push_back(vec3_from(a, "anchor"));
    std::vector<BasisShape> basis;
    for (const json& jb : j.at("basis")) {
      std::vector<CsgNode> nodes;
      for (const json& jn : jb.at("nodes")) {
        CsgNode n;
        n.kind = kind_from(jn.at("kind").get<std::string>());
        switch (n.kind) {
          case CsgKind::kSphere:
            n.center = vec3_from(jn.at("center"), "center");
            n.radius = jn.at("radius").get<double>();
            break;
          case CsgKind::kBox:
            n.center = vec3_from(jn.at("center"), "center");
            n.size = vec3_from(jn.at("half_extents"), "half_extents");
            n.radius = jn.at("rounding").get<double>();
            break;
          case CsgKind::kCapsule:
            n.a = vec3_from(jn.at("a"), "a");
            n.b = vec3_from(jn.at("b"), "b");
            n.radius = jn.at("radius").get<double>();
            break;
          case CsgKind::kCylinder:
            n.center = vec3_from(jn.at("center"), "center");
            n.radius = jn.at("radius").get<double>();
            n.half_height = jn.at("half_height").get<double>();
            break;
          case CsgKind::kEllipsoid:
            n.center = vec3_from(jn.at("center"), "center");
            n.size = vec3_from(jn.at("radii"), "radii");
            break;
          case CsgKind::kExtrusion:
            n.center = vec3_from(jn.at("center"), "center");
            for (const json& v : jn.at("polygon")) {
              if (!v.is_array() || v.size() != 2) throw DataError("shape space: polygon vertex must be a 2-vector");
              n.polygon.emplace_back(v[0].get<double>(), v[1].get<double>());
            }
            n.half_height = jn.at("half_width").get<double>();
            n.radius = jn.at("rounding").get<double>();
            break;
          case CsgKind::kUnion:
          case CsgKind::kSubtract:
            n.lhs = jn.at("lhs").get<int>();
            n.rhs = jn.at("rhs").get<int>();
            n.smoothing = jn.at("smoothing").get<double>();
            break;
        }
        nodes.push_back(n);
      }
      basis.emplace_back(jb.at("name").get<std::string>(), std::move(nodes), jb.at("root").get<int>(),
                         jb.at("scale").get<double>());
    }
    return ShapeSpace(std::move(basis), std::move(anchors), j.at("sharpness").get<double>());
  } catch (const json::exception& e) {
    throw DataError(std::string("shape space: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(e.what());
  }
}

std::vector<DecoderSample> sample_sdf(const ShapeSpace& space, std::span<const LatentCode> latents,
                                      std::size_t count, double near_fraction,
                                      std::uint64_t seed) {
  if (latents.empty()) throw UsageError("sample_sdf: no latents");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> cube(-0.55, 0.55);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<DecoderSample> out;
  out.reserve(count);
  std::size_t guard = 0;
  while (out.size() < count) {
    if (++guard > 1000 * count + 1000) throw UsageError("sample_sdf: shape has no near-surface region");
    const LatentCode& z = latents[out.size() % latents.size()];
    const bool near = unit(rng) < near_fraction;
    const Vec3 x(cube(rng), cube(rng), cube(rng));
    const double s = space.sdf(x, z);
    if (near && std::abs(s) > 0.05) continue;
    out.push_back({x, z.vec(), s});
  }
  return out;
}

}  // namespace sdfal
