#pragma once

// Latent shape space f(x; z) = s. The default backend blends K analytic
// car-like SDFs with weights softmax(sharpness * <z, anchor_k>); the
// alternative backend is a TinyDecoder.

#include <array>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdfal/decoder.hpp"
#include "sdfal/errors.hpp"
#include "sdfal/vec.hpp"

namespace sdfal {

// Point on the unit sphere in R^3.
class LatentCode {
 public:
  // Throws UsageError unless |z| = 1 within 1e-9.
  static LatentCode from(const Vec3& z);

  const Vec3& vec() const { return z_; }
  double operator[](int i) const { return z_[i]; }
  std::array<double, 3> array() const { return {z_.x(), z_.y(), z_.z()}; }

 private:
  explicit LatentCode(const Vec3& z) : z_(z) {}
  friend LatentCode project_latent(const Vec3& z);
  Vec3 z_;
};

// z / |z|; NumericError for a zero or non-finite vector.
LatentCode project_latent(const Vec3& z);

// NOCS coloring: p + 0.5 clamped to [0, 1]^3.
Vec3 nocs_color(const Vec3& p);
Vec3 nocs_decode(const Vec3& color);

template <class T>
V3<T> nocs_color(const V3<T>& p) {
  using std::max;
  using std::min;
  auto c = [](const T& v) { return min(max(v + T(0.5), T(0.0)), T(1.0)); };
  return {c(p.x), c(p.y), c(p.z)};
}

// ---- constructive solid geometry ----

enum class CsgKind { kSphere, kBox, kCapsule, kCylinder, kEllipsoid, kExtrusion, kUnion, kSubtract };

struct CsgNode {
  CsgKind kind = CsgKind::kSphere;
  Vec3 center = Vec3::Zero();   // sphere, box, cylinder, ellipsoid
  Vec3 size = Vec3::Zero();     // box half extents, ellipsoid radii
  Vec3 a = Vec3::Zero();        // capsule endpoints
  Vec3 b = Vec3::Zero();
  std::vector<Vec2> polygon;    // extrusion profile in the x-y plane
  double radius = 0.0;          // sphere/capsule/cylinder radius, box/extrusion rounding
  double half_height = 0.0;     // cylinder/extrusion half length along z
  double smoothing = 0.0;       // union/subtract blend width (0 = hard)
  int lhs = -1;
  int rhs = -1;
};

// One basis shape: a CSG tree in raw units, uniformly rescaled so that its
// 0-level set fits in the ball of diameter 1 around the origin.
class BasisShape {
 public:
  BasisShape() = default;
  // Computes the normalization from a conservative bounding radius.
  BasisShape(std::string name, std::vector<CsgNode> nodes, int root);
  // Explicit normalization (used when loading files).
  BasisShape(std::string name, std::vector<CsgNode> nodes, int root, double scale);

  const std::string& name() const { return name_; }
  const std::vector<CsgNode>& nodes() const { return nodes_; }
  int root() const { return root_; }
  double scale() const { return scale_; }

  // Conservative radius of the raw shape around the origin.
  double raw_bounding_radius() const { return bound(root_); }

  // True when the root is a single exact-distance primitive (sphere, box,
  // capsule, cylinder or extrusion).
  bool is_exact_primitive() const;

  template <class T>
  T sdf(const V3<T>& x) const {
    const V3<T> raw = x * T(1.0 / scale_);
    return eval(root_, raw) * T(scale_);
  }

 private:
  double bound(int node) const;
  template <class T>
  T eval(int node, const V3<T>& x) const;

  std::string name_;
  std::vector<CsgNode> nodes_;
  int root_ = -1;
  double scale_ = 1.0;
};

// Single primitives already in normalized units (scale 1).
BasisShape make_sphere_shape(double radius, const Vec3& center = Vec3::Zero());
BasisShape make_box_shape(const Vec3& half_extents, double rounding = 0.0);
BasisShape make_capsule_shape(const Vec3& a, const Vec3& b, double radius);

struct CarParams {
  std::string name;
  double length = 4.5;
  double width = 1.8;
  double body_height = 0.8;
  double cabin_length = 2.4;
  double cabin_height = 0.65;
  double cabin_offset = -0.2;  // along length, + is forward
  double wheel_radius = 0.36;
  double wheelbase_fraction = 0.62;
  double rounding = 0.0;  // radius of the profile-to-side edges
  double clearance = 0.18;
};

// Side profile (body, sloped cabin, wheel-arch notches) extruded across the
// width, optionally rounded. The extrusion of a polygon is an exact distance field,
// which keeps single-step surface projection accurate.
std::vector<Vec2> car_profile(const CarParams& params);
BasisShape make_car_shape(const CarParams& params);
std::vector<CarParams> default_car_params();

enum class ShapeBackend { kAnalyticBlend, kTinyDecoder };

class ShapeSpace {
 public:
  // anchors are normalized on construction.
  ShapeSpace(std::vector<BasisShape> basis, std::vector<Vec3> anchors, double sharpness);
  explicit ShapeSpace(std::shared_ptr<const TinyDecoder> decoder);

  // K = 6 car shapes on octahedral anchors, sharpness 8.
  static ShapeSpace default_cars();

  ShapeBackend backend() const { return backend_; }
  std::size_t basis_count() const { return basis_.size(); }
  const BasisShape& basis(std::size_t k) const { return basis_.at(k); }
  const std::vector<BasisShape>& basis_shapes() const { return basis_; }
  const std::vector<Vec3>& anchors() const { return anchors_; }
  double sharpness() const { return sharpness_; }
  const TinyDecoder* decoder() const { return decoder_.get(); }

  double sdf(const Vec3& x, const LatentCode& z) const;

  template <class T>
  T sdf(const V3<T>& x, const std::array<T, 3>& z) const;

  // Blend weights (analytic backend only).
  template <class T>
  std::vector<T> blend_weights(const std::array<T, 3>& z) const;
  std::vector<double> blend_weights(const LatentCode& z) const;

  // Structured-text (JSON) definition with schema string; analytic backend.
  void save(std::ostream& out) const;
  static ShapeSpace load(std::istream& in);

 private:
  ShapeBackend backend_ = ShapeBackend::kAnalyticBlend;
  std::vector<BasisShape> basis_;
  std::vector<Vec3> anchors_;
  double sharpness_ = 8.0;
  std::shared_ptr<const TinyDecoder> decoder_;
};

// Uniform-plus-near-surface SDF samples for decoder training.
std::vector<DecoderSample> sample_sdf(const ShapeSpace& space, std::span<const LatentCode> latents,
                                      std::size_t count, double near_fraction,
                                      std::uint64_t seed);

std::vector<double> softmax_values(std::span<const double> xs);

// ---- template implementation ----

template <class T>
T BasisShape::eval(int index, const V3<T>& x) const {
  using std::abs;
  using std::max;
  using std::min;
  using std::sqrt;
  auto square = [](const T& v) { return v * v; };
  const CsgNode& n = nodes_[index];
  const T zero(0.0);
  switch (n.kind) {
    case CsgKind::kSphere:
      return length(x - V3<T>(n.center)) - T(n.radius);
    case CsgKind::kBox: {
      const V3<T> d = vabs(x - V3<T>(n.center));
      const V3<T> q = d - V3<T>(n.size) + V3<T>(n.radius, n.radius, n.radius);
      const T outside = length(vmax(q, zero));
      const T inside = min(max(q.x, max(q.y, q.z)), zero);
      return outside + inside - T(n.radius);
    }
    case CsgKind::kCapsule: {
      const V3<T> pa = x - V3<T>(n.a);
      const Vec3 ba = n.b - n.a;
      const V3<T> bav(ba);
      T h = dot(pa, bav) / T(ba.squaredNorm());
      h = min(max(h, zero), T(1.0));
      return length(pa - bav * h) - T(n.radius);
    }
    case CsgKind::kCylinder: {
      const V3<T> p = x - V3<T>(n.center);
      const V3<T> radial(p.x, p.y, zero);
      const T dx = length(radial) - T(n.radius);
      const T dz = abs(p.z) - T(n.half_height);
      const T inside = min(max(dx, dz), zero);
      const V3<T> outer(max(dx, zero), max(dz, zero), zero);
      return inside + length(outer);
    }
    case CsgKind::kEllipsoid: {
      const V3<T> p = x - V3<T>(n.center);
      const V3<T> q(p.x / T(n.size.x()), p.y / T(n.size.y()), p.z / T(n.size.z()));
      const V3<T> q2(q.x / T(n.size.x()), q.y / T(n.size.y()), q.z / T(n.size.z()));
      const T k0 = length(q);
      const T k1 = length(q2);
      if (value_of(k1) == 0.0) return -T(n.size.minCoeff());
      return k0 * (k0 - T(1.0)) / k1;
    }
    case CsgKind::kExtrusion: {
      // Exact polygon distance with crossing-number sign, then extrusion.
      const std::vector<Vec2>& v = n.polygon;
      const T px = x.x - T(n.center.x());
      const T py = x.y - T(n.center.y());
      T d2 = square(px - T(v[0].x())) + square(py - T(v[0].y()));
      bool inside = false;
      for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        const double ex = v[j].x() - v[i].x();
        const double ey = v[j].y() - v[i].y();
        const T wx = px - T(v[i].x());
        const T wy = py - T(v[i].y());
        T h = (wx * T(ex) + wy * T(ey)) / T(ex * ex + ey * ey);
        h = min(max(h, zero), T(1.0));
        d2 = min(d2, square(wx - T(ex) * h) + square(wy - T(ey) * h));
        const double pyv = value_of(py);
        const bool c1 = pyv >= v[i].y();
        const bool c2 = pyv < v[j].y();
        const bool c3 = ex * value_of(wy) > ey * value_of(wx);
        if ((c1 && c2 && c3) || (!c1 && !c2 && !c3)) inside = !inside;
      }
      const T dist = sqrt(d2);
      const T d_xy = inside ? -dist : dist;
      // Rounding only affects the edges between the profile and the caps, so
      // concave profile features stay exact.
      const T r(n.radius);
      const T w_xy = d_xy + r;
      const T w_z = abs(x.z - T(n.center.z())) - T(n.half_height) + r;
      const T in = min(max(w_xy, w_z), zero);
      const V3<T> out(max(w_xy, zero), max(w_z, zero), zero);
      return in + length(out) - r;
    }
    case CsgKind::kUnion: {
      const T a = eval(n.lhs, x);
      const T b = eval(n.rhs, x);
      if (n.smoothing <= 0.0) return min(a, b);
      const T k(n.smoothing);
      const T h = min(max(T(0.5) + T(0.5) * (b - a) / k, zero), T(1.0));
      return b + (a - b) * h - k * h * (T(1.0) - h);
    }
    case CsgKind::kSubtract: {
      const T a = eval(n.lhs, x);
      const T b = eval(n.rhs, x);
      if (n.smoothing <= 0.0) return max(a, -b);
      const T k(n.smoothing);
      const T h = min(max(T(0.5) - T(0.5) * (a + b) / k, zero), T(1.0));
      return a + (-b - a) * h + k * h * (T(1.0) - h);
    }
  }
  return zero;
}

template <class T>
std::vector<T> ShapeSpace::blend_weights(const std::array<T, 3>& z) const {
  std::vector<T> scores;
  scores.reserve(anchors_.size());
  for (const Vec3& c : anchors_) {
    scores.push_back(T(sharpness_) * (T(c.x()) * z[0] + T(c.y()) * z[1] + T(c.z()) * z[2]));
  }
  if constexpr (std::is_same_v<T, double>) {
    return softmax_values(scores);
  } else {
    return ad::softmax(scores);
  }
}

template <class T>
T ShapeSpace::sdf(const V3<T>& x, const std::array<T, 3>& z) const {
  if (backend_ == ShapeBackend::kTinyDecoder) return decoder_->forward(x, z);
  const std::vector<T> w = blend_weights(z);
  T total(0.0);
  for (std::size_t k = 0; k < basis_.size(); ++k) total = total + w[k] * basis_[k].sdf(x);
  return total;
}

}  // namespace sdfal
