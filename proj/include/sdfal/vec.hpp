#pragma once

// Minimal 3-vector templated on the scalar so that SDF and projection code can
// run on double and on ad::Var alike. Numeric-only code uses Eigen instead.

#include <cmath>
#include <type_traits>

#include <Eigen/Core>

#include "sdfal/autodiff.hpp"

namespace sdfal {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

template <class T>
struct V3 {
  T x{}, y{}, z{};

  V3() = default;
  V3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}
  explicit V3(const Vec3& v) : x(T(v.x())), y(T(v.y())), z(T(v.z())) {}

  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  friend V3 operator+(const V3& a, const V3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend V3 operator-(const V3& a, const V3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend V3 operator-(const V3& a) { return {-a.x, -a.y, -a.z}; }
  friend V3 operator*(const V3& a, const T& s) { return {a.x * s, a.y * s, a.z * s}; }
  friend V3 operator*(const T& s, const V3& a) { return {a.x * s, a.y * s, a.z * s}; }
  friend V3 operator/(const V3& a, const T& s) { return {a.x / s, a.y / s, a.z / s}; }
};

using V3d = V3<double>;
using V3v = V3<ad::Var>;

inline double value_of(double v) { return v; }
inline double value_of(const ad::Var& v) { return v.value(); }

template <class T>
Vec3 to_eigen(const V3<T>& v) {
  return {value_of(v.x), value_of(v.y), value_of(v.z)};
}

template <class T>
T dot(const V3<T>& a, const V3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <class T>
V3<T> cross(const V3<T>& a, const V3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

inline double length(const V3<double>& a) { return std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z); }

// Single tape node; gradient is zero at the origin.
inline ad::Var length(const V3<ad::Var>& a) {
  const ad::Var xs[3] = {a.x, a.y, a.z};
  return ad::norm(xs);
}

template <class T>
V3<T> vabs(const V3<T>& a) {
  using std::abs;
  return {abs(a.x), abs(a.y), abs(a.z)};
}

template <class T>
V3<T> vmax(const V3<T>& a, const T& s) {
  using std::max;
  return {max(a.x, s), max(a.y, s), max(a.z, s)};
}

// Applies a constant 3x3 matrix to a templated vector.
template <class T>
V3<T> mul(const Mat3& m, const V3<T>& v) {
  return {m(0, 0) * v.x + m(0, 1) * v.y + m(0, 2) * v.z,
          m(1, 0) * v.x + m(1, 1) * v.y + m(1, 2) * v.z,
          m(2, 0) * v.x + m(2, 1) * v.y + m(2, 2) * v.z};
}

}  // namespace sdfal
