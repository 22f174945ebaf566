#include "sdfal/transform.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "sdfal/errors.hpp"

namespace sdfal {

void SimilarityTransform::validate() const {
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(ortho < 1e-9) || std::abs(R.determinant() - 1.0) > 1e-9) {
    throw UsageError("similarity transform: rotation is not in SO(3)");
  }
  if (!(s > 0.0) || !std::isfinite(s) || !t.allFinite()) {
    throw UsageError("similarity transform: scale must be positive and finite");
  }
}

Mat3 yaw_rotation(double yaw) {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  Mat3 R;
  R << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  return R;
}

double yaw_of(const Mat3& R) {
  // Model x axis maps to (cos, 0, -sin) under yaw_rotation.
  return wrap_angle(std::atan2(-R(2, 0) + R(0, 2), R(0, 0) + R(2, 2)));
}

Mat3 exp_so3(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(theta, omega / theta).toRotationMatrix();
}

double rotation_angle(const Mat3& a, const Mat3& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

double wrap_angle(double a) {
  constexpr double kPi = std::numbers::pi;
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

}  // namespace sdfal
