#pragma once

#include "sdfal/vec.hpp"

namespace sdfal {

// Model-to-camera similarity: x_cam = s * R * x_model + t.
// Model frame: x along the object's length, y down, z across. Camera frame:
// x right, y down, z along the optical axis. Yaw is a rotation about y.
struct SimilarityTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  double s = 1.0;

  Vec3 apply(const Vec3& p) const { return s * (R * p) + t; }
  Vec3 inverse_apply(const Vec3& x) const { return R.transpose() * (x - t) / s; }

  // Throws UsageError unless R is orthonormal with det +1 (1e-9) and s > 0.
  void validate() const;
};

// Rotation about the camera/model y axis.
Mat3 yaw_rotation(double yaw);

// Yaw of the nearest yaw-only rotation, in (-pi, pi].
double yaw_of(const Mat3& R);

// Rodrigues formula; exact identity for a zero vector.
Mat3 exp_so3(const Vec3& omega);

// Geodesic angle between two rotations (radians).
double rotation_angle(const Mat3& a, const Mat3& b);

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

}  // namespace sdfal
