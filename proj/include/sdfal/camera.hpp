#pragma once

#include "sdfal/vec.hpp"

namespace sdfal {

// Pinhole camera. Pixel (i, j) covers [i, i+1) x [j, j+1); its center has
// image coordinates (i + 0.5, j + 0.5).
struct Camera {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  // Throws UsageError unless focal lengths and size are positive. With
  // require_principal_inside, also checks that (cx, cy) lies in the image.
  void validate(bool require_principal_inside = true) const;

  // Image coordinates of a camera-frame point (z > 0).
  Vec2 project(const Vec3& p) const { return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy}; }
  // K^-1 (u, v, 1).
  Vec3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
  Vec3 pixel_ray(int i, int j) const { return ray(i + 0.5, j + 0.5); }

  // Camera for the image region [x0, x1) x [y0, y1) resampled to out_w x
  // out_h pixels.
  Camera crop(double x0, double y0, double x1, double y1, int out_w, int out_h) const;
};

}  // namespace sdfal
