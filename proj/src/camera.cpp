#include "sdfal/camera.hpp"

#include <cmath>

#include "sdfal/errors.hpp"

namespace sdfal {

void Camera::validate(bool require_principal_inside) const {
  if (!(fx > 0.0) || !(fy > 0.0) || width <= 0 || height <= 0) {
    throw UsageError("camera: focal lengths and image size must be positive");
  }
  if (require_principal_inside && !(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) {
    throw UsageError("camera: principal point outside the image");
  }
}

Camera Camera::crop(double x0, double y0, double x1, double y1, int out_w, int out_h) const {
  if (!(x1 > x0) || !(y1 > y0) || out_w <= 0 || out_h <= 0) throw UsageError("camera: empty crop");
  const double sx = out_w / (x1 - x0);
  const double sy = out_h / (y1 - y0);
  Camera c;
  c.fx = fx * sx;
  c.fy = fy * sy;
  c.cx = (cx - x0) * sx;
  c.cy = (cy - y0) * sy;
  c.width = out_w;
  c.height = out_h;
  return c;
}

}  // namespace sdfal
