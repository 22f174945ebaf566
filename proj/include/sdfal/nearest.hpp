#pragma once

// Exact nearest-neighbour queries over a fixed 3D point set using a uniform
// cell grid searched in growing shells. Results equal a brute-force scan
// with ties going to the lower index.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sdfal/vec.hpp"

namespace sdfal {

struct Neighbor {
  std::uint32_t index = 0;
  double distance = 0.0;
};

class PointIndex {
 public:
  PointIndex() = default;
  // cell: grid spacing; UsageError unless positive. The grid is coarsened if
  // the bounds would need too many cells.
  PointIndex(std::span<const Vec3> points, double cell);

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  // Nearest point with distance <= max_distance, if any.
  std::optional<Neighbor> nearest(const Vec3& q, double max_distance) const;

 private:
  std::vector<Vec3> points_;
  Vec3 origin_ = Vec3::Zero();
  double cell_ = 1.0;
  int dims_[3] = {0, 0, 0};
  std::vector<std::uint32_t> cell_begin_;
  std::vector<std::uint32_t> order_;
};

}  // namespace sdfal
