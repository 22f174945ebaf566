#pragma once

// Oriented surface samples from an SDF: normals from the SDF gradient and a
// single projection step p = x - n * f(x) for query points in a narrow band.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sdfal/autodiff.hpp"
#include "sdfal/camera.hpp"
#include "sdfal/shapespace.hpp"
#include "sdfal/transform.hpp"

namespace sdfal {

// Cell-centered regular grid: x_i = lo + (i + 0.5) * h with h = (hi - lo) / res
// per axis, so doubling the resolution halves the spacing exactly.
struct QueryGrid {
  int resolution = 48;
  Vec3 lo = Vec3::Constant(-0.55);
  Vec3 hi = Vec3::Constant(0.55);

  static QueryGrid cube(int resolution, double half_extent = 0.55);

  // Throws UsageError if resolution < 8 or the bounds miss the unit ball.
  void validate() const;
  Vec3 spacing() const { return (hi - lo) / resolution; }
  std::size_t size() const { return static_cast<std::size_t>(resolution) * resolution * resolution; }
  // Index order: x fastest, then y, then z.
  Vec3 point(std::size_t index) const;
};

constexpr double kDefaultBand = 0.03;

// Minimum spacing times sqrt(3).
double disc_diameter(const QueryGrid& grid);
// Minimum pairwise distance times sqrt(3); UsageError for fewer than 2 points.
double disc_diameter(std::span<const Vec3> points);

struct SurfacePointSet {
  std::vector<Vec3> points;   // model frame
  std::vector<Vec3> normals;  // unit
  std::vector<Vec3> colors;   // NOCS
  std::vector<std::uint32_t> grid_index;
  double diameter = 0.0;

  std::size_t size() const { return points.size(); }
};

// Differentiable counterpart; every entry lives on the caller's tape.
struct DiffSurface {
  std::vector<V3v> points;
  std::vector<V3v> normals;
  std::vector<V3v> colors;
  std::vector<std::uint32_t> grid_index;
  double diameter = 0.0;

  std::size_t size() const { return points.size(); }
};

struct ExtractionStats {
  std::size_t candidates = 0;  // grid points whose SDF was tested against the band
  std::size_t in_band = 0;
  std::size_t dropped_zero_gradient = 0;
};

struct NormalsResult {
  std::vector<Vec3> normals;
  std::vector<std::size_t> kept;  // indices into the query list
  std::size_t dropped = 0;        // points with zero gradient
};

// Normalized SDF gradients via the tape. Points at critical points of the
// SDF are dropped and counted.
NormalsResult normals(const ShapeSpace& space, std::span<const Vec3> x, const LatentCode& z);

// Precomputes whatever does not depend on the latent code so that repeated
// extractions during refinement are cheap. For the analytic backend this is
// every basis SDF on the grid plus basis gradients near any possible surface;
// the decoder backend is evaluated from scratch each time.
class SurfaceExtractor {
 public:
  SurfaceExtractor(ShapeSpace space, QueryGrid grid, double band = kDefaultBand);

  const ShapeSpace& space() const { return space_; }
  const QueryGrid& grid() const { return grid_; }
  double band() const { return band_; }
  double diameter() const { return diameter_; }

  // Throws DegenerateShapeError if no grid point lies in the band.
  SurfacePointSet extract(const LatentCode& z, ExtractionStats* stats = nullptr) const;

  // Same points as extract(), recorded on z's tape as functions of z. With a
  // selection, the band test is skipped and exactly those grid indices are
  // used (in the given order). The analytic backend differentiates through
  // the normal as well; the decoder backend treats normals as constants.
  DiffSurface extract_diff(const std::array<ad::Var, 3>& z,
                           const std::vector<std::uint32_t>* selection = nullptr) const;

 private:
  struct Cached {
    std::vector<double> values;     // K per grid point
    std::vector<std::int32_t> row;  // grid point -> gradient row, -1 if far from every surface
    std::vector<double> gradients;  // 3K per row
  };

  std::vector<std::uint32_t> band_indices(const std::array<double, 3>& z) const;
  std::vector<double> grid_values(const std::array<double, 3>& z) const;

  ShapeSpace space_;
  QueryGrid grid_;
  double band_;
  double diameter_;
  Cached cache_;
};

// Single-call convenience: builds an extractor and extracts.
SurfacePointSet project_surface(const ShapeSpace& space, const QueryGrid& grid, const LatentCode& z,
                                double band = kDefaultBand);

// Keeps points whose camera-frame normal faces the camera: dot(R n, x_cam) < 0.
SurfacePointSet backface_cull(const SurfacePointSet& points, const SimilarityTransform& pose,
                              const Camera& camera);
// Indices of the points kept by backface_cull.
std::vector<std::uint32_t> visible_indices(std::span<const Vec3> points, std::span<const Vec3> normals,
                                           const SimilarityTransform& pose);

// "x y z nx ny nz r g b" per line after a schema comment.
void write_points(std::ostream& out, const SurfacePointSet& points);

}  // namespace sdfal
