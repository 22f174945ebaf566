#include "sdfal/isosurface.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "sdfal/errors.hpp"

namespace sdfal {

QueryGrid QueryGrid::cube(int resolution, double half_extent) {
  QueryGrid g;
  g.resolution = resolution;
  g.lo = Vec3::Constant(-half_extent);
  g.hi = Vec3::Constant(half_extent);
  g.validate();
  return g;
}

void QueryGrid::validate() const {
  if (resolution < 8) throw UsageError("query grid: resolution must be at least 8");
  if ((lo.array() > -0.5).any() || (hi.array() < 0.5).any()) {
    throw UsageError("query grid: bounds must contain the unit-diameter ball");
  }
}

Vec3 QueryGrid::point(std::size_t index) const {
  const std::size_t r = static_cast<std::size_t>(resolution);
  const Vec3 cell(static_cast<double>(index % r), static_cast<double>((index / r) % r),
                  static_cast<double>(index / (r * r)));
  return lo + ((cell.array() + 0.5) * spacing().array()).matrix();
}

double disc_diameter(const QueryGrid& grid) {
  return grid.spacing().minCoeff() * std::sqrt(3.0);
}

double disc_diameter(std::span<const Vec3> points) {
  if (points.size() < 2) throw UsageError("disc_diameter: need at least two points");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) best = std::min(best, (points[i] - points[j]).norm());
  }
  return best * std::sqrt(3.0);
}

NormalsResult normals(const ShapeSpace& space, std::span<const Vec3> x, const LatentCode& z) {
  NormalsResult out;
  ad::Tape tape;
  const std::array<ad::Var, 3> zc{z[0], z[1], z[2]};
  for (std::size_t i = 0; i < x.size(); ++i) {
    tape.clear();
    const V3v xv(tape.variable(x[i].x()), tape.variable(x[i].y()), tape.variable(x[i].z()));
    const ad::Var s = space.sdf(xv, zc);
    if (s.is_constant()) {
      ++out.dropped;
      continue;
    }
    const ad::Adjoints adj = tape.backward(s);
    const Vec3 g(adj[xv.x], adj[xv.y], adj[xv.z]);
    const double len = g.norm();
    if (!(len > 0.0)) {
      ++out.dropped;
      continue;
    }
    out.normals.push_back(g / len);
    out.kept.push_back(i);
  }
  return out;
}

SurfaceExtractor::SurfaceExtractor(ShapeSpace space, QueryGrid grid, double band)
    : space_(std::move(space)), grid_(grid), band_(band), diameter_(0.0) {
  grid_.validate();
  if (!(band_ > 0.0)) throw UsageError("surface extractor: band must be positive");
  diameter_ = disc_diameter(grid_);
  if (space_.backend() != ShapeBackend::kAnalyticBlend) return;

  const std::size_t n = grid_.size();
  const std::size_t k_count = space_.basis_count();
  cache_.values.resize(n * k_count);
  cache_.row.assign(n, -1);
  ad::Tape tape;
  for (std::size_t i = 0; i < n; ++i) {
    const V3d x(grid_.point(i));
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t k = 0; k < k_count; ++k) {
      const double f = space_.basis(k).sdf(x);
      cache_.values[i * k_count + k] = f;
      lo = std::min(lo, f);
      hi = std::max(hi, f);
    }
    // The blend is a convex combination, so it can only reach the band where
    // the basis values straddle it.
    if (lo > band_ || hi < -band_) continue;
    cache_.row[i] = static_cast<std::int32_t>(cache_.gradients.size() / (3 * k_count));
    for (std::size_t k = 0; k < k_count; ++k) {
      tape.clear();
      const V3v xv(tape.variable(x.x), tape.variable(x.y), tape.variable(x.z));
      const ad::Var f = space_.basis(k).sdf(xv);
      double g[3] = {0.0, 0.0, 0.0};
      if (!f.is_constant()) {
        const ad::Adjoints adj = tape.backward(f);
        g[0] = adj[xv.x];
        g[1] = adj[xv.y];
        g[2] = adj[xv.z];
      }
      cache_.gradients.insert(cache_.gradients.end(), g, g + 3);
    }
  }
}

std::vector<double> SurfaceExtractor::grid_values(const std::array<double, 3>& z) const {
  const std::size_t n = grid_.size();
  std::vector<double> s(n);
  if (space_.backend() == ShapeBackend::kAnalyticBlend) {
    const std::vector<double> w = space_.blend_weights(z);
    const std::size_t k_count = w.size();
    for (std::size_t i = 0; i < n; ++i) {
      // Same summation order as ShapeSpace::sdf.
      double total = 0.0;
      for (std::size_t k = 0; k < k_count; ++k) total = total + w[k] * cache_.values[i * k_count + k];
      s[i] = total;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) s[i] = space_.sdf(V3d(grid_.point(i)), z);
  }
  return s;
}

std::vector<std::uint32_t> SurfaceExtractor::band_indices(const std::array<double, 3>& z) const {
  std::vector<std::uint32_t> out;
  if (space_.backend() == ShapeBackend::kAnalyticBlend) {
    const std::vector<double> w = space_.blend_weights(z);
    const std::size_t k_count = w.size();
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      if (cache_.row[i] < 0) continue;
      double total = 0.0;
      for (std::size_t k = 0; k < k_count; ++k) total = total + w[k] * cache_.values[i * k_count + k];
      if (std::abs(total) <= band_) out.push_back(static_cast<std::uint32_t>(i));
    }
  } else {
    const std::vector<double> s = grid_values(z);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::abs(s[i]) <= band_) out.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return out;
}

SurfacePointSet SurfaceExtractor::extract(const LatentCode& z, ExtractionStats* stats) const {
  const std::array<double, 3> za = z.array();
  SurfacePointSet out;
  out.diameter = diameter_;
  ExtractionStats local;
  local.candidates = space_.backend() == ShapeBackend::kAnalyticBlend
                         ? static_cast<std::size_t>(std::count_if(cache_.row.begin(), cache_.row.end(),
                                                                  [](std::int32_t r) { return r >= 0; }))
                         : grid_.size();
  const std::vector<std::uint32_t> band = band_indices(za);
  local.in_band = band.size();

  if (space_.backend() == ShapeBackend::kAnalyticBlend) {
    const std::vector<double> w = space_.blend_weights(za);
    const std::size_t k_count = w.size();
    for (std::uint32_t i : band) {
      double s = 0.0;
      Vec3 g = Vec3::Zero();
      const double* grads = &cache_.gradients[static_cast<std::size_t>(cache_.row[i]) * 3 * k_count];
      for (std::size_t k = 0; k < k_count; ++k) {
        s = s + w[k] * cache_.values[i * k_count + k];
        g += w[k] * Vec3(grads[3 * k], grads[3 * k + 1], grads[3 * k + 2]);
      }
      const double len = g.norm();
      if (!(len > 0.0)) {
        ++local.dropped_zero_gradient;
        continue;
      }
      const Vec3 n = g / len;
      const Vec3 p = grid_.point(i) - n * s;
      out.points.push_back(p);
      out.normals.push_back(n);
      out.colors.push_back(nocs_color(p));
      out.grid_index.push_back(i);
    }
  } else {
    std::vector<Vec3> xs;
    xs.reserve(band.size());
    for (std::uint32_t i : band) xs.push_back(grid_.point(i));
    const NormalsResult nr = normals(space_, xs, z);
    local.dropped_zero_gradient = nr.dropped;
    for (std::size_t j = 0; j < nr.kept.size(); ++j) {
      const Vec3& x = xs[nr.kept[j]];
      const Vec3 p = x - nr.normals[j] * space_.sdf(x, z);
      out.points.push_back(p);
      out.normals.push_back(nr.normals[j]);
      out.colors.push_back(nocs_color(p));
      out.grid_index.push_back(band[nr.kept[j]]);
    }
  }
  if (stats) *stats = local;
  if (out.points.empty()) throw DegenerateShapeError("surface extraction: no query point within the band");
  return out;
}

DiffSurface SurfaceExtractor::extract_diff(const std::array<ad::Var, 3>& z,
                                           const std::vector<std::uint32_t>* selection) const {
  const std::array<double, 3> za{z[0].value(), z[1].value(), z[2].value()};
  std::vector<std::uint32_t> own;
  if (!selection) {
    own = band_indices(za);
    selection = &own;
  }
  DiffSurface out;
  out.diameter = diameter_;
  out.points.reserve(selection->size());
  out.normals.reserve(selection->size());
  out.colors.reserve(selection->size());

  if (space_.backend() == ShapeBackend::kAnalyticBlend) {
    const std::vector<ad::Var> w = space_.blend_weights(z);
    const std::size_t k_count = w.size();
    std::vector<double> f(k_count), gx(k_count), gy(k_count), gz(k_count);
    for (std::uint32_t i : *selection) {
      if (i >= grid_.size() || cache_.row[i] < 0) {
        throw UsageError("surface extractor: selected grid point is far from every basis surface");
      }
      const double* grads = &cache_.gradients[static_cast<std::size_t>(cache_.row[i]) * 3 * k_count];
      for (std::size_t k = 0; k < k_count; ++k) {
        f[k] = cache_.values[i * k_count + k];
        gx[k] = grads[3 * k];
        gy[k] = grads[3 * k + 1];
        gz[k] = grads[3 * k + 2];
      }
      const ad::Var s = ad::linear_combination(f, w);
      const ad::Var g[3] = {ad::linear_combination(gx, w), ad::linear_combination(gy, w),
                            ad::linear_combination(gz, w)};
      const ad::Var len = ad::norm(g);
      if (!(len.value() > 0.0)) continue;
      const V3v n(g[0] / len, g[1] / len, g[2] / len);
      const V3v p = V3v(grid_.point(i)) - n * s;
      out.points.push_back(p);
      out.normals.push_back(n);
      out.colors.push_back(nocs_color(p));
      out.grid_index.push_back(i);
    }
  } else {
    std::vector<Vec3> xs;
    xs.reserve(selection->size());
    for (std::uint32_t i : *selection) xs.push_back(grid_.point(i));
    const NormalsResult nr = normals(space_, xs, project_latent(Vec3(za[0], za[1], za[2])));
    for (std::size_t j = 0; j < nr.kept.size(); ++j) {
      const Vec3& x = xs[nr.kept[j]];
      const ad::Var s = space_.sdf(V3v(x), z);
      const V3v n(nr.normals[j]);
      const V3v p = V3v(x) - n * s;
      out.points.push_back(p);
      out.normals.push_back(n);
      out.colors.push_back(nocs_color(p));
      out.grid_index.push_back((*selection)[nr.kept[j]]);
    }
  }
  return out;
}

SurfacePointSet project_surface(const ShapeSpace& space, const QueryGrid& grid, const LatentCode& z,
                                double band) {
  return SurfaceExtractor(space, grid, band).extract(z);
}

std::vector<std::uint32_t> visible_indices(std::span<const Vec3> points, std::span<const Vec3> normals,
                                           const SimilarityTransform& pose) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 x = pose.apply(points[i]);
    const Vec3 n = pose.R * normals[i];
    if (n.dot(x) < 0.0) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

SurfacePointSet backface_cull(const SurfacePointSet& points, const SimilarityTransform& pose,
                              const Camera& camera) {
  camera.validate(false);
  SurfacePointSet out;
  out.diameter = points.diameter;
  for (std::uint32_t i : visible_indices(points.points, points.normals, pose)) {
    out.points.push_back(points.points[i]);
    out.normals.push_back(points.normals[i]);
    out.colors.push_back(points.colors[i]);
    if (i < points.grid_index.size()) out.grid_index.push_back(points.grid_index[i]);
  }
  return out;
}

void write_points(std::ostream& out, const SurfacePointSet& points) {
  out << "# sdfal/points/v1 x y z nx ny nz r g b\n";
  out.precision(17);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3& p = points.points[i];
    const Vec3& n = points.normals[i];
    const Vec3& c = points.colors[i];
    out << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << n.x() << ' ' << n.y() << ' ' << n.z() << ' '
        << c.x() << ' ' << c.y() << ' ' << c.z() << '\n';
  }
}

}  // namespace sdfal
