#include "sdfal/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>

#include "sdfal/errors.hpp"

namespace sdfal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Tangent-plane hit along ray r. Returns false for grazing planes and hits
// behind the camera.
bool plane_hit(const Vec3& p, const Vec3& n, const Vec3& r, double eps, double& depth) {
  const double denom = n.dot(r);
  if (!(std::abs(denom) >= eps)) return false;
  depth = n.dot(p) / denom;
  return depth > 0.0;
}

struct PixelRange {
  int x0, x1, y0, y1;  // inclusive
};

PixelRange disc_bounds(const Vec3& p, double diam, const Camera& cam, bool full) {
  PixelRange all{0, cam.width - 1, 0, cam.height - 1};
  if (full) return all;
  // Every plane point with M > 0 lies within the cube of half size diam
  // around p; its projection lies within the projected corners.
  double umin = kInf, umax = -kInf, vmin = kInf, vmax = -kInf;
  for (int c = 0; c < 8; ++c) {
    const Vec3 q = p + diam * Vec3(c & 1 ? 1 : -1, c & 2 ? 1 : -1, c & 4 ? 1 : -1);
    if (!(q.z() > 1e-9)) return all;
    const Vec2 uv = cam.project(q);
    umin = std::min(umin, uv.x());
    umax = std::max(umax, uv.x());
    vmin = std::min(vmin, uv.y());
    vmax = std::max(vmax, uv.y());
  }
  // Pixel i has its centre at i + 0.5; pad by one pixel.
  PixelRange r;
  r.x0 = std::max(0, static_cast<int>(std::floor(umin - 0.5)) - 1);
  r.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(umax - 0.5)) + 1);
  r.y0 = std::max(0, static_cast<int>(std::floor(vmin - 0.5)) - 1);
  r.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(vmax - 0.5)) + 1);
  return r;
}

// Softmax weights of -D * sigma * M over one pixel's fragments.
void pixel_weights(const Fragments& f, std::size_t begin, std::size_t end, double sigma, double* w) {
  double m = -kInf;
  for (std::size_t k = begin; k < end; ++k) m = std::max(m, -f.depth[k] * sigma * f.mask[k]);
  double total = 0.0;
  for (std::size_t k = begin; k < end; ++k) {
    w[k - begin] = std::exp(-f.depth[k] * sigma * f.mask[k] - m);
    total += w[k - begin];
  }
  for (std::size_t k = begin; k < end; ++k) w[k - begin] /= total;
}

}  // namespace

void RenderConfig::validate() const {
  if (!(sigma > 0.0)) throw UsageError("render config: sigma must be positive");
  if (!(epsilon > 0.0)) throw UsageError("render config: epsilon must be positive");
}

std::optional<double> plane_depth(const Vec3& n, const Vec3& p, double u, double v, const Camera& camera,
                                  double epsilon) {
  const Vec3 r = camera.ray(u, v);
  const double denom = n.dot(r);
  if (!(std::abs(denom) >= epsilon)) return std::nullopt;
  return n.dot(p) / denom;
}

double disc_mask(const Vec3& p, const Vec3& P, double diam) { return std::max(diam - (p - P).norm(), 0.0); }

Composite<double> composite(std::span<const DiscSample> discs, const RenderConfig& config) {
  std::vector<double> d, m;
  std::vector<V3d> c;
  for (const DiscSample& s : discs) {
    d.push_back(s.depth);
    m.push_back(s.mask);
    c.emplace_back(s.color);
  }
  return composite<double>(d, m, c, config);
}

Fragments rasterize(const DiscSet& discs, const Camera& camera, const RenderConfig& config) {
  camera.validate(false);
  config.validate();
  struct Hit {
    std::uint32_t pixel, disc;
    double depth, mask;
  };
  std::vector<Hit> hits;
  const double diam = discs.diameter;
  for (std::size_t i = 0; i < discs.centers.size(); ++i) {
    const Vec3& p = discs.centers[i];
    const Vec3& n = discs.normals[i];
    const PixelRange r = disc_bounds(p, diam, camera, config.full_scan);
    for (int y = r.y0; y <= r.y1; ++y) {
      for (int x = r.x0; x <= r.x1; ++x) {
        const Vec3 ray = camera.pixel_ray(x, y);
        double depth = 0.0;
        if (!plane_hit(p, n, ray, config.epsilon, depth)) continue;
        const double m = diam - (p - depth * ray).norm();
        if (!(m > 0.0)) continue;
        hits.push_back({static_cast<std::uint32_t>(y * camera.width + x), static_cast<std::uint32_t>(i), depth, m});
      }
    }
  }
  // Stable counting sort by pixel keeps discs in index order within a pixel.
  Fragments f;
  f.width = camera.width;
  f.height = camera.height;
  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  f.pixel_begin.assign(npix + 1, 0);
  for (const Hit& h : hits) ++f.pixel_begin[h.pixel + 1];
  for (std::size_t i = 0; i < npix; ++i) f.pixel_begin[i + 1] += f.pixel_begin[i];
  std::vector<std::uint32_t> cursor(f.pixel_begin.begin(), f.pixel_begin.end() - 1);
  f.disc.resize(hits.size());
  f.depth.resize(hits.size());
  f.mask.resize(hits.size());
  for (const Hit& h : hits) {
    const std::uint32_t k = cursor[h.pixel]++;
    f.disc[k] = h.disc;
    f.depth[k] = h.depth;
    f.mask[k] = h.mask;
  }
  return f;
}

DiscSet pose_discs(const SurfacePointSet& points, const SimilarityTransform& pose,
                   std::vector<std::uint32_t>* disc_source) {
  pose.validate();
  DiscSet d;
  d.diameter = pose.s * points.diameter;
  const std::vector<std::uint32_t> keep = visible_indices(points.points, points.normals, pose);
  for (std::uint32_t i : keep) {
    d.centers.push_back(pose.apply(points.points[i]));
    d.normals.push_back(pose.R * points.normals[i]);
    d.colors.push_back(points.colors[i]);
  }
  if (disc_source) *disc_source = keep;
  return d;
}

RenderOutput render_discs(const DiscSet& discs, const Camera& camera, const RenderConfig& config) {
  RenderOutput out;
  out.width = camera.width;
  out.height = camera.height;
  out.fragments = rasterize(discs, camera, config);
  const Fragments& f = out.fragments;
  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  out.nocs.assign(npix, config.background);
  out.depth.assign(npix, kInf);
  out.mask.assign(npix, 0.0);
  out.coverage.assign(npix, 0);
  out.weight.assign(f.size(), 0.0);
  for (std::size_t px = 0; px < npix; ++px) {
    const std::size_t b = f.pixel_begin[px], e = f.pixel_begin[px + 1];
    if (b == e) continue;
    out.empty = false;
    pixel_weights(f, b, e, config.sigma, &out.weight[b]);
    Vec3 c = Vec3::Zero();
    double depth = 0.0;
    for (std::size_t k = b; k < e; ++k) {
      c += out.weight[k] * discs.colors[f.disc[k]];
      depth += out.weight[k] * f.depth[k];
    }
    out.nocs[px] = c;
    out.depth[px] = depth;
    out.mask[px] = 1.0;
    out.coverage[px] = static_cast<int>(e - b);
  }
  return out;
}

RenderOutput render(const SurfacePointSet& points, const SimilarityTransform& pose, const Camera& camera,
                    const RenderConfig& config) {
  std::vector<std::uint32_t> source;
  const DiscSet discs = pose_discs(points, pose, &source);
  RenderOutput out = render_discs(discs, camera, config);
  out.disc_source = std::move(source);
  return out;
}

DiffRender render_diff(const DiffDiscs& discs, const Camera& camera, const RenderConfig& config,
                       const Fragments* frozen) {
  struct Data {
    std::vector<Vec3> p, n, c;
    double diam = 0.0;
    double sigma = 0.0;
    Fragments f;
    std::vector<double> w;
    std::vector<Vec3> rays;       // per fragment
    std::vector<Vec3> pixel_color;  // per covered pixel
    std::vector<std::uint32_t> covered;
  };
  auto data = std::make_shared<Data>();
  const std::size_t nd = discs.centers.size();
  DiscSet numeric;
  numeric.diameter = discs.diameter.value();
  for (std::size_t i = 0; i < nd; ++i) {
    numeric.centers.push_back(to_eigen(discs.centers[i]));
    numeric.normals.push_back(to_eigen(discs.normals[i]));
    numeric.colors.push_back(to_eigen(discs.colors[i]));
  }
  data->diam = numeric.diameter;
  data->sigma = config.sigma;

  if (frozen) {
    if (frozen->width != camera.width || frozen->height != camera.height) {
      throw UsageError("render_diff: frozen structure has a different image size");
    }
    data->f = *frozen;
    for (std::size_t k = 0; k < data->f.size(); ++k) {
      const std::uint32_t i = data->f.disc[k];
      if (i >= nd) throw UsageError("render_diff: frozen structure references a missing disc");
      const std::uint32_t px = static_cast<std::uint32_t>(
          std::upper_bound(data->f.pixel_begin.begin(), data->f.pixel_begin.end(), k) -
          data->f.pixel_begin.begin() - 1);
      const Vec3 ray = camera.pixel_ray(static_cast<int>(px % camera.width), static_cast<int>(px / camera.width));
      const Vec3& p = numeric.centers[i];
      const Vec3& n = numeric.normals[i];
      const double depth = n.dot(p) / n.dot(ray);
      data->f.depth[k] = depth;
      data->f.mask[k] = numeric.diameter - (p - depth * ray).norm();
    }
  } else {
    data->f = rasterize(numeric, camera, config);
  }
  const Fragments& f = data->f;

  DiffRender out;
  out.width = camera.width;
  out.height = camera.height;
  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  out.slot.assign(npix, -1);
  data->w.assign(f.size(), 0.0);
  data->rays.resize(f.size());
  std::vector<double> values;
  for (std::size_t px = 0; px < npix; ++px) {
    const std::size_t b = f.pixel_begin[px], e = f.pixel_begin[px + 1];
    if (b == e) continue;
    pixel_weights(f, b, e, config.sigma, &data->w[b]);
    const Vec3 ray = camera.pixel_ray(static_cast<int>(px % camera.width), static_cast<int>(px / camera.width));
    Vec3 c = Vec3::Zero();
    for (std::size_t k = b; k < e; ++k) {
      c += data->w[k] * numeric.colors[f.disc[k]];
      data->rays[k] = ray;
    }
    out.slot[px] = static_cast<std::int32_t>(data->covered.size());
    data->covered.push_back(static_cast<std::uint32_t>(px));
    data->pixel_color.push_back(c);
    values.insert(values.end(), {c.x(), c.y(), c.z()});
  }
  data->p = std::move(numeric.centers);
  data->n = std::move(numeric.normals);
  data->c = std::move(numeric.colors);
  out.covered_pixels = data->covered;
  out.fragments = f;
  if (values.empty()) return out;

  // Inputs captured by value: 9 Vars per disc plus the diameter.
  auto inputs = std::make_shared<std::vector<ad::Var>>();
  inputs->reserve(9 * nd + 1);
  for (std::size_t i = 0; i < nd; ++i) {
    for (const V3v* v : {&discs.centers[i], &discs.normals[i], &discs.colors[i]}) {
      inputs->insert(inputs->end(), {v->x, v->y, v->z});
    }
  }
  inputs->push_back(discs.diameter);

  auto backward = [data, inputs](std::span<const double> g_out, ad::AdjointSink& sink) {
    const Data& d = *data;
    const std::size_t n_disc = d.p.size();
    std::vector<double> grad(9 * n_disc + 1, 0.0);
    for (std::size_t s = 0; s < d.covered.size(); ++s) {
      const Vec3 g(g_out[3 * s], g_out[3 * s + 1], g_out[3 * s + 2]);
      if (g.isZero(0.0)) continue;
      const std::uint32_t px = d.covered[s];
      const double gI = g.dot(d.pixel_color[s]);
      for (std::size_t k = d.f.pixel_begin[px]; k < d.f.pixel_begin[px + 1]; ++k) {
        const std::uint32_t i = d.f.disc[k];
        const double w = d.w[k];
        double* gi = &grad[9 * i];
        // Colors.
        gi[6] += w * g.x();
        gi[7] += w * g.y();
        gi[8] += w * g.z();
        // Score a = -sigma * D * M.
        const double ga = w * (g.dot(d.c[i]) - gI);
        if (ga == 0.0) continue;
        const double D = d.f.depth[k];
        const double M = d.f.mask[k];
        const double gD = ga * (-d.sigma * M);
        const double gM = ga * (-d.sigma * D);
        const Vec3& p = d.p[i];
        const Vec3& nn = d.n[i];
        const Vec3& r = d.rays[k];
        const double nr = nn.dot(r);
        const Vec3 dD_dp = nn / nr;
        const Vec3 dD_dn = (p - D * r) / nr;
        const Vec3 q = p - D * r;
        const double ql = q.norm();
        const Vec3 u = ql > 0.0 ? Vec3(q / ql) : Vec3::Zero();
        const double ur = u.dot(r);
        const Vec3 dM_dp = -(u - ur * dD_dp);
        const Vec3 dM_dn = ur * dD_dn;
        const Vec3 gp = gD * dD_dp + gM * dM_dp;
        const Vec3 gn = gD * dD_dn + gM * dM_dn;
        gi[0] += gp.x();
        gi[1] += gp.y();
        gi[2] += gp.z();
        gi[3] += gn.x();
        gi[4] += gn.y();
        gi[5] += gn.z();
        grad[9 * n_disc] += gM;  // dM/d diam = 1
      }
    }
    for (std::size_t j = 0; j < grad.size(); ++j) {
      if (grad[j] != 0.0) sink.add((*inputs)[j], grad[j]);
    }
  };

  ad::Tape* tape = nullptr;
  for (const ad::Var& v : *inputs) {
    if (!v.is_constant()) {
      tape = v.tape();
      break;
    }
  }
  if (!tape) {
    for (std::size_t s = 0; s < data->covered.size(); ++s) {
      out.colors.emplace_back(values[3 * s], values[3 * s + 1], values[3 * s + 2]);
    }
    return out;
  }
  const std::vector<ad::Var> res = tape->record_custom(values, backward);
  out.colors.reserve(res.size() / 3);
  for (std::size_t s = 0; s < res.size() / 3; ++s) out.colors.emplace_back(res[3 * s], res[3 * s + 1], res[3 * s + 2]);
  return out;
}

void write_ppm(std::ostream& out, int width, int height, std::span<const Vec3> rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height) throw UsageError("write_ppm: size mismatch");
  out << "P6\n# sdfal/nocs/v1\n" << width << " " << height << "\n255\n";
  for (const Vec3& c : rgb) {
    for (int k = 0; k < 3; ++k) {
      const double v = std::clamp(c[k], 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
}

void write_mask_ppm(std::ostream& out, int width, int height, std::span<const double> mask) {
  std::vector<Vec3> rgb;
  rgb.reserve(mask.size());
  for (double m : mask) rgb.push_back(Vec3::Constant(m));
  write_ppm(out, width, height, rgb);
}

void write_depth(std::ostream& out, int width, int height, std::span<const double> depth) {
  if (depth.size() != static_cast<std::size_t>(width) * height) throw UsageError("write_depth: size mismatch");
  out << "# sdfal/depth/v1\n" << width << " " << height << "\n";
  out.precision(9);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double d = depth[static_cast<std::size_t>(y) * width + x];
      if (x) out << ' ';
      if (std::isfinite(d)) {
        out << d;
      } else {
        out << "inf";
      }
    }
    out << '\n';
  }
}

}  // namespace sdfal
