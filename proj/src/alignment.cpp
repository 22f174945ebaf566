#include "sdfal/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "sdfal/errors.hpp"

namespace sdfal {

// ---- initialization ----

CorrespondenceSet nocs_correspondences(std::span<const Vec3> model_colors, std::span<const Vec3> scene_colors,
                                       double threshold) {
  if (model_colors.empty() || scene_colors.empty()) {
    throw InsufficientCorrespondencesError("nocs_correspondences: empty point set");
  }
  const PointIndex scene_index(scene_colors, 0.05);
  const PointIndex model_index(model_colors, 0.02);
  CorrespondenceSet out;
  for (std::size_t i = 0; i < model_colors.size(); ++i) {
    const auto nn = scene_index.nearest(model_colors[i], threshold);
    if (!nn || !(nn->distance < threshold)) continue;
    const auto back = model_index.nearest(scene_colors[nn->index], threshold);
    if (back && back->index == i) out.push_back({static_cast<std::uint32_t>(i), nn->index, nn->distance});
  }
  if (out.size() < 4) {
    throw InsufficientCorrespondencesError("nocs_correspondences: " + std::to_string(out.size()) +
                                           " pairs below threshold, need 4");
  }
  return out;
}

SimilarityTransform procrustes(std::span<const Vec3> source, std::span<const Vec3> target) {
  if (source.size() != target.size()) throw UsageError("procrustes: point sets differ in size");
  const std::size_t n = source.size();
  if (n < 3) throw RankError("procrustes: need at least 3 pairs");
  Vec3 mu_a = Vec3::Zero(), mu_b = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_a += source[i];
    mu_b += target[i];
  }
  mu_a /= static_cast<double>(n);
  mu_b /= static_cast<double>(n);
  Mat3 cov_a = Mat3::Zero();
  Mat3 sigma = Mat3::Zero();
  double var_a = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = source[i] - mu_a;
    const Vec3 b = target[i] - mu_b;
    cov_a += a * a.transpose();
    sigma += b * a.transpose();
    var_a += a.squaredNorm();
  }
  cov_a /= static_cast<double>(n);
  sigma /= static_cast<double>(n);
  var_a /= static_cast<double>(n);

  const Eigen::JacobiSVD<Mat3> svd_a(cov_a);
  const Vec3 ev = svd_a.singularValues();
  if (!(ev(0) > 0.0) || ev(1) <= 1e-12 * ev(0)) throw RankError("procrustes: source points are collinear");

  const Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  if (!(d(0) > 0.0) || d(1) <= 1e-12 * d(0)) throw RankError("procrustes: cross-covariance is rank deficient");
  const Mat3& U = svd.matrixU();
  const Mat3& V = svd.matrixV();
  Vec3 S = Vec3::Ones();
  if (U.determinant() * V.determinant() < 0.0) S(2) = -1.0;

  SimilarityTransform out;
  out.R = U * S.asDiagonal() * V.transpose();
  out.s = d.dot(S) / var_a;
  out.t = mu_b - out.s * out.R * mu_a;
  if (!(out.s > 0.0) || !std::isfinite(out.s) || !out.t.allFinite()) {
    throw RankError("procrustes: degenerate scale");
  }
  return out;
}

int ransac_iterations(double p, double w, int n) {
  if (!(p > 0.0 && p < 1.0) || !(w > 0.0 && w <= 1.0) || n < 1) {
    throw UsageError("ransac_iterations: need 0 < p < 1, 0 < w <= 1, n >= 1");
  }
  const double wn = std::pow(w, n);
  if (wn >= 1.0) return 1;
  return std::max(1, static_cast<int>(std::ceil(std::log(1.0 - p) / std::log(1.0 - wn))));
}

namespace {

std::vector<std::uint32_t> inliers_of(const SimilarityTransform& pose, std::span<const Vec3> source,
                                      std::span<const Vec3> target, double threshold) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if ((pose.apply(source[i]) - target[i]).norm() < threshold) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

}  // namespace

RansacResult ransac_procrustes(std::span<const Vec3> source, std::span<const Vec3> target,
                               const RansacConfig& config) {
  if (source.size() != target.size()) throw UsageError("ransac_procrustes: point sets differ in size");
  const auto n = static_cast<std::size_t>(config.sample_size);
  if (config.sample_size < 3 || !(config.inlier_threshold > 0.0)) {
    throw UsageError("ransac_procrustes: invalid configuration");
  }
  if (source.size() < n) {
    throw InsufficientCorrespondencesError("ransac_procrustes: fewer pairs than the sample size");
  }
  RansacResult result;
  result.iterations = ransac_iterations(config.p, config.w, config.sample_size);

  std::mt19937_64 rng(config.seed);
  std::vector<std::uint32_t> all(source.size());
  std::iota(all.begin(), all.end(), 0u);
  std::vector<std::uint32_t> sample(n);
  std::vector<Vec3> a(n), b(n);
  std::size_t best_count = 0;
  SimilarityTransform best;
  for (int it = 0; it < result.iterations; ++it) {
    // Partial Fisher-Yates: the first n entries become the sample.
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, all.size() - 1);
      std::swap(all[k], all[pick(rng)]);
      sample[k] = all[k];
    }
    for (std::size_t k = 0; k < n; ++k) {
      a[k] = source[sample[k]];
      b[k] = target[sample[k]];
    }
    SimilarityTransform model;
    try {
      model = procrustes(a, b);
    } catch (const RankError&) {
      ++result.degenerate_samples;
      continue;
    }
    const std::size_t count = inliers_of(model, source, target, config.inlier_threshold).size();
    if (count > best_count) {
      best_count = count;
      best = model;
    }
  }
  if (best_count < n) {
    throw InitializationError("ransac_procrustes: best hypothesis has " + std::to_string(best_count) +
                              " inliers, need " + std::to_string(n));
  }
  const std::vector<std::uint32_t> support = inliers_of(best, source, target, config.inlier_threshold);
  std::vector<Vec3> sa, sb;
  for (std::uint32_t i : support) {
    sa.push_back(source[i]);
    sb.push_back(target[i]);
  }
  try {
    result.pose = procrustes(sa, sb);
  } catch (const RankError& e) {
    throw InitializationError(std::string("ransac_procrustes: refit failed: ") + e.what());
  }
  result.inliers = inliers_of(result.pose, source, target, config.inlier_threshold);
  return result;
}

// ---- losses ----

std::vector<IndexPair> match_nearest(std::span<const Vec3> queries, const PointIndex& targets, double threshold) {
  std::vector<IndexPair> out;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto nn = targets.nearest(queries[i], threshold);
    if (nn && nn->distance < threshold) out.emplace_back(static_cast<std::uint32_t>(i), nn->index);
  }
  return out;
}

ad::Var mean_pair_distance(std::span<const V3v> a, std::span<const Vec3> b, std::span<const IndexPair> pairs) {
  if (pairs.empty()) return ad::Var(0.0);
  std::vector<ad::Var> terms;
  terms.reserve(pairs.size());
  for (const auto& [i, j] : pairs) terms.push_back(length(a[i] - V3v(b[j])));
  return ad::sum(terms) / static_cast<double>(pairs.size());
}

namespace {

LossTerm nearest_loss(std::span<const V3v> a, std::span<const Vec3> b, double threshold, double cell) {
  LossTerm out;
  std::vector<Vec3> q(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) q[i] = to_eigen(a[i]);
  if (!b.empty()) out.pairs = match_nearest(q, PointIndex(b, cell), threshold);
  out.empty = out.pairs.empty();
  out.value = mean_pair_distance(a, b, out.pairs);
  return out;
}

}  // namespace

LossTerm loss_2d(std::span<const V3v> rendered, std::span<const Vec3> predicted, double threshold) {
  return nearest_loss(rendered, predicted, threshold, 0.05);
}

LossTerm loss_3d(std::span<const V3v> points, std::span<const Vec3> lidar, double threshold) {
  return nearest_loss(points, lidar, threshold, 0.1);
}

// ---- objective ----

AlignmentObjective::AlignmentObjective(AlignmentProblem problem) : problem_(std::move(problem)) {
  if (problem_.extractor == nullptr) throw UsageError("AlignmentObjective: no surface extractor");
  problem_.camera.validate(false);
  problem_.render.validate();
  const NocsMap& m = problem_.predicted;
  if (m.width != problem_.camera.width || m.height != problem_.camera.height ||
      m.colors.size() != static_cast<std::size_t>(m.width) * m.height || m.valid.size() != m.colors.size()) {
    throw UsageError("AlignmentObjective: NOCS map does not match the patch camera");
  }
  for (std::size_t px = 0; px < m.colors.size(); ++px) {
    if (m.valid[px]) {
      predicted_pixels_.push_back(static_cast<std::uint32_t>(px));
      predicted_colors_.push_back(m.colors[px]);
    }
  }
  predicted_index_ = PointIndex(predicted_colors_, 0.05);
  lidar_index_ = PointIndex(problem_.lidar, 0.1);
}

ObjectiveValue AlignmentObjective::evaluate(const Mat3& R0, std::span<const ad::Var> params, const LossFlags& flags,
                                            LossStructure* record, const LossStructure* replay) const {
  if (params.size() != kParamCount) throw UsageError("AlignmentObjective: expected 10 parameters");
  const V3v omega(params[0], params[1], params[2]);
  const V3v t(params[3], params[4], params[5]);
  const ad::Var& s = params[6];
  const std::array<ad::Var, 3> z = {params[7], params[8], params[9]};
  const SurfaceExtractor& extractor = *problem_.extractor;

  const DiffSurface surf = replay ? extractor.extract_diff(z, &replay->band) : extractor.extract_diff(z);

  // R v = R0 v + omega x (R0 v), exact to first order in omega.
  auto rotate = [&](const V3v& v) {
    const V3v r0 = mul(R0, v);
    return r0 + cross(omega, r0);
  };
  std::vector<std::uint32_t> visible;
  std::vector<V3v> centers, normals, colors;
  if (replay) {
    visible = replay->visible;
    for (std::uint32_t i : visible) {
      centers.push_back(rotate(surf.points[i]) * s + t);
      normals.push_back(rotate(surf.normals[i]));
      colors.push_back(surf.colors[i]);
    }
  } else {
    for (std::size_t i = 0; i < surf.size(); ++i) {
      const V3v c = rotate(surf.points[i]) * s + t;
      const V3v n = rotate(surf.normals[i]);
      if (to_eigen(n).dot(to_eigen(c)) < 0.0) {
        visible.push_back(static_cast<std::uint32_t>(i));
        centers.push_back(c);
        normals.push_back(n);
        colors.push_back(surf.colors[i]);
      }
    }
  }

  ObjectiveValue out;
  out.loss_2d = ad::Var(0.0);
  out.loss_3d = ad::Var(0.0);
  std::vector<IndexPair> pairs_2d, pairs_3d;
  Fragments fragments;

  if (flags.use_2d) {
    DiffDiscs discs{centers, normals, colors, s * surf.diameter};
    const DiffRender r =
        render_diff(discs, problem_.camera, problem_.render, replay ? &replay->fragments : nullptr);
    if (replay) {
      pairs_2d = replay->pairs_2d;
    } else {
      std::vector<Vec3> q(r.colors.size());
      for (std::size_t k = 0; k < q.size(); ++k) q[k] = to_eigen(r.colors[k]);
      const bool spatial = problem_.nocs_2d == AlignmentProblem::Nocs2d::kSpatial;
      for (const auto& [k, j] : match_nearest(q, predicted_index_, problem_.nocs_threshold)) {
        const std::uint32_t px = r.covered_pixels[k];
        if (!spatial) {
          pairs_2d.emplace_back(px, predicted_pixels_[j]);
        } else if (problem_.predicted.valid[px]) {
          pairs_2d.emplace_back(px, px);
        }
      }
    }
    std::vector<IndexPair> slot_pairs;
    slot_pairs.reserve(pairs_2d.size());
    for (const auto& [px, j] : pairs_2d) {
      const std::int32_t slot = r.slot.at(px);
      if (slot < 0) throw UsageError("AlignmentObjective: replayed pixel is not covered");
      slot_pairs.emplace_back(static_cast<std::uint32_t>(slot), j);
    }
    out.loss_2d = mean_pair_distance(r.colors, problem_.predicted.colors, slot_pairs);
    out.count_2d = pairs_2d.size();
    out.empty_2d = pairs_2d.empty();
    fragments = r.fragments;
  }

  if (flags.use_3d) {
    if (replay) {
      pairs_3d = replay->pairs_3d;
    } else {
      std::vector<Vec3> q(centers.size());
      for (std::size_t k = 0; k < q.size(); ++k) q[k] = to_eigen(centers[k]);
      pairs_3d = match_nearest(q, lidar_index_, problem_.lidar_threshold);
    }
    out.loss_3d = mean_pair_distance(centers, problem_.lidar, pairs_3d);
    out.count_3d = pairs_3d.size();
    out.empty_3d = pairs_3d.empty();
  }

  out.total = out.loss_2d + out.loss_3d;
  if (record) {
    record->band = surf.grid_index;
    record->visible = std::move(visible);
    record->fragments = std::move(fragments);
    record->pairs_2d = std::move(pairs_2d);
    record->pairs_3d = std::move(pairs_3d);
  }
  return out;
}

std::vector<double> pack_params(const SimilarityTransform& pose, const LatentCode& z) {
  return {0.0, 0.0, 0.0, pose.t.x(), pose.t.y(), pose.t.z(), pose.s, z[0], z[1], z[2]};
}

ad::GradCheckResult check_objective_gradient(const AlignmentObjective& objective, const SimilarityTransform& pose,
                                             const LatentCode& z, const LossFlags& flags, double h) {
  const std::vector<double> x0 = pack_params(pose, z);
  LossStructure structure;
  {
    ad::Tape tape;
    const std::vector<ad::Var> v = tape.variables(x0);
    objective.evaluate(pose.R, v, flags, &structure);
  }
  auto f = [&](ad::Tape&, std::span<const ad::Var> v) {
    return objective.evaluate(pose.R, v, flags, nullptr, &structure).total;
  };
  return ad::grad_check(f, x0, h);
}

// ---- refinement ----

namespace {

struct Adam {
  static constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;
  double m[6] = {};
  double v[6] = {};
  int step = 0;

  // Returns the parameter increment for gradient g.
  std::array<double, 6> update(const std::array<double, 6>& g, double lr) {
    ++step;
    std::array<double, 6> delta{};
    const double c1 = 1.0 - std::pow(kB1, step);
    const double c2 = 1.0 - std::pow(kB2, step);
    for (int i = 0; i < 6; ++i) {
      m[i] = kB1 * m[i] + (1.0 - kB1) * g[i];
      v[i] = kB2 * v[i] + (1.0 - kB2) * g[i] * g[i];
      delta[i] = -lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
    return delta;
  }
};

}  // namespace

RefineResult refine(const AlignmentObjective& objective, const SimilarityTransform& init, const LatentCode& z0,
                    const RefineConfig& config) {
  if (config.iterations < 0 || !(config.pose_lr > 0.0) || !(config.scale_lr > 0.0) || !(config.shape_lr > 0.0)) {
    throw UsageError("refine: iterations must be >= 0 and learning rates positive");
  }
  init.validate();
  RefineResult result;
  result.pose = init;
  result.z = z0;

  Mat3 R = init.R;
  Vec3 t = init.t;
  double s = init.s;
  Vec3 z = z0.vec();
  Adam adam;
  double best_total = std::numeric_limits<double>::infinity();

  for (int it = 0; it <= config.iterations; ++it) {
    ad::Tape tape;
    const std::vector<double> x = {0.0, 0.0, 0.0, t.x(), t.y(), t.z(), s, z.x(), z.y(), z.z()};
    const std::vector<ad::Var> v = tape.variables(x);
    ObjectiveValue value;
    try {
      value = objective.evaluate(R, v, config.loss);
    } catch (const DegenerateShapeError&) {
      result.failed = true;
      break;
    }
    TraceRow row{it, value.loss_2d.value(), value.loss_3d.value(), value.count_2d, value.count_3d};
    result.trace.push_back(row);
    const double total = value.total.value();
    if (!std::isfinite(total)) {
      result.failed = true;
      break;
    }
    const bool supported = (!config.loss.use_2d || !value.empty_2d) && (!config.loss.use_3d || !value.empty_3d);
    if (supported && (total < best_total || !config.keep_best)) {
      best_total = total;
      result.best_iteration = it;
      result.pose.R = R;
      result.pose.t = t;
      result.pose.s = s;
      result.z = LatentCode::from(z);
    }
    if (it == config.iterations) break;
    if (value.total.is_constant()) continue;

    const ad::Adjoints adj = tape.backward(value.total);
    std::array<double, 6> g{};
    for (int k = 0; k < 3; ++k) {
      g[k] = config.optimize_rotation ? adj[v[k]] : 0.0;
      g[3 + k] = config.optimize_translation ? adj[v[3 + k]] : 0.0;
    }
    const std::array<double, 6> delta = adam.update(g, config.pose_lr);
    if (config.optimize_rotation) R = exp_so3(Vec3(delta[0], delta[1], delta[2])) * R;
    t += Vec3(delta[3], delta[4], delta[5]);
    if (config.optimize_scale) s -= config.scale_lr * adj[v[6]];
    if (config.optimize_shape) {
      const Vec3 gz(adj[v[7]], adj[v[8]], adj[v[9]]);
      z = project_latent(z - config.shape_lr * gz).vec();
    }
    if (!(s > 0.0) || !std::isfinite(s) || !t.allFinite() || !R.allFinite()) {
      result.failed = true;
      break;
    }
  }
  return result;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace) {
  out << "iteration,loss_2d,loss_3d,c2d,c3d\n";
  out << std::setprecision(12);
  for (const TraceRow& r : trace) {
    out << r.iteration << "," << r.loss_2d << "," << r.loss_3d << "," << r.count_2d << "," << r.count_3d << "\n";
  }
}

}  // namespace sdfal
