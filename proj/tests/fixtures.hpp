#pragma once

// Synthetic fixtures shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Geometry>

#include "sdfal/transform.hpp"

namespace fixture {

using sdfal::Mat3;
using sdfal::SimilarityTransform;
using sdfal::Vec3;

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

// Point pairs under a known similarity. Sources are uniform in the unit
// model cube; the first `outliers` targets are replaced by uniform points in
// the posed bounding box of that cube (gross outliers inside the object's
// extent), the rest are exact images plus isotropic Gaussian noise.
struct PairSet {
  SimilarityTransform truth;
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  std::vector<bool> outlier;
};

inline PairSet similarity_pairs(std::uint64_t seed, int count, int outliers, double noise = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::normal_distribution<double> g(0.0, 1.0);
  PairSet out;
  out.truth.R = random_rotation(rng);
  out.truth.s = 3.5 + 1.5 * (u(rng) + 0.5);
  out.truth.t = Vec3(10.0 * u(rng), 1.0 + u(rng), 15.0 + 10.0 * u(rng));
  // The posed unit cube lies within a sphere of radius s * sqrt(3) / 2.
  const double reach = out.truth.s * std::sqrt(3.0) / 2.0;
  for (int i = 0; i < count; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    out.source.push_back(p);
    const bool bad = i < outliers;
    out.outlier.push_back(bad);
    if (bad) {
      out.target.push_back(out.truth.t + 2.0 * reach * Vec3(u(rng), u(rng), u(rng)));
    } else {
      out.target.push_back(out.truth.apply(p) + noise * Vec3(g(rng), g(rng), g(rng)));
    }
  }
  return out;
}

}  // namespace fixture
