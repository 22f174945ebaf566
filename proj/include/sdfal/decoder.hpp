#pragma once

// Small fully-connected SDF decoder f(x, z) -> s: input (x, z) in R^6, tanh
// hidden layers, linear scalar output. Trained auto-decoder style on clamped
// SDF samples with latent codes projected back to the unit sphere after every
// step.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sdfal/vec.hpp"

namespace sdfal {

class TinyDecoder {
 public:
  struct Layer {
    int in = 0;
    int out = 0;
    std::vector<double> weights;  // row-major out x in
    std::vector<double> bias;
  };

  TinyDecoder() = default;
  explicit TinyDecoder(std::vector<Layer> layers);

  // Xavier-style uniform initialization, deterministic in seed.
  static TinyDecoder initialize(const std::vector<int>& hidden, std::uint64_t seed);

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }

  template <class T>
  T forward(const V3<T>& x, const std::array<T, 3>& z) const;
  double forward(const Vec3& x, const Vec3& z) const;

  // Versioned text format with hex-float weights; round trip is bit-exact.
  void save(std::ostream& out) const;
  static TinyDecoder load(std::istream& in);

  friend bool operator==(const TinyDecoder& a, const TinyDecoder& b);

 private:
  std::vector<Layer> layers_;
};

struct DecoderSample {
  Vec3 x;
  Vec3 z;
  double s = 0.0;
};

struct DecoderTrainConfig {
  std::vector<int> hidden{32, 32};
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 2e-3;
  double latent_learning_rate = 1e-3;
  double clamp = 0.1;
  bool optimize_latents = true;
  std::uint64_t seed = 0;
};

struct DecoderTrainResult {
  TinyDecoder decoder;
  // Distinct input latents and the codes they were refined into.
  std::vector<Vec3> input_latents;
  std::vector<Vec3> learned_latents;
  std::vector<double> epoch_loss;

  // Learned code for an input latent (the input itself if unseen).
  Vec3 code_for(const Vec3& z) const;
};

// Throws TrainingError if the loss becomes non-finite.
DecoderTrainResult train_decoder(std::span<const DecoderSample> samples,
                                 const DecoderTrainConfig& config);

// Mean |clamp(f) - clamp(s)| over samples, using the learned codes.
double decoder_mae(const DecoderTrainResult& result, std::span<const DecoderSample> samples,
                   double clamp);

// ---- template implementation ----

template <class T>
T TinyDecoder::forward(const V3<T>& x, const std::array<T, 3>& z) const {
  using std::tanh;
  std::vector<T> act = {x.x, x.y, x.z, z[0], z[1], z[2]};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    std::vector<T> next;
    next.reserve(layer.out);
    for (int o = 0; o < layer.out; ++o) {
      std::span<const double> row(layer.weights.data() + static_cast<std::size_t>(o) * layer.in,
                                  layer.in);
      T v;
      if constexpr (std::is_same_v<T, double>) {
        double acc = layer.bias[o];
        for (int i = 0; i < layer.in; ++i) acc += row[i] * act[i];
        v = acc;
      } else {
        v = ad::linear_combination(row, act) + layer.bias[o];
      }
      next.push_back(l + 1 < layers_.size() ? tanh(v) : v);
    }
    act = std::move(next);
  }
  return act.front();
}

}  // namespace sdfal
