#include "sdfal/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "sdfal/errors.hpp"

namespace sdfal {

namespace {

constexpr const char* kDecoderSchema = "sdfal/decoder/v1";

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

double read_hex(std::istream& in) {
  std::string token;
  if (!(in >> token)) throw DataError("decoder file: unexpected end of input");
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') throw DataError("decoder file: bad number '" + token + "'");
  return v;
}

struct AdamState {
  VecX m, v;
  int step = 0;
  void resize(Eigen::Index n) {
    m = VecX::Zero(n);
    v = VecX::Zero(n);
  }
  // In-place Adam update of params given grad.
  void update(Eigen::Ref<VecX> params, const VecX& grad, double lr) {
    constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;
    ++step;
    m = kB1 * m + (1.0 - kB1) * grad;
    v = kB2 * v + (1.0 - kB2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(kB1, step);
    const double c2 = 1.0 - std::pow(kB2, step);
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
  }
};

}  // namespace

TinyDecoder::TinyDecoder(std::vector<Layer> layers) : layers_(std::move(layers)) {
  int expected_in = 6;
  for (const Layer& l : layers_) {
    if (l.in != expected_in || l.out <= 0 ||
        l.weights.size() != static_cast<std::size_t>(l.in) * l.out ||
        l.bias.size() != static_cast<std::size_t>(l.out)) {
      throw DataError("decoder: inconsistent layer shapes");
    }
    expected_in = l.out;
  }
  if (layers_.empty() || layers_.back().out != 1) throw DataError("decoder: output must be scalar");
}

TinyDecoder TinyDecoder::initialize(const std::vector<int>& hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  int in = 6;
  std::vector<int> widths = hidden;
  widths.push_back(1);
  for (int out : widths) {
    if (out <= 0) throw UsageError("decoder: layer widths must be positive");
    Layer layer;
    layer.in = in;
    layer.out = out;
    const double bound = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    layer.weights.resize(static_cast<std::size_t>(in) * out);
    for (double& w : layer.weights) w = dist(rng);
    layer.bias.assign(out, 0.0);
    layers.push_back(std::move(layer));
    in = out;
  }
  return TinyDecoder(std::move(layers));
}

double TinyDecoder::forward(const Vec3& x, const Vec3& z) const {
  return forward(V3d(x), std::array<double, 3>{z.x(), z.y(), z.z()});
}

void TinyDecoder::save(std::ostream& out) const {
  out << kDecoderSchema << "\n" << layers_.size() << "\n";
  out << std::hexfloat;
  for (const Layer& l : layers_) {
    out << l.in << " " << l.out << "\n";
    for (int o = 0; o < l.out; ++o) {
      for (int i = 0; i < l.in; ++i) {
        out << (i ? " " : "") << l.weights[static_cast<std::size_t>(o) * l.in + i];
      }
      out << "\n";
    }
    for (int o = 0; o < l.out; ++o) out << (o ? " " : "") << l.bias[o];
    out << "\n";
  }
  out << std::defaultfloat;
}

TinyDecoder TinyDecoder::load(std::istream& in) {
  std::string schema;
  if (!(in >> schema) || schema != kDecoderSchema) {
    throw DataError("decoder file: expected schema " + std::string(kDecoderSchema));
  }
  std::size_t count = 0;
  if (!(in >> count) || count == 0 || count > 64) throw DataError("decoder file: bad layer count");
  std::vector<Layer> layers(count);
  for (Layer& l : layers) {
    if (!(in >> l.in >> l.out) || l.in <= 0 || l.out <= 0 || l.in > 4096 || l.out > 4096) {
      throw DataError("decoder file: bad layer header");
    }
    l.weights.resize(static_cast<std::size_t>(l.in) * l.out);
    for (double& w : l.weights) w = read_hex(in);
    l.bias.resize(l.out);
    for (double& b : l.bias) b = read_hex(in);
  }
  return TinyDecoder(std::move(layers));
}

bool operator==(const TinyDecoder& a, const TinyDecoder& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& la = a.layers_[i];
    const auto& lb = b.layers_[i];
    if (la.in != lb.in || la.out != lb.out || la.weights != lb.weights || la.bias != lb.bias) {
      return false;
    }
  }
  return true;
}

Vec3 DecoderTrainResult::code_for(const Vec3& z) const {
  for (std::size_t i = 0; i < input_latents.size(); ++i) {
    if (input_latents[i] == z) return learned_latents[i];
  }
  return z;
}

DecoderTrainResult train_decoder(std::span<const DecoderSample> samples,
                                 const DecoderTrainConfig& config) {
  if (samples.empty()) throw UsageError("train_decoder: no samples");
  if (config.batch_size <= 0 || config.epochs < 0 || !(config.clamp > 0.0)) {
    throw UsageError("train_decoder: invalid configuration");
  }
  DecoderTrainResult result;
  result.decoder = TinyDecoder::initialize(config.hidden, config.seed);

  // Distinct latents become trainable codes.
  std::vector<int> code_of(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto it = std::find(result.input_latents.begin(), result.input_latents.end(), samples[i].z);
    if (it == result.input_latents.end()) {
      result.input_latents.push_back(samples[i].z);
      it = result.input_latents.end() - 1;
    }
    code_of[i] = static_cast<int>(it - result.input_latents.begin());
  }
  result.learned_latents = result.input_latents;

  auto& layers = result.decoder.mutable_layers();
  const std::size_t nl = layers.size();
  std::vector<MatX> W(nl);
  std::vector<VecX> B(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    W[l] = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        layers[l].weights.data(), layers[l].out, layers[l].in);
    B[l] = Eigen::Map<const VecX>(layers[l].bias.data(), layers[l].out);
  }
  std::vector<AdamState> adam_w(nl), adam_b(nl);
  for (std::size_t l = 0; l < nl; ++l) {
    adam_w[l].resize(W[l].size());
    adam_b[l].resize(B[l].size());
  }

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const double c = config.clamp;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const auto n = static_cast<Eigen::Index>(end - start);
      MatX input(6, n);
      VecX target(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const std::size_t idx = order[start + j];
        const Vec3& z = result.learned_latents[code_of[idx]];
        input.col(j) << samples[idx].x, z;
        target(j) = std::clamp(samples[idx].s, -c, c);
      }
      // Forward, keeping activations.
      std::vector<MatX> acts{input};
      for (std::size_t l = 0; l < nl; ++l) {
        MatX pre = (W[l] * acts.back()).colwise() + B[l];
        if (l + 1 < nl) pre = pre.array().tanh().matrix();
        acts.push_back(std::move(pre));
      }
      // L1 loss on clamped values. Its gradient vanishes wherever the
      // prediction saturates, also on the wrong side of the target, so the
      // step uses the one-sided form with the same minimizers: |p - t| for
      // targets inside the clamp band, a hinge at the bound otherwise.
      const Eigen::RowVectorXd pred = acts.back().row(0);
      MatX delta(1, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double p = pred(j);
        const double t = target(j);
        epoch_loss += std::abs(std::clamp(p, -c, c) - t);
        double g = 0.0;
        if (t >= c) {
          g = p < c ? -1.0 : 0.0;
        } else if (t <= -c) {
          g = p > -c ? 1.0 : 0.0;
        } else {
          g = p > t ? 1.0 : (p < t ? -1.0 : 0.0);
        }
        delta(0, j) = g / static_cast<double>(n);
      }
      // Backward.
      MatX grad_in;
      for (std::size_t l = nl; l-- > 0;) {
        const MatX gW = delta * acts[l].transpose();
        const VecX gB = delta.rowwise().sum();
        MatX back = W[l].transpose() * delta;
        if (l > 0) {
          back = back.cwiseProduct((1.0 - acts[l].array().square()).matrix());
        } else {
          grad_in = back;
        }
        Eigen::Map<VecX> wflat(W[l].data(), W[l].size());
        adam_w[l].update(wflat, Eigen::Map<const VecX>(gW.data(), gW.size()), config.learning_rate);
        adam_b[l].update(B[l], gB, config.learning_rate);
        delta = std::move(back);
      }
      if (config.optimize_latents) {
        for (Eigen::Index j = 0; j < n; ++j) {
          Vec3& z = result.learned_latents[code_of[order[start + j]]];
          z -= config.latent_learning_rate * grad_in.block<3, 1>(3, j);
        }
        for (Vec3& z : result.learned_latents) {
          const double nz = z.norm();
          if (nz > 0.0) z /= nz;
        }
      }
    }
    epoch_loss /= static_cast<double>(samples.size());
    if (!std::isfinite(epoch_loss)) {
      std::ostringstream msg;
      msg << "train_decoder: loss diverged at epoch " << epoch << " (lr " << config.learning_rate << ")";
      throw TrainingError(msg.str());
    }
    result.epoch_loss.push_back(epoch_loss);
  }

  for (std::size_t l = 0; l < nl; ++l) {
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        layers[l].weights.data(), layers[l].out, layers[l].in) = W[l];
    Eigen::Map<VecX>(layers[l].bias.data(), layers[l].out) = B[l];
  }
  return result;
}

double decoder_mae(const DecoderTrainResult& result, std::span<const DecoderSample> samples,
                   double clamp) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const DecoderSample& s : samples) {
    const double p = result.decoder.forward(s.x, result.code_for(s.z));
    total += std::abs(std::clamp(p, -clamp, clamp) - std::clamp(s.s, -clamp, clamp));
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace sdfal
