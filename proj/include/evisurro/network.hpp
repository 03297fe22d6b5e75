#ifndef EVISURRO_NETWORK_HPP_
#define EVISURRO_NETWORK_HPP_

// Dense regressor from a parameter vector to an EvidentialField.
//
// Trunk: fully connected layers with ELU activations.  Head: one linear
// layer producing 4 * N pre-activations laid out channel-major
// ([gamma_0..gamma_{N-1}, nu_0.., alpha_0.., beta_0..]) followed by
//   gamma = tanh(z0), nu = softplus(z1), alpha = 1 + softplus(z2), beta = softplus(z3).
//
// All weights live in one flat buffer (per layer: W column-major, then b),
// which is what the optimizer and the checkpoint format operate on.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evisurro/errors.hpp"
#include "evisurro/evidential.hpp"
#include "evisurro/numeric.hpp"

namespace evisurro {

struct NetConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_sizes = {64, 128, 256};
  GridShape grid_shape{{32, 32}};
  std::uint64_t seed = 0;

  bool valid() const {
    if (input_dim == 0 || hidden_sizes.empty() || grid_shape.size() == 0) return false;
    for (auto h : hidden_sizes)
      if (h == 0) return false;
    return true;
  }
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

inline double elu(double z) { return z > 0.0 ? z : std::expm1(z); }
inline double elu_grad(double z) { return z > 0.0 ? 1.0 : std::exp(z); }

// Uniform in [-bound, bound) from the top 53 bits of the generator.
inline double uniform_sym(std::mt19937_64& rng, double bound) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return (2.0 * u - 1.0) * bound;
}

}  // namespace detail

// Evidential parameters from the four head pre-activations.
inline EvidentialParams apply_head(double z0, double z1, double z2, double z3) {
  return {std::tanh(z0), softplus(z1), 1.0 + softplus(z2), softplus(z3)};
}

class EvidentialNet {
 public:
  using Matrix = Eigen::MatrixXd;
  using MatMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  // Per-layer activations kept for the backward pass.
  struct Cache {
    std::vector<Matrix> inputs;  // input to each layer (d x B, h1 x B, ...)
    std::vector<Matrix> pre;     // pre-activation of each layer
  };

  EvidentialNet() = default;

  // Deterministic in config.seed.  Hidden layers: U(+-sqrt(6/fan_in)); head
  // weights scaled down by 0.01 and zero biases so the head starts near
  // z = 0, i.e. (gamma, nu, alpha, beta) ~ (0, ln 2, 1 + ln 2, ln 2).
  static EvidentialNet init(const NetConfig& config) {
    if (!config.valid()) throw DomainError("EvidentialNet::init: invalid NetConfig");
    EvidentialNet net;
    net.config_ = config;
    net.build_layout();
    std::mt19937_64 rng(config.seed);
    for (std::size_t l = 0; l < net.layers_.size(); ++l) {
      const auto& L = net.layers_[l];
      const bool head = l + 1 == net.layers_.size();
      const double bound = std::sqrt(6.0 / static_cast<double>(L.in)) * (head ? 0.01 : 1.0);
      for (std::size_t i = 0; i < L.in * L.out; ++i)
        net.params_[L.w_offset + i] = detail::uniform_sym(rng, bound);
      for (std::size_t i = 0; i < L.out; ++i) net.params_[L.b_offset + i] = 0.0;
    }
    return net;
  }

  // Rebuilds a net from a flat parameter buffer (checkpoint loading).
  static EvidentialNet from_parameters(const NetConfig& config, std::vector<double> params) {
    if (!config.valid()) throw DomainError("EvidentialNet: invalid NetConfig");
    EvidentialNet net;
    net.config_ = config;
    net.build_layout();
    if (params.size() != net.params_.size())
      throw ShapeError("EvidentialNet: parameter count " + std::to_string(params.size()) +
                       " does not match layout " + std::to_string(net.params_.size()));
    net.params_ = std::move(params);
    return net;
  }

  const NetConfig& config() const { return config_; }
  std::size_t grid_size() const { return config_.grid_shape.size(); }
  std::size_t output_dim() const { return 4 * grid_size(); }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }

  // Head pre-activations for a batch of inputs (columns of `x`).
  Matrix forward_raw(const Matrix& x, Cache* cache = nullptr) const {
    if (static_cast<std::size_t>(x.rows()) != config_.input_dim)
      throw ShapeError("forward: expected input of length " +
                       std::to_string(config_.input_dim) + ", got " +
                       std::to_string(x.rows()));
    if (cache) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = weight(l) * h;
      z.colwise() += bias(l);
      if (cache) {
        cache->inputs.push_back(h);
        cache->pre.push_back(z);
      }
      if (l + 1 == layers_.size()) return z;
      h = z.unaryExpr(&detail::elu);
    }
    return h;
  }

  // Splits a column of head pre-activations into an EvidentialField.
  EvidentialField head_field(const Eigen::Ref<const Eigen::VectorXd>& z) const {
    const std::size_t n = grid_size();
    EvidentialField f{config_.grid_shape, std::vector<EvidentialParams>(n)};
    for (std::size_t i = 0; i < n; ++i)
      f.params[i] = apply_head(z[i], z[n + i], z[2 * n + i], z[3 * n + i]);
    return f;
  }

  EvidentialField forward(std::span<const double> x) const {
    if (x.size() != config_.input_dim)
      throw ShapeError("forward: expected input of length " +
                       std::to_string(config_.input_dim) + ", got " +
                       std::to_string(x.size()));
    for (double v : x)
      if (!std::isfinite(v)) throw DomainError("forward: non-finite input");
    Matrix xm = ConstVecMap(x.data(), static_cast<Eigen::Index>(x.size()));
    return head_field(forward_raw(xm).col(0));
  }

  // Converts per-element dL/d(gamma, nu, alpha, beta) into dL/dz for the
  // head pre-activations `z` (4N x B), in place on `upstream`.
  static void head_backward(const Matrix& z, Matrix& upstream, std::size_t n) {
    for (Eigen::Index col = 0; col < z.cols(); ++col) {
      for (std::size_t i = 0; i < n; ++i) {
        const double t = std::tanh(z(i, col));
        upstream(i, col) *= 1.0 - t * t;
        upstream(n + i, col) *= sigmoid(z(n + i, col));
        upstream(2 * n + i, col) *= sigmoid(z(2 * n + i, col));
        upstream(3 * n + i, col) *= sigmoid(z(3 * n + i, col));
      }
    }
  }

  // Reverse pass given dL/dz at the head (4N x B).  Gradients are added
  // into `grad`, which must have parameter_count() entries.
  void backward_raw(const Cache& cache, Matrix dz, std::span<double> grad) const {
    if (grad.size() != params_.size()) throw ShapeError("backward: gradient buffer size");
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& L = layers_[l];
      MatMap gw(grad.data() + L.w_offset, static_cast<Eigen::Index>(L.out),
                static_cast<Eigen::Index>(L.in));
      Eigen::Map<Eigen::VectorXd> gb(grad.data() + L.b_offset, static_cast<Eigen::Index>(L.out));
      gw.noalias() += dz * cache.inputs[l].transpose();
      gb += dz.rowwise().sum();
      if (l == 0) break;
      Matrix dh = weight(l).transpose() * dz;
      dz = dh.cwiseProduct(cache.pre[l - 1].unaryExpr(&detail::elu_grad));
    }
  }

  // Parameter gradients for one input given per-element upstream gradients
  // dL/d(gamma, nu, alpha, beta).
  std::vector<double> backward(std::span<const double> x,
                               std::span<const ParamGrad> upstream) const {
    const std::size_t n = grid_size();
    if (upstream.size() != n)
      throw ShapeError("backward: upstream has " + std::to_string(upstream.size()) +
                       " elements, grid has " + std::to_string(n));
    if (x.size() != config_.input_dim) throw ShapeError("backward: input length mismatch");
    Matrix xm = ConstVecMap(x.data(), static_cast<Eigen::Index>(x.size()));
    Cache cache;
    const Matrix z = forward_raw(xm, &cache);
    Matrix dz(static_cast<Eigen::Index>(4 * n), 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 4; ++c) dz(static_cast<Eigen::Index>(c * n + i), 0) = upstream[i][c];
    head_backward(z, dz, n);
    std::vector<double> grad(params_.size(), 0.0);
    backward_raw(cache, std::move(dz), grad);
    return grad;
  }

 private:
  struct Layer {
    std::size_t in = 0, out = 0;
    std::size_t w_offset = 0, b_offset = 0;
  };

  void build_layout() {
    layers_.clear();
    std::size_t offset = 0;
    std::size_t in = config_.input_dim;
    auto add = [&](std::size_t out) {
      Layer L{in, out, offset, offset + in * out};
      offset += in * out + out;
      layers_.push_back(L);
      in = out;
    };
    for (auto h : config_.hidden_sizes) add(h);
    add(4 * config_.grid_shape.size());
    params_.assign(offset, 0.0);
  }

  ConstMatMap weight(std::size_t l) const {
    const auto& L = layers_[l];
    return ConstMatMap(params_.data() + L.w_offset, static_cast<Eigen::Index>(L.out),
                       static_cast<Eigen::Index>(L.in));
  }
  ConstVecMap bias(std::size_t l) const {
    const auto& L = layers_[l];
    return ConstVecMap(params_.data() + L.b_offset, static_cast<Eigen::Index>(L.out));
  }

  NetConfig config_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

}  // namespace evisurro

#endif  // EVISURRO_NETWORK_HPP_
