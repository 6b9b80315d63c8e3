#pragma once

// Small fully connected networks: forward pass, exact reverse-mode gradients,
// optional layer normalization on hidden layers, and Adam.
//
// Batches are column-major: each column of an input matrix is one sample.

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "dynameta/common.hpp"

namespace dynameta {

enum class Activation { Relu, Linear };

struct Layer {
  Matrix weight;  // out x in
  Vector bias;
  Vector gain;    // layer-norm parameters, empty when not normalized
  Vector offset;
  Activation activation = Activation::Linear;
  bool normalized = false;

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
};

struct Mlp {
  std::vector<Layer> layers;
  bool layer_norm = false;

  int input_dim() const { return layers.front().in_dim(); }
  int output_dim() const { return layers.back().out_dim(); }

  std::vector<int> layer_sizes() const {
    std::vector<int> sizes{input_dim()};
    for (const auto& l : layers) sizes.push_back(l.out_dim());
    return sizes;
  }
};

/// Gradients share the network's shape.
using Gradients = Mlp;

inline constexpr double kLayerNormEps = 1e-5;

/// Applies `f` to matching parameter tensors of every network passed, layer by
/// layer in the order weight, bias, gain, offset.
template <class F, class First, class... Rest>
void for_each_param(F&& f, First& first, Rest&... rest) {
  for (std::size_t i = 0; i < first.layers.size(); ++i) {
    f(first.layers[i].weight, rest.layers[i].weight...);
    f(first.layers[i].bias, rest.layers[i].bias...);
    if (first.layers[i].normalized) {
      f(first.layers[i].gain, rest.layers[i].gain...);
      f(first.layers[i].offset, rest.layers[i].offset...);
    }
  }
}

inline Mlp zeros_like(const Mlp& net) {
  Mlp out = net;
  for_each_param([](auto& p) { p.setZero(); }, out);
  return out;
}

inline std::size_t param_count(const Mlp& net) {
  std::size_t n = 0;
  for_each_param([&](const auto& p) { n += static_cast<std::size_t>(p.size()); }, net);
  return n;
}

inline Vector flatten(const Mlp& net) {
  Vector flat(static_cast<Eigen::Index>(param_count(net)));
  Eigen::Index at = 0;
  for_each_param(
      [&](const auto& p) {
        flat.segment(at, p.size()) = p.reshaped();
        at += p.size();
      },
      net);
  return flat;
}

inline void unflatten(Mlp& net, const Vector& flat) {
  require(flat.size() == static_cast<Eigen::Index>(param_count(net)), "flat parameter size mismatch");
  Eigen::Index at = 0;
  for_each_param(
      [&](auto& p) {
        p.reshaped() = flat.segment(at, p.size());
        at += p.size();
      },
      net);
}

inline std::vector<double> to_std_vector(const Vector& v) { return {v.begin(), v.end()}; }

inline bool same_params(const Mlp& a, const Mlp& b) {
  return a.layer_sizes() == b.layer_sizes() && flatten(a) == flatten(b);
}

inline Mlp mlp_init(const std::vector<int>& sizes, bool layer_norm, Rng& rng) {
  require(sizes.size() >= 2, "mlp_init needs at least input and output sizes");
  for (int s : sizes) require(s >= 1, "layer sizes must be positive");
  Mlp net;
  net.layer_norm = layer_norm;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool head = i + 2 == sizes.size();
    Layer l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[i]));
    l.weight.resize(sizes[i + 1], sizes[i]);
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = uniform(rng, -bound, bound);
    l.bias = Vector::Zero(sizes[i + 1]);
    l.activation = head ? Activation::Linear : Activation::Relu;
    l.normalized = layer_norm && !head;
    if (l.normalized) {
      l.gain = Vector::Ones(sizes[i + 1]);
      l.offset = Vector::Zero(sizes[i + 1]);
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

/// Intermediate values of one forward pass, kept for backprop.
struct ForwardCache {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> normalized;   // xhat per normalized layer
  std::vector<Eigen::RowVectorXd> inv_std;
  std::vector<Matrix> preact;       // value fed to the activation
  Matrix output;
};

namespace detail {

inline void layer_forward(const Layer& l, const Matrix& x, Matrix& preact, Matrix* xhat_out,
                          Eigen::RowVectorXd* inv_std_out) {
  Matrix z = l.weight * x;
  z.colwise() += l.bias;
  if (l.normalized) {
    const Eigen::RowVectorXd mean = z.colwise().mean();
    z.rowwise() -= mean;
    const Eigen::RowVectorXd var = z.array().square().colwise().mean();
    const Eigen::RowVectorXd inv = (var.array() + kLayerNormEps).rsqrt();
    z.array().rowwise() *= inv.array();
    if (xhat_out) *xhat_out = z;
    if (inv_std_out) *inv_std_out = inv;
    z.array().colwise() *= l.gain.array();
    z.colwise() += l.offset;
  }
  preact = std::move(z);
}

inline Matrix activate(const Layer& l, const Matrix& preact) {
  if (l.activation == Activation::Relu) return preact.cwiseMax(0.0);
  return preact;
}

}  // namespace detail

inline Matrix forward(const Mlp& net, const Matrix& inputs) {
  require(!net.layers.empty(), "forward on empty network");
  require(inputs.rows() == net.input_dim(), "forward: input width does not match network");
  Matrix x = inputs;
  Matrix pre;
  for (const auto& l : net.layers) {
    detail::layer_forward(l, x, pre, nullptr, nullptr);
    x = detail::activate(l, pre);
  }
  return x;
}

inline ForwardCache forward_cached(const Mlp& net, const Matrix& inputs) {
  require(!net.layers.empty(), "forward on empty network");
  require(inputs.rows() == net.input_dim(), "forward: input width does not match network");
  ForwardCache cache;
  const std::size_t n = net.layers.size();
  cache.inputs.resize(n);
  cache.normalized.resize(n);
  cache.inv_std.resize(n);
  cache.preact.resize(n);
  Matrix x = inputs;
  for (std::size_t i = 0; i < n; ++i) {
    const Layer& l = net.layers[i];
    cache.inputs[i] = x;
    detail::layer_forward(l, x, cache.preact[i], &cache.normalized[i], &cache.inv_std[i]);
    x = detail::activate(l, cache.preact[i]);
  }
  cache.output = std::move(x);
  return cache;
}

/// Reverse pass given dLoss/dOutput.
inline Gradients backprop(const Mlp& net, const ForwardCache& cache, Matrix grad_out) {
  Gradients g = zeros_like(net);
  Matrix delta = std::move(grad_out);
  for (std::size_t k = net.layers.size(); k-- > 0;) {
    const Layer& l = net.layers[k];
    Layer& gl = g.layers[k];
    if (l.activation == Activation::Relu) delta.array() *= (cache.preact[k].array() > 0.0).cast<double>();
    if (l.normalized) {
      const Matrix& xhat = cache.normalized[k];
      gl.gain = (delta.array() * xhat.array()).rowwise().sum();
      gl.offset = delta.rowwise().sum();
      Matrix dxhat = delta.array().colwise() * l.gain.array();
      const Eigen::RowVectorXd mean_d = dxhat.colwise().mean();
      const Eigen::RowVectorXd mean_dx = (dxhat.array() * xhat.array()).colwise().mean();
      dxhat.rowwise() -= mean_d;
      dxhat.array() -= xhat.array().rowwise() * mean_dx.array();
      dxhat.array().rowwise() *= cache.inv_std[k].array();
      delta = std::move(dxhat);
    }
    gl.weight.noalias() = delta * cache.inputs[k].transpose();
    gl.bias = delta.rowwise().sum();
    if (k > 0) delta = l.weight.transpose() * delta;
  }
  return g;
}

enum class LossKind { MeanSquaredError, BinaryCrossEntropyWithLogits };

/// Loss target. An optional mask (same shape, 0/1 weights) restricts the loss
/// to selected outputs; the mean is taken over the selected entries.
struct LossSpec {
  LossKind kind = LossKind::MeanSquaredError;
  Matrix target;
  Matrix mask;
};

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

/// Mean loss of `output` against `spec` and its gradient w.r.t. `output`.
inline std::pair<double, Matrix> loss_gradient(const Matrix& output, const LossSpec& spec) {
  require(spec.target.rows() == output.rows() && spec.target.cols() == output.cols(),
          "loss target shape does not match network output");
  const bool masked = spec.mask.size() > 0;
  if (masked)
    require(spec.mask.rows() == output.rows() && spec.mask.cols() == output.cols(), "loss mask shape mismatch");
  const double count = masked ? spec.mask.sum() : static_cast<double>(output.size());
  require(count > 0.0, "loss over zero entries");

  Matrix grad(output.rows(), output.cols());
  double total = 0.0;
  if (spec.kind == LossKind::MeanSquaredError) {
    const Matrix diff = output - spec.target;
    grad = 2.0 * diff / count;
    if (masked) {
      grad.array() *= spec.mask.array();
      total = (diff.array().square() * spec.mask.array()).sum();
    } else {
      total = diff.squaredNorm();
    }
  } else {
    for (Eigen::Index c = 0; c < output.cols(); ++c) {
      for (Eigen::Index r = 0; r < output.rows(); ++r) {
        const double w = masked ? spec.mask(r, c) : 1.0;
        const double z = output(r, c), t = spec.target(r, c);
        total += w * (detail::softplus(z) - t * z);
        grad(r, c) = w * (detail::sigmoid(z) - t) / count;
      }
    }
  }
  return {total / count, std::move(grad)};
}

inline LossAndGrad backward(const Mlp& net, const Matrix& inputs, const LossSpec& spec) {
  const ForwardCache cache = forward_cached(net, inputs);
  auto [loss, grad_out] = loss_gradient(cache.output, spec);
  if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
  return {loss, backprop(net, cache, std::move(grad_out))};
}

/// Loss only, no gradients.
inline double evaluate_loss(const Mlp& net, const Matrix& inputs, const LossSpec& spec) {
  return loss_gradient(forward(net, inputs), spec).first;
}

struct AdamState {
  Mlp m;
  Mlp v;
  long t = 0;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam(const Mlp& net, double learning_rate) {
  AdamState s;
  s.m = zeros_like(net);
  s.v = zeros_like(net);
  s.learning_rate = learning_rate;
  return s;
}

inline void adam_step(AdamState& opt, Mlp& net, const Gradients& grads) {
  require(net.layer_sizes() == grads.layer_sizes() && opt.m.layer_sizes() == net.layer_sizes(),
          "adam_step: shape mismatch");
  ++opt.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.t));
  const double b1 = opt.beta1, b2 = opt.beta2, lr = opt.learning_rate, eps = opt.eps;
  for_each_param(
      [&](auto& p, const auto& g, auto& m, auto& v) {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      net, grads, opt.m, opt.v);
}

inline Mlp copy_params(const Mlp& src) { return src; }

// ---------------------------------------------------------------------------
// Checkpoint format: {layer_sizes, layer_norm, activations, weights, biases,
// gains, offsets}; weights are row-major numeric arrays, one per layer.

inline nlohmann::json mlp_to_json(const Mlp& net) {
  using nlohmann::json;
  json weights = json::array(), biases = json::array(), gains = json::array(), offsets = json::array(),
       acts = json::array();
  for (const auto& l : net.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    weights.push_back(w);
    biases.push_back(std::vector<double>(l.bias.begin(), l.bias.end()));
    gains.push_back(std::vector<double>(l.gain.begin(), l.gain.end()));
    offsets.push_back(std::vector<double>(l.offset.begin(), l.offset.end()));
    acts.push_back(l.activation == Activation::Relu ? "relu" : "linear");
  }
  return json{{"layer_sizes", net.layer_sizes()}, {"layer_norm", net.layer_norm}, {"activations", acts},
              {"weights", weights},             {"biases", biases},            {"gains", gains},
              {"offsets", offsets}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
  require(sizes.size() >= 2, "checkpoint: bad layer_sizes");
  Mlp net;
  net.layer_norm = j.at("layer_norm").get<bool>();
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  const auto& gains = j.at("gains");
  const auto& offsets = j.at("offsets");
  const auto& acts = j.at("activations");
  const std::size_t n = sizes.size() - 1;
  require(weights.size() == n && biases.size() == n && acts.size() == n, "checkpoint: layer count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    Layer l;
    const auto w = weights[i].get<std::vector<double>>();
    require(w.size() == static_cast<std::size_t>(sizes[i] * sizes[i + 1]), "checkpoint: weight size mismatch");
    l.weight.resize(sizes[i + 1], sizes[i]);
    for (int r = 0; r < sizes[i + 1]; ++r)
      for (int c = 0; c < sizes[i]; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * sizes[i] + c)];
    const auto b = biases[i].get<std::vector<double>>();
    require(b.size() == static_cast<std::size_t>(sizes[i + 1]), "checkpoint: bias size mismatch");
    l.bias = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
    const auto act = acts[i].get<std::string>();
    require(act == "relu" || act == "linear", "checkpoint: unknown activation " + act);
    l.activation = act == "relu" ? Activation::Relu : Activation::Linear;
    const auto gv = gains[i].get<std::vector<double>>();
    const auto ov = offsets[i].get<std::vector<double>>();
    l.normalized = !gv.empty();
    if (l.normalized) {
      require(gv.size() == b.size() && ov.size() == b.size(), "checkpoint: layer-norm size mismatch");
      l.gain = Eigen::Map<const Vector>(gv.data(), static_cast<Eigen::Index>(gv.size()));
      l.offset = Eigen::Map<const Vector>(ov.data(), static_cast<Eigen::Index>(ov.size()));
    }
    net.layers.push_back(std::move(l));
  }
  require(net.layers.back().activation == Activation::Linear, "checkpoint: head layer must be linear");
  return net;
}

inline nlohmann::json adam_to_json(const AdamState& s) {
  return nlohmann::json{{"t", s.t},
                        {"learning_rate", s.learning_rate},
                        {"m", to_std_vector(flatten(s.m))},
                        {"v", to_std_vector(flatten(s.v))}};
}

inline AdamState adam_from_json(const nlohmann::json& j, const Mlp& net) {
  AdamState s = make_adam(net, j.at("learning_rate").get<double>());
  s.t = j.at("t").get<long>();
  const auto m = j.at("m").get<std::vector<double>>();
  const auto v = j.at("v").get<std::vector<double>>();
  unflatten(s.m, Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size())));
  unflatten(s.v, Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  return s;
}

}  // namespace dynameta
