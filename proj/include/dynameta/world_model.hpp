#pragma once

// Learned deterministic forward model: state delta, reward, and terminal logit
// from (observation, one-hot action), each predicted by its own network.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dynameta/common.hpp"
#include "dynameta/dqn_agent.hpp"
#include "dynameta/envs.hpp"
#include "dynameta/nn.hpp"

namespace dynameta {

/// Per-feature standardization. Features with (near) zero spread keep scale 1.
struct Normalizer {
  Vector mean;
  Vector scale;

  static Normalizer fit(const Matrix& columns) {
    Normalizer n;
    n.mean = columns.rowwise().mean();
    const Matrix centered = columns.colwise() - n.mean;
    n.scale = (centered.array().square().rowwise().mean()).sqrt().matrix();
    for (Eigen::Index i = 0; i < n.scale.size(); ++i)
      if (!(n.scale(i) > 1e-8)) n.scale(i) = 1.0;
    return n;
  }

  Matrix apply(const Matrix& x) const { return (x.colwise() - mean).array().colwise() / scale.array(); }
  Matrix invert(const Matrix& z) const { return (z.array().colwise() * scale.array()).matrix().colwise() + mean; }
};

struct WorldModel {
  EnvConfig env;
  Mlp transition;
  Mlp reward;
  Mlp terminal;
  Normalizer input;  // observation part of the input; the one-hot is left raw
  Normalizer delta;
};

enum class StopReason { ValidationIncrease, EpochCap };

inline const char* to_string(StopReason r) {
  return r == StopReason::ValidationIncrease ? "validation_increase" : "epoch_cap";
}

struct SubnetReport {
  int epochs = 0;
  int best_epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // of the restored (best) parameters
  StopReason reason = StopReason::EpochCap;
};

struct FitReport {
  SubnetReport transition;
  SubnetReport reward;
  SubnetReport terminal;
};

struct FitOptions {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epoch_cap = 200;
  double validation_fraction = 0.2;
  std::size_t min_data = 50;
  // An epoch that fails to lower the validation loss by more than this also
  // stops training. 0 gives the plain "loss increased" rule.
  double min_improvement = 1e-6;
  std::vector<int> transition_hidden{32, 16};
  std::vector<int> reward_hidden{64, 32};
  std::vector<int> terminal_hidden{32, 16};
};

/// Runs `train_epoch(net) -> train loss` until `val_loss(net)` rises above the
/// previous epoch's value minus `min_improvement`, or `epoch_cap` epochs have
/// run, then restores the parameters of the best validation epoch.
template <class TrainEpoch, class ValLoss>
SubnetReport train_with_early_stopping(Mlp& net, TrainEpoch&& train_epoch, ValLoss&& val_loss, int epoch_cap,
                                       double min_improvement = 0.0) {
  require(epoch_cap >= 1, "epoch_cap must be >= 1");
  SubnetReport report;
  Mlp best = net;
  double best_val = std::numeric_limits<double>::infinity();
  double prev_val = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= epoch_cap; ++epoch) {
    report.epochs = epoch;
    report.train_loss = train_epoch(net);
    const double v = val_loss(net);
    if (!std::isfinite(v)) throw DivergenceError("non-finite validation loss");
    if (v < best_val) {
      best_val = v;
      best = net;
      report.best_epoch = epoch;
    }
    if (v > prev_val - min_improvement) {
      report.reason = StopReason::ValidationIncrease;
      break;
    }
    prev_val = v;
  }
  net = std::move(best);
  report.val_loss = best_val;
  return report;
}

namespace detail {

inline Matrix gather_columns(const Matrix& m, const std::vector<int>& idx, std::size_t from, std::size_t to) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(to - from));
  for (std::size_t i = from; i < to; ++i) out.col(static_cast<Eigen::Index>(i - from)) = m.col(idx[i]);
  return out;
}

inline SubnetReport fit_subnet(Mlp& net, const Matrix& x_train, const Matrix& y_train, const Matrix& x_val,
                               const Matrix& y_val, LossKind kind, const FitOptions& opt, Rng& rng) {
  AdamState adam = make_adam(net, opt.learning_rate);
  std::vector<int> order(static_cast<std::size_t>(x_train.cols()));
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(opt.batch_size);

  auto train_epoch = [&](Mlp& m) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t from = 0; from < order.size(); from += batch) {
      const std::size_t to = std::min(order.size(), from + batch);
      LossSpec spec{kind, gather_columns(y_train, order, from, to), {}};
      const LossAndGrad lg = backward(m, gather_columns(x_train, order, from, to), spec);
      adam_step(adam, m, lg.grads);
      total += lg.loss;
      ++batches;
    }
    return total / static_cast<double>(batches);
  };
  auto val_loss = [&](const Mlp& m) { return evaluate_loss(m, x_val, LossSpec{kind, y_val, {}}); };
  return train_with_early_stopping(net, train_epoch, val_loss, opt.epoch_cap, opt.min_improvement);
}

}  // namespace detail

/// Model input column: normalized observation followed by a one-hot action.
inline Vector encode_input(const WorldModel& m, const Observation& obs, int action) {
  const Eigen::Index d = obs.size();
  Vector x(d + kActionCount);
  x.head(d) = (obs - m.input.mean).cwiseQuotient(m.input.scale);
  x.tail(kActionCount).setZero();
  x(d + action) = 1.0;
  return x;
}

inline std::pair<WorldModel, FitReport> model_fit(const EnvConfig& env, const ReplayBuffer& data, Rng& rng,
                                                  const FitOptions& opt = {}) {
  if (data.size() < opt.min_data)
    throw ContractViolation("model_fit: insufficient data (" + std::to_string(data.size()) + " transitions)");
  const int d = env.obs_dim();
  const auto n = static_cast<Eigen::Index>(data.size());

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::floor(opt.validation_fraction * static_cast<double>(n))));
  const Eigen::Index n_train = n - n_val;

  Matrix obs(d, n), deltas(d, n), actions = Matrix::Zero(kActionCount, n), rewards(1, n), terminals(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Transition& t = data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    require(t.state.size() == d && t.next_state.size() == d, "model_fit: observation width mismatch");
    obs.col(i) = t.state;
    deltas.col(i) = t.next_state - t.state;
    actions(t.action, i) = 1.0;
    rewards(0, i) = t.reward;
    // Cap truncation is not a property of the state; only goal terminations are labels.
    terminals(0, i) = (t.terminal && !t.truncated) ? 1.0 : 0.0;
  }

  WorldModel m;
  m.env = env;
  m.input = Normalizer::fit(obs.leftCols(n_train));
  m.delta = Normalizer::fit(deltas.leftCols(n_train));

  Matrix inputs(d + kActionCount, n);
  inputs.topRows(d) = m.input.apply(obs);
  inputs.bottomRows(kActionCount) = actions;
  const Matrix delta_targets = m.delta.apply(deltas);

  const Matrix x_train = inputs.leftCols(n_train), x_val = inputs.rightCols(n_val);
  const int in = d + kActionCount;

  auto sizes = [&](const std::vector<int>& hidden, int out) {
    std::vector<int> s{in};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(out);
    return s;
  };

  FitReport report;
  m.transition = mlp_init(sizes(opt.transition_hidden, d), true, rng);
  report.transition = detail::fit_subnet(m.transition, x_train, delta_targets.leftCols(n_train), x_val,
                                         delta_targets.rightCols(n_val), LossKind::MeanSquaredError, opt, rng);
  m.reward = mlp_init(sizes(opt.reward_hidden, 1), true, rng);
  report.reward = detail::fit_subnet(m.reward, x_train, rewards.leftCols(n_train), x_val, rewards.rightCols(n_val),
                                     LossKind::MeanSquaredError, opt, rng);
  m.terminal = mlp_init(sizes(opt.terminal_hidden, 1), true, rng);
  report.terminal = detail::fit_subnet(m.terminal, x_train, terminals.leftCols(n_train), x_val,
                                       terminals.rightCols(n_val), LossKind::BinaryCrossEntropyWithLogits, opt, rng);
  return {std::move(m), report};
}

struct Prediction {
  Observation next_obs;
  double reward = 0.0;
  double terminal_logit = 0.0;
  bool terminal = false;
};

/// next = clip(obs + denormalized delta); terminal when sigmoid(logit) > 0.5.
inline Prediction decode_prediction(const WorldModel& m, const Observation& obs, const Vector& delta_norm,
                                    double reward, double logit) {
  Prediction p;
  const Vector delta = m.delta.invert(delta_norm);
  const auto [lo, hi] = obs_bounds(m.env);
  p.next_obs = (obs + delta).cwiseMax(lo).cwiseMin(hi);
  p.reward = reward;
  p.terminal_logit = logit;
  p.terminal = detail::sigmoid(logit) > 0.5;
  return p;
}

/// Returns nullopt on a non-finite prediction (the caller aborts its rollout).
/// An infinite terminal logit is allowed.
inline std::optional<Prediction> model_predict(const WorldModel& m, const Observation& obs, int action) {
  require(action >= 0 && action < kActionCount, "model_predict: action out of range");
  if (!obs.allFinite()) return std::nullopt;
  const Matrix x = encode_input(m, obs, action);
  const Vector delta_norm = forward(m.transition, x);
  const double reward = forward(m.reward, x)(0, 0);
  const double logit = forward(m.terminal, x)(0, 0);
  if (!delta_norm.allFinite() || !std::isfinite(reward) || std::isnan(logit)) return std::nullopt;
  return decode_prediction(m, obs, delta_norm, reward, logit);
}

/// Up to `k` model steps from `start` under `policy(obs, rng) -> action`,
/// stopping early on a predicted terminal or a non-finite prediction.
template <class Policy>
std::vector<Transition> model_rollout(const WorldModel& m, const Observation& start, Policy&& policy, int k,
                                      Rng& rng) {
  require(k >= 1, "model_rollout: K must be >= 1");
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(k));
  Observation obs = start;
  for (int step = 0; step < k; ++step) {
    const int a = policy(obs, rng);
    const auto pred = model_predict(m, obs, a);
    if (!pred) break;
    Transition t;
    t.state = obs;
    t.action = a;
    t.reward = pred->reward;
    t.next_state = pred->next_obs;
    t.terminal = pred->terminal;
    out.push_back(t);
    if (pred->terminal) break;
    obs = pred->next_obs;
  }
  return out;
}

/// A real episode used as reference for the model-error features.
struct ReferenceEpisode {
  Observation initial_obs;
  double env_return = 0.0;
  int env_length = 0;
};

struct ModelErrors {
  double return_error = 0.0;  // mean(model return - env return), signed
  double length_error = 0.0;  // mean(model length - env length), signed
};

/// Simulates one model episode per reference episode from the same initial
/// observation. Returns nullopt for an empty reference list.
template <class Policy>
std::optional<ModelErrors> model_errors(const WorldModel& m, Policy&& policy,
                                        const std::vector<ReferenceEpisode>& refs, int episode_cap, Rng& rng) {
  if (refs.empty()) return std::nullopt;
  ModelErrors e;
  for (const auto& ref : refs) {
    Observation obs = ref.initial_obs;
    double ret = 0.0;
    int len = 0;
    while (len < episode_cap) {
      const auto pred = model_predict(m, obs, policy(obs, rng));
      if (!pred) break;
      ret += pred->reward;
      ++len;
      if (pred->terminal) break;
      obs = pred->next_obs;
    }
    e.return_error += ret - ref.env_return;
    e.length_error += static_cast<double>(len - ref.env_length);
  }
  e.return_error /= static_cast<double>(refs.size());
  e.length_error /= static_cast<double>(refs.size());
  return e;
}

inline nlohmann::json model_to_json(const WorldModel& m) {
  return nlohmann::json{{"env", m.env},
                        {"transition", mlp_to_json(m.transition)},
                        {"reward", mlp_to_json(m.reward)},
                        {"terminal", mlp_to_json(m.terminal)},
                        {"input_mean", to_std_vector(m.input.mean)},
                        {"input_scale", to_std_vector(m.input.scale)},
                        {"delta_mean", to_std_vector(m.delta.mean)},
                        {"delta_scale", to_std_vector(m.delta.scale)}};
}

inline WorldModel model_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& v) {
    const auto x = v.get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())));
  };
  WorldModel m;
  m.env = j.at("env").get<EnvConfig>();
  m.transition = mlp_from_json(j.at("transition"));
  m.reward = mlp_from_json(j.at("reward"));
  m.terminal = mlp_from_json(j.at("terminal"));
  m.input = {vec(j.at("input_mean")), vec(j.at("input_scale"))};
  m.delta = {vec(j.at("delta_mean")), vec(j.at("delta_scale"))};
  return m;
}

}  // namespace dynameta
