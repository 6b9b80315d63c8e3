#pragma once

// DQN with experience replay, a periodically synced target network, and the
// double-Q target.

#include <algorithm>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dynameta/common.hpp"
#include "dynameta/envs.hpp"
#include "dynameta/nn.hpp"

namespace dynameta {

/// Constant `start` for `warmup` steps, then linear to `end` over `anneal`
/// steps, then constant `end`.
struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.1;
  long warmup = 10000;
  long anneal = 10000;
};

inline EpsilonSchedule acting_schedule() { return {1.0, 0.1, 10000, 10000}; }

inline double epsilon_at(const EpsilonSchedule& s, long t) {
  if (t < s.warmup) return s.start;
  if (s.anneal <= 0 || t >= s.warmup + s.anneal) return s.end;
  const double frac = static_cast<double>(t - s.warmup) / static_cast<double>(s.anneal);
  return s.start + (s.end - s.start) * frac;
}

/// Transition store with uniform sampling. Capacity 0 means unlimited; a
/// bounded buffer overwrites its oldest entry once full.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(Transition t) {
    if (capacity_ == 0 || items_.size() < capacity_) {
      items_.push_back(std::move(t));
    } else {
      items_[next_] = std::move(t);
      next_ = (next_ + 1) % capacity_;
    }
  }

  const Transition& sample(Rng& rng) const { return items_[static_cast<std::size_t>(uniform_index(rng, items_.size()))]; }

  void clear() {
    items_.clear();
    next_ = 0;
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Transition> items_;
  std::size_t capacity_ = 0;
  std::size_t next_ = 0;
};

struct DqnConfig {
  std::vector<int> hidden{64, 32};
  double learning_rate = 1e-4;
  double gamma = 0.99;
  int batch_size = 32;
  // 0 disables automatic syncing; the caller then syncs explicitly.
  long target_sync_period = 2000;
};

struct DqnAgent {
  DqnConfig config;
  Mlp online;
  Mlp target;
  AdamState adam;
  long update_count = 0;

  int obs_dim() const { return online.input_dim(); }
  int action_count() const { return online.output_dim(); }
};

inline DqnAgent make_agent(int obs_dim, int action_count, const DqnConfig& cfg, Rng& rng) {
  require(cfg.batch_size >= 1, "batch_size must be >= 1");
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(action_count);
  DqnAgent a;
  a.config = cfg;
  a.online = mlp_init(sizes, false, rng);
  a.target = copy_params(a.online);
  a.adam = make_adam(a.online, cfg.learning_rate);
  return a;
}

inline void sync_target(DqnAgent& agent) { agent.target = copy_params(agent.online); }

/// Lowest index among maximal entries.
template <class Derived>
int argmax(const Eigen::DenseBase<Derived>& values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values(i) > values(best)) best = i;
  return best;
}

inline Vector q_values(const Mlp& net, const Observation& obs) {
  require(obs.size() == net.input_dim(), "observation width does not match network");
  return forward(net, Matrix(obs));
}

inline int greedy_action(const Mlp& net, const Observation& obs) { return argmax(q_values(net, obs)); }

inline int select_action(const DqnAgent& agent, const Observation& obs, double epsilon, Rng& rng) {
  require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must lie in [0,1]");
  if (epsilon > 0.0 && uniform(rng, 0.0, 1.0) < epsilon) return uniform_index(rng, static_cast<std::size_t>(agent.action_count()));
  return greedy_action(agent.online, obs);
}

/// Greedy evaluation policy (no exploration, no randomness).
inline auto agent_greedy_policy(const DqnAgent& agent) {
  return [&agent](const Observation& obs) { return greedy_action(agent.online, obs); };
}

struct Batch {
  Matrix states;
  Matrix next_states;
  std::vector<int> actions;
  Vector rewards;
  std::vector<bool> absorbing;  // terminal by goal: no bootstrap
};

inline Batch make_batch(const std::vector<const Transition*>& items) {
  const int n = static_cast<int>(items.size());
  const int d = static_cast<int>(items.front()->state.size());
  Batch b;
  b.states.resize(d, n);
  b.next_states.resize(d, n);
  b.actions.resize(static_cast<std::size_t>(n));
  b.rewards.resize(n);
  b.absorbing.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Transition& t = *items[static_cast<std::size_t>(i)];
    b.states.col(i) = t.state;
    b.next_states.col(i) = t.next_state;
    b.actions[static_cast<std::size_t>(i)] = t.action;
    b.rewards(i) = t.reward;
    b.absorbing[static_cast<std::size_t>(i)] = t.terminal && !t.truncated;
  }
  return b;
}

/// y = r for goal-terminal transitions, else r + gamma * q_target(s', argmax_a q_online(s', a)).
inline Vector double_q_targets(const DqnAgent& agent, const Batch& b) {
  const Matrix q_online = forward(agent.online, b.next_states);
  const Matrix q_target = forward(agent.target, b.next_states);
  Vector y(b.rewards.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    y(i) = b.rewards(i);
    if (!b.absorbing[static_cast<std::size_t>(i)])
      y(i) += agent.config.gamma * q_target(argmax(q_online.col(i)), i);
  }
  return y;
}

/// One gradient step on the mean squared TD error of a given batch.
inline double dqn_update_on(DqnAgent& agent, const Batch& b) {
  const Vector y = double_q_targets(agent, b);
  const Eigen::Index n = y.size();
  LossSpec spec;
  spec.kind = LossKind::MeanSquaredError;
  spec.target = Matrix::Zero(agent.action_count(), n);
  spec.mask = Matrix::Zero(agent.action_count(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    spec.target(b.actions[static_cast<std::size_t>(i)], i) = y(i);
    spec.mask(b.actions[static_cast<std::size_t>(i)], i) = 1.0;
  }
  const LossAndGrad lg = backward(agent.online, b.states, spec);
  adam_step(agent.adam, agent.online, lg.grads);
  ++agent.update_count;
  if (agent.config.target_sync_period > 0 && agent.update_count % agent.config.target_sync_period == 0)
    sync_target(agent);
  return lg.loss;
}

/// Samples a uniform minibatch and takes one gradient step. Returns nullopt
/// (no update) while the buffer holds fewer than batch_size transitions.
inline std::optional<double> dqn_update(DqnAgent& agent, const ReplayBuffer& buffer, Rng& rng) {
  const auto batch_size = static_cast<std::size_t>(agent.config.batch_size);
  if (buffer.size() < batch_size) return std::nullopt;
  std::vector<const Transition*> items;
  items.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) items.push_back(&buffer.sample(rng));
  return dqn_update_on(agent, make_batch(items));
}

inline nlohmann::json agent_to_json(const DqnAgent& a) {
  return nlohmann::json{
      {"online", mlp_to_json(a.online)},
      {"target", mlp_to_json(a.target)},
      {"adam", adam_to_json(a.adam)},
      {"hidden", a.config.hidden},
      {"batch_size", a.config.batch_size},
      {"metadata",
       {{"gamma", a.config.gamma}, {"target_sync_period", a.config.target_sync_period}, {"update_counter", a.update_count}}}};
}

inline DqnAgent agent_from_json(const nlohmann::json& j) {
  DqnAgent a;
  a.online = mlp_from_json(j.at("online"));
  a.target = mlp_from_json(j.at("target"));
  require(a.online.layer_sizes() == a.target.layer_sizes(), "agent checkpoint: online/target shapes differ");
  a.adam = adam_from_json(j.at("adam"), a.online);
  a.config.hidden = j.at("hidden").get<std::vector<int>>();
  a.config.batch_size = j.at("batch_size").get<int>();
  a.config.learning_rate = a.adam.learning_rate;
  const auto& meta = j.at("metadata");
  a.config.gamma = meta.at("gamma").get<double>();
  a.config.target_sync_period = meta.at("target_sync_period").get<long>();
  a.update_count = meta.at("update_counter").get<long>();
  return a;
}

// Replay buffers are persisted for resumable meta training.
inline nlohmann::json transition_to_json(const Transition& t) {
  return nlohmann::json{{"s", std::vector<double>(t.state.begin(), t.state.end())},
                        {"a", t.action},
                        {"r", t.reward},
                        {"s2", std::vector<double>(t.next_state.begin(), t.next_state.end())},
                        {"terminal", t.terminal},
                        {"truncated", t.truncated}};
}

inline Transition transition_from_json(const nlohmann::json& j) {
  auto to_obs = [](const std::vector<double>& v) {
    require(v.size() <= static_cast<std::size_t>(kMaxObsDim), "observation too wide");
    Observation o(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) o(static_cast<Eigen::Index>(i)) = v[i];
    return o;
  };
  Transition t;
  t.state = to_obs(j.at("s").get<std::vector<double>>());
  t.action = j.at("a").get<int>();
  t.reward = j.at("r").get<double>();
  t.next_state = to_obs(j.at("s2").get<std::vector<double>>());
  t.terminal = j.at("terminal").get<bool>();
  t.truncated = j.at("truncated").get<bool>();
  return t;
}

}  // namespace dynameta
