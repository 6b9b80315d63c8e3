#pragma once

// Dyna-style acting / learning / planning loop. Training is split into phases
// of P environment steps; at the end of each phase the world model is refit,
// the rollout length K is chosen by a controller, and floor(P/K) model
// rollouts from states sampled out of the real buffer feed a synthetic buffer
// that is trained on with one update per synthetic transition.

#include <chrono>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dynameta/common.hpp"
#include "dynameta/dqn_agent.hpp"
#include "dynameta/envs.hpp"
#include "dynameta/world_model.hpp"

namespace dynameta {

struct RunConfig {
  EnvConfig env;
  long total_steps = 150000;  // N
  long phase_length = 10000;  // P
  int k_max = 32;
  int real_updates = 1;       // G
  int synthetic_updates = 1;  // G'
  EpsilonSchedule acting = acting_schedule();
  double rollout_epsilon = 0.1;
  DqnConfig dqn;  // hidden [64,32], lr 1e-4, gamma 0.99, batch 32, sync 2000
  FitOptions model;
  int eval_episodes = 100;
  int curve_eval_episodes = 20;
  std::uint64_t master_seed = 0;
  std::uint64_t seed = 0;
  bool record_timing = false;

  long phases() const { return total_steps / phase_length; }
};

inline RunConfig default_run_config(EnvKind kind, Variant variant) {
  RunConfig cfg;
  cfg.env = make_env(kind, variant);
  cfg.total_steps = kind == EnvKind::MountainCar ? 150000 : 120000;
  return cfg;
}

inline void validate(const RunConfig& cfg) {
  require(cfg.phase_length >= 1, "phase_length must be >= 1");
  require(cfg.total_steps >= cfg.phase_length, "total_steps must be >= phase_length");
  require(cfg.total_steps % cfg.phase_length == 0, "total_steps must be a multiple of phase_length");
  require(cfg.k_max >= 1, "k_max must be >= 1");
  require(cfg.real_updates >= 0 && cfg.synthetic_updates >= 0, "update counts must be >= 0");
  require(cfg.rollout_epsilon >= 0.0 && cfg.rollout_epsilon <= 1.0, "rollout_epsilon must lie in [0,1]");
  require(cfg.eval_episodes >= 1, "eval_episodes must be >= 1");
  require(cfg.curve_eval_episodes >= 0, "curve_eval_episodes must be >= 0");
}

struct PhaseStats {
  int phase = 0;          // 1-based
  long t = 0;             // env steps taken at the end of the phase
  int k = 0;              // rollout length chosen at this boundary
  double quality = 0.0;   // J: mean return of episodes completed in the phase
  int episodes = 0;
  double return_error = 0.0;
  double length_error = 0.0;
  bool errors_measured = false;
  FitReport fit;
  int rollouts = 0;
  long synthetic_steps = 0;
  double eval_score = 0.0;  // greedy learning-curve sample
  double wall_ms = 0.0;
};

struct RunResult {
  std::string approach;
  std::uint64_t seed = 0;
  std::vector<PhaseStats> phases;
  double final_score = 0.0;

  std::vector<int> k_trace() const {
    std::vector<int> ks;
    for (const auto& p : phases) ks.push_back(p.k);
    return ks;
  }
};

/// Information available to a controller at a phase boundary.
struct DecisionContext {
  int phase = 0;
  int horizon = 0;
  long t = 0;
  int current_k = 0;
  const PhaseStats* stats = nullptr;
  const RunConfig* cfg = nullptr;
};

/// Chooses the rollout length at each phase boundary.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual int decide(const DecisionContext& ctx) = 0;
  /// Called once after the final greedy evaluation.
  virtual void on_run_end(double /*final_score*/) {}
};

/// Mean of completed-episode returns, or `previous` when none completed.
inline double phase_quality(const std::vector<double>& returns, double previous) {
  if (returns.empty()) return previous;
  return std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(returns.size());
}

/// Mean return of greedy episodes on a fresh environment instance.
template <class Policy>
double evaluate_policy(const EnvConfig& env, Policy&& policy, int episodes, Rng& rng) {
  require(episodes >= 1, "evaluate_policy: episodes must be >= 1");
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    EnvState s = env_reset(env, rng);
    double ret = 0.0;
    while (true) {
      const StepResult r = env_step(env, s, policy(observe(env, s)));
      ret += r.reward;
      s = r.state;
      if (r.terminal) break;
    }
    total += ret;
  }
  return total / static_cast<double>(episodes);
}

inline RunResult run_training(const RunConfig& cfg, Controller& controller) {
  validate(cfg);
  using Clock = std::chrono::steady_clock;
  const EnvConfig& env = cfg.env;
  const int horizon = static_cast<int>(cfg.phases());

  Rng env_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Env);
  Rng agent_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Agent);
  Rng replay_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Replay);
  Rng model_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Model);
  Rng rollout_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Rollout);
  Rng error_rng = make_rng(cfg.master_seed, cfg.seed, Stream::ModelError);
  Rng curve_rng = make_rng(cfg.master_seed, cfg.seed, Stream::CurveEval);
  Rng eval_rng = make_rng(cfg.master_seed, cfg.seed, Stream::Eval);

  DqnAgent agent = make_agent(env.obs_dim(), env.action_count, cfg.dqn, agent_rng);
  ReplayBuffer real;
  ReplayBuffer synthetic;

  RunResult result;
  result.seed = cfg.seed;

  EnvState state = env_reset(env, env_rng);
  Observation obs = observe(env, state);
  Observation episode_start = obs;
  double episode_return = 0.0;
  int episode_length = 0;

  std::vector<double> phase_returns;
  std::vector<ReferenceEpisode> phase_refs;
  double previous_quality = -static_cast<double>(env.episode_cap);
  ModelErrors previous_errors;
  int k = 0;
  auto phase_start = Clock::now();

  auto update_or_throw = [&](const ReplayBuffer& buffer, long t) {
    try {
      dqn_update(agent, buffer, replay_rng);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " at env step " + std::to_string(t) + " (seed " +
                            std::to_string(cfg.seed) + ")");
    }
  };

  for (long t = 1; t <= cfg.total_steps; ++t) {
    const double eps = epsilon_at(cfg.acting, t - 1);
    const int action = select_action(agent, obs, eps, agent_rng);
    const StepResult step = env_step(env, state, action);
    const Observation next_obs = observe(env, step.state);
    real.push(Transition{obs, action, step.reward, next_obs, step.terminal, step.truncated});
    episode_return += step.reward;
    ++episode_length;
    for (int g = 0; g < cfg.real_updates; ++g) update_or_throw(real, t);

    if (step.terminal) {
      phase_returns.push_back(episode_return);
      phase_refs.push_back({episode_start, episode_return, episode_length});
      state = env_reset(env, env_rng);
      obs = observe(env, state);
      episode_start = obs;
      episode_return = 0.0;
      episode_length = 0;
    } else {
      state = step.state;
      obs = next_obs;
    }

    if (t % cfg.phase_length != 0) continue;

    // Phase boundary.
    PhaseStats stats;
    stats.phase = static_cast<int>(t / cfg.phase_length);
    stats.t = t;
    auto [model, fit] = model_fit(env, real, model_rng, cfg.model);
    stats.fit = fit;
    stats.quality = phase_quality(phase_returns, previous_quality);
    stats.episodes = static_cast<int>(phase_returns.size());

    auto acting_policy = [&agent, eps_now = epsilon_at(cfg.acting, t)](const Observation& o, Rng& r) {
      return select_action(agent, o, eps_now, r);
    };
    if (auto errors = model_errors(model, acting_policy, phase_refs, env.episode_cap, error_rng)) {
      previous_errors = *errors;
      stats.errors_measured = true;
    }
    stats.return_error = previous_errors.return_error;
    stats.length_error = previous_errors.length_error;

    DecisionContext ctx{stats.phase, horizon, t, k, &stats, &cfg};
    k = controller.decide(ctx);
    require(k >= 0 && k <= cfg.k_max, "controller returned rollout length " + std::to_string(k) + " outside [0, k_max]");
    stats.k = k;

    synthetic.clear();
    if (k >= 1) {
      auto rollout_policy = [&agent, eps = cfg.rollout_epsilon](const Observation& o, Rng& r) {
        return select_action(agent, o, eps, r);
      };
      const long rollouts = cfg.phase_length / k;
      for (long m = 0; m < rollouts; ++m) {
        const Observation& start = real.sample(rollout_rng).state;
        const auto trajectory = model_rollout(model, start, rollout_policy, k, rollout_rng);
        for (const auto& tr : trajectory) synthetic.push(tr);
        for (std::size_t i = 0; i < trajectory.size(); ++i)
          for (int g = 0; g < cfg.synthetic_updates; ++g) update_or_throw(synthetic, t);
        stats.synthetic_steps += static_cast<long>(trajectory.size());
      }
      stats.rollouts = static_cast<int>(rollouts);
    }

    if (cfg.curve_eval_episodes > 0)
      stats.eval_score = evaluate_policy(env, agent_greedy_policy(agent), cfg.curve_eval_episodes, curve_rng);
    if (cfg.record_timing) {
      const auto now = Clock::now();
      stats.wall_ms = std::chrono::duration<double, std::milli>(now - phase_start).count();
      phase_start = now;
    }

    previous_quality = stats.quality;
    phase_returns.clear();
    phase_refs.clear();
    result.phases.push_back(std::move(stats));
  }

  result.final_score = evaluate_policy(env, agent_greedy_policy(agent), cfg.eval_episodes, eval_rng);
  controller.on_run_end(result.final_score);
  return result;
}

}  // namespace dynameta
