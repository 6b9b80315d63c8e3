#pragma once

// Meta-level control of the rollout length: Up/Down/NoOp action arithmetic,
// observation features, telescoping reward, heuristic schedules, and DQN
// metareasoner training and evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dynameta/common.hpp"
#include "dynameta/dqn_agent.hpp"
#include "dynameta/dyna_loop.hpp"

namespace dynameta {

enum class MetaAction { Up = 0, Down = 1, NoOp = 2 };

inline constexpr int kMetaActionCount = 3;
inline constexpr int kMetaObsDim = 5;

inline const char* to_string(MetaAction a) {
  switch (a) {
    case MetaAction::Up: return "up";
    case MetaAction::Down: return "down";
    case MetaAction::NoOp: return "noop";
  }
  return "?";
}

inline MetaAction parse_meta_action(const std::string& s) {
  if (s == "up") return MetaAction::Up;
  if (s == "down") return MetaAction::Down;
  if (s == "noop") return MetaAction::NoOp;
  throw ContractViolation("unknown meta action: " + s);
}

/// Up: ceil(1.5K) (1 from 0), capped at k_max. Down: floor(K/2) (0 from 1).
inline int apply_meta_action(int k, MetaAction a, int k_max = 32) {
  require(k >= 0 && k <= k_max, "apply_meta_action: K outside [0, k_max]");
  switch (a) {
    case MetaAction::Up: return k > 0 ? std::min((3 * k + 1) / 2, k_max) : std::min(1, k_max);
    case MetaAction::Down: return k > 1 ? k / 2 : 0;
    case MetaAction::NoOp: return k;
  }
  return k;
}

enum class ScheduleKind { Static, Dec, Inc, IncDec };

/// Rollout length of a heuristic schedule at phase j of H (1-based).
/// Inc/Dec interpolate linearly between 0 and k_max; IncDec rises over the
/// first ceil(H/2) phases and mirrors back down.
inline int schedule_k(ScheduleKind kind, int j, int horizon, int k_max, int static_k = 0) {
  require(horizon >= 1 && j >= 1 && j <= horizon, "schedule_k: phase outside [1, H]");
  auto ramp = [k_max](int step, int span) {
    if (span <= 0) return 0;
    return static_cast<int>(std::lround(static_cast<double>(k_max) * step / span));
  };
  switch (kind) {
    case ScheduleKind::Static: return static_k;
    case ScheduleKind::Inc: return ramp(j - 1, horizon - 1);
    case ScheduleKind::Dec: return horizon == 1 ? k_max : ramp(horizon - j, horizon - 1);
    case ScheduleKind::IncDec: {
      const int peak = (horizon + 1) / 2;
      return ramp(std::min(j, horizon + 1 - j) - 1, peak - 1);
    }
  }
  return 0;
}

struct MetaObservation {
  double remaining = 1.0;          // (N - t) / N
  double k_norm = 0.0;             // K / K_max
  double quality = 0.0;            // J / episode_cap
  double return_error_norm = 0.0;  // signed
  double length_error_norm = 0.0;  // signed

  Observation to_vector() const {
    Observation v(kMetaObsDim);
    v << remaining, k_norm, quality, return_error_norm, length_error_norm;
    return v;
  }
};

inline MetaObservation build_observation(const PhaseStats& stats, long t, int current_k, const RunConfig& cfg) {
  const double cap = static_cast<double>(cfg.env.episode_cap);
  MetaObservation o;
  o.remaining = static_cast<double>(cfg.total_steps - t) / static_cast<double>(cfg.total_steps);
  o.k_norm = static_cast<double>(current_k) / static_cast<double>(cfg.k_max);
  o.quality = stats.quality / cap;
  o.return_error_norm = stats.return_error / cap;
  o.length_error_norm = stats.length_error / cap;
  return o;
}

inline MetaObservation build_observation(const DecisionContext& ctx) {
  return build_observation(*ctx.stats, ctx.t, ctx.current_k, *ctx.cfg);
}

inline double meta_reward(double j_next, double j_prev) { return j_next - j_prev; }

struct MetaTransition {
  MetaObservation obs;
  MetaAction action = MetaAction::NoOp;
  double reward = 0.0;
  MetaObservation next_obs;
  bool terminal = false;

  Transition to_replay() const {
    return Transition{obs.to_vector(), static_cast<int>(action), reward, next_obs.to_vector(), terminal, false};
  }
};

/// Drives one meta-level episode over a training run. Decision j (end of
/// phase j) is rewarded J_{j+1} - J_j; the last decision is rewarded
/// J_eval - J_H, so the episode return telescopes to J_eval - J_1.
class MetaMdpController : public Controller {
 public:
  using Chooser = std::function<MetaAction(const MetaObservation&, int phase)>;
  using Sink = std::function<void(const MetaTransition&)>;

  explicit MetaMdpController(Chooser chooser, Sink sink = {})
      : chooser_(std::move(chooser)), sink_(std::move(sink)) {}

  int decide(const DecisionContext& ctx) override {
    const MetaObservation obs = build_observation(ctx);
    const double quality = ctx.stats->quality;
    if (pending_) emit({pending_->obs, pending_->action, meta_reward(quality, pending_->quality), obs, false});
    const MetaAction a = chooser_(obs, ctx.phase);
    const int k = apply_meta_action(ctx.current_k, a, ctx.cfg->k_max);
    pending_ = Pending{obs, a, quality};
    last_k_norm_ = static_cast<double>(k) / static_cast<double>(ctx.cfg->k_max);
    cap_ = static_cast<double>(ctx.cfg->env.episode_cap);
    chosen_.push_back(k);
    return k;
  }

  void on_run_end(double final_score) override {
    if (!pending_) return;
    MetaObservation end = pending_->obs;
    end.remaining = 0.0;
    end.k_norm = last_k_norm_;
    end.quality = final_score / cap_;
    emit({pending_->obs, pending_->action, meta_reward(final_score, pending_->quality), end, true});
    pending_.reset();
  }

  const std::vector<MetaTransition>& transitions() const { return transitions_; }
  const std::vector<int>& chosen_k() const { return chosen_; }

 private:
  struct Pending {
    MetaObservation obs;
    MetaAction action;
    double quality;
  };

  void emit(const MetaTransition& t) {
    transitions_.push_back(t);
    if (sink_) sink_(t);
  }

  Chooser chooser_;
  Sink sink_;
  std::optional<Pending> pending_;
  std::vector<MetaTransition> transitions_;
  std::vector<int> chosen_;
  double last_k_norm_ = 0.0;
  double cap_ = 1.0;
};

class ScheduleController : public Controller {
 public:
  ScheduleController(ScheduleKind kind, int static_k) : kind_(kind), static_k_(static_k) {}
  int decide(const DecisionContext& ctx) override {
    return schedule_k(kind_, ctx.phase, ctx.horizon, ctx.cfg->k_max, static_k_);
  }

 private:
  ScheduleKind kind_;
  int static_k_;
};

// Controller specifications, as named in configs and result tables.
struct StaticController {
  int k = 0;
};
struct ScheduledController {
  ScheduleKind kind = ScheduleKind::Dec;
};
struct MetaController {
  std::shared_ptr<const DqnAgent> agent;
};
struct ScriptedController {
  std::vector<MetaAction> actions;  // one per decision; NoOp past the end
};

using RolloutController = std::variant<StaticController, ScheduledController, MetaController, ScriptedController>;

inline std::string approach_label(const RolloutController& c) {
  struct {
    std::string operator()(const StaticController& s) const { return "K=" + std::to_string(s.k); }
    std::string operator()(const ScheduledController& s) const {
      switch (s.kind) {
        case ScheduleKind::Dec: return "Dec";
        case ScheduleKind::Inc: return "Inc";
        case ScheduleKind::IncDec: return "IncDec";
        case ScheduleKind::Static: return "Static";
      }
      return "?";
    }
    std::string operator()(const MetaController&) const { return "Meta"; }
    std::string operator()(const ScriptedController&) const { return "Scripted"; }
  } visitor;
  return std::visit(visitor, c);
}

inline MetaMdpController::Chooser greedy_meta_chooser(std::shared_ptr<const DqnAgent> agent) {
  return [agent](const MetaObservation& o, int) { return static_cast<MetaAction>(greedy_action(agent->online, o.to_vector())); };
}

inline std::unique_ptr<Controller> make_controller(const RolloutController& spec) {
  if (const auto* s = std::get_if<StaticController>(&spec)) {
    require(s->k >= 0 && s->k <= 32, "static K must lie in [0, 32]");
    return std::make_unique<ScheduleController>(ScheduleKind::Static, s->k);
  }
  if (const auto* s = std::get_if<ScheduledController>(&spec)) return std::make_unique<ScheduleController>(s->kind, 0);
  if (const auto* s = std::get_if<MetaController>(&spec)) {
    require(s->agent != nullptr, "meta controller requires a trained agent");
    return std::make_unique<MetaMdpController>(greedy_meta_chooser(s->agent));
  }
  const auto& script = std::get<ScriptedController>(spec).actions;
  return std::make_unique<MetaMdpController>([script](const MetaObservation&, int phase) {
    const auto i = static_cast<std::size_t>(phase - 1);
    return i < script.size() ? script[i] : MetaAction::NoOp;
  });
}

// ---------------------------------------------------------------------------
// Metareasoner training.

struct MetaTrainConfig {
  RunConfig run;  // template; the variant should be the original environment
  int episodes = 2000;
  EpsilonSchedule epsilon{1.0, 0.15, 25, 25};
  int updates_per_transition = 10;
  int target_sync_episodes = 10;
  DqnConfig agent{{64, 32}, 1e-4, 0.99, 32, 0};
};

struct MetaEpisodeRecord {
  int episode = 0;
  double score = 0.0;
  double epsilon = 0.0;
  double mean_k = 0.0;
  int transitions = 0;
  int updates_attempted = 0;
  bool diverged = false;
  std::string error;
};

/// Resumable meta training state: the meta agent, its replay buffer, and the
/// number of finished meta episodes. Per-episode randomness derives from
/// (master seed, episode), so a resumed run continues identically.
class MetaTrainer {
 public:
  explicit MetaTrainer(MetaTrainConfig cfg) : cfg_(std::move(cfg)) {
    require(cfg_.episodes >= 0, "meta episodes must be >= 0");
    require(cfg_.target_sync_episodes >= 1, "target_sync_episodes must be >= 1");
    Rng init = make_rng(cfg_.run.master_seed, 0, Stream::Meta);
    agent_ = make_agent(kMetaObsDim, kMetaActionCount, cfg_.agent, init);
  }

  const MetaTrainConfig& config() const { return cfg_; }
  const DqnAgent& agent() const { return agent_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  int episodes_done() const { return episodes_done_; }
  long transitions_recorded() const { return transitions_recorded_; }
  long updates_attempted() const { return updates_attempted_; }
  bool finished() const { return episodes_done_ >= cfg_.episodes; }

  double epsilon_for(int episode) const { return epsilon_at(cfg_.epsilon, episode); }

  MetaEpisodeRecord run_episode() {
    const int episode = episodes_done_ + 1;
    MetaEpisodeRecord rec;
    rec.episode = episode;
    rec.epsilon = epsilon_for(episode);

    Rng explore = make_rng(cfg_.run.master_seed, static_cast<std::uint64_t>(episode), Stream::Meta);
    Rng replay = make_rng(cfg_.run.master_seed, static_cast<std::uint64_t>(episode), Stream::MetaReplay);
    const double eps = rec.epsilon;
    MetaMdpController controller(
        [&](const MetaObservation& o, int) {
          return static_cast<MetaAction>(select_action(agent_, o.to_vector(), eps, explore));
        },
        [&](const MetaTransition& t) {
          buffer_.push(t.to_replay());
          ++rec.transitions;
          for (int u = 0; u < cfg_.updates_per_transition; ++u) {
            ++rec.updates_attempted;
            dqn_update(agent_, buffer_, replay);
          }
        });

    RunConfig run = cfg_.run;
    run.seed = static_cast<std::uint64_t>(episode);
    try {
      const RunResult result = run_training(run, controller);
      rec.score = result.final_score;
    } catch (const DivergenceError& e) {
      rec.diverged = true;
      rec.error = e.what();
      rec.score = std::numeric_limits<double>::quiet_NaN();
    }
    const auto& ks = controller.chosen_k();
    if (!ks.empty()) {
      double sum = 0.0;
      for (int k : ks) sum += k;
      rec.mean_k = sum / static_cast<double>(ks.size());
    }
    if (episode % cfg_.target_sync_episodes == 0) sync_target(agent_);
    episodes_done_ = episode;
    transitions_recorded_ += rec.transitions;
    updates_attempted_ += rec.updates_attempted;
    return rec;
  }

  nlohmann::json to_json() const {
    nlohmann::json transitions = nlohmann::json::array();
    for (const auto& t : buffer_) transitions.push_back(transition_to_json(t));
    return nlohmann::json{{"episodes_done", episodes_done_},
                          {"transitions_recorded", transitions_recorded_},
                          {"updates_attempted", updates_attempted_},
                          {"agent", agent_to_json(agent_)},
                          {"replay", transitions}};
  }

  /// Restores agent, buffer and progress from a checkpoint document.
  void restore(const nlohmann::json& j) {
    agent_ = agent_from_json(j.at("agent"));
    require(agent_.obs_dim() == kMetaObsDim && agent_.action_count() == kMetaActionCount,
            "meta checkpoint: agent has wrong shape");
    buffer_.clear();
    for (const auto& t : j.at("replay")) buffer_.push(transition_from_json(t));
    episodes_done_ = j.at("episodes_done").get<int>();
    transitions_recorded_ = j.at("transitions_recorded").get<long>();
    updates_attempted_ = j.at("updates_attempted").get<long>();
    require(episodes_done_ >= 0, "meta checkpoint: negative episode count");
  }

 private:
  MetaTrainConfig cfg_;
  DqnAgent agent_;
  ReplayBuffer buffer_;
  int episodes_done_ = 0;
  long transitions_recorded_ = 0;
  long updates_attempted_ = 0;
};

inline DqnAgent meta_train(const MetaTrainConfig& cfg) {
  MetaTrainer trainer(cfg);
  while (!trainer.finished()) trainer.run_episode();
  return trainer.agent();
}

struct ScoreSummary {
  double mean = 0.0;
  std::optional<double> stderr_;  // undefined for a single sample
  int n = 0;
};

inline ScoreSummary summarize(const std::vector<double>& scores) {
  ScoreSummary s;
  s.n = static_cast<int>(scores.size());
  if (scores.empty()) return s;
  for (double x : scores) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double x : scores) ss += (x - s.mean) * (x - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

/// `runs` Dyna-DQN runs (seeds 1..runs) with the greedy meta-policy; per-run
/// score is the final greedy evaluation.
inline ScoreSummary meta_eval(std::shared_ptr<const DqnAgent> agent, const RunConfig& run_template, int runs) {
  require(runs >= 1, "meta_eval: runs must be >= 1");
  std::vector<double> scores;
  for (int r = 1; r <= runs; ++r) {
    RunConfig run = run_template;
    run.seed = static_cast<std::uint64_t>(r);
    auto controller = make_controller(MetaController{agent});
    scores.push_back(run_training(run, *controller).final_score);
  }
  return summarize(scores);
}

}  // namespace dynameta
