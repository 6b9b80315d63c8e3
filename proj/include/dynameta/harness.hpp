#pragma once

// Experiment orchestration: JSON configuration, seeded runs, persistence of
// run results, sweeps over approaches, resumable meta training, and export of
// plot-ready CSVs.
//
// Exit codes: 0 success, 1 invalid configuration or inputs, 2 run divergence,
// 3 corrupt checkpoint.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynameta/dyna_loop.hpp"
#include "dynameta/meta.hpp"
#include "dynameta/parallel.hpp"

namespace dynameta {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitInvalidConfig = 1, kExitDivergence = 2, kExitCorruptCheckpoint = 3 };

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Formatting.

/// Shortest round-trip decimal; empty for non-finite values.
inline std::string format_number(double x) {
  if (!std::isfinite(x)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string row;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) row += ',';
    row += csv_field(fields[i]);
  }
  return row + "\r\n";
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Approach label as a directory/file name component ("K=16" -> "K16").
inline std::string label_slug(const std::string& label) {
  std::string out;
  for (char c : label)
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') out += c;
  return out;
}

// ---------------------------------------------------------------------------
// Configuration.

struct MetaOptions {
  int episodes = 2000;
  int checkpoint_every = 50;
  EpsilonSchedule epsilon{1.0, 0.15, 25, 25};
  int updates_per_transition = 10;
  int target_sync_episodes = 10;
  DqnConfig agent{{64, 32}, 1e-4, 0.99, 32, 0};
};

struct ExperimentConfig {
  RunConfig run;
  std::optional<RolloutController> controller;
  std::vector<RolloutController> approaches;
  std::vector<std::uint64_t> seeds;
  fs::path output_dir = "results";
  int jobs = 1;
  MetaOptions meta;
  std::string source_text;  // the config file, verbatim
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
T get_or(const nlohmann::json& obj, const char* key, T fallback) {
  return obj.contains(key) ? obj.at(key).get<T>() : fallback;
}

inline EpsilonSchedule parse_epsilon(const nlohmann::json& j, EpsilonSchedule s, const std::string& where) {
  check_keys(j, {"start", "end", "warmup", "anneal"}, where);
  s.start = get_or(j, "start", s.start);
  s.end = get_or(j, "end", s.end);
  s.warmup = get_or(j, "warmup", s.warmup);
  s.anneal = get_or(j, "anneal", s.anneal);
  if (s.start < 0 || s.start > 1 || s.end < 0 || s.end > 1 || s.warmup < 0 || s.anneal < 0)
    throw ConfigError(where + ": epsilon values must lie in [0,1] and step counts be >= 0");
  return s;
}

inline DqnConfig parse_dqn(const nlohmann::json& j, DqnConfig c, const std::string& where) {
  check_keys(j, {"hidden", "learning_rate", "gamma", "batch_size", "target_sync_period"}, where);
  c.hidden = get_or(j, "hidden", c.hidden);
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
  c.gamma = get_or(j, "gamma", c.gamma);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.target_sync_period = get_or(j, "target_sync_period", c.target_sync_period);
  if (c.learning_rate <= 0 || c.gamma < 0 || c.gamma > 1 || c.batch_size < 1 || c.target_sync_period < 0)
    throw ConfigError(where + ": invalid DQN hyperparameters");
  return c;
}

inline FitOptions parse_model(const nlohmann::json& j, FitOptions f) {
  check_keys(j, {"learning_rate", "batch_size", "epoch_cap", "validation_fraction", "min_improvement"}, "run.model");
  f.learning_rate = get_or(j, "learning_rate", f.learning_rate);
  f.batch_size = get_or(j, "batch_size", f.batch_size);
  f.epoch_cap = get_or(j, "epoch_cap", f.epoch_cap);
  f.validation_fraction = get_or(j, "validation_fraction", f.validation_fraction);
  f.min_improvement = get_or(j, "min_improvement", f.min_improvement);
  if (f.learning_rate <= 0 || f.batch_size < 1 || f.epoch_cap < 1 || f.validation_fraction <= 0 ||
      f.validation_fraction >= 1 || f.min_improvement < 0)
    throw ConfigError("run.model: invalid model-fitting options");
  return f;
}

inline RunConfig parse_run(const nlohmann::json& j, RunConfig r) {
  check_keys(j,
             {"total_steps", "phase_length", "k_max", "real_updates", "synthetic_updates", "acting_epsilon",
              "rollout_epsilon", "dqn", "model", "eval_episodes", "curve_eval_episodes", "record_timing"},
             "run");
  r.total_steps = get_or(j, "total_steps", r.total_steps);
  r.phase_length = get_or(j, "phase_length", r.phase_length);
  r.k_max = get_or(j, "k_max", r.k_max);
  r.real_updates = get_or(j, "real_updates", r.real_updates);
  r.synthetic_updates = get_or(j, "synthetic_updates", r.synthetic_updates);
  if (j.contains("acting_epsilon")) r.acting = parse_epsilon(j.at("acting_epsilon"), r.acting, "run.acting_epsilon");
  r.rollout_epsilon = get_or(j, "rollout_epsilon", r.rollout_epsilon);
  if (j.contains("dqn")) r.dqn = parse_dqn(j.at("dqn"), r.dqn, "run.dqn");
  if (j.contains("model")) r.model = parse_model(j.at("model"), r.model);
  r.eval_episodes = get_or(j, "eval_episodes", r.eval_episodes);
  r.curve_eval_episodes = get_or(j, "curve_eval_episodes", r.curve_eval_episodes);
  r.record_timing = get_or(j, "record_timing", r.record_timing);
  return r;
}

}  // namespace detail

/// Reads a metareasoner from a meta-training checkpoint or a bare agent
/// checkpoint. Throws CheckpointError on unreadable or malformed content.
inline std::shared_ptr<const DqnAgent> load_meta_agent(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
    const auto& agent_json = j.contains("agent") ? j.at("agent") : j;
    auto agent = std::make_shared<DqnAgent>(agent_from_json(agent_json));
    if (agent->obs_dim() != kMetaObsDim || agent->action_count() != kMetaActionCount)
      throw CheckpointError("meta agent has wrong input/output shape");
    return agent;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

/// Parses one approach: either a label ("K=16", "Dec", "Inc", "IncDec",
/// "Meta") or an object {"type": ..., ...}.
inline RolloutController parse_controller(const nlohmann::json& j, const std::optional<fs::path>& meta_checkpoint,
                                          const fs::path& base_dir) {
  auto meta_from = [&](const std::optional<fs::path>& path) -> RolloutController {
    if (!path) throw ConfigError("Meta approach requires a checkpoint path");
    const fs::path p = path->is_absolute() ? *path : base_dir / *path;
    if (!fs::exists(p)) throw ConfigError("meta checkpoint not found: " + p.string());
    return MetaController{load_meta_agent(p)};
  };
  auto static_k = [](int k) -> RolloutController {
    if (k < 0 || k > 32) throw ConfigError("static K must lie in [0, 32]");
    return StaticController{k};
  };

  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name.rfind("K=", 0) == 0) {
      int k = -1;
      const auto digits = name.substr(2);
      const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), k);
      if (res.ec != std::errc() || res.ptr != digits.data() + digits.size()) throw ConfigError("invalid approach: " + name);
      return static_k(k);
    }
    if (name == "Dec") return ScheduledController{ScheduleKind::Dec};
    if (name == "Inc") return ScheduledController{ScheduleKind::Inc};
    if (name == "IncDec") return ScheduledController{ScheduleKind::IncDec};
    if (name == "Meta") return meta_from(meta_checkpoint);
    throw ConfigError("unknown controller: " + name);
  }
  if (!j.is_object() || !j.contains("type")) throw ConfigError("controller must be a label or an object with 'type'");
  const auto type = j.at("type").get<std::string>();
  if (type == "static") {
    detail::check_keys(j, {"type", "k"}, "controller");
    if (!j.contains("k")) throw ConfigError("static controller requires 'k'");
    return static_k(j.at("k").get<int>());
  }
  if (type == "dec" || type == "inc" || type == "incdec") {
    detail::check_keys(j, {"type"}, "controller");
    const ScheduleKind kind = type == "dec" ? ScheduleKind::Dec : type == "inc" ? ScheduleKind::Inc : ScheduleKind::IncDec;
    return ScheduledController{kind};
  }
  if (type == "meta") {
    detail::check_keys(j, {"type", "checkpoint"}, "controller");
    return meta_from(j.contains("checkpoint") ? std::optional<fs::path>(j.at("checkpoint").get<std::string>())
                                              : meta_checkpoint);
  }
  if (type == "scripted") {
    detail::check_keys(j, {"type", "actions"}, "controller");
    ScriptedController s;
    for (const auto& a : j.at("actions")) {
      try {
        s.actions.push_back(parse_meta_action(a.get<std::string>()));
      } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
      }
    }
    return s;
  }
  throw ConfigError("unknown controller type: " + type);
}

inline std::optional<std::uint64_t> seed_from_environment() {
  const char* v = std::getenv("DYNAMETA_SEED");
  if (!v || !*v) return std::nullopt;
  std::uint64_t seed = 0;
  const std::string s(v);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), seed);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("DYNAMETA_SEED must be an unsigned integer");
  return seed;
}

/// Parses and validates a configuration document. Relative paths inside the
/// document resolve against `base_dir`. Throws ConfigError.
inline ExperimentConfig parse_experiment(const std::string& text, const fs::path& base_dir = ".") {
  ExperimentConfig cfg;
  cfg.source_text = text;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    detail::check_keys(j,
                       {"schema_version", "env", "run", "controller", "approaches", "meta_checkpoint", "seeds",
                        "seed_count", "master_seed", "output_dir", "jobs", "meta"},
                       "config");
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion)
      throw ConfigError("schema_version must be " + std::to_string(kSchemaVersion));
    if (!j.contains("env")) throw ConfigError("config requires 'env'");

    const EnvConfig env = j.at("env").get<EnvConfig>();
    cfg.run = default_run_config(env.kind, env.variant);
    cfg.run.env = env;
    if (j.contains("run")) cfg.run = detail::parse_run(j.at("run"), cfg.run);
    validate(cfg.run);

    cfg.run.master_seed = detail::get_or<std::uint64_t>(j, "master_seed", 0);
    if (auto s = seed_from_environment()) cfg.run.master_seed = *s;

    if (j.contains("seeds") && j.contains("seed_count")) throw ConfigError("give either 'seeds' or 'seed_count'");
    if (j.contains("seeds")) {
      cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } else {
      const int n = detail::get_or(j, "seed_count", 1);
      if (n < 1) throw ConfigError("seed_count must be >= 1");
      for (int i = 1; i <= n; ++i) cfg.seeds.push_back(static_cast<std::uint64_t>(i));
    }
    if (cfg.seeds.empty()) throw ConfigError("seed list must be non-empty");
    if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size())
      throw ConfigError("seed list contains duplicates");
    std::sort(cfg.seeds.begin(), cfg.seeds.end());

    std::optional<fs::path> meta_checkpoint;
    if (j.contains("meta_checkpoint")) meta_checkpoint = j.at("meta_checkpoint").get<std::string>();
    if (j.contains("controller")) cfg.controller = parse_controller(j.at("controller"), meta_checkpoint, base_dir);
    if (j.contains("approaches")) {
      for (const auto& a : j.at("approaches")) cfg.approaches.push_back(parse_controller(a, meta_checkpoint, base_dir));
      std::set<std::string> labels;
      for (const auto& a : cfg.approaches)
        if (!labels.insert(approach_label(a)).second) throw ConfigError("duplicate approach " + approach_label(a));
    }

    if (j.contains("output_dir")) {
      cfg.output_dir = j.at("output_dir").get<std::string>();
      if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
    }
    cfg.jobs = detail::get_or(j, "jobs", 1);
    if (cfg.jobs < 1) throw ConfigError("jobs must be >= 1");

    if (j.contains("meta")) {
      const auto& m = j.at("meta");
      detail::check_keys(m,
                         {"episodes", "checkpoint_every", "epsilon", "updates_per_transition", "target_sync_episodes",
                          "agent"},
                         "meta");
      cfg.meta.episodes = detail::get_or(m, "episodes", cfg.meta.episodes);
      cfg.meta.checkpoint_every = detail::get_or(m, "checkpoint_every", cfg.meta.checkpoint_every);
      if (m.contains("epsilon")) cfg.meta.epsilon = detail::parse_epsilon(m.at("epsilon"), cfg.meta.epsilon, "meta.epsilon");
      cfg.meta.updates_per_transition = detail::get_or(m, "updates_per_transition", cfg.meta.updates_per_transition);
      cfg.meta.target_sync_episodes = detail::get_or(m, "target_sync_episodes", cfg.meta.target_sync_episodes);
      if (m.contains("agent")) cfg.meta.agent = detail::parse_dqn(m.at("agent"), cfg.meta.agent, "meta.agent");
      if (cfg.meta.episodes < 1 || cfg.meta.checkpoint_every < 1 || cfg.meta.updates_per_transition < 0 ||
          cfg.meta.target_sync_episodes < 1)
        throw ConfigError("meta: invalid training options");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_experiment(text, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

// ---------------------------------------------------------------------------
// Persistence.

inline nlohmann::json subnet_report_json(const SubnetReport& r) {
  return {{"epochs", r.epochs},
          {"best_epoch", r.best_epoch},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"stop_reason", to_string(r.reason)}};
}

inline nlohmann::json run_result_json(const RunResult& r, const RunConfig& cfg) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) {
    phases.push_back({{"phase", p.phase},
                      {"t", p.t},
                      {"K", p.k},
                      {"J", p.quality},
                      {"episodes", p.episodes},
                      {"return_error", p.return_error},
                      {"length_error", p.length_error},
                      {"errors_measured", p.errors_measured},
                      {"rollouts", p.rollouts},
                      {"synthetic_steps", p.synthetic_steps},
                      {"eval_score", p.eval_score},
                      {"wall_ms", p.wall_ms},
                      {"fit",
                       {{"transition", subnet_report_json(p.fit.transition)},
                        {"reward", subnet_report_json(p.fit.reward)},
                        {"terminal", subnet_report_json(p.fit.terminal)}}}});
  }
  return {{"approach", r.approach},
          {"seed", r.seed},
          {"master_seed", cfg.master_seed},
          {"env", cfg.env},
          {"total_steps", cfg.total_steps},
          {"phase_length", cfg.phase_length},
          {"final_score", r.final_score},
          {"k_trace", r.k_trace()},
          {"phases", phases}};
}

inline const char* kPhaseCsvHeader[] = {"run_id", "phase", "K", "J", "return_error", "length_error", "eval_score", "wall_ms"};

inline std::string phase_csv(const std::vector<RunResult>& runs) {
  std::string out = csv_row(std::vector<std::string>(std::begin(kPhaseCsvHeader), std::end(kPhaseCsvHeader)));
  for (const auto& r : runs)
    for (const auto& p : r.phases)
      out += csv_row({std::to_string(r.seed), std::to_string(p.phase), std::to_string(p.k), format_number(p.quality),
                      format_number(p.return_error), format_number(p.length_error), format_number(p.eval_score),
                      format_number(p.wall_ms)});
  return out;
}

/// Runs one controller over every seed (in parallel up to `jobs`), returning
/// results in seed order.
inline std::vector<RunResult> run_seeds(const RunConfig& base, const RolloutController& spec,
                                        const std::vector<std::uint64_t>& seeds, int jobs) {
  std::vector<RunResult> results(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t i) {
    RunConfig run = base;
    run.seed = seeds[i];
    auto controller = make_controller(spec);
    results[i] = run_training(run, *controller);
    results[i].approach = approach_label(spec);
  });
  return results;
}

struct CommandOptions {
  fs::path config;
  std::optional<fs::path> out;
  std::optional<int> jobs;
  bool resume = false;
  // Stops meta training after this many episodes in this invocation, leaving
  // the output as an interrupted run would.
  std::optional<int> stop_after;
};

namespace detail {

inline void apply_overrides(ExperimentConfig& cfg, const CommandOptions& opt) {
  if (opt.out) cfg.output_dir = *opt.out;
  if (opt.jobs) {
    if (*opt.jobs < 1) throw ConfigError("--jobs must be >= 1");
    cfg.jobs = *opt.jobs;
  }
}

inline void prepare_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("output directory not writable: " + dir.string());
}

template <class Body>
int guarded(Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalidConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCorruptCheckpoint;
  } catch (const DivergenceError& e) {
    std::cerr << "error: run diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalidConfig;
  }
}

}  // namespace detail

/// `run`: one run per seed of the configured controller. Writes
/// run_<seed>.json per seed, phases.csv (seed-sorted), and config.json.
inline int cmd_run(const CommandOptions& opt) {
  return detail::guarded([&] {
    ExperimentConfig cfg = load_experiment(opt.config);
    detail::apply_overrides(cfg, opt);
    if (!cfg.controller) throw ConfigError("run requires a 'controller'");
    const auto results = run_seeds(cfg.run, *cfg.controller, cfg.seeds, cfg.jobs);

    detail::prepare_output_dir(cfg.output_dir);
    write_text(cfg.output_dir / "config.json", cfg.source_text);
    for (const auto& r : results)
      write_text(cfg.output_dir / ("run_" + std::to_string(r.seed) + ".json"), run_result_json(r, cfg.run).dump(2) + "\n");
    write_text(cfg.output_dir / "phases.csv", phase_csv(results));
    return static_cast<int>(kExitOk);
  });
}

inline nlohmann::json summary_row_json(const std::string& approach, const ScoreSummary& s) {
  nlohmann::json row{{"approach", approach}, {"mean", s.mean}, {"n", s.n}};
  row["stderr"] = s.stderr_ ? nlohmann::json(*s.stderr_) : nlohmann::json(nullptr);
  return row;
}

/// `sweep`: every approach over the seed set. Writes <approach>/run_<seed>.json
/// and <approach>/phases.csv per approach plus results.json (mean, stderr, n).
inline int cmd_sweep(const CommandOptions& opt) {
  return detail::guarded([&] {
    ExperimentConfig cfg = load_experiment(opt.config);
    detail::apply_overrides(cfg, opt);
    if (cfg.approaches.empty()) throw ConfigError("sweep requires a non-empty 'approaches' list");

    std::vector<std::vector<RunResult>> all;
    for (const auto& a : cfg.approaches) all.push_back(run_seeds(cfg.run, a, cfg.seeds, cfg.jobs));

    detail::prepare_output_dir(cfg.output_dir);
    write_text(cfg.output_dir / "config.json", cfg.source_text);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.approaches.size(); ++i) {
      const std::string label = approach_label(cfg.approaches[i]);
      const fs::path dir = cfg.output_dir / label_slug(label);
      fs::create_directories(dir);
      std::vector<double> scores;
      for (const auto& r : all[i]) {
        write_text(dir / ("run_" + std::to_string(r.seed) + ".json"), run_result_json(r, cfg.run).dump(2) + "\n");
        scores.push_back(r.final_score);
      }
      write_text(dir / "phases.csv", phase_csv(all[i]));
      rows.push_back(summary_row_json(label, summarize(scores)));
    }
    nlohmann::json table{{"env", cfg.run.env}, {"seeds", cfg.seeds}, {"rows", rows}};
    write_text(cfg.output_dir / "results.json", table.dump(2) + "\n");
    return static_cast<int>(kExitOk);
  });
}

// ---------------------------------------------------------------------------
// Meta training.

inline MetaTrainConfig meta_train_config(const ExperimentConfig& cfg) {
  MetaTrainConfig m;
  m.run = cfg.run;
  m.episodes = cfg.meta.episodes;
  m.epsilon = cfg.meta.epsilon;
  m.updates_per_transition = cfg.meta.updates_per_transition;
  m.target_sync_episodes = cfg.meta.target_sync_episodes;
  m.agent = cfg.meta.agent;
  return m;
}

inline std::string checkpoint_name(int episode) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "meta_ep%06d.json", episode);
  return buf;
}

inline const char* kMetaCsvHeader[] = {"meta_episode", "score", "epsilon", "mean_K_chosen"};

inline void write_meta_checkpoint(const fs::path& path, const MetaTrainer& trainer) {
  nlohmann::json j = trainer.to_json();
  j["format"] = "dynameta-meta-checkpoint";
  j["schema_version"] = kSchemaVersion;
  // Write-then-rename so an interruption never leaves a truncated checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, j.dump() + "\n");
  fs::rename(tmp, path);
}

inline std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  if (!fs::is_directory(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("meta_ep", 0) == 0 && e.path().extension() == ".json" && (!best || name > best->filename().string()))
      best = e.path();
  }
  return best;
}

/// Keeps the header and rows with meta_episode <= `episodes`.
inline std::string truncate_meta_csv(const std::string& text, int episodes) {
  std::istringstream in(text);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      out += line + "\r\n";
      header = false;
      continue;
    }
    const int ep = std::atoi(line.substr(0, line.find(',')).c_str());
    if (ep >= 1 && ep <= episodes) out += line + "\r\n";
  }
  if (header) out = csv_row(std::vector<std::string>(std::begin(kMetaCsvHeader), std::end(kMetaCsvHeader)));
  return out;
}

/// `meta-train`: trains the metareasoner, appending one CSV row per meta
/// episode, with checkpoints every `checkpoint_every` episodes plus a final
/// one (meta_final.json). With `resume`, continues from the latest checkpoint.
inline int cmd_meta_train(const CommandOptions& opt) {
  return detail::guarded([&] {
    ExperimentConfig cfg = load_experiment(opt.config);
    detail::apply_overrides(cfg, opt);
    MetaTrainer trainer(meta_train_config(cfg));

    detail::prepare_output_dir(cfg.output_dir);
    const fs::path ckpt_dir = cfg.output_dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    const fs::path csv_path = cfg.output_dir / "meta_train.csv";

    if (opt.resume) {
      if (auto latest = latest_checkpoint(ckpt_dir)) {
        try {
          trainer.restore(nlohmann::json::parse(read_text(*latest)));
        } catch (const std::exception& e) {
          throw CheckpointError("corrupt checkpoint " + latest->string() + ": " + e.what());
        }
      }
      const std::string existing = fs::exists(csv_path) ? read_text(csv_path) : std::string();
      write_text(csv_path, truncate_meta_csv(existing, trainer.episodes_done()));
    } else {
      write_text(cfg.output_dir / "config.json", cfg.source_text);
      write_text(csv_path, csv_row(std::vector<std::string>(std::begin(kMetaCsvHeader), std::end(kMetaCsvHeader))));
    }

    std::ofstream csv(csv_path, std::ios::binary | std::ios::app);
    int ran = 0;
    while (!trainer.finished()) {
      if (opt.stop_after && ran >= *opt.stop_after) return static_cast<int>(kExitOk);
      const MetaEpisodeRecord rec = trainer.run_episode();
      ++ran;
      if (rec.diverged) std::cerr << "warning: meta episode " << rec.episode << " skipped: " << rec.error << "\n";
      csv << csv_row({std::to_string(rec.episode), format_number(rec.score), format_number(rec.epsilon),
                      format_number(rec.mean_k)});
      csv.flush();
      if (rec.episode % cfg.meta.checkpoint_every == 0)
        write_meta_checkpoint(ckpt_dir / checkpoint_name(rec.episode), trainer);
    }
    write_meta_checkpoint(cfg.output_dir / "meta_final.json", trainer);
    return static_cast<int>(kExitOk);
  });
}

// ---------------------------------------------------------------------------
// Plot data export.

inline const char* kCurveCsvHeader[] = {"phase", "mean_eval", "std_eval", "mean_K", "std_K"};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

/// Curve CSV for one approach from its run documents.
inline std::string curve_csv(const std::vector<nlohmann::json>& runs) {
  std::size_t phases = runs.front().at("phases").size();
  for (const auto& r : runs) phases = std::min(phases, r.at("phases").size());
  std::string out = csv_row(std::vector<std::string>(std::begin(kCurveCsvHeader), std::end(kCurveCsvHeader)));
  for (std::size_t p = 0; p < phases; ++p) {
    std::vector<double> evals, ks;
    for (const auto& r : runs) {
      evals.push_back(r.at("phases")[p].at("eval_score").get<double>());
      ks.push_back(r.at("phases")[p].at("K").get<double>());
    }
    const auto [me, se] = mean_std(evals);
    const auto [mk, sk] = mean_std(ks);
    out += csv_row({std::to_string(p + 1), format_number(me), format_number(se), format_number(mk), format_number(sk)});
  }
  return out;
}

/// `export-plots`: groups every run_*.json under the results directory by
/// approach and writes plots/curve_<approach>.csv for each.
inline int cmd_export_plots_data(const fs::path& results_dir) {
  return detail::guarded([&] {
    if (!fs::is_directory(results_dir)) throw ConfigError("results directory not found: " + results_dir.string());
    std::map<std::string, std::vector<nlohmann::json>> by_approach;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(results_dir)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && name.rfind("run_", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        auto j = nlohmann::json::parse(read_text(f));
        by_approach[j.at("approach").get<std::string>()].push_back(std::move(j));
      } catch (const std::exception& e) {
        throw ConfigError("malformed run result " + f.string() + ": " + e.what());
      }
    }
    if (by_approach.empty()) throw ConfigError("no run results under " + results_dir.string());
    const fs::path out_dir = results_dir / "plots";
    fs::create_directories(out_dir);
    for (const auto& [label, runs] : by_approach)
      write_text(out_dir / ("curve_" + label_slug(label) + ".csv"), curve_csv(runs));
    return static_cast<int>(kExitOk);
  });
}

}  // namespace dynameta
