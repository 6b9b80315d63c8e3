// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. Pass criterion names as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace dynameta;
using dynameta::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradientTolerance = 1e-4;
constexpr int kGradientConfigs = 20;
constexpr int kWalks = 1000;
constexpr int kWalkSteps = 15;
constexpr int kWalkMedianBound = 4;
constexpr double kTelescopeTolerance = 1e-9;
constexpr long kShortRunSteps = 30000;
constexpr long kFullRunSteps = 150000;
constexpr std::uint64_t kBaselineSeeds[] = {1, 2, 3};
constexpr double kModelFreeLow = -200.0;
constexpr double kModelFreeHigh = -170.0;
constexpr double kModelBasedGain = 10.0;
constexpr int kFidelityTransitions = 10000;
constexpr int kFidelityHeldOut = 2000;
constexpr double kFidelityRatio = 0.25;
constexpr int kFidelityEpochCap = 200;
constexpr int kMetaEpisodes = 10;
constexpr int kMetaUpdatesPerTransition = 10;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, x);
  return buf;
}

// Central differences against the analytic gradient, relative error with a
// small absolute floor.
double gradient_error(Mlp net, const Matrix& x, const LossSpec& spec) {
  const Vector analytic = flatten(backward(net, x, spec).grads);
  Vector p = flatten(net);
  double worst = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(p(i)));
    const double keep = p(i);
    p(i) = keep + h;
    unflatten(net, p);
    const double up = evaluate_loss(net, x, spec);
    p(i) = keep - h;
    unflatten(net, p);
    const double down = evaluate_loss(net, x, spec);
    p(i) = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic(i)) / std::max(1e-6, std::abs(numeric) + std::abs(analytic(i))));
  }
  return worst;
}

Outcome gradient_check() {
  Rng rng(2024);
  double worst = 0;
  for (int c = 0; c < kGradientConfigs; ++c) {
    const bool ln = c % 2 == 0;
    const auto kind = (c / 2) % 2 == 0 ? LossKind::MeanSquaredError : LossKind::BinaryCrossEntropyWithLogits;
    std::vector<int> sizes{1 + uniform_index(rng, 6)};
    const int hidden = 1 + uniform_index(rng, 3);
    for (int h = 0; h < hidden; ++h) sizes.push_back(2 + uniform_index(rng, 8));
    sizes.push_back(1 + uniform_index(rng, 3));
    Mlp net = mlp_init(sizes, ln, rng);
    for (auto& l : net.layers) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = uniform(rng, -0.5, 0.5);
      for (Eigen::Index i = 0; i < l.gain.size(); ++i) {
        l.gain(i) = uniform(rng, 0.5, 1.5);
        l.offset(i) = uniform(rng, -0.5, 0.5);
      }
    }
    const int batch = 1 + uniform_index(rng, 8);
    Matrix x(sizes.front(), batch), t(sizes.back(), batch), mask(sizes.back(), batch);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = uniform(rng, -2, 2);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t(i) = kind == LossKind::MeanSquaredError ? uniform(rng, -2, 2) : static_cast<double>(uniform_index(rng, 2));
      mask(i) = 1.0;
    }
    if (c % 5 == 4) mask(0, 0) = 0.0;
    if (mask.sum() == 0) mask(mask.rows() - 1, mask.cols() - 1) = 1.0;
    worst = std::max(worst, gradient_error(net, x, {kind, t, c % 5 == 4 ? mask : Matrix()}));
  }
  return {worst < kGradientTolerance, "max relative error " + fmt("%.3g", worst) + " over 20 configurations"};
}

Outcome meta_action_table() {
  const bool table = apply_meta_action(4, MetaAction::Up) == 6 && apply_meta_action(0, MetaAction::Up) == 1 &&
                     apply_meta_action(1, MetaAction::Down) == 0 && apply_meta_action(5, MetaAction::Down) == 2 &&
                     apply_meta_action(24, MetaAction::Up) == 32 && apply_meta_action(32, MetaAction::NoOp) == 32;
  int out_of_range = 0;
  for (int k = 0; k <= 32; ++k)
    for (auto a : {MetaAction::Up, MetaAction::Down, MetaAction::NoOp}) {
      const int n = apply_meta_action(k, a);
      out_of_range += n < 0 || n > 32;
    }
  return {table && out_of_range == 0,
          std::string("six anchored cases ") + (table ? "hold" : "FAIL") + ", " + std::to_string(out_of_range) +
              " of 99 transitions out of range"};
}

Outcome random_walk() {
  Rng rng(7);
  std::vector<int> finals;
  for (int w = 0; w < kWalks; ++w) {
    int k = 32;
    for (int s = 0; s < kWalkSteps; ++s) k = apply_meta_action(k, static_cast<MetaAction>(uniform_index(rng, 3)));
    finals.push_back(k);
  }
  std::sort(finals.begin(), finals.end());
  const double median = 0.5 * (finals[kWalks / 2 - 1] + finals[kWalks / 2]);
  return {median <= kWalkMedianBound, "median final K " + fmt("%g", median) + " over 1000 walks"};
}

RunConfig short_run() {
  RunConfig cfg = default_run_config(EnvKind::MountainCar, Variant::Modified);
  cfg.total_steps = kShortRunSteps;
  return cfg;
}

Outcome telescoping() {
  RunConfig cfg = default_run_config(EnvKind::Acrobot, Variant::Modified);
  cfg.total_steps = kShortRunSteps;
  cfg.seed = 1;
  auto ctrl = make_controller(ScriptedController{{MetaAction::Up, MetaAction::Up, MetaAction::Down}});
  const RunResult r = run_training(cfg, *ctrl);
  const auto& meta = dynamic_cast<const MetaMdpController&>(*ctrl);
  double sum = 0;
  for (const auto& t : meta.transitions()) sum += t.reward;
  const double gap = std::abs(sum - (r.final_score - r.phases.front().quality));
  return {gap <= kTelescopeTolerance && meta.transitions().size() == r.phases.size(),
          "sum of meta rewards " + fmt("%.6f", sum) + ", J_eval - J_1 = " +
              fmt("%.6f", r.final_score - r.phases.front().quality) + ", gap " + fmt("%.3g", gap)};
}

Outcome determinism() {
  TempDir dir("determinism");
  nlohmann::json j = {{"schema_version", 1},
                      {"env", {{"kind", "MountainCar"}, {"variant", "modified"}}},
                      {"run", {{"total_steps", kShortRunSteps}}},
                      {"controller", "K=16"},
                      {"seeds", {1}}};
  const fs::path config = dir.path() / "config.json";
  std::ofstream(config) << j.dump(2);
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    CommandOptions opt;
    opt.config = config;
    opt.out = dir.path() / ("out" + std::to_string(i));
    if (cmd_run(opt) != 0) return {false, "run command failed"};
    csv[i] = read_text(*opt.out / "phases.csv");
  }
  return {csv[0] == csv[1] && !csv[0].empty(),
          std::string("phase CSVs ") + (csv[0] == csv[1] ? "byte-identical" : "differ") + " (" +
              std::to_string(csv[0].size()) + " bytes)"};
}

struct Baselines {
  std::vector<double> k0, k16;
};

const Baselines& baselines() {
  static const Baselines b = [] {
    Baselines out;
    RunConfig cfg = default_run_config(EnvKind::MountainCar, Variant::Modified);
    cfg.total_steps = kFullRunSteps;
    const std::vector<std::uint64_t> seeds(std::begin(kBaselineSeeds), std::end(kBaselineSeeds));
    for (const auto& r : run_seeds(cfg, StaticController{0}, seeds, 1)) out.k0.push_back(r.final_score);
    for (const auto& r : run_seeds(cfg, StaticController{16}, seeds, 1)) out.k16.push_back(r.final_score);
    return out;
  }();
  return b;
}

std::string list(const std::vector<double>& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + fmt("%.2f", xs[i]);
  return s + "]";
}

Outcome model_free_sanity() {
  const auto& b = baselines();
  const double mean = summarize(b.k0).mean;
  return {mean >= kModelFreeLow && mean <= kModelFreeHigh,
          "K=0 mean " + fmt("%.2f", mean) + " over seeds 1-3 " + list(b.k0) + ", band [-200, -170]"};
}

Outcome model_based_gain() {
  const auto& b = baselines();
  const double gain = summarize(b.k16).mean - summarize(b.k0).mean;
  return {gain >= kModelBasedGain, "K=16 mean " + fmt("%.2f", summarize(b.k16).mean) + " " + list(b.k16) +
                                       " minus K=0 mean = " + fmt("%.2f", gain) + " (need >= 10)"};
}

ReplayBuffer random_transitions(const EnvConfig& env, int n, Rng& rng) {
  ReplayBuffer buf;
  EnvState s = env_reset(env, rng);
  for (int i = 0; i < n; ++i) {
    const int a = uniform_index(rng, 3);
    const StepResult r = env_step(env, s, a);
    buf.push(Transition{observe(env, s), a, r.reward, observe(env, r.state), r.terminal, r.truncated});
    s = r.terminal ? env_reset(env, rng) : r.state;
  }
  return buf;
}

Outcome world_model_fidelity() {
  const EnvConfig env = make_env(EnvKind::MountainCar, Variant::Original);
  int early = 0;
  double worst_ratio = 0;
  std::string epochs;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng data_rng = make_rng(seed, 0, Stream::Env);
    Rng test_rng = make_rng(seed, 1, Stream::Env);
    Rng fit_rng = make_rng(seed, 0, Stream::Model);
    const ReplayBuffer train = random_transitions(env, kFidelityTransitions, data_rng);
    const ReplayBuffer test = random_transitions(env, kFidelityHeldOut, test_rng);
    FitOptions opt;
    opt.epoch_cap = kFidelityEpochCap;
    const auto [model, report] = model_fit(env, train, fit_rng, opt);
    double err = 0, base = 0;
    for (const auto& t : test) {
      const auto p = model_predict(model, t.state, t.action);
      if (!p) return {false, "non-finite prediction"};
      err += (p->next_obs - t.next_state).squaredNorm();
      base += (t.next_state - t.state).squaredNorm();
    }
    worst_ratio = std::max(worst_ratio, std::sqrt(err / base));
    const bool stopped = report.transition.epochs < kFidelityEpochCap && report.reward.epochs < kFidelityEpochCap &&
                         report.terminal.epochs < kFidelityEpochCap;
    early += stopped;
    epochs += (seed > 1 ? " " : "") + std::to_string(report.transition.epochs) + "/" +
              std::to_string(report.reward.epochs) + "/" + std::to_string(report.terminal.epochs);
  }
  return {worst_ratio <= kFidelityRatio && early >= 2,
          "worst RMSE ratio " + fmt("%.4f", worst_ratio) + " (<= 0.25), early stop in " + std::to_string(early) +
              "/3 seeds, epochs " + epochs};
}

Outcome meta_train_smoke() {
  TempDir dir("meta_smoke");
  nlohmann::json j = {{"schema_version", 1},
                      {"env", {{"kind", "MountainCar"}, {"variant", "original"}}},
                      {"run", {{"total_steps", kShortRunSteps}}},
                      {"meta", {{"episodes", kMetaEpisodes}, {"checkpoint_every", 5}}}};
  const fs::path config = dir.path() / "config.json";
  std::ofstream(config) << j.dump(2);
  const fs::path out = dir.path() / "out";

  CommandOptions first;
  first.config = config;
  first.out = out;
  first.stop_after = 6;
  if (cmd_meta_train(first) != 0) return {false, "meta-train failed"};
  CommandOptions resume = first;
  resume.stop_after.reset();
  resume.resume = true;
  if (cmd_meta_train(resume) != 0) return {false, "resumed meta-train failed"};

  for (const fs::path p : {out / "checkpoints" / "meta_ep000005.json", out / "checkpoints" / "meta_ep000010.json",
                           out / "meta_final.json"})
    if (!fs::exists(p)) return {false, "missing checkpoint " + p.filename().string()};
  const auto ckpt = nlohmann::json::parse(read_text(out / "meta_final.json"));
  const long phases = kShortRunSteps / 10000;
  const long transitions = ckpt.at("transitions_recorded").get<long>();
  const long updates = ckpt.at("updates_attempted").get<long>();
  const auto replay = ckpt.at("replay").size();

  std::istringstream csv(read_text(out / "meta_train.csv"));
  std::string line;
  std::getline(csv, line);
  std::vector<int> episodes;
  while (std::getline(csv, line)) episodes.push_back(std::stoi(line.substr(0, line.find(','))));
  std::vector<int> expected(kMetaEpisodes);
  for (int i = 0; i < kMetaEpisodes; ++i) expected[static_cast<std::size_t>(i)] = i + 1;

  const bool ok = transitions == kMetaEpisodes * phases && updates == kMetaUpdatesPerTransition * transitions &&
                  replay == static_cast<std::size_t>(transitions) && episodes == expected &&
                  ckpt.at("episodes_done").get<int>() == kMetaEpisodes;
  return {ok, std::to_string(transitions) + " meta transitions (expect " + std::to_string(kMetaEpisodes * phases) +
                  "), " + std::to_string(updates) + " updates attempted, " + std::to_string(episodes.size()) +
                  " CSV rows after interrupt at 6 and resume"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-check", gradient_check},
      {"meta-action-table", meta_action_table},
      {"random-walk-drift", random_walk},
      {"telescoping-reward", telescoping},
      {"determinism", determinism},
      {"model-free-sanity", model_free_sanity},
      {"model-based-gain", model_based_gain},
      {"world-model-fidelity", world_model_fidelity},
      {"meta-train-smoke", meta_train_smoke},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
