#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dynameta/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Rollout-length control for Dyna-DQN"};
  app.require_subcommand(1);

  dynameta::CommandOptions opt;
  std::string out;
  int jobs = 0;
  int stop_after = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "train the configured controller once per seed");
  add_common(run);
  auto* sweep = app.add_subcommand("sweep", "train every approach over the seed set");
  add_common(sweep);
  auto* meta = app.add_subcommand("meta-train", "train the metareasoner");
  add_common(meta);
  meta->add_flag("--resume", opt.resume, "continue from the latest checkpoint");
  meta->add_option("--stop-after", stop_after, "stop after this many meta episodes")->group("");
  auto* plots = app.add_subcommand("export-plots", "write learning-curve CSVs from a results directory");
  std::string results;
  plots->add_option("--config", results, "experiment configuration, or a results directory")->required();
  plots->add_option("--out", out, "results directory (overrides output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dynameta::kExitInvalidConfig;
  }

  if (!out.empty()) opt.out = out;
  if (jobs > 0) opt.jobs = jobs;
  if (stop_after > 0) opt.stop_after = stop_after;

  if (*run) return dynameta::cmd_run(opt);
  if (*sweep) return dynameta::cmd_sweep(opt);
  if (*meta) return dynameta::cmd_meta_train(opt);
  if (!out.empty() || std::filesystem::is_directory(results)) return dynameta::cmd_export_plots_data(out.empty() ? results : out);
  return dynameta::detail::guarded(
      [&] { return dynameta::cmd_export_plots_data(dynameta::load_experiment(results).output_dir); });
}
