#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "dynameta/dynameta.hpp"

namespace dynameta::testing {

/// A short MountainCar run: 3 phases of 1000 steps, cheap evaluations.
inline RunConfig tiny_run(Variant variant = Variant::Modified) {
  RunConfig cfg = default_run_config(EnvKind::MountainCar, variant);
  cfg.total_steps = 3000;
  cfg.phase_length = 1000;
  cfg.acting = {1.0, 0.1, 500, 1000};
  cfg.eval_episodes = 2;
  cfg.curve_eval_episodes = 1;
  cfg.model.epoch_cap = 20;
  return cfg;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("dynameta_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace dynameta::testing
