#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dynameta {

using Rng = std::mt19937_64;

// Observations are at most 6-dimensional (Acrobot); the fixed max size keeps
// them off the heap.
inline constexpr int kMaxObsDim = 6;
using Observation = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxObsDim, 1>;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when a caller breaks an operation's precondition (bad action index,
/// shape mismatch, empty size list, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a training loss becomes non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

/// Independent randomness streams of one run. Each component draws from its
/// own stream so that e.g. adding evaluation episodes never perturbs training.
enum class Stream : std::uint64_t {
  Env = 1,
  Agent = 2,
  Replay = 3,
  Model = 4,
  Rollout = 5,
  Eval = 6,
  ModelError = 7,
  Meta = 8,
  MetaReplay = 9,
  CurveEval = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed split: (master, run, stream) -> stream seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t run, Stream stream) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ run);
  return splitmix64(h ^ static_cast<std::uint64_t>(stream));
}

inline Rng make_rng(std::uint64_t master, std::uint64_t run, Stream stream) {
  return Rng(derive_seed(master, run, stream));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_index(Rng& rng, std::size_t n) {
  return static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
}

}  // namespace dynameta
