#pragma once

// MountainCar and Acrobot classic-control dynamics, original and perturbed.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include <json.hpp>

#include "dynameta/common.hpp"

namespace dynameta {

enum class EnvKind { MountainCar, Acrobot };
enum class Variant { Original, Modified };

inline constexpr int kActionCount = 3;

struct EnvConfig {
  EnvKind kind = EnvKind::MountainCar;
  Variant variant = Variant::Original;

  // MountainCar: dimensionless coefficients. Acrobot: m/s^2.
  double gravity = 0.0025;
  double force = 0.001;
  double goal_position = 0.5;
  double min_position = -1.2;
  double max_position = 0.6;
  double max_speed = 0.07;

  double link1_length = 1.0;
  double link1_mass = 1.0;
  double link2_length = 1.0;
  double link2_mass = 1.0;
  double link_inertia = 1.0;
  double dt = 0.2;
  double max_vel1 = 4.0 * std::numbers::pi;
  double max_vel2 = 9.0 * std::numbers::pi;

  int episode_cap = 200;
  int action_count = kActionCount;

  int obs_dim() const { return kind == EnvKind::MountainCar ? 2 : 6; }
};

/// Internal dynamical state. MountainCar uses q[0..1] = (position, velocity);
/// Acrobot uses q = (theta1, theta2, dtheta1, dtheta2).
struct EnvState {
  std::array<double, 4> q{};
  int step_count = 0;

  bool operator==(const EnvState&) const = default;
};

struct Transition {
  Observation state;
  int action = 0;
  double reward = 0.0;
  Observation next_state;
  bool terminal = false;
  // Cap truncation: terminal is also set, but values bootstrap through it.
  bool truncated = false;
};

struct StepResult {
  EnvState state;
  double reward = -1.0;
  bool terminal = false;
  bool truncated = false;
};

inline const char* to_string(EnvKind k) {
  return k == EnvKind::MountainCar ? "MountainCar" : "Acrobot";
}
inline const char* to_string(Variant v) { return v == Variant::Original ? "original" : "modified"; }

inline EnvKind parse_env_kind(const std::string& s) {
  if (s == "MountainCar") return EnvKind::MountainCar;
  if (s == "Acrobot") return EnvKind::Acrobot;
  throw ContractViolation("unknown env kind: " + s);
}

inline Variant parse_variant(const std::string& s) {
  if (s == "original") return Variant::Original;
  if (s == "modified") return Variant::Modified;
  throw ContractViolation("unknown env variant: " + s);
}

inline EnvConfig make_env(EnvKind kind, Variant variant) {
  EnvConfig cfg;
  cfg.kind = kind;
  cfg.variant = variant;
  if (kind == EnvKind::MountainCar) {
    cfg.episode_cap = 200;
    if (variant == Variant::Modified) {
      cfg.gravity = 0.003;
      cfg.goal_position = -1.1;
    }
  } else {
    cfg.gravity = 9.8;
    cfg.episode_cap = 500;
    if (variant == Variant::Modified) {
      cfg.gravity = 12.0;
      cfg.link1_length = 1.2;
      cfg.link1_mass = 1.2;
      cfg.link2_length = 0.8;
      cfg.link2_mass = 0.8;
    }
  }
  return cfg;
}

/// Per-feature observation bounds, used to clip model predictions.
inline std::pair<Observation, Observation> obs_bounds(const EnvConfig& cfg) {
  Observation lo(cfg.obs_dim()), hi(cfg.obs_dim());
  if (cfg.kind == EnvKind::MountainCar) {
    lo << cfg.min_position, -cfg.max_speed;
    hi << cfg.max_position, cfg.max_speed;
  } else {
    lo << -1, -1, -1, -1, -cfg.max_vel1, -cfg.max_vel2;
    hi << 1, 1, 1, 1, cfg.max_vel1, cfg.max_vel2;
  }
  return {lo, hi};
}

inline Observation observe(const EnvConfig& cfg, const EnvState& s) {
  Observation o(cfg.obs_dim());
  if (cfg.kind == EnvKind::MountainCar) {
    o << s.q[0], s.q[1];
  } else {
    o << std::cos(s.q[0]), std::sin(s.q[0]), std::cos(s.q[1]), std::sin(s.q[1]), s.q[2], s.q[3];
  }
  return o;
}

inline EnvState env_reset(const EnvConfig& cfg, Rng& rng) {
  EnvState s;
  if (cfg.kind == EnvKind::MountainCar) {
    s.q[0] = uniform(rng, -0.6, -0.4);
    s.q[1] = 0.0;
  } else {
    for (auto& x : s.q) x = uniform(rng, -0.1, 0.1);
  }
  return s;
}

namespace detail {

// Valley bottom of the sin(3x) MountainCar landscape. A goal left of it is
// reached by driving left (x <= goal), otherwise by driving right.
inline constexpr double kValleyBottom = -std::numbers::pi / 6.0;

inline double wrap_angle(double x) {
  double y = std::remainder(x, 2.0 * std::numbers::pi);
  if (y <= -std::numbers::pi) y += 2.0 * std::numbers::pi;
  return y;
}

using Vec4 = std::array<double, 4>;

// Two-link underactuated arm, torque on the second joint.
inline Vec4 acrobot_derivative(const EnvConfig& c, const Vec4& s, double torque) {
  const double m1 = c.link1_mass, m2 = c.link2_mass, l1 = c.link1_length;
  const double lc1 = 0.5 * c.link1_length, lc2 = 0.5 * c.link2_length;
  const double i1 = c.link_inertia, i2 = c.link_inertia, g = c.gravity;
  const double th1 = s[0], th2 = s[1], dth1 = s[2], dth2 = s[3];
  const double pi2 = std::numbers::pi / 2.0;

  const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(th2)) + i1 + i2;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(th2)) + i2;
  const double phi2 = m2 * lc2 * g * std::cos(th1 + th2 - pi2);
  const double phi1 = -m2 * l1 * lc2 * dth2 * dth2 * std::sin(th2) -
                      2.0 * m2 * l1 * lc2 * dth2 * dth1 * std::sin(th2) +
                      (m1 * lc1 + m2 * l1) * g * std::cos(th1 - pi2) + phi2;
  const double ddth2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dth1 * dth1 * std::sin(th2) - phi2) /
                       (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
  const double ddth1 = -(d2 * ddth2 + phi1) / d1;
  return {dth1, dth2, ddth1, ddth2};
}

inline Vec4 rk4_step(const EnvConfig& c, const Vec4& s, double torque) {
  auto axpy = [](const Vec4& x, double h, const Vec4& k) {
    return Vec4{x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2], x[3] + h * k[3]};
  };
  const double h = c.dt;
  const Vec4 k1 = acrobot_derivative(c, s, torque);
  const Vec4 k2 = acrobot_derivative(c, axpy(s, h / 2.0, k1), torque);
  const Vec4 k3 = acrobot_derivative(c, axpy(s, h / 2.0, k2), torque);
  const Vec4 k4 = acrobot_derivative(c, axpy(s, h, k3), torque);
  Vec4 out;
  for (int i = 0; i < 4; ++i) out[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

}  // namespace detail

inline bool is_goal(const EnvConfig& cfg, const EnvState& s) {
  if (cfg.kind == EnvKind::MountainCar) {
    if (cfg.goal_position < detail::kValleyBottom) return s.q[0] <= cfg.goal_position;
    return s.q[0] >= cfg.goal_position;
  }
  return -std::cos(s.q[0]) - std::cos(s.q[0] + s.q[1]) > 1.0;
}

inline StepResult env_step(const EnvConfig& cfg, const EnvState& s, int action) {
  if (action < 0 || action >= cfg.action_count)
    throw ContractViolation("action index out of range: " + std::to_string(action));

  StepResult r;
  r.state = s;
  auto& q = r.state.q;
  const double push = static_cast<double>(action - 1);
  if (cfg.kind == EnvKind::MountainCar) {
    double v = q[1] + push * cfg.force - cfg.gravity * std::cos(3.0 * q[0]);
    v = std::clamp(v, -cfg.max_speed, cfg.max_speed);
    double x = std::clamp(q[0] + v, cfg.min_position, cfg.max_position);
    if (x == cfg.min_position && v < 0.0) v = 0.0;
    q[0] = x;
    q[1] = v;
  } else {
    auto next = detail::rk4_step(cfg, q, push);
    next[0] = detail::wrap_angle(next[0]);
    next[1] = detail::wrap_angle(next[1]);
    next[2] = std::clamp(next[2], -cfg.max_vel1, cfg.max_vel1);
    next[3] = std::clamp(next[3], -cfg.max_vel2, cfg.max_vel2);
    q = next;
  }
  r.state.step_count = s.step_count + 1;
  r.reward = -1.0;
  const bool goal = is_goal(cfg, r.state);
  const bool capped = r.state.step_count >= cfg.episode_cap;
  r.terminal = goal || capped;
  r.truncated = capped && !goal;
  return r;
}

// JSON: the harness config names the canonical parameter set by (kind, variant)
// and may override any of the listed physical fields.

inline void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"variant", to_string(c.variant)},
                     {"gravity", c.gravity},
                     {"goal_position", c.goal_position},
                     {"force", c.force},
                     {"link1_length", c.link1_length},
                     {"link1_mass", c.link1_mass},
                     {"link2_length", c.link2_length},
                     {"link2_mass", c.link2_mass},
                     {"dt", c.dt},
                     {"episode_cap", c.episode_cap}};
}

inline void from_json(const nlohmann::json& j, EnvConfig& c) {
  require(j.is_object(), "env config must be an object");
  require(j.contains("kind"), "env config requires 'kind'");
  const Variant variant = j.contains("variant") ? parse_variant(j.at("variant").get<std::string>()) : Variant::Original;
  c = make_env(parse_env_kind(j.at("kind").get<std::string>()), variant);
  for (const auto& [key, value] : j.items()) {
    if (key == "kind" || key == "variant") continue;
    if (key == "gravity") c.gravity = value.get<double>();
    else if (key == "goal_position") c.goal_position = value.get<double>();
    else if (key == "force") c.force = value.get<double>();
    else if (key == "link1_length") c.link1_length = value.get<double>();
    else if (key == "link1_mass") c.link1_mass = value.get<double>();
    else if (key == "link2_length") c.link2_length = value.get<double>();
    else if (key == "link2_mass") c.link2_mass = value.get<double>();
    else if (key == "dt") c.dt = value.get<double>();
    else if (key == "episode_cap") c.episode_cap = value.get<int>();
    else throw ContractViolation("unknown env config key: " + key);
  }
  require(c.episode_cap >= 1, "episode_cap must be >= 1");
}

}  // namespace dynameta
