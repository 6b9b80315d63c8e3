#include <array>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace dynameta;

namespace {

// Two-link arm written as M(q) q'' + h(q, q') + phi(q) = [0, tau] and solved
// with Cramer's rule, then integrated with classic RK4.
using State4 = std::array<double, 4>;

State4 arm_rates(const EnvConfig& c, const State4& s, double tau) {
  const double m1 = c.link1_mass, m2 = c.link2_mass, l1 = c.link1_length;
  const double r1 = c.link1_length / 2, r2 = c.link2_length / 2, g = c.gravity, inertia = 1.0;
  const double c2 = std::cos(s[1]), s2 = std::sin(s[1]);
  const double a11 = m1 * r1 * r1 + m2 * (l1 * l1 + r2 * r2 + 2 * l1 * r2 * c2) + 2 * inertia;
  const double a12 = m2 * (r2 * r2 + l1 * r2 * c2) + inertia;
  const double a22 = m2 * r2 * r2 + inertia;
  const double h1 = -m2 * l1 * r2 * s2 * (2 * s[2] * s[3] + s[3] * s[3]);
  const double h2 = m2 * l1 * r2 * s2 * s[2] * s[2];
  const double g1 = (m1 * r1 + m2 * l1) * g * std::sin(s[0]) + m2 * r2 * g * std::sin(s[0] + s[1]);
  const double g2 = m2 * r2 * g * std::sin(s[0] + s[1]);
  const double b1 = -h1 - g1, b2 = tau - h2 - g2;
  const double det = a11 * a22 - a12 * a12;
  return {s[2], s[3], (b1 * a22 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det};
}

State4 arm_rk4(const EnvConfig& c, const State4& s, double tau) {
  auto shift = [](const State4& x, double h, const State4& k) {
    State4 y;
    for (int i = 0; i < 4; ++i) y[i] = x[i] + h * k[i];
    return y;
  };
  const double h = c.dt;
  const State4 k1 = arm_rates(c, s, tau);
  const State4 k2 = arm_rates(c, shift(s, h / 2, k1), tau);
  const State4 k3 = arm_rates(c, shift(s, h / 2, k2), tau);
  const State4 k4 = arm_rates(c, shift(s, h, k3), tau);
  State4 out;
  for (int i = 0; i < 4; ++i) out[i] = s[i] + h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  return out;
}

double wrap(double x) {
  while (x > std::numbers::pi) x -= 2 * std::numbers::pi;
  while (x <= -std::numbers::pi) x += 2 * std::numbers::pi;
  return x;
}

EnvState mc_state(double x, double v) {
  EnvState s;
  s.q = {x, v, 0, 0};
  return s;
}

}  // namespace

TEST(Envs, CanonicalParameters) {
  const auto orig = make_env(EnvKind::MountainCar, Variant::Original);
  EXPECT_EQ(orig.gravity, 0.0025);
  EXPECT_EQ(orig.goal_position, 0.5);
  EXPECT_EQ(orig.force, 0.001);
  const auto mod = make_env(EnvKind::MountainCar, Variant::Modified);
  EXPECT_EQ(mod.gravity, 0.003);
  EXPECT_EQ(mod.goal_position, -1.1);
  EXPECT_EQ(mod.force, 0.001);
  EXPECT_EQ(mod.episode_cap, 200);

  const auto acro = make_env(EnvKind::Acrobot, Variant::Modified);
  EXPECT_EQ(acro.gravity, 12.0);
  EXPECT_EQ(acro.link1_length, 1.2);
  EXPECT_EQ(acro.link1_mass, 1.2);
  EXPECT_EQ(acro.link2_length, 0.8);
  EXPECT_EQ(acro.link2_mass, 0.8);
  EXPECT_EQ(acro.episode_cap, 500);
  EXPECT_EQ(make_env(EnvKind::Acrobot, Variant::Original).gravity, 9.8);
}

TEST(Envs, ResetDistributions) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto s = env_reset(make_env(EnvKind::MountainCar, Variant::Original), rng);
    EXPECT_GE(s.q[0], -0.6);
    EXPECT_LE(s.q[0], -0.4);
    EXPECT_EQ(s.q[1], 0.0);
    EXPECT_EQ(s.step_count, 0);
    const auto a = env_reset(make_env(EnvKind::Acrobot, Variant::Original), rng);
    for (double x : a.q) EXPECT_LE(std::abs(x), 0.1);
  }
  Rng r1(3), r2(3);
  const auto cfg = make_env(EnvKind::Acrobot, Variant::Modified);
  EXPECT_EQ(env_reset(cfg, r1), env_reset(cfg, r2));
}

TEST(Envs, MountainCarCoastStep) {
  const auto cfg = make_env(EnvKind::MountainCar, Variant::Original);
  const auto r = env_step(cfg, mc_state(-0.5, 0.0), 1);
  EXPECT_NEAR(r.state.q[1], -1.7685e-4, 1e-8);
  EXPECT_NEAR(r.state.q[0], -0.50017685, 1e-8);
  EXPECT_EQ(r.reward, -1.0);
  EXPECT_FALSE(r.terminal);
  EXPECT_EQ(r.state.step_count, 1);
}

TEST(Envs, MountainCarGoalPredicates) {
  const auto orig = make_env(EnvKind::MountainCar, Variant::Original);
  for (int a = 0; a < 3; ++a) {
    const auto r = env_step(orig, mc_state(0.5, 0.01), a);
    EXPECT_TRUE(r.terminal);
    EXPECT_FALSE(r.truncated);
  }
  EXPECT_FALSE(is_goal(orig, mc_state(0.49, 0.0)));
  EXPECT_TRUE(is_goal(orig, mc_state(0.5, 0.0)));

  const auto mod = make_env(EnvKind::MountainCar, Variant::Modified);
  EXPECT_TRUE(is_goal(mod, mc_state(-1.15, 0.0)));
  EXPECT_TRUE(is_goal(mod, mc_state(-1.1, 0.0)));
  EXPECT_FALSE(is_goal(mod, mc_state(-1.05, 0.0)));
  EXPECT_FALSE(is_goal(mod, mc_state(-0.5, 0.0)));
  EXPECT_FALSE(is_goal(mod, mc_state(0.55, 0.0)));
}

TEST(Envs, MountainCarLeftWallIsInelastic) {
  const auto cfg = make_env(EnvKind::MountainCar, Variant::Original);
  const auto r = env_step(cfg, mc_state(-1.19, -0.05), 0);
  EXPECT_EQ(r.state.q[0], -1.2);
  EXPECT_EQ(r.state.q[1], 0.0);
}

TEST(Envs, MountainCarStaysInBoundsUnderRandomActions) {
  for (auto variant : {Variant::Original, Variant::Modified}) {
    const auto cfg = make_env(EnvKind::MountainCar, variant);
    Rng rng(11);
    EnvState s = env_reset(cfg, rng);
    for (int i = 0; i < 100000; ++i) {
      const auto r = env_step(cfg, s, uniform_index(rng, 3));
      ASSERT_GE(r.state.q[0], -1.2);
      ASSERT_LE(r.state.q[0], 0.6);
      ASSERT_GE(r.state.q[1], -0.07);
      ASSERT_LE(r.state.q[1], 0.07);
      s = r.terminal ? env_reset(cfg, rng) : r.state;
    }
  }
}

TEST(Envs, EpisodeReturnIsMinusLengthAndCapped) {
  for (auto kind : {EnvKind::MountainCar, EnvKind::Acrobot}) {
    const auto cfg = make_env(kind, Variant::Original);
    Rng rng(5);
    for (int ep = 0; ep < 5; ++ep) {
      EnvState s = env_reset(cfg, rng);
      double ret = 0;
      int len = 0;
      while (true) {
        const auto r = env_step(cfg, s, uniform_index(rng, 3));
        EXPECT_EQ(r.reward, -1.0);
        ret += r.reward;
        ++len;
        s = r.state;
        if (r.terminal) {
          if (len == cfg.episode_cap) EXPECT_EQ(r.truncated, !is_goal(cfg, r.state));
          break;
        }
      }
      EXPECT_LE(len, cfg.episode_cap);
      EXPECT_EQ(ret, -static_cast<double>(len));
    }
  }
}

TEST(Envs, InvalidActionThrows) {
  const auto cfg = make_env(EnvKind::MountainCar, Variant::Original);
  EXPECT_THROW(env_step(cfg, mc_state(-0.5, 0), 3), ContractViolation);
  EXPECT_THROW(env_step(cfg, mc_state(-0.5, 0), -1), ContractViolation);
}

TEST(Envs, StepIsPure) {
  const auto cfg = make_env(EnvKind::Acrobot, Variant::Modified);
  EnvState s;
  s.q = {0.3, -1.2, 2.0, -3.0};
  const auto a = env_step(cfg, s, 2);
  const auto b = env_step(cfg, s, 2);
  EXPECT_EQ(a.state, b.state);
}

TEST(Envs, AcrobotEquilibriumHolds) {
  for (auto variant : {Variant::Original, Variant::Modified}) {
    const auto cfg = make_env(EnvKind::Acrobot, variant);
    EnvState s;
    for (int i = 0; i < 100; ++i) {
      s = env_step(cfg, s, 1).state;
      for (double x : s.q) ASSERT_LE(std::abs(x), 1e-12);
    }
  }
}

TEST(Envs, AcrobotMatchesIndependentIntegrator) {
  for (auto variant : {Variant::Original, Variant::Modified}) {
    const auto cfg = make_env(EnvKind::Acrobot, variant);
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
      EnvState s;
      s.q = {uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -2, 2), uniform(rng, -4, 4)};
      const int a = uniform_index(rng, 3);
      const auto got = env_step(cfg, s, a).state.q;
      State4 want = arm_rk4(cfg, {s.q[0], s.q[1], s.q[2], s.q[3]}, a - 1.0);
      want[0] = wrap(want[0]);
      want[1] = wrap(want[1]);
      want[2] = std::clamp(want[2], -4 * std::numbers::pi, 4 * std::numbers::pi);
      want[3] = std::clamp(want[3], -9 * std::numbers::pi, 9 * std::numbers::pi);
      for (int i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-9) << "component " << i;
    }
  }
}

TEST(Envs, AcrobotGoal) {
  const auto cfg = make_env(EnvKind::Acrobot, Variant::Original);
  EnvState s;
  s.q = {std::numbers::pi, 0, 0, 0};
  EXPECT_TRUE(is_goal(cfg, s));
  s.q = {0, 0, 0, 0};
  EXPECT_FALSE(is_goal(cfg, s));
}

TEST(Envs, AcrobotObservation) {
  const auto cfg = make_env(EnvKind::Acrobot, Variant::Original);
  EnvState s;
  s.q = {0.5, -0.25, 1.5, -2.0};
  const auto o = observe(cfg, s);
  ASSERT_EQ(o.size(), 6);
  EXPECT_DOUBLE_EQ(o(0), std::cos(0.5));
  EXPECT_DOUBLE_EQ(o(1), std::sin(0.5));
  EXPECT_DOUBLE_EQ(o(2), std::cos(-0.25));
  EXPECT_DOUBLE_EQ(o(3), std::sin(-0.25));
  EXPECT_EQ(o(4), 1.5);
  EXPECT_EQ(o(5), -2.0);
}

TEST(Envs, JsonRoundTripAndUnknownKeys) {
  auto cfg = make_env(EnvKind::Acrobot, Variant::Modified);
  cfg.dt = 0.1;
  const nlohmann::json j = cfg;
  const auto back = j.get<EnvConfig>();
  EXPECT_EQ(back.kind, EnvKind::Acrobot);
  EXPECT_EQ(back.variant, Variant::Modified);
  EXPECT_EQ(back.gravity, 12.0);
  EXPECT_EQ(back.dt, 0.1);
  for (const char* key : {"kind", "variant", "gravity", "goal_position", "force", "link1_length", "link1_mass",
                          "link2_length", "link2_mass", "dt", "episode_cap"})
    EXPECT_TRUE(j.contains(key)) << key;

  nlohmann::json bad = {{"kind", "MountainCar"}, {"gravty", 0.1}};
  EXPECT_THROW(bad.get<EnvConfig>(), ContractViolation);
  nlohmann::json override_goal = {{"kind", "MountainCar"}, {"variant", "modified"}, {"goal_position", -1.0}};
  EXPECT_EQ(override_goal.get<EnvConfig>().goal_position, -1.0);
  EXPECT_EQ(override_goal.get<EnvConfig>().gravity, 0.003);
}
