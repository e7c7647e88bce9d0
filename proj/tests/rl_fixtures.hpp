// Tiny environments with known optimal values, shared by the RL unit tests
// and the acceptance suite.
#pragma once

#include <algorithm>

#include "broach/environment.hpp"

namespace testrl {

// Deterministic two-armed bandit: one step, reward 1 for alerting, 0 for not.
// obs(0) stands in for the QHI channel.
struct Bandit final : broach::env::EpisodicEnv {
  int observation_size() const override { return 2; }
  Eigen::VectorXd reset(broach::Rng&) override {
    done_ = false;
    return obs();
  }
  StepResult step(int a) override {
    if (done_) throw broach::ProtocolError("step after done");
    done_ = true;
    return {Eigen::VectorXd::Zero(2), a == 1 ? 1.0 : 0.0, true};
  }
  Eigen::VectorXd obs() const {
    Eigen::VectorXd o(2);
    o << 0.9, 1.0;
    return o;
  }
  bool done_ = false;
};

// Five-day episode, three heat levels cycling from a random per-episode
// phase, budget 1. Alerting pays the current level. The state space
// (t, phase, budget) has 30 points, small enough for exact value iteration.
struct MiniMdp final : broach::env::EpisodicEnv {
  static constexpr int H = 5;
  static constexpr double kLevels[3] = {0.2, 0.55, 0.9};
  int phase = 0, t = 0, budget = 1;

  int observation_size() const override { return 3; }
  Eigen::VectorXd reset(broach::Rng& rng) override {
    phase = std::uniform_int_distribution<int>(0, 2)(rng);
    t = 0;
    budget = 1;
    return obs();
  }
  int level_at(int tt) const { return (phase + tt) % 3; }
  Eigen::VectorXd obs() const {
    Eigen::VectorXd o(3);
    o << kLevels[level_at(t)], t / static_cast<double>(H - 1), static_cast<double>(budget);
    return o;
  }
  StepResult step(int a) override {
    if (t >= H) throw broach::ProtocolError("step after done");
    const int eff = (a == 1 && budget > 0) ? 1 : 0;
    const double r = eff ? kLevels[level_at(t)] : 0.0;
    budget -= eff;
    ++t;
    const bool done = t == H;
    return {done ? Eigen::VectorXd::Zero(3).eval() : obs(), r, done};
  }
};

// Exact optimal value of MiniMdp by backward recursion.
inline double vi_value(int t, int phase, int budget) {
  if (t >= MiniMdp::H) return 0.0;
  const double v0 = vi_value(t + 1, phase, budget);
  if (budget == 0) return v0;
  const double v1 = MiniMdp::kLevels[(phase + t) % 3] + vi_value(t + 1, phase, 0);
  return std::max(v0, v1);
}

}  // namespace testrl
