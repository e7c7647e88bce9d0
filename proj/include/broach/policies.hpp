#pragma once

// Alert policies: the non-learned baselines, the QHI-threshold restriction
// wrapper, and the (de)serializable PolicySpec the CLI round-trips. Policies
// are immutable; action sampling takes a caller-owned RNG.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "broach/common.hpp"
#include "broach/environment.hpp"

namespace broach::policy {

enum class Kind { kZero, kRandom, kTopK, kBasicNws, kAaqhi, kNwsReplay, kLearned };
enum class EvalMode { kStochastic, kDeterministic };

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::kZero: return "zero";
    case Kind::kRandom: return "random";
    case Kind::kTopK: return "topk";
    case Kind::kBasicNws: return "basic.nws";
    case Kind::kAaqhi: return "aa.qhi";
    case Kind::kNwsReplay: return "nws";
    case Kind::kLearned: return "learned";
  }
  throw ConfigError("unknown policy kind value");
}

inline Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::kZero, Kind::kRandom, Kind::kTopK, Kind::kBasicNws, Kind::kAaqhi,
                 Kind::kNwsReplay, Kind::kLearned})
    if (kind_name(k) == s) return k;
  throw ConfigError("unknown policy kind '" + s +
                    "' (expected zero|random|topk|basic.nws|aa.qhi|nws|learned)");
}

inline std::string eval_mode_name(EvalMode m) {
  return m == EvalMode::kStochastic ? "stochastic" : "deterministic";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "stochastic") return EvalMode::kStochastic;
  if (s == "deterministic") return EvalMode::kDeterministic;
  throw ConfigError("unknown eval mode '" + s + "'");
}

// The candidate restriction thresholds: 0.50 to 0.90 by 0.05, nine values.
inline std::vector<double> threshold_grid() {
  std::vector<double> g;
  // (50 + 5i)/100 rather than accumulated 0.05 steps, so values round-trip
  // cleanly through decimal artifacts.
  for (int i = 0; i <= 8; ++i) g.push_back(static_cast<double>(50 + 5 * i) / 100.0);
  return g;
}

inline bool threshold_on_grid(double h) {
  for (double g : threshold_grid())
    if (std::abs(h - g) < 1e-9) return true;
  return false;
}

class Policy {
 public:
  virtual ~Policy() = default;
  virtual double prob_alert(const Eigen::VectorXd& obs, const env::EpisodeContext& ctx) const = 0;
};

inline int act(const Policy& p, const Eigen::VectorXd& obs, const env::EpisodeContext& ctx,
               EvalMode mode, Rng& rng) {
  const double prob = p.prob_alert(obs, ctx);
  if (!(prob >= 0.0 && prob <= 1.0)) throw NumericError("alert probability outside [0,1]");
  if (mode == EvalMode::kDeterministic) return prob > 0.5 ? 1 : 0;
  return std::bernoulli_distribution(prob)(rng) ? 1 : 0;
}

class ZeroPolicy final : public Policy {
 public:
  double prob_alert(const Eigen::VectorXd&, const env::EpisodeContext&) const override { return 0.0; }
};

// Sequential hazard b_remaining/days_remaining; makes every budget-sized
// subset of days equally likely.
class RandomBudgetPolicy final : public Policy {
 public:
  double prob_alert(const Eigen::VectorXd&, const env::EpisodeContext& ctx) const override {
    if (ctx.days_remaining <= 0) return 0.0;
    const double p = static_cast<double>(ctx.budget_remaining) / ctx.days_remaining;
    return std::clamp(p, 0.0, 1.0);
  }
};

// Alerts on the budget-many highest-QHI days of the episode, earlier day
// winning ties. Needs the full trajectory, so it is an oracle.
class TopKPolicy final : public Policy {
 public:
  double prob_alert(const Eigen::VectorXd&, const env::EpisodeContext& ctx) const override {
    if (ctx.trajectory_qhi == nullptr)
      throw ProtocolError("topk policy queried without the full-episode QHI trajectory");
    const Eigen::VectorXd& q = *ctx.trajectory_qhi;
    const double today = q(ctx.t);
    int beating = 0;
    for (int u = 0; u < q.size(); ++u)
      if (q(u) > today || (q(u) == today && u < ctx.t)) ++beating;
    return beating < ctx.budget ? 1.0 : 0.0;
  }
};

class BasicNwsPolicy final : public Policy {
 public:
  double prob_alert(const Eigen::VectorXd&, const env::EpisodeContext& ctx) const override {
    const double cutoff = ctx.northern ? 100.0 : 105.0;
    return ctx.heat_index >= cutoff ? 1.0 : 0.0;
  }
};

class AaqhiPolicy final : public Policy {
 public:
  explicit AaqhiPolicy(double h) : h_(h) {}
  double prob_alert(const Eigen::VectorXd& obs, const env::EpisodeContext&) const override {
    return obs(env::kObsQhi) >= h_ ? 1.0 : 0.0;
  }
  double threshold() const { return h_; }

 private:
  double h_;
};

class NwsReplayPolicy final : public Policy {
 public:
  double prob_alert(const Eigen::VectorXd&, const env::EpisodeContext& ctx) const override {
    return ctx.nws_alert ? 1.0 : 0.0;
  }
};

class QhiWrapPolicy final : public Policy {
 public:
  QhiWrapPolicy(std::shared_ptr<const Policy> inner, double h) : inner_(std::move(inner)), h_(h) {
    if (!inner_) throw ConfigError("qhi wrapper needs an inner policy");
  }
  double prob_alert(const Eigen::VectorXd& obs, const env::EpisodeContext& ctx) const override {
    if (obs(env::kObsQhi) < h_) return 0.0;
    return inner_->prob_alert(obs, ctx);
  }
  double threshold() const { return h_; }

 private:
  std::shared_ptr<const Policy> inner_;
  double h_;
};

struct PolicySpec {
  Kind kind = Kind::kZero;
  EvalMode eval_mode = EvalMode::kStochastic;
  double threshold = std::numeric_limits<double>::quiet_NaN();  // aa.qhi only
  std::string checkpoint;                                       // learned only

  void validate() const {
    if (kind == Kind::kAaqhi) {
      if (!std::isfinite(threshold)) throw ConfigError("aa.qhi policy needs a threshold");
      if (!threshold_on_grid(threshold))
        throw ConfigError("aa.qhi threshold must lie on the 0.50..0.90 step 0.05 grid");
    } else if (std::isfinite(threshold)) {
      throw ConfigError("threshold is only meaningful for aa.qhi policies");
    }
    if (kind == Kind::kLearned && checkpoint.empty())
      throw ConfigError("learned policy needs a checkpoint path");
    if (kind != Kind::kLearned && !checkpoint.empty())
      throw ConfigError("checkpoint is only meaningful for learned policies");
  }
};

inline void to_json(nlohmann::json& j, const PolicySpec& s) {
  j = nlohmann::json::object();
  j["kind"] = kind_name(s.kind);
  j["eval_mode"] = eval_mode_name(s.eval_mode);
  if (std::isfinite(s.threshold)) j["threshold"] = s.threshold;
  if (!s.checkpoint.empty()) j["checkpoint"] = s.checkpoint;
}

inline void from_json(const nlohmann::json& j, PolicySpec& s) {
  s = PolicySpec{};
  s.kind = parse_kind(j.at("kind").get<std::string>());
  if (j.contains("eval_mode")) s.eval_mode = parse_eval_mode(j.at("eval_mode").get<std::string>());
  if (j.contains("threshold")) s.threshold = j.at("threshold").get<double>();
  if (j.contains("checkpoint")) s.checkpoint = j.at("checkpoint").get<std::string>();
  s.validate();
}

// Builds the non-learned policies. Learned policies are reconstructed from
// their checkpoints by the agent code and cannot be built here.
inline std::unique_ptr<Policy> make_policy(const PolicySpec& s) {
  s.validate();
  switch (s.kind) {
    case Kind::kZero: return std::make_unique<ZeroPolicy>();
    case Kind::kRandom: return std::make_unique<RandomBudgetPolicy>();
    case Kind::kTopK: return std::make_unique<TopKPolicy>();
    case Kind::kBasicNws: return std::make_unique<BasicNwsPolicy>();
    case Kind::kAaqhi: return std::make_unique<AaqhiPolicy>(s.threshold);
    case Kind::kNwsReplay: return std::make_unique<NwsReplayPolicy>();
    case Kind::kLearned:
      throw ConfigError("learned policies are loaded from checkpoints, not built from a spec");
  }
  throw ConfigError("unknown policy kind value");
}

}  // namespace broach::policy
