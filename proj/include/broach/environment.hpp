#pragma once

// Episodic alert environment. An episode replays one observed county-summer
// of weather (possibly borrowed from a same-region county), draws one
// coefficient set from a posterior, and walks 152 days under a strict alert
// budget. Rewards are expected rates, so all stochasticity is consumed at
// reset; the weather stream is identical whatever actions are taken.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "broach/common.hpp"
#include "broach/data_core.hpp"
#include "broach/rewards_model.hpp"

namespace broach::env {

enum class Mode { kTrain, kValidate, kEvaluate };

inline Mode parse_mode(const std::string& s) {
  if (s == "train") return Mode::kTrain;
  if (s == "validate") return Mode::kValidate;
  if (s == "evaluate") return Mode::kEvaluate;
  throw ConfigError("unknown environment mode '" + s + "'");
}

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kTrain: return "train";
    case Mode::kValidate: return "validate";
    case Mode::kEvaluate: return "evaluate";
  }
  throw ConfigError("unknown environment mode value");
}

inline const std::vector<int> kDefaultEvalYears = {2007, 2011, 2015};

constexpr int kBaseObsDim = 8;
constexpr int kFutureDeltaDays = 10;
constexpr int kFuturePercentiles = 6;  // 50th..100th by 10
constexpr int kFutureObsDim = kFutureDeltaDays + kFuturePercentiles;

// Observation layout. All channels are (approximately) unit-scaled.
enum ObsIndex {
  kObsQhi = 0,
  kObsExcessHeat = 1,
  kObsDosFrac = 2,
  kObsWeekend = 3,
  kObsAlerts2wk = 4,       // /14
  kObsAlertYesterday = 5,
  kObsBudgetRemaining = 6, // /152
  kObsTime = 7,            // t/151
  kObsFutureStart = 8,
};

struct EpisodeSpec {
  std::string county_id;             // target county (whose coefficients apply)
  int year = 0;
  std::string trajectory_source_county;
  int budget = 0;
  rewards::CoefficientSet coeffs;
  bool future_info = false;
};

// What a policy may consult beyond the observation vector. trajectory_qhi is
// the full-episode oracle some baselines need; null when unavailable.
struct EpisodeContext {
  int t = 0;
  int days_remaining = 0;
  int budget = 0;
  int budget_remaining = 0;
  double qhi = 0.0;
  double heat_index = 0.0;
  int nws_alert = 0;  // the source trajectory's observed alert today
  bool northern = true;
  const Eigen::VectorXd* trajectory_qhi = nullptr;
};

// Minimal episodic-simulator contract the trainers consume. Implementations
// keep the maskable feature (QHI or its stand-in) at observation index 0.
class EpisodicEnv {
 public:
  virtual ~EpisodicEnv() = default;

  struct StepResult {
    Eigen::VectorXd obs;
    double reward = 0.0;
    bool done = false;
  };

  virtual int observation_size() const = 0;
  virtual Eigen::VectorXd reset(Rng& rng) = 0;
  virtual StepResult step(int action) = 0;
};

inline double episode_return(const std::vector<double>& rewards) {
  return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

struct SourceRef {
  int county = -1;  // index into dataset.counties
  int year = 0;
};

// Uniform draw over the candidate (county, year) pairs: the target county's
// climate region crossed with `years` when augmenting, else the county alone.
inline SourceRef sample_exogenous(const data::Dataset& ds, const std::string& county_id,
                                  const std::vector<int>& years, bool augment, Rng& rng) {
  if (years.empty()) throw ConfigError("sample_exogenous: empty year set");
  const int target = ds.county_index(county_id);
  std::vector<int> members;
  if (augment)
    members = ds.region_members(ds.counties[static_cast<std::size_t>(target)].spatial.region);
  else
    members = {target};
  std::vector<SourceRef> candidates;
  for (int k : members)
    for (int y : years)
      if (ds.counties[static_cast<std::size_t>(k)].has_year(y)) candidates.push_back({k, y});
  if (candidates.empty())
    throw ConfigError("no candidate trajectories for county " + county_id + " in the requested years");
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

struct EnvOptions {
  Mode mode = Mode::kTrain;
  bool future_info = false;
  std::vector<int> eval_years = kDefaultEvalYears;
};

class BroachEnv final : public EpisodicEnv {
 public:
  struct Info {
    double rho_action = 0.0;  // expected rate under the effective action
    double rho_zero = 0.0;    // counterfactual no-alert rate (= lambda)
    double tau = 0.0;         // today's alert effectiveness under the drawn coefficients
    int effective_action = 0;
    int budget_remaining = 0;
  };

  BroachEnv(const data::Dataset& ds, const rewards::PosteriorSampler& posterior,
            std::string target_county, EnvOptions opts)
      : ds_(&ds), posterior_(&posterior), opts_(std::move(opts)) {
    target_ = ds.county_index(target_county);
    if (opts_.eval_years.empty()) throw ConfigError("environment needs a nonempty evaluation year set");
    const std::vector<int> all_years = ds.years();
    std::vector<int> train_years;
    for (int y : all_years)
      if (std::find(opts_.eval_years.begin(), opts_.eval_years.end(), y) == opts_.eval_years.end())
        train_years.push_back(y);
    const auto& county = ds.counties[static_cast<std::size_t>(target_)];
    const std::vector<int> region = ds.region_members(county.spatial.region);
    auto collect = [&](const std::vector<int>& members, const std::vector<int>& years) {
      std::vector<SourceRef> out;
      for (int k : members)
        for (int y : years)
          if (ds.counties[static_cast<std::size_t>(k)].has_year(y)) out.push_back({k, y});
      return out;
    };
    switch (opts_.mode) {
      case Mode::kTrain:
        candidates_ = collect(region, train_years);
        break;
      case Mode::kValidate: {
        std::vector<int> others;
        for (int k : region)
          if (k != target_) others.push_back(k);
        candidates_ = collect(others, opts_.eval_years);
        break;
      }
      case Mode::kEvaluate:
        candidates_ = collect({target_}, opts_.eval_years);
        break;
    }
    if (candidates_.empty())
      throw ConfigError("no candidate trajectories for county " + county.id + " in mode " +
                        mode_name(opts_.mode));
  }

  int observation_size() const override {
    return kBaseObsDim + (opts_.future_info ? kFutureObsDim : 0);
  }

  Eigen::VectorXd reset(Rng& rng) override {
    std::uniform_int_distribution<std::size_t> pick(0, candidates_.size() - 1);
    const SourceRef src = candidates_[pick(rng)];
    const auto& source_county = ds_->counties[static_cast<std::size_t>(src.county)];
    season_ = &source_county.season(src.year);
    spec_.county_id = ds_->counties[static_cast<std::size_t>(target_)].id;
    spec_.year = src.year;
    spec_.trajectory_source_county = source_county.id;
    spec_.budget = season_->alert_count;
    spec_.future_info = opts_.future_info;
    spec_.coeffs = posterior_->sample(target_, rng);
    if (!(season_->mean_rate > 0.0))
      throw ConfigError("county " + source_county.id + " year " + std::to_string(src.year) +
                        " has zero mean hospitalization rate; reward scale undefined");
    c2_ = 1.0 / season_->mean_rate;
    t_ = 0;
    budget_remaining_ = spec_.budget;
    alert_history_.assign(data::kSeasonLength, 0);
    alerts_2wk_ = 0;
    alert_yesterday_ = 0;
    info_ = Info{};
    info_.budget_remaining = budget_remaining_;
    return observe();
  }

  StepResult step(int action) override {
    if (season_ == nullptr) throw ProtocolError("step before reset");
    if (t_ >= data::kSeasonLength) throw ProtocolError("step after episode end");
    if (action != 0 && action != 1) throw ConfigError("action must be 0 or 1");
    const int eff = (action == 1 && budget_remaining_ > 0) ? 1 : 0;
    const auto basis =
        data::basis_expand(season_->eng[static_cast<std::size_t>(t_)], alerts_2wk_, alert_yesterday_);
    const double lam = rewards::lambda_eval(spec_.coeffs.beta, basis.lambda_features);
    const double tau = rewards::tau_eval(spec_.coeffs.delta, basis.tau_features);
    const double rho_a = lam * (1.0 - eff * tau);
    StepResult out;
    out.reward = 1.0 - c2_ * rho_a;
    budget_remaining_ -= eff;
    alert_history_[static_cast<std::size_t>(t_)] = eff;
    alerts_2wk_ += eff;
    if (t_ - data::kAlertWindow >= 0)
      alerts_2wk_ -= alert_history_[static_cast<std::size_t>(t_ - data::kAlertWindow)];
    alert_yesterday_ = eff;
    info_.rho_action = rho_a;
    info_.rho_zero = lam;
    info_.tau = tau;
    info_.effective_action = eff;
    info_.budget_remaining = budget_remaining_;
    ++t_;
    out.done = t_ == data::kSeasonLength;
    out.obs = out.done ? Eigen::VectorXd::Zero(observation_size()).eval() : observe();
    return out;
  }

  const EpisodeSpec& episode() const { return spec_; }
  const Info& info() const { return info_; }
  double c2() const { return c2_; }
  int t() const { return t_; }
  int budget_remaining() const { return budget_remaining_; }
  const data::Season& season() const {
    if (season_ == nullptr) throw ProtocolError("no active episode");
    return *season_;
  }

  // Today's QHI series for the whole episode (the TopK oracle).
  const Eigen::VectorXd& trajectory_qhi() const {
    if (season_ == nullptr) throw ProtocolError("no active episode");
    if (qhi_cache_season_ != season_) {
      qhi_cache_.resize(data::kSeasonLength);
      for (int t = 0; t < data::kSeasonLength; ++t)
        qhi_cache_(t) = season_->eng[static_cast<std::size_t>(t)].qhi;
      qhi_cache_season_ = season_;
    }
    return qhi_cache_;
  }

  EpisodeContext context() const {
    if (season_ == nullptr) throw ProtocolError("no active episode");
    if (t_ >= data::kSeasonLength) throw ProtocolError("context after episode end");
    EpisodeContext c;
    c.t = t_;
    c.days_remaining = data::kSeasonLength - t_;
    c.budget = spec_.budget;
    c.budget_remaining = budget_remaining_;
    c.qhi = season_->eng[static_cast<std::size_t>(t_)].qhi;
    c.heat_index = season_->days[static_cast<std::size_t>(t_)].heat_index;
    c.nws_alert = season_->alerts[static_cast<std::size_t>(t_)];
    c.northern = ds_->counties[static_cast<std::size_t>(target_)].spatial.northern;
    c.trajectory_qhi = &trajectory_qhi();
    return c;
  }

  // Brute-force recount of the trailing alert window, for property checks.
  int alerts_2wk_recount() const { return data::alerts_2wk_at(alert_history_, t_); }

 private:
  Eigen::VectorXd observe() const {
    Eigen::VectorXd o = Eigen::VectorXd::Zero(observation_size());
    const auto& eng = season_->eng[static_cast<std::size_t>(t_)];
    o(kObsQhi) = eng.qhi;
    o(kObsExcessHeat) = eng.excess_heat;
    o(kObsDosFrac) = eng.dos_frac;
    o(kObsWeekend) = eng.weekend;
    o(kObsAlerts2wk) = alerts_2wk_ / static_cast<double>(data::kAlertWindow);
    o(kObsAlertYesterday) = alert_yesterday_;
    o(kObsBudgetRemaining) = budget_remaining_ / static_cast<double>(data::kSeasonLength);
    o(kObsTime) = t_ / static_cast<double>(data::kSeasonLength - 1);
    if (opts_.future_info) {
      for (int i = 1; i <= kFutureDeltaDays; ++i)
        if (t_ + i < data::kSeasonLength)
          o(kObsFutureStart + i - 1) = season_->eng[static_cast<std::size_t>(t_ + i)].qhi -
                                       season_->eng[static_cast<std::size_t>(t_ + i - 1)].qhi;
      std::vector<double> rest;
      for (int u = t_ + 1; u < data::kSeasonLength; ++u)
        rest.push_back(season_->eng[static_cast<std::size_t>(u)].qhi);
      if (!rest.empty()) {
        std::sort(rest.begin(), rest.end());
        const int m = static_cast<int>(rest.size());
        for (int pi = 0; pi < kFuturePercentiles; ++pi) {
          const double p = 0.5 + 0.1 * pi;
          int rank = static_cast<int>(std::ceil(p * m));
          rank = std::clamp(rank, 1, m);
          o(kObsFutureStart + kFutureDeltaDays + pi) = rest[static_cast<std::size_t>(rank - 1)];
        }
      }
    }
    return o;
  }

  const data::Dataset* ds_;
  const rewards::PosteriorSampler* posterior_;
  EnvOptions opts_;
  int target_ = -1;
  std::vector<SourceRef> candidates_;

  const data::Season* season_ = nullptr;
  EpisodeSpec spec_;
  double c2_ = 0.0;
  int t_ = 0;
  int budget_remaining_ = 0;
  std::vector<int> alert_history_;
  int alerts_2wk_ = 0;
  int alert_yesterday_ = 0;
  Info info_;

  mutable Eigen::VectorXd qhi_cache_;
  mutable const data::Season* qhi_cache_season_ = nullptr;
};

}  // namespace broach::env
