#pragma once

// Synthetic data generator. Produces a dataset with the exact production
// schema: seasonal sinusoid + AR(1) heat index, a noisy-threshold synthetic
// alert policy, and Poisson hospitalization counts under ground-truth
// coefficients drawn from the same hierarchical prior structure the rewards
// model assumes (per-class constraint transforms, spatially varying means).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "broach/common.hpp"
#include "broach/data_core.hpp"
#include "broach/rewards_model.hpp"

namespace broach::synth {

struct SynthCounty {
  std::string id;
  data::ClimateRegion region = data::ClimateRegion::kMixedHumid;
};

struct SynthConfig {
  std::vector<SynthCounty> counties;
  std::vector<int> years;
  double base_rate = 1e-4;                 // per-capita daily hospitalization scale
  long population_min = 65000;
  long population_max = 400000;
  double alert_threshold_quantile = 0.92;  // per-county heat-index quantile for synthetic alerts
  double alert_noise = 2.0;                // threshold jitter, degrees F
  double prior_sigma = 0.15;               // hierarchical scale of the truth draw
  double signal_scale = 1.0;               // scales covariate effects
  double tau_center = -1.0;                // effectiveness intercept (tau ~ sigmoid of this)
  double fatigue_scale = 0.5;              // alert-fatigue strength in the tau block
  bool zero_effectiveness = false;         // alerts have exactly no effect on rates
  bool require_multicounty_regions = false;

  void validate() const {
    if (counties.empty()) throw ConfigError("synthetic config needs at least one county");
    if (years.empty()) throw ConfigError("synthetic config needs at least one year");
    for (std::size_t i = 0; i < counties.size(); ++i)
      for (std::size_t j = i + 1; j < counties.size(); ++j)
        if (counties[i].id == counties[j].id)
          throw ConfigError("duplicate synthetic county id '" + counties[i].id + "'");
    for (std::size_t i = 0; i < years.size(); ++i) {
      if (years[i] < 1900 || years[i] > 2100) throw ConfigError("synthetic year outside supported range");
      for (std::size_t j = i + 1; j < years.size(); ++j)
        if (years[i] == years[j]) throw ConfigError("duplicate synthetic year");
    }
    if (!(base_rate > 0.0)) throw ConfigError("base_rate must be positive");
    if (population_min <= 0 || population_max < population_min) throw ConfigError("bad population range");
    if (!(alert_threshold_quantile > 0.0 && alert_threshold_quantile < 1.0))
      throw ConfigError("alert_threshold_quantile must be in (0,1)");
    if (alert_noise < 0.0) throw ConfigError("alert_noise must be non-negative");
    if (!(prior_sigma > 0.0)) throw ConfigError("prior_sigma must be positive");
    if (require_multicounty_regions) {
      for (int r = 0; r < data::kNumRegions; ++r) {
        int n = 0;
        for (const auto& c : counties)
          if (static_cast<int>(c.region) == r) ++n;
        if (n == 1)
          throw ConfigError("region " + data::region_name(static_cast<data::ClimateRegion>(r)) +
                            " has a single county; regional augmentation needs at least two");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json::object();
  auto& counties = j["counties"] = nlohmann::json::array();
  for (const auto& sc : c.counties)
    counties.push_back({{"id", sc.id}, {"region", data::region_name(sc.region)}});
  j["years"] = c.years;
  j["base_rate"] = c.base_rate;
  j["population_min"] = c.population_min;
  j["population_max"] = c.population_max;
  j["alert_threshold_quantile"] = c.alert_threshold_quantile;
  j["alert_noise"] = c.alert_noise;
  j["prior_sigma"] = c.prior_sigma;
  j["signal_scale"] = c.signal_scale;
  j["tau_center"] = c.tau_center;
  j["fatigue_scale"] = c.fatigue_scale;
  j["zero_effectiveness"] = c.zero_effectiveness;
  j["require_multicounty_regions"] = c.require_multicounty_regions;
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c = SynthConfig{};
  for (const auto& e : j.at("counties"))
    c.counties.push_back({e.at("id").get<std::string>(), data::parse_region(e.at("region").get<std::string>())});
  c.years = j.at("years").get<std::vector<int>>();
  c.base_rate = j.value("base_rate", c.base_rate);
  c.population_min = j.value("population_min", c.population_min);
  c.population_max = j.value("population_max", c.population_max);
  c.alert_threshold_quantile = j.value("alert_threshold_quantile", c.alert_threshold_quantile);
  c.alert_noise = j.value("alert_noise", c.alert_noise);
  c.prior_sigma = j.value("prior_sigma", c.prior_sigma);
  c.signal_scale = j.value("signal_scale", c.signal_scale);
  c.tau_center = j.value("tau_center", c.tau_center);
  c.fatigue_scale = j.value("fatigue_scale", c.fatigue_scale);
  c.zero_effectiveness = j.value("zero_effectiveness", c.zero_effectiveness);
  c.require_multicounty_regions = j.value("require_multicounty_regions", c.require_multicounty_regions);
}

struct SynthResult {
  data::Dataset dataset;
  std::vector<rewards::CoefficientSet> truth;  // index-aligned with dataset.counties
};

namespace detail {

// Unconstrained-space centers of the truth draw. The spline block carries the
// intercepts of both linear predictors.
inline Eigen::VectorXd truth_centers(const SynthConfig& cfg) {
  using namespace broach::data;
  Eigen::VectorXd c(rewards::kCoefDim);
  const double s = cfg.signal_scale;
  c(kLambdaQhi) = 0.5 * s;
  c(kLambdaQhiHinge25) = 0.4 * s;
  c(kLambdaQhiHinge75) = 0.9 * s;
  c(kLambdaSpline0) = std::log(cfg.base_rate) - 0.1;
  c(kLambdaSpline1) = std::log(cfg.base_rate) + 0.15;
  c(kLambdaSpline2) = std::log(cfg.base_rate) - 0.05;
  c(kLambdaWeekend) = -0.05 * s;
  c(kLambdaExcessHeat) = 0.3 * s;
  c(kLambdaAlerts2wk) = std::log(0.03);       // z-space; beta = -exp(z)
  c(kLambdaAlertYesterday) = std::log(0.04);
  const int d0 = kLambdaDim;
  if (cfg.zero_effectiveness) {
    c(d0 + kTauQhi) = std::log(1e-3);
    c(d0 + kTauSpline0) = c(d0 + kTauSpline1) = c(d0 + kTauSpline2) = -40.0;
    c(d0 + kTauWeekend) = c(d0 + kTauExcessHeat) = 0.0;
    c(d0 + kTauAlerts2wk) = c(d0 + kTauAlertYesterday) = 0.0;
  } else {
    c(d0 + kTauQhi) = std::log(0.8);
    c(d0 + kTauSpline0) = c(d0 + kTauSpline1) = c(d0 + kTauSpline2) = cfg.tau_center;
    c(d0 + kTauWeekend) = 0.1 * s;
    c(d0 + kTauExcessHeat) = 0.1 * s;
    c(d0 + kTauAlerts2wk) = -cfg.fatigue_scale;
    c(d0 + kTauAlertYesterday) = -0.5 * cfg.fatigue_scale;
  }
  return c;
}

inline double region_heat_base(data::ClimateRegion r) {
  switch (r) {
    case data::ClimateRegion::kHotHumid: return 80.0;
    case data::ClimateRegion::kHotDry: return 78.0;
    case data::ClimateRegion::kMixedHumid: return 72.0;
    case data::ClimateRegion::kMarine: return 62.0;
    case data::ClimateRegion::kColdEast: return 66.0;
    case data::ClimateRegion::kColdWest: return 64.0;
  }
  return 70.0;
}

}  // namespace detail

inline SynthResult generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  // Canonical order is sorted by county id, matching the assembled dataset,
  // so truth coefficients stay index-aligned with dataset.counties.
  std::vector<SynthCounty> order = cfg.counties;
  std::sort(order.begin(), order.end(), [](const SynthCounty& a, const SynthCounty& b) { return a.id < b.id; });
  std::vector<int> years = cfg.years;
  std::sort(years.begin(), years.end());
  const int n_counties = static_cast<int>(order.size());
  Rng rng = make_stream(seed, hash_str("synth"));
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Spatial covariates.
  std::vector<data::SpatialFeatures> spatial;
  std::vector<long> population(static_cast<std::size_t>(n_counties));
  for (int k = 0; k < n_counties; ++k) {
    data::SpatialFeatures f;
    f.county_id = order[static_cast<std::size_t>(k)].id;
    f.region = order[static_cast<std::size_t>(k)].region;
    f.pop_density = std::exp(4.5 + 0.8 * gauss(rng));
    f.median_hh_income = std::max(25000.0, 55000.0 + 12000.0 * gauss(rng));
    f.democratic_pct = sigmoid(0.0 + 0.8 * gauss(rng));
    f.broadband_pct = sigmoid(1.0 + 0.6 * gauss(rng));
    f.pm25 = std::exp(2.1 + 0.25 * gauss(rng));
    f.northern = data::default_northern(f.region);
    spatial.push_back(std::move(f));
    std::uniform_int_distribution<long> pop_dist(cfg.population_min, cfg.population_max);
    population[static_cast<std::size_t>(k)] = pop_dist(rng);
  }

  // Heat index series and synthetic alerts (noisy threshold on the
  // county-specific pooled quantile).
  const int n_years = static_cast<int>(years.size());
  std::vector<std::vector<std::vector<double>>> heat(
      static_cast<std::size_t>(n_counties),
      std::vector<std::vector<double>>(static_cast<std::size_t>(n_years),
                                       std::vector<double>(data::kSeasonLength)));
  for (int k = 0; k < n_counties; ++k) {
    const double base = detail::region_heat_base(spatial[static_cast<std::size_t>(k)].region) + 2.0 * gauss(rng);
    const double amp = 22.0 + 2.0 * gauss(rng);
    for (int yi = 0; yi < n_years; ++yi) {
      double ar = 0.0;
      for (int t = 0; t < data::kSeasonLength; ++t) {
        ar = 0.7 * ar + 3.0 * gauss(rng);
        heat[k][yi][t] = base + amp * std::sin(std::numbers::pi * t / (data::kSeasonLength - 1.0)) + ar;
      }
    }
  }
  std::vector<std::vector<std::vector<int>>> alerts(
      static_cast<std::size_t>(n_counties),
      std::vector<std::vector<int>>(static_cast<std::size_t>(n_years), std::vector<int>(data::kSeasonLength, 0)));
  for (int k = 0; k < n_counties; ++k) {
    std::vector<double> pooled;
    for (int yi = 0; yi < n_years; ++yi)
      pooled.insert(pooled.end(), heat[k][yi].begin(), heat[k][yi].end());
    const double threshold = quantile(pooled, cfg.alert_threshold_quantile);
    for (int yi = 0; yi < n_years; ++yi)
      for (int t = 0; t < data::kSeasonLength; ++t)
        alerts[k][yi][t] = heat[k][yi][t] + cfg.alert_noise * gauss(rng) > threshold ? 1 : 0;
  }

  // Ground-truth coefficients: z ~ Normal(center + linear spatial effect,
  // prior_sigma), transformed per constraint class.
  const Eigen::VectorXd centers = detail::truth_centers(cfg);
  Eigen::MatrixXd spatial_weights(rewards::kCoefDim, data::SpatialFeatures::kNumericCount);
  for (int i = 0; i < spatial_weights.size(); ++i) spatial_weights.data()[i] = 0.15 * cfg.signal_scale * gauss(rng);
  Eigen::VectorXd num_mean = Eigen::VectorXd::Zero(data::SpatialFeatures::kNumericCount);
  Eigen::VectorXd num_sd = Eigen::VectorXd::Ones(data::SpatialFeatures::kNumericCount);
  {
    Eigen::MatrixXd num(data::SpatialFeatures::kNumericCount, n_counties);
    for (int k = 0; k < n_counties; ++k) num.col(k) = spatial[static_cast<std::size_t>(k)].numeric();
    num_mean = num.rowwise().mean();
    for (int i = 0; i < num_sd.size(); ++i) {
      const double var = (num.row(i).array() - num_mean(i)).square().sum() / std::max(1, n_counties - 1);
      num_sd(i) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
  }
  std::vector<rewards::CoefficientSet> truth;
  for (int k = 0; k < n_counties; ++k) {
    const Eigen::VectorXd w =
        (spatial[static_cast<std::size_t>(k)].numeric() - num_mean).cwiseQuotient(num_sd);
    Eigen::VectorXd z = centers + spatial_weights * w;
    for (int l = 0; l < rewards::kCoefDim; ++l) z(l) += cfg.prior_sigma * gauss(rng);
    rewards::CoefficientSet c;
    c.beta.resize(data::kLambdaDim);
    c.delta.resize(data::kTauDim);
    for (int l = 0; l < rewards::kCoefDim; ++l) {
      const double g = rewards::to_constrained(rewards::coef_class(l), z(l));
      if (l < data::kLambdaDim)
        c.beta(l) = g;
      else
        c.delta(l - data::kLambdaDim) = g;
    }
    c.validate();
    truth.push_back(std::move(c));
  }

  // First pass: records with zero counts, assembled to obtain the engineered
  // features and observed-alert basis.
  std::vector<data::DailyRecord> recs;
  recs.reserve(static_cast<std::size_t>(n_counties * n_years * data::kSeasonLength));
  for (int k = 0; k < n_counties; ++k)
    for (int yi = 0; yi < n_years; ++yi) {
      const int year = years[static_cast<std::size_t>(yi)];
      const long may1 = data::days_from_civil(year, 5, 1);
      for (int t = 0; t < data::kSeasonLength; ++t) {
        data::DailyRecord r;
        r.county_id = spatial[static_cast<std::size_t>(k)].county_id;
        r.year = year;
        r.date = data::civil_from_days(may1 + t);
        r.day_of_summer = t;
        r.heat_index = heat[k][yi][t];
        r.alert = alerts[k][yi][t];
        r.hosp_count = 0;
        r.population = population[static_cast<std::size_t>(k)];
        recs.push_back(std::move(r));
      }
    }
  data::Dataset staged = data::assemble_dataset(recs, spatial);

  // Second pass: Poisson counts under the ground-truth rates evaluated on the
  // observed-alert feature paths. recs were laid out in the same county-major
  // sorted order assemble_dataset produces, so idx walks them in sync.
  std::size_t idx = 0;
  for (std::size_t k = 0; k < staged.counties.size(); ++k) {
    const auto& county = staged.counties[k];
    const auto& truth_k = truth[k];
    for (const auto& season : county.seasons)
      for (int t = 0; t < data::kSeasonLength; ++t) {
        const double lam = rewards::lambda_eval(truth_k.beta, season.x_lambda.row(t).transpose());
        const double tau = rewards::tau_eval(truth_k.delta, season.x_tau.row(t).transpose());
        const double rho = lam * (1.0 - season.alerts[static_cast<std::size_t>(t)] * tau);
        const double mu = static_cast<double>(season.pop(t)) * rho;
        std::poisson_distribution<long> pois(mu);
        recs[idx].hosp_count = std::min(pois(rng), season.days[static_cast<std::size_t>(t)].population);
        ++idx;
      }
  }
  SynthResult out{data::assemble_dataset(std::move(recs), spatial), std::move(truth)};
  return out;
}

}  // namespace broach::synth
