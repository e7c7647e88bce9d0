#pragma once

// Final-evaluation workflow: per-county policy rollouts under common random
// numbers, the exact / normal-approximation Wilcoxon signed-rank test on
// paired per-county differences, hospitalizations-saved conversions, and the
// per-episode-median approximate confidence interval.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "broach/common.hpp"
#include "broach/csv.hpp"
#include "broach/environment.hpp"
#include "broach/policies.hpp"

namespace broach::eval {

constexpr double kPer10kScale = 1e4;
constexpr double kTargetPopulation = 49e6;  // population the totals are projected onto

struct EvalOptions {
  int n_episodes = 1000;
  std::uint64_t seed = 0;
  bool future_info = false;
  std::vector<int> eval_years = env::kDefaultEvalYears;
};

// Everything one (policy, county) evaluation produces: the return vector plus
// the behavioral traces the explain module summarizes.
struct PolicyEvalResult {
  Eigen::VectorXd returns;                   // n_episodes
  Eigen::VectorXd c2;                        // reward scale per episode
  Eigen::VectorXd mean_tau;                  // seasonal mean effectiveness per episode
  std::vector<std::vector<int>> alert_days;  // effective alert days per episode
  std::vector<int> years;                    // sampled trajectory year per episode
  std::vector<int> budgets;                  // sampled budget per episode
};

// Rolls one policy through n_episodes evaluate-mode episodes. The reset and
// action streams depend only on (seed, county, episode index), so every
// policy sees the identical (coefficient draw, trajectory) pairing.
inline PolicyEvalResult evaluate_policy(const data::Dataset& ds,
                                        const rewards::PosteriorSampler& posterior,
                                        const policy::Policy& pol, policy::EvalMode mode,
                                        const std::string& county, const EvalOptions& opt) {
  if (opt.n_episodes <= 0) throw ConfigError("evaluation needs a positive episode count");
  env::BroachEnv e(ds, posterior, county,
                   {env::Mode::kEvaluate, opt.future_info, opt.eval_years});
  PolicyEvalResult out;
  out.returns.resize(opt.n_episodes);
  out.c2.resize(opt.n_episodes);
  out.mean_tau.resize(opt.n_episodes);
  out.alert_days.resize(static_cast<std::size_t>(opt.n_episodes));
  out.years.resize(static_cast<std::size_t>(opt.n_episodes));
  out.budgets.resize(static_cast<std::size_t>(opt.n_episodes));
  const std::uint64_t county_tag = hash_str("eval-" + county);
  const std::uint64_t act_tag = hash_str("eval-act-" + county);
  for (int i = 0; i < opt.n_episodes; ++i) {
    Rng reset_rng = make_stream(opt.seed, county_tag, static_cast<std::uint64_t>(i));
    Rng act_rng = make_stream(opt.seed, act_tag, static_cast<std::uint64_t>(i));
    Eigen::VectorXd obs = e.reset(reset_rng);
    out.c2(i) = e.c2();
    out.years[static_cast<std::size_t>(i)] = e.episode().year;
    out.budgets[static_cast<std::size_t>(i)] = e.episode().budget;
    double ret = 0.0, tau_sum = 0.0;
    for (int t = 0; t < data::kSeasonLength; ++t) {
      const env::EpisodeContext ctx = e.context();
      const int a = policy::act(pol, obs, ctx, mode, act_rng);
      const auto sr = e.step(a);
      ret += sr.reward;
      tau_sum += e.info().tau;
      if (e.info().effective_action == 1) out.alert_days[static_cast<std::size_t>(i)].push_back(t);
      obs = sr.obs;
    }
    out.returns(i) = ret;
    out.mean_tau(i) = tau_sum / data::kSeasonLength;
  }
  return out;
}

struct RankTestResult {
  double w = 0.0;
  double p_value = 1.0;
  int n_effective = 0;  // pairs remaining after zero-differences are dropped
  bool exact = false;
};

// One-sided Wilcoxon signed-rank test on paired differences (alternative:
// positive shift). Zeros are dropped, tied magnitudes receive average ranks.
// Exact enumeration up to n = 12; beyond that a normal approximation with tie
// and continuity corrections.
inline RankTestResult paired_rank_test(const std::vector<double>& diffs) {
  if (diffs.size() < 2) throw ConfigError("paired rank test needs at least two pairs");
  for (double d : diffs)
    if (!std::isfinite(d)) throw NumericError("paired rank test given a non-finite difference");
  std::vector<double> mags;
  std::vector<int> signs;
  for (double d : diffs) {
    if (d == 0.0) continue;
    mags.push_back(std::abs(d));
    signs.push_back(d > 0.0 ? 1 : -1);
  }
  const int n = static_cast<int>(mags.size());
  if (n == 0) throw NumericError("paired rank test degenerate: all differences are zero");

  std::vector<int> idx(mags.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return mags[static_cast<std::size_t>(a)] <
                                                               mags[static_cast<std::size_t>(b)]; });
  std::vector<double> rank(mags.size());
  std::vector<double> tie_sizes;
  for (std::size_t lo = 0; lo < idx.size();) {
    std::size_t hi = lo;
    while (hi + 1 < idx.size() &&
           mags[static_cast<std::size_t>(idx[hi + 1])] == mags[static_cast<std::size_t>(idx[lo])])
      ++hi;
    const double avg = (static_cast<double>(lo + 1) + static_cast<double>(hi + 1)) / 2.0;
    for (std::size_t k = lo; k <= hi; ++k) rank[static_cast<std::size_t>(idx[k])] = avg;
    tie_sizes.push_back(static_cast<double>(hi - lo + 1));
    lo = hi + 1;
  }
  RankTestResult out;
  out.n_effective = n;
  for (std::size_t i = 0; i < rank.size(); ++i)
    if (signs[i] > 0) out.w += rank[i];

  if (n <= 12) {
    out.exact = true;
    const std::uint64_t total = 1ULL << n;
    std::uint64_t at_least = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      double w = 0.0;
      for (int i = 0; i < n; ++i)
        if (mask & (1ULL << i)) w += rank[static_cast<std::size_t>(i)];
      if (w >= out.w - 1e-12) ++at_least;
    }
    out.p_value = static_cast<double>(at_least) / static_cast<double>(total);
  } else {
    const double mu = n * (n + 1) / 4.0;
    double var = n * (n + 1) * (2.0 * n + 1) / 24.0;
    for (double t : tie_sizes) var -= (t * t * t - t) / 48.0;
    if (!(var > 0.0)) throw NumericError("paired rank test degenerate: zero variance");
    const double z = (out.w - mu - 0.5) / std::sqrt(var);  // continuity-corrected
    out.p_value = 1.0 - normal_cdf(z);
  }
  return out;
}

struct HospsSaved {
  double per_10k = 0.0;
  double approx_total = 0.0;
};

// Per episode, the return difference divided by that episode's C2 is the
// per-capita hospitalizations saved over the summer. County value = mean over
// episodes; headline = median across counties, reported per 10k and projected
// onto the target population.
inline HospsSaved hosps_saved(const std::vector<Eigen::VectorXd>& policy_returns,
                              const std::vector<Eigen::VectorXd>& reference_returns,
                              const std::vector<Eigen::VectorXd>& c2) {
  if (policy_returns.size() != reference_returns.size() || policy_returns.size() != c2.size())
    throw ConfigError("hosps_saved: county counts disagree");
  if (policy_returns.empty()) throw ConfigError("hosps_saved: no counties");
  std::vector<double> per_county;
  for (std::size_t k = 0; k < policy_returns.size(); ++k) {
    const auto& p = policy_returns[k];
    const auto& r = reference_returns[k];
    const auto& s = c2[k];
    if (p.size() != r.size() || p.size() != s.size())
      throw ConfigError("hosps_saved: episode counts disagree");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) sum += (p(i) - r(i)) / s(i);
    per_county.push_back(sum / static_cast<double>(p.size()));
  }
  HospsSaved out;
  out.per_10k = median(per_county) * kPer10kScale;
  out.approx_total = out.per_10k / kPer10kScale * kTargetPopulation;
  return out;
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Approximate 95% interval: per episode index, the median across counties of
// the paired difference; the interval is the 2.5%/97.5% quantiles of those
// medians. `convert` maps a (county, episode) difference into reporting units.
template <typename Convert>
inline Interval approx_ci_impl(const std::vector<Eigen::VectorXd>& policy_returns,
                               const std::vector<Eigen::VectorXd>& reference_returns,
                               Convert&& convert) {
  if (policy_returns.size() != reference_returns.size())
    throw ConfigError("approx_ci: county counts disagree");
  if (policy_returns.empty()) throw ConfigError("approx_ci: no counties");
  const Eigen::Index n = policy_returns.front().size();
  for (std::size_t k = 0; k < policy_returns.size(); ++k)
    if (policy_returns[k].size() != n || reference_returns[k].size() != n)
      throw ConfigError("approx_ci: episode counts disagree");
  std::vector<double> medians;
  std::vector<double> col(policy_returns.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < policy_returns.size(); ++k)
      col[k] = convert(k, i, policy_returns[k](i) - reference_returns[k](i));
    medians.push_back(median(col));
  }
  return {quantile(medians, 0.025), quantile(medians, 0.975)};
}

// Return-scale interval.
inline Interval approx_ci(const std::vector<Eigen::VectorXd>& policy_returns,
                          const std::vector<Eigen::VectorXd>& reference_returns) {
  return approx_ci_impl(policy_returns, reference_returns,
                        [](std::size_t, Eigen::Index, double d) { return d; });
}

// Hosps-saved-per-10k interval using each episode's C2.
inline Interval approx_ci_saved(const std::vector<Eigen::VectorXd>& policy_returns,
                                const std::vector<Eigen::VectorXd>& reference_returns,
                                const std::vector<Eigen::VectorXd>& c2) {
  if (c2.size() != policy_returns.size()) throw ConfigError("approx_ci: county counts disagree");
  return approx_ci_impl(policy_returns, reference_returns, [&](std::size_t k, Eigen::Index i, double d) {
    return d / c2[k](i) * kPer10kScale;
  });
}

struct ReportRow {
  std::string policy;
  double median_diff = 0.0;
  double w = 0.0;
  double p_value = 1.0;
  double per_10k = 0.0;
  double approx_total = 0.0;
  Interval ci;
};

struct EvaluationReport {
  std::vector<std::string> counties;
  std::string reference;
  // per policy name: county-indexed evaluation results
  std::map<std::string, std::vector<PolicyEvalResult>> results;
  std::vector<ReportRow> rows;  // one per non-reference policy, input order
};

// Per-county mean returns for one policy.
inline std::vector<double> county_means(const std::vector<PolicyEvalResult>& rs) {
  std::vector<double> out;
  for (const auto& r : rs) out.push_back(r.returns.mean());
  return out;
}

// Builds the comparison rows against the named reference policy.
inline void assemble_rows(EvaluationReport& report, const std::vector<std::string>& policy_order) {
  const auto ref_it = report.results.find(report.reference);
  if (ref_it == report.results.end())
    throw ConfigError("reference policy '" + report.reference + "' was not evaluated");
  const std::vector<double> ref_means = county_means(ref_it->second);
  std::vector<Eigen::VectorXd> ref_returns, c2;
  for (const auto& r : ref_it->second) {
    ref_returns.push_back(r.returns);
    c2.push_back(r.c2);
  }
  report.rows.clear();
  for (const auto& name : policy_order) {
    if (name == report.reference) continue;
    const auto it = report.results.find(name);
    if (it == report.results.end()) throw ConfigError("policy '" + name + "' was not evaluated");
    const std::vector<double> means = county_means(it->second);
    std::vector<double> diffs;
    for (std::size_t k = 0; k < means.size(); ++k) diffs.push_back(means[k] - ref_means[k]);
    std::vector<Eigen::VectorXd> pol_returns;
    for (const auto& r : it->second) pol_returns.push_back(r.returns);
    ReportRow row;
    row.policy = name;
    row.median_diff = median(diffs);
    const RankTestResult rt = paired_rank_test(diffs);
    row.w = rt.w;
    row.p_value = rt.p_value;
    const HospsSaved hs = hosps_saved(pol_returns, ref_returns, c2);
    row.per_10k = hs.per_10k;
    row.approx_total = hs.approx_total;
    row.ci = approx_ci_saved(pol_returns, ref_returns, c2);
    report.rows.push_back(std::move(row));
  }
}

inline void write_results_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  CsvWriter w(path, {"policy", "median_diff", "W", "p_value", "per_10k", "approx_total"});
  for (const auto& r : rows)
    w.write_row_strings({r.policy, format_double(r.median_diff), format_double(r.w),
                         format_double(r.p_value), format_double(r.per_10k),
                         format_double(r.approx_total)});
}

inline void write_ci_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  CsvWriter w(path, {"policy", "ci_low_per_10k", "ci_high_per_10k"});
  for (const auto& r : rows)
    w.write_row_strings({r.policy, format_double(r.ci.low), format_double(r.ci.high)});
}

inline void write_returns_csv(const std::string& path, const std::vector<std::string>& counties,
                              const std::vector<PolicyEvalResult>& results) {
  if (counties.size() != results.size()) throw ConfigError("returns csv: county counts disagree");
  CsvWriter w(path, {"county", "episode", "return"});
  for (std::size_t k = 0; k < counties.size(); ++k)
    for (Eigen::Index i = 0; i < results[k].returns.size(); ++i)
      w.write_row_strings({counties[k], std::to_string(i), format_double(results[k].returns(i))});
}

}  // namespace broach::eval
