#pragma once

// Post-hoc contrastive analysis: alert-behavior summaries per (county,
// policy), greedy CART induction (regression on return differences and
// polytomous classification of the per-county winner), and text/CSV tree
// renderers. Everything here is a pure function of evaluation outputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "broach/common.hpp"
#include "broach/csv.hpp"
#include "broach/data_core.hpp"
#include "broach/evaluation.hpp"

namespace broach::explain {

// Maximal runs of consecutive 1s, in order of appearance.
inline std::vector<int> streak_lengths(const std::vector<int>& alerts) {
  std::vector<int> out;
  int run = 0;
  for (int a : alerts) {
    if (a != 0 && a != 1) throw ConfigError("streak_lengths expects a binary vector");
    if (a == 1) {
      ++run;
    } else if (run > 0) {
      out.push_back(run);
      run = 0;
    }
  }
  if (run > 0) out.push_back(run);
  return out;
}

// Same, from a sorted list of alert day indices.
inline std::vector<int> streaks_from_days(const std::vector<int>& days) {
  std::vector<int> out;
  for (std::size_t i = 0; i < days.size();) {
    std::size_t j = i;
    while (j + 1 < days.size() && days[j + 1] == days[j] + 1) ++j;
    out.push_back(static_cast<int>(j - i + 1));
    i = j + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CART.

enum class CartTask { kRegression, kClassification };

struct FeatureTable {
  std::vector<std::string> names;
  std::vector<bool> categorical;  // categorical features hold non-negative level indices
  Eigen::MatrixXd values;         // samples x features

  void validate() const {
    if (names.size() != categorical.size() ||
        static_cast<Eigen::Index>(names.size()) != values.cols())
      throw ConfigError("feature table metadata does not match its matrix");
    for (std::size_t f = 0; f < names.size(); ++f) {
      if (!categorical[f]) continue;
      std::vector<double> levels;
      for (Eigen::Index i = 0; i < values.rows(); ++i) {
        const double v = values(i, static_cast<Eigen::Index>(f));
        if (v != std::floor(v) || v < 0.0)
          throw ConfigError("categorical feature '" + names[f] + "' has a non-level value");
        if (std::find(levels.begin(), levels.end(), v) == levels.end()) levels.push_back(v);
      }
      if (levels.size() > 6)
        throw ConfigError("categorical feature '" + names[f] + "' exceeds 6 levels");
    }
  }
};

struct CartNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  bool categorical = false;
  double level = 0.0;  // categorical one-vs-rest: this level goes left
  int left = -1, right = -1;
  int n_samples = 0;
  double impurity = 0.0;
  double prediction = 0.0;         // regression: mean target
  Eigen::VectorXd class_counts;    // classification: per-class sample counts

  bool is_leaf() const { return feature < 0; }
  bool goes_left(const Eigen::VectorXd& row) const {
    const double v = row(feature);
    return categorical ? v == level : v < threshold;
  }
};

struct CartTree {
  CartTask task = CartTask::kRegression;
  int min_leaf = 1;
  int n_classes = 0;
  std::vector<CartNode> nodes;  // nodes[0] is the root

  const CartNode& leaf_for(const Eigen::VectorXd& row) const {
    if (nodes.empty()) throw ProtocolError("CART tree is empty");
    int at = 0;
    while (!nodes[static_cast<std::size_t>(at)].is_leaf())
      at = nodes[static_cast<std::size_t>(at)].goes_left(row)
               ? nodes[static_cast<std::size_t>(at)].left
               : nodes[static_cast<std::size_t>(at)].right;
    return nodes[static_cast<std::size_t>(at)];
  }

  double predict(const Eigen::VectorXd& row) const {
    const CartNode& leaf = leaf_for(row);
    if (task == CartTask::kRegression) return leaf.prediction;
    Eigen::Index best = 0;
    leaf.class_counts.maxCoeff(&best);
    return static_cast<double>(best);
  }

  Eigen::VectorXd class_probs(const Eigen::VectorXd& row) const {
    if (task != CartTask::kClassification) throw ProtocolError("class_probs on a regression tree");
    const CartNode& leaf = leaf_for(row);
    return leaf.class_counts / leaf.class_counts.sum();
  }
};

namespace detail {

// Regression impurity: sum of squared deviations. Classification: n * Gini.
inline double impurity(CartTask task, const std::vector<int>& ids, const Eigen::VectorXd& y,
                       int n_classes) {
  if (ids.empty()) return 0.0;
  if (task == CartTask::kRegression) {
    double mean = 0.0;
    for (int i : ids) mean += y(i);
    mean /= static_cast<double>(ids.size());
    double sse = 0.0;
    for (int i : ids) sse += (y(i) - mean) * (y(i) - mean);
    return sse;
  }
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_classes);
  for (int i : ids) counts(static_cast<int>(y(i))) += 1.0;
  const double n = static_cast<double>(ids.size());
  double gini = 1.0;
  for (int c = 0; c < n_classes; ++c) gini -= (counts(c) / n) * (counts(c) / n);
  return n * gini;
}

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  bool categorical = false;
  double level = 0.0;
  double child_impurity = 0.0;
};

// Scans features ascending and thresholds/levels ascending, keeping strictly
// better candidates only, which realizes the deterministic tie-break (lowest
// feature index, then smallest threshold or level).
inline SplitChoice best_split(const FeatureTable& ft, const Eigen::VectorXd& y, CartTask task,
                              int n_classes, const std::vector<int>& ids, int min_leaf) {
  SplitChoice best;
  std::vector<int> left, right;
  auto consider = [&](int f, bool cat, double thr_or_level) {
    left.clear();
    right.clear();
    for (int i : ids) {
      const double v = ft.values(i, f);
      const bool go_left = cat ? v == thr_or_level : v < thr_or_level;
      (go_left ? left : right).push_back(i);
    }
    if (static_cast<int>(left.size()) < min_leaf || static_cast<int>(right.size()) < min_leaf)
      return;
    const double child =
        impurity(task, left, y, n_classes) + impurity(task, right, y, n_classes);
    if (!best.found || child < best.child_impurity - 1e-12) {
      best.found = true;
      best.feature = f;
      best.categorical = cat;
      if (cat)
        best.level = thr_or_level;
      else
        best.threshold = thr_or_level;
      best.child_impurity = child;
    }
  };
  for (int f = 0; f < static_cast<int>(ft.names.size()); ++f) {
    std::vector<double> vals;
    for (int i : ids) vals.push_back(ft.values(i, f));
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    if (vals.size() < 2) continue;
    if (ft.categorical[static_cast<std::size_t>(f)]) {
      for (double level : vals) consider(f, true, level);
    } else {
      for (std::size_t k = 0; k + 1 < vals.size(); ++k)
        consider(f, false, (vals[k] + vals[k + 1]) / 2.0);
    }
  }
  return best;
}

inline int build_node(CartTree& tree, const FeatureTable& ft, const Eigen::VectorXd& y,
                      const std::vector<int>& ids) {
  CartNode node;
  node.n_samples = static_cast<int>(ids.size());
  node.impurity = impurity(tree.task, ids, y, tree.n_classes);
  if (tree.task == CartTask::kRegression) {
    double mean = 0.0;
    for (int i : ids) mean += y(i);
    node.prediction = mean / static_cast<double>(ids.size());
  } else {
    node.class_counts = Eigen::VectorXd::Zero(tree.n_classes);
    for (int i : ids) node.class_counts(static_cast<int>(y(i))) += 1.0;
  }
  const int my_id = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back(node);

  if (static_cast<int>(ids.size()) < 2 * tree.min_leaf || node.impurity <= 1e-12) return my_id;
  const SplitChoice split = best_split(ft, y, tree.task, tree.n_classes, ids, tree.min_leaf);
  // Splits must strictly reduce impurity.
  if (!split.found || split.child_impurity >= node.impurity - 1e-12) return my_id;

  std::vector<int> left_ids, right_ids;
  for (int i : ids) {
    const double v = ft.values(i, split.feature);
    const bool go_left = split.categorical ? v == split.level : v < split.threshold;
    (go_left ? left_ids : right_ids).push_back(i);
  }
  const int left = build_node(tree, ft, y, left_ids);
  const int right = build_node(tree, ft, y, right_ids);
  CartNode& me = tree.nodes[static_cast<std::size_t>(my_id)];
  me.feature = split.feature;
  me.categorical = split.categorical;
  me.threshold = split.threshold;
  me.level = split.level;
  me.left = left;
  me.right = right;
  return my_id;
}

}  // namespace detail

inline CartTree cart_fit(const FeatureTable& ft, const Eigen::VectorXd& target, CartTask task,
                         int min_leaf) {
  ft.validate();
  if (min_leaf < 1) throw ConfigError("min_leaf must be at least 1");
  if (target.size() != ft.values.rows()) throw ConfigError("CART target length mismatch");
  if (target.size() == 0) throw ConfigError("CART needs at least one sample");
  for (Eigen::Index i = 0; i < target.size(); ++i)
    if (!std::isfinite(target(i))) throw NumericError("CART target contains a non-finite value");
  CartTree tree;
  tree.task = task;
  tree.min_leaf = min_leaf;
  if (task == CartTask::kClassification) {
    int n_classes = 0;
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      if (target(i) != std::floor(target(i)) || target(i) < 0.0)
        throw ConfigError("classification target must hold non-negative class indices");
      n_classes = std::max(n_classes, static_cast<int>(target(i)) + 1);
    }
    tree.n_classes = n_classes;
  }
  std::vector<int> ids(static_cast<std::size_t>(target.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  detail::build_node(tree, ft, target, ids);
  return tree;
}

// ---------------------------------------------------------------------------
// Behavior profiles.

struct PolicyProfile {
  std::string county;
  std::string policy;
  double budget_mean = 0.0;       // mean sampled budget per episode
  double alert_dos_median = -1.0; // median alert day-of-summer; -1 when no alerts
  double streak_mean = 0.0;       // mean alert-streak length; 0 when no alerts
  double alerts_mean = 0.0;       // mean effective alerts per summer
  double tau_variance = 0.0;      // variance of per-episode mean effectiveness
  data::SpatialFeatures spatial;
};

inline PolicyProfile build_profile(const std::string& county, const std::string& policy,
                                   const eval::PolicyEvalResult& r,
                                   const data::SpatialFeatures& spatial) {
  PolicyProfile p;
  p.county = county;
  p.policy = policy;
  p.spatial = spatial;
  double budget_sum = 0.0;
  for (int b : r.budgets) budget_sum += b;
  p.budget_mean = budget_sum / static_cast<double>(r.budgets.size());
  std::vector<double> all_days;
  long total_alerts = 0;
  long streak_total = 0, streak_count = 0;
  for (const auto& days : r.alert_days) {
    total_alerts += static_cast<long>(days.size());
    for (int d : days) all_days.push_back(static_cast<double>(d));
    for (int s : streaks_from_days(days)) {
      streak_total += s;
      ++streak_count;
    }
  }
  if (streak_total != total_alerts)
    throw NumericError("streak lengths do not partition the alert days");
  p.alerts_mean = static_cast<double>(total_alerts) / static_cast<double>(r.alert_days.size());
  if (!all_days.empty()) p.alert_dos_median = median(all_days);
  if (streak_count > 0) p.streak_mean = static_cast<double>(streak_total) / streak_count;
  const double tau_mean = r.mean_tau.mean();
  p.tau_variance = (r.mean_tau.array() - tau_mean).square().sum() /
                   std::max<double>(1.0, static_cast<double>(r.mean_tau.size()) - 1.0);
  return p;
}

inline void write_profiles_csv(const std::string& path, const std::vector<PolicyProfile>& ps) {
  CsvWriter w(path, {"county", "policy", "budget_mean", "alert_dos_median", "streak_mean",
                     "alerts_mean", "tau_variance", "region", "pop_density", "median_hh_income",
                     "democratic_pct", "broadband_pct", "pm25"});
  for (const auto& p : ps)
    w.write_row_strings({p.county, p.policy, format_double(p.budget_mean),
                         format_double(p.alert_dos_median), format_double(p.streak_mean),
                         format_double(p.alerts_mean), format_double(p.tau_variance),
                         data::region_name(p.spatial.region), format_double(p.spatial.pop_density),
                         format_double(p.spatial.median_hh_income),
                         format_double(p.spatial.democratic_pct),
                         format_double(p.spatial.broadband_pct), format_double(p.spatial.pm25)});
}

// ---------------------------------------------------------------------------
// Contrastive report.

struct ContrastiveReport {
  FeatureTable features;               // one row per county
  std::vector<std::string> counties;
  Eigen::VectorXd return_diff;         // target policy minus reference, mean return
  CartTree regression;
  std::vector<std::string> class_names;  // classification label order
  Eigen::VectorXd best_policy;            // class index per county
  CartTree classification;
  bool regression_single_leaf_warning = false;
};

// County-level feature matrix from the target policy's behavior profiles plus
// conventional spatial covariates. Region is the single categorical feature.
inline FeatureTable profile_features(const std::vector<PolicyProfile>& profiles) {
  FeatureTable ft;
  ft.names = {"budget",         "alert_dos_median", "streak_mean",   "alerts_mean",
              "tau_variance",   "pop_density",      "median_hh_income", "democratic_pct",
              "broadband_pct",  "pm25",             "region"};
  ft.categorical.assign(ft.names.size(), false);
  ft.categorical.back() = true;
  ft.values.resize(static_cast<Eigen::Index>(profiles.size()),
                   static_cast<Eigen::Index>(ft.names.size()));
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const auto& p = profiles[i];
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    ft.values(r, 0) = p.budget_mean;
    ft.values(r, 1) = p.alert_dos_median;
    ft.values(r, 2) = p.streak_mean;
    ft.values(r, 3) = p.alerts_mean;
    ft.values(r, 4) = p.tau_variance;
    ft.values(r, 5) = p.spatial.pop_density;
    ft.values(r, 6) = p.spatial.median_hh_income;
    ft.values(r, 7) = p.spatial.democratic_pct;
    ft.values(r, 8) = p.spatial.broadband_pct;
    ft.values(r, 9) = p.spatial.pm25;
    ft.values(r, 10) = static_cast<double>(static_cast<int>(p.spatial.region));
  }
  return ft;
}

// Regression tree on (target - reference) mean return, classification tree on
// the best-performing policy per county.
inline ContrastiveReport contrastive_report(const eval::EvaluationReport& report,
                                            const data::Dataset& ds,
                                            const std::string& target_policy,
                                            int min_leaf_regression = 5,
                                            int min_leaf_classification = 3) {
  if (report.counties.size() < 2)
    throw ConfigError("contrastive analysis needs at least two counties");
  if (report.results.size() < 2)
    throw ConfigError("contrastive analysis needs at least two evaluated policies");
  const auto target_it = report.results.find(target_policy);
  if (target_it == report.results.end())
    throw ConfigError("target policy '" + target_policy + "' was not evaluated");
  const auto ref_it = report.results.find(report.reference);
  if (ref_it == report.results.end())
    throw ConfigError("reference policy '" + report.reference + "' was not evaluated");

  ContrastiveReport out;
  out.counties = report.counties;
  std::vector<PolicyProfile> profiles;
  for (std::size_t k = 0; k < report.counties.size(); ++k)
    profiles.push_back(build_profile(
        report.counties[k], target_policy, target_it->second[k],
        ds.counties[static_cast<std::size_t>(ds.county_index(report.counties[k]))].spatial));
  out.features = profile_features(profiles);

  out.return_diff.resize(static_cast<Eigen::Index>(report.counties.size()));
  for (std::size_t k = 0; k < report.counties.size(); ++k)
    out.return_diff(static_cast<Eigen::Index>(k)) =
        target_it->second[k].returns.mean() - ref_it->second[k].returns.mean();
  out.regression =
      cart_fit(out.features, out.return_diff, CartTask::kRegression, min_leaf_regression);
  out.regression_single_leaf_warning =
      static_cast<int>(report.counties.size()) < 2 * min_leaf_regression;

  for (const auto& [name, _] : report.results) out.class_names.push_back(name);
  std::sort(out.class_names.begin(), out.class_names.end());
  out.best_policy.resize(static_cast<Eigen::Index>(report.counties.size()));
  for (std::size_t k = 0; k < report.counties.size(); ++k) {
    double best = -std::numeric_limits<double>::infinity();
    int best_c = 0;
    for (std::size_t c = 0; c < out.class_names.size(); ++c) {
      const double m = report.results.at(out.class_names[c])[k].returns.mean();
      if (m > best) {
        best = m;
        best_c = static_cast<int>(c);
      }
    }
    out.best_policy(static_cast<Eigen::Index>(k)) = best_c;
  }
  out.classification =
      cart_fit(out.features, out.best_policy, CartTask::kClassification, min_leaf_classification);
  return out;
}

// ---------------------------------------------------------------------------
// Renderers.

inline std::string render_tree_text(const CartTree& tree, const FeatureTable& ft,
                                    const std::vector<std::string>& class_names = {}) {
  std::ostringstream os;
  auto leaf_label = [&](const CartNode& n) {
    std::ostringstream ls;
    if (tree.task == CartTask::kRegression) {
      ls << "predict " << format_double(n.prediction);
    } else {
      Eigen::Index best = 0;
      n.class_counts.maxCoeff(&best);
      const std::string name = class_names.empty() ? std::to_string(best)
                                                   : class_names[static_cast<std::size_t>(best)];
      ls << "predict " << name << " (p=" << format_double(n.class_counts(best) / n.class_counts.sum())
         << ")";
    }
    ls << " [n=" << n.n_samples << "]";
    return ls.str();
  };
  std::function<void(int, int)> walk = [&](int id, int depth) {
    const CartNode& n = tree.nodes[static_cast<std::size_t>(id)];
    const std::string pad(static_cast<std::size_t>(depth) * 2, ' ');
    if (n.is_leaf()) {
      os << pad << leaf_label(n) << "\n";
      return;
    }
    const std::string& fname = ft.names[static_cast<std::size_t>(n.feature)];
    if (n.categorical) {
      std::string level = std::to_string(static_cast<int>(n.level));
      if (fname == "region") level = data::region_name(static_cast<data::ClimateRegion>(static_cast<int>(n.level)));
      os << pad << "if " << fname << " == " << level << " [n=" << n.n_samples << "]\n";
    } else {
      os << pad << "if " << fname << " < " << format_double(n.threshold) << " [n=" << n.n_samples
         << "]\n";
    }
    walk(n.left, depth + 1);
    os << pad << "else\n";
    walk(n.right, depth + 1);
  };
  if (!tree.nodes.empty()) walk(0, 0);
  return os.str();
}

inline void write_tree_csv(const std::string& path, const CartTree& tree, const FeatureTable& ft,
                           const std::vector<std::string>& class_names = {}) {
  CsvWriter w(path, {"node", "feature", "threshold_or_level", "left", "right", "n_samples",
                     "impurity", "prediction"});
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const CartNode& n = tree.nodes[i];
    std::string feature = n.is_leaf() ? "" : ft.names[static_cast<std::size_t>(n.feature)];
    std::string prediction;
    if (tree.task == CartTask::kRegression) {
      prediction = format_double(n.prediction);
    } else {
      Eigen::Index best = 0;
      n.class_counts.maxCoeff(&best);
      prediction = class_names.empty() ? std::to_string(best)
                                       : class_names[static_cast<std::size_t>(best)];
    }
    w.write_row_strings({std::to_string(i), feature,
                         n.is_leaf() ? "" : format_double(n.categorical ? n.level : n.threshold),
                         std::to_string(n.left), std::to_string(n.right),
                         std::to_string(n.n_samples), format_double(n.impurity), prediction});
  }
}

}  // namespace broach::explain
