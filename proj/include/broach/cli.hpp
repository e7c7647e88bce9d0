#pragma once

// Command-line orchestration of the full pipeline. Each cmd_* is a pure
// function of (config, seeds, input files): reruns produce byte-identical
// artifacts. run_cli maps exceptions to exit codes: 0 success, 2 usage or
// config error, 3 runtime or numeric error.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "broach/common.hpp"
#include "broach/csv.hpp"
#include "broach/data_core.hpp"
#include "broach/environment.hpp"
#include "broach/evaluation.hpp"
#include "broach/explain.hpp"
#include "broach/policies.hpp"
#include "broach/rewards_model.hpp"
#include "broach/rl_agents.hpp"
#include "broach/synthetic.hpp"

namespace broach::cli {

inline const std::vector<int> kDefaultTrainingYears = {2006, 2008, 2009, 2010,
                                                       2012, 2013, 2014, 2016};
inline const std::vector<int> kDefaultEvaluationYears = {2007, 2011, 2015};

struct NamedPolicy {
  std::string name;  // defaults to the kind name
  policy::PolicySpec spec;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir = "out";
  // Where defaulted inputs are looked up. Equals the config's own output_dir;
  // a --out override moves artifacts without moving the inputs.
  std::string input_dir = "out";
  std::string daily_path;    // default <input_dir>/daily.csv
  std::string spatial_path;  // default <input_dir>/spatial.csv
  std::string rewards_checkpoint;  // default <input_dir>/rewards_model.json
  std::vector<int> training_years = kDefaultTrainingYears;
  std::vector<int> evaluation_years = kDefaultEvaluationYears;
  std::vector<std::string> counties;  // empty = every county in the dataset
  bool future_info = false;

  synth::SynthConfig synth;
  bool has_synth = false;

  rewards::ModelConfig model;
  rewards::FitConfig fit;

  std::vector<rl::AgentConfig> agents;
  std::vector<NamedPolicy> policies;

  int eval_episodes = 1000;
  std::string reference = "nws";

  std::string explain_target;  // default: first non-reference policy
  int min_leaf_regression = 5;
  int min_leaf_classification = 3;

  std::string resolved_daily() const {
    return daily_path.empty() ? input_dir + "/daily.csv" : daily_path;
  }
  std::string resolved_spatial() const {
    return spatial_path.empty() ? input_dir + "/spatial.csv" : spatial_path;
  }
  std::string resolved_checkpoint() const {
    return rewards_checkpoint.empty() ? input_dir + "/rewards_model.json" : rewards_checkpoint;
  }
  // Write-side counterparts: producers put defaulted artifacts under output_dir.
  std::string daily_out() const {
    return daily_path.empty() ? output_dir + "/daily.csv" : daily_path;
  }
  std::string spatial_out() const {
    return spatial_path.empty() ? output_dir + "/spatial.csv" : spatial_path;
  }
  std::string checkpoint_out() const {
    return rewards_checkpoint.empty() ? output_dir + "/rewards_model.json" : rewards_checkpoint;
  }

  void validate() const {
    if (!seed_set) throw ConfigError("config must set a seed (no wall-clock seeding)");
    if (training_years.empty() || evaluation_years.empty())
      throw ConfigError("training_years and evaluation_years must be nonempty");
    for (int y : training_years)
      if (std::find(evaluation_years.begin(), evaluation_years.end(), y) !=
          evaluation_years.end())
        throw ConfigError("year " + std::to_string(y) +
                          " appears in both training_years and evaluation_years");
    for (int y : training_years)
      if (y < 2006 || y > 2016)
        throw ConfigError("training year " + std::to_string(y) + " outside 2006-2016");
    for (int y : evaluation_years)
      if (y < 2006 || y > 2016)
        throw ConfigError("evaluation year " + std::to_string(y) + " outside 2006-2016");
    if (eval_episodes <= 0) throw ConfigError("evaluation.n_episodes must be positive");
    if (min_leaf_regression < 1 || min_leaf_classification < 1)
      throw ConfigError("explain min_leaf values must be at least 1");
    for (std::size_t i = 0; i < policies.size(); ++i) {
      if (policies[i].name.empty()) throw ConfigError("policy entries need nonempty names");
      for (std::size_t j = i + 1; j < policies.size(); ++j)
        if (policies[i].name == policies[j].name)
          throw ConfigError("duplicate policy name '" + policies[i].name + "'");
      policies[i].spec.validate();
    }
    for (const auto& a : agents) a.validate();
  }
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  if (j.contains("seed")) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.seed_set = true;
  }
  c.output_dir = j.value("output_dir", c.output_dir);
  c.input_dir = c.output_dir;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.daily_path = d.value("daily", "");
    c.spatial_path = d.value("spatial", "");
  }
  if (j.contains("training_years"))
    c.training_years = j.at("training_years").get<std::vector<int>>();
  if (j.contains("evaluation_years"))
    c.evaluation_years = j.at("evaluation_years").get<std::vector<int>>();
  if (j.contains("counties")) c.counties = j.at("counties").get<std::vector<std::string>>();
  c.future_info = j.value("future_info", false);
  if (j.contains("synth")) {
    c.synth = j.at("synth").get<synth::SynthConfig>();
    c.has_synth = true;
  }
  if (j.contains("rewards")) {
    const auto& r = j.at("rewards");
    c.rewards_checkpoint = r.value("checkpoint", "");
    if (r.contains("model")) {
      const auto& m = r.at("model");
      c.model.rank = m.value("rank", c.model.rank);
      c.model.hidden_units = m.value("hidden_units", c.model.hidden_units);
      c.model.infer_sigma = m.value("infer_sigma", c.model.infer_sigma);
      c.model.fixed_sigma = m.value("fixed_sigma", c.model.fixed_sigma);
    }
    if (r.contains("fit")) {
      const auto& f = r.at("fit");
      c.fit.epochs = f.value("epochs", c.fit.epochs);
      c.fit.lr = f.value("lr", c.fit.lr);
      c.fit.lr_decay = f.value("lr_decay", c.fit.lr_decay);
      c.fit.n_mc = f.value("n_mc", c.fit.n_mc);
      c.fit.n_mc_eval = f.value("n_mc_eval", c.fit.n_mc_eval);
      c.fit.theta_lr_scale = f.value("theta_lr_scale", c.fit.theta_lr_scale);
      c.fit.train_prior = f.value("train_prior", c.fit.train_prior);
      c.fit.convergence_tol = f.value("convergence_tol", c.fit.convergence_tol);
      c.fit.convergence_window = f.value("convergence_window", c.fit.convergence_window);
      c.fit.param_ema = f.value("param_ema", c.fit.param_ema);
    }
  }
  if (j.contains("agents"))
    for (const auto& a : j.at("agents")) c.agents.push_back(a.get<rl::AgentConfig>());
  if (j.contains("policies")) {
    for (const auto& p : j.at("policies")) {
      NamedPolicy np;
      np.spec = p.get<policy::PolicySpec>();
      np.name = p.value("name", policy::kind_name(np.spec.kind));
      c.policies.push_back(std::move(np));
    }
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    c.eval_episodes = e.value("n_episodes", c.eval_episodes);
    c.reference = e.value("reference", c.reference);
  }
  if (j.contains("explain")) {
    const auto& e = j.at("explain");
    c.explain_target = e.value("target", "");
    c.min_leaf_regression = e.value("min_leaf_regression", c.min_leaf_regression);
    c.min_leaf_classification = e.value("min_leaf_classification", c.min_leaf_classification);
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw SchemaError("malformed config JSON in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

namespace detail {

// Runs fn(0..n-1) on up to `jobs` threads. Tasks must only write to their own
// preallocated slots; the first task exception (by index) is rethrown after
// all workers join, so artifacts are written once by the coordinator.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<std::string> resolve_counties(const RunConfig& cfg, const data::Dataset& ds) {
  if (cfg.counties.empty()) {
    std::vector<std::string> all;
    for (const auto& c : ds.counties) all.push_back(c.id);
    return all;
  }
  for (const auto& id : cfg.counties) ds.county_index(id);  // throws on unknown ids
  return cfg.counties;
}

inline env::EnvOptions env_options(const RunConfig& cfg, env::Mode mode) {
  env::EnvOptions opts;
  opts.mode = mode;
  opts.future_info = cfg.future_info;
  opts.eval_years = cfg.evaluation_years;
  return opts;
}

// Per-county threshold choice for the fixed-rule baseline: scores each grid
// candidate on validate-mode episodes under common random numbers.
struct BaselineTune {
  double threshold = 0.0;
  double score = 0.0;
};

inline BaselineTune tune_aaqhi(const data::Dataset& ds, const rewards::PosteriorSampler& post,
                               const RunConfig& cfg, const std::string& county, int n_episodes,
                               std::uint64_t seed) {
  BaselineTune best;
  bool first = true;
  for (double h : policy::threshold_grid()) {
    policy::AaqhiPolicy pol(h);
    env::BroachEnv e(ds, post, county, env_options(cfg, env::Mode::kValidate));
    double total = 0.0;
    for (int i = 0; i < n_episodes; ++i) {
      Rng reset_rng = make_stream(seed, hash_str("aaqhi-epi"), static_cast<std::uint64_t>(i));
      Rng act_rng = make_stream(seed, hash_str("aaqhi-act"), static_cast<std::uint64_t>(i));
      Eigen::VectorXd obs = e.reset(reset_rng);
      bool done = false;
      while (!done) {
        const int a = policy::act(pol, obs, e.context(), policy::EvalMode::kStochastic, act_rng);
        const auto sr = e.step(a);
        total += sr.reward;
        obs = sr.obs;
        done = sr.done;
      }
    }
    const double score = total / n_episodes;
    if (first || score > best.score) {  // strict: ties keep the smaller threshold
      best.threshold = h;
      best.score = score;
      first = false;
    }
  }
  return best;
}

inline std::string policy_checkpoint_path(const RunConfig& cfg, const std::string& algo,
                                          const std::string& county) {
  return cfg.output_dir + "/policy_" + algo + "_" + county + ".json";
}

struct EvalArtifacts {
  eval::EvaluationReport report;
  std::vector<std::string> policy_order;
  std::map<std::string, policy::EvalMode> modes;
};

// Shared by cmd_evaluate and cmd_explain so both see the identical episodes.
inline EvalArtifacts run_evaluation(const RunConfig& cfg, const data::Dataset& ds,
                                    const rewards::PosteriorSampler& post, int jobs) {
  if (cfg.policies.empty()) throw ConfigError("evaluate needs a nonempty policies list");
  EvalArtifacts out;
  out.report.counties = resolve_counties(cfg, ds);
  out.report.reference = cfg.reference;

  struct Task {
    std::string policy_name;
    std::size_t county_idx = 0;
  };
  std::vector<Task> tasks;
  std::map<std::string, std::shared_ptr<const policy::Policy>> built;
  for (const auto& np : cfg.policies) {
    std::shared_ptr<const policy::Policy> pol;
    if (np.spec.kind == policy::Kind::kLearned)
      pol = std::make_shared<rl::LearnedPolicy>(rl::LearnedPolicy::load(np.spec.checkpoint));
    else
      pol = policy::make_policy(np.spec);
    built[np.name] = std::move(pol);
    out.policy_order.push_back(np.name);
    out.modes[np.name] = np.spec.eval_mode;
    out.report.results[np.name].resize(out.report.counties.size());
    for (std::size_t k = 0; k < out.report.counties.size(); ++k)
      tasks.push_back({np.name, k});
  }
  if (!out.report.results.count(cfg.reference))
    throw ConfigError("reference policy '" + cfg.reference + "' is not in the policies list");

  eval::EvalOptions opt;
  opt.n_episodes = cfg.eval_episodes;
  opt.seed = mix64(cfg.seed ^ hash_str("evaluate"));
  opt.future_info = cfg.future_info;
  opt.eval_years = cfg.evaluation_years;
  parallel_for(static_cast<int>(tasks.size()), jobs, [&](int i) {
    const Task& t = tasks[static_cast<std::size_t>(i)];
    out.report.results.at(t.policy_name)[t.county_idx] =
        eval::evaluate_policy(ds, post, *built.at(t.policy_name), out.modes.at(t.policy_name),
                              out.report.counties[t.county_idx], opt);
  });
  eval::assemble_rows(out.report, out.policy_order);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each throws on failure; run_cli translates to exit codes.

inline void cmd_synth(const RunConfig& cfg) {
  if (!cfg.has_synth) throw ConfigError("config has no synth section");
  const synth::SynthResult r = synth::generate_synthetic(cfg.synth, cfg.seed);
  std::filesystem::create_directories(cfg.output_dir);
  data::write_daily_csv(cfg.daily_out(), r.dataset);
  data::write_spatial_csv(cfg.spatial_out(), r.dataset);
  std::cout << "wrote " << r.dataset.total_rows() << " rows for " << r.dataset.counties.size()
            << " counties to " << cfg.daily_out() << "\n";
}

inline bool cmd_fit_rewards(const RunConfig& cfg) {
  const data::Dataset ds = data::load_dataset(cfg.resolved_daily(), cfg.resolved_spatial());
  // The rewards model sees every year in the dataset; only the RL environment
  // splits years into train and evaluation sets.
  rewards::RewardsModel model(ds, cfg.model, mix64(cfg.seed ^ hash_str("rewards-init")));
  const rewards::FitReport report = model.fit(cfg.fit, mix64(cfg.seed ^ hash_str("rewards-fit")));
  std::filesystem::create_directories(cfg.output_dir);
  model.save(cfg.checkpoint_out());
  {
    CsvWriter w(cfg.output_dir + "/elbo_trace.csv", {"epoch", "elbo"});
    for (std::size_t e = 0; e < report.elbo_trace.size(); ++e)
      w.write_row_strings({std::to_string(e + 1), format_double(report.elbo_trace[e])});
  }
  {
    nlohmann::json j = {{"converged", report.converged},
                        {"epochs_run", report.epochs_run},
                        {"final_elbo", report.elbo_trace.empty() ? 0.0 : report.elbo_trace.back()}};
    std::ofstream out(cfg.output_dir + "/fit_report.json");
    out << j.dump(1) << "\n";
  }
  std::cout << "fit " << report.epochs_run << " epochs, converged="
            << (report.converged ? "true" : "false") << ", checkpoint " << cfg.checkpoint_out()
            << "\n";
  if (!report.converged)
    std::cout << "warning: ELBO trace did not meet the convergence criterion; "
                 "the checkpoint holds the final averaged parameters\n";
  return report.converged;
}

inline void cmd_train(const RunConfig& cfg, int jobs) {
  if (cfg.agents.empty()) throw ConfigError("train needs a nonempty agents list");
  const data::Dataset ds = data::load_dataset(cfg.resolved_daily(), cfg.resolved_spatial());
  const rewards::RewardsModel post = rewards::RewardsModel::load(cfg.resolved_checkpoint(), ds);
  const std::vector<std::string> counties = detail::resolve_counties(cfg, ds);
  std::filesystem::create_directories(cfg.output_dir);

  struct Task {
    std::string county;
    int agent_idx = -1;  // -1 marks the aa.qhi baseline tuning slot
  };
  std::vector<Task> tasks;
  for (const auto& county : counties) {
    for (std::size_t a = 0; a < cfg.agents.size(); ++a)
      tasks.push_back({county, static_cast<int>(a)});
    tasks.push_back({county, -1});
  }
  struct Row {
    std::string county, algo;
    double threshold = 0.0, score = 0.0;
    rl::LearnedPolicy policy;
    bool learned = false;
  };
  std::vector<Row> rows(tasks.size());
  detail::parallel_for(static_cast<int>(tasks.size()), jobs, [&](int i) {
    const Task& t = tasks[static_cast<std::size_t>(i)];
    Row& row = rows[static_cast<std::size_t>(i)];
    row.county = t.county;
    if (t.agent_idx < 0) {
      row.algo = "aa.qhi";
      const auto tuned = detail::tune_aaqhi(ds, post, cfg, t.county, cfg.eval_episodes,
                                            mix64(cfg.seed ^ hash_str("aaqhi-" + t.county)));
      row.threshold = tuned.threshold;
      row.score = tuned.score;
      return;
    }
    rl::AgentConfig sub = cfg.agents[static_cast<std::size_t>(t.agent_idx)];
    row.algo = rl::algo_name(sub.algo);
    sub.seed = mix64(mix64(cfg.seed ^ hash_str("train-" + t.county)) ^ hash_str(row.algo));
    const rl::EnvFactory factory = [&, county = t.county](env::Mode mode) {
      return std::make_unique<env::BroachEnv>(ds, post, county, detail::env_options(cfg, mode));
    };
    rl::TuneResult tuned = rl::tune_threshold(factory, sub);
    row.threshold = tuned.threshold;
    std::size_t best = 0;
    for (std::size_t k = 1; k < tuned.grid.size(); ++k)
      if (tuned.grid[k] == tuned.threshold) best = k;
    row.score = tuned.scores[best];
    row.policy = std::move(tuned.policy);
    row.learned = true;
  });

  CsvWriter w(cfg.output_dir + "/train_summary.csv",
              {"county", "algo", "threshold", "validation_return"});
  for (const auto& row : rows) {
    if (row.learned)
      row.policy.save(detail::policy_checkpoint_path(cfg, row.algo, row.county));
    w.write_row_strings(
        {row.county, row.algo, format_double(row.threshold), format_double(row.score)});
  }
  std::cout << "trained " << counties.size() << " counties x " << cfg.agents.size()
            << " agents; summary " << cfg.output_dir << "/train_summary.csv\n";
}

inline void cmd_evaluate(const RunConfig& cfg, int jobs) {
  const data::Dataset ds = data::load_dataset(cfg.resolved_daily(), cfg.resolved_spatial());
  const rewards::RewardsModel post = rewards::RewardsModel::load(cfg.resolved_checkpoint(), ds);
  const detail::EvalArtifacts art = detail::run_evaluation(cfg, ds, post, jobs);
  std::filesystem::create_directories(cfg.output_dir);
  eval::write_results_csv(cfg.output_dir + "/results.csv", art.report.rows);
  eval::write_ci_csv(cfg.output_dir + "/ci.csv", art.report.rows);
  for (const auto& name : art.policy_order)
    eval::write_returns_csv(cfg.output_dir + "/returns_" + name + ".csv", art.report.counties,
                            art.report.results.at(name));
  std::cout << "evaluated " << art.policy_order.size() << " policies on "
            << art.report.counties.size() << " counties; results " << cfg.output_dir
            << "/results.csv\n";
}

inline void cmd_explain(const RunConfig& cfg, int jobs) {
  const data::Dataset ds = data::load_dataset(cfg.resolved_daily(), cfg.resolved_spatial());
  const rewards::RewardsModel post = rewards::RewardsModel::load(cfg.resolved_checkpoint(), ds);
  const detail::EvalArtifacts art = detail::run_evaluation(cfg, ds, post, jobs);

  std::string target = cfg.explain_target;
  if (target.empty()) {
    for (const auto& name : art.policy_order)
      if (name != cfg.reference) {
        target = name;
        break;
      }
    if (target.empty()) throw ConfigError("explain needs a non-reference target policy");
  }
  const explain::ContrastiveReport rep = explain::contrastive_report(
      art.report, ds, target, cfg.min_leaf_regression, cfg.min_leaf_classification);

  std::filesystem::create_directories(cfg.output_dir);
  std::vector<explain::PolicyProfile> profiles;
  for (const auto& name : art.policy_order)
    for (std::size_t k = 0; k < art.report.counties.size(); ++k)
      profiles.push_back(explain::build_profile(
          art.report.counties[k], name, art.report.results.at(name)[k],
          ds.counties[static_cast<std::size_t>(ds.county_index(art.report.counties[k]))].spatial));
  explain::write_profiles_csv(cfg.output_dir + "/profiles.csv", profiles);

  auto dump_text = [&](const std::string& name, const explain::CartTree& tree,
                       const std::vector<std::string>& class_names) {
    std::ofstream out(cfg.output_dir + "/tree_" + name + ".txt");
    if (!out) throw ConfigError("cannot write tree file for " + name);
    out << explain::render_tree_text(tree, rep.features, class_names);
    explain::write_tree_csv(cfg.output_dir + "/tree_" + name + ".csv", tree, rep.features,
                            class_names);
  };
  dump_text("regression", rep.regression, {});
  dump_text("classification", rep.classification, rep.class_names);
  std::cout << "explain target '" << target << "': trees and profiles in " << cfg.output_dir
            << "\n";
  if (rep.regression_single_leaf_warning)
    std::cout << "warning: fewer counties than 2 x min_leaf; the regression tree is a single "
                 "leaf\n";
}

// ---------------------------------------------------------------------------
// Entry point.

inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"BROACH: budget-constrained heat-alert policy pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_override = 0;
  bool has_seed = false;
  int jobs = 1;
  std::string out_override;

  const std::vector<std::string> names = {"synth", "fit-rewards", "train", "evaluate", "explain"};
  const std::vector<std::string> blurbs = {
      "generate a synthetic dataset", "fit the hospitalization rewards model",
      "train RL agents with threshold tuning", "run the statistical policy comparison",
      "fit contrastive decision trees"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    CLI::App* sub = app.add_subcommand(names[i], blurbs[i]);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed_override, "override the config seed")
        ->each([&](const std::string&) { has_seed = true; });
    sub->add_option("--jobs", jobs, "worker threads for per-county tasks")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", out_override, "override the config output directory");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    if (has_seed) {
      cfg.seed = seed_override;
      cfg.seed_set = true;
    }
    if (!out_override.empty()) cfg.output_dir = out_override;
    cfg.validate();
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "synth")
      cmd_synth(cfg);
    else if (sub == "fit-rewards")
      cmd_fit_rewards(cfg);
    else if (sub == "train")
      cmd_train(cfg, jobs);
    else if (sub == "evaluate")
      cmd_evaluate(cfg, jobs);
    else
      cmd_explain(cfg, jobs);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace broach::cli
