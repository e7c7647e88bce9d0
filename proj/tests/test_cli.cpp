// CLI: full pipeline runs in-process on a small synthetic config, artifact
// inventory, byte-identical reruns across thread counts, and exit codes.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "broach/cli.hpp"

using namespace broach;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

nlohmann::json base_config(const std::string& dir) {
  return {
      {"seed", 777},
      {"output_dir", dir},
      {"synth",
       {{"counties",
         {{{"id", "06001"}, {"region", "HotDry"}},
          {{"id", "06002"}, {"region", "HotDry"}},
          {{"id", "06003"}, {"region", "HotDry"}},
          {{"id", "06005"}, {"region", "MixedHumid"}},
          {{"id", "06006"}, {"region", "MixedHumid"}}}},
        {"years", {2006, 2007, 2008, 2009, 2010, 2011}}}},
      {"evaluation_years", {2007, 2011}},
      {"training_years", {2006, 2008, 2009, 2010}},
      {"rewards", {{"fit", {{"epochs", 12}}}}},
      {"agents",
       nlohmann::json::array({{{"algo", "a2c"},
                               {"train_episodes", 60},
                               {"eval_episodes", 20},
                               {"buffer_or_rollout", 1500},
                               {"hidden_units", 16}}})},
      {"policies",
       nlohmann::json::array({{{"kind", "zero"}},
                              {{"kind", "nws"}},
                              {{"kind", "random"}},
                              {{"kind", "aa.qhi"}, {"threshold", 0.7}},
                              {{"kind", "learned"},
                               {"name", "a2c.qhi"},
                               {"checkpoint", dir + "/policy_a2c_06001.json"}}})},
      {"evaluation", {{"n_episodes", 30}, {"reference", "nws"}}},
      {"explain",
       {{"target", "a2c.qhi"}, {"min_leaf_regression", 2}, {"min_leaf_classification", 2}}},
      {"counties", {"06001", "06002", "06003", "06005", "06006"}}};
}

std::string write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2);
  return path;
}

// One full pipeline execution shared by every inspection case below.
struct PipelineRun {
  std::string dir = "/tmp/broach_cli_out";
  std::string cfg_path;
  int rc_synth = -1, rc_fit = -1, rc_train = -1, rc_eval = -1, rc_explain = -1;
};

const PipelineRun& pipeline() {
  static const PipelineRun run = [] {
    PipelineRun r;
    fs::remove_all(r.dir);
    fs::create_directories(r.dir);
    r.cfg_path = write_json(r.dir + "/run.json", base_config(r.dir));
    r.rc_synth = cli::run_cli({"synth", "--config", r.cfg_path});
    r.rc_fit = cli::run_cli({"fit-rewards", "--config", r.cfg_path});
    r.rc_train = cli::run_cli({"train", "--config", r.cfg_path, "--jobs", "2"});
    r.rc_eval = cli::run_cli({"evaluate", "--config", r.cfg_path, "--jobs", "2"});
    r.rc_explain = cli::run_cli({"explain", "--config", r.cfg_path});
    return r;
  }();
  return run;
}

}  // namespace

TEST_CASE("pipeline subcommands succeed and write every artifact", "[cli]") {
  const auto& p = pipeline();
  CHECK(p.rc_synth == 0);
  CHECK(p.rc_fit == 0);
  CHECK(p.rc_train == 0);
  CHECK(p.rc_eval == 0);
  CHECK(p.rc_explain == 0);

  for (const char* f :
       {"daily.csv", "spatial.csv", "rewards_model.json", "elbo_trace.csv", "fit_report.json",
        "train_summary.csv", "results.csv", "ci.csv", "returns_zero.csv", "returns_nws.csv",
        "returns_random.csv", "returns_aa.qhi.csv", "returns_a2c.qhi.csv", "profiles.csv",
        "tree_regression.txt", "tree_regression.csv", "tree_classification.txt",
        "tree_classification.csv"}) {
    INFO("artifact " << f);
    REQUIRE(fs::exists(p.dir + "/" + f));
    REQUIRE(fs::file_size(p.dir + "/" + f) > 0);
  }

  // 5 counties x 6 years x 152 days, plus the header.
  CHECK(lines_of(p.dir + "/daily.csv").size() == 4561);

  const auto fit = nlohmann::json::parse(slurp(p.dir + "/fit_report.json"));
  CHECK(fit.at("converged").is_boolean());
  CHECK(fit.at("epochs_run").get<int>() == 12);
  CHECK(std::isfinite(fit.at("final_elbo").get<double>()));

  const auto elbo = lines_of(p.dir + "/elbo_trace.csv");
  REQUIRE(elbo.size() == 13);
  CHECK(elbo[0] == "epoch,elbo");
}

TEST_CASE("evaluation tables carry exact headers and one row per policy", "[cli]") {
  const auto& p = pipeline();

  const auto results = lines_of(p.dir + "/results.csv");
  REQUIRE(results.size() == 5);
  CHECK(results[0] == "policy,median_diff,W,p_value,per_10k,approx_total");
  // Non-reference policies in config order; the reference never compares to
  // itself.
  CHECK_THAT(results[1], ContainsSubstring("zero,"));
  CHECK_THAT(results[2], ContainsSubstring("random,"));
  CHECK_THAT(results[3], ContainsSubstring("aa.qhi,"));
  CHECK_THAT(results[4], ContainsSubstring("a2c.qhi,"));
  for (const auto& line : results)
    CHECK_THAT(line, !ContainsSubstring("nws,"));

  const auto ci = lines_of(p.dir + "/ci.csv");
  REQUIRE(ci.size() == 5);
  CHECK(ci[0] == "policy,ci_low_per_10k,ci_high_per_10k");

  // Per-episode returns: 5 counties x 30 episodes.
  const auto returns = lines_of(p.dir + "/returns_zero.csv");
  REQUIRE(returns.size() == 151);
  CHECK(returns[0] == "county,episode,return");

  // Never alerting scores below the alert-replaying reference on every
  // county, so its paired statistic pins to the floor of the test.
  std::istringstream zero_row(results[1].substr(5));
  std::string diff_s, w_s, p_s;
  std::getline(zero_row, diff_s, ',');
  std::getline(zero_row, w_s, ',');
  std::getline(zero_row, p_s, ',');
  CHECK(std::stod(diff_s) < 0.0);
  CHECK(std::stod(w_s) == 0.0);
  CHECK(std::stod(p_s) == 1.0);
}

TEST_CASE("train summary holds a grid threshold for every county and algo", "[cli]") {
  const auto& p = pipeline();
  const auto rows = lines_of(p.dir + "/train_summary.csv");
  REQUIRE(rows.size() == 11);  // 5 counties x {a2c, aa.qhi} + header
  CHECK(rows[0] == "county,algo,threshold,validation_return");
  int a2c = 0, aaqhi = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::istringstream ss(rows[i]);
    std::string county, algo, thr, score;
    std::getline(ss, county, ',');
    std::getline(ss, algo, ',');
    std::getline(ss, thr, ',');
    std::getline(ss, score, ',');
    if (algo == "a2c")
      ++a2c;
    else if (algo == "aa.qhi")
      ++aaqhi;
    CHECK(policy::threshold_on_grid(std::stod(thr)));
    CHECK(std::isfinite(std::stod(score)));
  }
  CHECK(a2c == 5);
  CHECK(aaqhi == 5);

  // The trained checkpoint is loadable and restricted by its tuned gate.
  const auto pol = rl::LearnedPolicy::load(p.dir + "/policy_a2c_06001.json");
  CHECK(pol.display_name() == "a2c.qhi");
  CHECK(pol.net().param_count() > 0);
  CHECK(policy::threshold_on_grid(pol.threshold()));
}

TEST_CASE("profiles and trees cover every policy-county pair", "[cli]") {
  const auto& p = pipeline();
  const auto profs = lines_of(p.dir + "/profiles.csv");
  REQUIRE(profs.size() == 26);  // 5 policies x 5 counties + header
  CHECK_THAT(profs[0], ContainsSubstring("county,policy,budget_mean"));

  CHECK_THAT(slurp(p.dir + "/tree_regression.txt"), ContainsSubstring("predict"));
  const auto tree_csv = lines_of(p.dir + "/tree_classification.csv");
  REQUIRE(tree_csv.size() >= 2);
  CHECK(tree_csv[0] == "node,feature,threshold_or_level,left,right,n_samples,impurity,prediction");
}

TEST_CASE("evaluate reruns are byte-identical across thread counts", "[cli]") {
  const auto& p = pipeline();
  const std::string d1 = "/tmp/broach_cli_rerun1", d2 = "/tmp/broach_cli_rerun2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  REQUIRE(cli::run_cli({"evaluate", "--config", p.cfg_path, "--out", d1}) == 0);
  REQUIRE(cli::run_cli({"evaluate", "--config", p.cfg_path, "--out", d2, "--jobs", "3"}) == 0);
  for (const char* f : {"results.csv", "ci.csv", "returns_nws.csv", "returns_a2c.qhi.csv"}) {
    INFO("artifact " << f);
    const std::string a = slurp(d1 + "/" + std::string(f));
    REQUIRE_FALSE(a.empty());
    REQUIRE(a == slurp(d2 + "/" + std::string(f)));
  }
  // The primary run used the same seed and episode count, so the moved
  // output is byte-identical to it as well.
  CHECK(slurp(d1 + "/results.csv") == slurp(p.dir + "/results.csv"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("a seed override changes the sampled evaluation", "[cli]") {
  const auto& p = pipeline();
  const std::string d = "/tmp/broach_cli_seeded";
  fs::remove_all(d);
  REQUIRE(cli::run_cli({"evaluate", "--config", p.cfg_path, "--out", d, "--seed", "123"}) == 0);
  const std::string reseeded = slurp(d + "/returns_zero.csv");
  REQUIRE_FALSE(reseeded.empty());
  CHECK(reseeded != slurp(p.dir + "/returns_zero.csv"));
  fs::remove_all(d);
}

TEST_CASE("usage and configuration failures exit with code 2", "[cli]") {
  const auto& p = pipeline();
  const std::string tmp = "/tmp/broach_cli_badcfg";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  const auto base = base_config(p.dir);

  SECTION("missing config file") {
    CHECK(cli::run_cli({"evaluate", "--config", tmp + "/does_not_exist.json"}) == 2);
  }
  SECTION("malformed JSON") {
    std::ofstream bad(tmp + "/bad.json");
    bad << "{ not json";
    bad.close();
    CHECK(cli::run_cli({"synth", "--config", tmp + "/bad.json"}) == 2);
  }
  SECTION("unknown climate region") {
    nlohmann::json j = {{"seed", 1},
                        {"output_dir", tmp},
                        {"synth",
                         {{"counties", {{{"id", "x"}, {"region", "Tropical"}}}},
                          {"years", {2006}}}}};
    CHECK(cli::run_cli({"synth", "--config", write_json(tmp + "/region.json", j)}) == 2);
  }
  SECTION("training and evaluation years overlap") {
    nlohmann::json j = base;
    j["training_years"] = {2007};
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/years.json", j)}) == 2);
  }
  SECTION("year outside the supported range") {
    nlohmann::json j = base;
    j["training_years"] = {2006, 2017};
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/range.json", j)}) == 2);
  }
  SECTION("unknown algorithm name") {
    nlohmann::json j = base;
    j["agents"][0]["algo"] = "ppo";
    CHECK(cli::run_cli({"train", "--config", write_json(tmp + "/algo.json", j)}) == 2);
  }
  SECTION("learned policy checkpoint missing") {
    nlohmann::json j = base;
    j["policies"][4]["checkpoint"] = tmp + "/nope.json";
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/ckpt.json", j)}) == 2);
  }
  SECTION("seed is mandatory") {
    nlohmann::json j = base;
    j.erase("seed");
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/noseed.json", j)}) == 2);
  }
  SECTION("unknown county id") {
    nlohmann::json j = base;
    j["counties"].push_back("99999");
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/county.json", j)}) == 2);
  }
  SECTION("explain min_leaf must be positive") {
    nlohmann::json j = base;
    j["explain"]["min_leaf_regression"] = 0;
    CHECK(cli::run_cli({"explain", "--config", write_json(tmp + "/leaf.json", j)}) == 2);
  }
  SECTION("duplicate policy names") {
    nlohmann::json j = base;
    j["policies"].push_back({{"kind", "zero"}});
    CHECK(cli::run_cli({"evaluate", "--config", write_json(tmp + "/dup.json", j)}) == 2);
  }
  SECTION("dataset files absent") {
    nlohmann::json j = base;
    j["output_dir"] = tmp + "/empty";
    CHECK(cli::run_cli({"fit-rewards", "--config", write_json(tmp + "/nodata.json", j)}) == 2);
  }
  SECTION("bogus subcommand") {
    CHECK(cli::run_cli({"bogus-subcommand", "--config", p.cfg_path}) == 2);
  }
  SECTION("--help exits cleanly") { CHECK(cli::run_cli({"--help"}) == 0); }
}

TEST_CASE("explain degrades to a root leaf when counties are scarce", "[cli]") {
  const auto& p = pipeline();
  const std::string d = "/tmp/broach_cli_singleleaf";
  fs::remove_all(d);
  nlohmann::json j = base_config(p.dir);
  j["explain"]["min_leaf_regression"] = 5;  // 5 counties < 2 x 5
  const std::string cfg = write_json(p.dir + "/run_singleleaf.json", j);
  REQUIRE(cli::run_cli({"explain", "--config", cfg, "--out", d}) == 0);
  const auto tree = lines_of(d + "/tree_regression.txt");
  REQUIRE(tree.size() == 1);
  CHECK_THAT(tree[0], ContainsSubstring("predict"));
  CHECK_THAT(tree[0], ContainsSubstring("[n=5]"));
  fs::remove_all(d);
}
