#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "broach/rl_agents.hpp"
#include "rl_fixtures.hpp"

using namespace broach;
using Catch::Approx;
using testrl::Bandit;
using testrl::MiniMdp;

TEST_CASE("agent config domains and serialization") {
  rl::AgentConfig good;
  good.algo = rl::Algo::kA2c;
  REQUIRE_NOTHROW(good.validate());

  auto expect_reject = [&](auto mutate) {
    rl::AgentConfig c = good;
    mutate(c);
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
  };
  expect_reject([](auto& c) { c.learning_rate = 0.0; });
  expect_reject([](auto& c) { c.discount = 0.0; });
  expect_reject([](auto& c) { c.discount = 1.5; });
  expect_reject([](auto& c) { c.hidden_layers = 4; });
  expect_reject([](auto& c) { c.hidden_units = 64; });
  expect_reject([](auto& c) { c.buffer_or_rollout = 1000; });
  expect_reject([](auto& c) { c.epsilon_start = 1.2; });
  expect_reject([](auto& c) { c.epsilon_fraction = 0.0; });
  expect_reject([](auto& c) { c.target_sync = 0; });
  expect_reject([](auto& c) { c.batch_size = -1; });
  expect_reject([](auto& c) { c.entropy_coef = -0.5; });
  expect_reject([](auto& c) { c.train_episodes = 0; });
  expect_reject([](auto& c) { c.eval_episodes = 0; });

  good.hidden_layers = 3;
  good.hidden_units = 16;
  good.buffer_or_rollout = 1500;
  good.seed = 99;
  nlohmann::json j = good;
  const auto back = j.get<rl::AgentConfig>();
  REQUIRE(back.algo == good.algo);
  REQUIRE(back.hidden_layers == 3);
  REQUIRE(back.hidden_units == 16);
  REQUIRE(back.buffer_or_rollout == 1500);
  REQUIRE(back.seed == 99);
  // unspecified fields fall back to defaults
  const auto sparse = nlohmann::json{{"algo", "dqn"}}.get<rl::AgentConfig>();
  REQUIRE(sparse.train_episodes == rl::AgentConfig{}.train_episodes);

  REQUIRE_THROWS_WITH(rl::parse_algo("ppo"), Catch::Matchers::ContainsSubstring("dqn|a2c"));
}

TEST_CASE("two-logit softmax is stable and normalized") {
  const auto p = rl::softmax2(Eigen::Vector2d(1.0, 2.0));
  REQUIRE(p(0) + p(1) == Approx(1.0).epsilon(1e-14));
  REQUIRE(p(1) > p(0));
  const auto q = rl::softmax2(Eigen::Vector2d(1000.0, 999.0));
  REQUIRE(std::isfinite(q(0)));
  REQUIRE(q(0) > q(1));
}

TEST_CASE("a2c solves the deterministic bandit") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.hidden_layers = 2;
  cfg.hidden_units = 16;
  cfg.buffer_or_rollout = 1500;
  cfg.train_episodes = 5000;
  cfg.eval_episodes = 10;
  cfg.seed = 3;

  Bandit b;
  const auto pol = rl::train_a2c(b, cfg);
  const env::EpisodeContext dummy{};
  REQUIRE(pol.prob_alert(b.obs(), dummy) > 0.95);
  REQUIRE(pol.display_name() == "a2c");
  REQUIRE_FALSE(pol.restricted());

  // overwhelming entropy bonus pins the policy near uniform
  rl::AgentConfig ent = cfg;
  ent.entropy_coef = 50.0;
  Bandit b2;
  const auto pol2 = rl::train_a2c(b2, ent);
  const double p = pol2.prob_alert(b2.obs(), dummy);
  REQUIRE(p > 0.45);
  REQUIRE(p < 0.55);
}

TEST_CASE("dqn solves the deterministic bandit and retrains bitwise") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kDqn;
  cfg.train_episodes = 600;
  cfg.learn_start = 32;
  cfg.seed = 5;

  Bandit b;
  const auto pol = rl::train_dqn(b, cfg);
  const env::EpisodeContext dummy{};
  REQUIRE(pol.prob_alert(b.obs(), dummy) == 1.0);  // greedy argmax

  Bandit b2;
  const auto again = rl::train_dqn(b2, cfg);
  REQUIRE((pol.net().params() - again.net().params()).cwiseAbs().maxCoeff() == 0.0);

  rl::AgentConfig changed = cfg;
  changed.seed = 6;
  Bandit b3;
  const auto other = rl::train_dqn(b3, changed);
  REQUIRE((pol.net().params() - other.net().params()).cwiseAbs().maxCoeff() != 0.0);

  REQUIRE_THROWS_AS(rl::train_a2c(b, cfg), ConfigError);  // algo mismatch
  rl::AgentConfig a2c = cfg;
  a2c.algo = rl::Algo::kA2c;
  REQUIRE_THROWS_AS(rl::train_dqn(b, a2c), ConfigError);
}

TEST_CASE("a2c retrains bitwise under the same seed") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.train_episodes = 200;
  cfg.seed = 11;
  MiniMdp m1, m2;
  const auto p1 = rl::train_a2c(m1, cfg);
  const auto p2 = rl::train_a2c(m2, cfg);
  REQUIRE((p1.net().params() - p2.net().params()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("policy gradient estimator is unbiased on a closed-form bandit") {
  nets::Mlp actor(1, {}, 2, nets::Act::kTanh);
  actor.params() << 0.3, -0.2, 0.1, 0.05;  // W (2x1), b (2)
  const Eigen::VectorXd x = Eigen::VectorXd::Ones(1);
  const Eigen::VectorXd logits = actor.forward(x);
  const Eigen::Vector2d pi = rl::softmax2(Eigen::Vector2d(logits(0), logits(1)));
  const double R[2] = {0.2, 1.0};
  const double J = pi(0) * R[0] + pi(1) * R[1];
  // dJ/dlogit_k = pi_k (R_k - J); unit input duplicates it onto W and b
  Eigen::VectorXd exact(4);
  exact << pi(0) * (R[0] - J), pi(1) * (R[1] - J), pi(0) * (R[0] - J), pi(1) * (R[1] - J);

  Rng rng(77);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4), msq = Eigen::VectorXd::Zero(4);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const int a = std::bernoulli_distribution(pi(1))(rng) ? 1 : 0;
    rl::EpisodeBatch ep;
    ep.obs = {x};
    ep.actions = {a};
    ep.returns = {R[a]};
    ep.baselines = {0.0};
    ep.masked = {false};
    const Eigen::VectorXd g = rl::policy_gradient_estimate(actor, ep);
    mean += g;
    msq += g.cwiseProduct(g);
  }
  mean /= n;
  msq /= n;
  const Eigen::VectorXd se = ((msq - mean.cwiseProduct(mean)) / n).cwiseSqrt();
  for (int i = 0; i < 4; ++i) REQUIRE(std::abs(mean(i) - exact(i)) < 3.0 * se(i));
}

TEST_CASE("policy gradient estimator: masking and degenerate advantages") {
  nets::Mlp actor(2, {4}, 2, nets::Act::kTanh);
  Rng init(1);
  actor.init(init, 1.0);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(2, 0.3);

  rl::EpisodeBatch ep;
  ep.obs = {x, x};
  ep.actions = {1, 0};
  ep.returns = {1.0, 0.5};
  ep.baselines = {0.0, 0.0};
  ep.masked = {true, true};  // every step forced: nothing to learn from
  REQUIRE(rl::policy_gradient_estimate(actor, ep).cwiseAbs().maxCoeff() == 0.0);

  ep.masked = {false, false};
  ep.baselines = ep.returns;  // zero advantage kills the gradient
  REQUIRE(rl::policy_gradient_estimate(actor, ep).cwiseAbs().maxCoeff() == 0.0);

  ep.baselines = {0.0};
  REQUIRE_THROWS_AS(rl::policy_gradient_estimate(actor, ep), ConfigError);
}

TEST_CASE("learned policy guards: untrained use and schema mismatch") {
  rl::LearnedPolicy empty;
  const env::EpisodeContext dummy{};
  REQUIRE_THROWS_AS(empty.prob_alert(Eigen::VectorXd::Zero(2), dummy), ProtocolError);

  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.train_episodes = 30;
  cfg.seed = 9;
  Bandit b;
  const auto pol = rl::train_a2c(b, cfg);
  REQUIRE_THROWS_AS(pol.prob_alert(Eigen::VectorXd::Zero(5), dummy), ConfigError);
}

TEST_CASE("restricted policies never alert below their threshold") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.train_episodes = 100;
  cfg.seed = 13;
  Bandit b;
  const auto pol = rl::train_a2c(b, cfg, 0.7);
  REQUIRE(pol.restricted());
  REQUIRE(pol.threshold() == 0.7);
  REQUIRE(pol.display_name() == "a2c.qhi");

  const env::EpisodeContext dummy{};
  Rng rng = make_stream(2, 0);
  std::uniform_real_distribution<double> uq(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    Eigen::VectorXd o(2);
    o << uq(rng), uq(rng);
    const double p = pol.prob_alert(o, dummy);
    if (o(env::kObsQhi) < 0.7) REQUIRE(p == 0.0);
    REQUIRE(p >= 0.0);
    REQUIRE(p <= 1.0);
  }
}

TEST_CASE("policy checkpoints restore behavior exactly") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.hidden_layers = 3;
  cfg.hidden_units = 16;
  cfg.buffer_or_rollout = 1500;
  cfg.train_episodes = 50;
  cfg.seed = 9;
  Bandit b;
  const auto pol = rl::train_a2c(b, cfg, 0.5);

  const auto path = std::filesystem::temp_directory_path() / "broach_pol_ckpt_test.json";
  pol.save(path.string());
  const auto back = rl::LearnedPolicy::load(path.string());
  const env::EpisodeContext dummy{};
  REQUIRE(back.prob_alert(b.obs(), dummy) == pol.prob_alert(b.obs(), dummy));  // bitwise
  REQUIRE(back.threshold() == 0.5);
  REQUIRE(back.display_name() == "a2c.qhi");
  REQUIRE(back.observation_size() == 2);
  std::filesystem::remove(path);

  // schema guards
  nlohmann::json j = pol.to_json();
  nlohmann::json bad = j;
  bad["kind"] = "model_checkpoint";
  REQUIRE_THROWS_AS(rl::LearnedPolicy::from_json(bad), SchemaError);
  bad = j;
  bad["format_version"] = 2;
  REQUIRE_THROWS_AS(rl::LearnedPolicy::from_json(bad), SchemaError);
  bad = j;
  bad["params"].erase(0);
  REQUIRE_THROWS_AS(rl::LearnedPolicy::from_json(bad), SchemaError);
  bad = j;
  bad["threshold"] = 0.72;
  REQUIRE_THROWS_AS(rl::LearnedPolicy::from_json(bad), SchemaError);
  REQUIRE_THROWS_AS(rl::LearnedPolicy::load("/nonexistent/pol.json"), ConfigError);
}

TEST_CASE("mean return is reproducible and guards its inputs") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.train_episodes = 40;
  cfg.seed = 21;
  MiniMdp m;
  const auto pol = rl::train_a2c(m, cfg);
  MiniMdp e1, e2;
  const double a = rl::mean_return(e1, pol, 50, 1234);
  const double b = rl::mean_return(e2, pol, 50, 1234);
  REQUIRE(a == b);  // bitwise
  REQUIRE(rl::mean_return(e1, pol, 50, 1235) != a);
  REQUIRE_THROWS_AS(rl::mean_return(e1, pol, 0, 1), ConfigError);
}

TEST_CASE("threshold tuning walks the grid and rejects bad candidates") {
  rl::AgentConfig cfg;
  cfg.algo = rl::Algo::kA2c;
  cfg.train_episodes = 50;
  cfg.eval_episodes = 20;
  cfg.seed = 31;
  const rl::EnvFactory factory = [](env::Mode) { return std::make_unique<Bandit>(); };

  const auto r = rl::tune_threshold(factory, cfg, {0.7});
  REQUIRE(r.threshold == 0.7);
  REQUIRE(r.grid == std::vector<double>{0.7});
  REQUIRE(r.scores.size() == 1);
  REQUIRE(r.policy.restricted());
  REQUIRE(r.policy.threshold() == 0.7);

  REQUIRE_THROWS_AS(rl::tune_threshold(factory, cfg, {}), ConfigError);
  REQUIRE_THROWS_AS(rl::tune_threshold(factory, cfg, {0.72}), ConfigError);
}
