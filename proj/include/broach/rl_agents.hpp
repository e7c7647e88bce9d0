#pragma once

// Desk-scale deep RL on the episodic alert environment: DQN (replay buffer,
// target network, epsilon-greedy) and advantage actor-critic (per-episode
// Monte Carlo rollouts). Both honor an optional QHI restriction implemented
// as a hard action mask on observation index 0, applied during training and
// evaluation alike, and both are bit-reproducible from their config seed.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "broach/common.hpp"
#include "broach/environment.hpp"
#include "broach/nets.hpp"
#include "broach/policies.hpp"

namespace broach::rl {

enum class Algo { kDqn, kA2c };

inline std::string algo_name(Algo a) { return a == Algo::kDqn ? "dqn" : "a2c"; }

inline Algo parse_algo(const std::string& s) {
  if (s == "dqn") return Algo::kDqn;
  if (s == "a2c") return Algo::kA2c;
  throw ConfigError("unknown algo '" + s + "' (expected dqn|a2c)");
}

struct AgentConfig {
  Algo algo = Algo::kDqn;
  double learning_rate = 1e-3;
  double discount = 1.0;
  int hidden_layers = 2;        // 2 or 3
  int hidden_units = 32;        // 16 or 32
  int buffer_or_rollout = 3000; // 1500 or 3000; DQN replay capacity
  double epsilon_start = 1.0;   // DQN exploration schedule
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;  // fraction of training episodes to anneal over
  int target_sync = 250;          // DQN target-network sync period, env steps
  int batch_size = 64;
  int learn_start = 200;          // replay size before learning begins
  double entropy_coef = 0.01;     // A2C entropy bonus
  int train_episodes = 10000;     // N_T
  int eval_episodes = 1000;       // N_E, threshold-tuning validation draws
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in (0,1]");
    if (hidden_layers != 2 && hidden_layers != 3) throw ConfigError("hidden_layers must be 2 or 3");
    if (hidden_units != 16 && hidden_units != 32) throw ConfigError("hidden_units must be 16 or 32");
    if (buffer_or_rollout != 1500 && buffer_or_rollout != 3000)
      throw ConfigError("buffer_or_rollout must be 1500 or 3000");
    if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0))
      throw ConfigError("epsilon bounds must lie in [0,1]");
    if (!(epsilon_fraction > 0.0 && epsilon_fraction <= 1.0))
      throw ConfigError("epsilon_fraction must lie in (0,1]");
    if (target_sync <= 0 || batch_size <= 0 || learn_start < 0)
      throw ConfigError("target_sync and batch_size must be positive, learn_start non-negative");
    if (entropy_coef < 0.0) throw ConfigError("entropy_coef must be non-negative");
    if (train_episodes <= 0 || eval_episodes <= 0)
      throw ConfigError("train_episodes and eval_episodes must be positive");
  }
};

inline void to_json(nlohmann::json& j, const AgentConfig& c) {
  j = {{"algo", algo_name(c.algo)},
       {"learning_rate", c.learning_rate},
       {"discount", c.discount},
       {"hidden_layers", c.hidden_layers},
       {"hidden_units", c.hidden_units},
       {"buffer_or_rollout", c.buffer_or_rollout},
       {"epsilon_start", c.epsilon_start},
       {"epsilon_end", c.epsilon_end},
       {"epsilon_fraction", c.epsilon_fraction},
       {"target_sync", c.target_sync},
       {"batch_size", c.batch_size},
       {"learn_start", c.learn_start},
       {"entropy_coef", c.entropy_coef},
       {"train_episodes", c.train_episodes},
       {"eval_episodes", c.eval_episodes},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AgentConfig& c) {
  c = AgentConfig{};
  c.algo = parse_algo(j.at("algo").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.discount = j.value("discount", c.discount);
  c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
  c.hidden_units = j.value("hidden_units", c.hidden_units);
  c.buffer_or_rollout = j.value("buffer_or_rollout", c.buffer_or_rollout);
  c.epsilon_start = j.value("epsilon_start", c.epsilon_start);
  c.epsilon_end = j.value("epsilon_end", c.epsilon_end);
  c.epsilon_fraction = j.value("epsilon_fraction", c.epsilon_fraction);
  c.target_sync = j.value("target_sync", c.target_sync);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learn_start = j.value("learn_start", c.learn_start);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.train_episodes = j.value("train_episodes", c.train_episodes);
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

inline Eigen::Vector2d softmax2(const Eigen::Vector2d& logits) {
  const double m = logits.maxCoeff();
  Eigen::Vector2d e = (logits.array() - m).exp();
  return e / e.sum();
}

// A trained policy: greedy over Q values for DQN, softmax sampling
// probabilities for A2C, with an optional hard QHI restriction baked in.
class LearnedPolicy final : public policy::Policy {
 public:
  LearnedPolicy() = default;
  LearnedPolicy(Algo algo, nets::Mlp net, double wrap_threshold)
      : algo_(algo), net_(std::move(net)), wrap_(wrap_threshold) {}

  double prob_alert(const Eigen::VectorXd& obs, const env::EpisodeContext&) const override {
    if (net_.param_count() == 0) throw ProtocolError("learned policy used before training");
    if (obs.size() != net_.in_dim())
      throw ConfigError("observation size " + std::to_string(obs.size()) +
                        " does not match the policy's input schema " + std::to_string(net_.in_dim()));
    if (std::isfinite(wrap_) && obs(env::kObsQhi) < wrap_) return 0.0;
    const Eigen::VectorXd out = net_.forward(obs);
    if (algo_ == Algo::kDqn) return out(1) > out(0) ? 1.0 : 0.0;
    return softmax2(Eigen::Vector2d(out(0), out(1)))(1);
  }

  Algo algo() const { return algo_; }
  const nets::Mlp& net() const { return net_; }
  double threshold() const { return wrap_; }
  bool restricted() const { return std::isfinite(wrap_); }
  int observation_size() const { return net_.in_dim(); }
  std::string display_name() const { return algo_name(algo_) + (restricted() ? ".qhi" : ""); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "policy_checkpoint";
    j["algo"] = algo_name(algo_);
    j["obs_dim"] = net_.in_dim();
    std::vector<int> hidden(net_.sizes().begin() + 1, net_.sizes().end() - 1);
    j["hidden"] = hidden;
    if (restricted()) j["threshold"] = wrap_;
    j["params"] = std::vector<double>(net_.params().data(), net_.params().data() + net_.param_count());
    return j;
  }

  static LearnedPolicy from_json(const nlohmann::json& j) {
    if (j.value("kind", "") != "policy_checkpoint")
      throw SchemaError("not a policy checkpoint");
    if (j.value("format_version", 0) != 1)
      throw SchemaError("unsupported policy checkpoint version");
    const Algo algo = parse_algo(j.at("algo").get<std::string>());
    const int obs_dim = j.at("obs_dim").get<int>();
    const auto hidden = j.at("hidden").get<std::vector<int>>();
    nets::Mlp net(obs_dim, hidden, 2, nets::Act::kTanh);
    const auto params = j.at("params").get<std::vector<double>>();
    if (static_cast<int>(params.size()) != net.param_count())
      throw SchemaError("policy checkpoint parameter count mismatch");
    for (int i = 0; i < net.param_count(); ++i) net.params()(i) = params[static_cast<std::size_t>(i)];
    const double h = j.contains("threshold") ? j.at("threshold").get<double>()
                                             : std::numeric_limits<double>::quiet_NaN();
    if (std::isfinite(h) && !policy::threshold_on_grid(h))
      throw SchemaError("policy checkpoint threshold is off the candidate grid");
    return LearnedPolicy(algo, std::move(net), h);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write policy checkpoint " + path);
    out << to_json().dump(2) << "\n";
  }

  static LearnedPolicy load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read policy checkpoint " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("malformed policy checkpoint " + path + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  Algo algo_ = Algo::kDqn;
  nets::Mlp net_;
  double wrap_ = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::vector<int> hidden_dims(const AgentConfig& c) {
  return std::vector<int>(static_cast<std::size_t>(c.hidden_layers), c.hidden_units);
}

inline bool masked_obs(const Eigen::VectorXd& obs, double h) {
  return std::isfinite(h) && obs(env::kObsQhi) < h;
}

}  // namespace detail

// One collected episode, the unit both trainers and the standalone gradient
// estimator operate on.
struct EpisodeBatch {
  std::vector<Eigen::VectorXd> obs;
  std::vector<int> actions;
  std::vector<double> returns;    // discounted reward-to-go per step
  std::vector<double> baselines;  // subtracted from returns in the estimator
  std::vector<bool> masked;       // steps where the action was forced, not chosen
};

// Single-episode REINFORCE-with-baseline estimator of the policy gradient
// (ascent direction): sum over chosen steps of grad log pi(a_t|s_t) times
// (return_t - baseline_t). Unbiased for the undiscounted objective; exactly
// the actor gradient the A2C trainer applies (entropy bonus aside).
inline Eigen::VectorXd policy_gradient_estimate(const nets::Mlp& actor, const EpisodeBatch& ep) {
  if (ep.obs.size() != ep.actions.size() || ep.obs.size() != ep.returns.size() ||
      ep.obs.size() != ep.baselines.size() || ep.obs.size() != ep.masked.size())
    throw ConfigError("episode batch field lengths disagree");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(actor.param_count());
  for (std::size_t t = 0; t < ep.obs.size(); ++t) {
    if (ep.masked[t]) continue;
    nets::Mlp::Cache cache;
    const Eigen::VectorXd logits = actor.forward_cached(ep.obs[t], cache);
    const Eigen::Vector2d pi = softmax2(Eigen::Vector2d(logits(0), logits(1)));
    const double adv = ep.returns[t] - ep.baselines[t];
    Eigen::VectorXd dlogits = Eigen::VectorXd::Zero(2);
    dlogits(ep.actions[t]) = adv;
    dlogits -= adv * pi;  // d log pi(a)/d logits = onehot(a) - pi
    actor.backward(cache, dlogits, grad);
  }
  return grad;
}

inline LearnedPolicy train_dqn(env::EpisodicEnv& e, const AgentConfig& cfg,
                               double mask_h = std::numeric_limits<double>::quiet_NaN()) {
  cfg.validate();
  if (cfg.algo != Algo::kDqn) throw ConfigError("train_dqn needs algo=dqn");
  const int obs_dim = e.observation_size();
  nets::Mlp q(obs_dim, detail::hidden_dims(cfg), 2, nets::Act::kTanh);
  {
    Rng init = make_stream(cfg.seed, hash_str("dqn-init"));
    q.init(init, 1.0);
  }
  nets::Mlp target = q;
  nets::Adam opt(q.param_count(), cfg.learning_rate);

  struct Transition {
    Eigen::VectorXd s, s2;
    int a = 0;
    double r = 0.0;
    bool done = false;
  };
  std::vector<Transition> replay;
  replay.reserve(static_cast<std::size_t>(cfg.buffer_or_rollout));
  std::size_t write_pos = 0;

  Rng explore = make_stream(cfg.seed, hash_str("dqn-explore"));
  Rng learn_rng = make_stream(cfg.seed, hash_str("dqn-learn"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);

  const int anneal_span = std::max(1, static_cast<int>(cfg.epsilon_fraction * cfg.train_episodes));
  long step_count = 0;
  Eigen::VectorXd grad(q.param_count());

  for (int ep = 0; ep < cfg.train_episodes; ++ep) {
    const double frac = std::min(1.0, static_cast<double>(ep) / anneal_span);
    const double epsilon = cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start);
    Rng reset_rng = make_stream(cfg.seed, hash_str("dqn-epi"), static_cast<std::uint64_t>(ep));
    Eigen::VectorXd obs = e.reset(reset_rng);
    bool done = false;
    while (!done) {
      int a;
      if (detail::masked_obs(obs, mask_h))
        a = 0;
      else if (unit(explore) < epsilon)
        a = coin(explore);
      else {
        const Eigen::VectorXd qv = q.forward(obs);
        a = qv(1) > qv(0) ? 1 : 0;
      }
      const auto sr = e.step(a);
      Transition tr{obs, sr.obs, a, sr.reward, sr.done};
      if (replay.size() < static_cast<std::size_t>(cfg.buffer_or_rollout)) {
        replay.push_back(std::move(tr));
      } else {
        replay[write_pos] = std::move(tr);
        write_pos = (write_pos + 1) % replay.size();
      }
      ++step_count;

      if (static_cast<int>(replay.size()) >= std::max(cfg.learn_start, cfg.batch_size)) {
        grad.setZero();
        double loss = 0.0;
        std::uniform_int_distribution<std::size_t> pick(0, replay.size() - 1);
        for (int b = 0; b < cfg.batch_size; ++b) {
          const Transition& t = replay[pick(learn_rng)];
          double y = t.r;
          if (!t.done) {
            const Eigen::VectorXd qn = target.forward(t.s2);
            const double next_best = detail::masked_obs(t.s2, mask_h) ? qn(0) : qn.maxCoeff();
            y += cfg.discount * next_best;
          }
          nets::Mlp::Cache cache;
          const Eigen::VectorXd qv = q.forward_cached(t.s, cache);
          const double err = qv(t.a) - y;
          loss += err * err / cfg.batch_size;
          Eigen::VectorXd dout = Eigen::VectorXd::Zero(2);
          dout(t.a) = 2.0 * err / cfg.batch_size;
          q.backward(cache, dout, grad);
        }
        if (!std::isfinite(loss))
          throw NumericError("dqn: non-finite loss at environment step " + std::to_string(step_count));
        opt.step(q.params(), grad);
      }
      if (step_count % cfg.target_sync == 0) target.params() = q.params();
      obs = sr.obs;
      done = sr.done;
    }
  }
  return LearnedPolicy(Algo::kDqn, std::move(q), mask_h);
}

inline LearnedPolicy train_a2c(env::EpisodicEnv& e, const AgentConfig& cfg,
                               double mask_h = std::numeric_limits<double>::quiet_NaN()) {
  cfg.validate();
  if (cfg.algo != Algo::kA2c) throw ConfigError("train_a2c needs algo=a2c");
  const int obs_dim = e.observation_size();
  nets::Mlp actor(obs_dim, detail::hidden_dims(cfg), 2, nets::Act::kTanh);
  nets::Mlp critic(obs_dim, detail::hidden_dims(cfg), 1, nets::Act::kTanh);
  {
    Rng ai = make_stream(cfg.seed, hash_str("a2c-actor-init"));
    actor.init(ai, 0.5);
    Rng ci = make_stream(cfg.seed, hash_str("a2c-critic-init"));
    critic.init(ci, 1.0);
  }
  nets::Adam actor_opt(actor.param_count(), cfg.learning_rate);
  nets::Adam critic_opt(critic.param_count(), cfg.learning_rate);
  Rng act_rng = make_stream(cfg.seed, hash_str("a2c-act"));

  Eigen::VectorXd actor_grad(actor.param_count());
  Eigen::VectorXd critic_grad(critic.param_count());

  for (int epi = 0; epi < cfg.train_episodes; ++epi) {
    EpisodeBatch ep;
    std::vector<double> rewards;
    Rng reset_rng = make_stream(cfg.seed, hash_str("a2c-epi"), static_cast<std::uint64_t>(epi));
    Eigen::VectorXd obs = e.reset(reset_rng);
    bool done = false;
    while (!done) {
      const bool masked = detail::masked_obs(obs, mask_h);
      int a = 0;
      if (!masked) {
        const Eigen::VectorXd logits = actor.forward(obs);
        const Eigen::Vector2d pi = softmax2(Eigen::Vector2d(logits(0), logits(1)));
        a = std::bernoulli_distribution(pi(1))(act_rng) ? 1 : 0;
      }
      const auto sr = e.step(a);
      ep.obs.push_back(obs);
      ep.actions.push_back(a);
      ep.masked.push_back(masked);
      rewards.push_back(sr.reward);
      obs = sr.obs;
      done = sr.done;
    }
    const std::size_t T = rewards.size();
    ep.returns.assign(T, 0.0);
    double g = 0.0;
    for (std::size_t t = T; t-- > 0;) {
      g = rewards[t] + cfg.discount * g;
      ep.returns[t] = g;
    }
    ep.baselines.resize(T);
    std::vector<nets::Mlp::Cache> vcache(T);
    for (std::size_t t = 0; t < T; ++t)
      ep.baselines[t] = critic.forward_cached(ep.obs[t], vcache[t])(0);

    // Critic: squared error against the Monte Carlo returns.
    critic_grad.setZero();
    double critic_loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double err = ep.baselines[t] - ep.returns[t];
      critic_loss += err * err / T;
      critic.backward(vcache[t], Eigen::VectorXd::Constant(1, 2.0 * err / T), critic_grad);
    }

    // Actor: REINFORCE-with-baseline plus entropy bonus, chosen steps only.
    Eigen::VectorXd ascent = policy_gradient_estimate(actor, ep);
    double entropy_sum = 0.0;
    if (cfg.entropy_coef > 0.0) {
      for (std::size_t t = 0; t < T; ++t) {
        if (ep.masked[t]) continue;
        nets::Mlp::Cache cache;
        const Eigen::VectorXd logits = actor.forward_cached(ep.obs[t], cache);
        const Eigen::Vector2d pi = softmax2(Eigen::Vector2d(logits(0), logits(1)));
        double entropy = 0.0;
        for (int k = 0; k < 2; ++k)
          if (pi(k) > 0.0) entropy -= pi(k) * std::log(pi(k));
        entropy_sum += entropy;
        Eigen::VectorXd dlogits(2);
        for (int k = 0; k < 2; ++k)
          dlogits(k) = pi(k) > 0.0 ? -cfg.entropy_coef * pi(k) * (std::log(pi(k)) + entropy) : 0.0;
        actor.backward(cache, dlogits, ascent);
      }
    }
    const double actor_loss = -entropy_sum;  // surrogate magnitude only used for the NaN guard
    if (!std::isfinite(critic_loss) || !std::isfinite(actor_loss) || !ascent.allFinite())
      throw NumericError("a2c: non-finite loss at episode " + std::to_string(epi));
    actor_grad = -ascent;  // Adam minimizes
    actor_opt.step(actor.params(), actor_grad);
    critic_opt.step(critic.params(), critic_grad);
  }
  return LearnedPolicy(Algo::kA2c, std::move(actor), mask_h);
}

inline LearnedPolicy train_agent(env::EpisodicEnv& e, const AgentConfig& cfg,
                                 double mask_h = std::numeric_limits<double>::quiet_NaN()) {
  return cfg.algo == Algo::kDqn ? train_dqn(e, cfg, mask_h) : train_a2c(e, cfg, mask_h);
}

// Mean return of a learned policy over n freshly seeded episodes. DQN acts
// greedily; A2C samples from its policy distribution.
inline double mean_return(env::EpisodicEnv& e, const LearnedPolicy& pol, int n_episodes,
                          std::uint64_t seed) {
  if (n_episodes <= 0) throw ConfigError("mean_return needs a positive episode count");
  const env::EpisodeContext dummy{};
  double total = 0.0;
  for (int i = 0; i < n_episodes; ++i) {
    Rng reset_rng = make_stream(seed, hash_str("score-epi"), static_cast<std::uint64_t>(i));
    Rng act_rng = make_stream(seed, hash_str("score-act"), static_cast<std::uint64_t>(i));
    Eigen::VectorXd obs = e.reset(reset_rng);
    bool done = false;
    double ret = 0.0;
    while (!done) {
      const int a = policy::act(pol, obs, dummy, policy::EvalMode::kStochastic, act_rng);
      const auto sr = e.step(a);
      ret += sr.reward;
      obs = sr.obs;
      done = sr.done;
    }
    total += ret;
  }
  return total / n_episodes;
}

using EnvFactory = std::function<std::unique_ptr<env::EpisodicEnv>(env::Mode)>;

struct TuneResult {
  double threshold = std::numeric_limits<double>::quiet_NaN();
  LearnedPolicy policy;
  std::vector<double> grid;
  std::vector<double> scores;  // mean validation return per candidate
};

// Trains one agent per threshold candidate on train-mode episodes, scores each
// on validate-mode episodes under common random numbers, and returns the
// argmax (ties resolved toward the smaller threshold).
inline TuneResult tune_threshold(const EnvFactory& make_env, const AgentConfig& cfg,
                                 const std::vector<double>& grid = policy::threshold_grid()) {
  cfg.validate();
  if (grid.empty()) throw ConfigError("tune_threshold needs a nonempty candidate grid");
  for (double h : grid)
    if (!policy::threshold_on_grid(h))
      throw ConfigError("tune_threshold candidate off the 0.50..0.90 step 0.05 grid");
  TuneResult out;
  out.grid = grid;
  const std::uint64_t score_seed = mix64(cfg.seed ^ hash_str("tune-score"));
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    AgentConfig sub = cfg;
    sub.seed = mix64(cfg.seed ^ (hash_str("tune-slot") + i));
    auto train_env = make_env(env::Mode::kTrain);
    LearnedPolicy candidate = train_agent(*train_env, sub, grid[i]);
    auto val_env = make_env(env::Mode::kValidate);
    const double score = mean_return(*val_env, candidate, cfg.eval_episodes, score_seed);
    out.scores.push_back(score);
    if (score > best) {  // strict: ties keep the earlier (smaller) threshold
      best = score;
      out.threshold = grid[i];
      out.policy = std::move(candidate);
    }
  }
  return out;
}

}  // namespace broach::rl
