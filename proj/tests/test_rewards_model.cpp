#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "broach/rewards_model.hpp"
#include "broach/synthetic.hpp"
#include "test_util.hpp"

using namespace broach;
using Catch::Approx;

namespace {

rewards::CoefficientSet valid_coeffs() {
  rewards::CoefficientSet c;
  c.beta = Eigen::VectorXd::Zero(data::kLambdaDim);
  c.beta(data::kLambdaAlerts2wk) = -0.1;
  c.beta(data::kLambdaAlertYesterday) = -0.2;
  c.delta = Eigen::VectorXd::Zero(data::kTauDim);
  c.delta(data::kTauQhi) = 0.5;
  return c;
}

}  // namespace

TEST_CASE("lambda is the exponential of the linear predictor") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(data::kLambdaDim);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(data::kLambdaDim);
  x(0) = 1.0;
  REQUIRE(rewards::lambda_eval(zero, x) == 1.0);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(data::kLambdaDim);
  beta(0) = std::log(0.01);
  REQUIRE(rewards::lambda_eval(beta, x) == Approx(0.01).epsilon(1e-14));

  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 0.7);
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::VectorXd b(data::kLambdaDim), v(data::kLambdaDim);
    for (int i = 0; i < b.size(); ++i) {
      b(i) = g(rng);
      v(i) = g(rng);
    }
    double dot = 0.0;  // plain loop, independent of Eigen
    for (int i = 0; i < b.size(); ++i) dot += b(i) * v(i);
    REQUIRE(rewards::lambda_eval(b, v) == Approx(std::exp(dot)).epsilon(1e-12));
  }

  REQUIRE_THROWS_AS(rewards::lambda_eval(zero, Eigen::VectorXd::Zero(3)), ConfigError);
}

TEST_CASE("tau is a sigmoid: symmetry and monotonicity") {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(data::kTauDim);
  Eigen::VectorXd x = Eigen::VectorXd::Ones(data::kTauDim);
  REQUIRE(rewards::tau_eval(zero, x) == 0.5);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::VectorXd d(data::kTauDim), v(data::kTauDim);
    for (int i = 0; i < d.size(); ++i) {
      d(i) = g(rng);
      v(i) = g(rng);
    }
    const double t = rewards::tau_eval(d, v);
    REQUIRE(t > 0.0);
    REQUIRE(t < 1.0);
    REQUIRE(rewards::tau_eval(-d, v) == Approx(1.0 - t).epsilon(1e-12));
  }

  // pushing the linear predictor up pushes tau toward 1
  Eigen::VectorXd d = Eigen::VectorXd::Zero(data::kTauDim);
  d(data::kTauQhi) = 2.0;
  double prev = -1.0;
  for (double q = 0.0; q <= 1.0; q += 0.125) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(data::kTauDim);
    v(data::kTauQhi) = q;
    const double t = rewards::tau_eval(d, v);
    REQUIRE(t > prev);
    prev = t;
  }
}

TEST_CASE("alerts only enter the expected rate through tau") {
  rewards::CoefficientSet a = valid_coeffs();
  rewards::CoefficientSet b = valid_coeffs();
  b.delta(data::kTauQhi) = 3.0;
  b.delta(data::kTauWeekend) = -0.7;
  Eigen::VectorXd xl = Eigen::VectorXd::Constant(data::kLambdaDim, 0.3);
  Eigen::VectorXd xt = Eigen::VectorXd::Constant(data::kTauDim, 0.3);
  REQUIRE(rewards::expected_rate(a, xl, xt, 0) == rewards::expected_rate(b, xl, xt, 0));
  REQUIRE(rewards::expected_rate(a, xl, xt, 1) != rewards::expected_rate(b, xl, xt, 1));
  // tau in (0,1) makes an alert strictly reduce the rate
  REQUIRE(rewards::expected_rate(a, xl, xt, 1) < rewards::expected_rate(a, xl, xt, 0));
}

TEST_CASE("Poisson log-likelihood matches a from-scratch pmf") {
  REQUIRE(rewards::poisson_loglik(0, 50000.0, 2e-4) == Approx(-10.0).epsilon(1e-14));

  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> un(0.5, 3.0);
  std::uniform_int_distribution<long> uy(0, 40);
  for (int rep = 0; rep < 300; ++rep) {
    const double n = 1e4 * un(rng);
    const double rho = 1e-4 * un(rng);
    const long y = uy(rng);
    // independent grouping: log(e^{-mu}) + y log(mu) - log(y!)
    const double mu = n * rho;
    double log_fact = 0.0;
    for (long k = 2; k <= y; ++k) log_fact += std::log(static_cast<double>(k));
    const double oracle = -mu + static_cast<double>(y) * std::log(mu) - log_fact;
    REQUIRE(rewards::poisson_loglik(y, n, rho) == Approx(oracle).epsilon(1e-10));
  }

  REQUIRE_THROWS_AS(rewards::poisson_loglik(-1, 1.0, 1.0), ConfigError);
  REQUIRE_THROWS_AS(rewards::poisson_loglik(0, 0.0, 1.0), NumericError);
  REQUIRE_THROWS_AS(rewards::poisson_loglik(0, 1.0, 0.0), NumericError);
}

TEST_CASE("density helpers hit known closed-form values") {
  const double s = 0.7;
  REQUIRE(rewards::normal_logpdf(1.3, 1.3, s) ==
          Approx(-std::log(s * std::sqrt(2.0 * M_PI))).epsilon(1e-14));
  // log-normal with median e^m evaluated at its median
  const double m = 0.4;
  REQUIRE(rewards::lognormal_logpdf(std::exp(m), m, s) ==
          Approx(-m - std::log(s * std::sqrt(2.0 * M_PI))).epsilon(1e-13));
  // mirror image on the negative axis
  REQUIRE(rewards::neg_lognormal_logpdf(-1.7, m, s) ==
          Approx(rewards::lognormal_logpdf(1.7, m, s)).epsilon(1e-14));
  // half-Cauchy at its scale: 2/(pi*s*2) = 1/(pi*s)
  REQUIRE(rewards::half_cauchy_logpdf(2.0, 2.0) == Approx(-std::log(M_PI * 2.0)).epsilon(1e-14));

  REQUIRE_THROWS_AS(rewards::lognormal_logpdf(-1.0, 0.0, 1.0), NumericError);
  REQUIRE_THROWS_AS(rewards::neg_lognormal_logpdf(1.0, 0.0, 1.0), NumericError);
  REQUIRE_THROWS_AS(rewards::half_cauchy_logpdf(-1.0, 1.0), NumericError);
  REQUIRE_THROWS_AS(rewards::normal_logpdf(0.0, 0.0, 0.0), NumericError);
}

TEST_CASE("constraint classes and transforms") {
  using rewards::ConstraintClass;
  for (int l = 0; l < rewards::kCoefDim; ++l) {
    const auto c = rewards::coef_class(l);
    if (l == data::kLambdaAlerts2wk || l == data::kLambdaAlertYesterday)
      REQUIRE(c == ConstraintClass::kNegLogNormal);
    else if (l == data::kLambdaDim + data::kTauQhi)
      REQUIRE(c == ConstraintClass::kLogNormal);
    else
      REQUIRE(c == ConstraintClass::kNormal);
  }

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int rep = 0; rep < 200; ++rep) {
    const double z = g(rng);
    for (auto cls : {ConstraintClass::kNormal, ConstraintClass::kLogNormal,
                     ConstraintClass::kNegLogNormal}) {
      const double v = rewards::to_constrained(cls, z);
      REQUIRE(rewards::to_unconstrained(cls, v) == Approx(z).margin(1e-12));
      if (cls == ConstraintClass::kLogNormal) REQUIRE(v > 0.0);
      if (cls == ConstraintClass::kNegLogNormal) REQUIRE(v < 0.0);
    }
  }
  REQUIRE_THROWS_AS(rewards::to_unconstrained(ConstraintClass::kLogNormal, -1.0), NumericError);
  REQUIRE_THROWS_AS(rewards::to_unconstrained(ConstraintClass::kNegLogNormal, 1.0), NumericError);
}

TEST_CASE("coefficient validation enforces the sign constraints") {
  REQUIRE_NOTHROW(valid_coeffs().validate());
  auto c = valid_coeffs();
  c.beta(data::kLambdaAlerts2wk) = 0.1;
  REQUIRE_THROWS_AS(c.validate(), NumericError);
  c = valid_coeffs();
  c.delta(data::kTauQhi) = -0.5;
  REQUIRE_THROWS_AS(c.validate(), NumericError);
  c = valid_coeffs();
  c.beta.resize(3);
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("prior log density matches an independent per-term sum") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{2, 4, true, 0.3}, 17);
  const auto& prior = model.prior();

  Rng rng = make_stream(99, hash_str("prior-oracle"));
  for (const auto& county : ds.counties) {
    const auto gamma = model.sample(ds.county_index(county.id), rng);
    Eigen::VectorXd sigma(rewards::kCoefDim);
    std::uniform_real_distribution<double> us(0.2, 1.5);
    for (int l = 0; l < sigma.size(); ++l) sigma(l) = us(rng);

    const Eigen::VectorXd mu = prior.mean_for(county.spatial);
    double oracle = 0.0;
    const double c0 = std::log(1.0 / std::sqrt(2.0 * M_PI));
    for (int l = 0; l < rewards::kCoefDim; ++l) {
      const double g =
          l < data::kLambdaDim ? gamma.beta(l) : gamma.delta(l - data::kLambdaDim);
      double u = g, jac = 0.0;
      if (rewards::coef_class(l) == rewards::ConstraintClass::kLogNormal) {
        u = std::log(g);
        jac = -u;
      } else if (rewards::coef_class(l) == rewards::ConstraintClass::kNegLogNormal) {
        u = std::log(-g);
        jac = -u;
      }
      oracle += c0 - std::log(sigma(l)) - 0.5 * std::pow((u - mu(l)) / sigma(l), 2) + jac;
      oracle += std::log(2.0 / (M_PI * (1.0 + sigma(l) * sigma(l))));
    }
    REQUIRE(rewards::prior_logdensity(gamma, sigma, county.spatial, prior) ==
            Approx(oracle).epsilon(1e-11));
  }
}

TEST_CASE("posterior draws always satisfy the coefficient constraints") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{3, 8, true, 0.3}, 4);
  Rng rng = make_stream(1, hash_str("draws"));
  for (int k = 0; k < model.n_counties(); ++k) {
    const auto draws = model.sample_posterior(k, 2500, rng);
    REQUIRE(draws.size() == 2500);
    for (const auto& d : draws) {
      REQUIRE(d.beta(data::kLambdaAlerts2wk) < 0.0);
      REQUIRE(d.beta(data::kLambdaAlertYesterday) < 0.0);
      REQUIRE(d.delta(data::kTauQhi) > 0.0);
    }
  }
  REQUIRE_THROWS_AS(model.sample(-1, rng), ConfigError);
  REQUIRE_THROWS_AS(model.sample(model.n_counties(), rng), ConfigError);
}

TEST_CASE("an alert never increases a drawn county's expected rate") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{3, 8, true, 0.3}, 4);
  Rng rng = make_stream(2, hash_str("rate-draws"));
  const auto& s = ds.counties[0].seasons[0];
  for (int rep = 0; rep < 200; ++rep) {
    const auto c = model.sample(0, rng);
    for (int t = 0; t < data::kSeasonLength; t += 13) {
      const Eigen::VectorXd xl = s.x_lambda.row(t).transpose();
      const Eigen::VectorXd xt = s.x_tau.row(t).transpose();
      REQUIRE(rewards::expected_rate(c, xl, xt, 1) < rewards::expected_rate(c, xl, xt, 0));
    }
  }
}

TEST_CASE("drawn tau is weakly increasing in the heat quantile") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{3, 8, true, 0.3}, 4);
  Rng rng = make_stream(3, hash_str("tau-mono"));
  for (int rep = 0; rep < 100; ++rep) {
    const auto c = model.sample(rep % model.n_counties(), rng);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(data::kTauDim);
    x(data::kTauSpline0) = 0.25;
    x(data::kTauSpline1) = 0.5;
    x(data::kTauSpline2) = 0.25;
    double prev = -1.0;
    for (double q = 0.0; q <= 1.0; q += 0.2) {
      x(data::kTauQhi) = q;
      const double t = rewards::tau_eval(c.delta, x);
      REQUIRE(t >= prev);
      prev = t;
    }
  }
}

TEST_CASE("ELBO estimates are deterministic given the stream state") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{2, 4, true, 0.3}, 17);
  std::vector<int> ids(static_cast<std::size_t>(model.n_batches()));
  std::iota(ids.begin(), ids.end(), 0);

  Rng r1 = make_stream(42, hash_str("elbo"));
  Rng r2 = make_stream(42, hash_str("elbo"));
  const double a = model.elbo_estimate(ids, 1.0, 4, r1);
  const double b = model.elbo_estimate(ids, 1.0, 4, r2);
  REQUIRE(std::isfinite(a));
  REQUIRE(a == b);  // bitwise

  Rng r3 = make_stream(43, hash_str("elbo"));
  REQUIRE(model.elbo_estimate(ids, 1.0, 4, r3) != a);

  Rng r4 = make_stream(42, hash_str("elbo"));
  REQUIRE_THROWS_AS(model.elbo_estimate(ids, 1.0, 0, r4), ConfigError);
}

TEST_CASE("short fits are bitwise reproducible under the same seed") {
  const auto& ds = testutil::small_result().dataset;
  const rewards::ModelConfig mc{2, 4, true, 0.3};
  rewards::FitConfig fc;
  fc.epochs = 3;
  fc.n_mc_eval = 4;

  rewards::RewardsModel m1(ds, mc, 17);
  rewards::RewardsModel m2(ds, mc, 17);
  const auto r1 = m1.fit(fc, 2024);
  const auto r2 = m2.fit(fc, 2024);
  REQUIRE(r1.epochs_run == 3);
  REQUIRE(r1.elbo_trace.size() == 3);
  REQUIRE(r1.elbo_trace == r2.elbo_trace);  // bitwise
  REQUIRE((m1.gather_params() - m2.gather_params()).cwiseAbs().maxCoeff() == 0.0);

  rewards::RewardsModel m3(ds, mc, 17);
  const auto r3 = m3.fit(fc, 2025);
  REQUIRE(r3.elbo_trace != r1.elbo_trace);

  rewards::RewardsModel m4(ds, mc, 17);
  rewards::FitConfig bad = fc;
  bad.epochs = 0;
  REQUIRE_THROWS_AS(m4.fit(bad, 1), ConfigError);
}

TEST_CASE("trace convergence rule: mean relative change over the window") {
  using RM = rewards::RewardsModel;
  REQUIRE_FALSE(RM::trace_converged({-100.0}, 1e-3, 10));
  // flat tail: relative steps ~1e-5
  std::vector<double> flat;
  for (int i = 0; i < 20; ++i) flat.push_back(-1000.0 + 0.01 * i);
  REQUIRE(RM::trace_converged(flat, 1e-3, 10));
  // still climbing: 1% per epoch
  std::vector<double> steep;
  for (int i = 0; i < 20; ++i) steep.push_back(-1000.0 * std::pow(0.99, i));
  REQUIRE_FALSE(RM::trace_converged(steep, 1e-3, 10));
  // window longer than the trace falls back to what is available
  REQUIRE(RM::trace_converged({-1000.0, -1000.0001}, 1e-3, 10));
}

TEST_CASE("marginal standard deviations follow the low-rank factorization") {
  const auto& ds = testutil::small_result().dataset;
  rewards::RewardsModel model(ds, rewards::ModelConfig{3, 4, true, 0.3}, 9);
  for (int i = 0; i < model.latent_dim(); i += 7) {
    const double var =
        std::exp(model.log_diag()(i)) + model.factor().row(i).squaredNorm();
    REQUIRE(model.marginal_sd(i) == Approx(std::sqrt(var)).epsilon(1e-14));
  }
}

TEST_CASE("checkpoints restore the posterior exactly") {
  const auto& ds = testutil::small_result().dataset;
  const rewards::ModelConfig mc{2, 4, true, 0.3};
  rewards::RewardsModel model(ds, mc, 17);
  rewards::FitConfig fc;
  fc.epochs = 2;
  fc.n_mc_eval = 2;
  model.fit(fc, 77);

  const auto path = std::filesystem::temp_directory_path() / "broach_rm_ckpt_test.json";
  model.save(path.string());
  const auto loaded = rewards::RewardsModel::load(path.string(), ds);

  REQUIRE((model.gather_params() - loaded.gather_params()).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(loaded.fitted_converged() == model.fitted_converged());
  REQUIRE(loaded.config().rank == mc.rank);

  Rng ra = make_stream(5, hash_str("ckpt"));
  Rng rb = make_stream(5, hash_str("ckpt"));
  for (int k = 0; k < model.n_counties(); ++k) {
    const auto da = model.sample(k, ra);
    const auto db = loaded.sample(k, rb);
    REQUIRE((da.beta - db.beta).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((da.delta - db.delta).cwiseAbs().maxCoeff() == 0.0);
  }

  // a dataset with a different county list is rejected
  auto other_cfg = testutil::small_config();
  other_cfg.counties[0].id = "99999";
  const auto other = synth::generate_synthetic(other_cfg, 1);
  REQUIRE_THROWS_AS(rewards::RewardsModel::load(path.string(), other.dataset), SchemaError);
  std::filesystem::remove(path);
}

TEST_CASE("fixed posterior replays the supplied coefficients") {
  rewards::FixedPosterior fp({valid_coeffs()});
  Rng rng = make_stream(0, 0);
  const auto c = fp.sample(0, rng);
  REQUIRE((c.beta - fp.per_county[0].beta).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THROWS_AS(fp.sample(1, rng), ConfigError);
}
