#pragma once

// Hierarchical Bayesian model of daily heat-related hospitalizations.
//
// Observation model, per county k and day t:
//   y ~ Poisson(n * rho),   rho = lambda * (1 - a * tau)
//   lambda = exp(beta_k . x_lambda)      baseline per-capita rate
//   tau    = sigmoid(delta_k . x_tau)    fractional rate reduction under an alert
//
// Hierarchical prior, per coefficient l with spatial covariates w_k:
//   unconstrained coefficients:      gamma ~ Normal(f(w_k)_l, sigma_l^2)
//   positive coefficients (qhi->tau): gamma = exp(z), log gamma ~ Normal(f_l, sigma_l^2)
//   negative coefficients (past alerts->lambda): gamma = -exp(z), log(-gamma) ~ Normal(f_l, sigma_l^2)
//   sigma_l ~ HalfCauchy(1), handled as log sigma with its change-of-variables
//   Jacobian. f is a pair of small feed-forward networks (one for the lambda
//   block, one for the tau block) over standardized spatial inputs.
//
// All three coefficient classes reduce to Normal densities in the
// unconstrained parameterization, so the joint prior over the latent vector
// z = (all county coefficient blocks, log sigma) is Normal except for the
// HalfCauchy pushforward on the log-sigma coordinates.
//
// Inference is stochastic variational: q(z) = Normal(m, diag(d) + B B^T) with
// low-rank B, reparameterized samples z = m + B e1 + sqrt(d) e2, and the KL
// term estimated by the Monte Carlo log-density difference log q(z) - log p(z)
// (no closed form exists across the constraint transforms). Gradients are
// analytic; `elbo_sample` differentiates the one-draw estimator exactly at
// fixed noise, which is what the finite-difference check in the test suite
// verifies.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "broach/common.hpp"
#include "broach/data_core.hpp"
#include "broach/nets.hpp"

namespace broach::rewards {

constexpr int kCoefDim = data::kLambdaDim + data::kTauDim;  // per-county coefficient count

enum class ConstraintClass { kNormal, kLogNormal, kNegLogNormal };

// Constraint class of coefficient l in the per-county block
// [beta (kLambdaDim), delta (kTauDim)].
inline ConstraintClass coef_class(int l) {
  if (l == data::kLambdaAlerts2wk || l == data::kLambdaAlertYesterday) return ConstraintClass::kNegLogNormal;
  if (l == data::kLambdaDim + data::kTauQhi) return ConstraintClass::kLogNormal;
  return ConstraintClass::kNormal;
}

inline double to_constrained(ConstraintClass c, double z) {
  switch (c) {
    case ConstraintClass::kLogNormal: return std::exp(z);
    case ConstraintClass::kNegLogNormal: return -std::exp(z);
    default: return z;
  }
}

inline double to_unconstrained(ConstraintClass c, double g) {
  switch (c) {
    case ConstraintClass::kLogNormal:
      if (!(g > 0.0)) throw NumericError("log-normal coefficient must be positive");
      return std::log(g);
    case ConstraintClass::kNegLogNormal:
      if (!(g < 0.0)) throw NumericError("negative-log-normal coefficient must be negative");
      return std::log(-g);
    default: return g;
  }
}

struct CoefficientSet {
  Eigen::VectorXd beta;   // length data::kLambdaDim
  Eigen::VectorXd delta;  // length data::kTauDim

  void validate() const {
    if (beta.size() != data::kLambdaDim || delta.size() != data::kTauDim)
      throw ConfigError("coefficient set has wrong block lengths");
    if (!beta.allFinite() || !delta.allFinite()) throw NumericError("non-finite coefficients");
    if (!(beta(data::kLambdaAlerts2wk) < 0.0) || !(beta(data::kLambdaAlertYesterday) < 0.0))
      throw NumericError("past-alert lambda coefficients must be negative");
    if (!(delta(data::kTauQhi) > 0.0)) throw NumericError("qhi tau coefficient must be positive");
  }
};

// ---------------------------------------------------------------------------
// Elementary model quantities.

inline double lambda_eval(const Eigen::VectorXd& beta, const Eigen::VectorXd& x) {
  if (beta.size() != x.size()) throw ConfigError("lambda_eval: dimension mismatch");
  const double v = std::exp(beta.dot(x));
  if (!std::isfinite(v)) throw NumericError("lambda_eval overflowed");
  return v;
}

inline double tau_eval(const Eigen::VectorXd& delta, const Eigen::VectorXd& x) {
  if (delta.size() != x.size()) throw ConfigError("tau_eval: dimension mismatch");
  return sigmoid(delta.dot(x));
}

inline double expected_rate(const CoefficientSet& c, const Eigen::VectorXd& xl, const Eigen::VectorXd& xt, int a) {
  const double lam = lambda_eval(c.beta, xl);
  return a ? lam * (1.0 - tau_eval(c.delta, xt)) : lam;
}

inline double poisson_loglik(long y, double n, double rho) {
  if (y < 0) throw ConfigError("poisson_loglik: negative count");
  if (!(n > 0.0) || !(rho > 0.0)) throw NumericError("poisson_loglik: rate must be positive");
  const double mu = n * rho;
  return static_cast<double>(y) * std::log(mu) - mu - std::lgamma(static_cast<double>(y) + 1.0);
}

inline double normal_logpdf(double x, double mu, double sigma) {
  if (!(sigma > 0.0)) throw NumericError("normal_logpdf: sigma must be positive");
  const double r = (x - mu) / sigma;
  return -0.5 * r * r - std::log(sigma) - 0.5 * std::log(2.0 * M_PI);
}

// Parameterized by the log of the median: log(x) ~ Normal(log_median, sigma^2).
inline double lognormal_logpdf(double x, double log_median, double sigma) {
  if (!(x > 0.0)) throw NumericError("lognormal_logpdf: support is (0, inf)");
  return normal_logpdf(std::log(x), log_median, sigma) - std::log(x);
}

// Mirror image on the negative half-line: log(-x) ~ Normal(log_median, sigma^2).
inline double neg_lognormal_logpdf(double x, double log_median, double sigma) {
  if (!(x < 0.0)) throw NumericError("neg_lognormal_logpdf: support is (-inf, 0)");
  return normal_logpdf(std::log(-x), log_median, sigma) - std::log(-x);
}

inline double half_cauchy_logpdf(double x, double scale) {
  if (!(x > 0.0)) throw NumericError("half_cauchy_logpdf: support is (0, inf)");
  if (!(scale > 0.0)) throw ConfigError("half_cauchy_logpdf: scale must be positive");
  return std::log(2.0) - std::log(M_PI) - std::log(scale) - std::log1p((x / scale) * (x / scale));
}

// ---------------------------------------------------------------------------
// Prior-mean networks over spatial covariates.

struct PriorModel {
  nets::Mlp beta_net;   // input -> kLambdaDim unconstrained prior means
  nets::Mlp delta_net;  // input -> kTauDim
  Eigen::VectorXd numeric_mean;  // standardization of the numeric spatial columns
  Eigen::VectorXd numeric_sd;

  static constexpr int kInputDim = data::kNumRegions + data::SpatialFeatures::kNumericCount;

  Eigen::VectorXd encode(const data::SpatialFeatures& w) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(kInputDim);
    v(static_cast<int>(w.region)) = 1.0;
    const Eigen::VectorXd num = w.numeric();
    for (int i = 0; i < num.size(); ++i)
      v(data::kNumRegions + i) = (num(i) - numeric_mean(i)) / numeric_sd(i);
    return v;
  }

  // Unconstrained prior means for the full per-county block.
  Eigen::VectorXd mean_for(const data::SpatialFeatures& w) const {
    const Eigen::VectorXd enc = encode(w);
    Eigen::VectorXd mu(kCoefDim);
    mu.head(data::kLambdaDim) = beta_net.forward(enc);
    mu.tail(data::kTauDim) = delta_net.forward(enc);
    return mu;
  }
};

// Log prior density of one county's coefficients and the shared scales, in
// the constrained parameterization (the classes' own densities plus the
// HalfCauchy(1) hyper-prior on each sigma_l).
inline double prior_logdensity(const CoefficientSet& gamma, const Eigen::VectorXd& sigma,
                               const data::SpatialFeatures& w, const PriorModel& prior) {
  if (sigma.size() != kCoefDim) throw ConfigError("prior_logdensity: sigma length mismatch");
  const Eigen::VectorXd mu = prior.mean_for(w);
  double lp = 0.0;
  for (int l = 0; l < kCoefDim; ++l) {
    const double g = l < data::kLambdaDim ? gamma.beta(l) : gamma.delta(l - data::kLambdaDim);
    switch (coef_class(l)) {
      case ConstraintClass::kNormal: lp += normal_logpdf(g, mu(l), sigma(l)); break;
      case ConstraintClass::kLogNormal: lp += lognormal_logpdf(g, mu(l), sigma(l)); break;
      case ConstraintClass::kNegLogNormal: lp += neg_lognormal_logpdf(g, mu(l), sigma(l)); break;
    }
  }
  for (int l = 0; l < kCoefDim; ++l) lp += half_cauchy_logpdf(sigma(l), 1.0);
  return lp;
}

// ---------------------------------------------------------------------------
// Posterior sampling interface shared with the simulator.

struct PosteriorSampler {
  virtual ~PosteriorSampler() = default;
  virtual CoefficientSet sample(int county_index, Rng& rng) const = 0;
};

// Degenerate posterior returning fixed coefficients; used for ground-truth
// simulation and tests.
struct FixedPosterior final : PosteriorSampler {
  std::vector<CoefficientSet> per_county;
  explicit FixedPosterior(std::vector<CoefficientSet> cs) : per_county(std::move(cs)) {}
  CoefficientSet sample(int county_index, Rng&) const override {
    if (county_index < 0 || county_index >= static_cast<int>(per_county.size()))
      throw ConfigError("FixedPosterior: county index out of range");
    return per_county[static_cast<std::size_t>(county_index)];
  }
};

// ---------------------------------------------------------------------------
// The fitted model.

struct FitConfig {
  int epochs = 80;
  double lr = 1e-3;
  double lr_decay = 0.0;        // linear: lr_e = lr * (1 - lr_decay * e/(epochs-1))
  int n_mc = 1;                 // MC draws per gradient step
  int n_mc_eval = 64;           // fixed common draws for the per-epoch trace
  double theta_lr_scale = 1.0;  // relative learning rate of the prior networks
  bool train_prior = true;
  double convergence_tol = 1e-3;
  int convergence_window = 10;
  // Polyak-style bias-corrected EMA of the iterates; the per-epoch trace is
  // evaluated at the averaged parameters and the fit returns them. Filters
  // the single-draw gradient jitter out of the plateau. 0 disables.
  double param_ema = 0.999;
};

struct FitReport {
  std::vector<double> elbo_trace;  // one full-dataset estimate per epoch
  bool converged = false;
  int epochs_run = 0;
};

struct NoiseDraw {
  Eigen::VectorXd eps1;  // rank
  Eigen::VectorXd eps2;  // latent dim
};

struct ModelConfig {
  int rank = 8;
  int hidden_units = 32;  // prior nets; 0 = linear
  bool infer_sigma = true;
  double fixed_sigma = 0.3;  // used when infer_sigma == false
};

class RewardsModel final : public PosteriorSampler {
 public:
  RewardsModel(const data::Dataset& ds, const ModelConfig& cfg, std::uint64_t init_seed)
      : cfg_(cfg), n_counties_(static_cast<int>(ds.counties.size())) {
    if (cfg.rank < 1) throw ConfigError("posterior rank must be at least 1");
    latent_dim_ = kCoefDim * n_counties_ + (cfg.infer_sigma ? kCoefDim : 0);

    county_ids_.reserve(ds.counties.size());
    spatial_.reserve(ds.counties.size());
    for (const auto& c : ds.counties) {
      county_ids_.push_back(c.id);
      spatial_.push_back(c.spatial);
    }
    init_prior_standardization();

    double rate_sum = 0.0;
    long rate_n = 0;
    for (const auto& c : ds.counties)
      for (const auto& s : c.seasons) {
        Batch b;
        b.county = static_cast<int>(&c - ds.counties.data());
        b.year = s.year;
        b.xl = s.x_lambda;
        b.xt = s.x_tau;
        b.y = s.hosp;
        b.n = s.pop;
        b.a = Eigen::VectorXd::Zero(data::kSeasonLength);
        for (int t = 0; t < data::kSeasonLength; ++t) b.a(t) = s.alerts[static_cast<std::size_t>(t)];
        batches_.push_back(std::move(b));
        rate_sum += s.mean_rate * data::kSeasonLength;
        rate_n += data::kSeasonLength;
      }
    const double mean_rate = rate_n > 0 ? rate_sum / static_cast<double>(rate_n) : 1e-4;
    init_parameters(std::max(mean_rate, 1e-12), init_seed);
  }

  int n_counties() const { return n_counties_; }
  int latent_dim() const { return latent_dim_; }
  int rank() const { return cfg_.rank; }
  int n_batches() const { return static_cast<int>(batches_.size()); }
  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::string>& county_ids() const { return county_ids_; }
  const Eigen::VectorXd& mean() const { return m_; }
  const Eigen::VectorXd& log_diag() const { return log_d_; }
  const Eigen::MatrixXd& factor() const { return B_; }
  PriorModel& prior() { return prior_; }
  const PriorModel& prior() const { return prior_; }
  bool fitted_converged() const { return converged_; }
  void set_converged(bool c) { converged_ = c; }

  double marginal_sd(int i) const { return std::sqrt(std::exp(log_d_(i)) + B_.row(i).squaredNorm()); }

  // Flat trainable parameter vector: [m, log_d, B (column-major), beta_net,
  // delta_net]. Gradients use the same layout.
  int flat_size() const {
    return 2 * latent_dim_ + latent_dim_ * cfg_.rank + prior_.beta_net.param_count() +
           prior_.delta_net.param_count();
  }
  Eigen::VectorXd gather_params() const {
    Eigen::VectorXd p(flat_size());
    int off = 0;
    p.segment(off, latent_dim_) = m_;
    off += latent_dim_;
    p.segment(off, latent_dim_) = log_d_;
    off += latent_dim_;
    p.segment(off, latent_dim_ * cfg_.rank) = Eigen::Map<const Eigen::VectorXd>(B_.data(), B_.size());
    off += latent_dim_ * cfg_.rank;
    p.segment(off, prior_.beta_net.param_count()) = prior_.beta_net.params();
    off += prior_.beta_net.param_count();
    p.segment(off, prior_.delta_net.param_count()) = prior_.delta_net.params();
    return p;
  }
  void scatter_params(const Eigen::VectorXd& p) {
    if (p.size() != flat_size()) throw ConfigError("flat parameter vector has wrong length");
    int off = 0;
    m_ = p.segment(off, latent_dim_);
    off += latent_dim_;
    log_d_ = p.segment(off, latent_dim_);
    off += latent_dim_;
    Eigen::Map<Eigen::VectorXd>(B_.data(), B_.size()) = p.segment(off, latent_dim_ * cfg_.rank);
    off += latent_dim_ * cfg_.rank;
    prior_.beta_net.params() = p.segment(off, prior_.beta_net.param_count());
    off += prior_.beta_net.param_count();
    prior_.delta_net.params() = p.segment(off, prior_.delta_net.param_count());
  }

  // One-draw ELBO estimate at fixed noise; exact analytic gradient of this
  // deterministic function when `grad` is non-null (accumulated, flat layout).
  double elbo_sample(const std::vector<int>& batch_ids, double lik_scale, const NoiseDraw& eps,
                     Eigen::VectorXd* grad) const {
    const int D = latent_dim_, r = cfg_.rank;
    if (eps.eps1.size() != r || eps.eps2.size() != D) throw ConfigError("noise draw has wrong dimensions");

    const Eigen::VectorXd d = log_d_.array().exp().matrix();
    const Eigen::VectorXd s = (0.5 * log_d_).array().exp().matrix();
    const Eigen::VectorXd z = m_ + B_ * eps.eps1 + s.cwiseProduct(eps.eps2);

    // log q(z) via Woodbury/determinant-lemma on diag(d) + B B^T.
    const Eigen::MatrixXd P = d.cwiseInverse().asDiagonal() * B_;            // D x r
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(r, r) + B_.transpose() * P;
    const Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) throw NumericError("posterior covariance factor is not PD");
    const Eigen::VectorXd u = z - m_;
    const Eigen::VectorXd alpha = u.cwiseQuotient(d) - P * llt.solve(P.transpose() * u);
    double logdet = log_d_.sum();
    {
      const Eigen::MatrixXd L = llt.matrixL();
      for (int i = 0; i < r; ++i) logdet += 2.0 * std::log(L(i, i));
    }
    const double logq =
        -0.5 * (u.dot(alpha) + logdet + static_cast<double>(D) * std::log(2.0 * M_PI));

    Eigen::VectorXd gz = Eigen::VectorXd::Zero(D);  // d(elbo)/dz at fixed noise, logq path included below

    // Prior over coefficients (+ HalfCauchy pushforward on log sigma).
    double logp = 0.0;
    std::vector<nets::Mlp::Cache> beta_caches(n_counties_), delta_caches(n_counties_);
    Eigen::MatrixXd gmu = Eigen::MatrixXd::Zero(kCoefDim, n_counties_);
    for (int k = 0; k < n_counties_; ++k) {
      Eigen::VectorXd mu(kCoefDim);
      mu.head(data::kLambdaDim) = prior_.beta_net.forward_cached(encodings_.col(k), beta_caches[k]);
      mu.tail(data::kTauDim) = prior_.delta_net.forward_cached(encodings_.col(k), delta_caches[k]);
      for (int l = 0; l < kCoefDim; ++l) {
        const int zi = k * kCoefDim + l;
        const double sig = sigma_of(z, l);
        const double res = z(zi) - mu(l);
        logp += -0.5 * res * res / (sig * sig) - std::log(sig) - 0.5 * std::log(2.0 * M_PI);
        if (grad) {
          gz(zi) += -res / (sig * sig);
          gmu(l, k) = res / (sig * sig);
          if (cfg_.infer_sigma) gz(sigma_coord(l)) += -1.0 + res * res / (sig * sig);
        }
      }
    }
    if (cfg_.infer_sigma) {
      auto softplus = [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
      for (int l = 0; l < kCoefDim; ++l) {
        const int zi = sigma_coord(l);
        logp += std::log(2.0 / M_PI) + z(zi) - softplus(2.0 * z(zi));
        if (grad) gz(zi) += 1.0 - 2.0 * sigmoid(2.0 * z(zi));
      }
    }

    // Likelihood over the batch, rescaled to the full dataset.
    double loglik = 0.0;
    for (int bid : batch_ids) {
      const Batch& b = batches_.at(static_cast<std::size_t>(bid));
      const int base = b.county * kCoefDim;
      Eigen::VectorXd gamma(kCoefDim), mult(kCoefDim);
      for (int l = 0; l < kCoefDim; ++l) {
        gamma(l) = to_constrained(coef_class(l), z(base + l));
        mult(l) = coef_class(l) == ConstraintClass::kNormal ? 1.0 : gamma(l);
      }
      const Eigen::VectorXd eta_l = b.xl * gamma.head(data::kLambdaDim);
      const Eigen::VectorXd eta_t = b.xt * gamma.tail(data::kTauDim);
      const Eigen::VectorXd lam = eta_l.array().exp().matrix();
      if (!lam.allFinite()) throw NumericError("lambda overflowed during ELBO evaluation");
      Eigen::VectorXd tau(eta_t.size());
      for (int t = 0; t < tau.size(); ++t) tau(t) = sigmoid(eta_t(t));
      const Eigen::VectorXd mu_rate =
          b.n.cwiseProduct(lam).cwiseProduct((1.0 - (b.a.cwiseProduct(tau)).array()).matrix());
      for (int t = 0; t < mu_rate.size(); ++t)
        loglik += b.y(t) * std::log(mu_rate(t)) - mu_rate(t) - std::lgamma(b.y(t) + 1.0);
      if (grad) {
        const Eigen::VectorXd resid = b.y - mu_rate;
        const Eigen::VectorXd gbeta = b.xl.transpose() * resid;
        const Eigen::VectorXd gdelta = b.xt.transpose() * (-(b.a.cwiseProduct(resid).cwiseProduct(tau)));
        for (int l = 0; l < data::kLambdaDim; ++l) gz(base + l) += lik_scale * gbeta(l) * mult(l);
        for (int l = 0; l < data::kTauDim; ++l) {
          const int j = data::kLambdaDim + l;
          gz(base + j) += lik_scale * gdelta(l) * mult(j);
        }
      }
    }

    const double elbo = lik_scale * loglik + logp - logq;

    if (grad) {
      if (grad->size() != flat_size()) throw ConfigError("gradient buffer has wrong length");
      gz += alpha;  // path derivative of -log q

      int off = 0;
      grad->segment(off, D) += gz - alpha;  // m: path + direct -dlogq/dm
      off += D;
      // log d: path through z plus direct -dlogq/dlog d.
      const Eigen::MatrixXd Y = llt.matrixL().solve(P.transpose());  // r x D
      for (int i = 0; i < D; ++i) {
        const double inv_diag = 1.0 / d(i) - Y.col(i).squaredNorm();
        (*grad)(off + i) += gz(i) * 0.5 * s(i) * eps.eps2(i) + 0.5 * d(i) * (inv_diag - alpha(i) * alpha(i));
      }
      off += D;
      // B: path gz e1^T plus direct Sigma^{-1}B - alpha (alpha^T B).
      const Eigen::MatrixXd gB =
          gz * eps.eps1.transpose() + P * llt.solve(Eigen::MatrixXd::Identity(r, r)) - alpha * (alpha.transpose() * B_);
      Eigen::Map<Eigen::VectorXd>(grad->data() + off, D * r) += Eigen::Map<const Eigen::VectorXd>(gB.data(), D * r);
      off += D * r;
      // Prior networks.
      Eigen::Ref<Eigen::VectorXd> gbn = grad->segment(off, prior_.beta_net.param_count());
      off += prior_.beta_net.param_count();
      Eigen::Ref<Eigen::VectorXd> gdn = grad->segment(off, prior_.delta_net.param_count());
      for (int k = 0; k < n_counties_; ++k) {
        prior_.beta_net.backward(beta_caches[k], gmu.col(k).head(data::kLambdaDim), gbn);
        prior_.delta_net.backward(delta_caches[k], gmu.col(k).tail(data::kTauDim), gdn);
      }
    }
    return elbo;
  }

  // Unbiased multi-draw ELBO estimate (the spec'd estimator).
  double elbo_estimate(const std::vector<int>& batch_ids, double lik_scale, int n_mc, Rng& rng) const {
    if (n_mc < 1) throw ConfigError("elbo_estimate: n_mc must be positive");
    double sum = 0.0;
    for (int i = 0; i < n_mc; ++i) sum += elbo_sample(batch_ids, lik_scale, draw_noise(rng), nullptr);
    return sum / n_mc;
  }

  NoiseDraw draw_noise(Rng& rng) const {
    std::normal_distribution<double> gauss(0.0, 1.0);
    NoiseDraw nd;
    nd.eps1.resize(cfg_.rank);
    nd.eps2.resize(latent_dim_);
    for (int i = 0; i < cfg_.rank; ++i) nd.eps1(i) = gauss(rng);
    for (int i = 0; i < latent_dim_; ++i) nd.eps2(i) = gauss(rng);
    return nd;
  }

  FitReport fit(const FitConfig& fc, std::uint64_t seed) {
    if (fc.epochs < 1) throw ConfigError("fit: epochs must be positive");
    Rng train_rng = make_stream(seed, hash_str("rewards-train"));
    Rng eval_rng = make_stream(seed, hash_str("rewards-eval"));
    std::vector<NoiseDraw> eval_noise;
    eval_noise.reserve(static_cast<std::size_t>(fc.n_mc_eval));
    for (int i = 0; i < fc.n_mc_eval; ++i) eval_noise.push_back(draw_noise(eval_rng));
    std::vector<int> all_ids(batches_.size());
    std::iota(all_ids.begin(), all_ids.end(), 0);

    const double lik_scale = static_cast<double>(batches_.size());
    nets::Adam adam(flat_size(), fc.lr);
    Eigen::VectorXd flat = gather_params();
    Eigen::VectorXd grad(flat_size());
    const int theta_off = 2 * latent_dim_ + latent_dim_ * cfg_.rank;
    const int theta_len = flat_size() - theta_off;

    const bool use_ema = fc.param_ema > 0.0;
    Eigen::VectorXd ema = Eigen::VectorXd::Zero(flat_size());
    long n_steps = 0;
    auto averaged = [&]() -> Eigen::VectorXd {
      return ema / (1.0 - std::pow(fc.param_ema, static_cast<double>(n_steps)));
    };

    FitReport report;
    std::vector<int> order = all_ids;
    for (int e = 0; e < fc.epochs; ++e) {
      const double frac = fc.epochs > 1 ? static_cast<double>(e) / (fc.epochs - 1) : 0.0;
      const double lr_scale = 1.0 - fc.lr_decay * frac;
      std::shuffle(order.begin(), order.end(), train_rng);
      for (int bid : order) {
        grad.setZero();
        for (int i = 0; i < fc.n_mc; ++i) elbo_sample({bid}, lik_scale, draw_noise(train_rng), &grad);
        grad /= static_cast<double>(fc.n_mc);
        if (!fc.train_prior)
          grad.segment(theta_off, theta_len).setZero();
        else if (fc.theta_lr_scale != 1.0)
          grad.segment(theta_off, theta_len) *= fc.theta_lr_scale;
        grad = -grad;  // Adam minimizes
        adam.step(flat, grad, lr_scale);
        scatter_params(flat);
        if (use_ema) {
          ema = fc.param_ema * ema + (1.0 - fc.param_ema) * flat;
          ++n_steps;
        }
      }
      if (use_ema) scatter_params(averaged());
      double elbo = 0.0;
      for (const auto& nd : eval_noise) elbo += elbo_sample(all_ids, 1.0, nd, nullptr);
      elbo /= static_cast<double>(eval_noise.size());
      if (use_ema && e + 1 < fc.epochs) scatter_params(flat);
      if (!std::isfinite(elbo))
        throw NumericError("ELBO diverged (non-finite) at epoch " + std::to_string(e));
      report.elbo_trace.push_back(elbo);
    }
    report.epochs_run = fc.epochs;
    report.converged = trace_converged(report.elbo_trace, fc.convergence_tol, fc.convergence_window);
    converged_ = report.converged;
    return report;
  }

  static bool trace_converged(const std::vector<double>& trace, double tol, int window) {
    if (trace.size() < 2) return false;
    const int w = std::min<int>(window, static_cast<int>(trace.size()) - 1);
    double acc = 0.0;
    for (std::size_t e = trace.size() - static_cast<std::size_t>(w); e < trace.size(); ++e)
      acc += std::abs((trace[e] - trace[e - 1]) / trace[e - 1]);
    return acc / w < tol;
  }

  // Posterior draw of one county's coefficients (slice of the joint draw, i.e.
  // the exact marginal of the low-rank normal).
  CoefficientSet sample(int county_index, Rng& rng) const override {
    if (county_index < 0 || county_index >= n_counties_) throw ConfigError("county index out of range");
    const Eigen::VectorXd z = sample_z(rng);
    return coefficients_from(z, county_index);
  }

  std::vector<CoefficientSet> sample_posterior(int county_index, int n, Rng& rng) const {
    std::vector<CoefficientSet> out;
    out.reserve(static_cast<std::size_t>(std::max(0, n)));
    for (int i = 0; i < n; ++i) out.push_back(sample(county_index, rng));
    return out;
  }

  Eigen::VectorXd sample_z(Rng& rng) const {
    const NoiseDraw nd = draw_noise(rng);
    const Eigen::VectorXd s = (0.5 * log_d_).array().exp().matrix();
    return m_ + B_ * nd.eps1 + s.cwiseProduct(nd.eps2);
  }

  CoefficientSet coefficients_from(const Eigen::VectorXd& z, int county_index) const {
    CoefficientSet c;
    c.beta.resize(data::kLambdaDim);
    c.delta.resize(data::kTauDim);
    const int base = county_index * kCoefDim;
    for (int l = 0; l < kCoefDim; ++l) {
      const double g = to_constrained(coef_class(l), z(base + l));
      if (l < data::kLambdaDim)
        c.beta(l) = g;
      else
        c.delta(l - data::kLambdaDim) = g;
    }
    c.validate();
    return c;
  }

  // ------------------------------------------------------------------
  // Checkpointing.

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "rewards_checkpoint";
    j["counties"] = county_ids_;
    j["rank"] = cfg_.rank;
    j["hidden_units"] = cfg_.hidden_units;
    j["infer_sigma"] = cfg_.infer_sigma;
    j["fixed_sigma"] = cfg_.fixed_sigma;
    j["lambda_features"] = std::vector<std::string>(data::lambda_feature_names().begin(),
                                                    data::lambda_feature_names().end());
    j["tau_features"] =
        std::vector<std::string>(data::tau_feature_names().begin(), data::tau_feature_names().end());
    j["numeric_mean"] = std::vector<double>(prior_.numeric_mean.data(),
                                            prior_.numeric_mean.data() + prior_.numeric_mean.size());
    j["numeric_sd"] =
        std::vector<double>(prior_.numeric_sd.data(), prior_.numeric_sd.data() + prior_.numeric_sd.size());
    j["m"] = std::vector<double>(m_.data(), m_.data() + m_.size());
    j["log_d"] = std::vector<double>(log_d_.data(), log_d_.data() + log_d_.size());
    j["B"] = std::vector<double>(B_.data(), B_.data() + B_.size());
    j["beta_net"] = std::vector<double>(prior_.beta_net.params().data(),
                                        prior_.beta_net.params().data() + prior_.beta_net.param_count());
    j["delta_net"] = std::vector<double>(prior_.delta_net.params().data(),
                                         prior_.delta_net.params().data() + prior_.delta_net.param_count());
    j["converged"] = converged_;
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    out << to_json().dump(1) << '\n';
  }

  static RewardsModel load(const std::string& path, const data::Dataset& ds) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw SchemaError("malformed checkpoint JSON: " + std::string(e.what()));
    }
    if (!j.contains("format_version") || j["format_version"] != 1 || j.value("kind", "") != "rewards_checkpoint")
      throw SchemaError("unsupported checkpoint format in " + path);
    ModelConfig cfg;
    cfg.rank = j.at("rank").get<int>();
    cfg.hidden_units = j.at("hidden_units").get<int>();
    cfg.infer_sigma = j.at("infer_sigma").get<bool>();
    cfg.fixed_sigma = j.at("fixed_sigma").get<double>();
    RewardsModel model(ds, cfg, 0);
    const auto ids = j.at("counties").get<std::vector<std::string>>();
    if (ids != model.county_ids_) throw SchemaError("checkpoint county list does not match the dataset");
    auto load_vec = [&](const char* key, Eigen::VectorXd& v) {
      const auto vals = j.at(key).get<std::vector<double>>();
      if (static_cast<int>(vals.size()) != v.size())
        throw SchemaError(std::string("checkpoint field ") + key + " has wrong length");
      v = Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
    };
    load_vec("m", model.m_);
    load_vec("log_d", model.log_d_);
    {
      const auto vals = j.at("B").get<std::vector<double>>();
      if (static_cast<int>(vals.size()) != model.B_.size()) throw SchemaError("checkpoint field B has wrong length");
      model.B_ = Eigen::Map<const Eigen::MatrixXd>(vals.data(), model.latent_dim_, cfg.rank);
    }
    load_vec("numeric_mean", model.prior_.numeric_mean);
    load_vec("numeric_sd", model.prior_.numeric_sd);
    load_vec("beta_net", model.prior_.beta_net.params());
    load_vec("delta_net", model.prior_.delta_net.params());
    model.converged_ = j.value("converged", false);
    return model;
  }

 private:
  struct Batch {
    int county = 0;
    int year = 0;
    Eigen::MatrixXd xl, xt;
    Eigen::VectorXd y, n, a;
  };

  int sigma_coord(int l) const { return kCoefDim * n_counties_ + l; }
  double sigma_of(const Eigen::VectorXd& z, int l) const {
    return cfg_.infer_sigma ? std::exp(z(sigma_coord(l))) : cfg_.fixed_sigma;
  }

  void init_prior_standardization() {
    const int nnum = data::SpatialFeatures::kNumericCount;
    Eigen::MatrixXd num(nnum, n_counties_);
    for (int k = 0; k < n_counties_; ++k) num.col(k) = spatial_[static_cast<std::size_t>(k)].numeric();
    prior_.numeric_mean = num.rowwise().mean();
    prior_.numeric_sd.resize(nnum);
    for (int i = 0; i < nnum; ++i) {
      const double var =
          (num.row(i).array() - prior_.numeric_mean(i)).square().sum() / std::max(1, n_counties_ - 1);
      prior_.numeric_sd(i) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
  }

  void init_parameters(double mean_rate, std::uint64_t seed) {
    Rng rng = make_stream(seed, hash_str("rewards-init"));
    std::vector<int> hidden;
    if (cfg_.hidden_units > 0) hidden.push_back(cfg_.hidden_units);
    prior_.beta_net = nets::Mlp(PriorModel::kInputDim, hidden, data::kLambdaDim, nets::Act::kTanh);
    prior_.delta_net = nets::Mlp(PriorModel::kInputDim, hidden, data::kTauDim, nets::Act::kTanh);
    prior_.beta_net.init(rng, 0.3);
    prior_.delta_net.init(rng, 0.3);

    // Data-scale starting point: the spline block carries the intercept, so
    // its coefficients start at log(mean rate); constrained coordinates start
    // at small magnitudes on their log scales.
    Eigen::VectorXd mb = Eigen::VectorXd::Zero(data::kLambdaDim);
    mb(data::kLambdaSpline0) = mb(data::kLambdaSpline1) = mb(data::kLambdaSpline2) = std::log(mean_rate);
    mb(data::kLambdaAlerts2wk) = std::log(0.05);
    mb(data::kLambdaAlertYesterday) = std::log(0.05);
    Eigen::VectorXd md = Eigen::VectorXd::Zero(data::kTauDim);
    md(data::kTauQhi) = std::log(0.5);
    md(data::kTauSpline0) = md(data::kTauSpline1) = md(data::kTauSpline2) = -1.5;

    m_.resize(latent_dim_);
    for (int k = 0; k < n_counties_; ++k) {
      m_.segment(k * kCoefDim, data::kLambdaDim) = mb;
      m_.segment(k * kCoefDim + data::kLambdaDim, data::kTauDim) = md;
    }
    if (cfg_.infer_sigma)
      m_.segment(kCoefDim * n_counties_, kCoefDim).setConstant(std::log(0.3));
    log_d_ = Eigen::VectorXd::Constant(latent_dim_, -6.0);
    if (cfg_.infer_sigma) log_d_.segment(kCoefDim * n_counties_, kCoefDim).setConstant(-4.6);
    std::normal_distribution<double> gauss(0.0, 1.0);
    B_.resize(latent_dim_, cfg_.rank);
    for (int i = 0; i < B_.size(); ++i) B_.data()[i] = 0.01 * gauss(rng);

    // Prior networks start centered on the same block means.
    auto set_out_bias = [](nets::Mlp& net, const Eigen::VectorXd& bias) {
      net.params().tail(bias.size()) = bias;
    };
    set_out_bias(prior_.beta_net, mb);
    set_out_bias(prior_.delta_net, md);

    encodings_.resize(PriorModel::kInputDim, n_counties_);
    for (int k = 0; k < n_counties_; ++k) encodings_.col(k) = prior_.encode(spatial_[static_cast<std::size_t>(k)]);
  }

  ModelConfig cfg_;
  int n_counties_ = 0;
  int latent_dim_ = 0;
  std::vector<std::string> county_ids_;
  std::vector<data::SpatialFeatures> spatial_;
  std::vector<Batch> batches_;
  PriorModel prior_;
  Eigen::MatrixXd encodings_;  // kInputDim x n_counties
  Eigen::VectorXd m_, log_d_;
  Eigen::MatrixXd B_;
  bool converged_ = false;
};

}  // namespace broach::rewards
