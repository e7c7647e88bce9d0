#pragma once

// Dense feed-forward networks over a flat parameter vector, with hand-written
// backprop, plus the Adam optimizer shared by every trainer in the library.
// Flat storage keeps checkpointing, finite-difference checks, and optimizer
// state trivial.

#include <Eigen/Dense>
#include <vector>

#include "broach/common.hpp"

namespace broach::nets {

enum class Act { kIdentity, kTanh, kRelu };

inline double act_eval(Act a, double x) {
  switch (a) {
    case Act::kTanh: return std::tanh(x);
    case Act::kRelu: return x > 0.0 ? x : 0.0;
    default: return x;
  }
}
inline double act_grad(Act a, double pre, double post) {
  switch (a) {
    case Act::kTanh: return 1.0 - post * post;
    case Act::kRelu: return pre > 0.0 ? 1.0 : 0.0;
    default: return 1.0;
  }
}

// Multi-layer perceptron. Layer sizes [in, h1, ..., out]; the hidden layers
// use `hidden_act`, the output is linear. Parameters are stored flat as
// [W1 (row-major), b1, W2, b2, ...].
class Mlp {
 public:
  Mlp() = default;
  Mlp(int in_dim, const std::vector<int>& hidden, int out_dim, Act hidden_act)
      : act_(hidden_act) {
    sizes_.push_back(in_dim);
    for (int h : hidden) {
      if (h <= 0) throw ConfigError("hidden layer width must be positive");
      sizes_.push_back(h);
    }
    sizes_.push_back(out_dim);
    int n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) n += sizes_[l + 1] * (sizes_[l] + 1);
    params_ = Eigen::VectorXd::Zero(n);
  }

  int in_dim() const { return sizes_.front(); }
  int out_dim() const { return sizes_.back(); }
  int param_count() const { return static_cast<int>(params_.size()); }
  int layer_count() const { return static_cast<int>(sizes_.size()) - 1; }
  const std::vector<int>& sizes() const { return sizes_; }
  Act activation() const { return act_; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  // Scaled Gaussian init: weight sd = scale / sqrt(fan_in), zero biases.
  void init(Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    int off = 0;
    for (int l = 0; l < layer_count(); ++l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      const double sd = scale / std::sqrt(static_cast<double>(cols));
      for (int i = 0; i < rows * cols; ++i) params_(off + i) = sd * gauss(rng);
      off += rows * cols;
      for (int i = 0; i < rows; ++i) params_(off + i) = 0.0;
      off += rows;
    }
  }

  struct Cache {
    std::vector<Eigen::VectorXd> post;  // post[0] = input, post[l] = activation out of layer l
    std::vector<Eigen::VectorXd> pre;   // pre-activation per layer
  };

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
    Cache c;
    return forward_cached(x, c);
  }

  Eigen::VectorXd forward_cached(const Eigen::VectorXd& x, Cache& c) const {
    if (x.size() != in_dim()) throw ConfigError("MLP input dimension mismatch");
    c.post.assign(1, x);
    c.pre.clear();
    int off = 0;
    Eigen::VectorXd h = x;
    for (int l = 0; l < layer_count(); ++l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          params_.data() + off, rows, cols);
      off += rows * cols;
      Eigen::Map<const Eigen::VectorXd> b(params_.data() + off, rows);
      off += rows;
      Eigen::VectorXd z = W * h + b;
      c.pre.push_back(z);
      if (l + 1 < layer_count())
        for (int i = 0; i < rows; ++i) z(i) = act_eval(act_, z(i));
      c.post.push_back(z);
      h = z;
    }
    return h;
  }

  // Accumulates dL/dparams into `grad` (same layout as params) and returns
  // dL/dinput. `dout` is dL/d(output).
  Eigen::VectorXd backward(const Cache& c, const Eigen::VectorXd& dout, Eigen::Ref<Eigen::VectorXd> grad) const {
    Eigen::VectorXd delta = dout;
    int off = param_count();
    for (int l = layer_count() - 1; l >= 0; --l) {
      const int rows = sizes_[l + 1], cols = sizes_[l];
      if (l + 1 < layer_count())
        for (int i = 0; i < rows; ++i) delta(i) *= act_grad(act_, c.pre[l](i), c.post[l + 1](i));
      off -= rows;
      Eigen::Map<Eigen::VectorXd>(grad.data() + off, rows) += delta;
      off -= rows * cols;
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gW(grad.data() + off, rows,
                                                                                            cols);
      gW += delta * c.post[l].transpose();
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(params_.data() + off,
                                                                                                 rows, cols);
      delta = W.transpose() * delta;
    }
    return delta;
  }

 private:
  std::vector<int> sizes_;
  Act act_ = Act::kTanh;
  Eigen::VectorXd params_;
};

// Adam with bias correction; minimization convention (params -= step).
class Adam {
 public:
  Adam(int n, double lr) : lr_(lr), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad, double lr_scale = 1.0) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    params -= (lr_ * lr_scale / bc1) * m_.cwiseQuotient(((v_ / bc2).cwiseSqrt().array() + eps_).matrix());
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

}  // namespace broach::nets
