#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "diego/errors.hpp"
#include "diego/util.hpp"

namespace diego {

inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kProbClamp = 1e-12;
inline constexpr double kValImprovement = 1e-12;

enum class Activation : std::uint8_t { Relu = 0, Softmax = 1, Linear = 2 };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Softmax: return "softmax";
    case Activation::Linear: return "linear";
  }
  throw ValidationError("bad activation code");
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "softmax") return Activation::Softmax;
  if (s == "linear") return Activation::Linear;
  throw ParseError("unknown activation '" + std::string(s) + "'");
}

struct LayerSpec {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  Activation activation = Activation::Relu;
  bool batch_norm = false;
  double dropout_rate = 0.0;
};

inline void validate_specs(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw ValidationError("network needs at least one layer");
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const auto& s = specs[l];
    if (s.n_in == 0 || s.n_out == 0) throw ValidationError("layer widths must be positive");
    if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0))
      throw ValidationError("dropout_rate must lie in [0, 1)");
    if (s.activation == Activation::Softmax && l + 1 != specs.size())
      throw ValidationError("softmax is only valid on the final layer");
    if (l > 0 && s.n_in != specs[l - 1].n_out)
      throw ValidationError("layer " + std::to_string(l) + " n_in does not chain");
  }
}

struct LayerParams {
  Eigen::MatrixXd W;  // n_out x n_in
  Eigen::VectorXd b;
  Eigen::VectorXd gamma, beta;          // batch-norm scale/shift
  Eigen::VectorXd run_mean, run_var;    // running statistics for inference
};

struct NetworkParams {
  std::vector<LayerSpec> specs;
  std::vector<LayerParams> layers;

  std::size_t n_in() const { return specs.front().n_in; }
  std::size_t n_out() const { return specs.back().n_out; }

  // Uniform init with variance 2/n_in per weight; biases zero, batch-norm
  // scale 1 / shift 0, running stats at the standard-normal prior.
  static NetworkParams init(std::vector<LayerSpec> specs, std::uint64_t seed) {
    validate_specs(specs);
    NetworkParams net;
    net.specs = std::move(specs);
    std::mt19937_64 rng(seed);
    for (const auto& s : net.specs) {
      double bound = std::sqrt(6.0 / static_cast<double>(s.n_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      LayerParams p;
      p.W.resize(static_cast<Eigen::Index>(s.n_out), static_cast<Eigen::Index>(s.n_in));
      for (Eigen::Index r = 0; r < p.W.rows(); ++r)
        for (Eigen::Index c = 0; c < p.W.cols(); ++c) p.W(r, c) = dist(rng);
      p.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.n_out));
      if (s.batch_norm) {
        p.gamma = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(s.n_out));
        p.beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.n_out));
        p.run_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.n_out));
        p.run_var = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(s.n_out));
      }
      net.layers.push_back(std::move(p));
    }
    return net;
  }

  bool all_finite() const {
    for (const auto& p : layers) {
      if (!p.W.allFinite() || !p.b.allFinite()) return false;
      if (p.gamma.size() && (!p.gamma.allFinite() || !p.beta.allFinite() ||
                             !p.run_mean.allFinite() || !p.run_var.allFinite()))
        return false;
    }
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : layers)
      n += static_cast<std::size_t>(p.W.size() + p.b.size() + p.gamma.size() + p.beta.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Losses

inline Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  if (v.size() == 0) throw ValidationError("softmax of empty vector");
  Eigen::ArrayXd e = (v.array() - v.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

inline double cross_entropy(const Eigen::VectorXd& probs, const Eigen::VectorXd& target) {
  if (probs.size() != target.size()) throw ValidationError("cross_entropy dimension mismatch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    if (target[i] != 0.0) loss -= target[i] * std::log(std::clamp(probs[i], kProbClamp, 1.0));
  return loss;
}

inline double lp_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target, int p) {
  if (pred.size() != target.size()) throw ValidationError("lp_loss dimension mismatch");
  if (p != 1 && p != 2) throw ValidationError("lp_loss supports p in {1, 2}");
  if (pred.size() == 0) throw ValidationError("lp_loss of empty vectors");
  Eigen::ArrayXd d = (pred - target).array().abs();
  double total = p == 1 ? d.sum() : (d * d).sum();
  return total / static_cast<double>(pred.size());
}

enum class LossKind : std::uint8_t { CrossEntropy = 0, Lp = 1 };

struct LossSpec {
  LossKind kind = LossKind::CrossEntropy;
  int p = 2;  // used when kind == Lp
};

// Batch losses are means: over samples for cross-entropy, over all entries
// for Lp. pred/target are (samples x n_out).
inline double loss_value(const LossSpec& loss, const Eigen::MatrixXd& pred,
                         const Eigen::MatrixXd& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ValidationError("loss dimension mismatch");
  if (pred.rows() == 0) throw ValidationError("loss over empty batch");
  if (loss.kind == LossKind::CrossEntropy) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
      total += cross_entropy(pred.row(i).transpose(), target.row(i).transpose());
    return total / static_cast<double>(pred.rows());
  }
  if (loss.p != 1 && loss.p != 2) throw ValidationError("lp_loss supports p in {1, 2}");
  Eigen::ArrayXXd d = (pred - target).array().abs();
  double total = loss.p == 1 ? d.sum() : (d * d).sum();
  return total / static_cast<double>(pred.size());
}

// Gradient of loss_value with respect to pred, same shape as pred.
inline Eigen::MatrixXd loss_gradient(const LossSpec& loss, const Eigen::MatrixXd& pred,
                                     const Eigen::MatrixXd& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ValidationError("loss dimension mismatch");
  if (pred.rows() == 0) throw ValidationError("loss over empty batch");
  Eigen::MatrixXd g(pred.rows(), pred.cols());
  if (loss.kind == LossKind::CrossEntropy) {
    double inv_m = 1.0 / static_cast<double>(pred.rows());
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
      for (Eigen::Index j = 0; j < pred.cols(); ++j) {
        double p = pred(i, j);
        g(i, j) = (target(i, j) != 0.0 && p >= kProbClamp && p <= 1.0)
                      ? -target(i, j) / p * inv_m
                      : 0.0;
      }
    return g;
  }
  double inv_n = 1.0 / static_cast<double>(pred.size());
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      double d = pred(i, j) - target(i, j);
      g(i, j) = loss.p == 1 ? (d > 0.0 ? inv_n : (d < 0.0 ? -inv_n : 0.0)) : 2.0 * d * inv_n;
    }
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { Train, Infer };

struct LayerCache {
  Eigen::MatrixXd x;        // layer input, features x m
  Eigen::MatrixXd zc;       // batch-centered linear output (batch-norm layers)
  Eigen::VectorXd inv_std;  // 1/sqrt(var + eps) per feature
  Eigen::MatrixXd xhat;     // normalized linear output
  Eigen::MatrixXd pre_act;  // activation input
  Eigen::MatrixXd mask;     // dropout multiplicative factors (empty if unused)
  Eigen::MatrixXd a;        // layer output
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

struct ForwardOptions {
  bool dropout = true;
  std::uint64_t seed = 0;
  // Test hook: per-layer multiplicative factor matrices overriding sampled
  // dropout masks (all-ones reproduces the inference path layer-wise).
  const std::vector<Eigen::MatrixXd>* forced_masks = nullptr;
};

namespace detail {

inline void apply_activation_inplace(Eigen::MatrixXd& m, Activation act, std::size_t layer) {
  switch (act) {
    case Activation::Linear: break;
    case Activation::Relu:
      m = m.cwiseMax(0.0);
      break;
    case Activation::Softmax:
      for (Eigen::Index c = 0; c < m.cols(); ++c) m.col(c) = softmax(m.col(c));
      break;
  }
  if (!m.allFinite())
    throw NumericError("non-finite activations in layer " + std::to_string(layer));
}

}  // namespace detail

// Batch layout at the API boundary is rows = samples; internal math runs on
// the transpose so each column is one sample.
inline Eigen::MatrixXd forward_train(NetworkParams& net, const Eigen::MatrixXd& batch,
                                     const ForwardOptions& opt, ForwardCache& cache) {
  if (static_cast<std::size_t>(batch.cols()) != net.n_in())
    throw ValidationError("batch width " + std::to_string(batch.cols()) + " != network n_in " +
                          std::to_string(net.n_in()));
  if (batch.rows() == 0) throw ValidationError("empty batch");
  const auto m = batch.rows();
  cache.layers.assign(net.specs.size(), {});
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Eigen::MatrixXd a = batch.transpose();
  for (std::size_t l = 0; l < net.specs.size(); ++l) {
    const auto& spec = net.specs[l];
    auto& par = net.layers[l];
    auto& c = cache.layers[l];
    c.x = a;
    Eigen::MatrixXd z = (par.W * a).colwise() + par.b;
    if (spec.batch_norm) {
      Eigen::VectorXd mu = z.rowwise().mean();
      c.zc = z.colwise() - mu;
      Eigen::VectorXd var = c.zc.array().square().rowwise().sum().matrix() /
                            static_cast<double>(m);
      c.inv_std = (var.array() + kBnEpsilon).rsqrt().matrix();
      c.xhat = c.zc.array().colwise() * c.inv_std.array();
      c.pre_act = (c.xhat.array().colwise() * par.gamma.array()).matrix().colwise() + par.beta;
      par.run_mean = kBnMomentum * par.run_mean + (1.0 - kBnMomentum) * mu;
      par.run_var = kBnMomentum * par.run_var + (1.0 - kBnMomentum) * var;
    } else {
      c.pre_act = std::move(z);
    }
    a = c.pre_act;
    detail::apply_activation_inplace(a, spec.activation, l);
    if (opt.forced_masks) {
      if (opt.forced_masks->size() != net.specs.size())
        throw ValidationError("forced_masks must provide one matrix per layer");
      c.mask = (*opt.forced_masks)[l];
      if (c.mask.rows() != a.rows() || c.mask.cols() != a.cols())
        throw ValidationError("forced mask shape mismatch at layer " + std::to_string(l));
      a = a.cwiseProduct(c.mask);
    } else if (opt.dropout && spec.dropout_rate > 0.0) {
      double keep = 1.0 - spec.dropout_rate;
      c.mask.resize(a.rows(), a.cols());
      for (Eigen::Index col = 0; col < a.cols(); ++col)
        for (Eigen::Index row = 0; row < a.rows(); ++row)
          c.mask(row, col) = unit(rng) < keep ? 1.0 / keep : 0.0;
      a = a.cwiseProduct(c.mask);
    }
    c.a = a;
  }
  return a.transpose();
}

inline Eigen::MatrixXd forward_infer(const NetworkParams& net, const Eigen::MatrixXd& batch) {
  if (static_cast<std::size_t>(batch.cols()) != net.n_in())
    throw ValidationError("batch width " + std::to_string(batch.cols()) + " != network n_in " +
                          std::to_string(net.n_in()));
  if (batch.rows() == 0) throw ValidationError("empty batch");
  Eigen::MatrixXd a = batch.transpose();
  for (std::size_t l = 0; l < net.specs.size(); ++l) {
    const auto& spec = net.specs[l];
    const auto& par = net.layers[l];
    Eigen::MatrixXd z = (par.W * a).colwise() + par.b;
    if (spec.batch_norm) {
      Eigen::ArrayXd inv_std = (par.run_var.array() + kBnEpsilon).rsqrt();
      z = ((z.colwise() - par.run_mean).array().colwise() * (par.gamma.array() * inv_std))
              .matrix()
              .colwise() +
          par.beta;
    }
    a = std::move(z);
    detail::apply_activation_inplace(a, spec.activation, l);
  }
  return a.transpose();
}

struct LayerGrads {
  Eigen::MatrixXd dW;
  Eigen::VectorXd db, dgamma, dbeta;
};

struct Gradients {
  std::vector<LayerGrads> layers;
};

inline Gradients backward(const NetworkParams& net, const ForwardCache& cache,
                          const Eigen::MatrixXd& output_gradient) {
  if (cache.layers.size() != net.specs.size())
    throw ValidationError("forward cache does not match network");
  if (static_cast<std::size_t>(output_gradient.cols()) != net.n_out() ||
      output_gradient.rows() != cache.layers.back().a.cols())
    throw ValidationError("output gradient shape mismatch");

  Gradients grads;
  grads.layers.resize(net.specs.size());
  Eigen::MatrixXd da = output_gradient.transpose();
  for (std::size_t l = net.specs.size(); l-- > 0;) {
    const auto& spec = net.specs[l];
    const auto& par = net.layers[l];
    const auto& c = cache.layers[l];
    auto& g = grads.layers[l];
    const double m = static_cast<double>(c.x.cols());

    if (c.mask.size()) da = da.cwiseProduct(c.mask);

    Eigen::MatrixXd dy;
    switch (spec.activation) {
      case Activation::Linear:
        dy = std::move(da);
        break;
      case Activation::Relu:
        dy = da.cwiseProduct((c.pre_act.array() > 0.0).cast<double>().matrix());
        break;
      case Activation::Softmax: {
        dy.resize(da.rows(), da.cols());
        for (Eigen::Index col = 0; col < da.cols(); ++col) {
          Eigen::VectorXd p = softmax(c.pre_act.col(col));
          double dot = p.dot(da.col(col));
          dy.col(col) = p.cwiseProduct(da.col(col).array().matrix() -
                                       Eigen::VectorXd::Constant(p.size(), dot));
        }
        break;
      }
    }

    Eigen::MatrixXd dz;
    if (spec.batch_norm) {
      g.dgamma = dy.cwiseProduct(c.xhat).rowwise().sum();
      g.dbeta = dy.rowwise().sum();
      Eigen::MatrixXd dxhat = dy.array().colwise() * par.gamma.array();
      Eigen::VectorXd dvar = (dxhat.cwiseProduct(c.zc).rowwise().sum().array() * -0.5 *
                              c.inv_std.array().cube())
                                 .matrix();
      Eigen::VectorXd dmu =
          (-(dxhat.rowwise().sum().array()) * c.inv_std.array()).matrix() +
          (dvar.array() * (-2.0 / m) * c.zc.rowwise().sum().array()).matrix();
      dz = (dxhat.array().colwise() * c.inv_std.array()).matrix() +
           (c.zc.array().colwise() * (dvar.array() * 2.0 / m)).matrix();
      dz.colwise() += (dmu / m).eval();
    } else {
      dz = std::move(dy);
    }

    g.dW = dz * c.x.transpose();
    if (spec.batch_norm) {
      // Batch centering cancels the bias exactly; beta plays its role. The
      // analytic gradient is identically zero, so pin it there instead of
      // accumulating cancellation residue.
      g.db = Eigen::VectorXd::Zero(dz.rows());
    } else {
      g.db = dz.rowwise().sum();
    }
    if (l > 0) da = par.W.transpose() * dz;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Optimization

struct TrainConfig {
  LossSpec loss;
  double learning_rate = 1e-4;
  std::size_t batch_size = 1000;
  std::size_t max_epochs = 500;
  std::size_t patience = 25;
  bool dropout = true;
  double rmsprop_decay = 0.9;
  double rmsprop_epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0.0) throw ValidationError("learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (!(rmsprop_decay > 0.0 && rmsprop_decay < 1.0))
      throw ValidationError("rmsprop_decay must lie in (0, 1)");
    if (rmsprop_epsilon <= 0.0) throw ValidationError("rmsprop_epsilon must be positive");
  }
};

struct RmsState {
  std::vector<LayerGrads> acc;

  static RmsState zeros_like(const NetworkParams& net) {
    RmsState s;
    s.acc.resize(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto& p = net.layers[l];
      s.acc[l].dW = Eigen::MatrixXd::Zero(p.W.rows(), p.W.cols());
      s.acc[l].db = Eigen::VectorXd::Zero(p.b.size());
      s.acc[l].dgamma = Eigen::VectorXd::Zero(p.gamma.size());
      s.acc[l].dbeta = Eigen::VectorXd::Zero(p.beta.size());
    }
    return s;
  }
};

namespace detail {

template <typename Fn>
void visit_coord(Eigen::MatrixXd& th, const Eigen::MatrixXd& g, Eigen::MatrixXd& e, Fn&& fn) {
  for (Eigen::Index i = 0; i < th.size(); ++i) fn(th.data()[i], g.data()[i], e.data()[i]);
}

template <typename Fn>
void visit_coord(Eigen::VectorXd& th, const Eigen::VectorXd& g, Eigen::VectorXd& e, Fn&& fn) {
  for (Eigen::Index i = 0; i < th.size(); ++i) fn(th.data()[i], g.data()[i], e.data()[i]);
}

}  // namespace detail

inline void rmsprop_step(NetworkParams& net, const Gradients& grads, RmsState& state,
                         const TrainConfig& cfg) {
  if (grads.layers.size() != net.layers.size() || state.acc.size() != net.layers.size())
    throw ValidationError("rmsprop shapes do not match network");
  const double rho = cfg.rmsprop_decay;
  const double eta = cfg.learning_rate;
  const double eps = cfg.rmsprop_epsilon;
  auto update = [&](double& th, double g, double& e) {
    e = rho * e + (1.0 - rho) * g * g;
    th -= eta * g / (std::sqrt(e) + eps);
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& p = net.layers[l];
    const auto& g = grads.layers[l];
    auto& e = state.acc[l];
    detail::visit_coord(p.W, g.dW, e.dW, update);
    detail::visit_coord(p.b, g.db, e.db, update);
    if (p.gamma.size()) {
      detail::visit_coord(p.gamma, g.dgamma, e.dgamma, update);
      detail::visit_coord(p.beta, g.dbeta, e.dbeta, update);
    }
  }
  if (!net.all_finite()) throw NumericError("non-finite parameters after rmsprop step");
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;  // 1-indexed
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  NetworkParams params;  // parameters from the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

// Test hook: observes (epoch, computed validation loss) and returns the value
// the early-stopping logic should see.
using ValHook = std::function<double(std::size_t, double)>;

inline TrainResult train(NetworkParams net, const Eigen::MatrixXd& x_train,
                         const Eigen::MatrixXd& y_train, const Eigen::MatrixXd& x_val,
                         const Eigen::MatrixXd& y_val, const TrainConfig& cfg,
                         const ValHook& val_hook = {}) {
  cfg.validate();
  if (x_train.rows() == 0 || x_val.rows() == 0)
    throw ValidationError("train and validation sets must be non-empty");
  if (x_train.rows() != y_train.rows() || x_val.rows() != y_val.rows())
    throw ValidationError("feature/target row counts disagree");
  if (static_cast<std::size_t>(x_train.cols()) != net.n_in() ||
      static_cast<std::size_t>(y_train.cols()) != net.n_out())
    throw ValidationError("train matrices do not match network shape");

  const std::size_t n = static_cast<std::size_t>(x_train.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  RmsState state = RmsState::zeros_like(net);
  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t stall = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 2 * epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    KahanSum loss_sum;
    std::size_t batch_index = 0;
    for (std::size_t offset = 0; offset < n; offset += cfg.batch_size, ++batch_index) {
      const std::size_t mb = std::min(cfg.batch_size, n - offset);
      Eigen::MatrixXd xb(mb, x_train.cols());
      Eigen::MatrixXd yb(mb, y_train.cols());
      for (std::size_t i = 0; i < mb; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = x_train.row(static_cast<Eigen::Index>(order[offset + i]));
        yb.row(static_cast<Eigen::Index>(i)) = y_train.row(static_cast<Eigen::Index>(order[offset + i]));
      }
      try {
        ForwardCache cache;
        ForwardOptions opt;
        opt.dropout = cfg.dropout;
        opt.seed = mix_seed(cfg.seed, 2 * (epoch * 1000003 + batch_index) + 1);
        Eigen::MatrixXd out = forward_train(net, xb, opt, cache);
        double batch_loss = loss_value(cfg.loss, out, yb);
        if (!std::isfinite(batch_loss)) throw NumericError("non-finite batch loss");
        loss_sum.add(batch_loss * static_cast<double>(mb));
        Gradients grads = backward(net, cache, loss_gradient(cfg.loss, out, yb));
        rmsprop_step(net, grads, state, cfg);
      } catch (const NumericError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index) + ": " + e.what());
      }
    }
    double train_loss = loss_sum.value() / static_cast<double>(n);

    double val_loss = loss_value(cfg.loss, forward_infer(net, x_val), y_val);
    if (val_hook) val_loss = val_hook(epoch, val_loss);
    if (!std::isfinite(val_loss))
      throw TrainingError("epoch " + std::to_string(epoch) + ": non-finite validation loss");
    result.history.push_back({epoch, train_loss, val_loss});

    if (best_val - val_loss >= kValImprovement) {
      best_val = val_loss;
      result.params = net;
      result.best_epoch = epoch;
      stall = 0;
    } else if (++stall == cfg.patience) {
      break;
    }
  }
  result.best_val_loss = best_val;
  return result;
}

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : history)
    os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_loss)
       << '\n';
}

// ---------------------------------------------------------------------------
// Gradient checking

// Dropout masks inside grad_check are sampled from this fixed seed so every
// finite-difference evaluation sees the same masked subnetwork.
inline constexpr std::uint64_t kGradCheckMaskSeed = 0x9e3779b97f4a7c15ull;

// Smallest |pre-activation| over all ReLU layers for the batch grad_check
// would see; infinity when the network has no ReLU layer. Used to certify a
// batch as kink-free before finite differencing.
inline double min_relu_margin(const NetworkParams& net, const Eigen::MatrixXd& batch) {
  NetworkParams work = net;
  ForwardCache cache;
  ForwardOptions opt;
  opt.seed = kGradCheckMaskSeed;
  forward_train(work, batch, opt, cache);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < net.specs.size(); ++l)
    if (net.specs[l].activation == Activation::Relu)
      margin = std::min(margin, cache.layers[l].pre_act.cwiseAbs().minCoeff());
  return margin;
}

// Central finite differences against backward; fault_factor scales the
// largest-magnitude analytic gradient entry (a deliberate-corruption hook).
inline double grad_check(const NetworkParams& net, const Eigen::MatrixXd& batch,
                         const Eigen::MatrixXd& target, const LossSpec& loss, double h = 1e-5,
                         double fault_factor = 1.0) {
  if (net.parameter_count() > 10000)
    throw ValidationError("grad_check is limited to nets with <= 1e4 parameters");

  NetworkParams work = net;
  ForwardCache cache;
  ForwardOptions opt;
  opt.seed = kGradCheckMaskSeed;
  Eigen::MatrixXd out = forward_train(work, batch, opt, cache);
  Gradients grads = backward(work, cache, loss_gradient(loss, out, target));

  if (fault_factor != 1.0) {
    double* worst = nullptr;
    double worst_mag = -1.0;
    for (auto& g : grads.layers)
      for (auto* m : {&g.dW}) {
        for (Eigen::Index i = 0; i < m->size(); ++i)
          if (std::abs(m->data()[i]) > worst_mag) {
            worst_mag = std::abs(m->data()[i]);
            worst = &m->data()[i];
          }
      }
    if (worst) *worst *= fault_factor;
  }

  auto eval_loss = [&](NetworkParams& candidate) {
    ForwardCache c;
    ForwardOptions o;
    o.seed = kGradCheckMaskSeed;
    return loss_value(loss, forward_train(candidate, batch, o, c), target);
  };

  auto probe = [&](double& slot, double analytic, double& max_err) {
    double saved = slot;
    slot = saved + h;
    double up = eval_loss(work);
    slot = saved - h;
    double down = eval_loss(work);
    slot = saved;
    double numeric = (up - down) / (2.0 * h);
    double err = std::abs(analytic - numeric) /
                 std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_err = std::max(max_err, err);
  };

  double max_err = 0.0;
  for (std::size_t l = 0; l < work.layers.size(); ++l) {
    auto& p = work.layers[l];
    auto& g = grads.layers[l];
    for (Eigen::Index i = 0; i < p.W.size(); ++i) probe(p.W.data()[i], g.dW.data()[i], max_err);
    // Biases under batch norm carry no loss influence at all; the numeric
    // side would be pure rounding noise, so they are excluded.
    if (!work.specs[l].batch_norm)
      for (Eigen::Index i = 0; i < p.b.size(); ++i) probe(p.b.data()[i], g.db.data()[i], max_err);
    for (Eigen::Index i = 0; i < p.gamma.size(); ++i)
      probe(p.gamma.data()[i], g.dgamma.data()[i], max_err);
    for (Eigen::Index i = 0; i < p.beta.size(); ++i)
      probe(p.beta.data()[i], g.dbeta.data()[i], max_err);
  }
  return max_err;
}

// ---------------------------------------------------------------------------
// Input standardization and model serialization

struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Standardizer fit(const Eigen::MatrixXd& x) {
    if (x.rows() == 0) throw ValidationError("cannot fit standardizer to empty matrix");
    Standardizer s;
    s.mean = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
    s.std = (centered.array().square().colwise().sum() / static_cast<double>(x.rows()))
                .sqrt()
                .matrix();
    for (Eigen::Index i = 0; i < s.std.size(); ++i)
      if (s.std[i] == 0.0) s.std[i] = 1.0;
    return s;
  }

  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const {
    if (x.cols() != mean.size()) throw ValidationError("standardizer dimension mismatch");
    return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
  }
};

struct TrainedModel {
  NetworkParams params;
  Standardizer input;

  Eigen::MatrixXd infer(const Eigen::MatrixXd& raw_features) const {
    return forward_infer(params, input.transform(raw_features));
  }
};

inline constexpr char kModelMagic[5] = {'D', 'I', 'E', 'G', 'N'};
inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace detail {

inline void write_vec(std::ostream& os, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) write_le(os, v[i]);
}

inline void read_vec(std::istream& is, Eigen::VectorXd& v, Eigen::Index n) {
  v.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = read_le<double>(is);
}

}  // namespace detail

inline void save_model(const TrainedModel& model, std::ostream& os) {
  os.write(kModelMagic, sizeof(kModelMagic));
  write_le(os, kModelFormatVersion);
  write_le(os, static_cast<std::uint32_t>(model.params.specs.size()));
  for (const auto& s : model.params.specs) {
    write_le(os, static_cast<std::uint64_t>(s.n_in));
    write_le(os, static_cast<std::uint64_t>(s.n_out));
    write_le(os, static_cast<std::uint8_t>(s.activation));
    write_le(os, static_cast<std::uint8_t>(s.batch_norm ? 1 : 0));
    write_le(os, s.dropout_rate);
  }
  write_le(os, static_cast<std::uint64_t>(model.input.mean.size()));
  detail::write_vec(os, model.input.mean);
  detail::write_vec(os, model.input.std);
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    const auto& p = model.params.layers[l];
    for (Eigen::Index r = 0; r < p.W.rows(); ++r)
      for (Eigen::Index c = 0; c < p.W.cols(); ++c) write_le(os, p.W(r, c));
    detail::write_vec(os, p.b);
    if (model.params.specs[l].batch_norm) {
      detail::write_vec(os, p.gamma);
      detail::write_vec(os, p.beta);
      detail::write_vec(os, p.run_mean);
      detail::write_vec(os, p.run_var);
    }
  }
  if (!os) throw IoError("model write failed");
}

inline TrainedModel load_model(std::istream& is) {
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 5, kModelMagic))
    throw ParseError("bad model magic");
  auto version = read_le<std::uint16_t>(is);
  if (version != kModelFormatVersion)
    throw ParseError("unsupported model version " + std::to_string(version));
  auto n_layers = read_le<std::uint32_t>(is);
  if (n_layers == 0 || n_layers > 1000) throw ParseError("implausible layer count");

  TrainedModel model;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    LayerSpec s;
    s.n_in = static_cast<std::size_t>(read_le<std::uint64_t>(is));
    s.n_out = static_cast<std::size_t>(read_le<std::uint64_t>(is));
    auto act = read_le<std::uint8_t>(is);
    if (act > 2) throw ParseError("bad activation code " + std::to_string(act));
    s.activation = static_cast<Activation>(act);
    s.batch_norm = read_le<std::uint8_t>(is) != 0;
    s.dropout_rate = read_le<double>(is);
    model.params.specs.push_back(s);
  }
  validate_specs(model.params.specs);

  auto dim = static_cast<Eigen::Index>(read_le<std::uint64_t>(is));
  detail::read_vec(is, model.input.mean, dim);
  detail::read_vec(is, model.input.std, dim);

  for (const auto& s : model.params.specs) {
    LayerParams p;
    p.W.resize(static_cast<Eigen::Index>(s.n_out), static_cast<Eigen::Index>(s.n_in));
    for (Eigen::Index r = 0; r < p.W.rows(); ++r)
      for (Eigen::Index c = 0; c < p.W.cols(); ++c) p.W(r, c) = read_le<double>(is);
    detail::read_vec(is, p.b, static_cast<Eigen::Index>(s.n_out));
    if (s.batch_norm) {
      detail::read_vec(is, p.gamma, static_cast<Eigen::Index>(s.n_out));
      detail::read_vec(is, p.beta, static_cast<Eigen::Index>(s.n_out));
      detail::read_vec(is, p.run_mean, static_cast<Eigen::Index>(s.n_out));
      detail::read_vec(is, p.run_var, static_cast<Eigen::Index>(s.n_out));
    }
    model.params.layers.push_back(std::move(p));
  }
  if (!model.params.all_finite()) throw ParseError("model contains non-finite parameters");
  return model;
}

}  // namespace diego
