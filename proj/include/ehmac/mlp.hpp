#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehmac/datagen.hpp"
#include "ehmac/rng.hpp"

namespace ehmac {

/// Layer widths N_1..N_{h+2} of the imitation network. The construction rule
/// pairs a width-reducing step with a width-keeping step: 3K inputs, first
/// hidden layer 30K, then plateaus of two equal layers stepping down by 2K
/// until 2K, and a K-wide linear output head.
struct MlpArchitecture {
  std::vector<int> sizes;
  int hidden_count = 0;
  double leaky_slope = 0.01;

  int inputs() const { return sizes.front(); }
  int outputs() const { return sizes.back(); }
  int layers() const { return static_cast<int>(sizes.size()); }
};

inline MlpArchitecture build_architecture(int k, int h = 30) {
  if (k < 1) throw std::invalid_argument("build_architecture: k must be >= 1");
  if (h < 1 || h > 30)
    throw std::invalid_argument("build_architecture: hidden count must be in [1, 30]");
  MlpArchitecture arch;
  arch.hidden_count = h;
  arch.sizes.reserve(h + 2);
  arch.sizes.push_back(3 * k);
  // Full progression: 30K, 30K, 28K, 28K, ..., 2K, 2K. A reduced h keeps the
  // first h entries of the same progression.
  int width = 30 * k;
  for (int j = 0; j < h; ++j) {
    arch.sizes.push_back(width);
    if (j % 2 == 1) width -= 2 * k;
  }
  arch.sizes.push_back(k);
  return arch;
}

/// Weights and biases in layer order: weights[j] maps activations of layer
/// j to layer j+1 (0-based), shape sizes[j+1] x sizes[j].
struct MlpParameters {
  MlpArchitecture arch;
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

/// Fan-in variance-scaled Gaussian init for leaky rectifiers, zero biases.
inline MlpParameters initialize_parameters(const MlpArchitecture& arch, Rng& rng) {
  MlpParameters params;
  params.arch = arch;
  const double slope_sq = arch.leaky_slope * arch.leaky_slope;
  for (int j = 0; j + 1 < arch.layers(); ++j) {
    const int fan_in = arch.sizes[j], rows = arch.sizes[j + 1];
    const double std_dev = std::sqrt(2.0 / ((1.0 + slope_sq) * fan_in));
    Eigen::MatrixXd w(rows, fan_in);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < fan_in; ++c) w(r, c) = std_dev * rng.gaussian();
    params.weights.push_back(std::move(w));
    params.biases.push_back(Eigen::VectorXd::Zero(rows));
  }
  return params;
}

namespace detail {

inline void check_shapes(const MlpParameters& params) {
  const auto& arch = params.arch;
  if (static_cast<int>(params.weights.size()) != arch.layers() - 1 ||
      params.biases.size() != params.weights.size())
    throw std::invalid_argument("mlp: parameter count disagrees with architecture");
  for (int j = 0; j + 1 < arch.layers(); ++j)
    if (params.weights[j].rows() != arch.sizes[j + 1] ||
        params.weights[j].cols() != arch.sizes[j] ||
        params.biases[j].size() != arch.sizes[j + 1])
      throw std::invalid_argument("mlp: layer " + std::to_string(j + 2) + " shape mismatch");
}

inline Eigen::MatrixXd leaky(const Eigen::MatrixXd& z, double slope) {
  return z.cwiseMax(0.0) + slope * z.cwiseMin(0.0);
}

}  // namespace detail

inline Eigen::VectorXd forward(const MlpParameters& params, const Eigen::VectorXd& input) {
  detail::check_shapes(params);
  if (input.size() != params.arch.inputs())
    throw std::invalid_argument("forward: input length mismatch");
  Eigen::VectorXd a = input;
  for (std::size_t j = 0; j < params.weights.size(); ++j) {
    Eigen::VectorXd z = params.weights[j] * a + params.biases[j];
    if (!z.allFinite())
      throw std::runtime_error("forward: non-finite activation at layer " +
                               std::to_string(j + 2));
    if (j + 1 < params.weights.size())
      a = detail::leaky(z, params.arch.leaky_slope);
    else
      a = std::move(z);
  }
  return a;
}

/// Reference forward pass with explicit loops and a multiplication counter.
/// Used to pin the compute-cost model: the count must equal sum N_j N_{j-1}.
inline Eigen::VectorXd forward_instrumented(const MlpParameters& params,
                                            const Eigen::VectorXd& input,
                                            long long& multiplications) {
  detail::check_shapes(params);
  if (input.size() != params.arch.inputs())
    throw std::invalid_argument("forward: input length mismatch");
  multiplications = 0;
  std::vector<double> a(input.data(), input.data() + input.size());
  for (std::size_t j = 0; j < params.weights.size(); ++j) {
    const auto& w = params.weights[j];
    std::vector<double> next(static_cast<std::size_t>(w.rows()));
    for (int r = 0; r < w.rows(); ++r) {
      double acc = params.biases[j](r);
      for (int c = 0; c < w.cols(); ++c) {
        acc += w(r, c) * a[static_cast<std::size_t>(c)];
        ++multiplications;
      }
      const bool last = j + 1 == params.weights.size();
      next[static_cast<std::size_t>(r)] =
          last || acc >= 0.0 ? acc : params.arch.leaky_slope * acc;
    }
    a = std::move(next);
  }
  return Eigen::Map<Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
}

/// Column-per-sample batch.
struct Batch {
  Eigen::MatrixXd x;  // inputs,  dim x B
  Eigen::MatrixXd y;  // labels,  K x B
};

inline Batch make_batch(const std::vector<DataPoint>& points, const std::vector<int>& idx,
                        int begin, int end) {
  if (begin < 0 || end > static_cast<int>(idx.size()) || begin >= end)
    throw std::invalid_argument("make_batch: bad range");
  Batch b;
  const int dim = static_cast<int>(points[idx[begin]].features.size());
  const int k = static_cast<int>(points[idx[begin]].label.size());
  b.x.resize(dim, end - begin);
  b.y.resize(k, end - begin);
  for (int i = begin; i < end; ++i) {
    b.x.col(i - begin) = points[idx[i]].features;
    b.y.col(i - begin) = points[idx[i]].label;
  }
  return b;
}

inline Batch make_batch(const std::vector<DataPoint>& points) {
  std::vector<int> idx(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) idx[i] = static_cast<int>(i);
  return make_batch(points, idx, 0, static_cast<int>(points.size()));
}

/// Mean over the batch of the squared Euclidean distance between network
/// output and label.
inline double loss(const Batch& batch, const MlpParameters& params) {
  detail::check_shapes(params);
  if (batch.x.cols() == 0) throw std::invalid_argument("loss: empty batch");
  if (batch.x.rows() != params.arch.inputs() || batch.y.rows() != params.arch.outputs() ||
      batch.x.cols() != batch.y.cols())
    throw std::invalid_argument("loss: batch shape mismatch");
  Eigen::MatrixXd a = batch.x;
  for (std::size_t j = 0; j < params.weights.size(); ++j) {
    Eigen::MatrixXd z = (params.weights[j] * a).colwise() + params.biases[j];
    a = j + 1 < params.weights.size() ? detail::leaky(z, params.arch.leaky_slope).eval()
                                      : std::move(z);
  }
  return (a - batch.y).squaredNorm() / static_cast<double>(batch.x.cols());
}

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  double loss = 0.0;

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }
};

/// Exact reverse-mode gradient of `loss` with respect to every weight and
/// bias, batched as one GEMM chain.
inline Gradients loss_gradient(const Batch& batch, const MlpParameters& params) {
  detail::check_shapes(params);
  if (batch.x.cols() == 0) throw std::invalid_argument("loss_gradient: empty batch");
  if (batch.x.rows() != params.arch.inputs() || batch.y.rows() != params.arch.outputs() ||
      batch.x.cols() != batch.y.cols())
    throw std::invalid_argument("loss_gradient: batch shape mismatch");
  const int n_layers = static_cast<int>(params.weights.size());
  const double b_count = static_cast<double>(batch.x.cols());

  std::vector<Eigen::MatrixXd> activations(n_layers + 1);
  std::vector<Eigen::MatrixXd> pre(n_layers);
  activations[0] = batch.x;
  for (int j = 0; j < n_layers; ++j) {
    pre[j] = (params.weights[j] * activations[j]).colwise() + params.biases[j];
    activations[j + 1] =
        j + 1 < n_layers ? detail::leaky(pre[j], params.arch.leaky_slope) : pre[j];
  }

  Gradients g;
  g.weights.resize(n_layers);
  g.biases.resize(n_layers);
  const Eigen::MatrixXd diff = activations[n_layers] - batch.y;
  g.loss = diff.squaredNorm() / b_count;

  Eigen::MatrixXd delta = 2.0 / b_count * diff;
  for (int j = n_layers - 1; j >= 0; --j) {
    if (j < n_layers - 1) {
      // Derivative of Leaky ReLU evaluated on the stored pre-activations.
      const double slope = params.arch.leaky_slope;
      delta = delta.cwiseProduct(
          (pre[j].array() >= 0.0).select(Eigen::MatrixXd::Ones(delta.rows(), delta.cols()),
                                         Eigen::MatrixXd::Constant(delta.rows(), delta.cols(),
                                                                   slope)));
    }
    g.weights[j].noalias() = delta * activations[j].transpose();
    g.biases[j] = delta.rowwise().sum();
    if (j > 0) delta = (params.weights[j].transpose() * delta).eval();
  }
  return g;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 256;
  int epochs = 200;
  std::string optimizer = "adam";
  int patience = 20;         // early-stop patience in epochs
  double grad_clip = 5.0;    // global gradient norm threshold
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("train: grad clip must be > 0");
    if (optimizer != "adam" && optimizer != "sgd")
      throw std::invalid_argument("train: unknown optimizer '" + optimizer + "'");
  }
};

struct TrainResult {
  MlpParameters params;            // best-validation snapshot
  std::vector<double> train_curve; // running mean of batch losses per epoch
  std::vector<double> val_curve;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Minibatch training with the adaptive-moment optimizer (or plain SGD),
/// global gradient clipping, per-epoch reshuffling, early stopping on
/// validation loss, and best-checkpoint return. Single-threaded and
/// deterministic under a fixed seed.
///
/// On divergence the throw abandons the parameters, but if `progress` is
/// given the curves up to and including the failing epoch are copied there
/// first so callers can persist the diagnostics.
inline TrainResult train(const Dataset& train_set, const Dataset& val_set,
                         const MlpArchitecture& arch, const TrainConfig& tc,
                         TrainResult* progress = nullptr) {
  tc.validate();
  if (train_set.points.empty() || val_set.points.empty())
    throw std::invalid_argument("train: empty split");
  if (static_cast<int>(train_set.points.front().features.size()) != arch.inputs())
    throw std::invalid_argument("train: dataset width disagrees with architecture");

  Rng init_rng = Rng::substream(tc.seed, "init");
  TrainResult result;
  MlpParameters params = initialize_parameters(arch, init_rng);

  // Adam state, laid out like the parameters.
  std::vector<Eigen::MatrixXd> mw, vw;
  std::vector<Eigen::VectorXd> mb, vb;
  for (const auto& w : params.weights) {
    mw.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    vw.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  }
  for (const auto& b : params.biases) {
    mb.push_back(Eigen::VectorXd::Zero(b.size()));
    vb.push_back(Eigen::VectorXd::Zero(b.size()));
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long step = 0;

  const Batch val_batch = make_batch(val_set.points);
  const int count = static_cast<int>(train_set.points.size());
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;

  int since_best = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng = Rng::substream(tc.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    for (int i = count - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<int>(shuffle_rng.below(
                              static_cast<std::uint64_t>(i) + 1))]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (int begin = 0; begin < count; begin += tc.batch_size) {
      const int end = std::min(begin + tc.batch_size, count);
      const Batch batch = make_batch(train_set.points, order, begin, end);
      Gradients g = loss_gradient(batch, params);
      epoch_loss += g.loss;
      ++batches;

      const double norm = std::sqrt(g.squared_norm());
      if (norm > tc.grad_clip) {
        const double scale = tc.grad_clip / norm;
        for (auto& w : g.weights) w *= scale;
        for (auto& b : g.biases) b *= scale;
      }

      ++step;
      if (tc.optimizer == "adam") {
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t j = 0; j < params.weights.size(); ++j) {
          mw[j] = beta1 * mw[j] + (1.0 - beta1) * g.weights[j];
          vw[j] = beta2 * vw[j] + (1.0 - beta2) * g.weights[j].cwiseAbs2();
          params.weights[j] -=
              tc.learning_rate *
              (mw[j] / c1).cwiseQuotient(((vw[j] / c2).cwiseSqrt().array() + eps).matrix());
          mb[j] = beta1 * mb[j] + (1.0 - beta1) * g.biases[j];
          vb[j] = beta2 * vb[j] + (1.0 - beta2) * g.biases[j].cwiseAbs2();
          params.biases[j] -=
              tc.learning_rate *
              (mb[j] / c1).cwiseQuotient(((vb[j] / c2).cwiseSqrt().array() + eps).matrix());
        }
      } else {
        for (std::size_t j = 0; j < params.weights.size(); ++j) {
          params.weights[j] -= tc.learning_rate * g.weights[j];
          params.biases[j] -= tc.learning_rate * g.biases[j];
        }
      }
    }

    const double val_loss = loss(val_batch, params);
    result.train_curve.push_back(epoch_loss / batches);
    result.val_curve.push_back(val_loss);
    if (!std::isfinite(val_loss)) {
      if (progress) *progress = result;
      throw std::runtime_error("train: diverged at epoch " + std::to_string(epoch) +
                               " (validation loss not finite)");
    }

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.params = params;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
  }
  return result;
}

/// Central finite-difference check of loss_gradient on one batch. Returns
/// the max relative error over every parameter. Meaningful only when no
/// pre-activation sits within `kink_tol` of the Leaky-ReLU kink; callers
/// should draw fresh randomness if min_pre_activation says otherwise.
inline double gradient_check(const MlpParameters& params, const Batch& batch,
                             double h = 1e-6) {
  MlpParameters probe = params;
  const Gradients g = loss_gradient(batch, params);
  double worst = 0.0;
  const auto update_worst = [&worst](double analytic, double numeric) {
    const double rel = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1.0});
    worst = std::max(worst, rel);
  };
  for (std::size_t j = 0; j < params.weights.size(); ++j) {
    for (int r = 0; r < params.weights[j].rows(); ++r)
      for (int c = 0; c < params.weights[j].cols(); ++c) {
        const double save = probe.weights[j](r, c);
        probe.weights[j](r, c) = save + h;
        const double up = loss(batch, probe);
        probe.weights[j](r, c) = save - h;
        const double down = loss(batch, probe);
        probe.weights[j](r, c) = save;
        update_worst(g.weights[j](r, c), (up - down) / (2.0 * h));
      }
    for (int r = 0; r < params.biases[j].size(); ++r) {
      const double save = probe.biases[j](r);
      probe.biases[j](r) = save + h;
      const double up = loss(batch, probe);
      probe.biases[j](r) = save - h;
      const double down = loss(batch, probe);
      probe.biases[j](r) = save;
      update_worst(g.biases[j](r), (up - down) / (2.0 * h));
    }
  }
  return worst;
}

/// Smallest |pre-activation| over all hidden layers and batch columns;
/// guards gradient checks against kink crossings.
inline double min_pre_activation(const MlpParameters& params, const Batch& batch) {
  double lowest = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd a = batch.x;
  for (std::size_t j = 0; j + 1 < params.weights.size(); ++j) {
    Eigen::MatrixXd z = (params.weights[j] * a).colwise() + params.biases[j];
    lowest = std::min(lowest, z.cwiseAbs().minCoeff());
    a = detail::leaky(z, params.arch.leaky_slope);
  }
  return lowest;
}

}  // namespace ehmac
