// SPDX-License-Identifier: Apache-2.0
//
// Toy noise predictor, guidance classifier, embedding and score heads, and
// their trainers. All models are immutable values once trained; forward and
// VJP evaluation are pure.
#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "doodl/mlp.hpp"
#include "doodl/numerics.hpp"
#include "doodl/schedule.hpp"

namespace doodl {

/// Points stored row-wise in a [n, dim] tensor with one integer label each.
struct Dataset {
  Tensor points;
  std::vector<int> labels;
  int n_classes = 1;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return points.rank() == 2 ? points.shape()[1] : 0; }
  Tensor point(std::size_t i) const {
    const std::size_t d = dim();
    const auto first = points.values().begin() + static_cast<std::ptrdiff_t>(i * d);
    return Tensor::vec(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(d)));
  }
};

/// Sinusoidal step features: sines then cosines at frequencies geometric from 1 to 1/1000.
inline Tensor time_embed(int t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw InvalidArgument("time_embed: dim must be positive and even");
  const std::size_t half = dim / 2;
  Tensor out({dim});
  for (std::size_t k = 0; k < half; ++k) {
    const double omega = half == 1 ? 1.0 : std::pow(1000.0, -static_cast<double>(k) / static_cast<double>(half - 1));
    out[k] = std::sin(omega * t);
    out[half + k] = std::cos(omega * t);
  }
  return out;
}

/// One-hot class vector, or zeros for the unconditional case.
struct Conditioning {
  Tensor values;

  static Conditioning none(std::size_t dim) { return {Tensor({dim})}; }
  static Conditioning one_hot(int cls, std::size_t dim) {
    if (cls < 0 || static_cast<std::size_t>(cls) >= dim) throw InvalidArgument("conditioning class out of range");
    Conditioning c = none(dim);
    c.values[static_cast<std::size_t>(cls)] = 1.0;
    return c;
  }
  std::size_t dim() const { return values.size(); }
};

struct DenoiserArch {
  std::size_t data_dim = 2;
  std::size_t hidden = 128;
  std::size_t depth = 3;
  std::size_t time_embed_dim = 16;
  std::size_t cond_dim = 0;
};

/// ε-predictor Θ(x, t, C): an MLP over [x, time_embed(t), C].
class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(DenoiserArch arch, Mlp net) : arch_(arch), net_(std::move(net)) {
    if (net_.input_dim() != arch_.data_dim + arch_.time_embed_dim + arch_.cond_dim ||
        net_.output_dim() != arch_.data_dim)
      throw InvalidArgument("denoiser network widths do not match its architecture");
  }

  static std::vector<std::size_t> widths(const DenoiserArch& a) {
    std::vector<std::size_t> w{a.data_dim + a.time_embed_dim + a.cond_dim};
    for (std::size_t i = 0; i < a.depth; ++i) w.push_back(a.hidden);
    w.push_back(a.data_dim);
    return w;
  }
  static DenoiserModel zeros(const DenoiserArch& a) { return {a, Mlp(widths(a))}; }
  static DenoiserModel random(const DenoiserArch& a, Rng& rng, double out_scale = 1.0) {
    return {a, Mlp::random(widths(a), rng, out_scale)};
  }

  const DenoiserArch& arch() const { return arch_; }
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  std::size_t data_dim() const { return arch_.data_dim; }

  std::vector<double> features(const Tensor& x, int t, const Conditioning& c) const {
    if (x.size() != arch_.data_dim)
      throw InvalidArgument("denoiser input has " + std::to_string(x.size()) + " elements, expected " +
                            std::to_string(arch_.data_dim));
    if (c.dim() != arch_.cond_dim) throw InvalidArgument("conditioning dimension mismatch");
    std::vector<double> in(x.values().begin(), x.values().end());
    const Tensor te = time_embed(t, arch_.time_embed_dim);
    in.insert(in.end(), te.values().begin(), te.values().end());
    in.insert(in.end(), c.values.values().begin(), c.values.values().end());
    return in;
  }

 private:
  DenoiserArch arch_;
  Mlp net_;
};

inline Tensor denoiser_forward(const DenoiserModel& m, const Tensor& x, int t, const Conditioning& c) {
  Tensor out(x.shape(), m.net().forward(m.features(x, t, c)));
  detail::check_finite(out, "denoiser_forward");
  return out;
}

inline Tensor denoiser_vjp(const DenoiserModel& m, const Tensor& x, int t, const Conditioning& c,
                           const Tensor& cotangent) {
  if (cotangent.shape() != x.shape()) throw InvalidArgument("denoiser_vjp: cotangent shape must match input");
  std::vector<double> g = m.net().input_vjp(m.features(x, t, c), cotangent.values());
  g.resize(m.data_dim());
  return Tensor(x.shape(), std::move(g));
}

/// Logit classifier Φ over data space.
class ClassifierModel {
 public:
  ClassifierModel() = default;
  explicit ClassifierModel(Mlp net) : net_(std::move(net)) {}

  static std::vector<std::size_t> widths(std::size_t data_dim, std::size_t n_classes, std::size_t hidden,
                                         std::size_t depth) {
    std::vector<std::size_t> w{data_dim};
    for (std::size_t i = 0; i < depth; ++i) w.push_back(hidden);
    w.push_back(n_classes);
    return w;
  }

  std::size_t data_dim() const { return net_.input_dim(); }
  std::size_t n_classes() const { return net_.output_dim(); }
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

 private:
  Mlp net_;
};

inline Tensor classifier_forward(const ClassifierModel& m, const Tensor& x) {
  if (x.size() != m.data_dim()) throw InvalidArgument("classifier input dimension mismatch");
  return Tensor::vec(m.net().forward(x.values()));
}

inline Tensor softmax(const Tensor& logits) {
  double mx = logits[0];
  for (double v : logits.values()) mx = std::max(mx, v);
  Tensor p = logits;
  double s = 0.0;
  for (double& v : p.values()) s += (v = std::exp(v - mx));
  for (double& v : p.values()) v /= s;
  return p;
}

/// ∂loss/∂x for any scalar loss on the classifier's logits. `logit_loss`
/// returns the loss gradient w.r.t. the logits.
template <class LogitLossGrad>
Tensor classifier_input_grad(const ClassifierModel& m, const Tensor& x, LogitLossGrad&& logit_loss) {
  const Tensor logits = classifier_forward(m, x);
  const Tensor g_logits = logit_loss(logits);
  if (g_logits.size() != m.n_classes()) throw InvalidArgument("loss class count does not match classifier outputs");
  return Tensor(x.shape(), m.net().input_vjp(x.values(), g_logits.values()));
}

/// Unit-norm embedding head: normalize(MLP(x)).
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  explicit EmbeddingModel(Mlp net) : net_(std::move(net)) {}

  std::size_t data_dim() const { return net_.input_dim(); }
  std::size_t embed_dim() const { return net_.output_dim(); }
  const Mlp& net() const { return net_; }

  Tensor embed(const Tensor& x) const {
    if (x.size() != data_dim()) throw InvalidArgument("embedding input dimension mismatch");
    Tensor v = Tensor::vec(net_.forward(x.values()));
    const double n = l2_norm(v);
    if (!(n > 0.0)) throw DegenerateInput("embedding pre-normalization vector is zero");
    return v * (1.0 / n);
  }

  /// cotangentᵀ · ∂embed/∂x, with the projection (I − uuᵀ)/‖v‖ of the normalization.
  Tensor embed_vjp(const Tensor& x, const Tensor& cotangent) const {
    Tensor v = Tensor::vec(net_.forward(x.values()));
    const double n = l2_norm(v);
    if (!(n > 0.0)) throw DegenerateInput("embedding pre-normalization vector is zero");
    const Tensor u = v * (1.0 / n);
    const Tensor gv = (cotangent - dot(u, cotangent) * u) * (1.0 / n);
    return Tensor(x.shape(), net_.input_vjp(x.values(), gv.values()));
  }

 private:
  Mlp net_;
};

/// Scalar score head a(x) (toy aesthetic predictor).
class ScoreModel {
 public:
  ScoreModel() = default;
  explicit ScoreModel(Mlp net) : net_(std::move(net)) {
    if (net_.output_dim() != 1) throw InvalidArgument("score head must have a single output");
  }

  /// a(x) = w·x + b.
  static ScoreModel linear(const Tensor& w, double b) {
    Mlp net({w.size(), 1});
    net.weights()[0] = Tensor({1, w.size()}, std::vector<double>(w.values().begin(), w.values().end()));
    net.biases()[0] = Tensor::vec({b});
    return ScoreModel(std::move(net));
  }

  std::size_t data_dim() const { return net_.input_dim(); }
  const Mlp& net() const { return net_; }

  double score(const Tensor& x) const {
    if (x.size() != data_dim()) throw InvalidArgument("score head input dimension mismatch");
    return net_.forward(x.values())[0];
  }
  Tensor score_grad(const Tensor& x) const {
    const double one = 1.0;
    return Tensor(x.shape(), net_.input_vjp(x.values(), std::span<const double>(&one, 1)));
  }

 private:
  Mlp net_;
};

struct TrainConfig {
  int steps = 20000;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  /// Probability of replacing the class condition by zeros (conditional models only).
  double cond_dropout = 0.0;
  /// Decay of the exponential moving average of the weights; 0 returns the raw iterate.
  double ema_decay = 0.0;
};

/// avg <- decay·avg + (1−decay)·model, per parameter.
inline void ema_update(Mlp& avg, const Mlp& model, double decay) {
  for (std::size_t l = 0; l < avg.num_layers(); ++l) {
    auto blend = [decay](Tensor& a, const Tensor& m) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = decay * a[i] + (1.0 - decay) * m[i];
    };
    blend(avg.weights()[l], model.weights()[l]);
    blend(avg.biases()[l], model.biases()[l]);
  }
}

struct TrainedDenoiser {
  DenoiserModel model;
  std::vector<double> loss_trace;
};

/// Minimises E‖Θ(√ᾱ_t x + √(1−ᾱ_t) ε, t, C) − ε‖² with t uniform on 1..S.
inline TrainedDenoiser train_denoiser(const Dataset& data, const NoiseSchedule& sched, DenoiserModel init,
                                      const TrainConfig& cfg, Rng& rng) {
  if (data.size() == 0) throw InvalidArgument("train_denoiser: empty dataset");
  const DenoiserArch& arch = init.arch();
  if (data.dim() != arch.data_dim) throw InvalidArgument("train_denoiser: dataset dimension mismatch");
  if (arch.cond_dim != 0 && arch.cond_dim != static_cast<std::size_t>(data.n_classes))
    throw InvalidArgument("train_denoiser: cond_dim must be 0 or the class count");

  TrainedDenoiser out{std::move(init), {}};
  Mlp& net = out.model.net();
  Mlp averaged = net;
  MomentumSgd opt(net, cfg.lr, cfg.momentum);
  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  const auto d = static_cast<Eigen::Index>(arch.data_dim);
  const auto te_dim = static_cast<Eigen::Index>(arch.time_embed_dim);
  const int S = sched.num_steps();

  // Embeddings are reused across steps.
  std::vector<Tensor> embeds;
  for (int t = 0; t <= S; ++t) embeds.push_back(time_embed(t, arch.time_embed_dim));

  Eigen::MatrixXd input(static_cast<Eigen::Index>(net.input_dim()), B);
  Eigen::MatrixXd target(d, B);
  out.loss_trace.reserve(static_cast<std::size_t>(std::max(cfg.steps, 0)));
  for (int step = 0; step < cfg.steps; ++step) {
    input.setZero();
    for (Eigen::Index j = 0; j < B; ++j) {
      const std::size_t idx = rng.below(data.size());
      const int t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(S)));
      const double ab = sched.alpha_bar(t);
      const Tensor eps = gaussian_sample(rng, {arch.data_dim});
      const double* x0 = data.points.values().data() + idx * arch.data_dim;
      for (Eigen::Index k = 0; k < d; ++k) {
        input(k, j) = std::sqrt(ab) * x0[k] + std::sqrt(1.0 - ab) * eps[static_cast<std::size_t>(k)];
        target(k, j) = eps[static_cast<std::size_t>(k)];
      }
      for (Eigen::Index k = 0; k < te_dim; ++k) input(d + k, j) = embeds[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
      if (arch.cond_dim > 0) {
        const bool drop = cfg.cond_dropout > 0.0 && rng.uniform() < cfg.cond_dropout;
        if (!drop) input(d + te_dim + data.labels[idx], j) = 1.0;
      }
    }
    const Mlp::Tape tape = net.forward_batch(input);
    const Eigen::MatrixXd diff = tape.output - target;
    const double denom = static_cast<double>(B * d);
    out.loss_trace.push_back(diff.squaredNorm() / denom);
    opt.step(net, net.backward_batch(tape, (2.0 / denom) * diff));
    if (cfg.ema_decay > 0.0) ema_update(averaged, net, cfg.ema_decay);
  }
  if (!net.all_finite()) throw NumericalFailure("train_denoiser diverged", cfg.steps);
  if (cfg.ema_decay > 0.0) net = std::move(averaged);
  return out;
}

/// Mean of the last `window` entries (or all of them when shorter).
inline double tail_mean(const std::vector<double>& trace, std::size_t window) {
  if (trace.empty()) return 0.0;
  const std::size_t n = std::min(window, trace.size());
  return std::accumulate(trace.end() - static_cast<std::ptrdiff_t>(n), trace.end(), 0.0) / static_cast<double>(n);
}

inline double head_mean(const std::vector<double>& trace, std::size_t window) {
  if (trace.empty()) return 0.0;
  const std::size_t n = std::min(window, trace.size());
  return std::accumulate(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

struct ClassifierTrainConfig {
  std::size_t hidden = 64;
  std::size_t depth = 2;
  int steps = 5000;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  double holdout_fraction = 0.2;
};

struct TrainedClassifier {
  ClassifierModel model;
  double heldout_accuracy = 0.0;
  std::vector<double> loss_trace;
};

inline int argmax(const Tensor& t) {
  return static_cast<int>(std::max_element(t.values().begin(), t.values().end()) - t.values().begin());
}

inline double classifier_accuracy(const ClassifierModel& m, const Dataset& data, std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i : idx)
    if (argmax(classifier_forward(m, data.point(i))) == data.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

/// Cross-entropy training on a shuffled split; accuracy is measured on the held-out part.
inline TrainedClassifier train_classifier(const Dataset& data, const ClassifierTrainConfig& cfg, Rng& rng) {
  std::vector<int> seen(static_cast<std::size_t>(std::max(data.n_classes, 1)), 0);
  for (int l : data.labels) {
    if (l < 0 || l >= data.n_classes) throw InvalidArgument("train_classifier: label out of range");
    seen[static_cast<std::size_t>(l)] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2) throw InvalidArgument("train_classifier: need at least two classes");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(order.size()));
  const std::span<const std::size_t> held(order.data(), n_hold);
  const std::span<const std::size_t> train(order.data() + n_hold, order.size() - n_hold);
  if (train.empty()) throw InvalidArgument("train_classifier: no training points after hold-out split");

  const auto n_classes = static_cast<std::size_t>(data.n_classes);
  TrainedClassifier out;
  // Zero output layer: an untrained classifier predicts class 0 everywhere (chance level).
  out.model = ClassifierModel(
      Mlp::random(ClassifierModel::widths(data.dim(), n_classes, cfg.hidden, cfg.depth), rng, /*out_scale=*/0.0));
  Mlp& net = out.model.net();
  MomentumSgd opt(net, cfg.lr, cfg.momentum);
  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  const auto d = static_cast<Eigen::Index>(data.dim());
  Eigen::MatrixXd input(d, B);
  std::vector<int> labels(static_cast<std::size_t>(B));
  for (int step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index j = 0; j < B; ++j) {
      const std::size_t idx = train[rng.below(train.size())];
      for (Eigen::Index k = 0; k < d; ++k) input(k, j) = data.points[idx * data.dim() + static_cast<std::size_t>(k)];
      labels[static_cast<std::size_t>(j)] = data.labels[idx];
    }
    const Mlp::Tape tape = net.forward_batch(input);
    Eigen::MatrixXd g = tape.output;
    double loss = 0.0;
    for (Eigen::Index j = 0; j < B; ++j) {
      const double mx = g.col(j).maxCoeff();
      g.col(j) = (g.col(j).array() - mx).exp();
      const double s = g.col(j).sum();
      g.col(j) /= s;
      const int y = labels[static_cast<std::size_t>(j)];
      loss -= std::log(std::max(g(y, j), 1e-300));
      g(y, j) -= 1.0;
    }
    out.loss_trace.push_back(loss / static_cast<double>(B));
    opt.step(net, net.backward_batch(tape, g / static_cast<double>(B)));
  }
  if (!net.all_finite()) throw NumericalFailure("train_classifier diverged", cfg.steps);
  out.heldout_accuracy = classifier_accuracy(out.model, data, held.empty() ? train : held);
  return out;
}

}  // namespace doodl
