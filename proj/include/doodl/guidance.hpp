// SPDX-License-Identifier: Apache-2.0
//
// Guidance losses on generated samples, and the one-step classifier-guided
// DDIM baseline.
#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <variant>

#include "doodl/models.hpp"
#include "doodl/sampling.hpp"

namespace doodl {

/// 2·sqrt(asin(‖x−y‖/2)) for unit vectors x, y; the weight is applied by callers.
inline double spherical_distance(const Tensor& x, const Tensor& y) {
  const double half_chord = std::min(l2_norm(x - y) / 2.0, 1.0);
  return 2.0 * std::sqrt(std::asin(half_chord));
}

struct SphericalDistanceLoss {
  std::shared_ptr<const EmbeddingModel> embed;
  Tensor target;  // unit norm
};

enum class ClassLossForm { bce, cross_entropy };

struct ClassTargetLoss {
  std::shared_ptr<const ClassifierModel> classifier;
  int class_index = 0;
  ClassLossForm form = ClassLossForm::cross_entropy;
};

/// |a(x) − A|
struct ScalarTargetLoss {
  std::shared_ptr<const ScoreModel> head;
  double target = 10.0;
};

class GuidanceLoss {
 public:
  using Variant = std::variant<SphericalDistanceLoss, ClassTargetLoss, ScalarTargetLoss>;

  GuidanceLoss(Variant v, double weight) : variant_(std::move(v)), weight_(weight) {
    if (!(weight_ > 0.0)) throw InvalidArgument("guidance loss weight must be positive");
    if (const auto* s = std::get_if<SphericalDistanceLoss>(&variant_)) {
      if (!s->embed) throw InvalidArgument("spherical loss needs an embedding model");
      if (s->target.size() != s->embed->embed_dim()) throw InvalidArgument("target embedding dimension mismatch");
      if (std::abs(l2_norm(s->target) - 1.0) > 1e-9) throw InvalidArgument("target embedding must be unit norm");
    } else if (const auto* c = std::get_if<ClassTargetLoss>(&variant_)) {
      if (!c->classifier) throw InvalidArgument("class loss needs a classifier");
      if (c->class_index < 0 || static_cast<std::size_t>(c->class_index) >= c->classifier->n_classes())
        throw InvalidArgument("target class out of range");
    } else if (!std::get<ScalarTargetLoss>(variant_).head) {
      throw InvalidArgument("scalar loss needs a score head");
    }
  }

  static GuidanceLoss spherical(std::shared_ptr<const EmbeddingModel> e, Tensor target, double weight = 1.0) {
    return {SphericalDistanceLoss{std::move(e), std::move(target)}, weight};
  }
  static GuidanceLoss class_target(std::shared_ptr<const ClassifierModel> c, int cls,
                                   ClassLossForm form = ClassLossForm::cross_entropy, double weight = 1.0) {
    return {ClassTargetLoss{std::move(c), cls, form}, weight};
  }
  static GuidanceLoss scalar_target(std::shared_ptr<const ScoreModel> h, double target, double weight = 1.0) {
    return {ScalarTargetLoss{std::move(h), target}, weight};
  }

  const Variant& variant() const { return variant_; }
  double weight() const { return weight_; }
  GuidanceLoss with_weight(double w) const { return {variant_, w}; }

  std::size_t input_dim() const {
    return std::visit([](const auto& v) -> std::size_t {
      using V = std::decay_t<decltype(v)>;
      if constexpr (std::is_same_v<V, SphericalDistanceLoss>) return v.embed->data_dim();
      else if constexpr (std::is_same_v<V, ClassTargetLoss>) return v.classifier->data_dim();
      else return v.head->data_dim();
    }, variant_);
  }

 private:
  Variant variant_;
  double weight_;
};

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Unweighted class loss on logits, and its gradient.
inline double class_loss(const Tensor& z, int j, ClassLossForm form) {
  const auto K = z.size();
  if (form == ClassLossForm::cross_entropy) {
    double mx = z[0];
    for (double v : z.values()) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z.values()) s += std::exp(v - mx);
    return mx + std::log(s) - z[static_cast<std::size_t>(j)];
  }
  // Mean binary cross-entropy against the one-hot target.
  double l = 0.0;
  for (std::size_t k = 0; k < K; ++k) l += softplus(z[k]) - (static_cast<int>(k) == j ? z[k] : 0.0);
  return l / static_cast<double>(K);
}

inline Tensor class_loss_grad(const Tensor& z, int j, ClassLossForm form) {
  const auto K = z.size();
  Tensor g(z.shape());
  if (form == ClassLossForm::cross_entropy) {
    g = softmax(z);
    g[static_cast<std::size_t>(j)] -= 1.0;
    return g;
  }
  for (std::size_t k = 0; k < K; ++k)
    g[k] = (sigmoid(z[k]) - (static_cast<int>(k) == j ? 1.0 : 0.0)) / static_cast<double>(K);
  return g;
}

inline void check_dim(const GuidanceLoss& L, const Tensor& x) {
  if (x.size() != L.input_dim())
    throw InvalidArgument("guidance loss expects " + std::to_string(L.input_dim()) + " inputs, got " +
                          std::to_string(x.size()));
}

}  // namespace detail

inline double loss_eval(const GuidanceLoss& L, const Tensor& x0) {
  detail::check_dim(L, x0);
  const double raw = std::visit([&](const auto& v) -> double {
    using V = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<V, SphericalDistanceLoss>) {
      return spherical_distance(v.embed->embed(x0), v.target);
    } else if constexpr (std::is_same_v<V, ClassTargetLoss>) {
      return detail::class_loss(classifier_forward(*v.classifier, x0), v.class_index, v.form);
    } else {
      return std::abs(v.head->score(x0) - v.target);
    }
  }, L.variant());
  return L.weight() * raw;
}

inline Tensor loss_grad(const GuidanceLoss& L, const Tensor& x0) {
  detail::check_dim(L, x0);
  Tensor g = std::visit([&](const auto& v) -> Tensor {
    using V = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<V, SphericalDistanceLoss>) {
      const Tensor e = v.embed->embed(x0);
      const Tensor diff = e - v.target;
      const double r = l2_norm(diff);
      const double h = r / 2.0;
      // d/dr 2·sqrt(asin(r/2)); zero at r = 0 and on the clamped branch.
      if (r == 0.0 || h >= 1.0) return Tensor::zeros_like(x0);
      const double dd_dr = 1.0 / (2.0 * std::sqrt(std::asin(h)) * std::sqrt(1.0 - h * h));
      return v.embed->embed_vjp(x0, diff * (dd_dr / r));
    } else if constexpr (std::is_same_v<V, ClassTargetLoss>) {
      return classifier_input_grad(*v.classifier, x0,
                                   [&](const Tensor& z) { return detail::class_loss_grad(z, v.class_index, v.form); });
    } else {
      const double gap = v.head->score(x0) - v.target;
      if (gap == 0.0) return Tensor::zeros_like(x0);
      return (gap > 0.0 ? 1.0 : -1.0) * v.head->score_grad(x0);
    }
  }, L.variant());
  return L.weight() * g;
}

/// softmax(Φ(x))_j
inline double class_probability(const ClassifierModel& m, const Tensor& x, int j) {
  return softmax(classifier_forward(m, x))[static_cast<std::size_t>(j)];
}

/// DDIM where each step's noise prediction is offset by the gradient of the
/// loss evaluated on the one-step estimate x*_0:
///   ε̃ = ε̂ + s·√(1−ᾱ_t)·∇_{x_t} L(x*_0(x_t)).
/// The gradient flows through the closed form of x*_0 and through the single
/// predictor application inside it.
template <DifferentiablePredictor P>
Tensor classifier_guided_ddim(const P& model, const GuidanceLoss& L, const Tensor& x_T, const NoiseSchedule& sched,
                              double scale) {
  if (!(scale >= 0.0)) throw InvalidArgument("guidance scale must be non-negative");
  Tensor x = x_T;
  for (int t = sched.num_steps(); t >= 1; --t) {
    const StepCoeffs c = ddim_coeffs(sched, t);
    Tensor eps = model.predict(x, t);
    if (scale != 0.0) {
      const double ab = sched.alpha_bar(t);
      const double sigma = std::sqrt(1.0 - ab);
      const double inv = 1.0 / std::sqrt(ab);
      const Tensor x0_hat = one_step_x0_from(x, eps, t, sched);
      const Tensor g0 = loss_grad(L, x0_hat);
      // x*_0 = (x_t − σ·Θ(x_t))/√ᾱ  ⇒  ∇_{x_t} = (g0 − σ·Θᵀ(x_t)·g0)/√ᾱ
      const Tensor g = lincomb(inv, g0, -sigma * inv, model.vjp(x, t, g0));
      if (!g.all_finite()) throw NumericalFailure("non-finite guidance gradient", t);
      eps = lincomb(1.0, eps, scale * sigma, g);
    }
    x = lincomb(c.a, x, c.b, eps);
  }
  return x;
}

inline Tensor classifier_guided_ddim(const DenoiserModel& m, const GuidanceLoss& L, const Tensor& x_T,
                                     const NoiseSchedule& sched, const Conditioning& c, double scale) {
  return classifier_guided_ddim(BoundDenoiser(m, c), L, x_T, sched, scale);
}

}  // namespace doodl
