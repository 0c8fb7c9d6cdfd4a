// SPDX-License-Identifier: Apache-2.0
//
// Deterministic samplers: plain DDIM, the one-step x0 estimate, and the
// coupled EDICT process with its exact inverse.
//
// Everything is written against the NoisePredictor concept so that tests can
// substitute closed-form predictors (zero, linear) for the trained network.
#pragma once

#include <concepts>
#include <cstdint>

#include "doodl/models.hpp"
#include "doodl/numerics.hpp"
#include "doodl/schedule.hpp"

namespace doodl {

template <class P>
concept NoisePredictor = requires(const P& p, const Tensor& x, int t) {
  { p.predict(x, t) } -> std::convertible_to<Tensor>;
};

template <class P>
concept DifferentiablePredictor = NoisePredictor<P> && requires(const P& p, const Tensor& x, int t, const Tensor& g) {
  { p.vjp(x, t, g) } -> std::convertible_to<Tensor>;
};

/// A trained denoiser with its conditioning fixed.
struct BoundDenoiser {
  const DenoiserModel* model;
  Conditioning cond;

  BoundDenoiser(const DenoiserModel& m, Conditioning c) : model(&m), cond(std::move(c)) {}

  Tensor predict(const Tensor& x, int t) const { return denoiser_forward(*model, x, t, cond); }
  Tensor vjp(const Tensor& x, int t, const Tensor& g) const { return denoiser_vjp(*model, x, t, cond, g); }
};

/// Θ ≡ 0.
struct ZeroPredictor {
  Tensor predict(const Tensor& x, int) const { return Tensor::zeros_like(x); }
  Tensor vjp(const Tensor& x, int, const Tensor&) const { return Tensor::zeros_like(x); }
};

/// Counts predictor applications (forward and VJP separately).
template <DifferentiablePredictor P>
class CountingPredictor {
 public:
  explicit CountingPredictor(const P& inner) : inner_(&inner) {}

  Tensor predict(const Tensor& x, int t) const {
    ++forward_calls_;
    return inner_->predict(x, t);
  }
  Tensor vjp(const Tensor& x, int t, const Tensor& g) const {
    ++vjp_calls_;
    return inner_->vjp(x, t, g);
  }

  std::int64_t forward_calls() const { return forward_calls_; }
  std::int64_t vjp_calls() const { return vjp_calls_; }
  std::int64_t total_calls() const { return forward_calls_ + vjp_calls_; }
  void reset() { forward_calls_ = vjp_calls_ = 0; }

 private:
  const P* inner_;
  mutable std::int64_t forward_calls_ = 0;
  mutable std::int64_t vjp_calls_ = 0;
};

// ---------------------------------------------------------------------------
// DDIM

template <NoisePredictor P>
Tensor ddim_step(const P& model, const Tensor& x_t, int t, const NoiseSchedule& sched) {
  const StepCoeffs c = ddim_coeffs(sched, t);
  return lincomb(c.a, x_t, c.b, model.predict(x_t, t));
}

/// Folds ddim_step from `t_start` down to 1.
template <NoisePredictor P>
Tensor ddim_generate_from(const P& model, Tensor x, int t_start, const NoiseSchedule& sched) {
  if (t_start < 0 || t_start > sched.num_steps()) throw InvalidArgument("ddim_generate_from: start step out of range");
  for (int t = t_start; t >= 1; --t) x = ddim_step(model, x, t, sched);
  return x;
}

template <NoisePredictor P>
Tensor ddim_generate(const P& model, const Tensor& x_T, const NoiseSchedule& sched) {
  return ddim_generate_from(model, x_T, sched.num_steps(), sched);
}

/// x*_0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t for a given noise prediction.
inline Tensor one_step_x0_from(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(t);
  if (!(ab > 0.0)) throw DegenerateInput("one_step_x0: alpha_bar is zero");
  const double inv = 1.0 / std::sqrt(ab);
  return lincomb(inv, x_t, -std::sqrt(1.0 - ab) * inv, eps_hat);
}

template <NoisePredictor P>
Tensor one_step_x0(const P& model, const Tensor& x_t, int t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.num_steps()) throw InvalidArgument("one_step_x0: step out of range");
  return one_step_x0_from(x_t, model.predict(x_t, t), t, sched);
}

inline Tensor ddim_step(const DenoiserModel& m, const Tensor& x_t, int t, const NoiseSchedule& sched,
                        const Conditioning& c) {
  return ddim_step(BoundDenoiser(m, c), x_t, t, sched);
}
inline Tensor ddim_generate(const DenoiserModel& m, const Tensor& x_T, const NoiseSchedule& sched,
                            const Conditioning& c) {
  return ddim_generate(BoundDenoiser(m, c), x_T, sched);
}
inline Tensor one_step_x0(const DenoiserModel& m, const Tensor& x_t, int t, const NoiseSchedule& sched,
                          const Conditioning& c) {
  return one_step_x0(BoundDenoiser(m, c), x_t, t, sched);
}

// ---------------------------------------------------------------------------
// EDICT

/// Coupled EDICT state at schedule position t.
struct LatentPair {
  Tensor x;
  Tensor y;
  int t = 0;

  LatentPair() = default;
  LatentPair(Tensor x_, Tensor y_, int t_) : x(std::move(x_)), y(std::move(y_)), t(t_) {
    x.check_same(y, "LatentPair");
  }
};

struct EdictConfig {
  double p = 0.93;
  NoiseSchedule sched{50, ScheduleKind::cosine};
  /// Used by the DenoiserModel overloads; generic predictors carry their own.
  Conditioning cond{};

  void validate() const {
    if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("EDICT mixing parameter p must lie in (0, 1]");
  }
};

/// Affine-coupling intermediates of one step, shared by forward and inverse.
struct EdictIntermediates {
  Tensor x_inter;
  Tensor y_inter;
};

/// One denoising step t -> t-1:
///   x_inter = a·x + b·Θ(y)
///   y_inter = a·y + b·Θ(x_inter)
///   x'      = p·x_inter + (1−p)·y_inter
///   y'      = p·y_inter + (1−p)·x'
template <NoisePredictor P>
LatentPair edict_step_forward(const P& model, const LatentPair& pair, const EdictConfig& cfg,
                              EdictIntermediates* inters = nullptr) {
  cfg.validate();
  const int t = pair.t;
  if (t < 1 || t > cfg.sched.num_steps()) throw InvalidArgument("edict_step_forward: step out of range");
  const StepCoeffs c = ddim_coeffs(cfg.sched, t);
  const double p = cfg.p;
  Tensor x_inter = lincomb(c.a, pair.x, c.b, model.predict(pair.y, t));
  Tensor y_inter = lincomb(c.a, pair.y, c.b, model.predict(x_inter, t));
  Tensor x_next = lincomb(p, x_inter, 1.0 - p, y_inter);
  Tensor y_next = lincomb(p, y_inter, 1.0 - p, x_next);
  if (inters) *inters = {std::move(x_inter), std::move(y_inter)};
  return {std::move(x_next), std::move(y_next), t - 1};
}

/// One noising step t -> t+1, the exact algebraic inverse of edict_step_forward at t+1:
///   y_inter = (y − (1−p)·x) / p
///   x_inter = (x − (1−p)·y_inter) / p
///   y'      = (y_inter − b·Θ(x_inter)) / a
///   x'      = (x_inter − b·Θ(y')) / a
template <NoisePredictor P>
LatentPair edict_step_inverse(const P& model, const LatentPair& pair, const EdictConfig& cfg,
                              EdictIntermediates* inters = nullptr) {
  cfg.validate();
  const int t = pair.t + 1;
  if (pair.t < 0 || t > cfg.sched.num_steps()) throw InvalidArgument("edict_step_inverse: step out of range");
  const StepCoeffs c = ddim_coeffs(cfg.sched, t);
  if (c.a == 0.0) throw InvalidArgument("edict_step_inverse: a_t is zero");
  const double p = cfg.p;
  const double inv_p = 1.0 / p;
  const double inv_a = 1.0 / c.a;
  Tensor y_inter = lincomb(inv_p, pair.y, -(1.0 - p) * inv_p, pair.x);
  Tensor x_inter = lincomb(inv_p, pair.x, -(1.0 - p) * inv_p, y_inter);
  Tensor y_prev = lincomb(inv_a, y_inter, -c.b * inv_a, model.predict(x_inter, t));
  Tensor x_prev = lincomb(inv_a, x_inter, -c.b * inv_a, model.predict(y_prev, t));
  if (inters) *inters = {std::move(x_inter), std::move(y_inter)};
  return {std::move(x_prev), std::move(y_prev), t};
}

/// Folds edict_step_forward from pair.t down to 0.
template <NoisePredictor P>
LatentPair edict_generate_from(const P& model, LatentPair pair, const EdictConfig& cfg) {
  while (pair.t > 0) pair = edict_step_forward(model, pair, cfg);
  return pair;
}

/// Starts from x_T = y_T at t = S.
template <NoisePredictor P>
LatentPair edict_generate(const P& model, const Tensor& x_T, const EdictConfig& cfg) {
  return edict_generate_from(model, LatentPair(x_T, x_T, cfg.sched.num_steps()), cfg);
}

/// Folds edict_step_inverse from pair.t up to S.
template <NoisePredictor P>
LatentPair edict_invert(const P& model, LatentPair pair, const EdictConfig& cfg) {
  while (pair.t < cfg.sched.num_steps()) pair = edict_step_inverse(model, pair, cfg);
  return pair;
}

inline LatentPair edict_step_forward(const DenoiserModel& m, const LatentPair& pair, const EdictConfig& cfg) {
  return edict_step_forward(BoundDenoiser(m, cfg.cond), pair, cfg);
}
inline LatentPair edict_step_inverse(const DenoiserModel& m, const LatentPair& pair, const EdictConfig& cfg) {
  return edict_step_inverse(BoundDenoiser(m, cfg.cond), pair, cfg);
}
inline LatentPair edict_generate(const DenoiserModel& m, const Tensor& x_T, const EdictConfig& cfg) {
  return edict_generate(BoundDenoiser(m, cfg.cond), x_T, cfg);
}
/// Inversion is unconditional regardless of cfg.cond.
inline LatentPair edict_invert(const DenoiserModel& m, const LatentPair& pair, const EdictConfig& cfg) {
  return edict_invert(BoundDenoiser(m, Conditioning::none(m.arch().cond_dim)), pair, cfg);
}

}  // namespace doodl
