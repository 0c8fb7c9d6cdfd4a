// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode gradients of a loss on the EDICT output (x_0, y_0) with
// respect to the shared initial latent x_T = y_T.
//
// edict_chain_vjp is the production path: intermediate states are never
// stored; the backward sweep rebuilds each (x_t, y_t) from (x_{t-1}, y_{t-1})
// with the exact inverse step, so live memory does not depend on S.
//
// full_graph_grad_oracle records every node of the chain on a generic tape
// and backpropagates through it. It shares no code with the hand-derived
// step adjoint and its memory grows linearly in S. finite_diff_grad is the
// third, derivative-free route.
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "doodl/sampling.hpp"

namespace doodl {

/// Live/peak counter for latent-shaped tensors held by a routine.
class StateMeter {
 public:
  void acquire() { peak_ = std::max(peak_, ++live_); }
  void release() { --live_; }
  int live() const { return live_; }
  int peak() const { return peak_; }

 private:
  int live_ = 0;
  int peak_ = 0;
};

/// A tensor whose lifetime is reported to a StateMeter.
class Tracked {
 public:
  Tracked(StateMeter& meter, Tensor value) : meter_(&meter), value_(std::move(value)) { meter_->acquire(); }
  Tracked(Tracked&& o) noexcept : meter_(std::exchange(o.meter_, nullptr)), value_(std::move(o.value_)) {}
  Tracked& operator=(Tracked&& o) noexcept {
    if (this != &o) {
      if (meter_) meter_->release();
      meter_ = std::exchange(o.meter_, nullptr);
      value_ = std::move(o.value_);
    }
    return *this;
  }
  Tracked(const Tracked&) = delete;
  Tracked& operator=(const Tracked&) = delete;
  ~Tracked() {
    if (meter_) meter_->release();
  }

  const Tensor& operator*() const { return value_; }
  const Tensor* operator->() const { return &value_; }

  /// Overwrites the value in place; the live count is unchanged.
  void replace(Tensor value) { value_ = std::move(value); }

 private:
  StateMeter* meter_;
  Tensor value_;
};

struct ChainGradReport {
  Tensor grad;  // ∂L/∂x_T
  /// Max simultaneously live latent-shaped tensors (states, coupling
  /// intermediates, cotangents). Transient predictor outputs consumed inside
  /// a single expression are not counted.
  int peak_cached_states = 0;
  /// Predictor applications in the backward sweep (reconstruction + VJP).
  std::int64_t denoiser_calls = 0;
  /// Predictor applications in the forward generation.
  std::int64_t forward_denoiser_calls = 0;
  LatentPair output;  // (x_0, y_0)
  /// max |reconstructed x_S, y_S − x_T|; zero for the caching oracle.
  double reconstruction_error = 0.0;
};

namespace detail {

inline void require_finite(const Tensor& t, const char* what, int step) {
  if (!t.all_finite()) throw NumericalFailure(std::string("non-finite ") + what, step);
}

}  // namespace detail

/// Gradient of L(x_0, y_0) w.r.t. x_T with O(1) memory in S.
///
/// `loss_grad(x0, y0)` returns the pair (∂L/∂x_0, ∂L/∂y_0).
template <DifferentiablePredictor P, class LossGrad>
ChainGradReport edict_chain_vjp(const P& model, const Tensor& x_T, const EdictConfig& cfg, LossGrad&& loss_grad) {
  cfg.validate();
  const int S = cfg.sched.num_steps();
  CountingPredictor<P> counted(model);
  StateMeter meter;

  // Forward generation, keeping only the running pair.
  LatentPair fwd(x_T, x_T, S);
  {
    Tracked hold_x(meter, fwd.x), hold_y(meter, fwd.y);
    while (fwd.t > 0) {
      fwd = edict_step_forward(counted, fwd, cfg);
      hold_x.replace(fwd.x);
      hold_y.replace(fwd.y);
    }
  }
  ChainGradReport report;
  report.forward_denoiser_calls = counted.total_calls();
  report.output = fwd;
  counted.reset();

  auto [g0x, g0y] = loss_grad(fwd.x, fwd.y);
  detail::require_finite(g0x, "output cotangent", 0);
  detail::require_finite(g0y, "output cotangent", 0);

  const double p = cfg.p;
  std::optional<Tracked> x(std::in_place, meter, std::move(fwd.x));
  std::optional<Tracked> y(std::in_place, meter, std::move(fwd.y));
  std::optional<Tracked> gx(std::in_place, meter, std::move(g0x));
  std::optional<Tracked> gy(std::in_place, meter, std::move(g0y));

  for (int t = 1; t <= S; ++t) {
    // Rebuild (x_t, y_t) and the coupling intermediates of step t from (x_{t-1}, y_{t-1}).
    EdictIntermediates inters;
    LatentPair prev = edict_step_inverse(counted, LatentPair(**x, **y, t - 1), cfg, &inters);
    const Tracked x_inter(meter, std::move(inters.x_inter));
    const Tracked y_inter(meter, std::move(inters.y_inter));
    x.emplace(meter, std::move(prev.x));
    y.emplace(meter, std::move(prev.y));

    const StepCoeffs c = ddim_coeffs(cfg.sched, t);

    // y_{t-1} = p·y_inter + (1−p)·x_{t-1}
    //   ḡ(y_inter)  = p·g(y_{t-1})
    //   ḡ(x_{t-1})  = g(x_{t-1}) + (1−p)·g(y_{t-1})
    // x_{t-1} = p·x_inter + (1−p)·y_inter
    //   ḡ(x_inter)  = p·ḡ(x_{t-1})
    //   ḡ(y_inter) += (1−p)·ḡ(x_{t-1})
    {
      const Tensor gx_out = lincomb(1.0, **gx, 1.0 - p, **gy);
      gy.emplace(meter, lincomb(p, **gy, 1.0 - p, gx_out));
      gx.emplace(meter, p * gx_out);
    }
    Tracked gy_inter = std::move(*gy);
    Tracked gx_inter = std::move(*gx);
    gx.reset();
    gy.reset();

    // y_inter = a·y_t + b·Θ(x_inter)
    //   ḡ(y_t)      = a·ḡ(y_inter)
    //   ḡ(x_inter) += b·Θᵀ(x_inter)·ḡ(y_inter)
    gx_inter.replace(lincomb(1.0, *gx_inter, c.b, counted.vjp(*x_inter, t, *gy_inter)));

    // x_inter = a·x_t + b·Θ(y_t)
    //   ḡ(x_t)      = a·ḡ(x_inter)
    //   ḡ(y_t)     += b·Θᵀ(y_t)·ḡ(x_inter)
    gy.emplace(meter, lincomb(c.a, *gy_inter, c.b, counted.vjp(**y, t, *gx_inter)));
    gx.emplace(meter, c.a * *gx_inter);

    detail::require_finite(**gx, "cotangent", t);
    detail::require_finite(**gy, "cotangent", t);
  }

  report.reconstruction_error = std::max(max_abs_diff(**x, x_T), max_abs_diff(**y, x_T));
  // x_T and y_T are the same variable.
  report.grad = **gx + **gy;
  report.denoiser_calls = counted.total_calls();
  report.peak_cached_states = meter.peak();
  return report;
}

/// Tape of the full EDICT chain: every node's value stays alive until the
/// backward sweep finishes.
template <DifferentiablePredictor P>
class ChainTape {
 public:
  ChainTape(const P& model, StateMeter& meter) : model_(&model), meter_(&meter) {}

  int input(Tensor v) {
    nodes_.push_back({Kind::input, {}, -1, 0, Tracked(*meter_, std::move(v))});
    return last();
  }

  /// Σ coeff_i · node_i
  int affine(std::vector<std::pair<int, double>> terms) {
    Tensor v = Tensor::zeros_like(value(terms.front().first));
    for (const auto& [id, coeff] : terms) v += coeff * value(id);
    nodes_.push_back({Kind::affine, std::move(terms), -1, 0, Tracked(*meter_, std::move(v))});
    return last();
  }

  int predict(int arg, int t) {
    Tensor v = model_->predict(value(arg), t);
    nodes_.push_back({Kind::predict, {}, arg, t, Tracked(*meter_, std::move(v))});
    return last();
  }

  const Tensor& value(int id) const { return *nodes_[static_cast<std::size_t>(id)].value; }

  /// Adjoint of node `wrt` given seed cotangents on output nodes.
  Tensor backward(const std::vector<std::pair<int, Tensor>>& seeds, int wrt, std::int64_t& vjp_calls) {
    std::vector<std::optional<Tracked>> adj(nodes_.size());
    auto accumulate = [&](int id, const Tensor& g) {
      auto& slot = adj[static_cast<std::size_t>(id)];
      if (slot) slot.emplace(*meter_, **slot + g);
      else slot.emplace(*meter_, g);
    };
    for (const auto& [id, g] : seeds) accumulate(id, g);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (!adj[i]) continue;
      const Node& n = nodes_[i];
      const Tensor& g = **adj[i];
      switch (n.kind) {
        case Kind::input:
          break;
        case Kind::affine:
          for (const auto& [id, coeff] : n.terms) accumulate(id, coeff * g);
          break;
        case Kind::predict:
          ++vjp_calls;
          accumulate(n.arg, model_->vjp(value(n.arg), n.t, g));
          break;
      }
      if (static_cast<int>(i) != wrt) adj[i].reset();
    }
    const auto& out = adj[static_cast<std::size_t>(wrt)];
    return out ? **out : Tensor::zeros_like(value(wrt));
  }

 private:
  enum class Kind { input, affine, predict };
  struct Node {
    Kind kind;
    std::vector<std::pair<int, double>> terms;
    int arg;
    int t;
    Tracked value;
  };
  int last() const { return static_cast<int>(nodes_.size()) - 1; }

  const P* model_;
  StateMeter* meter_;
  std::vector<Node> nodes_;
};

/// Largest chain the caching oracle accepts.
inline constexpr int kMaxOracleSteps = 512;

/// Same gradient as edict_chain_vjp, computed by caching the whole graph.
template <DifferentiablePredictor P, class LossGrad>
ChainGradReport full_graph_grad_oracle(const P& model, const Tensor& x_T, const EdictConfig& cfg,
                                       LossGrad&& loss_grad) {
  cfg.validate();
  const int S = cfg.sched.num_steps();
  if (S > kMaxOracleSteps)
    throw ResourceError("full_graph_grad_oracle: " + std::to_string(S) + " steps exceeds the cache limit of " +
                        std::to_string(kMaxOracleSteps));
  StateMeter meter;
  ChainTape<P> tape(model, meter);
  const double p = cfg.p;
  const int root = tape.input(x_T);
  int x = root, y = root;
  std::int64_t forward_calls = 0;
  for (int t = S; t >= 1; --t) {
    const StepCoeffs c = ddim_coeffs(cfg.sched, t);
    const int x_inter = tape.affine({{x, c.a}, {tape.predict(y, t), c.b}});
    const int y_inter = tape.affine({{y, c.a}, {tape.predict(x_inter, t), c.b}});
    const int x_next = tape.affine({{x_inter, p}, {y_inter, 1.0 - p}});
    const int y_next = tape.affine({{y_inter, p}, {x_next, 1.0 - p}});
    x = x_next;
    y = y_next;
    forward_calls += 2;
  }
  ChainGradReport report;
  report.output = LatentPair(tape.value(x), tape.value(y), 0);
  auto [gx, gy] = loss_grad(report.output.x, report.output.y);
  std::int64_t vjp_calls = 0;
  report.grad = tape.backward({{x, gx}, {y, gy}}, root, vjp_calls);
  detail::require_finite(report.grad, "oracle gradient", S);
  report.peak_cached_states = meter.peak();
  report.denoiser_calls = vjp_calls;
  report.forward_denoiser_calls = forward_calls;
  return report;
}

/// Central differences of L(edict_generate(x_T)) per coordinate of x_T.
template <NoisePredictor P, class Loss>
Tensor finite_diff_grad(const P& model, const Tensor& x_T, const EdictConfig& cfg, Loss&& loss, double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite_diff_grad: step must be positive");
  Tensor grad = Tensor::zeros_like(x_T);
  for (std::size_t i = 0; i < x_T.size(); ++i) {
    Tensor plus = x_T, minus = x_T;
    plus[i] += step;
    minus[i] -= step;
    const LatentPair a = edict_generate(model, plus, cfg);
    const LatentPair b = edict_generate(model, minus, cfg);
    grad[i] = (loss(a.x, a.y) - loss(b.x, b.y)) / (2.0 * step);
  }
  return grad;
}

template <class LossGrad>
ChainGradReport edict_chain_vjp(const DenoiserModel& m, const Tensor& x_T, const EdictConfig& cfg,
                                LossGrad&& loss_grad) {
  return edict_chain_vjp(BoundDenoiser(m, cfg.cond), x_T, cfg, std::forward<LossGrad>(loss_grad));
}

template <class LossGrad>
ChainGradReport full_graph_grad_oracle(const DenoiserModel& m, const Tensor& x_T, const EdictConfig& cfg,
                                       LossGrad&& loss_grad) {
  return full_graph_grad_oracle(BoundDenoiser(m, cfg.cond), x_T, cfg, std::forward<LossGrad>(loss_grad));
}

}  // namespace doodl
