// SPDX-License-Identifier: Apache-2.0
//
// Direct optimization of the initial diffusion latent against a loss on the
// true (full-chain EDICT) generation.
#pragma once

#include <cmath>
#include <vector>

#include "doodl/adjoint.hpp"
#include "doodl/guidance.hpp"
#include "doodl/sampling.hpp"

namespace doodl {

// ---------------------------------------------------------------------------
// Multicrop

struct MulticropConfig {
  int num_cutouts = 16;
  double cut_power = 0.3;
  std::size_t model_input_size = 224;
  /// Vector data must leave this off; the crop set is then just {x}.
  bool enabled = false;
};

/// Square window in the trailing (H, W) axes.
struct CropWindow {
  std::size_t size;
  std::size_t offset_y;
  std::size_t offset_x;
};

/// Crop side: min_size + (max_size − min_size)·r^cut_power, truncated.
inline std::size_t sample_crop_size(Rng& rng, std::size_t min_size, std::size_t max_size, double cut_power) {
  const double r = rng.uniform();
  return static_cast<std::size_t>(std::pow(r, cut_power) * static_cast<double>(max_size - min_size) +
                                  static_cast<double>(min_size));
}

namespace detail {

struct ImageDims {
  std::size_t channels, height, width;
};

inline ImageDims image_dims(const Tensor& x) {
  if (x.rank() < 2) throw InvalidArgument("multicrop: image data needs rank >= 2, got " + shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t c = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) c *= s[i];
  return {c, s[s.size() - 2], s[s.size() - 1]};
}

inline Shape crop_shape(const Tensor& x, std::size_t out) {
  Shape s = x.shape();
  s[s.size() - 2] = out;
  s[s.size() - 1] = out;
  return s;
}

// Adaptive average pooling bin [start, end) for output cell i.
inline std::pair<std::size_t, std::size_t> pool_bin(std::size_t i, std::size_t in, std::size_t out) {
  const std::size_t start = (i * in) / out;
  const std::size_t end = ((i + 1) * in + out - 1) / out;
  return {start, end};
}

}  // namespace detail

/// Crop `window` out of x and average-pool it to out×out.
inline Tensor apply_crop(const Tensor& x, const CropWindow& w, std::size_t out) {
  const auto [C, H, W] = detail::image_dims(x);
  if (w.offset_y + w.size > H || w.offset_x + w.size > W) throw InvalidArgument("crop window outside image");
  Tensor res(detail::crop_shape(x, out));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out; ++i) {
      const auto [y0, y1] = detail::pool_bin(i, w.size, out);
      for (std::size_t j = 0; j < out; ++j) {
        const auto [x0, x1] = detail::pool_bin(j, w.size, out);
        double s = 0.0;
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) s += x[(c * H + w.offset_y + yy) * W + w.offset_x + xx];
        res[(c * out + i) * out + j] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  return res;
}

/// Adjoint of apply_crop: scatters each pooled cotangent evenly over its bin.
inline Tensor crop_vjp(const Shape& image_shape, const CropWindow& w, const Tensor& cotangent) {
  Tensor grad(image_shape);
  const auto [C, H, W] = detail::image_dims(grad);
  const std::size_t out = cotangent.shape().back();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out; ++i) {
      const auto [y0, y1] = detail::pool_bin(i, w.size, out);
      for (std::size_t j = 0; j < out; ++j) {
        const auto [x0, x1] = detail::pool_bin(j, w.size, out);
        const double share = cotangent[(c * out + i) * out + j] / static_cast<double>((y1 - y0) * (x1 - x0));
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) grad[(c * H + w.offset_y + yy) * W + w.offset_x + xx] += share;
      }
    }
  return grad;
}

/// Draws num_cutouts windows for an image-shaped tensor (size first, then y and x offsets).
inline std::vector<CropWindow> sample_crop_windows(const Tensor& x, const MulticropConfig& cfg, Rng& rng) {
  if (cfg.num_cutouts < 1) throw InvalidArgument("multicrop: num_cutouts must be >= 1");
  if (!(cfg.cut_power > 0.0)) throw InvalidArgument("multicrop: cut_power must be positive");
  const auto [C, H, W] = detail::image_dims(x);
  const std::size_t max_size = std::min(H, W);
  if (max_size < cfg.model_input_size) throw InvalidArgument("multicrop: image smaller than model input size");
  const std::size_t min_size = std::min(max_size, cfg.model_input_size);
  std::vector<CropWindow> windows;
  for (int k = 0; k < cfg.num_cutouts; ++k) {
    const std::size_t size = sample_crop_size(rng, min_size, max_size, cfg.cut_power);
    const std::size_t oy = rng.below(H - size + 1);
    const std::size_t ox = rng.below(W - size + 1);
    windows.push_back({size, oy, ox});
  }
  return windows;
}

inline std::vector<Tensor> multicrop(const Tensor& x, const MulticropConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return {x};
  if (x.rank() < 2) throw InvalidArgument("multicrop: enabled on vector data");
  std::vector<Tensor> crops;
  for (const CropWindow& w : sample_crop_windows(x, cfg, rng)) crops.push_back(apply_crop(x, w, cfg.model_input_size));
  return crops;
}

/// Mean guidance loss over a fresh crop set, with its gradient w.r.t. x.
struct CropLoss {
  double value;
  Tensor grad;
};

inline CropLoss multicrop_loss(const GuidanceLoss& L, const Tensor& x, const MulticropConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return {loss_eval(L, x), loss_grad(L, x)};
  if (x.rank() < 2) throw InvalidArgument("multicrop: enabled on vector data");
  const std::vector<CropWindow> windows = sample_crop_windows(x, cfg, rng);
  const double inv_n = 1.0 / static_cast<double>(windows.size());
  CropLoss out{0.0, Tensor::zeros_like(x)};
  for (const CropWindow& w : windows) {
    const Tensor crop = apply_crop(x, w, cfg.model_input_size);
    out.value += inv_n * loss_eval(L, crop);
    out.grad += inv_n * crop_vjp(x.shape(), w, loss_grad(L, crop));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct DoodlConfig {
  double learning_rate = 0.05;
  int steps = 20;
  double momentum = 0.9;
  double clip_bound = 1e-3;
  /// Variance of the per-update Gaussian perturbation.
  double perturb_variance = 1e-4;
  /// Renormalize after adding the perturbation (true) or before it.
  bool renormalize_last = true;
  MulticropConfig multicrop{};
  EdictConfig edict{};

  void validate() const {
    if (!(learning_rate >= 0.0)) throw InvalidArgument("DOODL learning rate must be non-negative");
    if (steps < 0) throw InvalidArgument("DOODL step count must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("DOODL momentum must lie in [0, 1)");
    if (!(clip_bound > 0.0)) throw InvalidArgument("DOODL clip bound must be positive");
    if (!(perturb_variance >= 0.0)) throw InvalidArgument("DOODL perturbation variance must be non-negative");
    edict.validate();
  }
};

struct OptState {
  Tensor x_T;
  Tensor momentum;  // g_{i-1}
  double original_norm = 0.0;
  int iteration = 0;
  std::vector<double> loss_trace;
  /// Clipped raw update of the last step, before momentum.
  Tensor last_clipped;

  static OptState start(const Tensor& x_T) {
    const double n = l2_norm(x_T);
    if (!(n > 0.0)) throw DegenerateInput("DOODL: initial latent has zero norm");
    return {x_T, Tensor::zeros_like(x_T), n, 0, {}, Tensor::zeros_like(x_T)};
  }
};

/// One iteration: generate, score 0.5·(crop loss on x_0 + crop loss on y_0),
/// backpropagate to x_T through the inverse-reconstructing adjoint, then clip,
/// accumulate momentum, perturb and renormalize. The input state is untouched
/// if anything fails.
template <DifferentiablePredictor P>
OptState doodl_step(const P& model, const GuidanceLoss& L, const OptState& state, const DoodlConfig& cfg, Rng& rng) {
  cfg.validate();
  double loss = 0.0;
  auto loss_grad_fn = [&](const Tensor& x0, const Tensor& y0) {
    CropLoss lx = multicrop_loss(L, x0, cfg.multicrop, rng);
    CropLoss ly = multicrop_loss(L, y0, cfg.multicrop, rng);
    loss = 0.5 * (lx.value + ly.value);
    return std::pair<Tensor, Tensor>{0.5 * std::move(lx.grad), 0.5 * std::move(ly.grad)};
  };
  ChainGradReport rep;
  try {
    rep = edict_chain_vjp(model, state.x_T, cfg.edict, loss_grad_fn);
  } catch (const NumericalFailure& e) {
    throw NumericalFailure(std::string("DOODL gradient failed: ") + e.what(), state.iteration);
  }
  if (!std::isfinite(loss)) throw NumericalFailure("DOODL loss is not finite", state.iteration);
  if (!rep.grad.all_finite()) throw NumericalFailure("DOODL gradient is not finite", state.iteration);

  OptState next = state;
  next.last_clipped = clip_elementwise(-cfg.learning_rate * rep.grad, cfg.clip_bound);
  momentum_accumulate(next.momentum.values(), next.last_clipped.values(), cfg.momentum);
  Tensor x = state.x_T + next.momentum;
  if (cfg.perturb_variance > 0.0) {
    const Tensor noise = std::sqrt(cfg.perturb_variance) * gaussian_sample(rng, x.shape());
    if (cfg.renormalize_last) {
      x = renormalize_to(x + noise, state.original_norm);
    } else {
      x = renormalize_to(x, state.original_norm) + noise;
    }
  } else {
    x = renormalize_to(x, state.original_norm);
  }
  // The pair is re-seeded as x_T = y_T next iteration, so averaging it is the identity.
  next.x_T = std::move(x);
  next.loss_trace.push_back(loss);
  ++next.iteration;
  return next;
}

struct DoodlResult {
  Tensor x_T;
  LatentPair generation;
  std::vector<double> loss_trace;
};

template <DifferentiablePredictor P>
DoodlResult doodl_optimize(const P& model, const GuidanceLoss& L, const Tensor& x_T_init, const DoodlConfig& cfg,
                           Rng& rng) {
  cfg.validate();
  OptState state = OptState::start(x_T_init);
  for (int i = 0; i < cfg.steps; ++i) state = doodl_step(model, L, state, cfg, rng);
  LatentPair gen = edict_generate(model, state.x_T, cfg.edict);
  return {std::move(state.x_T), std::move(gen), std::move(state.loss_trace)};
}

inline OptState doodl_step(const DenoiserModel& m, const GuidanceLoss& L, const OptState& state,
                           const DoodlConfig& cfg, Rng& rng) {
  return doodl_step(BoundDenoiser(m, cfg.edict.cond), L, state, cfg, rng);
}

inline DoodlResult doodl_optimize(const DenoiserModel& m, const GuidanceLoss& L, const Tensor& x_T_init,
                                  const DoodlConfig& cfg, Rng& rng) {
  return doodl_optimize(BoundDenoiser(m, cfg.edict.cond), L, x_T_init, cfg, rng);
}

}  // namespace doodl
