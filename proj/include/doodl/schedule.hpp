// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "doodl/numerics.hpp"

namespace doodl {

enum class ScheduleKind { cosine, linear };

inline std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "linear"; }

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "linear") return ScheduleKind::linear;
  throw InvalidArgument("unknown schedule kind '" + std::string(s) + "'");
}

/// Deterministic DDIM update coefficients: x_{t-1} = a·x_t + b·ε̂.
struct StepCoeffs {
  double a;
  double b;
};

/// Cumulative signal levels ᾱ_0..ᾱ_S on a single S-step grid. Position 0 is
/// clean data, position S the (clamped) pure-noise end. Samplers walk S..1.
class NoiseSchedule {
 public:
  static constexpr double kFloor = 1e-4;

  NoiseSchedule(int num_steps, ScheduleKind kind) : kind_(kind) {
    if (num_steps < 1) throw InvalidArgument("make_schedule: num_steps must be >= 1");
    alpha_bar_.resize(static_cast<std::size_t>(num_steps) + 1);
    const double S = num_steps;
    for (int t = 0; t <= num_steps; ++t) {
      double v;
      if (kind == ScheduleKind::cosine) {
        const double c = std::cos(0.5 * std::numbers::pi * t / S);
        v = std::max(c * c, kFloor);
      } else {
        v = 1.0 + (kFloor - 1.0) * (t / S);
      }
      alpha_bar_[static_cast<std::size_t>(t)] = v;
    }
    alpha_bar_.front() = 1.0;
  }

  /// Arbitrary ᾱ table; must start at 1, decrease strictly, end above 0.
  explicit NoiseSchedule(std::vector<double> alpha_bar, ScheduleKind kind = ScheduleKind::cosine)
      : kind_(kind), alpha_bar_(std::move(alpha_bar)) {
    if (alpha_bar_.size() < 2) throw InvalidArgument("schedule needs at least two levels");
    if (alpha_bar_.front() != 1.0) throw InvalidArgument("schedule must start at alpha_bar = 1");
    for (std::size_t i = 1; i < alpha_bar_.size(); ++i)
      if (!(alpha_bar_[i] < alpha_bar_[i - 1])) throw InvalidArgument("schedule must decrease strictly");
    if (!(alpha_bar_.back() > 0.0)) throw InvalidArgument("schedule must end above zero");
  }

  int num_steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  ScheduleKind kind() const noexcept { return kind_; }
  const std::vector<double>& alpha_bar() const noexcept { return alpha_bar_; }

  double alpha_bar(int t) const {
    if (t < 0 || t > num_steps()) throw InvalidArgument("schedule index " + std::to_string(t) + " out of range");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

 private:
  ScheduleKind kind_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_schedule(int num_steps, ScheduleKind kind) { return NoiseSchedule(num_steps, kind); }

/// Coefficients for the transition t -> t-1 given neighbouring signal levels.
inline StepCoeffs ddim_coeffs_from(double alpha_bar_prev, double alpha_bar_cur) {
  const double a = std::sqrt(alpha_bar_prev / alpha_bar_cur);
  const double b = std::sqrt(1.0 - alpha_bar_prev) - a * std::sqrt(1.0 - alpha_bar_cur);
  return {a, b};
}

inline StepCoeffs ddim_coeffs(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.num_steps())
    throw InvalidArgument("ddim_coeffs: step " + std::to_string(t) + " outside 1.." + std::to_string(sched.num_steps()));
  return ddim_coeffs_from(sched.alpha_bar(t - 1), sched.alpha_bar(t));
}

/// Forward noising: sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·ε.
inline Tensor noise_sample(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps) {
  x0.check_same(eps, "noise_sample");
  const double ab = sched.alpha_bar(t);
  return lincomb(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

}  // namespace doodl
