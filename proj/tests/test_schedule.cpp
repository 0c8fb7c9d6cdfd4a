// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "doodl/sampling.hpp"
#include "doodl/schedule.hpp"

namespace doodl {
namespace {

TEST(MakeSchedule, CosineEndpoints) {
  const NoiseSchedule s = make_schedule(50, ScheduleKind::cosine);
  EXPECT_EQ(s.num_steps(), 50);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bar(50), 1e-4);
}

TEST(MakeSchedule, CosineInteriorValues) {
  const NoiseSchedule s = make_schedule(50, ScheduleKind::cosine);
  for (int t = 1; t < 50; ++t) {
    const double c = std::cos(M_PI / 2.0 * t / 50.0);
    EXPECT_DOUBLE_EQ(s.alpha_bar(t), std::max(c * c, 1e-4));
  }
}

TEST(MakeSchedule, LinearSingleStep) {
  const NoiseSchedule s = make_schedule(1, ScheduleKind::linear);
  ASSERT_EQ(s.alpha_bar().size(), 2u);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_NEAR(s.alpha_bar(1), 1e-4, 1e-15);
}

TEST(MakeSchedule, RejectsZeroSteps) {
  EXPECT_THROW(make_schedule(0, ScheduleKind::cosine), InvalidArgument);
  EXPECT_THROW(parse_schedule_kind("quadratic"), InvalidArgument);
}

TEST(MakeSchedule, InvariantsHoldForManyLengths) {
  for (ScheduleKind k : {ScheduleKind::cosine, ScheduleKind::linear})
    for (int S : {1, 2, 5, 10, 50, 100, 157}) {
      const NoiseSchedule s = make_schedule(S, k);
      EXPECT_EQ(s.alpha_bar(0), 1.0);
      EXPECT_NEAR(s.alpha_bar(S), 1e-4, 1e-15);
      for (int t = 1; t <= S; ++t) {
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1)) << "S=" << S << " t=" << t;
        const StepCoeffs c = ddim_coeffs(s, t);
        EXPECT_GT(c.a, 0.0);
        EXPECT_TRUE(std::isfinite(c.b));
      }
    }
}

TEST(MakeSchedule, CustomTableValidation) {
  EXPECT_NO_THROW(NoiseSchedule(std::vector<double>{1.0, 0.5, 0.25}));
  EXPECT_THROW(NoiseSchedule(std::vector<double>{0.9, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule(std::vector<double>{1.0, 0.5, 0.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule(std::vector<double>{1.0, 0.0}), InvalidArgument);
}

TEST(DdimCoeffs, Examples) {
  const StepCoeffs same = ddim_coeffs_from(0.7, 0.7);
  EXPECT_DOUBLE_EQ(same.a, 1.0);
  EXPECT_DOUBLE_EQ(same.b, 0.0);
  const StepCoeffs ones = ddim_coeffs_from(1.0, 1.0);
  EXPECT_DOUBLE_EQ(ones.a, 1.0);
  EXPECT_DOUBLE_EQ(ones.b, 0.0);
  const StepCoeffs c = ddim_coeffs_from(0.5, 0.25);
  EXPECT_NEAR(c.a, 1.414214, 5e-7);
  EXPECT_NEAR(c.b, -0.517638, 5e-7);
}

TEST(DdimCoeffs, TableLookupAndRange) {
  const NoiseSchedule s(std::vector<double>{1.0, 0.5, 0.25});
  const StepCoeffs c = ddim_coeffs(s, 2);
  EXPECT_NEAR(c.a, std::sqrt(2.0), 1e-15);
  EXPECT_THROW(ddim_coeffs(s, 0), InvalidArgument);
  EXPECT_THROW(ddim_coeffs(s, 3), InvalidArgument);
}

TEST(NoiseSample, Examples) {
  const NoiseSchedule s(std::vector<double>{1.0, 0.5, 0.25});
  const Tensor x0 = Tensor::vec({1, 0}), eps = Tensor::vec({0, 1});
  EXPECT_EQ(noise_sample(s, x0, 0, eps), x0);
  const Tensor x2 = noise_sample(s, x0, 2, eps);
  EXPECT_NEAR(x2[0], 0.5, 1e-12);
  EXPECT_NEAR(x2[1], 0.866025, 5e-7);
  const Tensor z = noise_sample(s, x0, 1, Tensor({2}));
  EXPECT_DOUBLE_EQ(z[0], std::sqrt(0.5));
  EXPECT_THROW(noise_sample(s, x0, 1, Tensor::vec({1, 2, 3})), InvalidArgument);
}

// A predictor that returns the true noise reconstructs x0 exactly with one step.
struct OracleNoise {
  Tensor eps;
  Tensor predict(const Tensor&, int) const { return eps; }
  Tensor vjp(const Tensor& x, int, const Tensor&) const { return Tensor::zeros_like(x); }
};

TEST(NoiseSample, PerfectPredictionInvertsInOneStep) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const NoiseSchedule s = make_schedule(1, ScheduleKind::cosine);
    const Tensor x0 = gaussian_sample(rng, {3}), eps = gaussian_sample(rng, {3});
    const Tensor xt = noise_sample(s, x0, 1, eps);
    const Tensor rec = ddim_generate(OracleNoise{eps}, xt, s);
    EXPECT_LT(max_abs_diff(rec, x0), 1e-10);
  }
}

TEST(NoiseSample, PerfectPredictionInvertsAnyChainWhenNoiseIsShared) {
  // With a fixed ε the DDIM chain stays on the line √ᾱ_t x0 + √(1−ᾱ_t) ε.
  Rng rng(5);
  const NoiseSchedule s = make_schedule(50, ScheduleKind::cosine);
  const Tensor x0 = gaussian_sample(rng, {2}), eps = gaussian_sample(rng, {2});
  const Tensor xt = noise_sample(s, x0, 30, eps);
  EXPECT_LT(max_abs_diff(ddim_generate_from(OracleNoise{eps}, xt, 30, s), x0), 1e-10);
}

}  // namespace
}  // namespace doodl
