// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "doodl/guidance.hpp"
#include "support.hpp"

namespace doodl {
namespace {

Tensor unit(double angle) { return Tensor::vec({std::cos(angle), std::sin(angle)}); }

TEST(SphericalDistance, Examples) {
  EXPECT_EQ(spherical_distance(unit(0.3), unit(0.3)), 0.0);
  EXPECT_NEAR(spherical_distance(Tensor::vec({1, 0}), Tensor::vec({0, 1})), 1.772454, 5e-7);
  EXPECT_NEAR(spherical_distance(Tensor::vec({1, 0}), Tensor::vec({-1, 0})), 2.506628, 5e-7);
}

TEST(SphericalDistance, SymmetricAndMonotoneInAngle) {
  double prev = 0.0;
  for (int i = 1; i <= 100; ++i) {
    const double ang = std::numbers::pi * i / 100.0;
    const double d = spherical_distance(unit(0.0), unit(ang));
    EXPECT_EQ(d, spherical_distance(unit(ang), unit(0.0)));
    EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(SphericalDistance, ClampsBeyondAntipode) {
  EXPECT_NEAR(spherical_distance(Tensor::vec({1.0 + 1e-12, 0}), Tensor::vec({-1.0 - 1e-12, 0})),
              2.0 * std::sqrt(std::numbers::pi / 2.0), 1e-12);
}

std::shared_ptr<const ScoreModel> head() {
  return std::make_shared<const ScoreModel>(ScoreModel::linear(Tensor::vec({1.5, -0.5}), 1.0));
}

TEST(LossEval, ScalarTarget) {
  const GuidanceLoss L = GuidanceLoss::scalar_target(head(), 10.0);
  // a(x) = 1.5·x₁ − 0.5·x₂ + 1 = 3 at (2, 2).
  EXPECT_DOUBLE_EQ(loss_eval(L, Tensor::vec({2, 2})), 7.0);
  EXPECT_EQ(loss_eval(L, Tensor::vec({6, 0})), 0.0);
  EXPECT_EQ(loss_grad(L, Tensor::vec({6, 0})), Tensor({2}));
  EXPECT_THROW(loss_eval(L, Tensor::vec({1, 2, 3})), InvalidArgument);
}

TEST(LossEval, ClassTargetCertainPointIsZero) {
  Mlp net({2, 3});
  net.biases()[0] = Tensor::vec({100.0, 0.0, 0.0});
  const auto clf = std::make_shared<const ClassifierModel>(std::move(net));
  EXPECT_EQ(loss_eval(GuidanceLoss::class_target(clf, 0), Tensor::vec({0.3, 0.1})), 0.0);
  EXPECT_GT(loss_eval(GuidanceLoss::class_target(clf, 1), Tensor::vec({0.3, 0.1})), 50.0);
}

TEST(GuidanceLoss, ConstructionValidation) {
  const auto clf = std::make_shared<const ClassifierModel>(test::small_classifier(1));
  EXPECT_THROW(GuidanceLoss::class_target(clf, 3), InvalidArgument);
  EXPECT_THROW(GuidanceLoss::class_target(clf, -1), InvalidArgument);
  EXPECT_THROW(GuidanceLoss::scalar_target(head(), 10.0, 0.0), InvalidArgument);
  Rng rng(3);
  const auto emb = std::make_shared<const EmbeddingModel>(Mlp::random({2, 8, 3}, rng));
  EXPECT_THROW(GuidanceLoss::spherical(emb, Tensor::vec({1, 1, 0})), InvalidArgument);
  EXPECT_THROW(GuidanceLoss::spherical(emb, Tensor::vec({1, 0})), InvalidArgument);
}

std::vector<GuidanceLoss> all_variants(std::uint64_t seed, double weight) {
  Rng rng(seed);
  const auto clf = std::make_shared<const ClassifierModel>(test::small_classifier(seed, 4));
  const auto emb = std::make_shared<const EmbeddingModel>(Mlp::random({2, 8, 3}, rng));
  const Tensor target = renormalize_to(gaussian_sample(rng, {3}), 1.0);
  return {GuidanceLoss::spherical(emb, target, weight),
          GuidanceLoss::class_target(clf, static_cast<int>(seed % 4), ClassLossForm::cross_entropy, weight),
          GuidanceLoss::class_target(clf, static_cast<int>(seed % 4), ClassLossForm::bce, weight),
          GuidanceLoss::scalar_target(head(), 10.0, weight)};
}

TEST(LossGrad, MatchesFiniteDifferencesForEveryVariant) {
  Rng rng(71);
  for (int probe = 0; probe < 100; ++probe) {
    const Tensor x = gaussian_sample(rng, {2});
    for (const GuidanceLoss& L : all_variants(static_cast<std::uint64_t>(probe), 0.7)) {
      if (std::holds_alternative<ScalarTargetLoss>(L.variant()) && loss_eval(L, x) / L.weight() < 1e-6) continue;
      const Tensor num = test::numeric_grad([&](const Tensor& z) { return loss_eval(L, z); }, x, 1e-5);
      EXPECT_LT(rel_error(loss_grad(L, x), num), 1e-6) << "probe " << probe << " variant " << L.variant().index();
    }
  }
}

TEST(LossGrad, LinearInWeight) {
  const Tensor x = Tensor::vec({0.4, -0.8});
  const auto one = all_variants(5, 1.0), two = all_variants(5, 2.0);
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(loss_grad(two[i], x), 2.0 * loss_grad(one[i], x));
    EXPECT_EQ(loss_eval(two[i], x), 2.0 * loss_eval(one[i], x));
  }
}

TEST(ClassifierGuidedDdim, ScaleZeroIsPlainDdim) {
  const DenoiserModel m = test::small_denoiser(11);
  const auto clf = std::make_shared<const ClassifierModel>(test::small_classifier(2));
  const GuidanceLoss L = GuidanceLoss::class_target(clf, 1);
  const NoiseSchedule s = make_schedule(50, ScheduleKind::cosine);
  const Tensor x_T = Tensor::vec({0.9, 0.2});
  const Conditioning c = Conditioning::none(0);
  EXPECT_EQ(classifier_guided_ddim(m, L, x_T, s, c, 0.0), ddim_generate(m, x_T, s, c));
  EXPECT_NE(classifier_guided_ddim(m, L, x_T, s, c, 5.0), ddim_generate(m, x_T, s, c));
  EXPECT_THROW(classifier_guided_ddim(m, L, x_T, s, c, -1.0), InvalidArgument);
}

TEST(ClassifierGuidedDdim, ConstantLossIsUnguided) {
  const DenoiserModel m = test::small_denoiser(12);
  const auto flat = std::make_shared<const ScoreModel>(ScoreModel::linear(Tensor::vec({0.0, 0.0}), 4.0));
  const GuidanceLoss L = GuidanceLoss::scalar_target(flat, 10.0);
  const NoiseSchedule s = make_schedule(20, ScheduleKind::cosine);
  const Tensor x_T = Tensor::vec({-0.3, 1.4});
  EXPECT_EQ(classifier_guided_ddim(m, L, x_T, s, Conditioning::none(0), 30.0),
            ddim_generate(m, x_T, s, Conditioning::none(0)));
}

// The guidance gradient must equal the numerical gradient of L(x*_0(x_t)) in x_t.
struct GradProbe {
  const DenoiserModel* m;
  Tensor predict(const Tensor& x, int t) const { return denoiser_forward(*m, x, t, Conditioning::none(0)); }
  Tensor vjp(const Tensor& x, int t, const Tensor& g) const { return denoiser_vjp(*m, x, t, Conditioning::none(0), g); }
};

TEST(ClassifierGuidedDdim, SingleStepUpdateMatchesNumericalGradient) {
  const DenoiserModel m = test::small_denoiser(14);
  const auto clf = std::make_shared<const ClassifierModel>(test::small_classifier(4));
  const GuidanceLoss L = GuidanceLoss::class_target(clf, 2);
  const NoiseSchedule s(std::vector<double>{1.0, 0.6});
  const Tensor x = Tensor::vec({0.5, -0.25});
  const double scale = 2.0;
  const GradProbe probe{&m};
  const Tensor guided = classifier_guided_ddim(probe, L, x, s, scale);
  auto f = [&](const Tensor& z) { return loss_eval(L, one_step_x0(probe, z, 1, s)); };
  const Tensor g = test::numeric_grad(f, x, 1e-6);
  const StepCoeffs c = ddim_coeffs(s, 1);
  const Tensor eps = probe.predict(x, 1) + (scale * std::sqrt(0.4)) * g;
  EXPECT_LT(max_abs_diff(guided, lincomb(c.a, x, c.b, eps)), 1e-8);
}

}  // namespace
}  // namespace doodl
