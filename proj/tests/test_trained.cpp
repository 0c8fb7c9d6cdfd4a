// SPDX-License-Identifier: Apache-2.0
//
// Properties of the models trained by the fixture tests.
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doodl/cli/io.hpp"
#include "support.hpp"

namespace doodl {
namespace {

constexpr int kModes = 8;
constexpr double kRadius = 1.0, kSigma = 0.05;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double dist_to_nearest_mode(const Tensor& x) {
  return l2_norm(x - cli::gmm_mode_center(cli::nearest_mode(x, kModes, kRadius), kModes, kRadius));
}

TEST(Trained, TrainingHalvesTheLoss) {
  std::ifstream in(test::artifact_dir() / "train_loss.csv");
  ASSERT_TRUE(in) << "missing train_loss.csv";
  std::string line;
  std::getline(in, line);
  std::vector<double> trace;
  while (std::getline(in, line)) trace.push_back(std::stod(line.substr(line.find(',') + 1)));
  ASSERT_EQ(trace.size(), 20000u);
  EXPECT_LT(tail_mean(trace, 1000), 0.5 * head_mean(trace, 10));
}

TEST(Trained, DdimSamplesLandOnModes) {
  const auto& d = test::trained_denoiser();
  Rng rng(cli::stream_seed(0, cli::kTagSamples));
  int hits = 0;
  for (int i = 0; i < 256; ++i) {
    const Tensor x0 = ddim_generate(d.model, gaussian_sample(rng, {2}), d.schedule, Conditioning::none(0));
    hits += dist_to_nearest_mode(x0) < 3.0 * kSigma;
  }
  EXPECT_GE(hits, static_cast<int>(0.9 * 256));
}

TEST(Trained, FiniteFarOutsideSupport) {
  const auto& d = test::trained_denoiser();
  for (double r : {10.0, 100.0, 1e4})
    for (int t : {1, 25, 50})
      EXPECT_TRUE(denoiser_forward(d.model, Tensor::vec({r, -r}), t, Conditioning::none(0)).all_finite());
}

TEST(Trained, ClassifierRecognisesModeCenters) {
  const auto clf = test::trained_classifier();
  int right = 0;
  for (int k = 0; k < kModes; ++k)
    right += argmax(classifier_forward(*clf, cli::gmm_mode_center(k, kModes, kRadius))) == k;
  EXPECT_GE(right, 7);
  const cli::Checkpoint c = cli::load_checkpoint(test::classifier_path());
  EXPECT_GE(c.meta("heldout_accuracy"), 0.95);
}

TEST(Trained, EdictRoundTripThroughTrainedModel) {
  const auto& d = test::trained_denoiser();
  const EdictConfig cfg = test::edict(0.93, 50);
  Rng rng(3);
  for (int i = 0; i < 16; ++i) {
    const Tensor z = gaussian_sample(rng, {2});
    const LatentPair back = edict_invert(d.model, edict_generate(d.model, z, cfg), cfg);
    EXPECT_LT(std::max(max_abs_diff(back.x, z), max_abs_diff(back.y, z)), 1e-8);
  }
}

TEST(Trained, InvertedDataPointsRoundTripAndLookGaussian) {
  const auto& d = test::trained_denoiser();
  const EdictConfig cfg = test::edict(0.93, 50);
  Rng rng(4);
  const Dataset data = cli::make_gmm_dataset(kModes, kRadius, kSigma, 32, rng);
  const BoundDenoiser b(d.model, Conditioning::none(0));
  double sq = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x0 = data.point(i);
    const LatentPair lat = edict_invert(d.model, LatentPair(x0, x0, 0), cfg);
    const LatentPair back = edict_generate_from(b, lat, cfg);
    EXPECT_LT(std::max(max_abs_diff(back.x, x0), max_abs_diff(back.y, x0)), 1e-8);
    for (const Tensor& v : {lat.x, lat.y}) {
      ASSERT_TRUE(v.all_finite());
      EXPECT_LE(l2_norm(v), 5.0 * std::sqrt(2.0));
      sq += dot(v, v);
    }
  }
  // E‖z‖² = 2 for a standard 2-D Gaussian.
  const double mean_sq = sq / (2.0 * static_cast<double>(data.size()));
  EXPECT_GT(mean_sq, 1.0);
  EXPECT_LT(mean_sq, 3.0);
}

// Median ‖x0 − y0‖/‖x0‖ over 64 seeds.
double edict_drift(double p) {
  const auto& d = test::trained_denoiser();
  const EdictConfig cfg = test::edict(p, 50);
  Rng rng(5);
  std::vector<double> r;
  for (int i = 0; i < 64; ++i) {
    const LatentPair out = edict_generate(d.model, gaussian_sample(rng, {2}), cfg);
    r.push_back(l2_norm(out.x - out.y) / l2_norm(out.x));
  }
  return median(r);
}

TEST(Trained, EdictPairDriftIsSmallAtModerateMixing) {
  EXPECT_LT(edict_drift(0.8), 0.05);
  EXPECT_LT(edict_drift(0.7), edict_drift(0.9));
}

TEST(Trained, EdictSamplesLandOnModes) {
  const auto& d = test::trained_denoiser();
  for (double p : {0.5, 0.7}) {
    const EdictConfig cfg = test::edict(p, 50);
    Rng rng(6);
    int hits = 0;
    for (int i = 0; i < 128; ++i) hits += dist_to_nearest_mode(edict_generate(d.model, gaussian_sample(rng, {2}), cfg).x) < 3.0 * kSigma;
    EXPECT_GE(hits, static_cast<int>(0.9 * 128)) << "p " << p;
  }
}

TEST(Trained, EdictWithoutMixingDrifts) {
  const auto& d = test::trained_denoiser();
  const EdictConfig cfg = test::edict(1.0, 50);
  Rng rng(6);
  std::vector<double> norms;
  for (int i = 0; i < 64; ++i) norms.push_back(l2_norm(edict_generate(d.model, gaussian_sample(rng, {2}), cfg).x));
  EXPECT_GT(median(norms), 5.0 * kRadius);
}

TEST(Trained, GuidanceRaisesTargetRate) {
  const auto& d = test::trained_denoiser();
  const auto clf = test::trained_classifier();
  const GuidanceLoss L = GuidanceLoss::class_target(clf, 0);
  int best = 0, unguided = 0;
  for (double s : {1.0, 5.0, 30.0}) {
    int hits = 0, plain = 0;
    for (int i = 0; i < 64; ++i) {
      Rng rng(cli::stream_seed(0, cli::kTagLatent + static_cast<std::uint64_t>(i)));
      const Tensor z = gaussian_sample(rng, {2});
      hits += argmax(classifier_forward(*clf, classifier_guided_ddim(d.model, L, z, d.schedule, Conditioning::none(0), s))) == 0;
      plain += argmax(classifier_forward(*clf, ddim_generate(d.model, z, d.schedule, Conditioning::none(0)))) == 0;
    }
    best = std::max(best, hits);
    unguided = plain;
  }
  EXPECT_GT(best, unguided);
}

TEST(Trained, DoodlLowersLossInAggregate) {
  const auto& d = test::trained_denoiser();
  const auto clf = test::trained_classifier();
  const GuidanceLoss L = GuidanceLoss::class_target(clf, 0);
  DoodlConfig cfg;
  cfg.edict = test::edict(0.7, 50);
  cfg.clip_bound = 0.1;
  std::vector<double> change;
  int lowered = 0;
  for (int i = 0; i < 32; ++i) {
    Rng lat(cli::stream_seed(0, cli::kTagLatent + static_cast<std::uint64_t>(i)));
    Rng opt(cli::stream_seed(0, cli::kTagOptimizer + static_cast<std::uint64_t>(i)));
    const Tensor z = gaussian_sample(lat, {2});
    const DoodlResult r = doodl_optimize(d.model, L, z, cfg, opt);
    const double final_loss = 0.5 * (loss_eval(L, r.generation.x) + loss_eval(L, r.generation.y));
    change.push_back(final_loss - r.loss_trace.front());
    lowered += final_loss < r.loss_trace.front();
  }
  EXPECT_LT(median(change), 0.0);
  EXPECT_GE(lowered, 29);
  RecordProperty("lowered", lowered);
  std::cout << "DOODL lowered the loss on " << lowered << "/32 seeds\n";
}

}  // namespace
}  // namespace doodl
