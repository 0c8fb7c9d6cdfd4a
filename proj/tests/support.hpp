// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: small random models, trained artifacts
// produced by the fixture tests, and comparison utilities.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include "doodl/cli/setup.hpp"
#include "doodl/doodl.hpp"

namespace doodl::test {

inline std::filesystem::path artifact_dir() { return DOODL_ARTIFACT_DIR; }
inline std::filesystem::path config_dir() { return DOODL_CONFIG_DIR; }
inline std::string denoiser_path() { return (artifact_dir() / "denoiser.ckpt").string(); }
inline std::string classifier_path() { return (artifact_dir() / "classifier.ckpt").string(); }

/// Default configuration pointing at the fixture checkpoints.
inline cli::Config artifact_config() {
  cli::Config cfg;
  cfg.set("denoiser_ckpt", denoiser_path());
  cfg.set("classifier_ckpt", classifier_path());
  return cfg;
}

inline const cli::LoadedDenoiser& trained_denoiser() {
  static const cli::LoadedDenoiser d = cli::load_denoiser(artifact_config());
  return d;
}

inline std::shared_ptr<const ClassifierModel> trained_classifier() {
  static const auto c = std::make_shared<const ClassifierModel>(cli::load_classifier(artifact_config()));
  return c;
}

/// Narrow random denoiser with output scale large enough to make the chain nonlinear.
inline DenoiserModel small_denoiser(std::uint64_t seed, std::size_t hidden = 16, std::size_t cond_dim = 0) {
  DenoiserArch a;
  a.hidden = hidden;
  a.depth = 2;
  a.time_embed_dim = 4;
  a.cond_dim = cond_dim;
  Rng rng(seed);
  return DenoiserModel::random(a, rng);
}

inline ClassifierModel small_classifier(std::uint64_t seed, std::size_t n_classes = 3) {
  Rng rng(seed);
  return ClassifierModel(Mlp::random(ClassifierModel::widths(2, n_classes, 8, 2), rng));
}

inline EdictConfig edict(double p, int steps) {
  EdictConfig e;
  e.p = p;
  e.sched = NoiseSchedule(steps, ScheduleKind::cosine);
  return e;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Central-difference gradient of a scalar function of a tensor.
template <class F>
Tensor numeric_grad(F&& f, const Tensor& x, double h) {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

}  // namespace doodl::test
