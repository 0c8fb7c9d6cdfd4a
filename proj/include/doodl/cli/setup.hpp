// SPDX-License-Identifier: Apache-2.0
//
// Builds library objects from a resolved Config, and the training and
// generation commands shared by the CLI, the experiments and the tests.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "doodl/cli/checkpoint.hpp"
#include "doodl/cli/config.hpp"
#include "doodl/cli/io.hpp"
#include "doodl/doodl.hpp"

namespace doodl::cli {

/// Independent sub-stream seed for a named purpose.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
  Rng mix(seed ^ (0x9E3779B97F4A7C15ULL * (tag + 1)));
  return mix.next_u64();
}

// Stream tags. Per-seed streams add the seed index to a base tag.
inline constexpr std::uint64_t kTagData = 1;
inline constexpr std::uint64_t kTagDenoiserInit = 2;
inline constexpr std::uint64_t kTagDenoiserTrain = 3;
inline constexpr std::uint64_t kTagClassifierTrain = 4;
inline constexpr std::uint64_t kTagHeldout = 5;
inline constexpr std::uint64_t kTagSamples = 6;
inline constexpr std::uint64_t kTagLatent = 1'000'000;
inline constexpr std::uint64_t kTagOptimizer = 2'000'000;
inline constexpr std::uint64_t kTagModel = 3'000'000;

inline std::uint64_t master_seed(const Config& cfg) { return static_cast<std::uint64_t>(cfg.get_int("seed")); }

inline int positive_int(const Config& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v < 1) throw ConfigError("config key '" + key + "' must be >= 1");
  return static_cast<int>(v);
}

inline int non_negative_int(const Config& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be >= 0");
  return static_cast<int>(v);
}

inline NoiseSchedule schedule_from(const Config& cfg) {
  try {
    return NoiseSchedule(positive_int(cfg, "num_steps"), parse_schedule_kind(cfg.get_text("schedule")));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

inline Dataset dataset_from(const Config& cfg, std::uint64_t tag, std::size_t n_points) {
  Rng rng(stream_seed(master_seed(cfg), tag));
  return make_gmm_dataset(positive_int(cfg, "n_modes"), cfg.get_real("radius"), cfg.get_real("sigma"), n_points, rng);
}

inline Dataset training_data(const Config& cfg) {
  return dataset_from(cfg, kTagData, static_cast<std::size_t>(positive_int(cfg, "n_points")));
}

inline DenoiserArch denoiser_arch_from(const Config& cfg) {
  DenoiserArch a;
  a.hidden = static_cast<std::size_t>(positive_int(cfg, "hidden"));
  a.depth = static_cast<std::size_t>(non_negative_int(cfg, "depth"));
  a.time_embed_dim = static_cast<std::size_t>(positive_int(cfg, "time_embed_dim"));
  a.cond_dim = static_cast<std::size_t>(non_negative_int(cfg, "cond_dim"));
  if (a.time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
  if (a.cond_dim != 0 && static_cast<int>(a.cond_dim) != cfg.get_int("n_modes"))
    throw ConfigError("cond_dim must be 0 or equal to n_modes");
  return a;
}

inline TrainConfig train_config_from(const Config& cfg) {
  TrainConfig t;
  t.steps = non_negative_int(cfg, "train_steps");
  t.lr = cfg.get_real("train_lr");
  t.momentum = cfg.get_real("train_momentum");
  t.batch_size = static_cast<std::size_t>(positive_int(cfg, "batch_size"));
  t.cond_dropout = cfg.get_real("cond_dropout");
  t.ema_decay = cfg.get_real("ema_decay");
  if (!(t.ema_decay >= 0.0 && t.ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  return t;
}

inline ClassifierTrainConfig classifier_config_from(const Config& cfg) {
  ClassifierTrainConfig c;
  c.hidden = static_cast<std::size_t>(positive_int(cfg, "clf_hidden"));
  c.depth = static_cast<std::size_t>(non_negative_int(cfg, "clf_depth"));
  c.steps = non_negative_int(cfg, "clf_train_steps");
  c.lr = cfg.get_real("clf_lr");
  c.batch_size = static_cast<std::size_t>(positive_int(cfg, "clf_batch_size"));
  return c;
}

inline EdictConfig edict_config_from(const Config& cfg, const NoiseSchedule& sched) {
  EdictConfig e;
  e.p = cfg.get_real("p");
  e.sched = sched;
  try {
    e.validate();
  } catch (const InvalidArgument& err) {
    throw ConfigError(err.what());
  }
  return e;
}

inline DoodlConfig doodl_config_from(const Config& cfg, const EdictConfig& edict) {
  DoodlConfig d;
  d.learning_rate = cfg.get_real("doodl_lr");
  d.steps = non_negative_int(cfg, "doodl_steps");
  d.momentum = cfg.get_real("doodl_momentum");
  d.clip_bound = cfg.get_real("clip_bound");
  d.perturb_variance = cfg.get_real("perturb_variance");
  d.renormalize_last = cfg.get_bool("renormalize_last");
  d.multicrop.enabled = cfg.get_bool("multicrop");
  d.multicrop.num_cutouts = positive_int(cfg, "num_cutouts");
  d.multicrop.cut_power = cfg.get_real("cut_power");
  d.multicrop.model_input_size = static_cast<std::size_t>(positive_int(cfg, "model_input_size"));
  d.edict = edict;
  try {
    d.validate();
  } catch (const InvalidArgument& err) {
    throw ConfigError(err.what());
  }
  if (d.multicrop.enabled) throw ConfigError("multicrop cannot be enabled for 2-D point data");
  return d;
}

inline ClassLossForm loss_form_from(const Config& cfg) {
  const std::string& f = cfg.get_text("loss_form");
  if (f == "cross_entropy") return ClassLossForm::cross_entropy;
  if (f == "bce") return ClassLossForm::bce;
  throw ConfigError("loss_form must be cross_entropy or bce, got '" + f + "'");
}

inline int target_class_from(const Config& cfg) {
  const long long k = cfg.get_int("target_class");
  if (k < 0 || k >= cfg.get_int("n_modes")) throw ConfigError("target_class out of range");
  return static_cast<int>(k);
}

/// Conditioning for guided generation: the target class for conditional models.
inline Conditioning guidance_conditioning(const Config& cfg, const DenoiserModel& m) {
  const std::size_t dim = m.arch().cond_dim;
  return dim == 0 ? Conditioning::none(0) : Conditioning::one_hot(target_class_from(cfg), dim);
}

// ---------------------------------------------------------------------------
// Checkpoint access

inline Checkpoint read_checkpoint_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing " + what + " checkpoint '" + path + "'");
  return load_checkpoint(path);
}

/// The trained denoiser; its schedule must match the configured one.
inline LoadedDenoiser load_denoiser(const Config& cfg) {
  LoadedDenoiser d = denoiser_from_checkpoint(read_checkpoint_file(cfg.get_text("denoiser_ckpt"), "denoiser"));
  const NoiseSchedule want = schedule_from(cfg);
  if (d.schedule.num_steps() != want.num_steps() || d.schedule.kind() != want.kind())
    throw ConfigError("denoiser checkpoint was trained with " + std::string(to_string(d.schedule.kind())) + "/" +
                      std::to_string(d.schedule.num_steps()) + " steps, config asks for " +
                      std::string(to_string(want.kind())) + "/" + std::to_string(want.num_steps()));
  return d;
}

inline ClassifierModel load_classifier(const Config& cfg) {
  ClassifierModel m = classifier_from_checkpoint(read_checkpoint_file(cfg.get_text("classifier_ckpt"), "classifier"));
  if (static_cast<long long>(m.n_classes()) != cfg.get_int("n_modes"))
    throw ConfigError("classifier checkpoint has " + std::to_string(m.n_classes()) + " classes, config has n_modes " +
                      std::to_string(cfg.get_int("n_modes")));
  return m;
}

// ---------------------------------------------------------------------------
// Training

inline TrainedDenoiser train_denoiser_from(const Config& cfg) {
  const Dataset data = training_data(cfg);
  Rng init_rng(stream_seed(master_seed(cfg), kTagDenoiserInit));
  DenoiserModel init = DenoiserModel::random(denoiser_arch_from(cfg), init_rng);
  Rng train_rng(stream_seed(master_seed(cfg), kTagDenoiserTrain));
  return train_denoiser(data, schedule_from(cfg), std::move(init), train_config_from(cfg), train_rng);
}

inline TrainedClassifier train_classifier_from(const Config& cfg) {
  const Dataset data = training_data(cfg);
  Rng rng(stream_seed(master_seed(cfg), kTagClassifierTrain));
  return train_classifier(data, classifier_config_from(cfg), rng);
}

/// Writes `path` through a temporary sibling so readers never see a partial file.
inline void save_checkpoint_atomic(const std::string& path, const Checkpoint& ckpt) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  save_checkpoint(tmp.string(), ckpt);
  std::filesystem::rename(tmp, target);
}

}  // namespace doodl::cli
