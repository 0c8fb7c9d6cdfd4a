// SPDX-License-Identifier: Apache-2.0
//
// Flat, type-checked key/value configuration. Precedence is
// defaults < file < command-line overrides. Files are line based:
// `key = value`, with `#` starting a comment.
#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "doodl/error.hpp"

namespace doodl::cli {

enum class ValueType { integer, real, boolean, text };

struct KeySpec {
  std::string name;
  ValueType type;
  std::string default_value;
  std::string help;
};

inline const std::vector<KeySpec>& config_registry() {
  static const std::vector<KeySpec> keys = {
      {"seed", ValueType::integer, "0", "master seed"},
      {"num_steps", ValueType::integer, "50", "sampling steps S"},
      {"schedule", ValueType::text, "cosine", "noise schedule: cosine | linear"},
      {"p", ValueType::real, "0.93", "EDICT mixing parameter"},
      // toy data
      {"n_modes", ValueType::integer, "8", "GMM mode count"},
      {"radius", ValueType::real, "1.0", "GMM ring radius"},
      {"sigma", ValueType::real, "0.05", "GMM per-mode standard deviation"},
      {"n_points", ValueType::integer, "4096", "dataset size"},
      // denoiser
      {"hidden", ValueType::integer, "128", "denoiser hidden width"},
      {"depth", ValueType::integer, "3", "denoiser hidden layer count"},
      {"time_embed_dim", ValueType::integer, "16", "denoiser time feature size"},
      {"cond_dim", ValueType::integer, "0", "0 = unconditional, else class count"},
      {"cond_dropout", ValueType::real, "0.0", "probability of dropping the class condition in training"},
      {"train_steps", ValueType::integer, "20000", "denoiser SGD steps"},
      {"train_lr", ValueType::real, "0.01", "denoiser learning rate"},
      {"train_momentum", ValueType::real, "0.9", "denoiser momentum"},
      {"batch_size", ValueType::integer, "128", "denoiser batch size"},
      {"ema_decay", ValueType::real, "0.999", "decay of the returned weight average (0 = last iterate)"},
      // classifier
      {"clf_hidden", ValueType::integer, "64", "classifier hidden width"},
      {"clf_depth", ValueType::integer, "2", "classifier hidden layer count"},
      {"clf_train_steps", ValueType::integer, "5000", "classifier SGD steps"},
      {"clf_lr", ValueType::real, "0.05", "classifier learning rate"},
      {"clf_batch_size", ValueType::integer, "64", "classifier batch size"},
      // guidance
      {"target_class", ValueType::integer, "0", "class targeted by guidance"},
      {"loss_form", ValueType::text, "cross_entropy", "class loss: cross_entropy | bce"},
      {"loss_weight", ValueType::real, "1.0", "guidance loss weight"},
      {"guidance_scale", ValueType::real, "5.0", "one-step guidance scale s"},
      {"guidance_scales", ValueType::text, "0.1,0.3,1,5,30", "baseline scale grid for guidance_compare"},
      // DOODL
      {"doodl_lr", ValueType::real, "0.05", "DOODL learning rate"},
      {"doodl_steps", ValueType::integer, "20", "DOODL iterations m"},
      {"doodl_momentum", ValueType::real, "0.9", "DOODL momentum"},
      {"clip_bound", ValueType::real, "0.001", "elementwise clip of the raw update"},
      {"perturb_variance", ValueType::real, "0.0001", "variance of the per-update perturbation"},
      {"renormalize_last", ValueType::boolean, "true", "renormalize after (true) or before the perturbation"},
      {"multicrop", ValueType::boolean, "false", "multicrop augmentation (image data only)"},
      {"num_cutouts", ValueType::integer, "16", "crops per image"},
      {"cut_power", ValueType::real, "0.3", "crop size exponent"},
      {"model_input_size", ValueType::integer, "224", "crop output side"},
      // experiments
      {"n_seeds", ValueType::integer, "64", "seeds per experiment"},
      {"n_samples", ValueType::integer, "256", "samples for sample/guide/doodl commands"},
      {"sampler", ValueType::text, "ddim", "sample command sampler: ddim | edict"},
      {"score_target", ValueType::real, "10.0", "scalar score target A"},
      {"n_edit_points", ValueType::integer, "16", "points edited by aesthetic_edit"},
      {"retention_bound", ValueType::real, "1.5", "max ‖x0_final − x0_init‖ in aesthetic_edit"},
      {"fd_step", ValueType::real, "0.0001", "finite-difference step (relative to ‖x_T‖)"},
      {"membench_steps", ValueType::text, "10,50,200", "chain lengths for membench"},
      {"timing", ValueType::boolean, "true", "record wall-clock columns (false writes 0)"},
      // files
      {"denoiser_ckpt", ValueType::text, "denoiser.ckpt", "denoiser checkpoint path"},
      {"classifier_ckpt", ValueType::text, "classifier.ckpt", "classifier checkpoint path"},
      {"input", ValueType::text, "", "input CSV of points (invert)"},
  };
  return keys;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const KeySpec& k : config_registry())
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_bool(std::string_view v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") return out = true, true;
  if (v == "false" || v == "0" || v == "no") return out = false, true;
  return false;
}

inline void check_value(const KeySpec& k, const std::string& v) {
  auto bad = [&] { throw ConfigError("config key '" + k.name + "': invalid value '" + v + "'"); };
  switch (k.type) {
    case ValueType::integer: {
      long long x;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc{} || p != v.data() + v.size()) bad();
      break;
    }
    case ValueType::real: {
      std::size_t pos = 0;
      try {
        (void)std::stod(v, &pos);
      } catch (const std::exception&) {
        bad();
      }
      if (pos != v.size()) bad();
      break;
    }
    case ValueType::boolean: {
      bool b;
      if (!parse_bool(v, b)) bad();
      break;
    }
    case ValueType::text:
      break;
  }
}

}  // namespace detail

class Config {
 public:
  /// All registry defaults.
  Config() {
    for (const KeySpec& k : config_registry()) values_[k.name] = k.default_value;
  }

  void set(const std::string& key, const std::string& value) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    const std::string v = detail::trim(value);
    detail::check_value(*spec, v);
    values_[key] = v;
  }

  void merge_text(std::string_view text, const std::string& origin = "<text>") {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      set(detail::trim(std::string_view(body).substr(0, eq)), detail::trim(std::string_view(body).substr(eq + 1)));
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path);
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key) const { return std::stoll(typed(key, ValueType::integer)); }
  double get_real(const std::string& key) const { return std::stod(typed(key, ValueType::real)); }
  bool get_bool(const std::string& key) const {
    bool b = false;
    detail::parse_bool(typed(key, ValueType::boolean), b);
    return b;
  }
  const std::string& get_text(const std::string& key) const { return typed(key, ValueType::text); }

  /// Comma-separated list of reals from a text key.
  std::vector<double> get_real_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(get_text(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string v = detail::trim(item);
      if (v.empty()) continue;
      try {
        out.push_back(std::stod(v));
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad list element '" + v + "'");
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  /// Every key in sorted order as `key = value` lines; re-reading reproduces this config.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string& typed(const std::string& key, ValueType type) const {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    if (spec->type != type) throw ConfigError("config key '" + key + "' read with the wrong type");
    return values_.at(key);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace doodl::cli
