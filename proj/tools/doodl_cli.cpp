// SPDX-License-Identifier: Apache-2.0
//
// doodl_cli: train toy models, sample, invert, guide, optimize latents and
// run the verification experiments.
//
// Exit codes: 0 success, 1 failed assertion or runtime failure, 2 usage or
// configuration error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "doodl/cli/experiments.hpp"

namespace fs = std::filesystem;
using namespace doodl;
using namespace doodl::cli;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

struct Invocation {
  std::string config_path;
  std::string out_dir = ".";
  std::map<std::string, std::string> overrides;
  std::string experiment;
};

void add_common_options(CLI::App* cmd, Invocation& inv) {
  cmd->add_option("--config", inv.config_path, "config file (key = value lines)");
  cmd->add_option("--out", inv.out_dir, "output directory")->capture_default_str();
  for (const KeySpec& k : config_registry()) {
    cmd->add_option_function<std::string>(
        "--" + k.name, [&inv, name = k.name](const std::string& v) { inv.overrides[name] = v; },
        k.help + " (default " + (k.default_value.empty() ? "\"\"" : k.default_value) + ")");
  }
}

Config resolve_config(const Invocation& inv) {
  Config cfg;
  if (!inv.config_path.empty()) cfg.merge_file(inv.config_path);
  for (const auto& [k, v] : inv.overrides) cfg.set(k, v);
  return cfg;
}

fs::path prepare_out(const Invocation& inv, const Config& cfg) {
  const fs::path out(inv.out_dir);
  fs::create_directories(out);
  write_text(out / "manifest", cfg.dump());
  return out;
}

std::vector<Tensor> seed_latents(const Config& cfg, std::size_t dim) {
  Rng rng(stream_seed(master_seed(cfg), kTagSamples));
  std::vector<Tensor> xs;
  for (int i = 0; i < positive_int(cfg, "n_samples"); ++i) xs.push_back(gaussian_sample(rng, {dim}));
  return xs;
}

int cmd_train_denoiser(const Config& cfg, const fs::path& out) {
  const TrainedDenoiser tr = train_denoiser_from(cfg);
  save_checkpoint_atomic(cfg.get_text("denoiser_ckpt"),
                         denoiser_checkpoint(tr.model, schedule_from(cfg), master_seed(cfg)));
  CsvWriter csv((out / "train_loss.csv").string(), {"step", "loss"});
  for (std::size_t i = 0; i < tr.loss_trace.size(); ++i) csv.row({std::to_string(i), fmt_num(tr.loss_trace[i])});
  std::printf("denoiser saved to %s (initial loss %s, final smoothed loss %s)\n", cfg.get_text("denoiser_ckpt").c_str(),
              fmt_num(head_mean(tr.loss_trace, 10)).c_str(), fmt_num(tail_mean(tr.loss_trace, 1000)).c_str());
  return kExitOk;
}

int cmd_train_classifier(const Config& cfg, const fs::path& out) {
  const TrainedClassifier tr = train_classifier_from(cfg);
  save_checkpoint_atomic(cfg.get_text("classifier_ckpt"),
                         classifier_checkpoint(tr.model, master_seed(cfg), tr.heldout_accuracy));
  CsvWriter csv((out / "classifier_loss.csv").string(), {"step", "loss"});
  for (std::size_t i = 0; i < tr.loss_trace.size(); ++i) csv.row({std::to_string(i), fmt_num(tr.loss_trace[i])});
  std::printf("classifier saved to %s (held-out accuracy %s)\n", cfg.get_text("classifier_ckpt").c_str(),
              fmt_num(tr.heldout_accuracy).c_str());
  return kExitOk;
}

int cmd_sample(const Config& cfg, const fs::path& out) {
  const LoadedDenoiser den = load_denoiser(cfg);
  const BoundDenoiser model(den.model, Conditioning::none(den.model.arch().cond_dim));
  const std::string sampler = cfg.get_text("sampler");
  if (sampler != "ddim" && sampler != "edict") throw ConfigError("sampler must be ddim or edict");
  const EdictConfig ec = edict_config_from(cfg, den.schedule);
  const int modes = positive_int(cfg, "n_modes");
  const double radius = cfg.get_real("radius");
  CsvWriter csv((out / "samples.csv").string(), {"x", "y", "mode"});
  std::vector<Tensor> pts;
  std::vector<int> labels;
  for (const Tensor& x_T : seed_latents(cfg, den.model.arch().data_dim)) {
    const Tensor x0 = sampler == "ddim" ? ddim_generate(model, x_T, den.schedule) : edict_generate(model, x_T, ec).x;
    const int k = nearest_mode(x0, modes, radius);
    csv.row({fmt_num(x0[0]), fmt_num(x0[1]), std::to_string(k)});
    pts.push_back(x0);
    labels.push_back(k);
  }
  render_scatter(pts, labels, (out / "samples.ppm").string(), 2.0 * radius);
  std::printf("wrote %zu samples to %s\n", pts.size(), (out / "samples.csv").c_str());
  return kExitOk;
}

int cmd_invert(const Config& cfg, const fs::path& out) {
  if (cfg.get_text("input").empty()) throw ConfigError("invert needs --input <points.csv>");
  const LoadedDenoiser den = load_denoiser(cfg);
  const EdictConfig ec = edict_config_from(cfg, den.schedule);
  const Tensor pts = read_points_csv(cfg.get_text("input"));
  if (pts.shape()[1] != den.model.arch().data_dim) throw ConfigError("input points have the wrong dimension");
  CsvWriter csv((out / "latents.csv").string(), {"x_T_1", "x_T_2", "y_T_1", "y_T_2", "roundtrip_err"});
  const Dataset wrap{pts, std::vector<int>(pts.shape()[0], 0), 1};
  for (std::size_t i = 0; i < wrap.size(); ++i) {
    const Tensor x0 = wrap.point(i);
    const LatentPair lat = edict_invert(den.model, LatentPair(x0, x0, 0), ec);
    const LatentPair back = edict_generate_from(BoundDenoiser(den.model, Conditioning::none(den.model.arch().cond_dim)),
                                                lat, ec);
    const double err = std::max(max_abs_diff(back.x, x0), max_abs_diff(back.y, x0));
    csv.row({fmt_num(lat.x[0]), fmt_num(lat.x[1]), fmt_num(lat.y[0]), fmt_num(lat.y[1]), fmt_num(err)});
  }
  std::printf("inverted %zu points into %s\n", wrap.size(), (out / "latents.csv").c_str());
  return kExitOk;
}

struct GuidanceSetup {
  LoadedDenoiser den;
  std::shared_ptr<const ClassifierModel> clf;
  int target;
  GuidanceLoss loss;
  EdictConfig edict;
};

GuidanceSetup guidance_setup(const Config& cfg) {
  LoadedDenoiser den = load_denoiser(cfg);
  auto clf = std::make_shared<const ClassifierModel>(load_classifier(cfg));
  const int target = target_class_from(cfg);
  GuidanceLoss L = GuidanceLoss::class_target(clf, target, loss_form_from(cfg), cfg.get_real("loss_weight"));
  EdictConfig ec = edict_config_from(cfg, den.schedule);
  ec.cond = guidance_conditioning(cfg, den.model);
  return {std::move(den), std::move(clf), target, std::move(L), std::move(ec)};
}

int cmd_guide(const Config& cfg, const fs::path& out) {
  const GuidanceSetup g = guidance_setup(cfg);
  const BoundDenoiser model(g.den.model, g.edict.cond);
  const double s = cfg.get_real("guidance_scale");
  if (!(s >= 0.0)) throw ConfigError("guidance_scale must be non-negative");
  CsvWriter csv((out / "guided.csv").string(), {"x", "y", "final_loss", "target_prob"});
  std::vector<Tensor> pts;
  std::vector<int> labels;
  double prob = 0.0;
  for (const Tensor& x_T : seed_latents(cfg, g.den.model.arch().data_dim)) {
    const Tensor x0 = classifier_guided_ddim(model, g.loss, x_T, g.den.schedule, s);
    const double pr = class_probability(*g.clf, x0, g.target);
    prob += pr;
    csv.row({fmt_num(x0[0]), fmt_num(x0[1]), fmt_num(loss_eval(g.loss, x0)), fmt_num(pr)});
    pts.push_back(x0);
    labels.push_back(nearest_mode(x0, positive_int(cfg, "n_modes"), cfg.get_real("radius")));
  }
  render_scatter(pts, labels, (out / "guided.ppm").string(), 2.0 * cfg.get_real("radius"));
  std::printf("mean target probability %s over %zu samples\n", fmt_num(prob / static_cast<double>(pts.size())).c_str(),
              pts.size());
  return kExitOk;
}

int cmd_doodl(const Config& cfg, const fs::path& out) {
  const GuidanceSetup g = guidance_setup(cfg);
  const BoundDenoiser model(g.den.model, g.edict.cond);
  const DoodlConfig dcfg = doodl_config_from(cfg, g.edict);
  CsvWriter csv((out / "doodl.csv").string(), {"sample", "x", "y", "initial_loss", "final_loss", "target_prob"});
  std::vector<Tensor> pts;
  std::vector<int> labels;
  double prob = 0.0;
  int i = 0;
  for (const Tensor& x_T : seed_latents(cfg, g.den.model.arch().data_dim)) {
    Rng rng(stream_seed(master_seed(cfg), kTagOptimizer + static_cast<std::uint64_t>(i)));
    const DoodlResult res = doodl_optimize(model, g.loss, x_T, dcfg, rng);
    const Tensor& x0 = res.generation.x;
    const double init = res.loss_trace.empty() ? loss_eval(g.loss, x0) : res.loss_trace.front();
    const double pr = class_probability(*g.clf, x0, g.target);
    prob += pr;
    csv.row({std::to_string(i), fmt_num(x0[0]), fmt_num(x0[1]), fmt_num(init), fmt_num(loss_eval(g.loss, x0)),
             fmt_num(pr)});
    pts.push_back(x0);
    labels.push_back(nearest_mode(x0, positive_int(cfg, "n_modes"), cfg.get_real("radius")));
    ++i;
  }
  render_scatter(pts, labels, (out / "doodl.ppm").string(), 2.0 * cfg.get_real("radius"));
  std::printf("mean target probability %s over %zu samples\n", fmt_num(prob / static_cast<double>(pts.size())).c_str(),
              pts.size());
  return kExitOk;
}

int cmd_experiment(const Invocation& inv, const Config& cfg) {
  const ExperimentResult r = run_experiment(inv.experiment, cfg, inv.out_dir);
  std::fputs(format_checks(r).c_str(), stdout);
  return r.passed() ? kExitOk : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent optimization through invertible diffusion sampling on toy data"};
  app.require_subcommand(1);
  Invocation inv;
  using Handler = int (*)(const Config&, const fs::path&);
  const std::vector<std::tuple<std::string, std::string, Handler>> simple = {
      {"train-denoiser", "train the noise predictor and save a checkpoint", &cmd_train_denoiser},
      {"train-classifier", "train the mode classifier and save a checkpoint", &cmd_train_classifier},
      {"sample", "generate samples with DDIM or EDICT", &cmd_sample},
      {"invert", "EDICT-invert points from --input", &cmd_invert},
      {"guide", "one-step classifier-guided DDIM", &cmd_guide},
      {"doodl", "optimize initial latents toward the target class", &cmd_doodl},
  };
  std::map<CLI::App*, Handler> handlers;
  for (const auto& [name, help, fn] : simple) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common_options(sub, inv);
    handlers[sub] = fn;
  }
  CLI::App* exp = app.add_subcommand("experiment", "run a verification experiment");
  std::vector<std::string> names;
  for (const auto& [n, fn] : experiment_registry()) names.push_back(n);
  exp->add_option("name", inv.experiment, "experiment name")->required()->check(CLI::IsMember(names));
  add_common_options(exp, inv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const Config cfg = resolve_config(inv);
    if (exp->parsed()) return cmd_experiment(inv, cfg);
    for (const auto& [sub, fn] : handlers)
      if (sub->parsed()) return fn(cfg, prepare_out(inv, cfg));
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure at step " << e.step() << ": " << e.what() << "\n";
    return kExitFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailed;
  }
}
