// SPDX-License-Identifier: Apache-2.0
//
// Experiment runners. Each writes its CSV tables, a `manifest` holding the
// resolved config and a `summary.txt` of its embedded assertions under the
// output directory.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "doodl/cli/setup.hpp"

namespace doodl::cli {

struct Check {
  std::string name;
  bool passed;
  std::string detail;
};

struct ExperimentResult {
  std::vector<Check> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
  void check(std::string name, bool ok, std::string detail) {
    checks.push_back({std::move(name), ok, std::move(detail)});
  }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::string path_in(const std::filesystem::path& dir, const std::string& name) { return (dir / name).string(); }

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

inline Tensor seed_latent(const Config& cfg, int i, std::size_t dim) {
  Rng r(stream_seed(master_seed(cfg), kTagLatent + static_cast<std::uint64_t>(i)));
  return gaussian_sample(r, {dim});
}

inline DenoiserModel random_denoiser(const Config& cfg, int i) {
  Rng r(stream_seed(master_seed(cfg), kTagModel + static_cast<std::uint64_t>(i)));
  return DenoiserModel::random(denoiser_arch_from(cfg), r);
}

inline std::vector<int> int_list(const Config& cfg, const std::string& key) {
  std::vector<int> out;
  for (double v : cfg.get_real_list(key)) {
    if (v != std::floor(v) || v < 1) throw ConfigError("config key '" + key + "': expected positive integers");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// misalignment: one-step x0 estimate vs the true DDIM output along trajectories.

inline ExperimentResult experiment_misalignment(const Config& cfg, const std::filesystem::path& out) {
  const LoadedDenoiser den = load_denoiser(cfg);
  const BoundDenoiser model(den.model, Conditioning::none(den.model.arch().cond_dim));
  const NoiseSchedule& sched = den.schedule;
  const int S = sched.num_steps();
  const int n = positive_int(cfg, "n_seeds");
  std::vector<std::vector<double>> err(static_cast<std::size_t>(S) + 1);
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor> traj(static_cast<std::size_t>(S) + 1);
    traj[static_cast<std::size_t>(S)] = detail::seed_latent(cfg, i, den.model.arch().data_dim);
    for (int t = S; t >= 1; --t)
      traj[static_cast<std::size_t>(t) - 1] = ddim_step(model, traj[static_cast<std::size_t>(t)], t, sched);
    // DDIM is deterministic, so finishing the chain from any x_t on it lands on traj[0].
    const Tensor& x0 = traj[0];
    for (int t = 1; t <= S; ++t)
      err[static_cast<std::size_t>(t)].push_back(l2_norm(one_step_x0(model, traj[static_cast<std::size_t>(t)], t, sched) - x0));
  }
  CsvWriter csv(detail::path_in(out, "misalignment.csv"), {"t", "mean_err", "std_err", "n_seeds"});
  for (int t = 1; t <= S; ++t) {
    const auto& e = err[static_cast<std::size_t>(t)];
    csv.row({std::to_string(t), fmt_num(detail::mean_of(e)), fmt_num(detail::std_of(e)), std::to_string(n)});
  }
  const double e1 = detail::mean_of(err[1]);
  const double eS = detail::mean_of(err[static_cast<std::size_t>(S)]);
  const double scale = cfg.get_real("radius");
  ExperimentResult r;
  r.check("e(S) >= 5 e(1)", eS >= 5.0 * e1, "e(S) = " + fmt_num(eS) + ", e(1) = " + fmt_num(e1));
  r.check("e(1) < 0.05 data scale", e1 < 0.05 * scale, "e(1) = " + fmt_num(e1) + ", bound " + fmt_num(0.05 * scale));
  return r;
}

// ---------------------------------------------------------------------------
// guidance_compare: unguided DDIM, one-step guidance over a scale grid, DOODL.

struct GuidanceRow {
  int seed;
  std::string method;
  double final_loss;
  double target_prob;
  int steps;
  double wall_ms;
};

inline std::string baseline_name(double s) { return "baseline_s" + fmt_num(s); }

inline ExperimentResult experiment_guidance_compare(const Config& cfg, const std::filesystem::path& out) {
  const LoadedDenoiser den = load_denoiser(cfg);
  auto clf = std::make_shared<const ClassifierModel>(load_classifier(cfg));
  const int target = target_class_from(cfg);
  const GuidanceLoss L = GuidanceLoss::class_target(clf, target, loss_form_from(cfg), cfg.get_real("loss_weight"));
  EdictConfig edict = edict_config_from(cfg, den.schedule);
  edict.cond = guidance_conditioning(cfg, den.model);
  const DoodlConfig dcfg = doodl_config_from(cfg, edict);
  const BoundDenoiser model(den.model, edict.cond);
  const std::vector<double> scales = cfg.get_real_list("guidance_scales");
  const bool timing = cfg.get_bool("timing");
  const int n = positive_int(cfg, "n_seeds");
  const int S = den.schedule.num_steps();

  std::vector<GuidanceRow> rows;
  for (int i = 0; i < n; ++i) {
    const Tensor x_T = detail::seed_latent(cfg, i, den.model.arch().data_dim);
    auto record = [&](const std::string& method, const Tensor& x0, int steps, const detail::Stopwatch& sw) {
      rows.push_back({i, method, loss_eval(L, x0), class_probability(*clf, x0, target), steps, sw.ms()});
    };
    {
      detail::Stopwatch sw(timing);
      const Tensor x0 = ddim_generate(model, x_T, den.schedule);
      record("unguided", x0, S, sw);
    }
    for (double s : scales) {
      detail::Stopwatch sw(timing);
      const Tensor x0 = classifier_guided_ddim(model, L, x_T, den.schedule, s);
      record(baseline_name(s), x0, S, sw);
    }
    {
      detail::Stopwatch sw(timing);
      Rng rng(stream_seed(master_seed(cfg), kTagOptimizer + static_cast<std::uint64_t>(i)));
      const DoodlResult res = doodl_optimize(model, L, x_T, dcfg, rng);
      record("doodl", res.generation.x, dcfg.steps, sw);
    }
  }

  CsvWriter csv(detail::path_in(out, "guidance_compare.csv"),
                {"seed", "method", "final_loss", "target_prob", "steps", "wall_ms"});
  std::map<std::string, std::vector<const GuidanceRow*>> by_method;
  for (const GuidanceRow& row : rows) {
    csv.row({std::to_string(row.seed), row.method, fmt_num(row.final_loss), fmt_num(row.target_prob),
             std::to_string(row.steps), fmt_num(row.wall_ms)});
    by_method[row.method].push_back(&row);
  }
  auto mean_prob = [&](const std::string& m) {
    double s = 0.0;
    for (const GuidanceRow* r : by_method.at(m)) s += r->target_prob;
    return s / static_cast<double>(n);
  };
  auto mean_loss = [&](const std::string& m) {
    double s = 0.0;
    for (const GuidanceRow* r : by_method.at(m)) s += r->final_loss;
    return s / static_cast<double>(n);
  };

  // The tuned baseline is the grid scale with the highest mean target probability.
  std::string best = baseline_name(scales.front());
  for (double s : scales)
    if (mean_prob(baseline_name(s)) > mean_prob(best)) best = baseline_name(s);

  {
    CsvWriter summary(detail::path_in(out, "guidance_summary.csv"), {"method", "mean_final_loss", "mean_target_prob"});
    std::vector<std::string> order{"unguided"};
    for (double s : scales) order.push_back(baseline_name(s));
    order.push_back("doodl");
    for (const std::string& m : order) summary.row({m, fmt_num(mean_loss(m)), fmt_num(mean_prob(m))});
  }

  int wins = 0;
  for (int i = 0; i < n; ++i)
    if (by_method.at("doodl")[static_cast<std::size_t>(i)]->final_loss <
        by_method.at(best)[static_cast<std::size_t>(i)]->final_loss)
      ++wins;
  const double win_rate = static_cast<double>(wins) / static_cast<double>(n);
  ExperimentResult r;
  r.check("DOODL loss below tuned baseline on >= 70% of seeds", win_rate >= 0.7,
          std::to_string(wins) + "/" + std::to_string(n) + " seeds vs " + best);
  r.check("DOODL mean target probability above tuned baseline", mean_prob("doodl") > mean_prob(best),
          "doodl " + fmt_num(mean_prob("doodl")) + " vs " + best + " " + fmt_num(mean_prob(best)) + " (unguided " +
              fmt_num(mean_prob("unguided")) + ")");
  return r;
}

// ---------------------------------------------------------------------------
// roundtrip: EDICT invertibility on random models.

inline ExperimentResult experiment_roundtrip(const Config& cfg, const std::filesystem::path& out) {
  const NoiseSchedule sched = schedule_from(cfg);
  const int S = sched.num_steps();
  const int n = positive_int(cfg, "n_seeds");
  const std::size_t dim = 2;
  CsvWriter csv(detail::path_in(out, "roundtrip.csv"), {"case", "p", "kind", "t", "max_err"});
  double single_max = 0.0, chain_max = 0.0;
  int chains = 0;
  for (int i = 0; i < n; ++i) {
    const DenoiserModel m = detail::random_denoiser(cfg, i);
    const BoundDenoiser model(m, Conditioning::none(m.arch().cond_dim));
    Rng rng(stream_seed(master_seed(cfg), kTagLatent + static_cast<std::uint64_t>(i)));
    for (double p : {0.5, 0.93, 1.0}) {
      EdictConfig ec;
      ec.p = p;
      ec.sched = sched;
      // Single step at a random t from an uncoupled random pair.
      const int t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(S)));
      const LatentPair at_t(gaussian_sample(rng, {dim}), gaussian_sample(rng, {dim}), t);
      const LatentPair back = edict_step_inverse(model, edict_step_forward(model, at_t, ec), ec);
      const double e1 = std::max(max_abs_diff(back.x, at_t.x), max_abs_diff(back.y, at_t.y));
      single_max = std::max(single_max, e1);
      csv.row({std::to_string(i), fmt_num(p), "single_step", std::to_string(t), fmt_num(e1)});
      // Each inverse step scales rounding error by up to 1/p^2, so full chains
      // are only meaningful for p close to 1.
      if (p < 0.9) continue;
      const Tensor x_T = gaussian_sample(rng, {dim});
      const LatentPair inv = edict_invert(model, edict_generate(model, x_T, ec), ec);
      const double e2 = std::max(max_abs_diff(inv.x, x_T), max_abs_diff(inv.y, x_T));
      chain_max = std::max(chain_max, e2);
      ++chains;
      csv.row({std::to_string(i), fmt_num(p), "full_chain", std::to_string(S), fmt_num(e2)});
    }
  }
  ExperimentResult r;
  r.check("single-step round trip < 1e-10", single_max < 1e-10,
          fmt_num(single_max) + " over " + std::to_string(3 * n) + " cases");
  r.check("full-chain round trip < 1e-8", chain_max < 1e-8,
          fmt_num(chain_max) + " over " + std::to_string(chains) + " chains of " + std::to_string(S) + " steps");
  return r;
}

// ---------------------------------------------------------------------------
// gradcheck: adjoint vs caching oracle vs central differences.

struct GradcheckCase {
  int steps;
  double p;
};

/// S x p grid; p = 0.5 at S = 50 is excluded because reconstructing 50
/// inverse steps amplifies rounding by 4^50.
inline std::vector<GradcheckCase> gradcheck_grid() {
  std::vector<GradcheckCase> g;
  for (int s : {5, 10, 50})
    for (double p : {0.5, 0.93, 1.0})
      if (!(s == 50 && p == 0.5)) g.push_back({s, p});
  return g;
}

inline ExperimentResult experiment_gradcheck(const Config& cfg, const std::filesystem::path& out) {
  const auto kind = schedule_from(cfg).kind();
  const int reps = positive_int(cfg, "n_seeds");
  const double fd_rel = cfg.get_real("fd_step");
  CsvWriter csv(detail::path_in(out, "gradcheck.csv"),
                {"case", "S", "p", "rel_err_oracle", "rel_err_fd", "reconstruction_error"});
  double worst_oracle = 0.0, worst_fd = 0.0;
  int cases = 0;
  for (const GradcheckCase& gc : gradcheck_grid()) {
    for (int k = 0; k < reps; ++k, ++cases) {
      const DenoiserModel m = detail::random_denoiser(cfg, cases);
      const BoundDenoiser model(m, Conditioning::none(m.arch().cond_dim));
      EdictConfig ec;
      ec.p = gc.p;
      ec.sched = NoiseSchedule(gc.steps, kind);
      Rng rng(stream_seed(master_seed(cfg), kTagLatent + static_cast<std::uint64_t>(cases)));
      const Tensor x_T = gaussian_sample(rng, {2});
      const Tensor u = gaussian_sample(rng, {2});
      const Tensor v = gaussian_sample(rng, {2});
      // L = ½‖x0 − u‖² + ¼‖y0 − v‖²
      auto loss = [&](const Tensor& x0, const Tensor& y0) {
        const Tensor dx = x0 - u, dy = y0 - v;
        return 0.5 * dot(dx, dx) + 0.25 * dot(dy, dy);
      };
      auto loss_grad = [&](const Tensor& x0, const Tensor& y0) {
        return std::pair<Tensor, Tensor>{x0 - u, 0.5 * (y0 - v)};
      };
      const ChainGradReport adj = edict_chain_vjp(model, x_T, ec, loss_grad);
      const ChainGradReport ora = full_graph_grad_oracle(model, x_T, ec, loss_grad);
      const Tensor fd = finite_diff_grad(model, x_T, ec, loss, fd_rel * l2_norm(x_T));
      const double e_or = rel_error(adj.grad, ora.grad);
      const double e_fd = rel_error(adj.grad, fd);
      worst_oracle = std::max(worst_oracle, e_or);
      worst_fd = std::max(worst_fd, e_fd);
      csv.row({std::to_string(cases), std::to_string(gc.steps), fmt_num(gc.p), fmt_num(e_or), fmt_num(e_fd),
               fmt_num(adj.reconstruction_error)});
    }
  }
  ExperimentResult r;
  r.check("adjoint vs full-graph oracle < 1e-6 relative", worst_oracle < 1e-6,
          "worst " + fmt_num(worst_oracle) + " over " + std::to_string(cases) + " configurations");
  r.check("adjoint vs central differences < 1e-4 relative", worst_fd < 1e-4,
          "worst " + fmt_num(worst_fd) + " over " + std::to_string(cases) + " configurations");
  r.check("at least 20 configurations", cases >= 20, std::to_string(cases));
  return r;
}

// ---------------------------------------------------------------------------
// membench: instrumentation counters of both gradient paths vs S.

inline ExperimentResult experiment_membench(const Config& cfg, const std::filesystem::path& out) {
  const auto kind = schedule_from(cfg).kind();
  const DenoiserModel m = detail::random_denoiser(cfg, 0);
  const BoundDenoiser model(m, Conditioning::none(m.arch().cond_dim));
  const Tensor x_T = detail::seed_latent(cfg, 0, 2);
  auto loss_grad = [](const Tensor& x0, const Tensor& y0) { return std::pair<Tensor, Tensor>{x0, y0}; };
  CsvWriter csv(detail::path_in(out, "membench.csv"), {"S", "path", "peak_cached_states", "denoiser_calls"});
  ExperimentResult r;
  std::vector<int> adjoint_peaks;
  bool calls_ok = true, oracle_ok = true;
  std::string calls_detail, oracle_detail;
  for (int S : detail::int_list(cfg, "membench_steps")) {
    EdictConfig ec;
    ec.p = cfg.get_real("p");
    ec.sched = NoiseSchedule(S, kind);
    const ChainGradReport adj = edict_chain_vjp(model, x_T, ec, loss_grad);
    const ChainGradReport ora = full_graph_grad_oracle(model, x_T, ec, loss_grad);
    csv.row({std::to_string(S), "adjoint", std::to_string(adj.peak_cached_states), std::to_string(adj.denoiser_calls)});
    csv.row({std::to_string(S), "full_graph", std::to_string(ora.peak_cached_states),
             std::to_string(ora.denoiser_calls)});
    adjoint_peaks.push_back(adj.peak_cached_states);
    calls_ok = calls_ok && adj.denoiser_calls == 4LL * S;
    calls_detail += (calls_detail.empty() ? "" : ", ") + std::to_string(adj.denoiser_calls) + " at S=" +
                    std::to_string(S);
    oracle_ok = oracle_ok && ora.peak_cached_states >= 2 * S;
    oracle_detail += (oracle_detail.empty() ? "" : ", ") + std::to_string(ora.peak_cached_states) + " at S=" +
                     std::to_string(S);
  }
  const bool constant = std::adjacent_find(adjoint_peaks.begin(), adjoint_peaks.end(), std::not_equal_to<>()) ==
                        adjoint_peaks.end();
  const int peak = adjoint_peaks.empty() ? 0 : adjoint_peaks.front();
  r.check("adjoint peak identical across S and <= 8", constant && peak <= 8, "peak " + std::to_string(peak));
  r.check("adjoint backward calls == 4S", calls_ok, calls_detail);
  r.check("full-graph peak >= 2S", oracle_ok, oracle_detail);
  return r;
}

// ---------------------------------------------------------------------------
// aesthetic_edit: invert held-out points and push a linear score toward A.

inline ExperimentResult experiment_aesthetic_edit(const Config& cfg, const std::filesystem::path& out) {
  const LoadedDenoiser den = load_denoiser(cfg);
  const double radius = cfg.get_real("radius");
  if (!(radius > 0.0)) throw ConfigError("aesthetic_edit needs a positive radius");
  // a(x) = 5.5 + 4.5·x₁/radius spans [1, 10] around the ring.
  auto head = std::make_shared<const ScoreModel>(ScoreModel::linear(Tensor::vec({4.5 / radius, 0.0}), 5.5));
  const GuidanceLoss L = GuidanceLoss::scalar_target(head, cfg.get_real("score_target"), cfg.get_real("loss_weight"));
  const EdictConfig edict = edict_config_from(cfg, den.schedule);
  const DoodlConfig dcfg = doodl_config_from(cfg, edict);
  const BoundDenoiser model(den.model, Conditioning::none(den.model.arch().cond_dim));
  const int n = positive_int(cfg, "n_edit_points");
  const Dataset held = dataset_from(cfg, kTagHeldout, static_cast<std::size_t>(n));
  const double bound = cfg.get_real("retention_bound");

  CsvWriter csv(detail::path_in(out, "aesthetic_edit.csv"),
                {"point", "data_x", "data_y", "init_x", "init_y", "final_x", "final_y", "init_loss", "final_loss",
                 "moved"});
  int improved = 0;
  double max_moved = 0.0;
  std::vector<Tensor> pts;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const Tensor x0 = held.point(static_cast<std::size_t>(i));
    const LatentPair lat = edict_invert(model, LatentPair(x0, x0, 0), edict);
    const Tensor x_T = 0.5 * (lat.x + lat.y);
    const Tensor init = edict_generate(model, x_T, edict).x;
    Rng rng(stream_seed(master_seed(cfg), kTagOptimizer + static_cast<std::uint64_t>(i)));
    const DoodlResult res = doodl_optimize(model, L, x_T, dcfg, rng);
    const Tensor& fin = res.generation.x;
    const double l0 = loss_eval(L, init), l1 = loss_eval(L, fin);
    const double moved = l2_norm(fin - init);
    improved += l1 < l0;
    max_moved = std::max(max_moved, moved);
    csv.row({std::to_string(i), fmt_num(x0[0]), fmt_num(x0[1]), fmt_num(init[0]), fmt_num(init[1]), fmt_num(fin[0]),
             fmt_num(fin[1]), fmt_num(l0), fmt_num(l1), fmt_num(moved)});
    pts.push_back(init);
    labels.push_back(0);
    pts.push_back(fin);
    labels.push_back(1);
  }
  render_scatter(pts, labels, detail::path_in(out, "aesthetic_edit.ppm"), 2.0 * radius);
  ExperimentResult r;
  r.check("score loss reduced on >= 80% of points", improved >= 0.8 * n,
          std::to_string(improved) + "/" + std::to_string(n));
  r.check("every edit within the retention bound", max_moved < bound,
          "max move " + fmt_num(max_moved) + ", bound " + fmt_num(bound));
  return r;
}

// ---------------------------------------------------------------------------
// Dispatch

using ExperimentFn = ExperimentResult (*)(const Config&, const std::filesystem::path&);

inline const std::map<std::string, ExperimentFn>& experiment_registry() {
  static const std::map<std::string, ExperimentFn> r = {
      {"misalignment", &experiment_misalignment}, {"guidance_compare", &experiment_guidance_compare},
      {"roundtrip", &experiment_roundtrip},       {"gradcheck", &experiment_gradcheck},
      {"membench", &experiment_membench},         {"aesthetic_edit", &experiment_aesthetic_edit},
  };
  return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << text;
}

inline std::string format_checks(const ExperimentResult& r) {
  std::string s;
  for (const Check& c : r.checks) s += std::string(c.passed ? "PASS" : "FAIL") + "  " + c.name + ": " + c.detail + "\n";
  return s;
}

/// Runs a named experiment; the manifest is written before any work starts.
inline ExperimentResult run_experiment(const std::string& name, const Config& cfg, const std::filesystem::path& out) {
  auto it = experiment_registry().find(name);
  if (it == experiment_registry().end()) throw ConfigError("unknown experiment '" + name + "'");
  std::filesystem::create_directories(out);
  write_text(out / "manifest", cfg.dump());
  ExperimentResult r = it->second(cfg, out);
  write_text(out / "summary.txt", format_checks(r));
  return r;
}

}  // namespace doodl::cli
