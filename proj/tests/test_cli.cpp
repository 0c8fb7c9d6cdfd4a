// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "doodl/cli/checkpoint.hpp"
#include "doodl/cli/config.hpp"
#include "doodl/cli/experiments.hpp"
#include "doodl/cli/io.hpp"
#include "doodl/cli/setup.hpp"
#include "support.hpp"

namespace doodl::cli {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(DOODL_SCRATCH_DIR) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

// --- Config ------------------------------------------------------------

TEST(Config, DefaultsAndTypedAccess) {
  const Config cfg;
  EXPECT_EQ(cfg.get_int("num_steps"), 50);
  EXPECT_EQ(cfg.get_real("p"), 0.93);
  EXPECT_EQ(cfg.get_text("schedule"), "cosine");
  EXPECT_TRUE(cfg.get_bool("timing"));
  EXPECT_THROW(cfg.get_real("num_steps"), ConfigError);
  EXPECT_THROW(cfg.get_int("nonexistent"), ConfigError);
}

TEST(Config, FileThenOverridePrecedence) {
  Config cfg;
  cfg.merge_text("# comment\n p = 0.5  # trailing\n\nseed = 3\n");
  EXPECT_EQ(cfg.get_real("p"), 0.5);
  cfg.set("p", "0.7");
  EXPECT_EQ(cfg.get_real("p"), 0.7);
  EXPECT_EQ(cfg.get_int("seed"), 3);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  Config cfg;
  EXPECT_THROW(cfg.set("no_such_key", "1"), ConfigError);
  EXPECT_THROW(cfg.set("num_steps", "abc"), ConfigError);
  EXPECT_THROW(cfg.set("num_steps", "1.5"), ConfigError);
  EXPECT_THROW(cfg.set("p", "x"), ConfigError);
  EXPECT_THROW(cfg.set("timing", "maybe"), ConfigError);
  EXPECT_THROW(cfg.merge_text("just words\n"), ConfigError);
  EXPECT_THROW(cfg.merge_file("/nonexistent/file.cfg"), ConfigError);
}

TEST(Config, DumpRoundTrips) {
  Config a;
  a.set("seed", "17");
  a.set("guidance_scales", "1,2");
  Config b;
  b.merge_text(a.dump());
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(b.get_real_list("guidance_scales"), (std::vector<double>{1.0, 2.0}));
}

TEST(Config, ShippedConfigFilesParse) {
  for (const auto& entry : fs::directory_iterator(test::config_dir())) {
    Config cfg;
    EXPECT_NO_THROW(cfg.merge_file(entry.path().string())) << entry.path();
  }
}

TEST(Setup, ValidatesDerivedObjects) {
  Config cfg;
  cfg.set("cond_dim", "3");
  EXPECT_THROW(denoiser_arch_from(cfg), ConfigError);
  cfg.set("cond_dim", "8");
  EXPECT_EQ(denoiser_arch_from(cfg).cond_dim, 8u);
  cfg.set("time_embed_dim", "5");
  EXPECT_THROW(denoiser_arch_from(cfg), ConfigError);

  Config d;
  d.set("multicrop", "true");
  EXPECT_THROW(doodl_config_from(d, edict_config_from(d, schedule_from(d))), ConfigError);
  d.set("multicrop", "false");
  d.set("p", "0");
  EXPECT_THROW(edict_config_from(d, schedule_from(d)), ConfigError);
  d.set("num_steps", "0");
  EXPECT_THROW(schedule_from(d), ConfigError);
  d.set("schedule", "weird");
  d.set("num_steps", "5");
  EXPECT_THROW(schedule_from(d), ConfigError);
  d.set("loss_form", "hinge");
  EXPECT_THROW(loss_form_from(d), ConfigError);
  d.set("target_class", "8");
  EXPECT_THROW(target_class_from(d), ConfigError);
  d.set("ema_decay", "1");
  EXPECT_THROW(train_config_from(d), ConfigError);
}

TEST(Setup, StreamSeedsAreDistinct) {
  EXPECT_NE(stream_seed(0, kTagData), stream_seed(0, kTagHeldout));
  EXPECT_NE(stream_seed(0, kTagData), stream_seed(1, kTagData));
  EXPECT_EQ(stream_seed(5, kTagData), stream_seed(5, kTagData));
}

// --- Dataset -----------------------------------------------------------

TEST(GmmDataset, DegenerateSingleMode) {
  Rng rng(1);
  const Dataset d = make_gmm_dataset(1, 0.0, 0.0, 5, rng);
  ASSERT_EQ(d.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(d.point(i), Tensor::vec({0.0, 0.0}));
    EXPECT_EQ(d.labels[i], 0);
  }
}

TEST(GmmDataset, PerModeMeans) {
  Rng rng(2);
  const Dataset d = make_gmm_dataset(8, 1.0, 0.05, 4096, rng);
  std::vector<Tensor> sums(8, Tensor({2}));
  std::vector<int> counts(8, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    sums[static_cast<std::size_t>(d.labels[i])] += d.point(i);
    ++counts[static_cast<std::size_t>(d.labels[i])];
  }
  for (int k = 0; k < 8; ++k) {
    ASSERT_GT(counts[static_cast<std::size_t>(k)], 0);
    const Tensor mean = (1.0 / counts[static_cast<std::size_t>(k)]) * sums[static_cast<std::size_t>(k)];
    EXPECT_LT(l2_norm(mean - gmm_mode_center(k, 8, 1.0)), 0.01) << "mode " << k;
  }
}

TEST(GmmDataset, DeterministicAndValidated) {
  Rng a(3), b(3);
  const Dataset x = make_gmm_dataset(4, 2.0, 0.1, 100, a), y = make_gmm_dataset(4, 2.0, 0.1, 100, b);
  EXPECT_EQ(x.points, y.points);
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_THROW(make_gmm_dataset(0, 1.0, 0.1, 10, a), InvalidArgument);
  EXPECT_EQ(nearest_mode(Tensor::vec({0.0, 2.1}), 4, 2.0), 1);
}

TEST(PointsCsv, ReadAndErrors) {
  const fs::path dir = scratch("points");
  std::ofstream(dir / "ok.csv") << "a,b\n1,2\n3.5,-4\n";
  const Tensor t = read_points_csv((dir / "ok.csv").string());
  EXPECT_EQ(t.shape(), (Shape{2, 2}));
  EXPECT_EQ(t[3], -4.0);
  std::ofstream(dir / "ragged.csv") << "a,b\n1,2\n3\n";
  EXPECT_THROW(read_points_csv((dir / "ragged.csv").string()), ConfigError);
  std::ofstream(dir / "bad.csv") << "a,b\n1,x\n";
  EXPECT_THROW(read_points_csv((dir / "bad.csv").string()), ConfigError);
  EXPECT_THROW(read_points_csv((dir / "missing.csv").string()), ConfigError);
}

// --- Checkpoints -------------------------------------------------------

Checkpoint sample_checkpoint() {
  const DenoiserModel m = test::small_denoiser(77, 8, 3);
  return denoiser_checkpoint(m, NoiseSchedule(12, ScheduleKind::linear), 42);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch("ckpt");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint((dir / "a.ckpt").string(), c);
  const Checkpoint loaded = load_checkpoint((dir / "a.ckpt").string());
  EXPECT_EQ(loaded.arrays, c.arrays);
  save_checkpoint((dir / "b.ckpt").string(), loaded);
  EXPECT_EQ(test::read_bytes(dir / "a.ckpt"), test::read_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, DenoiserMetadataRoundTrip) {
  const LoadedDenoiser d = denoiser_from_checkpoint(sample_checkpoint());
  EXPECT_EQ(d.schedule.num_steps(), 12);
  EXPECT_EQ(d.schedule.kind(), ScheduleKind::linear);
  EXPECT_EQ(d.model.arch().cond_dim, 3u);
  EXPECT_EQ(d.model.arch().hidden, 8u);
  const DenoiserModel ref = test::small_denoiser(77, 8, 3);
  const Tensor x = Tensor::vec({0.1, 0.2});
  EXPECT_EQ(denoiser_forward(d.model, x, 3, Conditioning::one_hot(0, 3)), denoiser_forward(ref, x, 3, Conditioning::one_hot(0, 3)));
}

TEST(Checkpoint, LayoutHeader) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "DDL1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
}

TEST(Checkpoint, DistinctLoadErrors) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), MagicMismatch);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), UnsupportedVersion);
  try {
    deserialize_checkpoint(bytes.substr(0, bytes.size() - 3));
    FAIL() << "expected TruncatedFile";
  } catch (const TruncatedFile& e) {
    EXPECT_NE(std::string(e.what()).find("payload of '"), std::string::npos) << e.what();
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), LoadError);
  EXPECT_THROW(deserialize_checkpoint("DD"), TruncatedFile);
}

TEST(Checkpoint, MissingFileIsConfigError) {
  Config cfg;
  cfg.set("denoiser_ckpt", "/nonexistent/denoiser.ckpt");
  EXPECT_THROW(load_denoiser(cfg), ConfigError);
}

TEST(Checkpoint, ScheduleMismatchIsConfigError) {
  const fs::path dir = scratch("mismatch");
  save_checkpoint((dir / "d.ckpt").string(), sample_checkpoint());
  Config cfg;
  cfg.set("denoiser_ckpt", (dir / "d.ckpt").string());
  EXPECT_THROW(load_denoiser(cfg), ConfigError);
  cfg.set("num_steps", "12");
  cfg.set("schedule", "linear");
  EXPECT_NO_THROW(load_denoiser(cfg));
}

TEST(Checkpoint, AtomicSaveLeavesNoTemporary) {
  const fs::path dir = scratch("atomic");
  save_checkpoint_atomic((dir / "sub" / "c.ckpt").string(), sample_checkpoint());
  EXPECT_TRUE(fs::exists(dir / "sub" / "c.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "sub" / "c.ckpt.tmp"));
}

// --- Rendering ---------------------------------------------------------

std::string ppm_header() { return "P6\n512 512\n255\n"; }

TEST(RenderScatter, EmptyIsWhite) {
  const fs::path dir = scratch("ppm");
  render_scatter({}, {}, (dir / "e.ppm").string());
  const std::string bytes = test::read_bytes(dir / "e.ppm");
  ASSERT_EQ(bytes.size(), ppm_header().size() + 512u * 512u * 3u);
  EXPECT_EQ(bytes.substr(0, ppm_header().size()), ppm_header());
  for (std::size_t i = ppm_header().size(); i < bytes.size(); ++i) ASSERT_EQ(static_cast<unsigned char>(bytes[i]), 255);
}

TEST(RenderScatter, OriginPointIsCenteredAndDeterministic) {
  const fs::path dir = scratch("ppm1");
  render_scatter({Tensor::vec({0.0, 0.0})}, {0}, (dir / "a.ppm").string());
  render_scatter({Tensor::vec({0.0, 0.0})}, {0}, (dir / "b.ppm").string());
  const std::string a = test::read_bytes(dir / "a.ppm");
  EXPECT_EQ(a, test::read_bytes(dir / "b.ppm"));
  const std::size_t h = ppm_header().size();
  std::size_t colored = 0, sx = 0, sy = 0;
  for (std::size_t px = 0; px < 512u * 512u; ++px)
    if (static_cast<unsigned char>(a[h + 3 * px]) != 255 || static_cast<unsigned char>(a[h + 3 * px + 1]) != 255) {
      ++colored;
      sx += px % 512;
      sy += px / 512;
    }
  ASSERT_EQ(colored, 9u);
  EXPECT_EQ(sx / 9, 256u);
  EXPECT_EQ(sy / 9, 256u);
}

TEST(RenderScatter, RejectsNon2dPoints) {
  const fs::path dir = scratch("ppm2");
  EXPECT_THROW(render_scatter({Tensor::vec({1, 2, 3})}, {0}, (dir / "x.ppm").string()), InvalidArgument);
  EXPECT_THROW(render_scatter({Tensor::vec({1, 2})}, {}, (dir / "x.ppm").string()), InvalidArgument);
}

// --- Experiments without trained models --------------------------------

TEST(Experiments, MembenchSchemaAndChecks) {
  const fs::path dir = scratch("membench");
  Config cfg;
  const ExperimentResult r = run_experiment("membench", cfg, dir);
  EXPECT_TRUE(r.passed()) << format_checks(r);
  EXPECT_EQ(first_line(dir / "membench.csv"), "S,path,peak_cached_states,denoiser_calls");
  EXPECT_TRUE(fs::exists(dir / "manifest"));
  EXPECT_TRUE(fs::exists(dir / "summary.txt"));
}

TEST(Experiments, RoundtripSmall) {
  const fs::path dir = scratch("roundtrip");
  Config cfg;
  cfg.set("n_seeds", "4");
  const ExperimentResult r = run_experiment("roundtrip", cfg, dir);
  EXPECT_TRUE(r.passed()) << format_checks(r);
}

TEST(Experiments, UnknownNameAndMissingCheckpoint) {
  const fs::path dir = scratch("unknown");
  Config cfg;
  EXPECT_THROW(run_experiment("nope", cfg, dir), ConfigError);
  cfg.set("denoiser_ckpt", "/nonexistent.ckpt");
  EXPECT_THROW(run_experiment("misalignment", cfg, dir), ConfigError);
}

}  // namespace
}  // namespace doodl::cli
