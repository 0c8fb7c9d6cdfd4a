// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   "DDL1"            4 bytes magic
//   version           u32 (currently 1)
//   array count       u32
//   per array, in name order:
//     name length     u16
//     name            UTF-8 bytes
//     dtype           u8   (1 = IEEE-754 float64)
//     rank            u8
//     dims            u32 × rank
//     payload         float64 × prod(dims), little-endian
//
// Metadata (schedule kind, S, model dims, training seed) is stored as
// one-element arrays under the "meta/" prefix.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "doodl/models.hpp"
#include "doodl/schedule.hpp"

namespace doodl::cli {

inline constexpr char kCheckpointMagic[4] = {'D', 'D', 'L', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
  TensorMap arrays;

  void set_meta(const std::string& key, double v) { arrays["meta/" + key] = Tensor::vec({v}); }
  bool has_meta(const std::string& key) const { return arrays.count("meta/" + key) != 0; }
  double meta(const std::string& key) const {
    auto it = arrays.find("meta/" + key);
    if (it == arrays.end() || it->second.size() != 1) throw LoadError("checkpoint lacks metadata '" + key + "'");
    return it->second[0];
  }
};

namespace detail {

inline void put_u(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  std::uint64_t get_u(int bytes, const std::string& what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::string get_bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (buf_.size() - pos_ < n) throw TruncatedFile("checkpoint truncated while reading " + what);
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u(out, kCheckpointVersion, 4);
  detail::put_u(out, ckpt.arrays.size(), 4);
  for (const auto& [name, t] : ckpt.arrays) {
    if (name.size() > 0xFFFF) throw InvalidArgument("array name too long: " + name);
    if (t.rank() > 0xFF) throw InvalidArgument("array rank too large: " + name);
    detail::put_u(out, name.size(), 2);
    out += name;
    out.push_back(static_cast<char>(kDtypeF64));
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u(out, d, 4);
    for (double v : t.values()) detail::put_u(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
  detail::Reader r(buf);
  if (r.get_bytes(4, "magic") != std::string(kCheckpointMagic, 4)) throw MagicMismatch("checkpoint magic mismatch");
  const auto version = r.get_u(4, "version");
  if (version != kCheckpointVersion)
    throw UnsupportedVersion("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get_u(4, "array count");
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string idx = "array #" + std::to_string(i);
    const auto name_len = r.get_u(2, idx + " name length");
    const std::string name = r.get_bytes(name_len, idx + " name");
    const auto dtype = r.get_u(1, "dtype of '" + name + "'");
    if (dtype != kDtypeF64) throw LoadError("array '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get_u(1, "rank of '" + name + "'");
    Shape shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(r.get_u(4, "dims of '" + name + "'"));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(r.get_u(8, "payload of '" + name + "'"));
    ckpt.arrays[name] = Tensor(std::move(shape), std::move(data));
  }
  if (!r.at_end()) throw LoadError("trailing bytes after checkpoint payload");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// Model <-> checkpoint.

inline Checkpoint denoiser_checkpoint(const DenoiserModel& m, const NoiseSchedule& sched, std::uint64_t train_seed) {
  Checkpoint c;
  m.net().to_tensors("denoiser", c.arrays);
  c.set_meta("data_dim", static_cast<double>(m.arch().data_dim));
  c.set_meta("time_embed_dim", static_cast<double>(m.arch().time_embed_dim));
  c.set_meta("cond_dim", static_cast<double>(m.arch().cond_dim));
  c.set_meta("num_steps", sched.num_steps());
  c.set_meta("schedule_kind", sched.kind() == ScheduleKind::cosine ? 0.0 : 1.0);
  c.set_meta("train_seed", static_cast<double>(train_seed));
  return c;
}

struct LoadedDenoiser {
  DenoiserModel model;
  NoiseSchedule schedule;
};

inline LoadedDenoiser denoiser_from_checkpoint(const Checkpoint& c) {
  Mlp net = Mlp::from_tensors("denoiser", c.arrays);
  DenoiserArch arch;
  arch.data_dim = static_cast<std::size_t>(c.meta("data_dim"));
  arch.time_embed_dim = static_cast<std::size_t>(c.meta("time_embed_dim"));
  arch.cond_dim = static_cast<std::size_t>(c.meta("cond_dim"));
  arch.depth = net.num_layers() - 1;
  arch.hidden = net.widths().size() > 2 ? net.widths()[1] : 0;
  const auto kind = c.meta("schedule_kind") == 0.0 ? ScheduleKind::cosine : ScheduleKind::linear;
  return {DenoiserModel(arch, std::move(net)), NoiseSchedule(static_cast<int>(c.meta("num_steps")), kind)};
}

inline Checkpoint classifier_checkpoint(const ClassifierModel& m, std::uint64_t train_seed, double heldout_accuracy) {
  Checkpoint c;
  m.net().to_tensors("classifier", c.arrays);
  c.set_meta("train_seed", static_cast<double>(train_seed));
  c.set_meta("heldout_accuracy", heldout_accuracy);
  return c;
}

inline ClassifierModel classifier_from_checkpoint(const Checkpoint& c) {
  return ClassifierModel(Mlp::from_tensors("classifier", c.arrays));
}

}  // namespace doodl::cli
