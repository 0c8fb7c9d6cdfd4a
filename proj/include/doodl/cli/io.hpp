// SPDX-License-Identifier: Apache-2.0
//
// Toy dataset synthesis, CSV tables and PPM scatter plots.
#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "doodl/models.hpp"

namespace doodl::cli {

/// Isotropic Gaussian modes evenly spaced on a circle; labels are mode indices.
inline Dataset make_gmm_dataset(int n_modes, double radius, double sigma, std::size_t n_points, Rng& rng) {
  if (n_modes < 1) throw InvalidArgument("make_gmm_dataset: need at least one mode");
  if (n_points == 0) throw InvalidArgument("make_gmm_dataset: need at least one point");
  Dataset d;
  d.n_classes = n_modes;
  d.points = Tensor({n_points, 2});
  d.labels.resize(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::size_t>(n_modes)));
    const double angle = 2.0 * std::numbers::pi * k / n_modes;
    const Tensor noise = gaussian_sample(rng, {2});
    d.points[2 * i] = radius * std::cos(angle) + sigma * noise[0];
    d.points[2 * i + 1] = radius * std::sin(angle) + sigma * noise[1];
    d.labels[i] = k;
  }
  return d;
}

inline Tensor gmm_mode_center(int k, int n_modes, double radius) {
  const double angle = 2.0 * std::numbers::pi * k / n_modes;
  return Tensor::vec({radius * std::cos(angle), radius * std::sin(angle)});
}

inline int nearest_mode(const Tensor& x, int n_modes, double radius) {
  int best = 0;
  double best_d = INFINITY;
  for (int k = 0; k < n_modes; ++k) {
    const double d = l2_norm(x - gmm_mode_center(k, n_modes, radius));
    if (d < best_d) best_d = d, best = k;
  }
  return best;
}

/// Fixed-precision number formatting shared by all CSV writers.
inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open '" + path + "' for writing");
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

/// Reads a numeric CSV with a header row into an [n, cols] tensor.
inline Tensor read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read points file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("points file '" + path + "' is empty");
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError("points file '" + path + "': bad number '" + cell + "'");
      }
      ++c;
    }
    if (rows == 0) cols = c;
    if (c != cols) throw ConfigError("points file '" + path + "': ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows == 0) throw ConfigError("points file '" + path + "' has no rows");
  return Tensor({rows, cols}, std::move(values));
}

inline constexpr int kScatterSide = 512;

/// 512×512 binary PPM (P6): white background, each point a 3×3 square in its
/// label's colour. The view spans [−extent, extent] on both axes, y up.
inline void render_scatter(const std::vector<Tensor>& points, const std::vector<int>& labels, const std::string& path,
                           double extent = 2.0) {
  if (labels.size() != points.size()) throw InvalidArgument("render_scatter: one label per point required");
  static constexpr std::array<std::array<unsigned char, 3>, 8> palette{{{228, 26, 28},
                                                                       {55, 126, 184},
                                                                       {77, 175, 74},
                                                                       {152, 78, 163},
                                                                       {255, 127, 0},
                                                                       {166, 86, 40},
                                                                       {247, 129, 191},
                                                                       {60, 60, 60}}};
  constexpr int N = kScatterSide;
  std::vector<unsigned char> img(static_cast<std::size_t>(N * N * 3), 255);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].size() != 2) throw InvalidArgument("render_scatter: points must be 2-D");
    const int px = static_cast<int>(std::floor((points[i][0] + extent) / (2.0 * extent) * N));
    const int py = static_cast<int>(std::floor((extent - points[i][1]) / (2.0 * extent) * N));
    const auto& col = palette[static_cast<std::size_t>(((labels[i] % 8) + 8) % 8)];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = px + dx, y = py + dy;
        if (x < 0 || y < 0 || x >= N || y >= N) continue;
        const auto off = static_cast<std::size_t>((y * N + x) * 3);
        img[off] = col[0];
        img[off + 1] = col[1];
        img[off + 2] = col[2];
      }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "P6\n" << N << ' ' << N << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

}  // namespace doodl::cli
