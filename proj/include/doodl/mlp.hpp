// SPDX-License-Identifier: Apache-2.0
//
// Fully connected tanh network with hand-written reverse mode. Single-input
// evaluation (forward, input VJP) serves the samplers; the batched tape
// serves training.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "doodl/numerics.hpp"

namespace doodl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

/// Named tensor collection; the unit of checkpoint persistence.
using TensorMap = std::map<std::string, Tensor>;

/// Velocity update shared by the trainers and the latent optimizer:
/// buffer <- eta * buffer + update.
inline void momentum_accumulate(std::span<double> buffer, std::span<const double> update, double eta) {
  if (buffer.size() != update.size()) throw InvalidArgument("momentum_accumulate: size mismatch");
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = eta * buffer[i] + update[i];
}

class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialised network with the given layer widths (input first).
  explicit Mlp(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw InvalidArgument("Mlp needs at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      if (widths_[l] == 0 || widths_[l + 1] == 0) throw InvalidArgument("Mlp widths must be positive");
      weights_.emplace_back(Shape{widths_[l + 1], widths_[l]});
      biases_.emplace_back(Shape{widths_[l + 1]});
    }
  }

  /// LeCun-normal hidden layers; the output layer is scaled by `out_scale`.
  static Mlp random(std::vector<std::size_t> widths, Rng& rng, double out_scale = 1.0) {
    Mlp m(std::move(widths));
    for (std::size_t l = 0; l < m.weights_.size(); ++l) {
      const double fan_in = static_cast<double>(m.widths_[l]);
      double scale = 1.0 / std::sqrt(fan_in);
      if (l + 1 == m.weights_.size()) scale *= out_scale;
      m.weights_[l] = scale * gaussian_sample(rng, m.weights_[l].shape());
    }
    return m;
  }

  std::size_t input_dim() const { return widths_.front(); }
  std::size_t output_dim() const { return widths_.back(); }
  std::size_t num_layers() const { return weights_.size(); }
  const std::vector<std::size_t>& widths() const { return widths_; }

  std::vector<Tensor>& weights() { return weights_; }
  std::vector<Tensor>& biases() { return biases_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  const std::vector<Tensor>& biases() const { return biases_; }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights_.size(); ++l)
      if (!weights_[l].all_finite() || !biases_[l].all_finite()) return false;
    return true;
  }

  std::vector<double> forward(std::span<const double> input) const {
    check_input(input.size());
    Eigen::VectorXd h = ConstVecMap(input.data(), static_cast<Eigen::Index>(input.size()));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Eigen::VectorXd z = weight(l) * h + bias(l);
      h = (l + 1 < weights_.size()) ? Eigen::VectorXd(z.array().tanh()) : z;
    }
    return {h.data(), h.data() + h.size()};
  }

  /// cotangentᵀ · ∂forward/∂input. Activations live only for this call.
  std::vector<double> input_vjp(std::span<const double> input, std::span<const double> cotangent) const {
    check_input(input.size());
    if (cotangent.size() != output_dim()) throw InvalidArgument("Mlp::input_vjp: cotangent size mismatch");
    std::vector<Eigen::VectorXd> acts;
    acts.reserve(weights_.size());
    Eigen::VectorXd h = ConstVecMap(input.data(), static_cast<Eigen::Index>(input.size()));
    for (std::size_t l = 0; l + 1 < weights_.size(); ++l) {
      h = (weight(l) * h + bias(l)).array().tanh();
      acts.push_back(h);
    }
    Eigen::VectorXd g = ConstVecMap(cotangent.data(), static_cast<Eigen::Index>(cotangent.size()));
    for (std::size_t l = weights_.size(); l-- > 0;) {
      g = weight(l).transpose() * g;
      if (l > 0) g.array() *= 1.0 - acts[l - 1].array().square();
    }
    return {g.data(), g.data() + g.size()};
  }

  /// Activations of one batched forward pass (columns are samples).
  struct Tape {
    std::vector<Eigen::MatrixXd> inputs;  // input to each layer
    Eigen::MatrixXd output;
  };

  struct Grads {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
  };

  Tape forward_batch(const Eigen::MatrixXd& x) const {
    check_input(static_cast<std::size_t>(x.rows()));
    Tape tape;
    Eigen::MatrixXd h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      tape.inputs.push_back(h);
      Eigen::MatrixXd z = weight(l) * h;
      z.colwise() += bias(l);
      h = (l + 1 < weights_.size()) ? Eigen::MatrixXd(z.array().tanh()) : z;
    }
    tape.output = std::move(h);
    return tape;
  }

  /// Parameter gradients for the output cotangent `d_out` (out × batch).
  Grads backward_batch(const Tape& tape, const Eigen::MatrixXd& d_out) const {
    Grads grads;
    grads.weights.resize(weights_.size());
    grads.biases.resize(weights_.size());
    Eigen::MatrixXd g = d_out;
    for (std::size_t l = weights_.size(); l-- > 0;) {
      Tensor gw(weights_[l].shape());
      Tensor gb(biases_[l].shape());
      MatMap(gw.values().data(), static_cast<Eigen::Index>(widths_[l + 1]), static_cast<Eigen::Index>(widths_[l])) =
          g * tape.inputs[l].transpose();
      VecMap(gb.values().data(), static_cast<Eigen::Index>(widths_[l + 1])) = g.rowwise().sum();
      grads.weights[l] = std::move(gw);
      grads.biases[l] = std::move(gb);
      if (l > 0) {
        g = weight(l).transpose() * g;
        // tape.inputs[l] holds tanh activations of layer l-1.
        g.array() *= 1.0 - tape.inputs[l].array().square();
      }
    }
    return grads;
  }

  void to_tensors(const std::string& prefix, TensorMap& out) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out[prefix + "/W" + std::to_string(l)] = weights_[l];
      out[prefix + "/b" + std::to_string(l)] = biases_[l];
    }
  }

  static Mlp from_tensors(const std::string& prefix, const TensorMap& in) {
    std::vector<Tensor> ws, bs;
    for (std::size_t l = 0;; ++l) {
      auto w = in.find(prefix + "/W" + std::to_string(l));
      if (w == in.end()) break;
      auto b = in.find(prefix + "/b" + std::to_string(l));
      if (b == in.end()) throw InvalidArgument("checkpoint missing bias for layer " + std::to_string(l) + " of " + prefix);
      ws.push_back(w->second);
      bs.push_back(b->second);
    }
    if (ws.empty()) throw InvalidArgument("checkpoint has no layers for '" + prefix + "'");
    std::vector<std::size_t> widths{ws.front().shape().at(1)};
    for (std::size_t l = 0; l < ws.size(); ++l) {
      const Shape& s = ws[l].shape();
      if (s.size() != 2 || s[1] != widths.back() || bs[l].shape() != Shape{s[0]})
        throw InvalidArgument("inconsistent layer shapes in '" + prefix + "'");
      widths.push_back(s[0]);
    }
    Mlp m(widths);
    m.weights_ = std::move(ws);
    m.biases_ = std::move(bs);
    return m;
  }

 private:
  ConstMatMap weight(std::size_t l) const {
    return {weights_[l].values().data(), static_cast<Eigen::Index>(widths_[l + 1]),
            static_cast<Eigen::Index>(widths_[l])};
  }
  ConstVecMap bias(std::size_t l) const {
    return {biases_[l].values().data(), static_cast<Eigen::Index>(widths_[l + 1])};
  }
  void check_input(std::size_t n) const {
    if (n != input_dim())
      throw InvalidArgument("Mlp input has " + std::to_string(n) + " features, expected " + std::to_string(input_dim()));
  }

  std::vector<std::size_t> widths_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

/// Momentum SGD over an Mlp's parameters.
class MomentumSgd {
 public:
  MomentumSgd(const Mlp& model, double lr, double momentum) : lr_(lr), momentum_(momentum) {
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      vel_w_.push_back(Tensor::zeros_like(model.weights()[l]));
      vel_b_.push_back(Tensor::zeros_like(model.biases()[l]));
    }
  }

  void step(Mlp& model, const Mlp::Grads& grads) {
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      apply(model.weights()[l], vel_w_[l], grads.weights[l]);
      apply(model.biases()[l], vel_b_[l], grads.biases[l]);
    }
  }

 private:
  void apply(Tensor& param, Tensor& vel, const Tensor& grad) const {
    momentum_accumulate(vel.values(), grad.values(), momentum_);
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr_ * vel[i];
  }

  double lr_;
  double momentum_;
  std::vector<Tensor> vel_w_, vel_b_;
};

}  // namespace doodl
