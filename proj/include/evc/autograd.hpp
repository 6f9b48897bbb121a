#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evc/tensor.hpp"

namespace evc {

/// One value in the computation: either a leaf (parameter / constant) or the
/// output of a recorded op.
template <typename T>
struct Node {
  TensorT<T> value;
  TensorT<T> grad;  // empty until something flows into it
  bool requires_grad = false;

  explicit Node(TensorT<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

  /// Gradient buffer, allocated as zeros on first use.
  TensorT<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = TensorT<T>(value.shape());
    return grad;
  }
  void zero_grad() { grad = TensorT<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(TensorT<T> value, bool requires_grad = false) {
  return std::make_shared<Node<T>>(std::move(value), requires_grad);
}

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Reverse-mode tape. Every op executed through a recording Graph whose inputs
/// require grad appends a backward closure; backward() replays them in reverse.
///
/// With recording disabled the same methods are plain forward kernels, so
/// model code is written once for training and inference.
template <typename T>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t tape_size() const { return tape_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs the tape backwards. The tape is
  /// consumed.
  void backward(const Var<T>& loss);

  Var<T> constant(TensorT<T> v) const { return make_var(std::move(v), false); }
  Var<T> detach(const Var<T>& x) const { return make_var(x->value, false); }

  Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec);
  Var<T> add(const Var<T>& a, const Var<T>& b);
  Var<T> sub(const Var<T>& a, const Var<T>& b);
  Var<T> mul(const Var<T>& a, const Var<T>& b);
  Var<T> scale(const Var<T>& a, T factor);
  Var<T> leaky_relu(const Var<T>& x, T negative_slope);
  /// Multiplies channel c of x by m[c]; m has shape [1, C, 1, 1].
  Var<T> channel_scale(const Var<T>& x, const Var<T>& m);
  Var<T> pixel_shuffle(const Var<T>& x, int r);
  Var<T> space_to_depth(const Var<T>& x, int r);
  Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
  Var<T> slice_channels(const Var<T>& x, int start, int count);
  /// exp(clamp(x, log(lo), log(hi))); gradient is zero where clamped.
  Var<T> exp_clamped(const Var<T>& x, T lo, T hi);
  /// Checkerboard combine: anchor positions ((h+w) even) from `anchor`, the rest
  /// from `non_anchor`.
  Var<T> checker_select(const Var<T>& anchor, const Var<T>& non_anchor);
  /// Keeps anchor positions, zeros elsewhere.
  Var<T> anchor_only(const Var<T>& x);
  /// round(x/s)*s per channel with identity (straight-through) gradient to x.
  Var<T> ste_quantize(const Var<T>& x, const Var<T>& steps);
  Var<T> sum(const Var<T>& x);
  /// Mean of squared differences, scalar output.
  Var<T> mse(const Var<T>& a, const Var<T>& b);
  /// Per-channel steps exp(log_global[rate]) * exp(log_channel[c]), shape [1,C,1,1].
  Var<T> quant_steps(const Var<T>& log_global, int rate_index, const Var<T>& log_channel);
  /// Total bits -log2 P(y) for the discretized Gaussian with bin width s.
  Var<T> gaussian_rate(const Var<T>& y, const Var<T>& mean, const Var<T>& scale,
                       const Var<T>& steps);

  /// Registers a custom backward closure. Used by ops defined outside this
  /// class (e.g. the factorized prior).
  void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }
  bool should_record(std::initializer_list<const Var<T>*> inputs) const;

 private:
  bool recording_;
  std::vector<std::function<void()>> tape_;
};

/// Lower-bound likelihood used by rate terms; bins with smaller mass are
/// charged -log2(kLikelihoodFloor) bits and pass no gradient.
inline constexpr double kLikelihoodFloor = 1e-9;

/// Raw forward convolution (no tape). Exposed for tests and merge checks.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                          ConvSpec spec);

/// Gradients of conv2d w.r.t. input, weight and bias.
template <typename T>
struct ConvGrads {
  TensorT<T> dx, dweight, dbias;
};
template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& grad_out, const TensorT<T>& x,
                             const TensorT<T>& weight, ConvSpec spec);

template <typename T>
TensorT<T> pixel_shuffle(const TensorT<T>& x, int r);
template <typename T>
TensorT<T> space_to_depth(const TensorT<T>& x, int r);

/// Central-difference gradient check of a scalar function of theta against the
/// tape gradient. Returns max_i |g_tape - g_fd| / max(1e-8, |g_fd|).
///
/// `f` builds the loss from `theta` on the supplied graph. When `coords` is
/// non-empty only those flat indices are checked.
double finite_diff_check(
    const std::function<Var<double>(Graph<double>&, const Var<double>&)>& f, const TensorD& theta,
    double h, std::span<const std::size_t> coords = {});

/// Same check with the central differences taken on `f_ext`, the same function
/// evaluated in long double. Use when gradients are many orders below the loss
/// value and double cancellation would swamp the difference quotient.
double finite_diff_check(
    const std::function<Var<double>(Graph<double>&, const Var<double>&)>& f,
    const std::function<Var<long double>(Graph<long double>&, const Var<long double>&)>& f_ext,
    const TensorD& theta, double h, std::span<const std::size_t> coords = {});

}  // namespace evc
