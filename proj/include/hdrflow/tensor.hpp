// SPDX-License-Identifier: Apache-2.0
//
// Dense N-d tensors with a minimal reverse-mode gradient tape.
//
// A Tensor<T> is a cheap handle onto shared storage. Operations are pure:
// they allocate a fresh output and never mutate inputs. When any input is
// attached to a Tape (via Tape::watch on leaves, or transitively), the
// operation records a pullback closure so backward() can later accumulate
// gradients into every watched leaf.
//
// The tape is a per-invocation object, not global state: independent
// evaluations on separate tapes may run in parallel. A single tape must be
// used from one thread at a time.

#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "hdrflow/common.hpp"

namespace hdrflow {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Dims dims;
  std::vector<T> values;
  std::vector<T> grad;   // persistent for leaves, scratch for intermediates
  bool requires_grad = false;
  bool leaf = false;     // true once watched by a tape
  Tape<T>* tape = nullptr;

  long long numel() const { return static_cast<long long>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  explicit Tensor(Dims dims) : node_(std::make_shared<Node>()) {
    node_->dims = std::move(dims);
    node_->values.assign(static_cast<size_t>(numel_of(node_->dims)), T(0));
  }

  Tensor(Dims dims, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (numel_of(dims) != static_cast<long long>(values.size()))
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values for dims " + dims_to_string(dims));
    node_->dims = std::move(dims);
    node_->values = std::move(values);
  }

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }

  static Tensor full(Dims dims, T value) {
    Tensor t(std::move(dims));
    for (auto& v : t.node_->values) v = value;
    return t;
  }

  const Dims& dims() const { return node_->dims; }
  int dim(int i) const { return node_->dims.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->dims.size()); }
  long long numel() const { return node_->numel(); }

  std::span<T> values() { return node_->values; }
  std::span<const T> values() const { return node_->values; }

  /// Checked multi-index access; slow path intended for tests and setup code.
  template <typename... Ix>
  T& at(Ix... ix) {
    return node_->values[static_cast<size_t>(offset_of({static_cast<int>(ix)...}))];
  }
  template <typename... Ix>
  T at(Ix... ix) const {
    return node_->values[static_cast<size_t>(offset_of({static_cast<int>(ix)...}))];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  std::span<const T> grad() const {
    if (!has_grad())
      throw std::invalid_argument("Tensor: gradient not populated");
    return node_->grad;
  }
  void zero_grad() {
    node_->grad.assign(node_->values.size(), T(0));
  }

  Tape<T>* tape() const { return node_->tape; }

  /// Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.node_->dims = node_->dims;
    t.node_->values = node_->values;
    return t;
  }

  bool same_dims(const Tensor& o) const { return node_->dims == o.node_->dims; }

  /// Internal: shared node for operation implementations.
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  long long offset_of(std::initializer_list<int> ix) const {
    if (static_cast<int>(ix.size()) != ndim())
      throw std::invalid_argument("Tensor::at: rank mismatch");
    long long off = 0;
    int i = 0;
    for (int v : ix) {
      int extent = node_->dims[static_cast<size_t>(i)];
      if (v < 0 || v >= extent)
        throw std::invalid_argument("Tensor::at: index out of range");
      off = off * extent + v;
      ++i;
    }
    return off;
  }

  std::shared_ptr<Node> node_;
};

/// Records pullbacks for one differentiable evaluation. Destroying the tape
/// detaches every node that was recorded on it, so long-lived tensors
/// (network parameters) can be re-watched on the next tape.
template <typename T>
class Tape {
 public:
  Tape() = default;
  ~Tape() { clear(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Marks a leaf whose gradient should be accumulated by backward().
  void watch(Tensor<T>& t) {
    auto& n = *t.node();
    if (n.tape == this) return;
    if (n.tape != nullptr)
      throw std::invalid_argument("Tape::watch: tensor already on another tape");
    n.tape = this;
    n.leaf = true;
    n.requires_grad = true;
    n.ensure_grad();
    nodes_.push_back(t.node());
  }

  void clear() {
    for (auto& n : nodes_) {
      n->tape = nullptr;
      n->leaf = false;
    }
    nodes_.clear();
    pullbacks_.clear();
  }

  size_t recorded_ops() const { return pullbacks_.size(); }

  // Internal API used by operation implementations.
  void attach(const std::shared_ptr<detail::TensorNode<T>>& n) {
    n->tape = this;
    nodes_.push_back(n);
  }
  void record(std::function<void()> pullback) {
    pullbacks_.push_back(std::move(pullback));
  }

  template <typename U>
  friend void backward(const Tensor<U>& loss);

 private:
  std::vector<std::function<void()>> pullbacks_;
  std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes_;
};

/// Reverse-mode sweep from a scalar loss. Populates grad on every watched
/// leaf reachable from the loss; repeated calls accumulate into leaf grads.
template <typename T>
void backward(const Tensor<T>& loss);

/// Parameters of a 2-d convolution. Weight layout is
/// [out_channels, in_channels, kernel_h, kernel_w]; depthwise layout is
/// [channels, 1, kernel_h, kernel_w]. Transposed convolutions use
/// [in_channels, out_channels, kernel_h, kernel_w].
struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int padding = 0;
  bool depthwise = false;

  static ConvSpec same(int in_c, int out_c, int k, int stride = 1) {
    return ConvSpec{in_c, out_c, k, k, stride, k / 2, false};
  }
  static ConvSpec depthwise_same(int channels, int k) {
    return ConvSpec{channels, channels, k, k, 1, k / 2, true};
  }
};

// ---- Elementwise and scalar operations -------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double k);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, double k);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> clamp(const Tensor<T>& a, double lo, double hi);
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& a, double p);

/// Multiplies a [C,H,W] tensor by a single-channel [1,H,W] map, broadcast
/// across channels.
template <typename T> Tensor<T> mul_bcast1(const Tensor<T>& a, const Tensor<T>& m);

// ---- Reductions -------------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// ---- Shape operations --------------------------------------------------------

/// Concatenates [C_i,H,W] tensors along the channel axis.
template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Channels [c0, c1) of a [C,H,W] tensor.
template <typename T> Tensor<T> slice_channels(const Tensor<T>& a, int c0, int c1);

// ---- Spatial operations ------------------------------------------------------

/// 2-d convolution over [C,H,W] or [N,C,H,W] input.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvSpec& spec,
                 const Tensor<T>& weights, const Tensor<T>& bias);

/// Transposed convolution; restricted to the 4x4/stride-2/pad-1 form, which
/// exactly doubles spatial dims.
template <typename T>
Tensor<T> deconv2d(const Tensor<T>& input, const ConvSpec& spec,
                   const Tensor<T>& weights, const Tensor<T>& bias);

/// 2x2 average pooling, stride 2. Requires even H and W.
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& input);

/// Bilinear resize, align-corners=false (half-pixel centers), edge clamped.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w);

// ---- Conversions -------------------------------------------------------------

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace hdrflow
