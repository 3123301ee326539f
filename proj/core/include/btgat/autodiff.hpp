#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "btgat/tensor.hpp"

namespace btgat {

/// Primitive operations recorded on the tape.
enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  conv2d,
  max_pool2d,
  nearest_upsample2d,
  concat,
  sigmoid,
  tanh,
  relu,
  softmax,
  layer_norm,
  mean,
  sum,
  square,
  sqrt,
  log,
  exp,
  pow,
  clamp_min,
  broadcast,
  reshape,
  transpose,
  slice,
  gather_rows,
};

std::string_view op_name(Op op);

/// Attributes consumed by the primitives that need them; unused fields are ignored.
struct OpAttrs {
  int axis = 0;                       // concat, softmax, slice
  std::vector<std::size_t> axes;      // sum, mean (empty = all axes)
  bool keepdims = false;              // sum, mean
  Shape shape;                        // reshape, broadcast
  std::vector<std::size_t> perm;      // transpose
  std::size_t start = 0;              // slice
  std::size_t length = 0;             // slice
  double exponent = 1.0;              // pow
  double floor = 0.0;                 // clamp_min
  std::vector<std::size_t> indices;   // gather_rows
  bool check_finite = false;          // any op: throw NonFiniteError on inf/nan output
};

inline constexpr double kLayerNormEps = 1e-5;

class Tape;

/// A tensor value flowing through a computation. Either a constant or a handle to
/// a node on a Tape; handles are only valid while their tape is alive.
class Var {
 public:
  Var() : Var(Tensor()) {}
  Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}  // NOLINT

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  bool requires_grad() const { return tape_ != nullptr; }
  std::optional<std::size_t> tape_id() const {
    return tape_ ? std::optional<std::size_t>(node_) : std::nullopt;
  }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

class Gradients {
 public:
  /// Gradient of the backward root with respect to `leaf`; zeros when unreachable.
  const Tensor& operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> by_node_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction. backward() consumes the tape.
class Tape {
 public:
  using BackwardFn =
      std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);

  /// Exact vector-Jacobian sweep from a single-element root.
  Gradients backward(const Var& root);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  /// Appends a node; used by the primitive implementations. Inputs that do not
  /// require grad receive a null gradient slot.
  Var record(Op kind, Tensor value, std::vector<Var> inputs, BackwardFn fn);

 private:
  friend class Gradients;
  struct Node {
    Op kind;
    std::vector<std::optional<std::size_t>> inputs;
    BackwardFn fn;
    Shape shape;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Generic dispatch over the primitive set.
Var apply_primitive(Op kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

namespace ops {

// Elementwise binary ops broadcast numpy-style (right-aligned).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

/// (M,K) x (K,N).
Var matmul(const Var& a, const Var& b);

/// Stride-1 same-padding convolution. x is (H,W,Ci) or (N,H,W,Ci); w is (kh,kw,Ci,Co), kh/kw odd.
Var conv2d(const Var& x, const Var& w);
/// 2x2 window, stride 2, over the two axes preceding channels; first maximum in row-major scan wins.
Var max_pool2d(const Var& x);
Var nearest_upsample2d(const Var& x);

Var concat(std::span<const Var> xs, int axis);
Var slice(const Var& x, int axis, std::size_t start, std::size_t length);
Var reshape(const Var& x, Shape shape);
Var transpose(const Var& x, std::vector<std::size_t> perm);
Var broadcast(const Var& x, Shape shape);
/// Rows of x (first axis) picked by `indices`; result has first extent indices.size().
Var gather_rows(const Var& x, std::vector<std::size_t> indices);

Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
Var log(const Var& x);
Var exp(const Var& x);
Var pow(const Var& x, double exponent);
Var clamp_min(const Var& x, double floor);

Var softmax(const Var& x, int axis);
/// Normalizes each vector along the last axis to zero mean, unit variance (no affine).
Var layer_norm(const Var& x);

Var sum(const Var& x, std::vector<std::size_t> axes = {}, bool keepdims = false);
Var mean(const Var& x, std::vector<std::size_t> axes = {}, bool keepdims = false);

}  // namespace ops
}  // namespace btgat
