#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ranp/tensor.hpp"

// Reverse-mode differentiation over dense tensors.
//
// Every operator returns a Var whose node remembers its inputs and a backward
// rule. backward(loss) walks the recorded graph in reverse topological order
// and accumulates d(loss)/d(node) into each node's grad buffer. Leaves created
// with Var::parameter keep their gradients across calls (accumulate until
// zero_grad); interior gradients are reset on every call.
namespace ranp::ad {

enum class OpKind {
  leaf,
  conv3d,
  relu,
  maxpool3d,
  upsample_nearest3d,
  concat_channels,
  linear,
  softmax,
  cross_entropy,
  scale_channels,
  reshape,
  add,
  mul,
  scale,
  sum,
  mean,
};

const char* op_name(OpKind op);

struct Node {
  OpKind op = OpKind::leaf;
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return op == OpKind::leaf; }
  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  explicit operator bool() const noexcept { return node_ != nullptr; }

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient buffer; a zero tensor of the value's shape if nothing has flowed yet.
  const Tensor& grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  friend Var make_op(OpKind, Tensor, std::vector<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Creates an interior node. The backward rule is dropped when no input needs
// gradients, which keeps pure inference graphs free of closures.
Var make_op(OpKind op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Seeds d(loss)/d(loss) = 1 and propagates. Throws ContractError if loss is
// not a single element.
void backward(const Var& loss);

// input [N, C_in, D, H, W], weight [C_out, C_in, kd, kh, kw], bias [C_out] or empty.
Var conv3d(const Var& input, const Var& weight, const Var& bias, int stride, int padding);
Var relu(const Var& input);
// Floor semantics, no padding. Ties route to the first maximal cell in scan order.
Var maxpool3d(const Var& input, int window, int stride);
Var upsample_nearest3d(const Var& input, int factor);
Var concat_channels(std::span<const Var> parts);
Var concat_channels(const Var& a, const Var& b);
// input [N, in], weight [out, in], bias [out] or empty.
Var linear(const Var& input, const Var& weight, const Var& bias);
Var softmax(const Var& input, std::size_t axis);
// Mean negative log-likelihood of log-softmax over axis 1. logits [N, C, ...],
// targets hold N * prod(spatial) class indices in row-major order.
Var cross_entropy(const Var& logits, std::span<const int> targets);
// y[n, c, ...] = x[n, c, ...] * scales[c]; scales has shape [C].
Var scale_channels(const Var& input, const Var& scales);
Var reshape(const Var& input, Shape shape);
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& input, double factor);
Var sum(const Var& input);
Var mean(const Var& input);

// Output extent of a strided window over `extent` cells with symmetric padding.
// Returns 0 or a negative number when the window does not fit.
long window_extent(long extent, long kernel, long stride, long padding);

}  // namespace ranp::ad
