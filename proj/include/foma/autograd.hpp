#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every backward rule is written in terms of differentiable ops, so a
// gradient computed with `create_graph = true` is itself a node in the graph
// and can be differentiated again.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "foma/tensor.hpp"

namespace foma::ag {

class Var;

using BackwardFn =
    std::function<std::vector<Var>(const Var& self, const Var& grad, const std::vector<bool>& needs)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& value() const { return node_->value; }
  // Only for leaves: optimizers update parameters in place.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t numel() const { return node_->value.numel(); }
  double item() const;
  const Var& input(std::size_t i) const { return node_->inputs[i]; }
  Node* node() const { return node_.get(); }
  const char* op() const { return node_->op; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph recording in scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor t);
Var parameter(Tensor t);
Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* name);

struct GradOptions {
  bool create_graph = false;
  bool allow_unused = false;
};

// Gradients of `output` (any shape; seeded with `seed` or ones) with respect
// to each of `inputs`. Unreachable inputs yield an undefined Var when
// allow_unused is set and throw otherwise.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, GradOptions options = {},
                      const Var& seed = {});

// ---- elementwise ----------------------------------------------------------
// Binary ops broadcast when one operand's shape is a suffix of the other's.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);

// ---- broadcasting and reductions -----------------------------------------
Var expand_to(const Var& a, const Shape& shape);  // a.shape is a suffix of shape
Var sum_to(const Var& a, const Shape& shape);     // shape is a suffix of a.shape
Var expand_axis(const Var& a, int axis, std::size_t n);
Var sum_axis(const Var& a, int axis);
Var mean_axis(const Var& a, int axis);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- layout ---------------------------------------------------------------
Var reshape(const Var& a, const Shape& shape);
Var permute(const Var& a, const std::vector<std::size_t>& perm);
Var slice(const Var& a, int axis, std::size_t start, std::size_t length);
Var pad(const Var& a, int axis, std::size_t start, std::size_t total);
Var concat(const std::vector<Var>& parts, int axis);
Var index_select(const Var& a, int axis, const std::vector<std::size_t>& index);
Var index_add(const Var& a, int axis, const std::vector<std::size_t>& index, std::size_t extent);
// Per-row pick along the last axis: out[r] = a[r, index[r]].
Var gather_last(const Var& a, const std::vector<std::size_t>& index);
Var scatter_last(const Var& a, const std::vector<std::size_t>& index, std::size_t extent);

// ---- linear algebra -------------------------------------------------------
// 2-D or batched 3-D product of op(a) and op(b); a 3-D left operand with a
// 2-D right operand is flattened over its leading axes.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

Var softmax_last(const Var& a);
Var log_softmax_last(const Var& a);

// ---- spatial ---------------------------------------------------------------
struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
// x: [B, Cin, H, W], w: [Cout, Cin, K, K] -> [B, Cout, Ho, Wo]
Var conv2d(const Var& x, const Var& w, Conv2dGeometry geom);
Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, Conv2dGeometry geom);
Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, Conv2dGeometry geom);
// Adds a per-channel bias [C] to a [B, C, ...] tensor.
Var add_channel_bias(const Var& x, const Var& bias);

// x: [B, C, H, W] -> [B, C, oh, ow], cell (i,j) averages rows
// [floor(i*H/oh), ceil((i+1)*H/oh)) and likewise for columns.
Var adaptive_avg_pool2d(const Var& x, std::size_t oh, std::size_t ow);
Var adaptive_avg_pool2d_adjoint(const Var& g, std::size_t ih, std::size_t iw);

// Raw kernels shared with non-differentiable code paths.
Tensor adaptive_avg_pool2d_tensor(const Tensor& x, std::size_t oh, std::size_t ow);
Tensor conv2d_tensor(const Tensor& x, const Tensor& w, Conv2dGeometry geom);

}  // namespace foma::ag
