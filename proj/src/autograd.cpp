#include "foma/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace foma::ag {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Var undefined() { return Var(); }

}  // namespace

// ---------------------------------------------------------------------------
// Var and graph bookkeeping

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return value().data[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor t) { return Var(std::move(t), false); }
Var parameter(Tensor t) { return Var(std::move(t), true); }

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* name) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = name;
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, GradOptions options, const Var& seed) {
  std::vector<Var> result(inputs.size());
  auto unused = [&](std::size_t i) {
    if (!options.allow_unused) {
      throw std::logic_error("grad: input " + std::to_string(i) + " is not connected to the output");
    }
  };
  if (!output.requires_grad()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) unused(i);
    return result;
  }

  // Post-order over the recorded graph.
  std::vector<Var> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Var, std::size_t>> stack;
  stack.emplace_back(output, 0);
  visited.insert(output.node());
  while (!stack.empty()) {
    auto& [v, next] = stack.back();
    Node* n = v.node();
    if (next < n->inputs.size()) {
      const Var& in = n->inputs[next++];
      if (in.requires_grad() && visited.insert(in.node()).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(v);
      stack.pop_back();
    }
  }

  std::unordered_set<Node*> targets;
  for (const auto& in : inputs) {
    if (in.defined()) targets.insert(in.node());
  }
  std::unordered_set<Node*> needed;
  for (const auto& v : order) {
    Node* n = v.node();
    bool need = targets.count(n) > 0;
    for (const auto& in : n->inputs) need = need || needed.count(in.node()) > 0;
    if (need) needed.insert(n);
  }

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (options.create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::unordered_map<Node*, Var> grads;
  if (seed.defined()) {
    require_same(seed.shape(), output.shape(), "grad seed");
    grads[output.node()] = seed;
  } else {
    grads[output.node()] = constant(Tensor(output.shape(), 1.0));
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->node();
    if (!needed.count(n) || !n->backward) continue;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    std::vector<bool> needs(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      needs[i] = n->inputs[i].requires_grad() && needed.count(n->inputs[i].node()) > 0;
      any = any || needs[i];
    }
    if (!any) continue;
    const Var g = found->second;
    // Intermediate gradients are no longer needed once propagated, unless requested.
    if (!targets.count(n)) grads.erase(found);
    std::vector<Var> outs = n->backward(*it, g, needs);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!needs[i] || !outs[i].defined()) continue;
      Node* in = n->inputs[i].node();
      require_same(outs[i].shape(), in->value.shape, n->op);
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, outs[i]);
      } else {
        slot->second = add(slot->second, outs[i]);
      }
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto found = inputs[i].defined() ? grads.find(inputs[i].node()) : grads.end();
    if (found == grads.end()) {
      unused(i);
    } else {
      result[i] = found->second;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

std::pair<Var, Var> broadcast_pair(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return {a, b};
  if (is_suffix(b.shape(), a.shape())) return {a, expand_to(b, a.shape())};
  if (is_suffix(a.shape(), b.shape())) return {expand_to(a, b.shape()), b};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                   shape_str(b.shape()));
}

}  // namespace

Var add(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return make_op(
      std::move(out), {a, b},
      [](const Var&, const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{needs[0] ? g : undefined(), needs[1] ? g : undefined()};
      },
      "add");
}

Var sub(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return make_op(
      std::move(out), {a, b},
      [](const Var&, const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{needs[0] ? g : undefined(), needs[1] ? neg(g) : undefined()};
      },
      "sub");
}

Var mul(const Var& a0, const Var& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  return make_op(
      std::move(out), {a, b},
      [](const Var& self, const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{needs[0] ? mul(g, self.input(1)) : undefined(),
                                needs[1] ? mul(g, self.input(0)) : undefined()};
      },
      "mul");
}

Var div(const Var& a, const Var& b) { return mul(a, pow(b, -1.0)); }

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return make_op(
      map_unary(a.value(), [c](double v) { return v * c; }), {a},
      [c](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{scale(g, c)}; }, "scale");
}

Var add_scalar(const Var& a, double c) {
  return make_op(
      map_unary(a.value(), [c](double v) { return v + c; }), {a},
      [](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; }, "add_scalar");
}

Var relu(const Var& a) {
  return make_op(
      map_unary(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {a},
      [](const Var& self, const Var& g, const std::vector<bool>&) {
        Tensor mask = map_unary(self.input(0).value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
        return std::vector<Var>{mul(g, constant(std::move(mask)))};
      },
      "relu");
}

Var exp(const Var& a) {
  return make_op(
      map_unary(a.value(), [](double v) { return std::exp(v); }), {a},
      [](const Var& self, const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul(g, self)}; },
      "exp");
}

Var log(const Var& a) {
  return make_op(
      map_unary(a.value(), [](double v) { return std::log(v); }), {a},
      [](const Var& self, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, pow(self.input(0), -1.0))};
      },
      "log");
}

Var pow(const Var& a, double p) {
  return make_op(
      map_unary(a.value(), [p](double v) { return std::pow(v, p); }), {a},
      [p](const Var& self, const Var& g, const std::vector<bool>&) {
        if (p == 1.0) return std::vector<Var>{g};
        return std::vector<Var>{mul(g, scale(pow(self.input(0), p - 1.0), p))};
      },
      "pow");
}

// ---------------------------------------------------------------------------
// Broadcasting and reductions

Var expand_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (!is_suffix(a.shape(), shape)) {
    throw ShapeError("expand_to: " + shape_str(a.shape()) + " is not a suffix of " + shape_str(shape));
  }
  const std::size_t block = a.numel();
  const std::size_t reps = numel(shape) / std::max<std::size_t>(block, 1);
  Tensor out(shape);
  for (std::size_t r = 0; r < reps; ++r) {
    std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin() + r * block);
  }
  Shape src = a.shape();
  return make_op(
      std::move(out), {a},
      [src](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{sum_to(g, src)}; },
      "expand_to");
}

Var sum_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (!is_suffix(shape, a.shape())) {
    throw ShapeError("sum_to: " + shape_str(shape) + " is not a suffix of " + shape_str(a.shape()));
  }
  const std::size_t block = numel(shape);
  const std::size_t reps = a.numel() / std::max<std::size_t>(block, 1);
  Tensor out(shape);
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < block; ++i) out.data[i] += a.value().data[r * block + i];
  }
  Shape src = a.shape();
  return make_op(
      std::move(out), {a},
      [src](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{expand_to(g, src)}; },
      "sum_to");
}

Var expand_axis(const Var& a, int axis_in, std::size_t n) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size() + 1);
  Shape shape = a.shape();
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const AxisSplit s = split_axis(shape, axis);
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * s.inner), s.inner,
                  out.data.begin() + static_cast<std::ptrdiff_t>((o * n + k) * s.inner));
    }
  }
  return make_op(
      std::move(out), {a},
      [axis](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{sum_axis(g, static_cast<int>(axis))};
      },
      "expand_axis");
}

Var sum_axis(const Var& a, int axis_in) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size());
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    double* dst = out.data.data() + o * s.inner;
    for (std::size_t k = 0; k < s.extent; ++k) {
      const double* row = src.data() + (o * s.extent + k) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  const std::size_t extent = s.extent;
  return make_op(
      std::move(out), {a},
      [axis, extent](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{expand_axis(g, static_cast<int>(axis), extent)};
      },
      "sum_axis");
}

Var mean_axis(const Var& a, int axis) {
  const std::size_t n = a.shape()[normalize_axis(axis, a.shape().size())];
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(n));
}

Var sum_all(const Var& a) { return sum_to(a, Shape{}); }

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Layout

Var reshape(const Var& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  if (a.shape() == shape) return a;
  Shape src = a.shape();
  return make_op(
      Tensor(shape, a.value().data), {a},
      [src](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{reshape(g, src)}; },
      "reshape");
}

Var permute(const Var& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  const std::size_t rank = in.size();
  if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  Tensor out(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  const auto& src = a.value().data;
  for (std::size_t flat = 0; flat < out.numel(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += idx[d] * strides[d];
    out.data[flat] = src[off];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[perm[i]] = i;
  return make_op(
      std::move(out), {a},
      [inverse](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{permute(g, inverse)};
      },
      "permute");
}

Var slice(const Var& a, int axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size());
  const AxisSplit s = split_axis(a.shape(), axis);
  if (start + length > s.extent) throw ShapeError("slice: range exceeds extent");
  Shape shape = a.shape();
  shape[axis] = length;
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), length * s.inner,
                out.data.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  const std::size_t extent = s.extent;
  return make_op(
      std::move(out), {a},
      [axis, start, extent](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{pad(g, static_cast<int>(axis), start, extent)};
      },
      "slice");
}

Var pad(const Var& a, int axis_in, std::size_t start, std::size_t total) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size());
  const AxisSplit s = split_axis(a.shape(), axis);
  if (start + s.extent > total) throw ShapeError("pad: range exceeds total");
  Shape shape = a.shape();
  shape[axis] = total;
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner), s.extent * s.inner,
                out.data.begin() + static_cast<std::ptrdiff_t>((o * total + start) * s.inner));
  }
  const std::size_t length = s.extent;
  return make_op(
      std::move(out), {a},
      [axis, start, length](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{slice(g, static_cast<int>(axis), start, length)};
      },
      "pad");
}

Var concat(const std::vector<Var>& parts, int axis_in) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t axis = normalize_axis(axis_in, parts[0].shape().size());
  Shape shape = parts[0].shape();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    probe[axis] = shape[axis];
    if (probe != shape) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()));
    offsets.push_back(total);
    total += p.shape()[axis];
  }
  shape[axis] = total;
  Tensor out(shape);
  const AxisSplit so = split_axis(shape, axis);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t ext = parts[k].shape()[axis];
    const auto& src = parts[k].value().data;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ext * so.inner), ext * so.inner,
                  out.data.begin() + static_cast<std::ptrdiff_t>((o * total + offsets[k]) * so.inner));
    }
  }
  return make_op(
      std::move(out), parts,
      [axis, offsets](const Var& self, const Var& g, const std::vector<bool>& needs) {
        std::vector<Var> res(offsets.size());
        for (std::size_t k = 0; k < offsets.size(); ++k) {
          if (needs[k]) res[k] = slice(g, static_cast<int>(axis), offsets[k], self.input(k).shape()[axis]);
        }
        return res;
      },
      "concat");
}

Var index_select(const Var& a, int axis_in, const std::vector<std::size_t>& index) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size());
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = index.size();
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= s.extent) throw ShapeError("index_select: index out of range");
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * s.extent + index[k]) * s.inner), s.inner,
                  out.data.begin() + static_cast<std::ptrdiff_t>((o * index.size() + k) * s.inner));
    }
  }
  const std::size_t extent = s.extent;
  return make_op(
      std::move(out), {a},
      [axis, index, extent](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{index_add(g, static_cast<int>(axis), index, extent)};
      },
      "index_select");
}

Var index_add(const Var& a, int axis_in, const std::vector<std::size_t>& index, std::size_t extent) {
  const std::size_t axis = normalize_axis(axis_in, a.shape().size());
  const AxisSplit s = split_axis(a.shape(), axis);
  if (s.extent != index.size()) throw ShapeError("index_add: index length mismatch");
  Shape shape = a.shape();
  shape[axis] = extent;
  Tensor out(shape);
  const auto& src = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= extent) throw ShapeError("index_add: index out of range");
      const double* from = src.data() + (o * index.size() + k) * s.inner;
      double* to = out.data.data() + (o * extent + index[k]) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) to[i] += from[i];
    }
  }
  return make_op(
      std::move(out), {a},
      [axis, index](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{index_select(g, static_cast<int>(axis), index)};
      },
      "index_add");
}

Var gather_last(const Var& a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  if (index.size() != rows) throw ShapeError("gather_last: index length mismatch");
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= n) throw ShapeError("gather_last: index out of range");
    out.data[r] = a.value().data[r * n + index[r]];
  }
  return make_op(
      std::move(out), {a},
      [index, n](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{scatter_last(g, index, n)};
      },
      "gather_last");
}

Var scatter_last(const Var& a, const std::vector<std::size_t>& index, std::size_t extent) {
  const std::size_t rows = a.numel();
  if (index.size() != rows) throw ShapeError("scatter_last: index length mismatch");
  Shape shape = a.shape();
  shape.push_back(extent);
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) out.data[r * extent + index[r]] = a.value().data[r];
  return make_op(
      std::move(out), {a},
      [index](const Var&, const Var& g, const std::vector<bool>&) { return std::vector<Var>{gather_last(g, index)}; },
      "scatter_last");
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

bool aligned(const double* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; }

// Eigen peels loops at alignment boundaries, so a product over a misaligned
// pointer rounds differently depending on where the allocator placed the
// buffer. Misaligned operands are copied into owned (aligned) storage first.
template <class Fn>
void with_aligned(const double* p, Eigen::Index r, Eigen::Index c, Fn&& fn) {
  if (aligned(p)) {
    fn(ConstMap(p, r, c));
  } else {
    const RowMat copy = ConstMap(p, r, c);
    fn(ConstMap(copy.data(), r, c));
  }
}

void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b, std::size_t br,
          std::size_t bc, bool tb, double* c) {
  const Eigen::Index m = static_cast<Eigen::Index>(ta ? ac : ar);
  const Eigen::Index n = static_cast<Eigen::Index>(tb ? br : bc);
  with_aligned(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac), [&](const ConstMap& A) {
    with_aligned(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc), [&](const ConstMap& B) {
      auto run = [&](auto& C) {
        if (!ta && !tb) {
          C.noalias() = A * B;
        } else if (ta && !tb) {
          C.noalias() = A.transpose() * B;
        } else if (!ta && tb) {
          C.noalias() = A * B.transpose();
        } else {
          C.noalias() = A.transpose() * B.transpose();
        }
      };
      if (aligned(c)) {
        MutMap C(c, m, n);
        run(C);
      } else {
        RowMat C(m, n);
        run(C);
        MutMap(c, m, n) = C;
      }
    });
  });
}

Var matmul_core(const Var& a, const Var& b, bool ta, bool tb) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t rank = as.size();
  if ((rank != 2 && rank != 3) || bs.size() != rank) throw ShapeError("matmul: unsupported ranks");
  const std::size_t batch = rank == 3 ? as[0] : 1;
  if (rank == 3 && bs[0] != batch) throw ShapeError("matmul: batch mismatch");
  const std::size_t ar = as[rank - 2], ac = as[rank - 1];
  const std::size_t br = bs[rank - 2], bc = bs[rank - 1];
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t kb = tb ? bc : br, n = tb ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape shape = rank == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor out(shape);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(a.value().data.data() + i * ar * ac, ar, ac, ta, b.value().data.data() + i * br * bc, br, bc, tb,
         out.data.data() + i * m * n);
  }
  return make_op(
      std::move(out), {a, b},
      [ta, tb](const Var& self, const Var& g, const std::vector<bool>& needs) {
        const Var& A = self.input(0);
        const Var& B = self.input(1);
        Var da, db;
        if (needs[0]) da = ta ? matmul_core(B, g, tb, true) : matmul_core(g, B, false, !tb);
        if (needs[1]) db = tb ? matmul_core(g, A, true, ta) : matmul_core(A, g, !ta, false);
        return std::vector<Var>{da, db};
      },
      "matmul");
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  if (a.shape().size() == 3 && b.shape().size() == 2) {
    if (transpose_a) throw ShapeError("matmul: transposed 3-D x 2-D is unsupported");
    const Shape& as = a.shape();
    Var flat = reshape(a, Shape{as[0] * as[1], as[2]});
    Var prod = matmul_core(flat, b, false, transpose_b);
    return reshape(prod, Shape{as[0], as[1], prod.shape()[1]});
  }
  return matmul_core(a, b, transpose_a, transpose_b);
}

Var softmax_last(const Var& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * n;
    double* dst = out.data.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += (dst[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < n; ++i) dst[i] /= sum;
  }
  return make_op(
      std::move(out), {a},
      [n](const Var& self, const Var& g, const std::vector<bool>&) {
        Var gy = mul(g, self);
        Var s = expand_axis(sum_axis(gy, -1), -1, n);
        return std::vector<Var>{sub(gy, mul(self, s))};
      },
      "softmax");
}

Var log_softmax_last(const Var& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * n;
    double* dst = out.data.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) dst[i] = row[i] - lse;
  }
  return make_op(
      std::move(out), {a},
      [n](const Var& self, const Var& g, const std::vector<bool>&) {
        Var s = expand_axis(sum_axis(g, -1), -1, n);
        return std::vector<Var>{sub(g, mul(exp(self), s))};
      },
      "log_softmax");
}

// ---------------------------------------------------------------------------
// Convolution via im2col

namespace {

using Scratch = std::vector<double, Eigen::aligned_allocator<double>>;

struct ConvDims {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  std::size_t stride, padding;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, Conv2dGeometry geom) {
  if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d: expects 4-D input and weight");
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: channel mismatch " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  if (ws[2] != ws[3]) throw ShapeError("conv2d: square kernels only");
  ConvDims d{};
  d.batch = xs[0];
  d.cin = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.cout = ws[0];
  d.k = ws[2];
  d.stride = geom.stride;
  d.padding = geom.padding;
  if (d.h + 2 * d.padding < d.k || d.w + 2 * d.padding < d.k) throw ShapeError("conv2d: kernel larger than input");
  d.ho = (d.h + 2 * d.padding - d.k) / d.stride + 1;
  d.wo = (d.w + 2 * d.padding - d.k) / d.stride + 1;
  return d;
}

// Output columns [lo, hi) whose input column ox*stride + kj - padding is in range.
std::pair<std::size_t, std::size_t> valid_range(std::size_t kj, const ConvDims& d, std::size_t out, std::size_t in) {
  std::size_t lo = 0;
  if (kj < d.padding) lo = (d.padding - kj + d.stride - 1) / d.stride;
  std::size_t hi = 0;
  if (in + d.padding > kj) hi = std::min(out, (in + d.padding - kj - 1) / d.stride + 1);
  return {std::min(lo, hi), hi};
}

// cols: [cin*k*k, batch*ho*wo]
Scratch im2col(const double* x, const ConvDims& d) {
  const std::size_t cols_n = d.batch * d.ho * d.wo;
  Scratch cols(d.cin * d.k * d.k * cols_n, 0.0);
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      const auto [ylo, yhi] = valid_range(ki, d, d.ho, d.h);
      for (std::size_t kj = 0; kj < d.k; ++kj) {
        const auto [xlo, xhi] = valid_range(kj, d, d.wo, d.w);
        double* row = cols.data() + ((c * d.k + ki) * d.k + kj) * cols_n;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const double* plane = x + (b * d.cin + c) * d.h * d.w;
          double* dst = row + b * d.ho * d.wo;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* src = plane + static_cast<std::ptrdiff_t>((oy * d.stride + ki - d.padding) * d.w + kj) -
                                static_cast<std::ptrdiff_t>(d.padding);
            double* out = dst + oy * d.wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox) out[ox] = src[ox * d.stride];
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const double* cols, const ConvDims& d, double* x) {
  const std::size_t cols_n = d.batch * d.ho * d.wo;
  for (std::size_t c = 0; c < d.cin; ++c) {
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      const auto [ylo, yhi] = valid_range(ki, d, d.ho, d.h);
      for (std::size_t kj = 0; kj < d.k; ++kj) {
        const auto [xlo, xhi] = valid_range(kj, d, d.wo, d.w);
        const double* row = cols + ((c * d.k + ki) * d.k + kj) * cols_n;
        for (std::size_t b = 0; b < d.batch; ++b) {
          double* plane = x + (b * d.cin + c) * d.h * d.w;
          const double* src = row + b * d.ho * d.wo;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            double* dst = plane + static_cast<std::ptrdiff_t>((oy * d.stride + ki - d.padding) * d.w + kj) -
                          static_cast<std::ptrdiff_t>(d.padding);
            const double* in = src + oy * d.wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * d.stride] += in[ox];
          }
        }
      }
    }
  }
}

// [batch, cout, ho*wo] <-> [cout, batch*ho*wo]
Scratch to_channel_major(const double* g, const ConvDims& d) {
  const std::size_t hw = d.ho * d.wo;
  Scratch out(d.cout * d.batch * hw);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.cout; ++c) {
      std::copy_n(g + (b * d.cout + c) * hw, hw, out.data() + (c * d.batch + b) * hw);
    }
  }
  return out;
}

void from_channel_major(const double* y, const ConvDims& d, double* out) {
  const std::size_t hw = d.ho * d.wo;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.cout; ++c) {
      std::copy_n(y + (c * d.batch + b) * hw, hw, out + (b * d.cout + c) * hw);
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvDims& d) {
  const std::size_t ckk = d.cin * d.k * d.k;
  const std::size_t cols_n = d.batch * d.ho * d.wo;
  Scratch cols = im2col(x.data.data(), d);
  Scratch y(d.cout * cols_n);
  gemm(w.data.data(), d.cout, ckk, false, cols.data(), ckk, cols_n, false, y.data());
  Tensor out(Shape{d.batch, d.cout, d.ho, d.wo});
  from_channel_major(y.data(), d, out.data.data());
  return out;
}

Tensor conv_input_grad(const Tensor& g, const Tensor& w, const ConvDims& d) {
  const std::size_t ckk = d.cin * d.k * d.k;
  const std::size_t cols_n = d.batch * d.ho * d.wo;
  Scratch gm = to_channel_major(g.data.data(), d);
  Scratch cols(ckk * cols_n);
  gemm(w.data.data(), d.cout, ckk, true, gm.data(), d.cout, cols_n, false, cols.data());
  Tensor out(Shape{d.batch, d.cin, d.h, d.w});
  col2im(cols.data(), d, out.data.data());
  return out;
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& g, const ConvDims& d) {
  const std::size_t ckk = d.cin * d.k * d.k;
  const std::size_t cols_n = d.batch * d.ho * d.wo;
  Scratch cols = im2col(x.data.data(), d);
  Scratch gm = to_channel_major(g.data.data(), d);
  Tensor out(Shape{d.cout, d.cin, d.k, d.k});
  gemm(gm.data(), d.cout, cols_n, false, cols.data(), ckk, cols_n, true, out.data.data());
  return out;
}

}  // namespace

Tensor conv2d_tensor(const Tensor& x, const Tensor& w, Conv2dGeometry geom) {
  return conv_forward(x, w, conv_dims(x.shape, w.shape, geom));
}

Var conv2d(const Var& x, const Var& w, Conv2dGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
  return make_op(
      conv_forward(x.value(), w.value(), d), {x, w},
      [geom](const Var& self, const Var& g, const std::vector<bool>& needs) {
        const Var& X = self.input(0);
        const Var& W = self.input(1);
        Var dx, dw;
        if (needs[0]) dx = conv2d_input_grad(g, W, X.shape(), geom);
        if (needs[1]) dw = conv2d_weight_grad(X, g, W.shape(), geom);
        return std::vector<Var>{dx, dw};
      },
      "conv2d");
}

Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, Conv2dGeometry geom) {
  const ConvDims d = conv_dims(input_shape, w.shape(), geom);
  if (grad_out.shape() != Shape{d.batch, d.cout, d.ho, d.wo}) throw ShapeError("conv2d_input_grad: bad grad shape");
  return make_op(
      conv_input_grad(grad_out.value(), w.value(), d), {grad_out, w},
      [geom](const Var& self, const Var& g, const std::vector<bool>& needs) {
        const Var& G = self.input(0);
        const Var& W = self.input(1);
        Var dg, dw;
        if (needs[0]) dg = conv2d(g, W, geom);
        if (needs[1]) dw = conv2d_weight_grad(g, G, W.shape(), geom);
        return std::vector<Var>{dg, dw};
      },
      "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, Conv2dGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), weight_shape, geom);
  if (grad_out.shape() != Shape{d.batch, d.cout, d.ho, d.wo}) {
    throw ShapeError("conv2d_weight_grad: bad grad shape");
  }
  return make_op(
      conv_weight_grad(x.value(), grad_out.value(), d), {x, grad_out},
      [geom](const Var& self, const Var& g, const std::vector<bool>& needs) {
        const Var& X = self.input(0);
        const Var& G = self.input(1);
        Var dx, dg;
        if (needs[0]) dx = conv2d_input_grad(G, g, X.shape(), geom);
        if (needs[1]) dg = conv2d(X, g, geom);
        return std::vector<Var>{dx, dg};
      },
      "conv2d_weight_grad");
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || bias.shape() != Shape{xs[1]}) throw ShapeError("add_channel_bias: shape mismatch");
  const std::size_t channels = xs[1];
  const std::size_t spatial = x.numel() / (xs[0] * channels);
  Tensor out = x.value();
  for (std::size_t b = 0; b < xs[0]; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.data.data() + (b * channels + c) * spatial;
      const double v = bias.value().data[c];
      for (std::size_t i = 0; i < spatial; ++i) p[i] += v;
    }
  }
  return make_op(
      std::move(out), {x, bias},
      [channels, spatial](const Var& self, const Var& g, const std::vector<bool>& needs) {
        Var db;
        if (needs[1]) {
          const std::size_t batch = self.input(0).shape()[0];
          db = sum_axis(sum_axis(reshape(g, Shape{batch, channels, spatial}), 2), 0);
        }
        return std::vector<Var>{needs[0] ? g : undefined(), db};
      },
      "add_channel_bias");
}

// ---------------------------------------------------------------------------
// Adaptive average pooling

namespace {

std::size_t bin_begin(std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; }
std::size_t bin_end(std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; }

Tensor pool_adjoint(const Tensor& g, std::size_t ih, std::size_t iw) {
  const std::size_t planes = g.shape[0] * g.shape[1];
  const std::size_t oh = g.shape[2], ow = g.shape[3];
  Tensor out(Shape{g.shape[0], g.shape[1], ih, iw});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = g.data.data() + p * oh * ow;
    double* dst = out.data.data() + p * ih * iw;
    for (std::size_t i = 0; i < oh; ++i) {
      const std::size_t r0 = bin_begin(i, ih, oh), r1 = bin_end(i, ih, oh);
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t c0 = bin_begin(j, iw, ow), c1 = bin_end(j, iw, ow);
        const double v = src[i * ow + j] / static_cast<double>((r1 - r0) * (c1 - c0));
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t c = c0; c < c1; ++c) dst[r * iw + c] += v;
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor adaptive_avg_pool2d_tensor(const Tensor& x, std::size_t oh, std::size_t ow) {
  if (x.dim() != 4) throw ShapeError("adaptive_avg_pool2d: expects 4-D input");
  const std::size_t planes = x.shape[0] * x.shape[1];
  const std::size_t ih = x.shape[2], iw = x.shape[3];
  if (oh == 0 || ow == 0 || oh > ih || ow > iw) throw ShapeError("adaptive_avg_pool2d: bad output size");
  Tensor out(Shape{x.shape[0], x.shape[1], oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data.data() + p * ih * iw;
    double* dst = out.data.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const std::size_t r0 = bin_begin(i, ih, oh), r1 = bin_end(i, ih, oh);
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t c0 = bin_begin(j, iw, ow), c1 = bin_end(j, iw, ow);
        double s = 0.0;
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t c = c0; c < c1; ++c) s += src[r * iw + c];
        }
        dst[i * ow + j] = s / static_cast<double>((r1 - r0) * (c1 - c0));
      }
    }
  }
  return out;
}

Var adaptive_avg_pool2d(const Var& x, std::size_t oh, std::size_t ow) {
  const std::size_t ih = x.shape()[2], iw = x.shape()[3];
  if (ih == oh && iw == ow) return x;
  return make_op(
      adaptive_avg_pool2d_tensor(x.value(), oh, ow), {x},
      [ih, iw](const Var&, const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{adaptive_avg_pool2d_adjoint(g, ih, iw)};
      },
      "adaptive_avg_pool2d");
}

Var adaptive_avg_pool2d_adjoint(const Var& g, std::size_t ih, std::size_t iw) {
  const std::size_t oh = g.shape()[2], ow = g.shape()[3];
  return make_op(
      pool_adjoint(g.value(), ih, iw), {g},
      [oh, ow](const Var&, const Var& gg, const std::vector<bool>&) {
        return std::vector<Var>{adaptive_avg_pool2d(gg, oh, ow)};
      },
      "adaptive_avg_pool2d_adjoint");
}

}  // namespace foma::ag
