#pragma once

#include <string>
#include <vector>

#include "foma/autograd.hpp"
#include "foma/rng.hpp"

namespace foma::nn {

struct NamedParam {
  std::string name;
  ag::Var var;
  bool decay = true;  // weight decay applies
};
using ParamList = std::vector<NamedParam>;

struct NamedBuffer {
  std::string name;
  Tensor* tensor = nullptr;
};
using BufferList = std::vector<NamedBuffer>;

Tensor uniform_tensor(const Shape& shape, double bound, Rng& rng);
Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng);

// y = x W + b, W: [in, out].
struct Linear {
  ag::Var weight;
  ag::Var bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv2d {
  ag::Var weight;  // [out, in, k, k]
  ag::Var bias;    // [out]
  ag::Conv2dGeometry geom;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Batch normalization over [B, F]; running statistics used in eval mode.
struct BatchNorm1d {
  ag::Var gamma;
  ag::Var beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t features);
  ag::Var operator()(const ag::Var& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_buffers(BufferList& out, const std::string& prefix);
};

}  // namespace foma::nn
