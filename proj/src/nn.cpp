#include "foma/nn.hpp"

#include <cmath>

namespace foma::nn {

Tensor uniform_tensor(const Shape& shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(ag::parameter(uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng))),
      bias(ag::parameter(Tensor({out}))) {}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::add(ag::matmul(x, weight), bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng)
    : weight(ag::parameter(
          normal_tensor({out, in, kernel, kernel}, std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)), rng))),
      bias(ag::parameter(Tensor({out}))),
      geom{stride, padding} {}

ag::Var Conv2d::operator()(const ag::Var& x) const {
  return ag::add_channel_bias(ag::conv2d(x, weight, geom), bias);
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

BatchNorm1d::BatchNorm1d(std::size_t features)
    : gamma(ag::parameter(Tensor({features}, 1.0))),
      beta(ag::parameter(Tensor({features}))),
      running_mean({features}),
      running_var({features}, 1.0) {}

ag::Var BatchNorm1d::operator()(const ag::Var& x, bool training) {
  const std::size_t batch = x.shape()[0];
  if (training) {
    ag::Var mean = ag::mean_axis(x, 0);
    ag::Var centered = ag::sub(x, mean);
    ag::Var var = ag::mean_axis(ag::mul(centered, centered), 0);
    {
      const double unbias = batch > 1 ? static_cast<double>(batch) / static_cast<double>(batch - 1) : 1.0;
      for (std::size_t i = 0; i < running_mean.numel(); ++i) {
        running_mean.data[i] = (1.0 - momentum) * running_mean.data[i] + momentum * mean.value().data[i];
        running_var.data[i] = (1.0 - momentum) * running_var.data[i] + momentum * var.value().data[i] * unbias;
      }
    }
    ag::Var inv = ag::pow(ag::add_scalar(var, eps), -0.5);
    return ag::add(ag::mul(ag::mul(centered, inv), gamma), beta);
  }
  Tensor inv(running_var.shape);
  for (std::size_t i = 0; i < inv.numel(); ++i) inv.data[i] = 1.0 / std::sqrt(running_var.data[i] + eps);
  ag::Var centered = ag::sub(x, ag::constant(running_mean));
  return ag::add(ag::mul(ag::mul(centered, ag::constant(std::move(inv))), gamma), beta);
}

void BatchNorm1d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

void BatchNorm1d::collect_buffers(BufferList& out, const std::string& prefix) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

}  // namespace foma::nn
