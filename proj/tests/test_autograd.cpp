#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "foma/autograd.hpp"
#include "test_util.hpp"

using namespace foma;
using namespace foma::testing;
using ag::Var;

namespace {

using UnaryFn = std::function<Var(const Var&)>;

// Checks d<f(x), r>/dx against finite differences, then checks the second
// derivative along a random direction: d<grad, s>/dx with create_graph.
void check_op(const UnaryFn& f, const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  Tensor x0 = random_tensor(shape, rng, lo, hi);
  Tensor r = random_tensor(f(ag::constant(x0)).shape(), rng);
  Tensor s = random_tensor(shape, rng);

  auto value = [&](const Tensor& x) { return project(f(ag::constant(x)), r).item(); };
  Var x = ag::parameter(x0);
  Var g = ag::grad(project(f(x), r), {x})[0];
  CHECK(max_rel_err(g.value(), numeric_grad(value, x0)) < 1e-6);

  auto first = [&](const Tensor& xt) {
    Var xv = ag::parameter(xt);
    Var gv = ag::grad(project(f(xv), r), {xv})[0];
    return project(gv, s).item();
  };
  Var xg = ag::parameter(x0);
  Var g1 = ag::grad(project(f(xg), r), {xg}, {.create_graph = true})[0];
  Var hv = project(g1, s);
  if (!hv.requires_grad()) return;  // piecewise-linear ops have no second derivative
  Var g2 = ag::grad(hv, {xg}, {.allow_unused = true})[0];
  if (!g2.defined()) return;
  CHECK(max_rel_err(g2.value(), numeric_grad(first, x0)) < 1e-5);
}

}  // namespace

TEST_CASE("elementwise ops have correct first and second derivatives") {
  check_op([](const Var& x) { return ag::mul(x, x); }, {3, 4}, 1);
  check_op([](const Var& x) { return ag::exp(x); }, {5}, 2);
  check_op([](const Var& x) { return ag::log(x); }, {5}, 3, 0.5, 2.0);
  check_op([](const Var& x) { return ag::pow(x, -1.5); }, {2, 3}, 4, 0.5, 2.0);
  check_op([](const Var& x) { return ag::div(ag::exp(x), ag::add_scalar(ag::mul(x, x), 1.0)); }, {4}, 5);
  check_op([](const Var& x) { return ag::mul(ag::relu(x), x); }, {6}, 6);
}

TEST_CASE("broadcast and reduction ops") {
  std::mt19937_64 rng(7);
  const Tensor b = random_tensor({4}, rng);
  check_op([&](const Var& x) { return ag::mul(ag::add(x, ag::constant(b)), x); }, {3, 4}, 8);
  check_op([](const Var& x) { return ag::mul(ag::expand_to(x, {2, 3, 4}), ag::expand_to(x, {2, 3, 4})); }, {4}, 9);
  check_op([](const Var& x) { return ag::pow(ag::sum_axis(ag::mul(x, x), 1), 2.0); }, {2, 3, 4}, 10);
  check_op([](const Var& x) { return ag::mul(ag::expand_axis(ag::sum_axis(x, 0), 1, 3), ag::expand_axis(ag::mean_axis(x, 0), 1, 3)); },
           {2, 5}, 11);
  check_op([](const Var& x) { return ag::mul(ag::sum_all(x), x); }, {3, 2}, 12);
}

TEST_CASE("layout ops") {
  check_op([](const Var& x) { return ag::mul(ag::permute(x, {2, 0, 1}), ag::permute(x, {2, 0, 1})); }, {2, 3, 4}, 13);
  check_op([](const Var& x) { return ag::mul(ag::slice(x, 1, 1, 2), ag::slice(x, 1, 0, 2)); }, {2, 4}, 14);
  check_op([](const Var& x) { return ag::concat({ag::mul(x, x), ag::exp(x)}, 0); }, {2, 3}, 15);
  check_op([](const Var& x) { return ag::mul(ag::index_select(x, 1, {2, 0, 2}), ag::index_select(x, 1, {0, 1, 1})); },
           {3, 3}, 16);
  check_op([](const Var& x) { return ag::exp(ag::gather_last(x, {1, 0, 2})); }, {3, 3}, 17);
  check_op([](const Var& x) { return ag::mul(ag::reshape(x, {6}), ag::reshape(x, {6})); }, {2, 3}, 18);
}

TEST_CASE("matmul in all transpose modes, including batched") {
  std::mt19937_64 rng(19);
  const Tensor w = random_tensor({4, 3}, rng);
  check_op([&](const Var& x) { return ag::matmul(x, ag::mul(x, x), false, true); }, {3, 4}, 20);
  check_op([&](const Var& x) { return ag::matmul(x, ag::mul(x, x), true, false); }, {3, 4}, 21);
  check_op([&](const Var& x) { return ag::matmul(x, ag::exp(x), true, true); }, {3, 3}, 22);
  check_op([&](const Var& x) { return ag::mul(ag::matmul(x, ag::constant(w)), ag::matmul(x, ag::constant(w))); },
           {2, 5, 4}, 23);
  check_op([&](const Var& x) { return ag::matmul(x, ag::exp(x), false, true); }, {2, 3, 4}, 24);
}

TEST_CASE("softmax and log-softmax") {
  check_op([](const Var& x) { return ag::softmax_last(x); }, {3, 5}, 25, -3, 3);
  check_op([](const Var& x) { return ag::log_softmax_last(x); }, {2, 4}, 26, -3, 3);
  check_op([](const Var& x) { return ag::mul(ag::softmax_last(x), x); }, {2, 4}, 27, -3, 3);
}

TEST_CASE("conv2d family and pooling") {
  std::mt19937_64 rng(28);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const ag::Conv2dGeometry g{2, 1};
  check_op([&](const Var& x) { return ag::mul(ag::conv2d(x, ag::constant(w), g), ag::conv2d(x, ag::constant(w), g)); },
           {2, 2, 5, 5}, 29);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  check_op([&](const Var& wv) { return ag::exp(ag::conv2d(ag::constant(x), wv, g)); }, {3, 2, 3, 3}, 30);
  check_op([&](const Var& wv) { return ag::pow(ag::conv2d(ag::mul(ag::constant(x), ag::constant(x)), wv, {1, 0}), 3.0); },
           {3, 2, 3, 3}, 31);
  // Double backward through conv: differentiate the input gradient with respect to the weights.
  check_op(
      [&](const Var& wv) {
        Var xv = ag::parameter(x);
        Var y = ag::conv2d(xv, wv, g);
        Var gx = ag::grad(ag::sum_all(ag::mul(y, y)), {xv}, {.create_graph = true})[0];
        return gx;
      },
      {3, 2, 3, 3}, 32);
  check_op([](const Var& v) { return ag::mul(ag::adaptive_avg_pool2d(v, 2, 3), ag::adaptive_avg_pool2d(v, 2, 3)); },
           {1, 2, 5, 7}, 33);
  std::mt19937_64 rng2(34);
  const Tensor b = random_tensor({3}, rng2);
  check_op([&](const Var& v) { return ag::exp(ag::add_channel_bias(v, ag::constant(b))); }, {2, 3, 2, 2}, 35);
}

TEST_CASE("adaptive pooling matches block means on divisible grids") {
  std::mt19937_64 rng(36);
  Tensor x = random_tensor({1, 1, 16, 16}, rng);
  Tensor p = ag::adaptive_avg_pool2d_tensor(x, 4, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) s += x.data[(4 * i + r) * 16 + 4 * j + c];
      }
      CHECK(std::abs(p.data[i * 4 + j] - s / 16.0) < 1e-12);
    }
  }
}

TEST_CASE("grad reports unused inputs") {
  Var a = ag::parameter(Tensor({2}, 1.0));
  Var b = ag::parameter(Tensor({2}, 1.0));
  Var y = ag::sum_all(ag::mul(a, a));
  CHECK_THROWS(ag::grad(y, {b}));
  auto g = ag::grad(y, {a, b}, {.allow_unused = true});
  CHECK(g[0].defined());
  CHECK_FALSE(g[1].defined());
}

TEST_CASE("no-grad mode records nothing") {
  Var a = ag::parameter(Tensor({2}, 1.0));
  ag::NoGradGuard guard;
  Var y = ag::mul(a, a);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors are raised") {
  Var a = ag::constant(Tensor({2, 3}));
  Var b = ag::constant(Tensor({2, 2}));
  CHECK_THROWS_AS(ag::add(a, b), ShapeError);
  CHECK_THROWS_AS(ag::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ag::reshape(a, {5}), ShapeError);
}
