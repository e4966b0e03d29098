#include <cmath>
#include <random>

#include "doctest.h"
#include "foma/focus.hpp"
#include "foma/heads.hpp"
#include "foma/pooling.hpp"
#include "test_util.hpp"

using namespace foma;
using namespace foma::testing;

namespace {

ag::Var rows(std::size_t b, std::size_t p, std::vector<double> v) { return ag::constant(Tensor({b, p}, std::move(v))); }

}  // namespace

TEST_CASE("linear probe map is the channel mean of the probe weights") {
  std::mt19937_64 g(1);
  const std::size_t c = 3, h = 2, w = 2, k = 4;
  const Tensor a = random_tensor({c * h * w, k}, g);
  const ag::Var f = ag::parameter(random_tensor({2, c, h, w}, g));
  const ag::Var scores = ag::matmul(ag::reshape(f, {2, c * h * w}), ag::constant(a));
  const std::vector<std::size_t> labels{1, 3};
  const Tensor m = attention_map(scores, labels, f, false).value();
  REQUIRE(m.shape == Shape{2, 4});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 4; ++p) {
      double mean = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) mean += a.data[(ch * 4 + p) * k + labels[b]] / c;
      CHECK(std::abs(m.data[b * 4 + p] - mean) < 1e-14);
    }

  const ag::Var zero_scores = ag::matmul(ag::reshape(f, {2, c * h * w}), ag::constant(Tensor({c * h * w, k})));
  const ag::Var mz = attention_map(zero_scores, labels, f, false);
  for (double v : mz.value().data) CHECK(v == 0.0);
}

TEST_CASE("maps of a small pooled model match finite differences") {
  Rng rng(2);
  AttentionPool ap(4, 5, 1, rng);
  MlpHead head(4, 8, 3, rng);
  std::mt19937_64 g(3);
  ap.position().mutable_value() = random_tensor(ap.position().shape(), g);
  for (int i = 0; i < 3; ++i) head(ag::constant(random_tensor({6, 4}, g)), true);
  const Tensor f0 = random_tensor({2, 4, 2, 2}, g);
  const std::vector<std::size_t> labels{2, 0};
  auto score = [&](const Tensor& f) {
    return ground_truth_score(head(ap(ag::constant(f)), false), labels).item();
  };
  const ag::Var f = ag::parameter(f0);
  const Tensor m = attention_map(head(ap(f), false), labels, f, false).value();
  const Tensor num = numeric_grad(score, f0);
  Tensor expect({2, 4});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t c = 0; c < 4; ++c) expect.data[b * 4 + p] += num.data[(b * 4 + c) * 4 + p] / 4.0;
  for (std::size_t i = 0; i < expect.numel(); ++i) {
    if (std::abs(expect.data[i]) > 1e-6) CHECK(rel_err(m.data[i], expect.data[i]) < 1e-4);
  }
}

TEST_CASE("a detached feature is an error, not a zero map") {
  const ag::Var f = ag::parameter(Tensor({1, 2, 2, 2}, 1.0));
  const ag::Var other = ag::parameter(Tensor({1, 2, 2, 2}, 1.0));
  const ag::Var scores = ag::reshape(ag::sum_axis(ag::reshape(other, {1, 2, 4}), 2), {1, 2});
  CHECK_THROWS_AS(attention_map(scores, {0}, f, false), std::logic_error);
}

TEST_CASE("retained maps are differentiable, detached maps are constants") {
  const ag::Var w = ag::parameter(Tensor({4, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8}));
  const ag::Var f = ag::parameter(Tensor({1, 1, 2, 2}, std::vector<double>{0.1, 0.2, 0.3, 0.4}));
  const ag::Var scores = ag::matmul(ag::mul(ag::reshape(f, {1, 4}), ag::reshape(f, {1, 4})), w);
  CHECK(attention_map(scores, {1}, f, true).requires_grad());
  CHECK_FALSE(attention_map(scores, {1}, f, false).requires_grad());
}

TEST_CASE("min-max normalization examples") {
  CHECK(normalize_map(rows(1, 4, {1, 0, 0, 0})).value().data == std::vector<double>{1.0 / (1.0 + 1e-8), 0, 0, 0});
  const Tensor c = normalize_map(rows(1, 4, {2.5, 2.5, 2.5, 2.5})).value();
  for (double v : c.data) CHECK(v == 0.0);
  const Tensor m = normalize_map(rows(1, 4, {2, 4, 6, 8})).value();
  const double expect[4] = {0, 1.0 / 3, 2.0 / 3, 1};
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(m.data[i] - expect[i]) < 1e-7);
}

TEST_CASE("focused loss examples") {
  // norm(M_a + M_o) and norm(M_c) are both (1, 0, 0, 1).
  const FocusResult aligned = focused_loss(rows(1, 4, {1, 0, 0, 0}), rows(1, 4, {0, 0, 0, 1}), rows(1, 4, {1, 0, 0, 1}));
  CHECK(std::abs(aligned.loss.item() + 1.0) < 1e-7);
  const FocusResult orth = focused_loss(rows(1, 4, {1, 0, 0, 0}), rows(1, 4, {0, 0, 0, 0}), rows(1, 4, {0, 1, 0, 0}));
  CHECK(std::abs(orth.loss.item()) < 1e-12);
  const FocusResult flat = focused_loss(rows(1, 4, {1, 0, 0, 0}), rows(1, 4, {0, 2, 0, 0}), rows(1, 4, {3, 3, 3, 3}));
  CHECK(flat.loss.item() == 0.0);
  CHECK(flat.cosine[0] == 0.0);
  // Mixed batch: only the valid sample counts, the mean is over both.
  const FocusResult mixed = focused_loss(rows(2, 4, {1, 0, 0, 0, 1, 0, 0, 0}), rows(2, 4, {0, 0, 0, 1, 0, 0, 0, 0}),
                                         rows(2, 4, {1, 0, 0, 1, 5, 5, 5, 5}));
  CHECK(std::abs(mixed.loss.item() + 0.5) < 1e-7);
}

TEST_CASE("focused loss is bounded and invariant to joint positive rescaling") {
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor ma = random_tensor({3, 9}, g), mo = random_tensor({3, 9}, g), mc = random_tensor({3, 9}, g);
    const double l = focused_loss(ag::constant(ma), ag::constant(mo), ag::constant(mc)).loss.item();
    CHECK(l >= -1.0);
    CHECK(l <= 1.0);
    const double lambda = 0.01 + 10.0 * std::uniform_real_distribution<double>(0, 1)(g);
    Tensor ma2 = ma, mo2 = mo;
    for (auto& v : ma2.data) v *= lambda;
    for (auto& v : mo2.data) v *= lambda;
    const double l2 = focused_loss(ag::constant(ma2), ag::constant(mo2), ag::constant(mc)).loss.item();
    CHECK(std::abs(l - l2) < 1e-6);
  }
}

TEST_CASE("focused loss gradient matches finite differences") {
  std::mt19937_64 g(5);
  const Tensor ma0 = random_tensor({2, 6}, g), mo = random_tensor({2, 6}, g), mc = random_tensor({2, 6}, g);
  auto value = [&](const Tensor& ma) {
    return focused_loss(ag::constant(ma), ag::constant(mo), ag::constant(mc)).loss.item();
  };
  const ag::Var ma = ag::parameter(ma0);
  const Tensor grad = ag::grad(focused_loss(ma, ag::constant(mo), ag::constant(mc)).loss, {ma})[0].value();
  CHECK(max_rel_err(grad, numeric_grad(value, ma0), 1e-8) < 1e-5);
}

TEST_CASE("second-order path: loss on retained maps differentiates into head parameters") {
  Rng rng(6);
  AttentionPool ap(4, 5, 1, rng), ap_a(4, 5, 1, rng);
  MlpHead head_a(4, 6, 3, rng), head_c(4, 6, 3, rng);
  std::mt19937_64 g(7);
  for (int i = 0; i < 2; ++i) {
    head_a(ag::constant(random_tensor({5, 4}, g)), true);
    head_c(ag::constant(random_tensor({5, 4}, g)), true);
  }
  const Tensor f0 = random_tensor({2, 4, 2, 2}, g);
  const std::vector<std::size_t> la{0, 2}, lc{1, 1};
  auto loss_of = [&]() {
    const ag::Var fa = ag::parameter(f0), fc = ag::parameter(f0);
    const ag::Var sa = head_a(ap_a(fa), false);
    const ag::Var sc = head_c(ap(fc), false);
    const auto maps = attention_maps(ag::add(ground_truth_score(sa, la), ground_truth_score(sc, lc)), {fa, fc}, true);
    return focused_loss(maps[0], ag::scale(maps[0], 0.0), maps[1]).loss;
  };
  ag::Var& wq = ap.query().weight;
  ag::Var& w1 = head_a.hidden().weight;
  const ag::Var loss = loss_of();
  CHECK(loss.item() < 0.0);
  const auto grads = ag::grad(loss, {wq, w1});
  for (ag::Var* p : {&wq, &w1}) {
    const Tensor analytic = grads[p == &wq ? 0 : 1].value();
    auto value = [&](const Tensor& t) {
      const Tensor keep = p->value();
      p->mutable_value() = t;
      const double v = loss_of().item();
      p->mutable_value() = keep;
      return v;
    };
    CHECK(max_rel_err(analytic, numeric_grad(value, p->value()), 1e-8) < 1e-4);
  }
}
