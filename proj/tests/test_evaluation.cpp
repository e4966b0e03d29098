#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "eval_oracle.hpp"
#include "foma/evaluation.hpp"

using namespace foma;
using namespace foma::testing;

TEST_CASE("bias zero is the plain argmax and a huge bias always predicts unseen") {
  ScoreTable t;
  t.scores = Tensor({2, 3}, std::vector<double>{0.2, 0.9, 0.1, 0.5, 0.5, -3.0});
  t.seen = {true, false, true};
  t.truth = {1, 0};
  CHECK(predict_with_bias(t, 0.0) == std::vector<std::size_t>{1, 0});  // tie goes to index 0
  CHECK(predict_with_bias(t, 1e9) == std::vector<std::size_t>{1, 1});
  CHECK(predict_with_bias(t, -1e9) == std::vector<std::size_t>{0, 0});
  // sample 0 moves to seen below b = 0.2 - 0.9; sample 1 moves to unseen above 0.
  CHECK(predict_with_bias(t, -0.71) == std::vector<std::size_t>{0, 0});
  CHECK(predict_with_bias(t, 0.01) == std::vector<std::size_t>{1, 1});
}

TEST_CASE("perfect separation yields S = U = AUC = HM = 1") {
  ScoreTable t;
  t.scores = Tensor({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  t.seen = {true, false};
  t.truth = {0, 1};
  const EvalCurve c = sweep(t);
  CHECK(std::any_of(c.begin(), c.end(), [](const CurvePoint& p) { return p.seen_acc == 1.0 && p.unseen_acc == 1.0; }));
  const EvalReport r = summarize(c);
  CHECK(r.S == 1.0);
  CHECK(r.U == 1.0);
  CHECK(r.AUC == 1.0);
  CHECK(r.HM == 1.0);
}

TEST_CASE("a seen sample is a step function of the bias") {
  ScoreTable t;
  t.scores = Tensor({2, 2}, std::vector<double>{2.0, 0.5, 0.0, -1.0});
  t.seen = {true, false};
  t.truth = {0, 0};
  t.truth.push_back(1);
  t.scores = Tensor({3, 2}, std::vector<double>{2.0, 0.5, 0.0, -1.0, 5.0, 0.0});
  for (const auto& p : sweep(t)) {
    const double expect = (p.bias < 1.5 ? 0.5 : 0.0) + (p.bias < 1.0 ? 0.5 : 0.0);
    CHECK(p.seen_acc == expect);
  }
}

TEST_CASE("degenerate inputs") {
  ScoreTable t;
  t.scores = Tensor({1, 2}, std::vector<double>{1.0, 0.0});
  t.seen = {true, false};
  t.truth = {0};
  try {
    sweep(t);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("unseen-labeled") != std::string::npos);
  }
  t.truth = {1};
  CHECK_THROWS_WITH_AS(sweep(t), doctest::Contains("seen-labeled"), ValidationError);
  const EvalReport zero = summarize({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.5}, {2.0, 0.0, 1.0}});
  CHECK(zero.AUC == 0.0);
  CHECK(zero.HM == 0.0);
}

TEST_CASE("sweep and summary equal the exhaustive oracle on random tables") {
  std::mt19937_64 g(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const ScoreTable t = random_table(g);
    const EvalCurve c = sweep(t);
    const EvalReport r = summarize(c);
    const OracleResult o = oracle(t);
    CHECK(r.AUC == o.AUC);
    CHECK(r.HM == o.HM);
    CHECK(r.S == o.S);
    CHECK(r.U == o.U);
    for (std::size_t j = 0; j + 1 < c.size(); ++j) {
      CHECK(c[j].bias < c[j + 1].bias);
      CHECK(c[j + 1].seen_acc <= c[j].seen_acc);
      CHECK(c[j + 1].unseen_acc >= c[j].unseen_acc);
    }
    // The sweep's points agree with direct classification.
    for (const auto& p : c) {
      const CurvePoint d = accuracy_at(t, p.bias);
      CHECK(d.seen_acc == p.seen_acc);
      CHECK(d.unseen_acc == p.unseen_acc);
    }
    // Predictions are constant strictly between consecutive oracle thresholds.
    for (std::size_t j = 1; j < o.thresholds.size(); ++j) {
      const double lo = o.thresholds[j - 1] + 1e-9, hi = o.thresholds[j] - 1e-9;
      if (!(lo < hi)) continue;
      const double inner = lo + (hi - lo) * std::uniform_real_distribution<double>(0, 1)(g);
      CHECK(predict_with_bias(t, inner) == predict_with_bias(t, o.probes[j]));
    }
  }
}

TEST_CASE("grid mode stays inside the exact curve's value set") {
  std::mt19937_64 g(7);
  const ScoreTable t = random_table(g);
  const EvalReport exact = summarize(sweep(t));
  const EvalReport coarse = summarize(sweep(t, 7));
  CHECK(sweep(t, 7).size() == 7);
  CHECK(coarse.HM <= exact.HM);
}

TEST_CASE("report json round trip") {
  EvalReport r;
  r.S = 0.5;
  r.U = 0.25;
  r.AUC = 0.1;
  r.HM = 1.0 / 3.0;
  r.n_seen = 10;
  r.n_unseen = 4;
  r.config = {{"alpha", 3.0}, {"tau", 16.0}, {"seed", 1}};
  const auto path = std::filesystem::temp_directory_path() / "foma_test_report.json";
  write_report_json(path, r);
  const EvalReport back = read_report_json(path);
  CHECK(back.S == r.S);
  CHECK(back.U == r.U);
  CHECK(back.AUC == r.AUC);
  CHECK(back.HM == r.HM);
  CHECK(back.n_seen == 10);
  CHECK(back.n_unseen == 4);
  CHECK(back.config == r.config);
  std::filesystem::remove(path);
}
