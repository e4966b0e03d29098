#include "foma/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace foma {

namespace {

// Best seen and best unseen candidate of one row (lowest index on ties).
struct RowBest {
  std::size_t seen_idx = 0, unseen_idx = 0;
  double seen_val = -std::numeric_limits<double>::infinity();
  double unseen_val = -std::numeric_limits<double>::infinity();
  bool has_seen = false, has_unseen = false;
};

RowBest row_best(const ScoreTable& t, std::size_t i) {
  RowBest r;
  const double* row = t.scores.data.data() + i * t.num_comps();
  for (std::size_t y = 0; y < t.num_comps(); ++y) {
    if (t.seen[y]) {
      if (!r.has_seen || row[y] > r.seen_val) {
        r.seen_val = row[y];
        r.seen_idx = y;
        r.has_seen = true;
      }
    } else if (!r.has_unseen || row[y] > r.unseen_val) {
      r.unseen_val = row[y];
      r.unseen_idx = y;
      r.has_unseen = true;
    }
  }
  return r;
}

// The prediction at bias b: the better of the two group winners.
bool picks_unseen(const RowBest& r, double b) {
  if (!r.has_unseen) return false;
  if (!r.has_seen) return true;
  const double u = r.unseen_val + b;
  if (u != r.seen_val) return u > r.seen_val;
  return r.unseen_idx < r.seen_idx;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void ScoreTable::validate() const {
  if (scores.dim() != 2 || scores.shape[0] != truth.size() || scores.shape[1] != seen.size()) {
    throw ShapeError("score table " + shape_str(scores.shape) + " does not match " + std::to_string(truth.size()) +
                     " samples and " + std::to_string(seen.size()) + " compositions");
  }
  if (!scores.all_finite()) throw ValidationError("score table contains non-finite scores");
  for (std::size_t y : truth) {
    if (y >= seen.size()) throw ValidationError("true composition index out of range");
  }
}

std::vector<std::size_t> predict_with_bias(const ScoreTable& table, double b) {
  std::vector<std::size_t> pred(table.num_samples());
  const std::size_t k = table.num_comps();
  for (std::size_t i = 0; i < table.num_samples(); ++i) {
    const double* row = table.scores.data.data() + i * k;
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < k; ++y) {
      const double v = table.seen[y] ? row[y] : row[y] + b;
      if (y == 0 || v > best_v) {
        best_v = v;
        best = y;
      }
    }
    pred[i] = best;
  }
  return pred;
}

CurvePoint accuracy_at(const ScoreTable& table, double b) {
  const auto pred = predict_with_bias(table, b);
  std::size_t ns = 0, nu = 0, cs = 0, cu = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (table.truth_seen(i)) {
      ++ns;
      cs += pred[i] == table.truth[i];
    } else {
      ++nu;
      cu += pred[i] == table.truth[i];
    }
  }
  return {b, ns ? static_cast<double>(cs) / static_cast<double>(ns) : 0.0,
          nu ? static_cast<double>(cu) / static_cast<double>(nu) : 0.0};
}

EvalCurve sweep(const ScoreTable& table, std::optional<std::size_t> grid) {
  table.validate();
  std::size_t ns = 0, nu = 0;
  for (std::size_t i = 0; i < table.num_samples(); ++i) (table.truth_seen(i) ? ns : nu)++;
  if (ns == 0) throw ValidationError("bias sweep needs at least one seen-labeled sample");
  if (nu == 0) throw ValidationError("bias sweep needs at least one unseen-labeled sample");
  if (std::find(table.seen.begin(), table.seen.end(), true) == table.seen.end() ||
      std::find(table.seen.begin(), table.seen.end(), false) == table.seen.end()) {
    throw ValidationError("bias sweep needs both seen and unseen compositions");
  }

  // A sample's prediction can only move from its best seen to its best
  // unseen candidate, at b = best_seen - best_unseen.
  std::vector<RowBest> best(table.num_samples());
  std::vector<double> thresholds;
  for (std::size_t i = 0; i < table.num_samples(); ++i) {
    best[i] = row_best(table, i);
    thresholds.push_back(best[i].seen_val - best[i].unseen_val);
  }
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<double> biases;
  if (grid) {
    const std::size_t k = std::max<std::size_t>(*grid, 2);
    const double lo = thresholds.front() - 1.0, hi = thresholds.back() + 1.0;
    for (std::size_t j = 0; j < k; ++j) biases.push_back(lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(k - 1));
  } else {
    biases.push_back(thresholds.front() - 1.0);
    for (std::size_t j = 0; j + 1 < thresholds.size(); ++j) biases.push_back(0.5 * (thresholds[j] + thresholds[j + 1]));
    biases.push_back(thresholds.back() + 1.0);
  }

  // Each sample flips once along the sorted biases; find where with the exact
  // floating-point predicate, then accumulate correct counts by prefix sums.
  const std::size_t m = biases.size();
  std::vector<long> seen_delta(m + 1, 0), unseen_delta(m + 1, 0);
  for (std::size_t i = 0; i < table.num_samples(); ++i) {
    const RowBest& r = best[i];
    const auto first_unseen = static_cast<std::size_t>(
        std::partition_point(biases.begin(), biases.end(), [&](double b) { return !picks_unseen(r, b); }) -
        biases.begin());
    const std::size_t y = table.truth[i];
    if (table.truth_seen(i)) {
      if (y == r.seen_idx) {  // correct on [0, first_unseen)
        seen_delta[0] += 1;
        seen_delta[first_unseen] -= 1;
      }
    } else if (y == r.unseen_idx) {  // correct on [first_unseen, m)
      unseen_delta[first_unseen] += 1;
    }
  }
  EvalCurve curve;
  long cs = 0, cu = 0;
  for (std::size_t j = 0; j < m; ++j) {
    cs += seen_delta[j];
    cu += unseen_delta[j];
    curve.push_back({biases[j], static_cast<double>(cs) / static_cast<double>(ns),
                     static_cast<double>(cu) / static_cast<double>(nu)});
  }
  return curve;
}

EvalReport summarize(const EvalCurve& curve) {
  EvalReport r;
  r.curve = curve;
  if (curve.empty()) return r;
  std::vector<std::pair<double, double>> pts;  // (unseen, seen)
  for (const auto& p : curve) {
    r.S = std::max(r.S, p.seen_acc);
    r.U = std::max(r.U, p.unseen_acc);
    const double sum = p.seen_acc + p.unseen_acc;
    if (sum > 0.0) r.HM = std::max(r.HM, 2.0 * p.seen_acc * p.unseen_acc / sum);
    pts.emplace_back(p.unseen_acc, p.seen_acc);
  }
  std::sort(pts.begin(), pts.end());
  std::vector<std::pair<double, double>> collapsed;
  for (const auto& p : pts) {
    if (!collapsed.empty() && collapsed.back().first == p.first) {
      collapsed.back().second = std::max(collapsed.back().second, p.second);
    } else {
      collapsed.push_back(p);
    }
  }
  for (std::size_t j = 0; j + 1 < collapsed.size(); ++j) {
    r.AUC += (collapsed[j + 1].first - collapsed[j].first) * 0.5 * (collapsed[j].second + collapsed[j + 1].second);
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = config;
  j["S"] = S;
  j["U"] = U;
  j["AUC"] = AUC;
  j["HM"] = HM;
  j["n_seen"] = n_seen;
  j["n_unseen"] = n_unseen;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.S = j.at("S").get<double>();
  r.U = j.at("U").get<double>();
  r.AUC = j.at("AUC").get<double>();
  r.HM = j.at("HM").get<double>();
  r.n_seen = j.at("n_seen").get<std::size_t>();
  r.n_unseen = j.at("n_unseen").get<std::size_t>();
  for (const auto& [k, v] : j.items()) {
    if (k != "S" && k != "U" && k != "AUC" && k != "HM" && k != "n_seen" && k != "n_unseen") r.config[k] = v;
  }
  return r;
}

void write_curve_csv(const std::filesystem::path& path, const EvalCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "bias,seen_acc,unseen_acc\n";
  for (const auto& p : curve) out << fmt(p.bias) << ',' << fmt(p.seen_acc) << ',' << fmt(p.unseen_acc) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << report.to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

EvalReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return EvalReport::from_json(nlohmann::json::parse(in));
}

}  // namespace foma
