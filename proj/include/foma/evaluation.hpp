#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "json.hpp"
#include "foma/tensor.hpp"

namespace foma {

// Fused scores of a split: one row per sample over all closed-world compositions.
struct ScoreTable {
  Tensor scores;                    // [N, |Y|]
  std::vector<std::size_t> truth;   // true composition per sample
  std::vector<bool> seen;           // per composition

  std::size_t num_samples() const { return truth.size(); }
  std::size_t num_comps() const { return seen.size(); }
  bool truth_seen(std::size_t i) const { return seen[truth[i]]; }
  void validate() const;
};

struct CurvePoint {
  double bias = 0.0;
  double seen_acc = 0.0;
  double unseen_acc = 0.0;
};
using EvalCurve = std::vector<CurvePoint>;

struct EvalReport {
  double S = 0.0, U = 0.0, AUC = 0.0, HM = 0.0;
  std::size_t n_seen = 0, n_unseen = 0;
  nlohmann::json config = nlohmann::json::object();  // alpha, tau, seed echo
  EvalCurve curve;

  nlohmann::json to_json() const;  // summary fields and config echo, no curve
  static EvalReport from_json(const nlohmann::json& j);
};

// Argmax of scores with b added to unseen compositions; ties go to the lowest index.
std::vector<std::size_t> predict_with_bias(const ScoreTable& table, double b);

// Accuracy over seen-labeled and unseen-labeled samples at bias b.
CurvePoint accuracy_at(const ScoreTable& table, double b);

// Bias sweep. Exact mode evaluates one point per interval between the
// sorted distinct flip thresholds (plus one below and one above); `grid`
// evaluates K evenly spaced biases over the same range instead.
EvalCurve sweep(const ScoreTable& table, std::optional<std::size_t> grid = std::nullopt);

EvalReport summarize(const EvalCurve& curve);

void write_curve_csv(const std::filesystem::path& path, const EvalCurve& curve);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report_json(const std::filesystem::path& path);

}  // namespace foma
