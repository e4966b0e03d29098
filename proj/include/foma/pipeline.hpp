#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "foma/evaluation.hpp"
#include "foma/model.hpp"

namespace foma {

// One split with the frozen backbone already applied.
struct SplitData {
  Split split = Split::train;
  Tensor images;                    // [N, 3, H, W]
  std::vector<Tensor> downsampled;  // per active level [N, C_k, G, G]
  std::vector<std::size_t> attr, obj, comp;

  std::size_t size() const { return comp.size(); }
  // Sample ids fed to the random strategies are offset per split.
  ModelInput batch(const std::vector<std::size_t>& indices, std::uint64_t pass) const;
};

SplitData prepare_split(const FomaModel& model, const std::vector<Sample>& samples, Split split);
SplitData load_split(const FomaModel& model, const DatasetManifest& manifest, Split split);

// Evaluation-mode scores of a whole split.
struct SplitScores {
  ScoreTable fused;
  ScoreTable composition;  // S_c alone
  Tensor weights;          // [N, N_b, N_f]
  Tensor s_a, s_o;
};

SplitScores score_split(FomaModel& model, const SplitData& data, std::size_t chunk = 128);

struct SplitReport {
  EvalReport fused;
  EvalReport composition;
};

// Sweeps and summarizes both the fused and the composition-only tables.
SplitReport report_split(const SplitScores& scores, std::optional<std::size_t> grid = std::nullopt);

// CSV `sample,branch,level,weight`; level is the backbone level id.
void write_weight_log(const std::filesystem::path& path, const Tensor& weights, const std::vector<std::size_t>& levels);

}  // namespace foma
