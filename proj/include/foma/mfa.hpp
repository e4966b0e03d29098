#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "foma/autograd.hpp"
#include "foma/nn.hpp"

namespace foma {

// Branch rows of the aggregation weights and of f'.
inline constexpr std::size_t kBranchAttr = 0;
inline constexpr std::size_t kBranchComp = 1;
inline constexpr std::size_t kBranchObj = 2;
inline constexpr std::size_t kNumBranches = 3;

enum class AggStrategy { learned, standard, mean, random, random_simplex };
std::string to_string(AggStrategy s);
AggStrategy parse_agg_strategy(const std::string& s);

// P(x): staged CNN on the raw image, two 3x3 convolutions per stage (the
// first with stride 2), global average pooling, then a linear map to
// N_b * N_f logits.
class AggregationPredictor {
 public:
  AggregationPredictor() = default;
  AggregationPredictor(const std::vector<std::size_t>& widths, std::size_t num_levels, Rng& rng);

  // images [B, 3, H, W] -> logits [B, N_b, N_f]
  ag::Var logits(const ag::Var& images) const;

  std::size_t num_levels() const { return num_levels_; }
  std::vector<nn::Conv2d>& convs() { return convs_; }
  nn::Linear& head() { return head_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  std::vector<nn::Conv2d> convs_;
  nn::Linear head_;
  std::size_t num_levels_ = 0;
};

// Row-wise softmax over the level axis with temperature tau.
ag::Var softmax_weights(const ag::Var& logits, double tau);

// Fixed or sampled weight rows [B, N_b, N_f] for the non-learned strategies.
// Random rows are drawn from a stream keyed by (seed, pass, sample id, branch).
Tensor fixed_weights(AggStrategy strategy, std::size_t num_levels, const std::vector<std::uint64_t>& sample_ids,
                     std::uint64_t seed, std::uint64_t pass);

// f' = w f_hat, batched: w [B, N_b, N_f], f_hat [B, N_f, D] -> [B, N_b, D].
ag::Var aggregate(const ag::Var& w, const ag::Var& f_hat);

}  // namespace foma
