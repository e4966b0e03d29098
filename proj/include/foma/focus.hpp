#pragma once

#include <vector>

#include "foma/autograd.hpp"

namespace foma {

// Grad-CAM maps [B, H*W]: channel mean of d(sum_b S[b, y_b]) / d f', with
// f' given as [B, C, H, W]. With `retain_graph` the maps stay differentiable
// (second-order training); otherwise they are constants.
std::vector<ag::Var> attention_maps(const ag::Var& ground_truth_score, const std::vector<ag::Var>& features,
                                    bool retain_graph);
ag::Var attention_map(const ag::Var& scores, const std::vector<std::size_t>& labels, const ag::Var& feature,
                      bool retain_graph);

// Sum over the batch of the ground-truth entries of scores [B, K].
ag::Var ground_truth_score(const ag::Var& scores, const std::vector<std::size_t>& labels);

// Row-wise min-max normalization of [B, P] with eps 1e-8.
ag::Var normalize_map(const ag::Var& maps);

struct FocusResult {
  ag::Var loss;                 // scalar, mean over the batch
  std::vector<double> cosine;   // per sample; 0 where a normalized map is all zero
};

// -cos(norm(M_a + M_o), norm(M_c)), mean over samples.
FocusResult focused_loss(const ag::Var& m_a, const ag::Var& m_o, const ag::Var& m_c);

}  // namespace foma
