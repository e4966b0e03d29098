#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "foma/backbone.hpp"
#include "foma/data.hpp"
#include "foma/graph.hpp"
#include "foma/heads.hpp"
#include "foma/mfa.hpp"
#include "foma/pooling.hpp"

namespace foma {

struct ModelConfig {
  BackboneConfig backbone;
  std::vector<std::size_t> predictor_widths{16, 32, 64};
  double tau = 16.0;
  AggStrategy strategy = AggStrategy::learned;
  PoolingKind pooling = PoolingKind::attention;
  std::size_t attention_heads = 1;
  std::size_t embedding_dim = 64;  // d0
  std::size_t gcn_layers = 2;
  FuseMode fuse = FuseMode::sum;
  bool freeze_node_init = false;
  std::filesystem::path embedding_file;  // empty: seeded embeddings
  std::uint64_t seed = 0;

  void validate() const;
};

// Frozen backbone outputs for a batch: raw images for the predictor and the
// per-level maps already pooled to the alignment grid.
struct ModelInput {
  Tensor images;                   // [B, 3, H, W]
  std::vector<Tensor> downsampled; // per active level [B, C_k, G, G]
  std::vector<std::uint64_t> sample_ids;
  std::uint64_t pass = 0;          // varies the random strategies between epochs
};

struct ModelOutput {
  ag::Var weights;                // [B, N_b, N_f]
  ag::Var f_hat;                  // [B, N_f, C*G*G]
  ag::Var f_prime;                // [B, N_b, C*G*G]
  std::vector<ag::Var> branch;    // f'_a, f'_c, f'_o as [B, C, G, G]
  ag::Var pooled_a, pooled_c, pooled_o;
  ag::Var s_a, s_o, s_c;
  ag::Var comp_embeddings;        // [|Y|, C]
};

class FomaModel {
 public:
  FomaModel(const ModelConfig& config, const LabelSpace& labels);

  // Runs the frozen backbone and pools every active level to the grid.
  ModelInput prepare(const Tensor& images) const;
  ModelOutput forward(const ModelInput& input, bool training);
  ag::Var fused(const ModelOutput& out) const;

  // Mixing weights alone, [B, N_b, N_f].
  ag::Var aggregation_weights(const ModelInput& input) const;

  const ModelConfig& config() const { return config_; }
  const LabelSpace& labels() const { return labels_; }
  const Backbone& backbone() const { return backbone_; }
  Aligner& aligner() { return aligner_; }
  AggregationPredictor& predictor() { return predictor_; }
  AttentionPool& pool(std::size_t branch) { return pools_.at(branch); }
  Gcn& gcn() { return gcn_; }
  ag::Var& node_embeddings() { return h0_; }
  MlpHead& attr_head() { return attr_head_; }
  MlpHead& obj_head() { return obj_head_; }
  const CompositionGraph& graph() const { return graph_; }

  // Trainable parameters in a fixed order; names are stable checkpoint keys.
  nn::ParamList parameters() const;
  nn::BufferList buffers();

 private:
  ag::Var pool_branch(std::size_t branch, const ag::Var& f) const;

  ModelConfig config_;
  LabelSpace labels_;
  Backbone backbone_;
  Aligner aligner_;
  AggregationPredictor predictor_;
  std::vector<AttentionPool> pools_;
  CompositionGraph graph_;
  ag::Var propagation_;
  ag::Var h0_;
  Gcn gcn_;
  MlpHead attr_head_, obj_head_;
};

// Stacks samples [3, H, W] at `indices` into [B, 3, H, W].
Tensor stack_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

}  // namespace foma
