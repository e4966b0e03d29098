#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "foma/autograd.hpp"
#include "foma/nn.hpp"

namespace foma {

enum class BackboneKind { desk, external };

struct BackboneConfig {
  BackboneKind kind = BackboneKind::desk;
  std::size_t input_size = 64;
  // Output channels of the four stride-2 stages (levels 0..3).
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  // Active levels, ascending; must contain 3, which defines the alignment grid.
  std::vector<std::size_t> levels{1, 2, 3};
  std::size_t target_channels = 128;
  std::uint64_t seed = 0;
  std::filesystem::path external_weights;

  void validate() const;
};

// Feature maps of the active levels, each [B, C_k, H_k, W_k], low to high.
struct MultiLevelFeatures {
  std::vector<std::size_t> levels;
  std::vector<Tensor> maps;
};

// Frozen staged CNN: four 3x3 stride-2 convolutions with ReLU. Stage
// parameters are constants and never receive gradients.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& config);

  MultiLevelFeatures extract(const Tensor& images) const;
  // Graph-recording variant; stage weights stay constants.
  std::vector<ag::Var> extract_graph(const ag::Var& images) const;

  const BackboneConfig& config() const { return config_; }
  const std::vector<ag::Var>& stage_weights() const { return weights_; }
  const std::vector<ag::Var>& stage_biases() const { return biases_; }
  std::size_t level_channels(std::size_t level) const { return weights_.at(level).shape()[0]; }
  std::size_t level_size(std::size_t level) const;
  std::size_t grid() const { return level_size(3); }

  void save(const std::filesystem::path& path) const;

 private:
  BackboneConfig config_;
  std::vector<ag::Var> weights_;
  std::vector<ag::Var> biases_;
};

// Per-level 1x1 convolutions projecting DS(f_k) to the target channel count.
class Aligner {
 public:
  Aligner() = default;
  Aligner(const std::vector<std::size_t>& level_channels, std::size_t target_channels, std::size_t grid, Rng& rng);

  // DS: adaptive average pooling to grid x grid.
  static Tensor downsample(const Tensor& features, std::size_t grid);

  // Inputs are the downsampled maps [B, C_k, G, G] of every active level;
  // output is f_hat [B, N_f, C*G*G], rows flattened as (channel, height, width).
  ag::Var align(const std::vector<ag::Var>& downsampled) const;
  ag::Var align_features(const MultiLevelFeatures& features) const;

  std::size_t num_levels() const { return convs_.size(); }
  std::size_t target_channels() const { return target_channels_; }
  std::size_t grid() const { return grid_; }
  std::vector<nn::Conv2d>& convs() { return convs_; }
  const std::vector<nn::Conv2d>& convs() const { return convs_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  std::vector<nn::Conv2d> convs_;
  std::size_t target_channels_ = 0;
  std::size_t grid_ = 0;
};

}  // namespace foma
