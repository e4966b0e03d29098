#include "foma/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "foma/serialize.hpp"

namespace foma {

namespace {

constexpr const char* kBackboneMagic = "FOMABKBN";
constexpr std::uint32_t kBackboneVersion = 1;

}  // namespace

void BackboneConfig::validate() const {
  if (stage_channels.size() != 4) throw ConfigError("backbone needs exactly four stages");
  if (levels.empty()) throw ConfigError("active level subset must be nonempty");
  if (!std::is_sorted(levels.begin(), levels.end()) ||
      std::adjacent_find(levels.begin(), levels.end()) != levels.end()) {
    throw ConfigError("active levels must be strictly ascending");
  }
  if (levels.back() != 3) throw ConfigError("active levels must include the highest level 3");
  if (input_size < 16 || input_size % 16 != 0) throw ConfigError("input size must be a positive multiple of 16");
  if (target_channels == 0) throw ConfigError("target channel count must be positive");
}

Backbone::Backbone(const BackboneConfig& config) : config_(config) {
  config_.validate();
  if (config_.kind == BackboneKind::external) {
    const TensorArchive a = read_archive(config_.external_weights, kBackboneMagic, kBackboneVersion);
    for (std::size_t s = 0; s < 4; ++s) {
      const Tensor& w = a.at("stage" + std::to_string(s) + ".weight");
      const Tensor& b = a.at("stage" + std::to_string(s) + ".bias");
      const std::size_t in = s == 0 ? 3 : weights_.back().shape()[0];
      if (w.dim() != 4 || w.shape[1] != in || w.shape[2] != 3 || w.shape[3] != 3 || b.shape != Shape{w.shape[0]}) {
        throw ShapeError("external backbone stage " + std::to_string(s) + " has shape " + shape_str(w.shape));
      }
      weights_.push_back(ag::constant(w));
      biases_.push_back(ag::constant(b));
      config_.stage_channels[s] = w.shape[0];
    }
    return;
  }
  Rng rng(mix_seed({config_.seed, 0xbacb0e}));
  std::size_t in = 3;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = config_.stage_channels[s];
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
    weights_.push_back(ag::constant(nn::normal_tensor({out, in, 3, 3}, stddev, rng)));
    biases_.push_back(ag::constant(nn::uniform_tensor({out}, 0.05, rng)));
    in = out;
  }
}

std::size_t Backbone::level_size(std::size_t level) const { return config_.input_size >> (level + 1); }

MultiLevelFeatures Backbone::extract(const Tensor& images) const {
  ag::NoGradGuard guard;
  Tensor x = images;
  if (x.dim() == 3) x.shape.insert(x.shape.begin(), 1);
  if (x.dim() != 4 || x.shape[1] != 3 || x.shape[2] != config_.input_size || x.shape[3] != config_.input_size) {
    throw ShapeError("backbone expects [B,3," + std::to_string(config_.input_size) + "," +
                     std::to_string(config_.input_size) + "] images, got " + shape_str(x.shape));
  }
  MultiLevelFeatures out;
  ag::Var h = ag::constant(std::move(x));
  for (std::size_t s = 0; s < 4; ++s) {
    h = ag::relu(ag::add_channel_bias(ag::conv2d(h, weights_[s], {2, 1}), biases_[s]));
    if (std::find(config_.levels.begin(), config_.levels.end(), s) != config_.levels.end()) {
      out.levels.push_back(s);
      out.maps.push_back(h.value());
    }
  }
  return out;
}

std::vector<ag::Var> Backbone::extract_graph(const ag::Var& images) const {
  std::vector<ag::Var> out;
  ag::Var h = images;
  for (std::size_t s = 0; s < 4; ++s) {
    h = ag::relu(ag::add_channel_bias(ag::conv2d(h, weights_[s], {2, 1}), biases_[s]));
    if (std::find(config_.levels.begin(), config_.levels.end(), s) != config_.levels.end()) out.push_back(h);
  }
  return out;
}

void Backbone::save(const std::filesystem::path& path) const {
  TensorArchive a;
  a.magic = kBackboneMagic;
  a.version = kBackboneVersion;
  a.meta = {{"stages", 4}};
  for (std::size_t s = 0; s < 4; ++s) {
    a.tensors.emplace_back("stage" + std::to_string(s) + ".weight", weights_[s].value());
    a.tensors.emplace_back("stage" + std::to_string(s) + ".bias", biases_[s].value());
  }
  write_archive(path, a);
}

// ---------------------------------------------------------------------------

Aligner::Aligner(const std::vector<std::size_t>& level_channels, std::size_t target_channels, std::size_t grid,
                 Rng& rng)
    : target_channels_(target_channels), grid_(grid) {
  for (std::size_t c : level_channels) {
    nn::Conv2d conv;
    conv.weight = ag::parameter(nn::uniform_tensor({target_channels, c, 1, 1}, 1.0 / std::sqrt(static_cast<double>(c)), rng));
    conv.bias = ag::parameter(Tensor({target_channels}));
    conv.geom = {1, 0};
    convs_.push_back(std::move(conv));
  }
}

Tensor Aligner::downsample(const Tensor& features, std::size_t grid) {
  if (features.shape[2] == grid && features.shape[3] == grid) return features;
  return ag::adaptive_avg_pool2d_tensor(features, grid, grid);
}

ag::Var Aligner::align(const std::vector<ag::Var>& downsampled) const {
  if (downsampled.size() != convs_.size()) {
    throw ShapeError("align: expected " + std::to_string(convs_.size()) + " levels, got " +
                     std::to_string(downsampled.size()));
  }
  std::vector<ag::Var> rows;
  for (std::size_t k = 0; k < convs_.size(); ++k) {
    const Shape& s = downsampled[k].shape();
    if (s.size() != 4 || s[2] != grid_ || s[3] != grid_) {
      throw ShapeError("align: level " + std::to_string(k) + " is not on the " + std::to_string(grid_) + "x" +
                       std::to_string(grid_) + " grid: " + shape_str(s));
    }
    ag::Var y = convs_[k](downsampled[k]);
    rows.push_back(ag::reshape(y, {s[0], 1, target_channels_ * grid_ * grid_}));
  }
  return rows.size() == 1 ? rows[0] : ag::concat(rows, 1);
}

ag::Var Aligner::align_features(const MultiLevelFeatures& features) const {
  std::vector<ag::Var> ds;
  for (const auto& m : features.maps) ds.push_back(ag::constant(downsample(m, grid_)));
  return align(ds);
}

void Aligner::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < convs_.size(); ++k) convs_[k].collect(out, prefix + ".conv" + std::to_string(k));
}

}  // namespace foma
