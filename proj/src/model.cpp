#include "foma/model.hpp"

#include <algorithm>

namespace foma {

void ModelConfig::validate() const {
  backbone.validate();
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (predictor_widths.empty()) throw ConfigError("predictor needs at least one stage");
  if (embedding_dim < 2) throw ConfigError("embedding dimension must be at least 2");
  if (gcn_layers == 0) throw ConfigError("GCN needs at least one layer");
  if (attention_heads == 0 || backbone.target_channels % attention_heads != 0) {
    throw ConfigError("attention heads must divide the channel count");
  }
}

FomaModel::FomaModel(const ModelConfig& config, const LabelSpace& labels)
    : config_(config), labels_(labels), backbone_((config.validate(), config.backbone)) {
  labels_.validate();
  Rng rng(mix_seed({config_.seed, 0x5eed}));
  const std::size_t c = config_.backbone.target_channels;
  const std::size_t g = backbone_.grid();

  std::vector<std::size_t> level_channels;
  for (std::size_t l : config_.backbone.levels) level_channels.push_back(backbone_.level_channels(l));
  aligner_ = Aligner(level_channels, c, g, rng);
  predictor_ = AggregationPredictor(config_.predictor_widths, level_channels.size(), rng);
  for (std::size_t b = 0; b < kNumBranches; ++b) pools_.emplace_back(c, g * g + 1, config_.attention_heads, rng);

  graph_ = build_graph(labels_);
  propagation_ = ag::constant(graph_.propagation);
  const EmbeddingTable emb = config_.embedding_file.empty()
                                 ? seeded_embeddings(labels_, config_.embedding_dim, config_.seed)
                                 : file_embeddings(labels_, config_.embedding_dim, config_.embedding_file);
  Tensor h0 = init_node_embeddings(labels_, emb);
  h0_ = config_.freeze_node_init ? ag::constant(std::move(h0)) : ag::parameter(std::move(h0));
  std::vector<std::size_t> dims{config_.embedding_dim};
  for (std::size_t l = 1; l < config_.gcn_layers; ++l) dims.push_back(2 * config_.embedding_dim);
  dims.push_back(c);
  gcn_ = Gcn(dims, rng);

  attr_head_ = MlpHead(c, 2 * c, labels_.num_attrs(), rng);
  obj_head_ = MlpHead(c, 2 * c, labels_.num_objs(), rng);
}

ModelInput FomaModel::prepare(const Tensor& images) const {
  ModelInput in;
  const MultiLevelFeatures f = backbone_.extract(images);
  in.images = images;
  if (in.images.dim() == 3) in.images.shape.insert(in.images.shape.begin(), 1);
  for (const auto& m : f.maps) in.downsampled.push_back(Aligner::downsample(m, aligner_.grid()));
  in.sample_ids.resize(in.images.shape[0]);
  for (std::size_t i = 0; i < in.sample_ids.size(); ++i) in.sample_ids[i] = i;
  return in;
}

ag::Var FomaModel::aggregation_weights(const ModelInput& input) const {
  if (config_.strategy == AggStrategy::learned) {
    return softmax_weights(predictor_.logits(ag::constant(input.images)), config_.tau);
  }
  return ag::constant(
      fixed_weights(config_.strategy, aligner_.num_levels(), input.sample_ids, mix_seed({config_.seed, 0xa66}), input.pass));
}

ag::Var FomaModel::pool_branch(std::size_t branch, const ag::Var& f) const {
  return config_.pooling == PoolingKind::attention ? pools_[branch](f) : gap_pool(f);
}

ModelOutput FomaModel::forward(const ModelInput& input, bool training) {
  const std::size_t batch = input.images.shape.at(0);
  if (input.sample_ids.size() != batch) throw ShapeError("forward: sample id count does not match the batch");
  const std::size_t c = aligner_.target_channels();
  const std::size_t g = aligner_.grid();

  ModelOutput out;
  std::vector<ag::Var> ds;
  for (const auto& t : input.downsampled) ds.push_back(ag::constant(t));
  out.f_hat = aligner_.align(ds);
  out.weights = aggregation_weights(input);
  out.f_prime = aggregate(out.weights, out.f_hat);
  for (std::size_t b = 0; b < kNumBranches; ++b) {
    out.branch.push_back(ag::reshape(ag::slice(out.f_prime, 1, b, 1), {batch, c, g, g}));
  }
  out.pooled_a = pool_branch(kBranchAttr, out.branch[kBranchAttr]);
  out.pooled_c = pool_branch(kBranchComp, out.branch[kBranchComp]);
  out.pooled_o = pool_branch(kBranchObj, out.branch[kBranchObj]);
  out.s_a = attr_head_(out.pooled_a, training);
  out.s_o = obj_head_(out.pooled_o, training);
  out.comp_embeddings = composition_rows(graph_, gcn_.propagate(propagation_, h0_));
  out.s_c = composition_scores(out.pooled_c, out.comp_embeddings);
  return out;
}

ag::Var FomaModel::fused(const ModelOutput& out) const {
  return fuse_scores(out.s_a, out.s_o, out.s_c, labels_, config_.fuse);
}

nn::ParamList FomaModel::parameters() const {
  nn::ParamList p;
  aligner_.collect(p, "align");
  if (config_.strategy == AggStrategy::learned) predictor_.collect(p, "predictor");
  if (config_.pooling == PoolingKind::attention) {
    pools_[kBranchAttr].collect(p, "pool_attr");
    pools_[kBranchComp].collect(p, "pool_comp");
    pools_[kBranchObj].collect(p, "pool_obj");
  }
  if (!config_.freeze_node_init) p.push_back({"graph.h0", h0_, true});
  gcn_.collect(p, "gcn");
  attr_head_.collect(p, "head_attr");
  obj_head_.collect(p, "head_obj");
  return p;
}

nn::BufferList FomaModel::buffers() {
  nn::BufferList b;
  attr_head_.collect_buffers(b, "head_attr");
  obj_head_.collect_buffers(b, "head_obj");
  return b;
}

Tensor stack_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = samples.at(indices[0]).image.shape;
  const std::size_t n = samples[indices[0]].image.numel();
  Tensor out({indices.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = samples.at(indices[i]).image;
    if (img.shape != s) throw ShapeError("stack_images: mixed image sizes");
    std::copy(img.data.begin(), img.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

}  // namespace foma
