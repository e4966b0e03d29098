#pragma once

#include <string>
#include <vector>

#include "foma/autograd.hpp"
#include "foma/data.hpp"
#include "foma/nn.hpp"

namespace foma {

// Node layout: [attributes | objects | compositions].
struct CompositionGraph {
  std::size_t num_attrs = 0;
  std::size_t num_objs = 0;
  std::size_t num_comps = 0;
  Tensor adjacency;    // [N, N], binary, symmetric, zero diagonal
  Tensor degrees;      // [N], row sums of A + I
  Tensor propagation;  // [N, N], D^-1 (A + I)

  std::size_t num_nodes() const { return num_attrs + num_objs + num_comps; }
  std::size_t comp_offset() const { return num_attrs + num_objs; }
};

// Connects every pair inside each (attribute, object, composition) triple,
// over the whole closed world.
CompositionGraph build_graph(const LabelSpace& labels);

// H0 [N, d0]: primitive rows copy their embeddings, composition rows average them.
Tensor init_node_embeddings(const LabelSpace& labels, const EmbeddingTable& embeddings);

// H^(l+1) = D^-1 A_hat H^(l) W^l with ReLU between layers and none after the last.
class Gcn {
 public:
  Gcn() = default;
  Gcn(const std::vector<std::size_t>& dims, Rng& rng);

  ag::Var propagate(const ag::Var& propagation, const ag::Var& h0) const;
  std::vector<ag::Var>& weights() { return weights_; }
  const std::vector<ag::Var>& weights() const { return weights_; }
  bool relu_between = true;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  std::vector<ag::Var> weights_;
};

// Composition-node rows of the propagated embeddings [|Y|, C].
ag::Var composition_rows(const CompositionGraph& graph, const ag::Var& h);

// S_c = pooled H_y^T: [B, C] x [|Y|, C] -> [B, |Y|].
ag::Var composition_scores(const ag::Var& pooled, const ag::Var& embeddings);

}  // namespace foma
