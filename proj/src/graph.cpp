#include "foma/graph.hpp"

#include <cmath>

namespace foma {

CompositionGraph build_graph(const LabelSpace& labels) {
  CompositionGraph g;
  g.num_attrs = labels.num_attrs();
  g.num_objs = labels.num_objs();
  g.num_comps = labels.num_comps();
  const std::size_t n = g.num_nodes();
  g.adjacency = Tensor({n, n});
  auto link = [&](std::size_t i, std::size_t j) {
    g.adjacency.data[i * n + j] = 1.0;
    g.adjacency.data[j * n + i] = 1.0;
  };
  for (std::size_t y = 0; y < g.num_comps; ++y) {
    const std::size_t a = labels.compositions[y].attr;
    const std::size_t o = g.num_attrs + labels.compositions[y].obj;
    const std::size_t c = g.comp_offset() + y;
    link(c, a);
    link(c, o);
    link(a, o);
  }
  g.degrees = Tensor({n});
  g.propagation = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double d = 1.0;
    for (std::size_t j = 0; j < n; ++j) d += g.adjacency.data[i * n + j];
    g.degrees.data[i] = d;
    for (std::size_t j = 0; j < n; ++j) {
      const double a_hat = g.adjacency.data[i * n + j] + (i == j ? 1.0 : 0.0);
      g.propagation.data[i * n + j] = a_hat / d;
    }
  }
  return g;
}

Tensor init_node_embeddings(const LabelSpace& labels, const EmbeddingTable& emb) {
  if (emb.attributes.size() != labels.num_attrs() || emb.objects.size() != labels.num_objs()) {
    throw ValidationError("embedding table does not cover every attribute and object");
  }
  const std::size_t d = emb.dim;
  const std::size_t n = labels.num_attrs() + labels.num_objs() + labels.num_comps();
  Tensor h({n, d});
  auto put = [&](std::size_t row, const std::vector<double>& v) {
    if (v.size() != d) throw ShapeError("embedding row has dimension " + std::to_string(v.size()));
    std::copy(v.begin(), v.end(), h.data.begin() + static_cast<std::ptrdiff_t>(row * d));
  };
  for (std::size_t a = 0; a < labels.num_attrs(); ++a) put(a, emb.attributes[a]);
  for (std::size_t o = 0; o < labels.num_objs(); ++o) put(labels.num_attrs() + o, emb.objects[o]);
  const std::size_t off = labels.num_attrs() + labels.num_objs();
  for (std::size_t y = 0; y < labels.num_comps(); ++y) {
    const auto& ea = emb.attributes[labels.compositions[y].attr];
    const auto& eo = emb.objects[labels.compositions[y].obj];
    for (std::size_t k = 0; k < d; ++k) h.data[(off + y) * d + k] = 0.5 * (ea[k] + eo[k]);
  }
  return h;
}

Gcn::Gcn(const std::vector<std::size_t>& dims, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("GCN needs at least one layer");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    weights_.push_back(ag::parameter(nn::uniform_tensor({dims[l], dims[l + 1]}, bound, rng)));
  }
}

ag::Var Gcn::propagate(const ag::Var& propagation, const ag::Var& h0) const {
  ag::Var h = h0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = ag::matmul(propagation, ag::matmul(h, weights_[l]));
    if (relu_between && l + 1 < weights_.size()) h = ag::relu(h);
  }
  return h;
}

void Gcn::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < weights_.size(); ++l) out.push_back({prefix + ".weight" + std::to_string(l), weights_[l], true});
}

ag::Var composition_rows(const CompositionGraph& graph, const ag::Var& h) {
  return ag::slice(h, 0, graph.comp_offset(), graph.num_comps);
}

ag::Var composition_scores(const ag::Var& pooled, const ag::Var& embeddings) {
  if (pooled.shape().back() != embeddings.shape().back()) {
    throw ShapeError("composition_scores: pooled " + shape_str(pooled.shape()) + " vs embeddings " +
                     shape_str(embeddings.shape()));
  }
  return ag::matmul(pooled, embeddings, false, true);
}

}  // namespace foma
