#include "foma/focus.hpp"

#include <algorithm>
#include <cmath>

namespace foma {

namespace {

constexpr double kEps = 1e-8;

void check_connected(const std::vector<ag::Var>& grads) {
  for (const auto& g : grads) {
    if (!g.defined()) throw std::logic_error("attention map: score is not connected to the branch feature");
  }
}

ag::Var channel_mean(const ag::Var& g) {
  const Shape& s = g.shape();
  if (s.size() != 4) throw ShapeError("attention map expects [B,C,H,W] features, got " + shape_str(s));
  return ag::mean_axis(ag::reshape(g, {s[0], s[1], s[2] * s[3]}), 1);
}

}  // namespace

ag::Var ground_truth_score(const ag::Var& scores, const std::vector<std::size_t>& labels) {
  if (scores.shape().size() != 2 || scores.shape()[0] != labels.size()) {
    throw ShapeError("ground_truth_score: scores " + shape_str(scores.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  return ag::sum_all(ag::gather_last(scores, labels));
}

std::vector<ag::Var> attention_maps(const ag::Var& score, const std::vector<ag::Var>& features, bool retain_graph) {
  ag::EnableGradGuard enable;
  std::vector<ag::Var> grads = ag::grad(score, features, {retain_graph, true});
  check_connected(grads);
  std::vector<ag::Var> maps;
  for (const auto& g : grads) maps.push_back(channel_mean(g));
  return maps;
}

ag::Var attention_map(const ag::Var& scores, const std::vector<std::size_t>& labels, const ag::Var& feature,
                      bool retain_graph) {
  return attention_maps(ground_truth_score(scores, labels), {feature}, retain_graph)[0];
}

ag::Var normalize_map(const ag::Var& maps) {
  const Shape& s = maps.shape();
  if (s.size() != 2) throw ShapeError("normalize_map expects [B,P], got " + shape_str(s));
  std::vector<std::size_t> lo(s[0]), hi(s[0]);
  const auto& v = maps.value().data;
  for (std::size_t b = 0; b < s[0]; ++b) {
    auto first = v.begin() + static_cast<std::ptrdiff_t>(b * s[1]);
    auto last = first + static_cast<std::ptrdiff_t>(s[1]);
    lo[b] = static_cast<std::size_t>(std::min_element(first, last) - first);
    hi[b] = static_cast<std::size_t>(std::max_element(first, last) - first);
  }
  ag::Var mn = ag::reshape(ag::gather_last(maps, lo), {s[0], 1});
  ag::Var mx = ag::reshape(ag::gather_last(maps, hi), {s[0], 1});
  ag::Var range = ag::add_scalar(ag::sub(mx, mn), kEps);
  ag::Var shifted = ag::sub(maps, ag::expand_axis(ag::reshape(mn, {s[0]}), 1, s[1]));
  return ag::div(shifted, ag::expand_axis(ag::reshape(range, {s[0]}), 1, s[1]));
}

FocusResult focused_loss(const ag::Var& m_a, const ag::Var& m_o, const ag::Var& m_c) {
  if (m_a.shape() != m_o.shape() || m_a.shape() != m_c.shape() || m_a.shape().size() != 2) {
    throw ShapeError("focused_loss: map shapes differ");
  }
  const std::size_t batch = m_a.shape()[0];
  const std::size_t p = m_a.shape()[1];
  ag::Var u = normalize_map(ag::add(m_a, m_o));
  ag::Var v = normalize_map(m_c);

  // A normalized row is all zero exactly when its map is constant.
  std::vector<std::size_t> keep;
  for (std::size_t b = 0; b < batch; ++b) {
    bool zero_u = true, zero_v = true;
    for (std::size_t k = 0; k < p; ++k) {
      zero_u = zero_u && u.value().data[b * p + k] == 0.0;
      zero_v = zero_v && v.value().data[b * p + k] == 0.0;
    }
    if (!zero_u && !zero_v) keep.push_back(b);
  }
  FocusResult r;
  r.cosine.assign(batch, 0.0);
  if (keep.empty()) {
    r.loss = ag::mul(ag::sum_all(u), ag::constant(Tensor({}, 0.0)));
    return r;
  }
  ag::Var uk = ag::index_select(u, 0, keep);
  ag::Var vk = ag::index_select(v, 0, keep);
  ag::Var dot = ag::sum_axis(ag::mul(uk, vk), 1);
  ag::Var nu = ag::pow(ag::sum_axis(ag::mul(uk, uk), 1), 0.5);
  ag::Var nv = ag::pow(ag::sum_axis(ag::mul(vk, vk), 1), 0.5);
  ag::Var cos = ag::div(dot, ag::add_scalar(ag::mul(nu, nv), kEps));
  for (std::size_t i = 0; i < keep.size(); ++i) r.cosine[keep[i]] = cos.value().data[i];
  r.loss = ag::scale(ag::sum_all(cos), -1.0 / static_cast<double>(batch));
  return r;
}

}  // namespace foma
