#include "foma/pooling.hpp"

#include <cmath>

namespace foma {

std::string to_string(PoolingKind k) { return k == PoolingKind::attention ? "attention" : "gap"; }

PoolingKind parse_pooling(const std::string& s) {
  if (s == "attention") return PoolingKind::attention;
  if (s == "gap") return PoolingKind::gap;
  throw ConfigError("unknown pooling kind '" + s + "'");
}

ag::Var gap_pool(const ag::Var& f) {
  const Shape& s = f.shape();
  if (s.size() != 4) throw ShapeError("gap_pool expects [B,C,H,W], got " + shape_str(s));
  return ag::mean_axis(ag::reshape(f, {s[0], s[1], s[2] * s[3]}), 2);
}

AttentionPool::AttentionPool(std::size_t channels, std::size_t num_tokens, std::size_t heads, Rng& rng)
    : q_(channels, channels, rng),
      k_(channels, channels, rng),
      v_(channels, channels, rng),
      o_(channels, channels, rng),
      pe_(ag::parameter(Tensor({num_tokens, channels}))),
      heads_(heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("head count " + std::to_string(heads) + " must divide channel count " + std::to_string(channels));
  }
}

ag::Var AttentionPool::tokens(const ag::Var& f) const {
  const Shape& s = f.shape();
  if (s.size() != 4) throw ShapeError("attention_pool expects [B,C,H,W], got " + shape_str(s));
  const std::size_t hw = s[2] * s[3];
  if (hw + 1 != pe_.shape()[0] || s[1] != pe_.shape()[1]) {
    throw ShapeError("attention_pool: input " + shape_str(s) + " does not match position embeddings " +
                     shape_str(pe_.shape()));
  }
  ag::Var flat = ag::reshape(f, {s[0], s[1], hw});
  ag::Var gap = ag::reshape(ag::mean_axis(flat, 2), {s[0], 1, s[1]});
  ag::Var spatial = ag::permute(flat, {0, 2, 1});
  return ag::add(ag::concat({gap, spatial}, 1), pe_);
}

ag::Var AttentionPool::attend(const ag::Var& tok) const {
  const std::size_t batch = tok.shape()[0];
  const std::size_t t = tok.shape()[1];
  const std::size_t c = tok.shape()[2];
  const std::size_t dh = c / heads_;
  ag::Var q = q_(ag::slice(tok, 1, 0, 1));  // [B, 1, C]
  ag::Var k = k_(tok);                       // [B, T, C]
  ag::Var v = v_(tok);
  if (heads_ > 1) {
    auto split = [&](const ag::Var& x, std::size_t n) {
      return ag::reshape(ag::permute(ag::reshape(x, {batch, n, heads_, dh}), {0, 2, 1, 3}), {batch * heads_, n, dh});
    };
    q = split(q, 1);
    k = split(k, t);
    v = split(v, t);
  }
  ag::Var scores = ag::scale(ag::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  ag::Var out = ag::matmul(ag::softmax_last(scores), v);  // [B*h, 1, dh]
  out = ag::reshape(out, {batch, c});
  return o_(out);
}

ag::Var AttentionPool::operator()(const ag::Var& f) const { return attend(tokens(f)); }

void AttentionPool::collect(nn::ParamList& out, const std::string& prefix) const {
  q_.collect(out, prefix + ".query");
  k_.collect(out, prefix + ".key");
  v_.collect(out, prefix + ".value");
  o_.collect(out, prefix + ".output");
  out.push_back({prefix + ".position", pe_, false});
}

}  // namespace foma
