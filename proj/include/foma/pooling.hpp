#pragma once

#include <string>

#include "foma/autograd.hpp"
#include "foma/nn.hpp"

namespace foma {

enum class PoolingKind { attention, gap };
std::string to_string(PoolingKind k);
PoolingKind parse_pooling(const std::string& s);

// Per-channel spatial mean: [B, C, H, W] -> [B, C].
ag::Var gap_pool(const ag::Var& f);

// One self-attention layer over [gap token; spatial tokens] + PE, read out at
// token 0. Only the token-0 query is formed since no other output is used.
class AttentionPool {
 public:
  AttentionPool() = default;
  AttentionPool(std::size_t channels, std::size_t num_tokens, std::size_t heads, Rng& rng);

  // f [B, C, H, W] with H*W + 1 == num_tokens -> [B, C]
  ag::Var operator()(const ag::Var& f) const;
  // Token sequence [B, T, C] before attention (position embeddings added).
  ag::Var tokens(const ag::Var& f) const;
  ag::Var attend(const ag::Var& tokens) const;

  std::size_t heads() const { return heads_; }
  nn::Linear& query() { return q_; }
  nn::Linear& key() { return k_; }
  nn::Linear& value() { return v_; }
  nn::Linear& output() { return o_; }
  ag::Var& position() { return pe_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  nn::Linear q_, k_, v_, o_;
  ag::Var pe_;  // [T, C]
  std::size_t heads_ = 1;
};

}  // namespace foma
