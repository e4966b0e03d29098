#include "foma/mfa.hpp"

#include <cmath>

namespace foma {

std::string to_string(AggStrategy s) {
  switch (s) {
    case AggStrategy::learned: return "learned";
    case AggStrategy::standard: return "standard";
    case AggStrategy::mean: return "mean";
    case AggStrategy::random: return "random";
    case AggStrategy::random_simplex: return "random-simplex";
  }
  return "?";
}

AggStrategy parse_agg_strategy(const std::string& s) {
  for (auto k : {AggStrategy::learned, AggStrategy::standard, AggStrategy::mean, AggStrategy::random,
                 AggStrategy::random_simplex}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown aggregation strategy '" + s + "'");
}

AggregationPredictor::AggregationPredictor(const std::vector<std::size_t>& widths, std::size_t num_levels, Rng& rng)
    : num_levels_(num_levels) {
  if (widths.empty()) throw ConfigError("predictor needs at least one stage");
  if (num_levels == 0) throw ConfigError("predictor needs at least one feature level");
  std::size_t in = 3;
  for (std::size_t w : widths) {
    convs_.emplace_back(in, w, 3, 2, 1, rng);
    convs_.emplace_back(w, w, 3, 1, 1, rng);
    in = w;
  }
  head_ = nn::Linear(in, kNumBranches * num_levels, rng);
}

ag::Var AggregationPredictor::logits(const ag::Var& images) const {
  ag::Var h = images;
  for (const auto& conv : convs_) h = ag::relu(conv(h));
  const Shape& s = h.shape();
  ag::Var pooled = ag::mean_axis(ag::reshape(h, {s[0], s[1], s[2] * s[3]}), 2);
  return ag::reshape(head_(pooled), {s[0], kNumBranches, num_levels_});
}

void AggregationPredictor::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, prefix + ".conv" + std::to_string(i));
  head_.collect(out, prefix + ".head");
}

ag::Var softmax_weights(const ag::Var& logits, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive, got " + std::to_string(tau));
  return ag::softmax_last(ag::scale(logits, 1.0 / tau));
}

Tensor fixed_weights(AggStrategy strategy, std::size_t num_levels, const std::vector<std::uint64_t>& sample_ids,
                     std::uint64_t seed, std::uint64_t pass) {
  const std::size_t batch = sample_ids.size();
  Tensor w({batch, kNumBranches, num_levels});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < kNumBranches; ++r) {
      double* row = w.data.data() + (b * kNumBranches + r) * num_levels;
      switch (strategy) {
        case AggStrategy::standard:
          row[num_levels - 1] = 1.0;
          break;
        case AggStrategy::mean:
          for (std::size_t k = 0; k < num_levels; ++k) row[k] = 1.0 / static_cast<double>(num_levels);
          break;
        case AggStrategy::random: {
          Rng rng(mix_seed({seed, pass, sample_ids[b], r}));
          row[rng.below(num_levels)] = 1.0;
          break;
        }
        case AggStrategy::random_simplex: {
          // Flat Dirichlet: normalized exponential draws.
          Rng rng(mix_seed({seed, pass, sample_ids[b], r}));
          double total = 0.0;
          for (std::size_t k = 0; k < num_levels; ++k) {
            double u = rng.uniform();
            while (u <= 0.0) u = rng.uniform();
            row[k] = -std::log(u);
            total += row[k];
          }
          for (std::size_t k = 0; k < num_levels; ++k) row[k] /= total;
          break;
        }
        case AggStrategy::learned:
          throw std::logic_error("learned weights come from the predictor");
      }
    }
  }
  return w;
}

ag::Var aggregate(const ag::Var& w, const ag::Var& f_hat) {
  const Shape& ws = w.shape();
  const Shape& fs = f_hat.shape();
  if (ws.size() != 3 || fs.size() != 3 || ws[0] != fs[0] || ws[2] != fs[1]) {
    throw ShapeError("aggregate: weights " + shape_str(ws) + " do not match features " + shape_str(fs));
  }
  return ag::matmul(w, f_hat);
}

}  // namespace foma
