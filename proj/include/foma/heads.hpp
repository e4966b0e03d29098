#pragma once

#include <string>

#include "foma/autograd.hpp"
#include "foma/data.hpp"
#include "foma/nn.hpp"

namespace foma {

// C -> hidden -> classes, batch norm and ReLU after the hidden layer.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(std::size_t in, std::size_t hidden, std::size_t classes, Rng& rng);

  ag::Var operator()(const ag::Var& x, bool training);
  nn::Linear& hidden() { return fc1_; }
  nn::Linear& output() { return fc2_; }
  nn::BatchNorm1d& norm() { return bn_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;
  void collect_buffers(nn::BufferList& out, const std::string& prefix);

 private:
  nn::Linear fc1_, fc2_;
  nn::BatchNorm1d bn_;
};

enum class FuseMode { sum, softmax };
std::string to_string(FuseMode m);
FuseMode parse_fuse(const std::string& s);

// S_total[y] = S_c[y] + S_a[y_a] + S_o[y_o]; softmax mode first turns each
// branch into probabilities.
ag::Var fuse_scores(const ag::Var& s_a, const ag::Var& s_o, const ag::Var& s_c, const LabelSpace& labels,
                    FuseMode mode = FuseMode::sum);

}  // namespace foma
