#include "foma/heads.hpp"

namespace foma {

MlpHead::MlpHead(std::size_t in, std::size_t hidden, std::size_t classes, Rng& rng)
    : fc1_(in, hidden, rng), fc2_(hidden, classes, rng), bn_(hidden) {}

ag::Var MlpHead::operator()(const ag::Var& x, bool training) {
  return fc2_(ag::relu(bn_(fc1_(x), training)));
}

void MlpHead::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1_.collect(out, prefix + ".fc1");
  bn_.collect(out, prefix + ".bn");
  fc2_.collect(out, prefix + ".fc2");
}

void MlpHead::collect_buffers(nn::BufferList& out, const std::string& prefix) {
  bn_.collect_buffers(out, prefix + ".bn");
}

std::string to_string(FuseMode m) { return m == FuseMode::sum ? "sum" : "softmax"; }

FuseMode parse_fuse(const std::string& s) {
  if (s == "sum") return FuseMode::sum;
  if (s == "softmax") return FuseMode::softmax;
  throw ConfigError("unknown fuse mode '" + s + "'");
}

ag::Var fuse_scores(const ag::Var& s_a, const ag::Var& s_o, const ag::Var& s_c, const LabelSpace& labels,
                    FuseMode mode) {
  if (s_a.shape().back() != labels.num_attrs() || s_o.shape().back() != labels.num_objs() ||
      s_c.shape().back() != labels.num_comps()) {
    throw ShapeError("fuse_scores: branch widths do not match the label space");
  }
  ag::Var a = s_a, o = s_o, c = s_c;
  if (mode == FuseMode::softmax) {
    a = ag::softmax_last(a);
    o = ag::softmax_last(o);
    c = ag::softmax_last(c);
  }
  const int last = static_cast<int>(s_c.shape().size()) - 1;
  return ag::add(ag::add(c, ag::index_select(a, last, labels.comp_attrs())), ag::index_select(o, last, labels.comp_objs()));
}

}  // namespace foma
