#include "foma/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace foma {

namespace {

// Copies rows [begin, begin+count) of a leading-axis tensor.
Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& indices) {
  const std::size_t row = t.numel() / t.shape[0];
  Shape s = t.shape;
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

void put_rows(Tensor& dst, std::size_t offset, const Tensor& src) {
  std::copy(src.data.begin(), src.data.end(), dst.data.begin() + static_cast<std::ptrdiff_t>(offset * (dst.numel() / dst.shape[0])));
}

const char* kBranchNames[] = {"attr", "comp", "obj"};

}  // namespace

ModelInput SplitData::batch(const std::vector<std::size_t>& indices, std::uint64_t pass) const {
  ModelInput in;
  in.images = take_rows(images, indices);
  for (const auto& d : downsampled) in.downsampled.push_back(take_rows(d, indices));
  for (std::size_t i : indices) in.sample_ids.push_back((static_cast<std::uint64_t>(split) << 40) + i);
  in.pass = pass;
  return in;
}

SplitData prepare_split(const FomaModel& model, const std::vector<Sample>& samples, Split split) {
  SplitData d;
  d.split = split;
  if (samples.empty()) return d;
  const std::size_t n = samples.size();
  const Shape& s = samples[0].image.shape;
  const std::size_t size = model.config().backbone.input_size;
  if (s != Shape{3, size, size}) {
    throw ValidationError("images are " + shape_str(s) + " but the model expects [3," + std::to_string(size) + "," +
                          std::to_string(size) + "]");
  }
  d.images = Tensor({n, s[0], s[1], s[2]});
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const Tensor imgs = stack_images(samples, idx);
    put_rows(d.images, start, imgs);
    const ModelInput in = model.prepare(imgs);
    if (d.downsampled.empty()) {
      for (const auto& t : in.downsampled) {
        Shape ds = t.shape;
        ds[0] = n;
        d.downsampled.emplace_back(ds);
      }
    }
    for (std::size_t k = 0; k < in.downsampled.size(); ++k) put_rows(d.downsampled[k], start, in.downsampled[k]);
  }
  for (const auto& smp : samples) {
    d.attr.push_back(smp.attr);
    d.obj.push_back(smp.obj);
    d.comp.push_back(smp.comp);
  }
  return d;
}

SplitData load_split(const FomaModel& model, const DatasetManifest& manifest, Split split) {
  return prepare_split(model, load_samples(manifest, model.labels(), split), split);
}

SplitScores score_split(FomaModel& model, const SplitData& data, std::size_t chunk) {
  ag::NoGradGuard no_grad;
  const LabelSpace& labels = model.labels();
  const std::size_t n = data.size();
  const std::size_t k = labels.num_comps();
  SplitScores out;
  out.fused.scores = Tensor({n, k});
  out.composition.scores = Tensor({n, k});
  out.s_a = Tensor({n, labels.num_attrs()});
  out.s_o = Tensor({n, labels.num_objs()});
  out.weights = Tensor({n, kNumBranches, model.aligner().num_levels()});
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const ModelInput in = data.batch(idx, 0xe7a1);
    const ModelOutput o = model.forward(in, false);
    put_rows(out.fused.scores, start, model.fused(o).value());
    put_rows(out.composition.scores, start, o.s_c.value());
    put_rows(out.s_a, start, o.s_a.value());
    put_rows(out.s_o, start, o.s_o.value());
    put_rows(out.weights, start, o.weights.value());
  }
  for (ScoreTable* t : {&out.fused, &out.composition}) {
    t->truth = data.comp;
    t->seen = labels.seen;
  }
  return out;
}

SplitReport report_split(const SplitScores& scores, std::optional<std::size_t> grid) {
  SplitReport r;
  r.fused = summarize(sweep(scores.fused, grid));
  r.composition = summarize(sweep(scores.composition, grid));
  for (EvalReport* rep : {&r.fused, &r.composition}) {
    for (std::size_t i = 0; i < scores.fused.num_samples(); ++i) (scores.fused.truth_seen(i) ? rep->n_seen : rep->n_unseen)++;
  }
  return r;
}

void write_weight_log(const std::filesystem::path& path, const Tensor& weights, const std::vector<std::size_t>& levels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sample,branch,level,weight\n";
  const std::size_t nf = weights.shape[2];
  char buf[32];
  for (std::size_t i = 0; i < weights.shape[0]; ++i)
    for (std::size_t b = 0; b < kNumBranches; ++b)
      for (std::size_t l = 0; l < nf; ++l) {
        std::snprintf(buf, sizeof buf, "%.17g", weights.data[(i * kNumBranches + b) * nf + l]);
        out << i << ',' << kBranchNames[b] << ',' << levels.at(l) << ',' << buf << '\n';
      }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace foma
