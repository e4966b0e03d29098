#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "foma/tensor.hpp"

namespace foma {

struct Composition {
  std::size_t attr = 0;
  std::size_t obj = 0;
  bool operator==(const Composition&) const = default;
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

// Attributes, objects, the closed-world composition set and the seen/unseen
// partition. Seen means "occurs in the training split".
struct LabelSpace {
  std::vector<std::string> attributes;
  std::vector<std::string> objects;
  std::vector<Composition> compositions;
  std::vector<bool> seen;
  // Bit mask per composition: 1 = train, 2 = val, 4 = test.
  std::vector<std::uint8_t> split_presence;

  std::size_t num_attrs() const { return attributes.size(); }
  std::size_t num_objs() const { return objects.size(); }
  std::size_t num_comps() const { return compositions.size(); }

  std::optional<std::size_t> find(std::size_t attr, std::size_t obj) const;
  std::size_t attr_index(const std::string& name) const;
  std::size_t obj_index(const std::string& name) const;
  std::vector<std::size_t> seen_indices() const;
  std::vector<std::size_t> unseen_indices() const;
  std::vector<std::size_t> comp_attrs() const;
  std::vector<std::size_t> comp_objs() const;

  // Throws ValidationError on a broken invariant.
  void validate(bool require_unseen = false) const;
};

struct ManifestRecord {
  Split split = Split::train;
  std::string attribute;
  std::string object;
  std::string image;  // relative to the manifest directory
  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
};

struct Sample {
  Tensor image;  // [3, H, W] in [0, 1]
  std::size_t attr = 0;
  std::size_t obj = 0;
  std::size_t comp = 0;
};

inline constexpr const char* kManifestName = "manifest.tsv";

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::pair<LabelSpace, DatasetManifest> load_manifest(const std::filesystem::path& path);
LabelSpace derive_label_space(const DatasetManifest& manifest);
std::vector<Sample> load_samples(const DatasetManifest& manifest, const LabelSpace& labels, Split split);

// ---- synthetic data -------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_attrs = 5;
  std::size_t n_objs = 5;
  double seen_fraction = 0.8;
  std::size_t images_per_pair = 100;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
};

// Fill styles and shapes available to the renderer, in index order.
const std::vector<std::string>& synthetic_attribute_names();
const std::vector<std::string>& synthetic_object_names();

// Picks the seen composition subset; every primitive is covered.
std::vector<bool> choose_seen_pairs(std::size_t n_attrs, std::size_t n_objs, double seen_fraction, std::uint64_t seed);

Tensor render_synthetic(std::size_t attr, std::size_t obj, std::size_t image_size, std::uint64_t seed);

// Renders the dataset under `out_dir` and writes `out_dir/manifest.tsv`.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

// ---- semantic embeddings --------------------------------------------------

struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<std::vector<double>> attributes;
  std::vector<std::vector<double>> objects;
};

std::vector<double> seeded_embedding(const std::string& name, std::size_t dim, std::uint64_t seed);
EmbeddingTable seeded_embeddings(const LabelSpace& labels, std::size_t dim, std::uint64_t seed);
// Text file, one `name v1 ... v_dim` per line.
EmbeddingTable file_embeddings(const LabelSpace& labels, std::size_t dim, const std::filesystem::path& path);

}  // namespace foma
