#include "foma/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "foma/image.hpp"
#include "foma/rng.hpp"

namespace foma {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// LabelSpace

std::optional<std::size_t> LabelSpace::find(std::size_t attr, std::size_t obj) const {
  for (std::size_t i = 0; i < compositions.size(); ++i) {
    if (compositions[i].attr == attr && compositions[i].obj == obj) return i;
  }
  return std::nullopt;
}

std::size_t LabelSpace::attr_index(const std::string& name) const {
  auto it = std::find(attributes.begin(), attributes.end(), name);
  if (it == attributes.end()) throw ValidationError("unknown attribute '" + name + "'");
  return static_cast<std::size_t>(it - attributes.begin());
}

std::size_t LabelSpace::obj_index(const std::string& name) const {
  auto it = std::find(objects.begin(), objects.end(), name);
  if (it == objects.end()) throw ValidationError("unknown object '" + name + "'");
  return static_cast<std::size_t>(it - objects.begin());
}

std::vector<std::size_t> LabelSpace::seen_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> LabelSpace::unseen_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> LabelSpace::comp_attrs() const {
  std::vector<std::size_t> out;
  for (const auto& c : compositions) out.push_back(c.attr);
  return out;
}

std::vector<std::size_t> LabelSpace::comp_objs() const {
  std::vector<std::size_t> out;
  for (const auto& c : compositions) out.push_back(c.obj);
  return out;
}

void LabelSpace::validate(bool require_unseen) const {
  if (seen.size() != compositions.size()) throw ValidationError("seen mask length does not match compositions");
  std::set<std::pair<std::size_t, std::size_t>> unique;
  std::vector<bool> attr_seen(attributes.size(), false), obj_seen(objects.size(), false);
  for (std::size_t i = 0; i < compositions.size(); ++i) {
    const auto& c = compositions[i];
    if (c.attr >= attributes.size() || c.obj >= objects.size()) {
      throw ValidationError("composition " + std::to_string(i) + " has an out-of-range primitive index");
    }
    if (!unique.insert({c.attr, c.obj}).second) {
      throw ValidationError("duplicate composition " + attributes[c.attr] + " " + objects[c.obj]);
    }
    if (seen[i]) {
      attr_seen[c.attr] = true;
      obj_seen[c.obj] = true;
    }
  }
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    if (!attr_seen[a]) throw ValidationError("attribute '" + attributes[a] + "' does not appear in any seen composition");
  }
  for (std::size_t o = 0; o < objects.size(); ++o) {
    if (!obj_seen[o]) throw ValidationError("object '" + objects[o] + "' does not appear in any seen composition");
  }
  if (require_unseen && unseen_indices().empty()) throw ValidationError("no unseen composition in the label space");
}

// ---------------------------------------------------------------------------
// Manifest I/O

namespace {

constexpr const char* kHeader = "split\tattribute\tobject\timage";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << kHeader << '\n';
  for (const auto& r : manifest.records) {
    out << to_string(r.split) << '\t' << r.attribute << '\t' << r.object << '\t' << r.image << '\n';
  }
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

LabelSpace derive_label_space(const DatasetManifest& manifest) {
  std::set<std::string> attrs, objs;
  for (const auto& r : manifest.records) {
    attrs.insert(r.attribute);
    objs.insert(r.object);
  }
  LabelSpace ls;
  ls.attributes.assign(attrs.begin(), attrs.end());
  ls.objects.assign(objs.begin(), objs.end());
  std::map<std::pair<std::size_t, std::size_t>, std::uint8_t> presence;
  for (const auto& r : manifest.records) {
    const auto key = std::make_pair(ls.attr_index(r.attribute), ls.obj_index(r.object));
    const std::uint8_t bit = r.split == Split::train ? 1 : r.split == Split::val ? 2 : 4;
    presence[key] |= bit;
  }
  for (const auto& [key, bits] : presence) {
    ls.compositions.push_back({key.first, key.second});
    ls.seen.push_back((bits & 1) != 0);
    ls.split_presence.push_back(bits);
  }
  ls.validate();
  return ls;
}

std::pair<LabelSpace, DatasetManifest> load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  DatasetManifest manifest;
  manifest.root = path.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw ValidationError("manifest " + path.string() + ": expected header '" + std::string(kHeader) + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4 || fields[1].empty() || fields[2].empty() || fields[3].empty()) {
      throw ValidationError("manifest line " + std::to_string(line_no) + " is malformed");
    }
    ManifestRecord r;
    try {
      r.split = parse_split(fields[0]);
    } catch (const ValidationError&) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": unknown split '" + fields[0] + "'");
    }
    r.attribute = fields[1];
    r.object = fields[2];
    r.image = fields[3];
    if (!fs::exists(manifest.root / r.image)) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": missing image file " +
                            (manifest.root / r.image).string());
    }
    manifest.records.push_back(std::move(r));
  }
  LabelSpace ls = derive_label_space(manifest);
  return {std::move(ls), std::move(manifest)};
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, const LabelSpace& labels, Split split) {
  std::vector<Sample> out;
  Shape expected;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    Sample s;
    s.image = read_png(manifest.root / r.image);
    if (expected.empty()) expected = s.image.shape;
    if (s.image.shape != expected) {
      throw ValidationError("image " + r.image + " has shape " + shape_str(s.image.shape) + ", expected " +
                            shape_str(expected));
    }
    s.attr = labels.attr_index(r.attribute);
    s.obj = labels.obj_index(r.object);
    const auto comp = labels.find(s.attr, s.obj);
    if (!comp) throw ValidationError("pair " + r.attribute + " " + r.object + " missing from the composition set");
    s.comp = *comp;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic renderer

namespace {

struct Rgb {
  double r, g, b;
};

const std::map<std::string, Rgb>& palette() {
  static const std::map<std::string, Rgb> colors{
      {"red", {0.90, 0.12, 0.12}},    {"blue", {0.15, 0.30, 0.95}},   {"green", {0.12, 0.72, 0.20}},
      {"yellow", {0.95, 0.88, 0.12}}, {"cyan", {0.10, 0.85, 0.90}},   {"magenta", {0.88, 0.15, 0.85}},
      {"orange", {0.98, 0.55, 0.08}}, {"white", {0.95, 0.95, 0.95}},  {"purple", {0.50, 0.18, 0.80}},
      {"pink", {0.98, 0.60, 0.75}},   {"brown", {0.55, 0.32, 0.12}},  {"teal", {0.00, 0.50, 0.50}},
  };
  return colors;
}

enum class Texture { solid, striped, checkered };

struct FillStyle {
  Rgb color;
  Texture texture;
};

FillStyle parse_style(const std::string& name) {
  const auto us = name.find('_');
  const std::string color = name.substr(0, us);
  Texture t = Texture::solid;
  if (us != std::string::npos) t = name.substr(us + 1) == "striped" ? Texture::striped : Texture::checkered;
  return {palette().at(color), t};
}

using Point = std::array<double, 2>;

bool in_polygon(double u, double v, const std::vector<Point>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > v) != (b[1] > v) && u < (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
  }
  return inside;
}

std::vector<Point> regular_polygon(std::size_t n, double radius, double phase) {
  std::vector<Point> p;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = phase + 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n);
    p.push_back({radius * std::cos(t), radius * std::sin(t)});
  }
  return p;
}

std::vector<Point> star_polygon() {
  std::vector<Point> p;
  for (std::size_t i = 0; i < 10; ++i) {
    const double r = i % 2 == 0 ? 1.0 : 0.42;
    const double t = M_PI / 2 + M_PI * static_cast<double>(i) / 5.0;
    p.push_back({r * std::cos(t), r * std::sin(t)});
  }
  return p;
}

// (u, v): shape-local coordinates, v pointing up, unit radius.
bool inside_shape(std::size_t shape, double u, double v) {
  static const std::vector<Point> triangle{{0.0, 0.95}, {-0.95, -0.75}, {0.95, -0.75}};
  static const std::vector<Point> star = star_polygon();
  static const std::vector<Point> hexagon = regular_polygon(6, 0.95, 0.0);
  static const std::vector<Point> arrow{{-0.95, 0.25}, {0.2, 0.25}, {0.2, 0.65}, {0.95, 0.0},
                                        {0.2, -0.65},  {0.2, -0.25}, {-0.95, -0.25}};
  const double r2 = u * u + v * v;
  const double box = std::max(std::abs(u), std::abs(v));
  switch (shape) {
    case 0: return r2 <= 1.0;                                                          // circle
    case 1: return box <= 0.8;                                                         // square
    case 2: return in_polygon(u, v, triangle);                                         // triangle
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4: return in_polygon(u, v, star);                                             // star
    case 5: return r2 <= 1.0 && r2 >= 0.55 * 0.55;                                     // ring
    case 6: return std::abs(u) + std::abs(v) <= 1.0;                                   // diamond
    case 7: return in_polygon(u, v, hexagon);                                          // hexagon
    case 8: return std::abs(u) <= 1.0 && std::abs(v) <= 0.35;                          // bar
    case 9: return r2 <= 1.0 && (u - 0.45) * (u - 0.45) + (v - 0.2) * (v - 0.2) > 0.64;  // crescent
    case 10: return in_polygon(u, v, arrow);                                           // arrow
    case 11: return box <= 0.9 && box >= 0.55;                                         // frame
    default: break;
  }
  throw ConfigError("unknown shape index " + std::to_string(shape));
}

}  // namespace

const std::vector<std::string>& synthetic_attribute_names() {
  static const std::vector<std::string> names{
      "red",    "blue_striped", "green",  "yellow_checkered", "cyan",  "magenta_striped", "orange", "white_checkered",
      "purple", "pink_striped", "brown",  "teal_checkered",   "blue",  "red_striped",     "yellow", "green_checkered",
      "magenta", "cyan_striped", "white", "orange_checkered", "pink",  "purple_striped",  "teal",   "brown_checkered"};
  return names;
}

const std::vector<std::string>& synthetic_object_names() {
  static const std::vector<std::string> names{"circle", "square",  "triangle", "cross", "star",  "ring",
                                              "diamond", "hexagon", "bar",      "crescent", "arrow", "frame"};
  return names;
}

Tensor render_synthetic(std::size_t attr, std::size_t obj, std::size_t size, std::uint64_t seed) {
  const FillStyle style = parse_style(synthetic_attribute_names().at(attr));
  Rng rng(seed);
  const double n = static_cast<double>(size);
  const double cx = rng.uniform(0.38, 0.62) * n;
  const double cy = rng.uniform(0.38, 0.62) * n;
  const double radius = rng.uniform(0.24, 0.34) * n;
  const double background = rng.uniform(0.08, 0.30);
  const double period = std::max(4.0, n / 10.0);
  const double phase = rng.uniform(0.0, period);
  const Rgb dark{style.color.r * 0.25, style.color.g * 0.25, style.color.b * 0.25};

  Tensor img(Shape{3, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      // 2x2 supersampled coverage.
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy;
          cover += inside_shape(obj, (px - cx) / radius, (cy - py) / radius) ? 0.25 : 0.0;
        }
      }
      Rgb fill = style.color;
      const double fy = (static_cast<double>(y) + phase) / period;
      const double fx = (static_cast<double>(x) + phase) / period;
      if (style.texture == Texture::striped && std::fmod(fy, 1.0) >= 0.5) fill = dark;
      if (style.texture == Texture::checkered &&
          (static_cast<long>(std::floor(fx)) + static_cast<long>(std::floor(fy))) % 2 != 0) {
        fill = dark;
      }
      const std::array<double, 3> rgb{fill.r, fill.g, fill.b};
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = cover * rgb[c] + (1.0 - cover) * background + 0.03 * rng.normal();
        img.data[(c * size + y) * size + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

std::vector<bool> choose_seen_pairs(std::size_t n_attrs, std::size_t n_objs, double seen_fraction,
                                    std::uint64_t seed) {
  if (n_attrs < 2 || n_objs < 2) throw ConfigError("synthetic data needs at least 2 attributes and 2 objects");
  if (!(seen_fraction > 0.0 && seen_fraction <= 1.0)) throw ConfigError("seen_fraction must lie in (0, 1]");
  const std::size_t total = n_attrs * n_objs;
  const auto n_seen = static_cast<std::size_t>(std::llround(seen_fraction * static_cast<double>(total)));
  if (n_seen >= total) {
    throw ConfigError("seen_fraction " + std::to_string(seen_fraction) + " leaves no unseen pair out of " +
                      std::to_string(total));
  }
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng rng(mix_seed({seed, 0x5ee7}));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    rng.shuffle(order.begin(), order.end());
    std::vector<bool> seen(total, false);
    std::vector<bool> attr_cover(n_attrs, false), obj_cover(n_objs, false);
    for (std::size_t i = 0; i < n_seen; ++i) {
      seen[order[i]] = true;
      attr_cover[order[i] / n_objs] = true;
      obj_cover[order[i] % n_objs] = true;
    }
    const bool ok = std::all_of(attr_cover.begin(), attr_cover.end(), [](bool b) { return b; }) &&
                    std::all_of(obj_cover.begin(), obj_cover.end(), [](bool b) { return b; });
    if (ok) return seen;
  }
  throw ConfigError("cannot cover all " + std::to_string(n_attrs) + " attributes and " + std::to_string(n_objs) +
                    " objects with " + std::to_string(n_seen) + " seen pairs (seen_fraction too small)");
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.n_attrs > synthetic_attribute_names().size()) {
    throw ConfigError("at most " + std::to_string(synthetic_attribute_names().size()) + " synthetic attributes");
  }
  if (spec.n_objs > synthetic_object_names().size()) {
    throw ConfigError("at most " + std::to_string(synthetic_object_names().size()) + " synthetic objects");
  }
  if (spec.image_size < 32) throw ConfigError("image_size must be at least 32");
  if (spec.images_per_pair < 1) throw ConfigError("images_per_pair must be positive");
  const std::vector<bool> seen = choose_seen_pairs(spec.n_attrs, spec.n_objs, spec.seen_fraction, spec.seed);

  const std::size_t ipp = spec.images_per_pair;
  const std::size_t quarter = (ipp + 3) / 4;
  const std::size_t half = (ipp + 1) / 2;
  auto count = [&](bool is_seen, Split split) -> std::size_t {
    switch (split) {
      case Split::train: return is_seen ? ipp : 0;
      case Split::val: return quarter;
      case Split::test: return is_seen ? quarter : half;
    }
    return 0;
  };

  DatasetManifest manifest;
  manifest.root = out_dir;
  for (Split split : {Split::train, Split::val, Split::test}) {
    fs::create_directories(out_dir / "images" / to_string(split));
    for (std::size_t p = 0; p < seen.size(); ++p) {
      const std::size_t a = p / spec.n_objs, o = p % spec.n_objs;
      const std::string& an = synthetic_attribute_names()[a];
      const std::string& on = synthetic_object_names()[o];
      for (std::size_t k = 0; k < count(seen[p], split); ++k) {
        const std::string rel = "images/" + to_string(split) + "/" + an + "__" + on + "__" + std::to_string(k) + ".png";
        const std::uint64_t seed = mix_seed({spec.seed, p, static_cast<std::uint64_t>(split), k});
        write_png(out_dir / rel, render_synthetic(a, o, spec.image_size, seed));
        manifest.records.push_back({split, an, on, rel});
      }
    }
  }
  save_manifest(manifest, out_dir / kManifestName);
  return manifest;
}

// ---------------------------------------------------------------------------
// Embeddings

std::vector<double> seeded_embedding(const std::string& name, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw ConfigError("embedding dim must be at least 2");
  Rng rng(mix_seed({stable_hash(name), seed}));
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

EmbeddingTable seeded_embeddings(const LabelSpace& labels, std::size_t dim, std::uint64_t seed) {
  EmbeddingTable t;
  t.dim = dim;
  for (const auto& a : labels.attributes) t.attributes.push_back(seeded_embedding(a, dim, seed));
  for (const auto& o : labels.objects) t.objects.push_back(seeded_embedding(o, dim, seed));
  return t;
}

EmbeddingTable file_embeddings(const LabelSpace& labels, std::size_t dim, const fs::path& path) {
  if (dim < 2) throw ConfigError("embedding dim must be at least 2");
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open embedding file " + path.string());
  std::map<std::string, std::vector<double>> table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;
    std::vector<double> v;
    double x;
    while (ls >> x) v.push_back(x);
    if (!ls.eof()) throw ValidationError("embedding line " + std::to_string(line_no) + " has a non-numeric value");
    if (v.size() != dim) {
      throw ValidationError("embedding '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                            std::to_string(dim));
    }
    table[name] = std::move(v);
  }
  std::vector<std::string> missing;
  EmbeddingTable t;
  t.dim = dim;
  auto fetch = [&](const std::string& name, std::vector<std::vector<double>>& into) {
    auto it = table.find(name);
    if (it == table.end()) {
      missing.push_back(name);
      into.emplace_back(dim, 0.0);
    } else {
      into.push_back(it->second);
    }
  };
  for (const auto& a : labels.attributes) fetch(a, t.attributes);
  for (const auto& o : labels.objects) fetch(o, t.objects);
  if (!missing.empty()) {
    std::string msg = "embedding file " + path.string() + " is missing:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }
  return t;
}

}  // namespace foma
