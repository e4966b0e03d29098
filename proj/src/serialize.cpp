#include "foma/serialize.hpp"

#include <fstream>

namespace foma {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw SchemaError("truncated archive while reading " + what);
  return v;
}

std::string get_string(std::istream& in, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw SchemaError("truncated archive while reading " + what);
  return s;
}

}  // namespace

const Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw SchemaError("archive has no tensor named '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  if (archive.magic.size() != 8) throw std::logic_error("archive magic must be 8 bytes");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(archive.magic.data(), 8);
  put<std::uint32_t>(out, archive.version);
  const std::string meta = archive.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint64_t>(out, archive.tensors.size());
  for (const auto& [name, t] : archive.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path, const std::string& magic, std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TensorArchive a;
  a.magic = get_string(in, 8, "magic");
  if (a.magic != magic) throw SchemaError(path.string() + ": expected a '" + magic + "' archive, found '" + a.magic + "'");
  a.version = get<std::uint32_t>(in, "version");
  if (a.version != version) {
    throw SchemaError(path.string() + ": schema version " + std::to_string(a.version) + " is not supported (expected " +
                      std::to_string(version) + ")");
  }
  const auto meta_len = get<std::uint64_t>(in, "metadata length");
  a.meta = nlohmann::json::parse(get_string(in, meta_len, "metadata"));
  const auto count = get<std::uint64_t>(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, "name length");
    std::string name = get_string(in, name_len, "tensor name");
    const auto rank = get<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, "dimension");
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw SchemaError("truncated archive while reading tensor " + name);
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace foma
