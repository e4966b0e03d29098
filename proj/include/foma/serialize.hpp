#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "foma/tensor.hpp"

namespace foma {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary container: 8-byte magic, u32 schema version, JSON metadata, then
// named little-endian double tensors in insertion order.
struct TensorArchive {
  std::string magic;  // exactly 8 characters
  std::uint32_t version = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path, const std::string& magic, std::uint32_t version);

}  // namespace foma
