#pragma once

#include <filesystem>

#include "foma/tensor.hpp"

namespace foma {

// Images are [3, H, W] tensors with values in [0, 1].
void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);

}  // namespace foma
