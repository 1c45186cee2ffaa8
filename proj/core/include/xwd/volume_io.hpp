#pragma once

#include <filesystem>

#include "xwd/tensor.hpp"

namespace xwd {

// `.vol` layout: "XWD1", then T, H, W as little-endian uint32, then T*H*W
// little-endian float32 values in C-order.
void write_vol(const std::filesystem::path& path, const Tensor& volume);
Tensor read_vol(const std::filesystem::path& path);

}  // namespace xwd
