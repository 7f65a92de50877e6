#pragma once

#include <string>

#include "tora2/tensor.hpp"

namespace tora2 {

// 8-bit RGB PNG of an (H,W,3) image; values are clamped to [0,1] and rounded
// to the nearest of 256 levels. Throws ValueError when the file cannot be
// written or the tensor is not an image.
void write_png(const std::string& path, const Tensor& image);

// (H,W,3) image in [0,1] from any libpng-readable file (palette, gray, and
// alpha inputs are expanded to RGB). Throws ValueError on unreadable files.
Tensor read_png(const std::string& path);

}  // namespace tora2
