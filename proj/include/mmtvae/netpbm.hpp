#pragma once

#include <string>

#include "mmtvae/tensor.hpp"

namespace mmtvae {

// Binary netpbm writers, maxval 255, one byte per channel sample encoded as
// round(255 * clamp(x, 0, 1)). Writes go through a temp file + rename.

// image must be (3, H, W); emits P6.
void write_ppm(const std::string& path, const Tensor& image);

// gray must be (H, W) or (1, H, W); emits P5.
void write_pgm(const std::string& path, const Tensor& gray);

}  // namespace mmtvae
