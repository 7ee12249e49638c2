#pragma once

#include <string>

#include "xmreg/tensor.hpp"

namespace xmreg::io {

/// Loads a binary or ascii PGM (P5/P2, 8- or 16-bit) into a [1,H,W] tensor
/// scaled to [0,1]. Throws MissingFile / Error on problems.
Tensor load_pgm(const std::string& path);

/// Writes a [1,H,W] (or [H,W]) tensor as 16-bit binary PGM. Values are
/// clamped to [lo,hi] and scaled to the full range; lossless enough for
/// inspection exports.
void save_pgm(const std::string& path, const Tensor& img, double lo = 0.0, double hi = 1.0);

} // namespace xmreg::io
