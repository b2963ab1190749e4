#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "crossing/tensor.hpp"

namespace crossing::image {

// Images are tensors with values in [0,1]: (H,W) grayscale or (H,W,3) colour.

Tensor mirror_horizontal(const Tensor& img);

// Luma with fixed weights 0.299, 0.587, 0.114.
Tensor to_grayscale(const Tensor& rgb);

Tensor resize_bilinear(const Tensor& img, std::size_t height, std::size_t width);

// Binary (P5/P6) and ASCII (P2/P3) netpbm, 8- or 16-bit.
Tensor decode_pnm(std::string_view bytes);
Tensor read_pnm(const std::filesystem::path& path);

// P5 for (H,W), P6 for (H,W,3); values clamped to [0,1] and rounded to 8 bits.
std::string encode_pnm(const Tensor& img);
void write_pnm(const std::filesystem::path& path, const Tensor& img);

}  // namespace crossing::image
