#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "crossing/tensor.hpp"

namespace crossing::fpv {

/// Dense displacement field, (H,W,2) holding (u,v) in pixels per frame.
/// A pixel at (x,y) in the first frame appears at (x+u, y+v) in the second.
struct FlowField {
  Tensor uv;

  std::size_t height() const { return uv.extent(0); }
  std::size_t width() const { return uv.extent(1); }
  double u(std::size_t row, std::size_t col) const { return uv.data()[(row * width() + col) * 2]; }
  double v(std::size_t row, std::size_t col) const { return uv.data()[(row * width() + col) * 2 + 1]; }
};

struct FlowParams {
  std::size_t levels = 3;
  std::size_t block = 7;          // odd matching window
  std::size_t search_radius = 4;  // bound on |u| and |v| at full resolution
};

/// Coarse-to-fine block matching. Each pyramid level minimizes the windowed
/// sum of squared differences within a small window around the upsampled
/// coarser estimate, then two raster sweeps (forward and backward) let each
/// pixel adopt a neighbour's displacement when it matches better. The
/// winning integer displacement gets a parabolic sub-pixel correction of at
/// most half a pixel per axis.
/// Inputs are (H,W) grayscale images of equal size.
FlowField compute_flow(const Tensor& frame_a, const Tensor& frame_b, const FlowParams& params = {});

/// HSV colour coding: hue from atan2(v,u) on a six-segment wheel (0 deg =
/// +u is red, 120 deg green, 240 deg blue), saturation = magnitude / max
/// magnitude of the field, value 1. Zero motion is white. Returns (H,W,3).
Tensor flow_to_color(const FlowField& flow);

// Raw export: "FLO1", u32 H, u32 W, u32 reserved (0), then little-endian f32
// (u,v) pairs in row-major order.
std::string encode_flo(const FlowField& flow);
FlowField decode_flo(std::string_view bytes);
void write_flo(const std::filesystem::path& path, const FlowField& flow);

}  // namespace crossing::fpv
