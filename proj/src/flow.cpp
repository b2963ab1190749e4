#include "crossing/flow.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "crossing/errors.hpp"
#include "crossing/io_util.hpp"

namespace crossing::fpv {

namespace {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> px;

  double clamped(long y, long x) const {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return px[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  }
};

Plane downsample(const Plane& src) {
  Plane out;
  out.h = src.h / 2;
  out.w = src.w / 2;
  out.px.resize(out.h * out.w);
  for (std::size_t y = 0; y < out.h; ++y)
    for (std::size_t x = 0; x < out.w; ++x) {
      const std::size_t a = (2 * y) * src.w + 2 * x;
      out.px[y * out.w + x] = 0.25 * (src.px[a] + src.px[a + 1] + src.px[a + src.w] + src.px[a + src.w + 1]);
    }
  return out;
}

// SSD over a block window for every pixel and every displacement in
// [-radius, radius]^2, laid out as cost[(d_index * h + y) * w + x].
std::vector<double> cost_volume(const Plane& a, const Plane& b, long radius, long half) {
  const std::size_t h = a.h, w = a.w;
  const std::size_t side = static_cast<std::size_t>(2 * radius + 1);
  std::vector<double> volume(side * side * h * w);
  std::vector<double> integral((h + 1) * (w + 1));
  for (long dy = -radius; dy <= radius; ++dy) {
    for (long dx = -radius; dx <= radius; ++dx) {
      std::fill(integral.begin(), integral.end(), 0.0);
      for (std::size_t y = 0; y < h; ++y) {
        double row = 0.0;
        for (std::size_t x = 0; x < w; ++x) {
          const double diff = a.px[y * w + x] - b.clamped(static_cast<long>(y) + dy, static_cast<long>(x) + dx);
          row += diff * diff;
          integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
      }
      const std::size_t d = static_cast<std::size_t>((dy + radius) * static_cast<long>(side) + (dx + radius));
      double* cost = volume.data() + d * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t y0 = static_cast<std::size_t>(std::max<long>(0, static_cast<long>(y) - half));
        const std::size_t y1 = std::min(h, y + static_cast<std::size_t>(half) + 1);
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t x0 = static_cast<std::size_t>(std::max<long>(0, static_cast<long>(x) - half));
          const std::size_t x1 = std::min(w, x + static_cast<std::size_t>(half) + 1);
          cost[y * w + x] = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] -
                            integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
        }
      }
    }
  }
  return volume;
}

double parabola_offset(double minus, double center, double plus) {
  const double denom = minus - 2.0 * center + plus;
  if (!(denom > 0.0)) return 0.0;
  return std::clamp(0.5 * (minus - plus) / denom, -0.5, 0.5);
}

Plane to_plane(const Tensor& t) {
  Plane p;
  p.h = t.extent(0);
  p.w = t.extent(1);
  p.px.assign(t.data().begin(), t.data().end());
  return p;
}

}  // namespace

FlowField compute_flow(const Tensor& frame_a, const Tensor& frame_b, const FlowParams& params) {
  if (frame_a.rank() != 2 || frame_b.rank() != 2) {
    throw ShapeError("flow: expected grayscale (H,W) frames, got " + shape_string(frame_a.shape()) + " and " +
                     shape_string(frame_b.shape()));
  }
  if (frame_a.shape() != frame_b.shape()) {
    throw ShapeError("flow: frame sizes differ: " + shape_string(frame_a.shape()) + " vs " +
                     shape_string(frame_b.shape()));
  }
  if (params.block % 2 == 0 || params.levels == 0 || params.search_radius == 0) {
    throw ConfigError("flow: block must be odd, levels and search_radius positive");
  }
  const long half = static_cast<long>(params.block / 2);
  const long radius = static_cast<long>(params.search_radius);

  std::vector<Plane> pyramid{to_plane(frame_a)};
  std::vector<Plane> pyramid_b{to_plane(frame_b)};
  while (pyramid.size() < params.levels && pyramid.back().h / 2 >= params.block &&
         pyramid.back().w / 2 >= params.block) {
    pyramid.push_back(downsample(pyramid.back()));
    pyramid_b.push_back(downsample(pyramid_b.back()));
  }

  std::vector<double> flow;  // (u,v) per pixel at the current level
  std::size_t flow_h = 0, flow_w = 0;
  for (std::size_t level = pyramid.size(); level-- > 0;) {
    const Plane& a = pyramid[level];
    const Plane& b = pyramid_b[level];
    const bool coarsest = level + 1 == pyramid.size();
    const long scale = 1L << level;
    const long level_radius = std::max<long>(1, (radius + scale - 1) / scale);
    const long window = coarsest ? level_radius : 1;
    const long side = 2 * level_radius + 1;
    const std::vector<double> volume = cost_volume(a, b, level_radius, half);
    auto cost_at = [&](long dy, long dx, std::size_t y, std::size_t x) {
      const std::size_t d = static_cast<std::size_t>((dy + level_radius) * side + (dx + level_radius));
      return volume[(d * a.h + y) * a.w + x];
    };

    const std::size_t n = a.h * a.w;
    std::vector<long> best_dx(n), best_dy(n);
    std::vector<double> best(n);
    for (std::size_t y = 0; y < a.h; ++y) {
      for (std::size_t x = 0; x < a.w; ++x) {
        long py = 0, px = 0;
        if (!coarsest) {
          const std::size_t sy = std::min(flow_h - 1, y / 2), sx = std::min(flow_w - 1, x / 2);
          px = std::lround(2.0 * flow[(sy * flow_w + sx) * 2]);
          py = std::lround(2.0 * flow[(sy * flow_w + sx) * 2 + 1]);
          px = std::clamp(px, -level_radius, level_radius);
          py = std::clamp(py, -level_radius, level_radius);
        }
        const std::size_t i = y * a.w + x;
        best_dx[i] = px;
        best_dy[i] = py;
        best[i] = cost_at(py, px, y, x);
        // Candidates ordered by distance from the prediction; ties keep the closer one.
        for (long r = 1; r <= window; ++r) {
          for (long dy = py - r; dy <= py + r; ++dy) {
            for (long dx = px - r; dx <= px + r; ++dx) {
              if (std::max(std::abs(dy - py), std::abs(dx - px)) != r) continue;
              if (std::abs(dy) > level_radius || std::abs(dx) > level_radius) continue;
              const double c = cost_at(dy, dx, y, x);
              if (c < best[i]) {
                best[i] = c;
                best_dx[i] = dx;
                best_dy[i] = dy;
              }
            }
          }
        }
      }
    }

    // Spatial propagation: a forward raster sweep offers each pixel the
    // displacements of its left and upper neighbours, a backward sweep those
    // of its right and lower ones. Repairs regions where the coarse estimate
    // was pulled off by the image border.
    auto offer = [&](std::size_t i, std::size_t j, std::size_t y, std::size_t x) {
      const double c = cost_at(best_dy[j], best_dx[j], y, x);
      if (c < best[i]) {
        best[i] = c;
        best_dx[i] = best_dx[j];
        best_dy[i] = best_dy[j];
      }
    };
    for (std::size_t y = 0; y < a.h; ++y)
      for (std::size_t x = 0; x < a.w; ++x) {
        const std::size_t i = y * a.w + x;
        if (x > 0) offer(i, i - 1, y, x);
        if (y > 0) offer(i, i - a.w, y, x);
      }
    for (std::size_t y = a.h; y-- > 0;)
      for (std::size_t x = a.w; x-- > 0;) {
        const std::size_t i = y * a.w + x;
        if (x + 1 < a.w) offer(i, i + 1, y, x);
        if (y + 1 < a.h) offer(i, i + a.w, y, x);
      }

    std::vector<double> next(n * 2);
    for (std::size_t y = 0; y < a.h; ++y) {
      for (std::size_t x = 0; x < a.w; ++x) {
        const std::size_t i = y * a.w + x;
        const long bx = best_dx[i], by = best_dy[i];
        double u = static_cast<double>(bx), v = static_cast<double>(by);
        if (best[i] > 0.0) {
          if (std::abs(bx) < level_radius) {
            u += parabola_offset(cost_at(by, bx - 1, y, x), best[i], cost_at(by, bx + 1, y, x));
          }
          if (std::abs(by) < level_radius) {
            v += parabola_offset(cost_at(by - 1, bx, y, x), best[i], cost_at(by + 1, bx, y, x));
          }
        }
        next[i * 2] = u;
        next[i * 2 + 1] = v;
      }
    }
    flow = std::move(next);
    flow_h = a.h;
    flow_w = a.w;
  }

  const double bound = static_cast<double>(radius);
  for (auto& f : flow) f = std::clamp(f, -bound, bound);
  return FlowField{Tensor({flow_h, flow_w, 2}, std::move(flow))};
}

Tensor flow_to_color(const FlowField& flow) {
  const std::size_t h = flow.height(), w = flow.width();
  const auto uv = flow.uv.data();
  double max_mag = 0.0;
  for (std::size_t i = 0; i < h * w; ++i) max_mag = std::max(max_mag, std::hypot(uv[2 * i], uv[2 * i + 1]));
  std::vector<double> rgb(h * w * 3, 1.0);
  if (max_mag <= 0.0) return Tensor({h, w, 3}, std::move(rgb));
  for (std::size_t i = 0; i < h * w; ++i) {
    const double u = uv[2 * i], v = uv[2 * i + 1];
    const double sat = std::hypot(u, v) / max_mag;
    double hue = std::atan2(v, u) * 180.0 / std::numbers::pi;
    if (hue < 0.0) hue += 360.0;
    const double sector = hue / 60.0;
    const int segment = static_cast<int>(std::floor(sector)) % 6;
    const double frac = sector - std::floor(sector);
    // value = 1: chroma = sat, minimum component = 1 - sat
    const double p = 1.0 - sat, q = 1.0 - sat * frac, t = 1.0 - sat * (1.0 - frac);
    double r = 1.0, g = 1.0, b = 1.0;
    switch (segment) {
      case 0: r = 1.0; g = t; b = p; break;
      case 1: r = q; g = 1.0; b = p; break;
      case 2: r = p; g = 1.0; b = t; break;
      case 3: r = p; g = q; b = 1.0; break;
      case 4: r = t; g = p; b = 1.0; break;
      default: r = 1.0; g = p; b = q; break;
    }
    rgb[3 * i] = r;
    rgb[3 * i + 1] = g;
    rgb[3 * i + 2] = b;
  }
  return Tensor({h, w, 3}, std::move(rgb));
}

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t pos) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, bytes.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

}  // namespace

std::string encode_flo(const FlowField& flow) {
  std::string out = "FLO1";
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(flow.height()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(flow.width()));
  put_le<std::uint32_t>(out, 0);
  for (double v : flow.uv.data()) put_le<float>(out, static_cast<float>(v));
  return out;
}

FlowField decode_flo(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "FLO1") throw DataError("flo: missing FLO1 header");
  const auto h = get_le<std::uint32_t>(bytes, 4);
  const auto w = get_le<std::uint32_t>(bytes, 8);
  const std::size_t n = static_cast<std::size_t>(h) * w * 2;
  if (h == 0 || w == 0 || bytes.size() != 16 + n * 4) throw DataError("flo: size does not match header");
  std::vector<double> uv(n);
  for (std::size_t i = 0; i < n; ++i) uv[i] = get_le<float>(bytes, 16 + 4 * i);
  return FlowField{Tensor({h, w, 2}, std::move(uv))};
}

void write_flo(const std::filesystem::path& path, const FlowField& flow) {
  write_file_atomic(path, encode_flo(flow));
}

}  // namespace crossing::fpv
