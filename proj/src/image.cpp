#include "crossing/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "crossing/errors.hpp"
#include "crossing/io_util.hpp"

namespace crossing::image {

namespace {

void require_image(const Tensor& img, const char* who) {
  if (img.rank() != 2 && img.rank() != 3) {
    throw ShapeError(std::string(who) + ": expected (H,W) or (H,W,C), got " + shape_string(img.shape()));
  }
}

std::size_t channels_of(const Tensor& img) { return img.rank() == 3 ? img.extent(2) : 1; }

class PnmReader {
 public:
  explicit PnmReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t next_uint() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      throw DataError("pnm: malformed header");
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      ++pos_;
    }
    return v;
  }

  void skip_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw DataError("pnm: missing separator before raster");
    }
    ++pos_;
  }

  unsigned char byte() {
    if (pos_ >= bytes_.size()) throw DataError("pnm: truncated raster");
    return static_cast<unsigned char>(bytes_[pos_++]);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Tensor mirror_horizontal(const Tensor& img) {
  require_image(img, "mirror");
  const std::size_t h = img.extent(0), w = img.extent(1), c = channels_of(img);
  const auto src = img.data();
  std::vector<double> out(src.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] = src[(y * w + (w - 1 - x)) * c + ch];
  return Tensor(img.shape(), std::move(out));
}

Tensor to_grayscale(const Tensor& rgb) {
  if (rgb.rank() == 2) return rgb.clone();
  if (rgb.rank() != 3 || rgb.extent(2) != 3) {
    throw ShapeError("grayscale: expected (H,W,3), got " + shape_string(rgb.shape()));
  }
  const std::size_t n = rgb.extent(0) * rgb.extent(1);
  const auto src = rgb.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
  return Tensor({rgb.extent(0), rgb.extent(1)}, std::move(out));
}

Tensor resize_bilinear(const Tensor& img, std::size_t height, std::size_t width) {
  require_image(img, "resize");
  if (height == 0 || width == 0) throw ShapeError("resize: target extents must be positive");
  const std::size_t h = img.extent(0), w = img.extent(1), c = channels_of(img);
  if (h == height && w == width) return img.clone();
  const auto src = img.data();
  std::vector<double> out(height * width * c);
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(h - 1, y0 + 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(w - 1, x0 + 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = src[(y0 * w + x0) * c + ch], b = src[(y0 * w + x1) * c + ch];
        const double p = src[(y1 * w + x0) * c + ch], q = src[(y1 * w + x1) * c + ch];
        out[(y * width + x) * c + ch] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * p + tx * q);
      }
    }
  }
  Shape shape = img.rank() == 3 ? Shape{height, width, c} : Shape{height, width};
  return Tensor(std::move(shape), std::move(out));
}

Tensor decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw DataError("pnm: bad magic");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    throw DataError(std::string("pnm: unsupported format P") + kind);
  }
  const bool color = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';
  PnmReader reader(bytes);
  const std::size_t w = reader.next_uint();
  const std::size_t h = reader.next_uint();
  const std::size_t maxval = reader.next_uint();
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError("pnm: bad dimensions or maxval");
  const std::size_t c = color ? 3 : 1;
  std::vector<double> values(w * h * c);
  if (binary) {
    reader.skip_single_space();
    for (auto& v : values) {
      std::size_t raw = reader.byte();
      if (maxval > 255) raw = (raw << 8) | reader.byte();
      v = static_cast<double>(raw) / static_cast<double>(maxval);
    }
  } else {
    for (auto& v : values) v = static_cast<double>(reader.next_uint()) / static_cast<double>(maxval);
  }
  Shape shape = color ? Shape{h, w, 3} : Shape{h, w};
  return Tensor(std::move(shape), std::move(values));
}

Tensor read_pnm(const std::filesystem::path& path) {
  try {
    return decode_pnm(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string encode_pnm(const Tensor& img) {
  require_image(img, "pnm");
  const std::size_t c = channels_of(img);
  if (c != 1 && c != 3) throw ShapeError("pnm: need 1 or 3 channels, got " + shape_string(img.shape()));
  std::string out = (c == 3 ? "P6\n" : "P5\n") + std::to_string(img.extent(1)) + " " +
                    std::to_string(img.extent(0)) + "\n255\n";
  for (double v : img.data()) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  return out;
}

void write_pnm(const std::filesystem::path& path, const Tensor& img) { write_file_atomic(path, encode_pnm(img)); }

}  // namespace crossing::image
