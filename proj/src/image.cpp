#include "xrt/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

#include "xrt/random.hpp"

namespace xrt {

namespace {

[[noreturn]] void decode_error(const std::string& what) { throw Error(Errc::decode, what); }

class PnmHeader {
 public:
  explicit PnmHeader(std::span<const std::uint8_t> b) : b_(b) {}

  Index next_int() {
    skip_space_and_comments();
    Index v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + (b_[pos_++] - '0');
      if (++digits > 9) decode_error("PNM header value too large");
    }
    if (digits == 0) decode_error("malformed PNM header");
    return v;
  }

  std::size_t data_offset() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) decode_error("malformed PNM header terminator");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 2;
};

ImageGrid decode_pnm(std::span<const std::uint8_t> bytes, Index channels) {
  PnmHeader header(bytes);
  const Index width = header.next_int();
  const Index height = header.next_int();
  const Index maxval = header.next_int();
  const std::size_t offset = header.data_offset();
  if (width < 1 || height < 1) decode_error("PNM image has zero extent");
  if (maxval < 1 || maxval > 255) decode_error("PNM maxval " + std::to_string(maxval) + " unsupported (8-bit only)");
  const auto count = static_cast<std::size_t>(width * height * channels);
  if (bytes.size() - offset < count) decode_error("PNM pixel data truncated");

  ImageGrid grid(height, width, channels);
  for (std::size_t i = 0; i < count; ++i) {
    const Index v = bytes[offset + i];
    if (v > maxval) decode_error("PNM sample exceeds maxval");
    grid.pixels[i] = maxval == 255 ? static_cast<float>(v) : std::round(static_cast<float>(v) * 255.0f / static_cast<float>(maxval));
  }
  return grid;
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

constexpr std::array<std::uint8_t, 8> kPngSignature{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

ImageGrid decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(kPngSignature.begin(), kPngSignature.end(), bytes.begin())) {
    decode_error("missing PNG signature");
  }
  std::size_t pos = 8;
  Index width = 0, height = 0;
  int color_type = -1;
  std::vector<std::uint8_t> idat, palette;
  bool seen_end = false;
  while (!seen_end) {
    if (bytes.size() - pos < 12) decode_error("PNG chunk truncated");
    const std::uint32_t length = be32(bytes, pos);
    if (length > bytes.size() - pos - 12) decode_error("PNG chunk truncated");
    const auto type_and_data = bytes.subspan(pos + 4, length + 4);
    const std::string type(type_and_data.begin(), type_and_data.begin() + 4);
    const auto data = type_and_data.subspan(4);
    const std::uint32_t stored_crc = be32(bytes, pos + 8 + length);
    if (stored_crc != static_cast<std::uint32_t>(::crc32(0, type_and_data.data(), static_cast<uInt>(type_and_data.size())))) {
      decode_error("PNG chunk '" + type + "' fails its CRC");
    }
    pos += 12 + length;

    if (type == "IHDR") {
      if (length != 13) decode_error("bad IHDR length");
      width = be32(data, 0);
      height = be32(data, 4);
      const int depth = data[8];
      color_type = data[9];
      if (depth != 8) decode_error("PNG bit depth " + std::to_string(depth) + " unsupported (8-bit only)");
      if (data[10] != 0 || data[11] != 0) decode_error("unknown PNG compression/filter method");
      if (data[12] != 0) decode_error("interlaced PNG unsupported");
      if (color_type != 0 && color_type != 2 && color_type != 3 && color_type != 4 && color_type != 6) {
        decode_error("invalid PNG color type " + std::to_string(color_type));
      }
    } else if (type == "PLTE") {
      palette.assign(data.begin(), data.end());
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data.begin(), data.end());
    } else if (type == "IEND") {
      seen_end = true;
    }
  }
  if (color_type < 0) decode_error("PNG missing IHDR");
  if (width < 1 || height < 1 || width > (1 << 15) || height > (1 << 15)) decode_error("PNG dimensions out of range");
  if (color_type == 3 && palette.empty()) decode_error("palette PNG without PLTE");

  const int bpp = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 3 ? 1 : color_type == 4 ? 2 : 4;
  const auto stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(bpp);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(height) * (stride + 1));
  uLongf raw_size = raw.size();
  if (uncompress(raw.data(), &raw_size, idat.data(), idat.size()) != Z_OK || raw_size != raw.size()) {
    decode_error("corrupt PNG image data stream");
  }

  std::vector<std::uint8_t> prev(stride, 0), cur(stride);
  const Index channels = (color_type == 0 || color_type == 4) ? 1 : 3;
  ImageGrid grid(height, width, channels);
  for (Index y = 0; y < height; ++y) {
    const std::uint8_t* line = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
    const int filter = line[0];
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(bpp) ? cur[i - static_cast<std::size_t>(bpp)] : 0;
      const int b = prev[i];
      const int c = i >= static_cast<std::size_t>(bpp) ? prev[i - static_cast<std::size_t>(bpp)] : 0;
      int v = line[1 + i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: decode_error("invalid PNG filter type " + std::to_string(filter));
      }
      cur[i] = static_cast<std::uint8_t>(v);
    }
    for (Index x = 0; x < width; ++x) {
      const std::uint8_t* px = cur.data() + static_cast<std::size_t>(x) * static_cast<std::size_t>(bpp);
      if (color_type == 3) {
        const std::size_t entry = std::size_t{px[0]} * 3;
        if (entry + 2 >= palette.size()) decode_error("PNG palette index out of range");
        for (Index c = 0; c < 3; ++c) grid.at(y, x, c) = palette[entry + static_cast<std::size_t>(c)];
      } else {
        for (Index c = 0; c < channels; ++c) grid.at(y, x, c) = px[c];
      }
    }
    std::swap(prev, cur);
  }
  return grid;
}

}  // namespace

ImageGrid decode_image(std::span<const std::uint8_t> bytes, ImageFormat format) {
  if (format == ImageFormat::detect) {
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
      format = ImageFormat::pgm;
    } else if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') {
      format = ImageFormat::ppm;
    } else if (bytes.size() >= 8 && std::equal(kPngSignature.begin(), kPngSignature.end(), bytes.begin())) {
      format = ImageFormat::png;
    } else {
      decode_error("unrecognized image format");
    }
  }
  switch (format) {
    case ImageFormat::pgm:
      if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') decode_error("not a binary PGM (P5)");
      return decode_pnm(bytes, 1);
    case ImageFormat::ppm:
      if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') decode_error("not a binary PPM (P6)");
      return decode_pnm(bytes, 3);
    case ImageFormat::png:
      return decode_png(bytes);
    case ImageFormat::detect:
      break;
  }
  decode_error("unrecognized image format");
}

ImageGrid read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_pnm(const ImageGrid& grid) {
  require(grid.channels == 1 || grid.channels == 3, Errc::invalid_argument, "PNM needs 1 or 3 channels");
  const std::string header = std::string(grid.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(grid.width) + " " +
                             std::to_string(grid.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + grid.pixels.size());
  for (float v : grid.pixels) out.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0f, 255.0f)));
  return out;
}

ImageGrid resize_bilinear(const ImageGrid& grid, Index target_h, Index target_w) {
  require(target_h >= 1 && target_w >= 1, Errc::invalid_argument, "resize: target size must be at least 1x1");
  require(grid.height >= 1 && grid.width >= 1, Errc::invalid_argument, "resize: source image is empty");
  if (target_h == grid.height && target_w == grid.width) return grid;

  struct Tap {
    Index lo, hi;
    float frac;
  };
  const auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (Index i = 0; i < out; ++i) {
      const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<Index>(std::floor(src));
      t[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(grid.height, target_h), tx = taps(grid.width, target_w);

  ImageGrid out(target_h, target_w, grid.channels);
  for (Index y = 0; y < target_h; ++y) {
    const Tap& a = ty[static_cast<std::size_t>(y)];
    for (Index x = 0; x < target_w; ++x) {
      const Tap& b = tx[static_cast<std::size_t>(x)];
      for (Index c = 0; c < grid.channels; ++c) {
        const float top = grid.at(a.lo, b.lo, c) + (grid.at(a.lo, b.hi, c) - grid.at(a.lo, b.lo, c)) * b.frac;
        const float bottom = grid.at(a.hi, b.lo, c) + (grid.at(a.hi, b.hi, c) - grid.at(a.hi, b.lo, c)) * b.frac;
        out.at(y, x, c) = top + (bottom - top) * a.frac;
      }
    }
  }
  return out;
}

Tensor to_input_tensor(const ImageGrid& grid, const Normalization& norm) {
  require(grid.channels == 1 || grid.channels == 3, Errc::invalid_argument,
          "image must have 1 or 3 channels, got " + std::to_string(grid.channels));
  Tensor t({1, 3, grid.height, grid.width});
  for (Index c = 0; c < 3; ++c) {
    const Index src_c = grid.channels == 1 ? 0 : c;
    const float mean = norm.mean[static_cast<std::size_t>(c)], stddev = norm.stddev[static_cast<std::size_t>(c)];
    for (Index y = 0; y < grid.height; ++y) {
      for (Index x = 0; x < grid.width; ++x) t(0, c, y, x) = (grid.at(y, x, src_c) / 255.0f - mean) / stddev;
    }
  }
  return t;
}

Tensor preprocess(const ImageGrid& grid, const Preprocessing& prep) {
  return to_input_tensor(resize_bilinear(grid, prep.input_size.h, prep.input_size.w), prep.normalization);
}

bool AugmentationPolicy::is_identity() const {
  return horizontal_flip_prob == 0.0 && rotation_max_degrees == 0.0 && translate_max_fraction == 0.0 &&
         brightness_delta_max == 0.0;
}

void AugmentationPolicy::check() const {
  require(horizontal_flip_prob >= 0.0 && horizontal_flip_prob <= 1.0, Errc::invalid_argument,
          "augmentation: flip probability must lie in [0, 1]");
  require(rotation_max_degrees >= 0.0 && translate_max_fraction >= 0.0 && brightness_delta_max >= 0.0,
          Errc::invalid_argument, "augmentation: magnitudes must be non-negative");
}

ImageGrid augment(const ImageGrid& grid, const AugmentationPolicy& policy, std::uint64_t draw_index) {
  policy.check();
  Rng rng(mix_seed(policy.seed, draw_index));
  const bool flip = rng.uniform() < policy.horizontal_flip_prob;
  const double degrees = rng.uniform(-policy.rotation_max_degrees, policy.rotation_max_degrees);
  const double shift_x = rng.uniform(-policy.translate_max_fraction, policy.translate_max_fraction) * static_cast<double>(grid.width);
  const double shift_y = rng.uniform(-policy.translate_max_fraction, policy.translate_max_fraction) * static_cast<double>(grid.height);
  const double brightness = rng.uniform(-policy.brightness_delta_max, policy.brightness_delta_max);

  ImageGrid out = grid;
  if (flip) {
    for (Index y = 0; y < grid.height; ++y) {
      for (Index x = 0; x < grid.width; ++x) {
        for (Index c = 0; c < grid.channels; ++c) out.at(y, x, c) = grid.at(y, grid.width - 1 - x, c);
      }
    }
  }

  if (degrees != 0.0 || shift_x != 0.0 || shift_y != 0.0) {
    const ImageGrid src = out;
    const double theta = degrees * std::numbers::pi / 180.0;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double cx = 0.5 * static_cast<double>(grid.width - 1), cy = 0.5 * static_cast<double>(grid.height - 1);
    const auto sample = [&](Index y, Index x, Index c) -> double {
      return (y < 0 || y >= src.height || x < 0 || x >= src.width) ? 0.0 : src.at(y, x, c);
    };
    for (Index y = 0; y < grid.height; ++y) {
      for (Index x = 0; x < grid.width; ++x) {
        // inverse map: undo translation, then rotate back about the centre
        const double dx = static_cast<double>(x) - cx - shift_x, dy = static_cast<double>(y) - cy - shift_y;
        const double sx = cos_t * dx + sin_t * dy + cx, sy = -sin_t * dx + cos_t * dy + cy;
        const auto x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
        const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
        for (Index c = 0; c < grid.channels; ++c) {
          const double top = sample(y0, x0, c) * (1 - fx) + sample(y0, x0 + 1, c) * fx;
          const double bottom = sample(y0 + 1, x0, c) * (1 - fx) + sample(y0 + 1, x0 + 1, c) * fx;
          out.at(y, x, c) = static_cast<float>(top * (1 - fy) + bottom * fy);
        }
      }
    }
  }

  if (brightness != 0.0) {
    for (float& v : out.pixels) v = std::clamp(static_cast<float>(v * (1.0 + brightness)), 0.0f, 255.0f);
  }
  return out;
}

}  // namespace xrt
