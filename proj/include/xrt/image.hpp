#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xrt/bundle.hpp"
#include "xrt/tensor.hpp"

namespace xrt {

/// Interleaved (row, col, channel) pixel grid. Decoded images hold integral
/// values 0..255; resampling produces fractional values in the same range.
struct ImageGrid {
  Index height = 0, width = 0, channels = 1;
  std::vector<float> pixels;

  ImageGrid() = default;
  ImageGrid(Index h, Index w, Index c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  float& at(Index y, Index x, Index c = 0) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  float at(Index y, Index x, Index c = 0) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }

  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;
};

enum class ImageFormat { detect, pgm, ppm, png };

/// Decodes binary PGM (P5), binary PPM (P6) or 8-bit non-interlaced PNG.
/// PNG alpha is dropped; palette images expand to RGB.
ImageGrid decode_image(std::span<const std::uint8_t> bytes, ImageFormat format = ImageFormat::detect);
ImageGrid read_image(const std::filesystem::path& path);

/// P5 for one channel, P6 for three; values rounded and clamped to bytes.
std::vector<std::uint8_t> encode_pnm(const ImageGrid& grid);

/// Half-pixel-centre bilinear resampling: source coordinate
/// (i + 0.5) * in / out - 0.5, clamped to the image.
ImageGrid resize_bilinear(const ImageGrid& grid, Index target_h, Index target_w);

/// (1, 3, h, w) tensor: value / 255, then (x - mean) / std per channel.
/// Single-channel grids are replicated to all three channels.
Tensor to_input_tensor(const ImageGrid& grid, const Normalization& norm);

/// Resize to the preprocessing input size, then normalize.
Tensor preprocess(const ImageGrid& grid, const Preprocessing& prep);

struct AugmentationPolicy {
  double horizontal_flip_prob = 0.5;
  double rotation_max_degrees = 10.0;
  double translate_max_fraction = 0.1;
  double brightness_delta_max = 0.1;
  std::uint64_t seed = 42;

  static AugmentationPolicy identity() { return {0.0, 0.0, 0.0, 0.0, 42}; }
  bool is_identity() const;
  void check() const;
};

/// One seeded random draw of flip / rotation / translation / brightness.
/// Rotation and translation resample bilinearly with zero fill.
ImageGrid augment(const ImageGrid& grid, const AugmentationPolicy& policy, std::uint64_t draw_index);

}  // namespace xrt
