#pragma once

// ModelBundle persistence.
//
// File layout, all integers little-endian:
//
//   "XRTB"                     4 bytes magic
//   u32 version                currently 1
//   u32 tensor_count
//   u32 len, bytes             architecture config text (key=value lines)
//   u32 len, bytes             preprocessing text (input, mean, std)
//   u32 label_count, then per label: u16 len, bytes
//   per tensor:
//     u16 name_len, name bytes (UTF-8)
//     u8 rank, u32 dims[rank]
//     f32 values[prod(dims)]   IEEE-754 little-endian
//   u32 crc32                  over every preceding byte

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xrt/architectures.hpp"

namespace xrt {

inline constexpr std::array<char, 4> kBundleMagic{'X', 'R', 'T', 'B'};
inline constexpr std::uint32_t kBundleVersion = 1;

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct Preprocessing {
  Shape3 input_size{3, 64, 64};
  Normalization normalization;
  friend bool operator==(const Preprocessing&, const Preprocessing&) = default;
};

struct WeightArray {
  std::string name;  // "<layer id>.<param>"
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const;
  /// Bitwise comparison of values, so NaN payloads and -0 round-trip exactly.
  friend bool operator==(const WeightArray& a, const WeightArray& b);
};

struct ModelBundle {
  ArchitectureConfig architecture;
  std::vector<WeightArray> tensors;  // graph order
  Preprocessing preprocessing;
  std::vector<std::string> class_labels{"covid", "normal"};
  std::uint32_t format_version = kBundleVersion;

  const WeightArray& tensor(std::string_view name) const;
  WeightArray& tensor(std::string_view name);
  const WeightArray* find(std::string_view name) const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// The (name, dims) list a graph's weighted layers require, in graph order.
std::vector<WeightArray> weight_layout(const LayerGraph& graph);

/// Checks tensor presence/shapes against the architecture and label count.
/// Throws shape_mismatch naming the offending layer.
void check_bundle(const ModelBundle& bundle);

std::vector<std::uint8_t> encode_bundle(const ModelBundle& bundle);
ModelBundle decode_bundle(std::span<const std::uint8_t> bytes);

void save(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load(const std::filesystem::path& path);

/// Seeded Glorot-uniform conv/dense weights, zero biases, identity batchnorm.
ModelBundle init_random_base(const ArchitectureConfig& config, std::uint64_t seed);

/// Uniform bound sqrt(6 / (fan_in + fan_out)) for a conv or dense weight.
double glorot_bound(const LayerSpec& layer, const Shape3& input);

/// Builds a bundle from a text manifest plus raw little-endian f32 files:
///
///   architecture <config file>
///   labels covid,normal
///   normalization 0.5,0.5,0.5 0.5,0.5,0.5     (optional: means then stds)
///   tensor <name> <d0>x<d1>x... <raw file>
///
/// Relative paths resolve against the manifest's directory.
ModelBundle import_manifest(const std::filesystem::path& manifest);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Short identifier derived from the encoded bytes, e.g. "vgg16-1a2b3c4d".
std::string model_id(const ModelBundle& bundle);

}  // namespace xrt
