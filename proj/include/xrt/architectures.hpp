#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xrt/kernels.hpp"

namespace xrt {

/// Exact non-negative fraction, used for width scales and split fractions.
struct Ratio {
  std::int64_t num = 1, den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

/// Accepts "a/b", integers and plain decimals ("0.8" -> 4/5).
Ratio parse_ratio(std::string_view text);
std::string to_string(const Ratio& r);

/// ceil(value * r), never below 1.
std::int64_t scale_up(std::int64_t value, const Ratio& r);

/// round(value * r), halves away from zero.
std::int64_t round_scaled(std::int64_t value, const Ratio& r);

struct Shape3 {
  Index c = 0, h = 0, w = 0;

  Index size() const { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);
Shape3 parse_shape3(std::string_view text);  // "3x224x224"

enum class LayerKind { input, conv, maxpool, avgpool, gap, batchnorm, relu, dense, softmax, add, concat };

std::string_view kind_name(LayerKind kind);

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::input;
  std::vector<std::string> inputs;
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Index channels = 0;  // conv output channels
  Index features = 0;  // dense output features
  double eps = 1e-3;   // batchnorm

  bool weighted() const { return kind == LayerKind::conv || kind == LayerKind::dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Family { vgg16, resnet50, inception_v3 };
enum class Preset { full, desk };

std::string_view family_name(Family f);
Family parse_family(std::string_view text);
std::string_view preset_name(Preset p);
Preset parse_preset(std::string_view text);

struct ArchitectureConfig {
  Family family = Family::vgg16;
  Preset preset = Preset::desk;
  Shape3 input{3, 64, 64};
  Index num_classes = 2;
  Ratio width_scale{1, 1};

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

/// Canonical input size for a family/preset pair.
Shape3 default_input(Family family, Preset preset);

/// key=value text, one pair per line, '#' comments. Keys: family, preset,
/// input (CxHxW), classes, width_scale. Missing keys take defaults, with
/// the input size defaulting per family/preset.
ArchitectureConfig parse_architecture(std::string_view text);
std::string format_architecture(const ArchitectureConfig& config);

/// Layers in topological order. `shapes` is filled by validate_shapes.
struct LayerGraph {
  std::vector<LayerSpec> layers;
  std::vector<Shape3> shapes;
  std::size_t head_begin = 0;

  bool validated() const { return !shapes.empty() && shapes.size() == layers.size(); }
  std::optional<std::size_t> find(std::string_view id) const;
  const Shape3& shape_of(std::string_view id) const;

  friend bool operator==(const LayerGraph&, const LayerGraph&) = default;
};

void check_config(const ArchitectureConfig& config);

/// Builds the family's layer graph (validated) with the gap -> dense -> softmax head.
LayerGraph build(const ArchitectureConfig& config);

/// Builds without validating, for callers that want to inspect topology only.
LayerGraph build_topology(const ArchitectureConfig& config);

/// Smallest square spatial input the family accepts (channels from config).
Index minimum_input_extent(const ArchitectureConfig& config);

LayerGraph validate_shapes(LayerGraph graph, const Shape3& input);

struct ParameterCount {
  std::uint64_t total = 0;
  std::uint64_t trainable = 0;
  std::map<std::string, std::uint64_t> per_layer;
};

/// Parameters a single layer owns given its input shape.
std::uint64_t layer_parameters(const LayerSpec& layer, const Shape3& input);

ParameterCount count_parameters(const LayerGraph& graph);

struct BaseHeadSplit {
  LayerGraph base;
  std::vector<LayerSpec> head;
};

BaseHeadSplit split_base_head(const LayerGraph& graph);
LayerGraph join_base_head(const BaseHeadSplit& split);

/// Shape consumed by the head's pooling layer (the base output).
Shape3 feature_map_shape(const LayerGraph& graph);

}  // namespace xrt
