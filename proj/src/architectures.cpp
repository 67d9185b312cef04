#include "xrt/architectures.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <set>
#include <sstream>

namespace xrt {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::int64_t parse_int(std::string_view text, std::string_view what) {
  text = trim(text);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  require(ec == std::errc{} && ptr == text.data() + text.size(), Errc::invalid_argument,
          "cannot parse " + std::string(what) + " from '" + std::string(text) + "'");
  return v;
}

}  // namespace

Ratio parse_ratio(std::string_view text) {
  text = trim(text);
  Ratio r;
  if (auto slash = text.find('/'); slash != std::string_view::npos) {
    r = {parse_int(text.substr(0, slash), "ratio numerator"), parse_int(text.substr(slash + 1), "ratio denominator")};
  } else if (auto dot = text.find('.'); dot != std::string_view::npos) {
    const std::string_view whole = text.substr(0, dot), frac = text.substr(dot + 1);
    require(frac.size() <= 12, Errc::invalid_argument, "too many decimals in '" + std::string(text) + "'");
    std::int64_t den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
    const std::int64_t w = whole.empty() ? 0 : parse_int(whole, "ratio");
    const std::int64_t f = frac.empty() ? 0 : parse_int(frac, "ratio");
    require(w >= 0 && f >= 0, Errc::invalid_argument, "ratio must be non-negative: '" + std::string(text) + "'");
    r = {w * den + f, den};
  } else {
    r = {parse_int(text, "ratio"), 1};
  }
  require(r.den > 0 && r.num >= 0, Errc::invalid_argument, "invalid ratio '" + std::string(text) + "'");
  const std::int64_t g = std::gcd(r.num, r.den);
  if (g > 1) r = {r.num / g, r.den / g};
  return r;
}

std::string to_string(const Ratio& r) {
  return r.den == 1 ? std::to_string(r.num) : std::to_string(r.num) + "/" + std::to_string(r.den);
}

std::int64_t scale_up(std::int64_t value, const Ratio& r) {
  return std::max<std::int64_t>(1, (value * r.num + r.den - 1) / r.den);
}

std::int64_t round_scaled(std::int64_t value, const Ratio& r) {
  return (2 * value * r.num + r.den) / (2 * r.den);
}

std::string to_string(const Shape3& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

Shape3 parse_shape3(std::string_view text) {
  text = trim(text);
  const auto a = text.find('x');
  const auto b = a == std::string_view::npos ? a : text.find('x', a + 1);
  require(b != std::string_view::npos, Errc::invalid_argument,
          "input size must look like CxHxW, got '" + std::string(text) + "'");
  Shape3 s{parse_int(text.substr(0, a), "channels"), parse_int(text.substr(a + 1, b - a - 1), "height"),
           parse_int(text.substr(b + 1), "width")};
  require(s.c >= 1 && s.h >= 1 && s.w >= 1, Errc::invalid_argument, "input dimensions must be positive");
  return s;
}

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::gap: return "gap";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
    case LayerKind::add: return "add";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

std::string_view family_name(Family f) {
  switch (f) {
    case Family::vgg16: return "vgg16";
    case Family::resnet50: return "resnet50";
    case Family::inception_v3: return "inception_v3";
  }
  return "?";
}

Family parse_family(std::string_view text) {
  text = trim(text);
  if (text == "vgg16") return Family::vgg16;
  if (text == "resnet50") return Family::resnet50;
  if (text == "inception_v3" || text == "inceptionv3") return Family::inception_v3;
  throw Error(Errc::invalid_argument, "unknown architecture family '" + std::string(text) + "'");
}

std::string_view preset_name(Preset p) { return p == Preset::full ? "full" : "desk"; }

Preset parse_preset(std::string_view text) {
  text = trim(text);
  if (text == "full") return Preset::full;
  if (text == "desk") return Preset::desk;
  throw Error(Errc::invalid_argument, "unknown depth preset '" + std::string(text) + "'");
}

Shape3 default_input(Family family, Preset preset) {
  if (preset == Preset::desk) return {3, 64, 64};
  return family == Family::inception_v3 ? Shape3{3, 299, 299} : Shape3{3, 224, 224};
}

ArchitectureConfig parse_architecture(std::string_view text) {
  ArchitectureConfig cfg;
  std::optional<Shape3> input;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, Errc::format,
            "architecture config line " + std::to_string(line_no) + ": expected key=value");
    const std::string_view key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "family") {
      cfg.family = parse_family(value);
    } else if (key == "preset") {
      cfg.preset = parse_preset(value);
    } else if (key == "input") {
      input = parse_shape3(value);
    } else if (key == "classes") {
      cfg.num_classes = parse_int(value, "classes");
    } else if (key == "width_scale") {
      cfg.width_scale = parse_ratio(value);
    } else {
      throw Error(Errc::format, "architecture config line " + std::to_string(line_no) + ": unknown key '" +
                                    std::string(key) + "'");
    }
  }
  cfg.input = input.value_or(default_input(cfg.family, cfg.preset));
  check_config(cfg);
  return cfg;
}

std::string format_architecture(const ArchitectureConfig& config) {
  std::ostringstream out;
  out << "family=" << family_name(config.family) << "\n"
      << "preset=" << preset_name(config.preset) << "\n"
      << "input=" << to_string(config.input) << "\n"
      << "classes=" << config.num_classes << "\n"
      << "width_scale=" << to_string(config.width_scale) << "\n";
  return out.str();
}

void check_config(const ArchitectureConfig& config) {
  require(config.num_classes >= 2, Errc::invalid_argument, "num_classes must be >= 2");
  require(config.width_scale.num > 0 && config.width_scale.num <= config.width_scale.den, Errc::invalid_argument,
          "width_scale must lie in (0, 1], got " + to_string(config.width_scale));
  require(config.input.c >= 1 && config.input.h >= 1 && config.input.w >= 1, Errc::invalid_argument,
          "input dimensions must be positive");
}

std::optional<std::size_t> LayerGraph::find(std::string_view id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].id == id) return i;
  }
  return std::nullopt;
}

const Shape3& LayerGraph::shape_of(std::string_view id) const {
  require(validated(), Errc::invalid_argument, "graph has not been shape-validated");
  const auto idx = find(id);
  require(idx.has_value(), Errc::invalid_argument, "no layer named '" + std::string(id) + "'");
  return shapes[*idx];
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(const ArchitectureConfig& cfg) : cfg_(cfg) {
    LayerSpec in;
    in.id = "input";
    in.kind = LayerKind::input;
    in.channels = cfg.input.c;
    layers_.push_back(in);
  }

  Index width(Index canonical) const { return scale_up(canonical, cfg_.width_scale); }

  std::string conv(const std::string& from, const std::string& id, Index canonical_channels, Extent2 kernel,
                   Extent2 stride = {1, 1}, std::optional<Extent2> padding = std::nullopt) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::conv;
    l.inputs = {from};
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding.value_or(Extent2{kernel.h / 2, kernel.w / 2});
    l.channels = width(canonical_channels);
    return push(std::move(l));
  }

  std::string valid_conv(const std::string& from, const std::string& id, Index canonical_channels, Extent2 kernel,
                         Extent2 stride = {1, 1}) {
    return conv(from, id, canonical_channels, kernel, stride, Extent2{0, 0});
  }

  std::string unary(const std::string& from, const std::string& id, LayerKind kind) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.inputs = {from};
    return push(std::move(l));
  }

  std::string pool(const std::string& from, const std::string& id, LayerKind kind, Index k, Index s, Index pad = 0) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.inputs = {from};
    l.kernel = {k, k};
    l.stride = {s, s};
    l.padding = {pad, pad};
    return push(std::move(l));
  }

  std::string merge(std::vector<std::string> from, const std::string& id, LayerKind kind) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.inputs = std::move(from);
    return push(std::move(l));
  }

  /// conv -> batchnorm -> relu, the unit used throughout inception.
  std::string conv_bn_relu(const std::string& from, const std::string& id, Index channels, Extent2 kernel,
                           Extent2 stride = {1, 1}, bool same = true) {
    const std::string c = same ? conv(from, id, channels, kernel, stride) : valid_conv(from, id, channels, kernel, stride);
    const std::string b = unary(c, id + "_bn", LayerKind::batchnorm);
    return unary(b, id + "_relu", LayerKind::relu);
  }

  LayerGraph finish(const std::string& from) {
    LayerGraph g;
    const std::string gap = unary(from, "head_gap", LayerKind::gap);
    LayerSpec dense;
    dense.id = "head_dense";
    dense.kind = LayerKind::dense;
    dense.inputs = {gap};
    dense.features = cfg_.num_classes;
    push(std::move(dense));
    unary("head_dense", "head_softmax", LayerKind::softmax);
    g.head_begin = layers_.size() - 3;
    g.layers = std::move(layers_);
    return g;
  }

 private:
  std::string push(LayerSpec l) {
    std::string id = l.id;
    layers_.push_back(std::move(l));
    return id;
  }

  ArchitectureConfig cfg_;
  std::vector<LayerSpec> layers_;
};

LayerGraph build_vgg16(const ArchitectureConfig& cfg) {
  GraphBuilder b(cfg);
  const std::vector<std::vector<Index>> full = {{64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
  const std::vector<std::vector<Index>> desk = {{64, 64}, {128, 128}, {256, 256}};
  const auto& blocks = cfg.preset == Preset::full ? full : desk;
  std::string x = "input";
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const std::string prefix = "block" + std::to_string(bi + 1);
    for (std::size_t ci = 0; ci < blocks[bi].size(); ++ci) {
      const std::string id = prefix + "_conv" + std::to_string(ci + 1);
      x = b.conv(x, id, blocks[bi][ci], {3, 3});
      x = b.unary(x, id + "_relu", LayerKind::relu);
    }
    x = b.pool(x, prefix + "_pool", LayerKind::maxpool, 2, 2);
  }
  return b.finish(x);
}

std::string bottleneck(GraphBuilder& b, const std::string& from, const std::string& id, Index mid, Index out,
                       Index stride, bool project) {
  std::string x = b.conv(from, id + "_1x1a", mid, {1, 1}, {stride, stride});
  x = b.unary(x, id + "_1x1a_bn", LayerKind::batchnorm);
  x = b.unary(x, id + "_1x1a_relu", LayerKind::relu);
  x = b.conv(x, id + "_3x3", mid, {3, 3});
  x = b.unary(x, id + "_3x3_bn", LayerKind::batchnorm);
  x = b.unary(x, id + "_3x3_relu", LayerKind::relu);
  x = b.conv(x, id + "_1x1b", out, {1, 1});
  x = b.unary(x, id + "_1x1b_bn", LayerKind::batchnorm);
  std::string shortcut = from;
  if (project) {
    shortcut = b.conv(from, id + "_proj", out, {1, 1}, {stride, stride});
    shortcut = b.unary(shortcut, id + "_proj_bn", LayerKind::batchnorm);
  }
  x = b.merge({x, shortcut}, id + "_add", LayerKind::add);
  return b.unary(x, id + "_out", LayerKind::relu);
}

LayerGraph build_resnet50(const ArchitectureConfig& cfg) {
  GraphBuilder b(cfg);
  std::string x = b.conv("input", "stem_conv", 64, {7, 7}, {2, 2});
  x = b.unary(x, "stem_bn", LayerKind::batchnorm);
  x = b.unary(x, "stem_relu", LayerKind::relu);
  x = b.pool(x, "stem_pool", LayerKind::maxpool, 3, 2, 1);

  struct Stage { Index mid, out, blocks, stride; };
  const std::vector<Stage> full = {{64, 256, 3, 1}, {128, 512, 4, 2}, {256, 1024, 6, 2}, {512, 2048, 3, 2}};
  const std::vector<Stage> desk = {{64, 256, 2, 1}};
  const auto& stages = cfg.preset == Preset::full ? full : desk;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    for (Index bi = 0; bi < stages[si].blocks; ++bi) {
      const std::string id = "stage" + std::to_string(si + 1) + "_block" + std::to_string(bi + 1);
      x = bottleneck(b, x, id, stages[si].mid, stages[si].out, bi == 0 ? stages[si].stride : 1, bi == 0);
    }
  }
  return b.finish(x);
}

std::string inception_a(GraphBuilder& b, const std::string& from, const std::string& id, Index pool_channels) {
  const std::string b1 = b.conv_bn_relu(from, id + "_b1x1", 64, {1, 1});
  std::string b5 = b.conv_bn_relu(from, id + "_b5x5_1", 48, {1, 1});
  b5 = b.conv_bn_relu(b5, id + "_b5x5_2", 64, {5, 5});
  std::string b3 = b.conv_bn_relu(from, id + "_b3x3dbl_1", 64, {1, 1});
  b3 = b.conv_bn_relu(b3, id + "_b3x3dbl_2", 96, {3, 3});
  b3 = b.conv_bn_relu(b3, id + "_b3x3dbl_3", 96, {3, 3});
  std::string bp = b.pool(from, id + "_bpool", LayerKind::avgpool, 3, 1, 1);
  bp = b.conv_bn_relu(bp, id + "_bpool_proj", pool_channels, {1, 1});
  return b.merge({b1, b5, b3, bp}, id, LayerKind::concat);
}

std::string inception_c(GraphBuilder& b, const std::string& from, const std::string& id, Index c7) {
  const std::string b1 = b.conv_bn_relu(from, id + "_b1x1", 192, {1, 1});
  std::string b7 = b.conv_bn_relu(from, id + "_b7x7_1", c7, {1, 1});
  b7 = b.conv_bn_relu(b7, id + "_b7x7_2", c7, {1, 7});
  b7 = b.conv_bn_relu(b7, id + "_b7x7_3", 192, {7, 1});
  std::string bd = b.conv_bn_relu(from, id + "_b7x7dbl_1", c7, {1, 1});
  bd = b.conv_bn_relu(bd, id + "_b7x7dbl_2", c7, {7, 1});
  bd = b.conv_bn_relu(bd, id + "_b7x7dbl_3", c7, {1, 7});
  bd = b.conv_bn_relu(bd, id + "_b7x7dbl_4", c7, {7, 1});
  bd = b.conv_bn_relu(bd, id + "_b7x7dbl_5", 192, {1, 7});
  std::string bp = b.pool(from, id + "_bpool", LayerKind::avgpool, 3, 1, 1);
  bp = b.conv_bn_relu(bp, id + "_bpool_proj", 192, {1, 1});
  return b.merge({b1, b7, bd, bp}, id, LayerKind::concat);
}

std::string inception_e(GraphBuilder& b, const std::string& from, const std::string& id) {
  const std::string b1 = b.conv_bn_relu(from, id + "_b1x1", 320, {1, 1});
  const std::string b3 = b.conv_bn_relu(from, id + "_b3x3_1", 384, {1, 1});
  const std::string b3a = b.conv_bn_relu(b3, id + "_b3x3_2a", 384, {1, 3});
  const std::string b3b = b.conv_bn_relu(b3, id + "_b3x3_2b", 384, {3, 1});
  const std::string b3cat = b.merge({b3a, b3b}, id + "_b3x3", LayerKind::concat);
  std::string bd = b.conv_bn_relu(from, id + "_b3x3dbl_1", 448, {1, 1});
  bd = b.conv_bn_relu(bd, id + "_b3x3dbl_2", 384, {3, 3});
  const std::string bda = b.conv_bn_relu(bd, id + "_b3x3dbl_3a", 384, {1, 3});
  const std::string bdb = b.conv_bn_relu(bd, id + "_b3x3dbl_3b", 384, {3, 1});
  const std::string bdcat = b.merge({bda, bdb}, id + "_b3x3dbl", LayerKind::concat);
  std::string bp = b.pool(from, id + "_bpool", LayerKind::avgpool, 3, 1, 1);
  bp = b.conv_bn_relu(bp, id + "_bpool_proj", 192, {1, 1});
  return b.merge({b1, b3cat, bdcat, bp}, id, LayerKind::concat);
}

LayerGraph build_inception_v3(const ArchitectureConfig& cfg) {
  GraphBuilder b(cfg);
  std::string x = b.conv_bn_relu("input", "stem_conv1", 32, {3, 3}, {2, 2}, false);
  if (cfg.preset == Preset::desk) {
    x = b.conv_bn_relu(x, "stem_conv2", 64, {3, 3});
    x = b.pool(x, "stem_pool1", LayerKind::maxpool, 3, 2);
    x = inception_a(b, x, "mixed0", 32);
    return b.finish(x);
  }
  x = b.conv_bn_relu(x, "stem_conv2", 32, {3, 3}, {1, 1}, false);
  x = b.conv_bn_relu(x, "stem_conv3", 64, {3, 3});
  x = b.pool(x, "stem_pool1", LayerKind::maxpool, 3, 2);
  x = b.conv_bn_relu(x, "stem_conv4", 80, {1, 1}, {1, 1}, false);
  x = b.conv_bn_relu(x, "stem_conv5", 192, {3, 3}, {1, 1}, false);
  x = b.pool(x, "stem_pool2", LayerKind::maxpool, 3, 2);

  x = inception_a(b, x, "mixed0", 32);
  x = inception_a(b, x, "mixed1", 64);
  x = inception_a(b, x, "mixed2", 64);

  {  // grid reduction 35 -> 17
    const std::string r3 = b.conv_bn_relu(x, "mixed3_b3x3", 384, {3, 3}, {2, 2}, false);
    std::string rd = b.conv_bn_relu(x, "mixed3_b3x3dbl_1", 64, {1, 1});
    rd = b.conv_bn_relu(rd, "mixed3_b3x3dbl_2", 96, {3, 3});
    rd = b.conv_bn_relu(rd, "mixed3_b3x3dbl_3", 96, {3, 3}, {2, 2}, false);
    const std::string rp = b.pool(x, "mixed3_bpool", LayerKind::maxpool, 3, 2);
    x = b.merge({r3, rd, rp}, "mixed3", LayerKind::concat);
  }

  x = inception_c(b, x, "mixed4", 128);
  x = inception_c(b, x, "mixed5", 160);
  x = inception_c(b, x, "mixed6", 160);
  x = inception_c(b, x, "mixed7", 192);

  {  // grid reduction 17 -> 8
    std::string r3 = b.conv_bn_relu(x, "mixed8_b3x3_1", 192, {1, 1});
    r3 = b.conv_bn_relu(r3, "mixed8_b3x3_2", 320, {3, 3}, {2, 2}, false);
    std::string r7 = b.conv_bn_relu(x, "mixed8_b7x7x3_1", 192, {1, 1});
    r7 = b.conv_bn_relu(r7, "mixed8_b7x7x3_2", 192, {1, 7});
    r7 = b.conv_bn_relu(r7, "mixed8_b7x7x3_3", 192, {7, 1});
    r7 = b.conv_bn_relu(r7, "mixed8_b7x7x3_4", 192, {3, 3}, {2, 2}, false);
    const std::string rp = b.pool(x, "mixed8_bpool", LayerKind::maxpool, 3, 2);
    x = b.merge({r3, r7, rp}, "mixed8", LayerKind::concat);
  }

  x = inception_e(b, x, "mixed9");
  x = inception_e(b, x, "mixed10");
  return b.finish(x);
}

Shape3 infer_shape(const LayerSpec& l, const std::vector<const Shape3*>& in) {
  const auto fail = [&](const std::string& why) -> Error {
    return Error(Errc::shape_mismatch, "layer '" + l.id + "' (" + std::string(kind_name(l.kind)) + "): " + why);
  };
  const auto window = [&](const Shape3& s, Index c_out) {
    for (auto [extent, k, st, p, axis] : {std::tuple{s.h, l.kernel.h, l.stride.h, l.padding.h, "height"},
                                          std::tuple{s.w, l.kernel.w, l.stride.w, l.padding.w, "width"}}) {
      if (k < 1 || st < 1 || p < 0) throw fail("invalid kernel/stride/padding");
      if (extent + 2 * p < k) {
        throw fail(std::string("padded ") + axis + " " + std::to_string(extent + 2 * p) + " smaller than kernel " +
                   std::to_string(k));
      }
    }
    return Shape3{c_out, window_output(s.h, l.kernel.h, l.stride.h, l.padding.h),
                  window_output(s.w, l.kernel.w, l.stride.w, l.padding.w)};
  };

  switch (l.kind) {
    case LayerKind::input:
      return *in.front();
    case LayerKind::conv:
      if (l.channels < 1) throw fail("conv needs at least one output channel");
      return window(*in.front(), l.channels);
    case LayerKind::maxpool:
    case LayerKind::avgpool:
      if (l.padding.h >= l.kernel.h || l.padding.w >= l.kernel.w) throw fail("padding must be smaller than kernel");
      return window(*in.front(), in.front()->c);
    case LayerKind::gap:
      if (in.front()->h < 1 || in.front()->w < 1) throw fail("empty spatial extent");
      return {in.front()->c, 1, 1};
    case LayerKind::batchnorm:
    case LayerKind::relu:
    case LayerKind::softmax:
      return *in.front();
    case LayerKind::dense:
      if (l.features < 1) throw fail("dense needs at least one output feature");
      return {l.features, 1, 1};
    case LayerKind::add: {
      for (std::size_t i = 1; i < in.size(); ++i) {
        if (!(*in[i] == *in.front())) {
          throw fail("input '" + l.inputs[i] + "' shape " + to_string(*in[i]) + " differs from '" + l.inputs[0] +
                     "' shape " + to_string(*in.front()));
        }
      }
      return *in.front();
    }
    case LayerKind::concat: {
      Shape3 out = *in.front();
      for (std::size_t i = 1; i < in.size(); ++i) {
        if (in[i]->h != out.h || in[i]->w != out.w) {
          throw fail("input '" + l.inputs[i] + "' spatial extent " + to_string(*in[i]) + " differs from '" +
                     l.inputs[0] + "' " + to_string(*in.front()));
        }
        out.c += in[i]->c;
      }
      return out;
    }
  }
  throw fail("unknown layer kind");
}

}  // namespace

LayerGraph build_topology(const ArchitectureConfig& config) {
  check_config(config);
  switch (config.family) {
    case Family::vgg16: return build_vgg16(config);
    case Family::resnet50: return build_resnet50(config);
    case Family::inception_v3: return build_inception_v3(config);
  }
  throw Error(Errc::invalid_argument, "unknown family");
}

Index minimum_input_extent(const ArchitectureConfig& config) {
  const LayerGraph g = build_topology(config);
  for (Index s = 1; s <= 4096; ++s) {
    try {
      validate_shapes(g, {config.input.c, s, s});
      return s;
    } catch (const Error&) {
    }
  }
  throw Error(Errc::invalid_argument, "no input size up to 4096 satisfies the architecture");
}

LayerGraph build(const ArchitectureConfig& config) {
  LayerGraph g = build_topology(config);
  try {
    return validate_shapes(std::move(g), config.input);
  } catch (const Error& e) {
    if (e.code() != Errc::shape_mismatch) throw;
    const Index minimum = minimum_input_extent(config);
    throw Error(Errc::invalid_argument, "input " + to_string(config.input) + " is too small for " +
                                            std::string(family_name(config.family)) + "/" +
                                            std::string(preset_name(config.preset)) + "; requires at least " +
                                            std::to_string(minimum) + "x" + std::to_string(minimum) + " (" +
                                            e.what() + ")");
  }
}

LayerGraph validate_shapes(LayerGraph graph, const Shape3& input) {
  const auto& layers = graph.layers;
  require(!layers.empty(), Errc::invalid_argument, "empty layer graph");
  require(layers.front().kind == LayerKind::input, Errc::invalid_argument, "first layer must be the input node");
  require(layers.back().kind == LayerKind::softmax, Errc::invalid_argument, "last layer must be the softmax sink");
  require(input.c >= 1 && input.h >= 1 && input.w >= 1, Errc::shape_mismatch, "input dimensions must be positive");
  require(layers.front().channels == 0 || layers.front().channels == input.c, Errc::shape_mismatch,
          "layer 'input': graph expects " + std::to_string(layers.front().channels) + " channels, got " +
              std::to_string(input.c));

  std::map<std::string, std::size_t, std::less<>> index;
  std::vector<bool> consumed(layers.size(), false);
  std::vector<Shape3> shapes;
  shapes.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    require(!index.contains(l.id), Errc::invalid_argument, "duplicate layer id '" + l.id + "'");
    if (i > 0) {
      require(l.kind != LayerKind::input, Errc::invalid_argument, "layer '" + l.id + "': second input node");
      require(l.kind != LayerKind::softmax || i + 1 == layers.size(), Errc::invalid_argument,
              "layer '" + l.id + "': softmax must be the single sink");
    }
    const bool is_merge = l.kind == LayerKind::add || l.kind == LayerKind::concat;
    if (l.kind == LayerKind::input) {
      require(l.inputs.empty(), Errc::invalid_argument, "input node cannot have inputs");
    } else {
      require(is_merge ? l.inputs.size() >= 2 : l.inputs.size() == 1, Errc::invalid_argument,
              "layer '" + l.id + "': wrong number of inputs (" + std::to_string(l.inputs.size()) + ")");
    }
    std::vector<const Shape3*> in;
    for (const std::string& src : l.inputs) {
      auto it = index.find(src);
      require(it != index.end(), Errc::invalid_argument,
              "layer '" + l.id + "': input '" + src + "' is not an earlier layer (graph must be acyclic, topologically ordered)");
      consumed[it->second] = true;
      in.push_back(&shapes[it->second]);
    }
    if (l.kind == LayerKind::input) in.push_back(&input);
    shapes.push_back(infer_shape(l, in));
    index.emplace(l.id, i);
  }
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    require(consumed[i], Errc::invalid_argument, "layer '" + layers[i].id + "' has no consumer; only softmax may be a sink");
  }
  graph.shapes = std::move(shapes);
  return graph;
}

std::uint64_t layer_parameters(const LayerSpec& layer, const Shape3& input) {
  switch (layer.kind) {
    case LayerKind::conv:
      return static_cast<std::uint64_t>(layer.kernel.h * layer.kernel.w * input.c + 1) *
             static_cast<std::uint64_t>(layer.channels);
    case LayerKind::dense:
      return static_cast<std::uint64_t>(input.size() + 1) * static_cast<std::uint64_t>(layer.features);
    case LayerKind::batchnorm:
      return 4 * static_cast<std::uint64_t>(input.c);
    default:
      return 0;
  }
}

ParameterCount count_parameters(const LayerGraph& graph) {
  require(graph.validated(), Errc::invalid_argument, "count_parameters: graph has not been shape-validated");
  ParameterCount pc;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    const Shape3& in = l.inputs.empty() ? graph.shapes[i] : graph.shape_of(l.inputs.front());
    const std::uint64_t p = layer_parameters(l, in);
    pc.per_layer[l.id] = p;
    pc.total += p;
    if (i >= graph.head_begin) pc.trainable += l.kind == LayerKind::batchnorm ? p / 2 : p;
  }
  return pc;
}

BaseHeadSplit split_base_head(const LayerGraph& graph) {
  require(graph.validated(), Errc::invalid_argument, "split_base_head: graph has not been shape-validated");
  const auto& ls = graph.layers;
  const std::size_t n = ls.size();
  const bool canonical = n >= 4 && graph.head_begin == n - 3 && ls[n - 3].kind == LayerKind::gap &&
                         ls[n - 2].kind == LayerKind::dense && ls[n - 1].kind == LayerKind::softmax &&
                         ls[n - 2].inputs == std::vector<std::string>{ls[n - 3].id} &&
                         ls[n - 1].inputs == std::vector<std::string>{ls[n - 2].id};
  require(canonical, Errc::invalid_argument, "graph lacks the canonical gap -> dense -> softmax head");

  BaseHeadSplit split;
  split.base.layers.assign(ls.begin(), ls.begin() + static_cast<std::ptrdiff_t>(graph.head_begin));
  split.base.shapes.assign(graph.shapes.begin(), graph.shapes.begin() + static_cast<std::ptrdiff_t>(graph.head_begin));
  split.base.head_begin = graph.head_begin;
  split.head.assign(ls.begin() + static_cast<std::ptrdiff_t>(graph.head_begin), ls.end());
  return split;
}

LayerGraph join_base_head(const BaseHeadSplit& split) {
  LayerGraph g;
  g.layers = split.base.layers;
  g.layers.insert(g.layers.end(), split.head.begin(), split.head.end());
  g.head_begin = split.base.layers.size();
  return validate_shapes(std::move(g), split.base.shapes.front());
}

Shape3 feature_map_shape(const LayerGraph& graph) {
  require(graph.validated() && graph.head_begin >= 1 && graph.head_begin < graph.layers.size(), Errc::invalid_argument,
          "feature_map_shape: graph not validated or lacks a head");
  return graph.shape_of(graph.layers[graph.head_begin].inputs.front());
}

}  // namespace xrt
