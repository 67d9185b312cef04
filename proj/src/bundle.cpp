#include "xrt/bundle.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xrt/random.hpp"

namespace xrt {

std::size_t WeightArray::element_count() const {
  std::size_t n = dims.empty() ? 0 : 1;
  for (auto d : dims) n *= d;
  return n;
}

bool operator==(const WeightArray& a, const WeightArray& b) {
  return a.name == b.name && a.dims == b.dims && a.values.size() == b.values.size() &&
         (a.values.empty() || std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0);
}

const WeightArray* ModelBundle::find(std::string_view name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const WeightArray& w) { return w.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

const WeightArray& ModelBundle::tensor(std::string_view name) const {
  const WeightArray* w = find(name);
  require(w != nullptr, Errc::shape_mismatch, "bundle has no tensor '" + std::string(name) + "'");
  return *w;
}

WeightArray& ModelBundle::tensor(std::string_view name) {
  return const_cast<WeightArray&>(std::as_const(*this).tensor(name));
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<WeightArray> weight_layout(const LayerGraph& graph) {
  require(graph.validated(), Errc::invalid_argument, "weight_layout: graph has not been shape-validated");
  std::vector<WeightArray> out;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    if (l.inputs.empty()) continue;
    const Shape3& in = graph.shape_of(l.inputs.front());
    const auto u = [](Index v) { return static_cast<std::uint32_t>(v); };
    switch (l.kind) {
      case LayerKind::conv:
        out.push_back({l.id + ".weight", {u(l.channels), u(in.c), u(l.kernel.h), u(l.kernel.w)}, {}});
        out.push_back({l.id + ".bias", {u(l.channels)}, {}});
        break;
      case LayerKind::dense:
        out.push_back({l.id + ".weight", {u(in.size()), u(l.features)}, {}});
        out.push_back({l.id + ".bias", {u(l.features)}, {}});
        break;
      case LayerKind::batchnorm:
        for (const char* p : {".gamma", ".beta", ".mean", ".var"}) out.push_back({l.id + p, {u(in.c)}, {}});
        break;
      default:
        break;
    }
  }
  return out;
}

void check_bundle(const ModelBundle& bundle) {
  const LayerGraph graph = build(bundle.architecture);
  require(static_cast<Index>(bundle.class_labels.size()) == bundle.architecture.num_classes, Errc::shape_mismatch,
          "bundle has " + std::to_string(bundle.class_labels.size()) + " class labels but the architecture declares " +
              std::to_string(bundle.architecture.num_classes) + " classes");
  require(bundle.preprocessing.input_size == bundle.architecture.input, Errc::shape_mismatch,
          "preprocessing input size " + to_string(bundle.preprocessing.input_size) +
              " does not match architecture input " + to_string(bundle.architecture.input));
  require(!bundle.tensors.empty(), Errc::invalid_argument, "bundle has no tensors");
  for (const WeightArray& w : bundle.tensors) {
    require(w.element_count() > 0, Errc::invalid_argument, "tensor '" + w.name + "' is empty");
    require(w.values.size() == w.element_count(), Errc::shape_mismatch,
            "tensor '" + w.name + "' holds " + std::to_string(w.values.size()) + " values for " +
                std::to_string(w.element_count()) + " elements");
  }
  const auto layout = weight_layout(graph);
  for (const WeightArray& expected : layout) {
    const std::string layer = expected.name.substr(0, expected.name.rfind('.'));
    const WeightArray* actual = bundle.find(expected.name);
    require(actual != nullptr, Errc::shape_mismatch, "layer '" + layer + "': missing tensor '" + expected.name + "'");
    if (actual->dims != expected.dims) {
      const auto fmt = [](const std::vector<std::uint32_t>& d) {
        std::string s;
        for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
        return s;
      };
      throw Error(Errc::shape_mismatch, "layer '" + layer + "': tensor '" + expected.name + "' has shape " +
                                            fmt(actual->dims) + ", architecture requires " + fmt(expected.dims));
    }
  }
  require(bundle.tensors.size() == layout.size(), Errc::shape_mismatch,
          "bundle holds " + std::to_string(bundle.tensors.size()) + " tensors, architecture requires " +
              std::to_string(layout.size()));
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void text32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  void put(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    require(n <= remaining(), Errc::truncated,
            std::string("bundle truncated while reading ") + what + " at byte " + std::to_string(pos_));
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t uint(int n, const char* what) {
    auto s = take(static_cast<std::size_t>(n), what);
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    auto s = take(n, what);
    return {s.begin(), s.end()};
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::string format_float(float v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, ptr};
}

float parse_float(std::string_view s) {
  float v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc{} && ptr == s.data() + s.size(), Errc::format, "cannot parse number '" + std::string(s) + "'");
  return v;
}

std::array<float, 3> parse_triple(std::string_view s) {
  std::array<float, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto comma = s.find(',');
    require((comma == std::string_view::npos) == (i == 2), Errc::format, "expected three comma-separated values");
    out[i] = parse_float(s.substr(0, comma));
    if (comma != std::string_view::npos) s.remove_prefix(comma + 1);
  }
  return out;
}

std::string format_preprocessing(const Preprocessing& p) {
  std::string s = "input=" + to_string(p.input_size) + "\nmean=";
  for (int i = 0; i < 3; ++i) s += (i ? "," : "") + format_float(p.normalization.mean[static_cast<std::size_t>(i)]);
  s += "\nstd=";
  for (int i = 0; i < 3; ++i) s += (i ? "," : "") + format_float(p.normalization.stddev[static_cast<std::size_t>(i)]);
  return s + "\n";
}

Preprocessing parse_preprocessing(const std::string& text) {
  Preprocessing p;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, Errc::format, "preprocessing block: expected key=value");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "input") {
      p.input_size = parse_shape3(value);
    } else if (key == "mean") {
      p.normalization.mean = parse_triple(value);
    } else if (key == "std") {
      p.normalization.stddev = parse_triple(value);
    } else {
      throw Error(Errc::format, "preprocessing block: unknown key '" + key + "'");
    }
  }
  return p;
}

}  // namespace

std::vector<std::uint8_t> encode_bundle(const ModelBundle& bundle) {
  check_bundle(bundle);
  Writer w;
  w.raw({kBundleMagic.data(), kBundleMagic.size()});
  w.u32(bundle.format_version);
  w.u32(static_cast<std::uint32_t>(bundle.tensors.size()));
  w.text32(format_architecture(bundle.architecture));
  w.text32(format_preprocessing(bundle.preprocessing));
  w.u32(static_cast<std::uint32_t>(bundle.class_labels.size()));
  for (const auto& label : bundle.class_labels) {
    require(label.size() <= UINT16_MAX, Errc::invalid_argument, "class label too long");
    w.u16(static_cast<std::uint16_t>(label.size()));
    w.raw(label);
  }
  for (const WeightArray& t : bundle.tensors) {
    require(t.name.size() <= UINT16_MAX, Errc::invalid_argument, "tensor name too long");
    require(t.dims.size() <= UINT8_MAX, Errc::invalid_argument, "tensor rank too large");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.values) w.f32(v);
  }
  w.u32(crc32(w.bytes()));
  return std::move(w.bytes());
}

ModelBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(kBundleMagic.size(), "magic");
  require(std::equal(magic.begin(), magic.end(), kBundleMagic.begin(),
                     [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); }),
          Errc::bad_magic, "not a model bundle (bad magic bytes)");
  ModelBundle b;
  b.format_version = r.uint(4, "version");
  require(b.format_version == kBundleVersion, Errc::unsupported_version,
          "unsupported bundle version " + std::to_string(b.format_version));
  const std::uint32_t count = r.uint(4, "tensor count");
  const std::string arch = r.text(r.uint(4, "architecture length"), "architecture block");
  const std::string prep = r.text(r.uint(4, "preprocessing length"), "preprocessing block");
  const std::uint32_t labels = r.uint(4, "label count");
  b.class_labels.clear();
  for (std::uint32_t i = 0; i < labels; ++i) b.class_labels.push_back(r.text(r.uint(2, "label length"), "label"));
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightArray t;
    t.name = r.text(r.uint(2, "tensor name length"), "tensor name");
    const std::uint32_t rank = r.uint(1, "tensor rank");
    std::uint64_t elements = rank == 0 ? 0 : 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.uint(4, "tensor dims"));
      elements *= t.dims.back();
      require(elements <= bytes.size(), Errc::truncated, "tensor '" + t.name + "' payload exceeds the file size");
    }
    const auto payload = r.take(static_cast<std::size_t>(elements) * 4, "tensor payload");
    t.values.resize(static_cast<std::size_t>(elements));
    for (std::size_t e = 0; e < t.values.size(); ++e) {
      std::uint32_t v = 0;
      for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(payload[e * 4 + static_cast<std::size_t>(k)]) << (8 * k);
      t.values[e] = std::bit_cast<float>(v);
    }
    b.tensors.push_back(std::move(t));
  }
  const std::size_t body = r.position();
  const std::uint32_t stored = r.uint(4, "checksum");
  require(r.remaining() == 0, Errc::format, std::to_string(r.remaining()) + " unexpected trailing bytes after checksum");
  const std::uint32_t actual = crc32(bytes.first(body));
  if (stored != actual) {
    std::ostringstream msg;
    msg << "checksum mismatch: stored " << std::hex << std::setw(8) << std::setfill('0') << stored << ", computed "
        << std::setw(8) << actual;
    throw Error(Errc::checksum_mismatch, msg.str());
  }
  b.architecture = parse_architecture(arch);
  b.preprocessing = parse_preprocessing(prep);
  check_bundle(b);
  return b;
}

void save(const ModelBundle& bundle, const std::filesystem::path& path) {
  const auto bytes = encode_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  require(static_cast<bool>(out), Errc::io, "failed writing '" + path.string() + "'");
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), Errc::io, "failed reading '" + path.string() + "'");
  return bytes;
}

}  // namespace

ModelBundle load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_bundle(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

double glorot_bound(const LayerSpec& layer, const Shape3& input) {
  double fan_in = 0, fan_out = 0;
  if (layer.kind == LayerKind::conv) {
    const double area = static_cast<double>(layer.kernel.h * layer.kernel.w);
    fan_in = static_cast<double>(input.c) * area;
    fan_out = static_cast<double>(layer.channels) * area;
  } else if (layer.kind == LayerKind::dense) {
    fan_in = static_cast<double>(input.size());
    fan_out = static_cast<double>(layer.features);
  } else {
    throw Error(Errc::invalid_argument, "glorot_bound: layer '" + layer.id + "' has no weight matrix");
  }
  return std::sqrt(6.0 / (fan_in + fan_out));
}

ModelBundle init_random_base(const ArchitectureConfig& config, std::uint64_t seed) {
  const LayerGraph graph = build(config);
  ModelBundle b;
  b.architecture = config;
  b.preprocessing.input_size = config.input;
  b.class_labels.clear();
  if (config.num_classes == 2) {
    b.class_labels = {"covid", "normal"};
  } else {
    for (Index k = 0; k < config.num_classes; ++k) b.class_labels.push_back("class" + std::to_string(k));
  }

  Rng rng(seed);
  b.tensors = weight_layout(graph);
  for (WeightArray& t : b.tensors) {
    const auto dot = t.name.rfind('.');
    const std::string layer_id = t.name.substr(0, dot), param = t.name.substr(dot + 1);
    const LayerSpec& layer = graph.layers[*graph.find(layer_id)];
    t.values.assign(t.element_count(), 0.0f);
    if (param == "weight") {
      const double bound = glorot_bound(layer, graph.shape_of(layer.inputs.front()));
      for (float& v : t.values) {
        float w = static_cast<float>(rng.uniform(-bound, bound));
        if (std::abs(static_cast<double>(w)) > bound) w = std::nextafter(w, 0.0f);
        v = w;
      }
    } else if (param == "gamma" || param == "var") {
      std::fill(t.values.begin(), t.values.end(), 1.0f);
    }
  }
  return b;
}

ModelBundle import_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  require(static_cast<bool>(in), Errc::io, "cannot open manifest '" + manifest.string() + "'");
  const auto dir = manifest.parent_path();
  const auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : dir / path;
  };

  ModelBundle b;
  bool have_arch = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string keyword;
    if (!(fields >> keyword) || keyword[0] == '#') continue;
    const std::string where = manifest.string() + ":" + std::to_string(line_no) + ": ";
    if (keyword == "architecture") {
      std::string path;
      require(static_cast<bool>(fields >> path), Errc::format, where + "architecture needs a path");
      std::ifstream cfg(resolve(path));
      require(static_cast<bool>(cfg), Errc::io, where + "cannot open '" + path + "'");
      std::stringstream text;
      text << cfg.rdbuf();
      b.architecture = parse_architecture(text.str());
      b.preprocessing.input_size = b.architecture.input;
      have_arch = true;
    } else if (keyword == "labels") {
      std::string list;
      require(static_cast<bool>(fields >> list), Errc::format, where + "labels needs a list");
      b.class_labels.clear();
      std::istringstream items(list);
      for (std::string item; std::getline(items, item, ',');) b.class_labels.push_back(item);
    } else if (keyword == "normalization") {
      std::string mean, stddev;
      require(static_cast<bool>(fields >> mean >> stddev), Errc::format, where + "normalization needs means and stds");
      b.preprocessing.normalization.mean = parse_triple(mean);
      b.preprocessing.normalization.stddev = parse_triple(stddev);
    } else if (keyword == "tensor") {
      std::string name, dims, path;
      require(static_cast<bool>(fields >> name >> dims >> path), Errc::format, where + "tensor needs name, dims, file");
      WeightArray t;
      t.name = name;
      std::istringstream ds(dims);
      for (std::string d; std::getline(ds, d, 'x');) {
        std::uint32_t v = 0;
        auto [ptr, ec] = std::from_chars(d.data(), d.data() + d.size(), v);
        require(ec == std::errc{} && ptr == d.data() + d.size(), Errc::format, where + "bad dimension '" + d + "'");
        t.dims.push_back(v);
      }
      const auto raw = read_file(resolve(path));
      require(raw.size() == t.element_count() * 4, Errc::shape_mismatch,
              where + "'" + path + "' holds " + std::to_string(raw.size()) + " bytes, expected " +
                  std::to_string(t.element_count() * 4));
      t.values.resize(t.element_count());
      for (std::size_t e = 0; e < t.values.size(); ++e) {
        std::uint32_t v = 0;
        for (std::size_t k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(raw[e * 4 + k]) << (8 * k);
        t.values[e] = std::bit_cast<float>(v);
      }
      b.tensors.push_back(std::move(t));
    } else {
      throw Error(Errc::format, where + "unknown keyword '" + keyword + "'");
    }
  }
  require(have_arch, Errc::format, manifest.string() + ": missing 'architecture' line");
  check_bundle(b);
  return b;
}

std::string model_id(const ModelBundle& bundle) {
  // the stored checksum; hashing the whole file would give the constant CRC residue
  const auto bytes = encode_bundle(bundle);
  std::uint32_t sum = 0;
  for (int i = 0; i < 4; ++i) sum |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + static_cast<std::size_t>(i)]) << (8 * i);
  std::ostringstream id;
  id << family_name(bundle.architecture.family) << "-" << std::hex << std::setw(8) << std::setfill('0') << sum;
  return id.str();
}

}  // namespace xrt
