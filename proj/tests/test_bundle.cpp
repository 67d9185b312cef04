#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "support.hpp"
#include "xrt/bundle.hpp"
#include "xrt/error.hpp"

using namespace xrt;
using namespace xrt::testing;

namespace {

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an xrt::Error");
  return Errc::invalid_argument;
}

bool bitwise_equal(const ModelBundle& a, const ModelBundle& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& x = a.tensors[i].values;
    const auto& y = b.tensors[i].values;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return a == b;
}

}  // namespace

TEST_CASE("crc32 check value") {
  const std::string s = "123456789";
  CHECK(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
}

TEST_CASE("header bytes follow the documented layout") {
  const auto bytes = encode_bundle(small_bundle());
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "XRTB");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  const std::uint32_t count = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | static_cast<std::uint32_t>(bytes[11]) << 24;
  CHECK(count == small_bundle().tensors.size());
}

TEST_CASE("save then load is a bitwise identity, including odd float payloads") {
  ModelBundle b = small_bundle(5);
  auto& v = b.tensors.front().values;
  v[0] = -0.0f;
  v[1] = std::numeric_limits<float>::denorm_min();
  v[2] = std::bit_cast<float>(0x7fc12345u);  // NaN with a payload
  v[3] = std::numeric_limits<float>::infinity();
  b.preprocessing.normalization = {{0.1f, 0.2f, 0.3f}, {0.7f, 0.8f, 0.9f}};

  TempDir dir("bundle");
  save(b, dir / "m.xrtb");
  const ModelBundle back = load(dir / "m.xrtb");
  CHECK(bitwise_equal(b, back));
  CHECK(std::bit_cast<std::uint32_t>(back.tensors.front().values[0]) == 0x80000000u);
  CHECK(std::bit_cast<std::uint32_t>(back.tensors.front().values[2]) == 0x7fc12345u);

  save(back, dir / "again.xrtb");
  CHECK(read_bytes(dir / "m.xrtb") == read_bytes(dir / "again.xrtb"));
}

TEST_CASE("random round trips across families and seeds") {
  std::mt19937_64 gen(11);
  for (int i = 0; i < 12; ++i) {
    ArchitectureConfig c;
    c.family = static_cast<Family>(i % 3);
    c.preset = Preset::desk;
    c.width_scale = {1, static_cast<std::int64_t>(pick(gen, 4, 16))};
    c.input = {3, pick(gen, 32, 48), pick(gen, 32, 48)};
    const ModelBundle b = init_random_base(c, static_cast<std::uint64_t>(i));
    CHECK(bitwise_equal(decode_bundle(encode_bundle(b)), b));
  }
}

TEST_CASE("every corrupted fixture yields its own error class") {
  const auto good = encode_bundle(small_bundle());
  const auto fixtures = corrupt_fixtures(good);
  REQUIRE(fixtures.size() >= 8);
  for (const auto& f : fixtures) {
    INFO(f.name);
    CHECK(code_of([&] { decode_bundle(f.bytes); }) == f.expected);
  }
}

TEST_CASE("shape conflicts name the layer") {
  const auto good = encode_bundle(small_bundle());
  for (const auto& f : corrupt_fixtures(good)) {
    if (f.expected != Errc::shape_mismatch) continue;
    try {
      decode_bundle(f.bytes);
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("block1_conv1") != std::string::npos);
    }
  }
}

TEST_CASE("invalid bundles are rejected before writing") {
  TempDir dir("reject");
  ModelBundle missing = small_bundle();
  missing.tensors.pop_back();
  CHECK(code_of([&] { save(missing, dir / "x"); }) == Errc::shape_mismatch);
  CHECK_FALSE(std::filesystem::exists(dir / "x"));

  ModelBundle empty = small_bundle();
  empty.tensors.front().dims.front() = 0;
  empty.tensors.front().values.clear();
  CHECK_THROWS_AS(save(empty, dir / "y"), Error);

  ModelBundle labels = small_bundle();
  labels.class_labels.push_back("other");
  CHECK(code_of([&] { encode_bundle(labels); }) == Errc::shape_mismatch);

  CHECK(code_of([&] { load(dir / "absent"); }) == Errc::io);
}

TEST_CASE("init_random_base is seeded and respects the Glorot bound") {
  const ModelBundle a = small_bundle(3), b = small_bundle(3), c = small_bundle(4);
  CHECK(encode_bundle(a) == encode_bundle(b));
  CHECK(encode_bundle(a) != encode_bundle(c));

  const LayerGraph g = build(a.architecture);
  for (const auto& t : a.tensors) {
    const auto dot = t.name.rfind('.');
    const std::string layer = t.name.substr(0, dot), param = t.name.substr(dot + 1);
    const LayerSpec& l = g.layers[*g.find(layer)];
    if (param == "weight") {
      const double bound = glorot_bound(l, g.shape_of(l.inputs.front()));
      for (float v : t.values) CHECK(std::fabs(v) <= bound);
    } else if (param == "bias" || param == "beta" || param == "mean") {
      for (float v : t.values) CHECK(v == 0.0f);
    }
  }
  CHECK(model_id(a).rfind("vgg16-", 0) == 0);
  CHECK(model_id(a) != model_id(c));
}

TEST_CASE("import_manifest assembles raw f32 files") {
  const ModelBundle ref = small_bundle(9);
  TempDir dir("manifest");
  {
    std::ofstream cfg(dir / "arch.cfg");
    cfg << format_architecture(ref.architecture);
  }
  std::ofstream m(dir / "weights.manifest");
  m << "# exported weights\narchitecture arch.cfg\nlabels covid,normal\n";
  for (const auto& t : ref.tensors) {
    std::vector<std::uint8_t> raw;
    for (float v : t.values) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      for (int k = 0; k < 4; ++k) raw.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
    }
    write_bytes(dir / (t.name + ".f32"), raw);
    std::string dims;
    for (std::size_t i = 0; i < t.dims.size(); ++i) dims += (i ? "x" : "") + std::to_string(t.dims[i]);
    m << "tensor " << t.name << " " << dims << " " << t.name << ".f32\n";
  }
  m.close();
  CHECK(bitwise_equal(import_manifest(dir / "weights.manifest"), ref));

  std::ofstream bad(dir / "bad.manifest");
  bad << "architecture arch.cfg\ntensor block1_conv1.weight 1x1 block1_conv1.weight.f32\n";
  bad.close();
  CHECK(code_of([&] { import_manifest(dir / "bad.manifest"); }) == Errc::shape_mismatch);
}
