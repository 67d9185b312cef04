#include "support.hpp"

#include <png.h>

#include "xrt/kernels.hpp"

#include <fstream>
#include <iterator>
#include <stdexcept>

namespace xrt::testing {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

namespace {

void append(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

}  // namespace

std::vector<std::uint8_t> encode_png_libpng(const ImageGrid& grid, bool interlaced) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed");
  }
  png_set_write_fn(png, &out, append, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(grid.width), static_cast<png_uint_32>(grid.height), 8,
               grid.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               interlaced ? PNG_INTERLACE_ADAM7 : PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // every filter type, so the decoder's unfiltering is exercised
  png_set_filter(png, 0, PNG_ALL_FILTERS);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(grid.width * grid.channels));
  const int passes = interlaced ? png_set_interlace_handling(png) : 1;
  for (int pass = 0; pass < passes; ++pass) {
    for (Index y = 0; y < grid.height; ++y) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = static_cast<png_byte>(grid.pixels[static_cast<std::size_t>(y) * row.size() + i]);
      }
      png_write_row(png, row.data());
    }
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

namespace {

double max_abs_diff(std::span<const float> got, const std::vector<double>& want) {
  if (got.size() != want.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::fabs(got[i] - want[i]));
  return worst;
}

std::string shape_text(const Shape4& s) { return to_string(s); }

}  // namespace

CaseResult kernel_case(std::mt19937_64& gen, int kind) {
  const Index n = pick(gen, 1, 2), c = pick(gen, 1, 8), h = pick(gen, 1, 16), w = pick(gen, 1, 16);
  const Tensor in = random_tensor(gen, {n, c, h, w});
  Shape4 shape;
  switch (kind % 5) {
    case 0: {
      const Index kh = pick(gen, 1, std::min<Index>(h, 5)), kw = pick(gen, 1, std::min<Index>(w, 5));
      const Index ph = pick(gen, 0, kh - 1), pw = pick(gen, 0, kw - 1);
      ConvParams<float> p{random_tensor(gen, {pick(gen, 1, 8), c, kh, kw}), {}, {pick(gen, 1, 3), pick(gen, 1, 3)},
                          {ph, pw}};
      p.bias.resize(p.weights.n());
      std::vector<float> bias;
      for (Index o = 0; o < p.weights.n(); ++o) bias.push_back(p.bias[o] = dyadic(gen));
      const Tensor out = conv2d_forward(in, p);
      const auto want = conv_oracle(in, p.weights, bias, p.stride.h, p.stride.w, ph, pw, shape);
      return {"conv " + shape_text(in.shape()) + " k" + std::to_string(kh) + "x" + std::to_string(kw),
              out.shape() == shape ? max_abs_diff(out.data(), want) : INFINITY};
    }
    case 1: {
      const bool is_max = pick(gen, 0, 1) == 1;
      const Index kh = pick(gen, 1, std::min<Index>(h, 4)), kw = pick(gen, 1, std::min<Index>(w, 4));
      const Index ph = pick(gen, 0, kh / 2), pw = pick(gen, 0, kw / 2);
      const Extent2 stride{pick(gen, 1, 3), pick(gen, 1, 3)};
      const Tensor out =
          pool2d_forward(in, is_max ? PoolKind::max : PoolKind::avg, {kh, kw}, stride, Extent2{ph, pw});
      const auto want = pool_oracle(in, is_max, kh, kw, stride.h, stride.w, ph, pw, shape);
      return {std::string(is_max ? "maxpool " : "avgpool ") + shape_text(in.shape()),
              out.shape() == shape ? max_abs_diff(out.data(), want) : INFINITY};
    }
    case 2: {
      const Tensor out = global_avg_pool(in);
      return {"gap " + shape_text(in.shape()), max_abs_diff(out.data(), gap_oracle(in))};
    }
    case 3: {
      const Index f = c * h * w, k = pick(gen, 1, 8);
      RowMatrixf wm(f, k);
      Vectorf b(k);
      std::vector<double> xs(in.data().begin(), in.data().end()), ws, bs;
      for (Index q = 0; q < f; ++q)
        for (Index j = 0; j < k; ++j) ws.push_back(wm(q, j) = dyadic(gen, 1));
      for (Index j = 0; j < k; ++j) bs.push_back(b[j] = dyadic(gen));
      const RowMatrixf out = dense_forward(in, wm, b);
      return {"dense " + std::to_string(f) + "->" + std::to_string(k),
              max_abs_diff({out.data(), static_cast<std::size_t>(out.size())}, dense_oracle(xs, ws, bs, n, f, k))};
    }
    default: {
      Vectorf mean(c), var(c), gamma(c), beta(c);
      std::vector<double> m, v, g, b;
      for (Index i = 0; i < c; ++i) {
        m.push_back(mean[i] = dyadic(gen));
        v.push_back(var[i] = static_cast<float>(pick(gen, 8, 80)) / 8.0f);
        g.push_back(gamma[i] = dyadic(gen, 1));
        b.push_back(beta[i] = dyadic(gen, 1));
      }
      const double eps = 1e-3;
      const Tensor out = batchnorm_inference(in, mean, var, gamma, beta, eps);
      return {"batchnorm " + shape_text(in.shape()), max_abs_diff(out.data(), batchnorm_oracle(in, m, v, g, b, eps))};
    }
  }
}

CaseResult gradient_case(std::mt19937_64& gen) {
  const Index n = pick(gen, 1, 8), f = pick(gen, 1, 16), k = 2;
  RowMatrixf x(n, f), y = RowMatrixf::Zero(n, k), w(f, k);
  Vectorf b(k);
  std::vector<double> xs, ws, bs;
  std::vector<int> labels;
  for (Index i = 0; i < n; ++i)
    for (Index q = 0; q < f; ++q) xs.push_back(x(i, q) = static_cast<float>(uniform(gen, -1, 1)));
  for (Index q = 0; q < f; ++q)
    for (Index j = 0; j < k; ++j) ws.push_back(w(q, j) = static_cast<float>(uniform(gen, -1, 1)));
  for (Index j = 0; j < k; ++j) bs.push_back(b[j] = static_cast<float>(uniform(gen, -1, 1)));
  for (Index i = 0; i < n; ++i) {
    labels.push_back(static_cast<int>(pick(gen, 0, 1)));
    y(i, labels.back()) = 1.0f;
  }

  const auto g = head_backward(x, y, w, b);
  const double h = 1e-3;
  double worst = 0;
  const auto central = [&](std::vector<double>& param, std::size_t i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = head_loss_oracle(xs, labels, ws, bs, n, f, k);
    param[i] = keep - h;
    const double down = head_loss_oracle(xs, labels, ws, bs, n, f, k);
    param[i] = keep;
    return (up - down) / (2 * h);
  };
  for (Index q = 0; q < f; ++q)
    for (Index j = 0; j < k; ++j)
      worst = std::max(worst, relative_error(g.d_weights(q, j), central(ws, static_cast<std::size_t>(q * k + j))));
  for (Index j = 0; j < k; ++j) worst = std::max(worst, relative_error(g.d_bias[j], central(bs, static_cast<std::size_t>(j))));
  return {"head n=" + std::to_string(n) + " f=" + std::to_string(f), worst};
}

LayerGraph random_graph(std::mt19937_64& gen, Shape3& input) {
  input = {pick(gen, 1, 4), pick(gen, 8, 32), pick(gen, 8, 32)};
  LayerGraph g;
  int next = 0;
  const auto add = [&](LayerKind kind, std::vector<std::string> from) -> LayerSpec& {
    LayerSpec l;
    l.id = std::string(kind_name(kind)) + std::to_string(next++);
    l.kind = kind;
    l.inputs = std::move(from);
    g.layers.push_back(std::move(l));
    return g.layers.back();
  };
  const auto conv = [&](const std::string& from, Index channels) {
    LayerSpec& l = add(LayerKind::conv, {from});
    const Index k = 2 * pick(gen, 0, 2) + 1;
    l.kernel = {k, k};
    l.padding = {k / 2, k / 2};
    l.channels = channels;
    return l.id;
  };

  add(LayerKind::input, {});
  std::string x = g.layers.back().id;
  Index h = input.h;
  const Index steps = pick(gen, 2, 8);
  for (Index s = 0; s < steps; ++s) {
    switch (pick(gen, 0, 4)) {
      case 0:
        x = conv(x, pick(gen, 1, 16));
        break;
      case 1:
        x = add(LayerKind::batchnorm, {x}).id;
        x = add(LayerKind::relu, {x}).id;
        break;
      case 2:
        if (h >= 4) {
          LayerSpec& l = add(pick(gen, 0, 1) ? LayerKind::maxpool : LayerKind::avgpool, {x});
          l.kernel = l.stride = {2, 2};
          x = l.id;
          h = std::min(h, input.w) / 2;
        }
        break;
      case 3: {
        const Index c = pick(gen, 1, 8);
        const std::string a = conv(x, c), b = conv(x, c);
        x = add(LayerKind::add, {a, b}).id;
        break;
      }
      default: {
        const std::string a = conv(x, pick(gen, 1, 8)), b = conv(x, pick(gen, 1, 8));
        x = add(LayerKind::concat, {a, b}).id;
        break;
      }
    }
  }
  g.head_begin = g.layers.size();
  x = add(LayerKind::gap, {x}).id;
  LayerSpec& dense = add(LayerKind::dense, {x});
  dense.features = pick(gen, 2, 5);
  add(LayerKind::softmax, {dense.id});
  return validate_shapes(std::move(g), input);
}

}  // namespace xrt::testing

namespace xrt::testing {

ModelBundle small_bundle(std::uint64_t seed, Index input) {
  ArchitectureConfig c;
  c.family = Family::vgg16;
  c.preset = Preset::desk;
  c.width_scale = {1, 8};
  c.input = {3, input, input};
  return init_random_base(c, seed);
}

namespace {

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

void reseal(std::vector<std::uint8_t>& b) {
  const std::size_t body = b.size() - 4;
  put_u32(b, body, crc32(std::span<const std::uint8_t>(b.data(), body)));
}

}  // namespace

std::vector<CorruptFixture> corrupt_fixtures(const std::vector<std::uint8_t>& good) {
  std::vector<CorruptFixture> out;

  auto magic = good;
  magic[0] = 'P';
  out.push_back({"bad magic", magic, Errc::bad_magic});

  auto version = good;
  put_u32(version, 4, 2);
  reseal(version);
  out.push_back({"version 2", version, Errc::unsupported_version});

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    out.push_back({"truncated to " + std::to_string(cut) + " bytes",
                   std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)),
                   Errc::truncated});
  }

  // u16 length + name, then u8 rank and the dims
  const std::string name = "block1_conv1.weight";
  const auto hit = std::search(good.begin(), good.end(), name.begin(), name.end());
  if (hit != good.end()) {
    const auto dims = static_cast<std::size_t>(hit - good.begin()) + name.size() + 1;
    auto swapped = good;
    const std::uint32_t d0 = get_u32(good, dims), d1 = get_u32(good, dims + 4);
    put_u32(swapped, dims, d1);
    put_u32(swapped, dims + 4, d0);
    reseal(swapped);
    out.push_back({"conv weight dims swapped", swapped, Errc::shape_mismatch});
  }

  auto flipped = good;
  flipped[good.size() - 9] ^= 0x01;
  out.push_back({"one payload bit flipped", flipped, Errc::checksum_mismatch});

  auto trailing = good;
  trailing.push_back(0);
  out.push_back({"trailing byte", trailing, Errc::format});
  return out;
}

}  // namespace xrt::testing

namespace xrt::testing {

namespace {

struct Map {
  Index c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(Index ch, Index y, Index x) { return v[static_cast<std::size_t>((ch * h + y) * w + x)]; }
  double at(Index ch, Index y, Index x) const { return v[static_cast<std::size_t>((ch * h + y) * w + x)]; }
};

Map blank(Index c, Index h, Index w) { return {c, h, w, std::vector<double>(static_cast<std::size_t>(c * h * w))}; }

const std::vector<float>& values(const ModelBundle& b, const std::string& name) { return b.tensor(name).values; }

Map run_conv(const Map& in, const LayerSpec& l, const ModelBundle& b) {
  const auto& wt = values(b, l.id + ".weight");
  const auto& bias = values(b, l.id + ".bias");
  Map out = blank(l.channels, out_extent(in.h, l.kernel.h, l.stride.h, l.padding.h),
                  out_extent(in.w, l.kernel.w, l.stride.w, l.padding.w));
  for (Index o = 0; o < out.c; ++o)
    for (Index y = 0; y < out.h; ++y)
      for (Index x = 0; x < out.w; ++x) {
        double acc = bias[static_cast<std::size_t>(o)];
        for (Index c = 0; c < in.c; ++c)
          for (Index ky = 0; ky < l.kernel.h; ++ky)
            for (Index kx = 0; kx < l.kernel.w; ++kx) {
              const Index iy = y * l.stride.h + ky - l.padding.h, ix = x * l.stride.w + kx - l.padding.w;
              if (iy < 0 || ix < 0 || iy >= in.h || ix >= in.w) continue;
              acc += in.at(c, iy, ix) *
                     wt[static_cast<std::size_t>(((o * in.c + c) * l.kernel.h + ky) * l.kernel.w + kx)];
            }
        out.at(o, y, x) = acc;
      }
  return out;
}

Map run_pool(const Map& in, const LayerSpec& l) {
  Map out = blank(in.c, out_extent(in.h, l.kernel.h, l.stride.h, l.padding.h),
                  out_extent(in.w, l.kernel.w, l.stride.w, l.padding.w));
  for (Index c = 0; c < in.c; ++c)
    for (Index y = 0; y < out.h; ++y)
      for (Index x = 0; x < out.w; ++x) {
        double best = -INFINITY, sum = 0;
        int n = 0;
        for (Index ky = 0; ky < l.kernel.h; ++ky)
          for (Index kx = 0; kx < l.kernel.w; ++kx) {
            const Index iy = y * l.stride.h + ky - l.padding.h, ix = x * l.stride.w + kx - l.padding.w;
            if (iy < 0 || ix < 0 || iy >= in.h || ix >= in.w) continue;
            best = std::max(best, in.at(c, iy, ix));
            sum += in.at(c, iy, ix);
            ++n;
          }
        out.at(c, y, x) = l.kind == LayerKind::maxpool ? best : sum / n;
      }
  return out;
}

}  // namespace

std::vector<double> reference_features(const ModelBundle& bundle, const Tensor& input) {
  const LayerGraph g = build(bundle.architecture);
  std::vector<Map> maps(g.layers.size());
  const auto index = [&](const std::string& id) { return *g.find(id); };
  for (std::size_t i = 0; i < g.head_begin; ++i) {
    const LayerSpec& l = g.layers[i];
    Map out;
    switch (l.kind) {
      case LayerKind::input:
        out = blank(input.c(), input.h(), input.w());
        for (Index c = 0; c < input.c(); ++c)
          for (Index y = 0; y < input.h(); ++y)
            for (Index x = 0; x < input.w(); ++x) out.at(c, y, x) = input(0, c, y, x);
        break;
      case LayerKind::conv:
        out = run_conv(maps[index(l.inputs[0])], l, bundle);
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        out = run_pool(maps[index(l.inputs[0])], l);
        break;
      case LayerKind::relu:
        out = maps[index(l.inputs[0])];
        for (double& v : out.v) v = std::max(v, 0.0);
        break;
      case LayerKind::batchnorm: {
        out = maps[index(l.inputs[0])];
        const auto &m = values(bundle, l.id + ".mean"), &var = values(bundle, l.id + ".var"),
                   &ga = values(bundle, l.id + ".gamma"), &be = values(bundle, l.id + ".beta");
        for (Index c = 0; c < out.c; ++c) {
          const auto k = static_cast<std::size_t>(c);
          for (Index y = 0; y < out.h; ++y)
            for (Index x = 0; x < out.w; ++x)
              out.at(c, y, x) = (out.at(c, y, x) - m[k]) / std::sqrt(var[k] + l.eps) * ga[k] + be[k];
        }
        break;
      }
      case LayerKind::add:
        out = maps[index(l.inputs[0])];
        for (std::size_t k = 1; k < l.inputs.size(); ++k) {
          const Map& other = maps[index(l.inputs[k])];
          for (std::size_t e = 0; e < out.v.size(); ++e) out.v[e] += other.v[e];
        }
        break;
      case LayerKind::concat: {
        const Map& first = maps[index(l.inputs[0])];
        out = blank(0, first.h, first.w);
        for (const auto& id : l.inputs) {
          const Map& part = maps[index(id)];
          out.c += part.c;
          out.v.insert(out.v.end(), part.v.begin(), part.v.end());  // channel-major, so appending stacks channels
        }
        break;
      }
      default:
        throw std::runtime_error("reference_features: unexpected layer in base");
    }
    maps[i] = std::move(out);
  }
  const Map& last = maps[index(g.layers[g.head_begin].inputs[0])];
  std::vector<double> pooled(static_cast<std::size_t>(last.c), 0.0);
  for (Index c = 0; c < last.c; ++c) {
    for (Index y = 0; y < last.h; ++y)
      for (Index x = 0; x < last.w; ++x) pooled[static_cast<std::size_t>(c)] += last.at(c, y, x);
    pooled[static_cast<std::size_t>(c)] /= static_cast<double>(last.h * last.w);
  }
  return pooled;
}

}  // namespace xrt::testing

#include "xrt/training.hpp"

namespace xrt::testing {

ModelBundle trained_bundle() {
  ArchitectureConfig c;
  c.width_scale = {1, 4};
  c.input = {3, 64, 64};
  const ModelBundle base = init_random_base(c, 42);
  SynthOptions o;
  o.n_per_class = 20;
  o.seed = 7;
  const LabeledDataset data = synth_dataset(o);
  const SplitPlan split = stratified_split(data, {1, 1}, 1);
  TrainConfig t;
  t.epochs = 60;
  t.batch_size = 8;
  t.learning_rate = 0.5;
  t.augmentation = AugmentationPolicy::identity();
  return fine_tune(base, data, split, t).bundle;
}

std::vector<std::uint8_t> synthetic_png(bool covid, std::uint64_t seed) {
  SynthOptions o;
  o.n_per_class = 1;
  o.seed = seed;
  for (const auto& r : synth_dataset(o).records)
    if ((r.label == Label::covid) == covid) return encode_png_libpng(r.pixels);
  throw std::runtime_error("synthetic_png: class missing");
}

}  // namespace xrt::testing

#include <sys/wait.h>

namespace xrt::testing {

CommandResult run_command(const std::string& command, const TempDir& scratch) {
  static int counter = 0;
  const auto out = scratch / ("cmd" + std::to_string(counter) + ".out");
  const auto err = scratch / ("cmd" + std::to_string(counter++) + ".err");
  const std::string full = command + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(full.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  const auto slurp = [](const std::filesystem::path& p) {
    const auto bytes = read_bytes(p);
    return std::string(bytes.begin(), bytes.end());
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

}  // namespace xrt::testing
