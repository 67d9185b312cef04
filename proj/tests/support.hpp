#pragma once

// Independent reference implementations and fixtures shared by the unit
// tests and the acceptance runner. Oracles are plain loops in double and
// deliberately share no code with the library kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "xrt/architectures.hpp"
#include "xrt/bundle.hpp"
#include "xrt/error.hpp"
#include "xrt/image.hpp"
#include "xrt/tensor.hpp"

namespace xrt::testing {

// ---------------------------------------------------------------- random

/// Values on a 1/8 grid in [-lim, lim]: float products and sums of these stay
/// exact for the tensor sizes used here, so any oracle mismatch is an
/// indexing error rather than rounding.
inline float dyadic(std::mt19937_64& gen, int lim = 10) {
  std::uniform_int_distribution<int> d(-8 * lim, 8 * lim);
  return static_cast<float>(d(gen)) / 8.0f;
}

inline Tensor random_tensor(std::mt19937_64& gen, Shape4 s, int lim = 10) {
  Tensor t(s);
  for (float& v : t.data()) v = dyadic(gen, lim);
  return t;
}

inline Index pick(std::mt19937_64& gen, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(gen);
}

inline double uniform(std::mt19937_64& gen, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(gen);
}

// ---------------------------------------------------------------- kernels

inline double at(const Tensor& t, Index n, Index c, Index y, Index x) { return t(n, c, y, x); }

/// Output extent of a sliding window, written out longhand.
inline Index out_extent(Index in, Index k, Index s, Index p) {
  Index count = 0;
  for (Index start = -p; start + k <= in + p; start += s) ++count;
  return count;
}

inline std::vector<double> conv_oracle(const Tensor& in, const Tensor& w, const std::vector<float>& bias, Index sh,
                                       Index sw, Index ph, Index pw, Shape4& out_shape) {
  const Index oh = out_extent(in.h(), w.h(), sh, ph), ow = out_extent(in.w(), w.w(), sw, pw);
  out_shape = {in.n(), w.n(), oh, ow};
  std::vector<double> out;
  for (Index n = 0; n < in.n(); ++n)
    for (Index o = 0; o < w.n(); ++o)
      for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x) {
          double acc = bias[static_cast<std::size_t>(o)];
          for (Index c = 0; c < in.c(); ++c)
            for (Index ky = 0; ky < w.h(); ++ky)
              for (Index kx = 0; kx < w.w(); ++kx) {
                const Index iy = y * sh + ky - ph, ix = x * sw + kx - pw;
                if (iy < 0 || ix < 0 || iy >= in.h() || ix >= in.w()) continue;
                acc += at(in, n, c, iy, ix) * static_cast<double>(w(o, c, ky, kx));
              }
          out.push_back(acc);
        }
  return out;
}

/// Padded cells take no part in either max or mean.
inline std::vector<double> pool_oracle(const Tensor& in, bool is_max, Index kh, Index kw, Index sh, Index sw, Index ph,
                                       Index pw, Shape4& out_shape) {
  const Index oh = out_extent(in.h(), kh, sh, ph), ow = out_extent(in.w(), kw, sw, pw);
  out_shape = {in.n(), in.c(), oh, ow};
  std::vector<double> out;
  for (Index n = 0; n < in.n(); ++n)
    for (Index c = 0; c < in.c(); ++c)
      for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x) {
          double best = -INFINITY, sum = 0;
          int count = 0;
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index iy = y * sh + ky - ph, ix = x * sw + kx - pw;
              if (iy < 0 || ix < 0 || iy >= in.h() || ix >= in.w()) continue;
              best = std::max(best, at(in, n, c, iy, ix));
              sum += at(in, n, c, iy, ix);
              ++count;
            }
          out.push_back(is_max ? best : sum / count);
        }
  return out;
}

inline std::vector<double> gap_oracle(const Tensor& in) {
  std::vector<double> out;
  for (Index n = 0; n < in.n(); ++n)
    for (Index c = 0; c < in.c(); ++c) {
      double s = 0;
      for (Index y = 0; y < in.h(); ++y)
        for (Index x = 0; x < in.w(); ++x) s += at(in, n, c, y, x);
      out.push_back(s / static_cast<double>(in.h() * in.w()));
    }
  return out;
}

inline std::vector<double> batchnorm_oracle(const Tensor& in, const std::vector<double>& mean,
                                            const std::vector<double>& var, const std::vector<double>& gamma,
                                            const std::vector<double>& beta, double eps) {
  std::vector<double> out;
  for (Index n = 0; n < in.n(); ++n)
    for (Index c = 0; c < in.c(); ++c)
      for (Index y = 0; y < in.h(); ++y)
        for (Index x = 0; x < in.w(); ++x) {
          const auto k = static_cast<std::size_t>(c);
          out.push_back((at(in, n, c, y, x) - mean[k]) / std::sqrt(var[k] + eps) * gamma[k] + beta[k]);
        }
  return out;
}

/// x (n, f) row-major, w (f, k) row-major.
inline std::vector<double> dense_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                        const std::vector<double>& b, Index n, Index f, Index k) {
  std::vector<double> out(static_cast<std::size_t>(n * k));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) {
      double acc = b[static_cast<std::size_t>(j)];
      for (Index q = 0; q < f; ++q) acc += x[static_cast<std::size_t>(i * f + q)] * w[static_cast<std::size_t>(q * k + j)];
      out[static_cast<std::size_t>(i * k + j)] = acc;
    }
  return out;
}

/// Mean softmax cross-entropy of the dense head, for finite differences.
inline double head_loss_oracle(const std::vector<double>& x, const std::vector<int>& labels,
                               const std::vector<double>& w, const std::vector<double>& b, Index n, Index f, Index k) {
  const auto logits = dense_oracle(x, w, b, n, f, k);
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (Index j = 0; j < k; ++j) m = std::max(m, logits[static_cast<std::size_t>(i * k + j)]);
    double z = 0;
    for (Index j = 0; j < k; ++j) z += std::exp(logits[static_cast<std::size_t>(i * k + j)] - m);
    total -= logits[static_cast<std::size_t>(i * k + labels[static_cast<std::size_t>(i)])] - m - std::log(z);
  }
  return total / static_cast<double>(n);
}

inline double relative_error(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

// ---------------------------------------------------------------- architectures

/// Parameters of one layer from its kind and input shape, longhand.
inline std::uint64_t parameter_oracle(const LayerSpec& l, const Shape3& in) {
  if (l.kind == LayerKind::conv) {
    const std::uint64_t weights = static_cast<std::uint64_t>(l.channels) * static_cast<std::uint64_t>(in.c) *
                                  static_cast<std::uint64_t>(l.kernel.h) * static_cast<std::uint64_t>(l.kernel.w);
    return weights + static_cast<std::uint64_t>(l.channels);
  }
  if (l.kind == LayerKind::dense) {
    const std::uint64_t fan_in = static_cast<std::uint64_t>(in.c) * static_cast<std::uint64_t>(in.h) *
                                 static_cast<std::uint64_t>(in.w);
    return fan_in * static_cast<std::uint64_t>(l.features) + static_cast<std::uint64_t>(l.features);
  }
  if (l.kind == LayerKind::batchnorm) return static_cast<std::uint64_t>(in.c) * 4;  // gamma beta mean var
  return 0;
}

/// Pooled base features of one preprocessed input, computed by a plain
/// double-precision walk over the bundle's graph.
std::vector<double> reference_features(const ModelBundle& bundle, const Tensor& input);

/// A random valid graph: chains of conv / batchnorm / relu / pooling with
/// occasional two-branch add or concat blocks, then gap -> dense -> softmax.
LayerGraph random_graph(std::mt19937_64& gen, Shape3& input);

// ---------------------------------------------------------------- evaluation

/// Probability that a random positive outscores a random negative, ties 1/2.
inline double concordance_oracle(const std::vector<double>& scores, const std::vector<int>& truth, int positive) {
  double wins = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (truth[i] != positive) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (truth[j] == positive) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

/// Half-away-from-zero rounding of num/den to 2 decimals, exact in integers.
/// Returns hundredths.
inline long long round2_exact(long long num, long long den) {
  if (den == 0) return 0;
  return (200 * num + den) / (2 * den);  // non-negative inputs only
}

/// f1 = 2 tp / (2 tp + fp + fn) as a fraction.
inline std::pair<long long, long long> f1_fraction(long long tp, long long fp, long long fn) {
  return {2 * tp, 2 * tp + fp + fn};
}

/// A 2x2 report at two decimals, in hundredths: per class precision,
/// recall, f1, then accuracy.
struct Rounded2x2 {
  std::array<long long, 3> cls0{}, cls1{};
  long long accuracy = 0;
  friend bool operator==(const Rounded2x2&, const Rounded2x2&) = default;
};

/// [[a, b], [c, d]], rows true, columns predicted; exact integer rounding.
inline Rounded2x2 rounded_oracle(long long a, long long b, long long c, long long d) {
  const auto f0 = f1_fraction(a, c, b), f1 = f1_fraction(d, b, c);
  return {{round2_exact(a, a + c), round2_exact(a, a + b), round2_exact(f0.first, f0.second)},
          {round2_exact(d, b + d), round2_exact(d, c + d), round2_exact(f1.first, f1.second)},
          round2_exact(a + d, a + b + c + d)};
}

/// Every matrix with both row sums equal to `support` whose rounded report
/// equals `target`, as (a, c) pairs: [[a, support - a], [c, support - c]].
inline std::vector<std::pair<long long, long long>> integer_search(const Rounded2x2& target, long long support) {
  std::vector<std::pair<long long, long long>> hits;
  for (long long a = 0; a <= support; ++a)
    for (long long c = 0; c <= support; ++c)
      if (rounded_oracle(a, support - a, c, support - c) == target) hits.emplace_back(a, c);
  return hits;
}

// ---------------------------------------------------------------- suites

struct CaseResult {
  std::string description;
  double max_error = 0.0;
};

/// One random kernel configuration (tensors at most 2x8x16x16) compared
/// against its loop oracle; `kind` cycles conv, pool, gap, dense, batchnorm.
CaseResult kernel_case(std::mt19937_64& gen, int kind);

/// One random head (batch <= 8, features <= 16, k = 2): largest relative
/// error between head_backward and central differences with step 1e-3.
CaseResult gradient_case(std::mt19937_64& gen);

// ---------------------------------------------------------------- files

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("xrt-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

struct CommandResult {
  int exit_code = -1;
  std::string out, err;
};

/// Runs `command` through the shell, capturing stdout and stderr.
CommandResult run_command(const std::string& command, const TempDir& scratch);

/// PNG encoded by libpng, independent of the library's decoder.
std::vector<std::uint8_t> encode_png_libpng(const ImageGrid& grid, bool interlaced = false);

}  // namespace xrt::testing

// ---------------------------------------------------------------- bundles

namespace xrt::testing {

/// Small desk-sized vgg16 bundle with seeded random weights.
ModelBundle small_bundle(std::uint64_t seed = 1, Index input = 32);

/// A vgg16 desk model (width 1/4, 64x64) whose head was fine-tuned on a
/// small synthetic set with cached features; classifies synthetic images of
/// other seeds correctly.
ModelBundle trained_bundle();

/// A fresh synthetic image of the given class, encoded as PNG.
std::vector<std::uint8_t> synthetic_png(bool covid, std::uint64_t seed);

struct CorruptFixture {
  std::string name;
  std::vector<std::uint8_t> bytes;
  Errc expected;
};

/// Damaged variants of a valid encoding: bad magic, future version,
/// truncation at several offsets, a conv weight with its two leading dims
/// swapped (CRC recomputed, so only the shape check can catch it), a single
/// flipped payload bit and trailing garbage.
std::vector<CorruptFixture> corrupt_fixtures(const std::vector<std::uint8_t>& good);

}  // namespace xrt::testing
