#pragma once

// Forward kernels for every layer kind in the supported architectures, plus
// the exact gradient of the trainable head (dense + softmax cross-entropy).
// All kernels are pure; no kernel keeps state between calls.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xrt/error.hpp"
#include "xrt/tensor.hpp"

namespace xrt {

struct Extent2 {
  Index h = 1, w = 1;
  friend bool operator==(const Extent2&, const Extent2&) = default;
};

/// Output length of a strided window sweep over a zero-padded axis.
constexpr Index window_output(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename Scalar>
struct ConvParams {
  BasicTensor<Scalar> weights;  // (c_out, c_in, k_h, k_w)
  Vector<Scalar> bias;          // c_out
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
};

namespace detail {

inline void check_window(const char* op, Index in, Index kernel, Index stride, Index pad, const char* axis) {
  require(kernel >= 1, Errc::invalid_argument, std::string(op) + ": kernel " + axis + " must be >= 1");
  require(stride >= 1, Errc::invalid_argument, std::string(op) + ": stride " + axis + " must be >= 1");
  require(pad >= 0, Errc::invalid_argument, std::string(op) + ": padding " + axis + " must be >= 0");
  require(in + 2 * pad >= kernel, Errc::shape_mismatch,
          std::string(op) + ": padded " + axis + " extent " + std::to_string(in + 2 * pad) +
              " is smaller than kernel " + axis + " " + std::to_string(kernel));
}

}  // namespace detail

/// 2-D cross-correlation with zero padding, lowered to one GEMM per sample.
template <typename Scalar>
BasicTensor<Scalar> conv2d_forward(const BasicTensor<Scalar>& input, const ConvParams<Scalar>& p) {
  const Shape4& ws = p.weights.shape();
  const Index c_out = ws.n, c_in = ws.c, kh = ws.h, kw = ws.w;
  require(input.c() == c_in, Errc::shape_mismatch,
          "conv2d: input channel dimension c=" + std::to_string(input.c()) + " does not match kernel c_in=" +
              std::to_string(c_in));
  require(p.bias.size() == c_out, Errc::shape_mismatch,
          "conv2d: bias length " + std::to_string(p.bias.size()) + " does not match c_out=" + std::to_string(c_out));
  detail::check_window("conv2d", input.h(), kh, p.stride.h, p.padding.h, "height");
  detail::check_window("conv2d", input.w(), kw, p.stride.w, p.padding.w, "width");

  const Index oh = window_output(input.h(), kh, p.stride.h, p.padding.h);
  const Index ow = window_output(input.w(), kw, p.stride.w, p.padding.w);
  BasicTensor<Scalar> out({input.n(), c_out, oh, ow});

  const Index depth = c_in * kh * kw;
  const Index positions = oh * ow;
  Eigen::Map<const RowMatrix<Scalar>> kernel(p.weights.data().data(), c_out, depth);

  const bool pointwise = kh == 1 && kw == 1 && p.stride == Extent2{1, 1} && p.padding == Extent2{0, 0};
  RowMatrix<Scalar> columns;
  if (!pointwise) columns.resize(depth, positions);

  for (Index n = 0; n < input.n(); ++n) {
    const Scalar* src = input.sample(n);
    Eigen::Map<RowMatrix<Scalar>> dst(out.sample(n), c_out, positions);
    if (pointwise) {
      Eigen::Map<const RowMatrix<Scalar>> x(src, c_in, positions);
      dst.noalias() = kernel * x;
    } else {
      for (Index ci = 0; ci < c_in; ++ci) {
        const Scalar* plane = src + ci * input.h() * input.w();
        for (Index ky = 0; ky < kh; ++ky) {
          for (Index kx = 0; kx < kw; ++kx) {
            Scalar* row = columns.data() + ((ci * kh + ky) * kw + kx) * positions;
            for (Index oy = 0; oy < oh; ++oy) {
              const Index iy = oy * p.stride.h - p.padding.h + ky;
              Scalar* out_row = row + oy * ow;
              if (iy < 0 || iy >= input.h()) {
                std::fill(out_row, out_row + ow, Scalar(0));
                continue;
              }
              const Scalar* in_row = plane + iy * input.w();
              for (Index ox = 0; ox < ow; ++ox) {
                const Index ix = ox * p.stride.w - p.padding.w + kx;
                out_row[ox] = (ix < 0 || ix >= input.w()) ? Scalar(0) : in_row[ix];
              }
            }
          }
        }
      }
      dst.noalias() = kernel * columns;
    }
    dst.colwise() += p.bias;
  }
  return out;
}

enum class PoolKind { max, avg };

/// Windowed max/average pooling. Padded positions are excluded from the
/// window: max ignores them and avg divides by the number of real elements.
template <typename Scalar>
BasicTensor<Scalar> pool2d_forward(const BasicTensor<Scalar>& input, PoolKind kind, Extent2 kernel, Extent2 stride,
                                   Extent2 padding = {0, 0}) {
  detail::check_window("pool2d", input.h(), kernel.h, stride.h, padding.h, "height");
  detail::check_window("pool2d", input.w(), kernel.w, stride.w, padding.w, "width");
  require(padding.h < kernel.h && padding.w < kernel.w, Errc::invalid_argument,
          "pool2d: padding must be smaller than the kernel");

  const Index oh = window_output(input.h(), kernel.h, stride.h, padding.h);
  const Index ow = window_output(input.w(), kernel.w, stride.w, padding.w);
  BasicTensor<Scalar> out({input.n(), input.c(), oh, ow});

  for (Index n = 0; n < input.n(); ++n) {
    for (Index c = 0; c < input.c(); ++c) {
      for (Index oy = 0; oy < oh; ++oy) {
        const Index y0 = std::max<Index>(oy * stride.h - padding.h, 0);
        const Index y1 = std::min<Index>(oy * stride.h - padding.h + kernel.h, input.h());
        for (Index ox = 0; ox < ow; ++ox) {
          const Index x0 = std::max<Index>(ox * stride.w - padding.w, 0);
          const Index x1 = std::min<Index>(ox * stride.w - padding.w + kernel.w, input.w());
          Scalar acc = kind == PoolKind::max ? -std::numeric_limits<Scalar>::infinity() : Scalar(0);
          for (Index y = y0; y < y1; ++y) {
            for (Index x = x0; x < x1; ++x) {
              const Scalar v = input(n, c, y, x);
              acc = kind == PoolKind::max ? std::max(acc, v) : acc + v;
            }
          }
          if (kind == PoolKind::avg) acc /= static_cast<Scalar>((y1 - y0) * (x1 - x0));
          out(n, c, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> global_avg_pool(const BasicTensor<Scalar>& input) {
  require(input.h() >= 1 && input.w() >= 1, Errc::shape_mismatch,
          "global_avg_pool: empty spatial extent " + to_string(input.shape()));
  const Index area = input.h() * input.w();
  BasicTensor<Scalar> out({input.n(), input.c(), 1, 1});
  Eigen::Map<const RowMatrix<Scalar>> planes(input.data().data(), input.n() * input.c(), area);
  Eigen::Map<Vector<Scalar>> means(out.data().data(), input.n() * input.c());
  means = planes.rowwise().sum() / static_cast<Scalar>(area);
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> relu(BasicTensor<Scalar> input) {
  for (Scalar& v : input.data()) v = std::max(v, Scalar(0));
  return input;
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel. Evaluated in
/// double and rounded once, so the result is the correctly rounded value.
template <typename Scalar>
BasicTensor<Scalar> batchnorm_inference(const BasicTensor<Scalar>& input, const Vector<Scalar>& mean,
                                        const Vector<Scalar>& var, const Vector<Scalar>& gamma,
                                        const Vector<Scalar>& beta, double eps) {
  const Index c = input.c();
  for (const auto* v : {&mean, &var, &gamma, &beta}) {
    require(v->size() == c, Errc::shape_mismatch,
            "batchnorm: parameter length " + std::to_string(v->size()) + " does not match channel dimension c=" +
                std::to_string(c));
  }
  require(eps > 0, Errc::invalid_argument, "batchnorm: eps must be positive");
  require((var.array() >= Scalar(0)).all(), Errc::invalid_argument, "batchnorm: variance must be non-negative");

  BasicTensor<Scalar> out(input.shape());
  const Index area = input.h() * input.w();
  for (Index n = 0; n < input.n(); ++n) {
    for (Index ch = 0; ch < c; ++ch) {
      const double m = mean[ch], g = gamma[ch], b = beta[ch];
      const double denom = std::sqrt(static_cast<double>(var[ch]) + eps);
      const Scalar* src = input.sample(n) + ch * area;
      Scalar* dst = out.sample(n) + ch * area;
      for (Index i = 0; i < area; ++i) dst[i] = static_cast<Scalar>(g * (src[i] - m) / denom + b);
    }
  }
  return out;
}

enum class MergeKind { add, concat_channels };

template <typename Scalar>
BasicTensor<Scalar> merge(std::span<const BasicTensor<Scalar>* const> inputs, MergeKind kind) {
  require(!inputs.empty(), Errc::invalid_argument, "merge: no inputs");
  const Shape4& first = inputs.front()->shape();
  if (kind == MergeKind::add) {
    BasicTensor<Scalar> out = *inputs.front();
    for (std::size_t i = 1; i < inputs.size(); ++i) {
      const Shape4& s = inputs[i]->shape();
      const char* dim = s.n != first.n ? "n" : s.c != first.c ? "c" : s.h != first.h ? "h" : s.w != first.w ? "w" : nullptr;
      require(dim == nullptr, Errc::shape_mismatch,
              std::string("merge(add): input ") + std::to_string(i) + " differs in dimension " + (dim ? dim : "") +
                  " (" + to_string(s) + " vs " + to_string(first) + ")");
      auto acc = Eigen::Map<Vector<Scalar>>(out.data().data(), out.size());
      acc += Eigen::Map<const Vector<Scalar>>(inputs[i]->data().data(), s.size());
    }
    return out;
  }

  Index channels = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape4& s = inputs[i]->shape();
    const char* dim = s.n != first.n ? "n" : s.h != first.h ? "h" : s.w != first.w ? "w" : nullptr;
    require(dim == nullptr, Errc::shape_mismatch,
            std::string("merge(concat): input ") + std::to_string(i) + " differs in dimension " + (dim ? dim : "") +
                " (" + to_string(s) + " vs " + to_string(first) + ")");
    channels += s.c;
  }
  BasicTensor<Scalar> out({first.n, channels, first.h, first.w});
  const Index area = first.h * first.w;
  for (Index n = 0; n < first.n; ++n) {
    Scalar* dst = out.sample(n);
    for (const auto* t : inputs) {
      const Scalar* src = t->sample(n);
      dst = std::copy(src, src + t->c() * area, dst);
    }
  }
  return out;
}

template <typename Scalar>
BasicTensor<Scalar> merge(std::initializer_list<const BasicTensor<Scalar>*> inputs, MergeKind kind) {
  return merge(std::span<const BasicTensor<Scalar>* const>(inputs.begin(), inputs.size()), kind);
}

/// output = input * weights + bias, with input (n, f), weights (f, k).
template <typename DerivedX, typename DerivedW, typename DerivedB>
RowMatrix<typename DerivedX::Scalar> dense_forward(const Eigen::MatrixBase<DerivedX>& input,
                                                   const Eigen::MatrixBase<DerivedW>& weights,
                                                   const Eigen::MatrixBase<DerivedB>& bias) {
  require(input.cols() == weights.rows(), Errc::shape_mismatch,
          "dense: input feature count " + std::to_string(input.cols()) + " does not match weight rows " +
              std::to_string(weights.rows()));
  require(bias.size() == weights.cols(), Errc::shape_mismatch,
          "dense: bias length " + std::to_string(bias.size()) + " does not match weight columns " +
              std::to_string(weights.cols()));
  RowMatrix<typename DerivedX::Scalar> out = input * weights;
  out.rowwise() += bias.derived().transpose();
  return out;
}

template <typename Scalar, typename DerivedW, typename DerivedB>
RowMatrix<Scalar> dense_forward(const BasicTensor<Scalar>& input, const Eigen::MatrixBase<DerivedW>& weights,
                                const Eigen::MatrixBase<DerivedB>& bias) {
  return dense_forward(input.flat(), weights, bias);
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  require(logits.cols() >= 1, Errc::invalid_argument, "softmax: need at least one class");
  RowMatrix<Scalar> out = logits;
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

/// Probability floor applied before the log in cross-entropy.
inline constexpr double kProbabilityFloor = 1e-12;

/// Mean cross-entropy of probabilities against one-hot labels.
template <typename DerivedP, typename DerivedY>
double cross_entropy(const Eigen::MatrixBase<DerivedP>& probabilities, const Eigen::MatrixBase<DerivedY>& labels) {
  require(probabilities.rows() == labels.rows() && probabilities.cols() == labels.cols(), Errc::shape_mismatch,
          "cross_entropy: probability and label shapes differ");
  if (probabilities.rows() == 0) return 0.0;
  double total = 0.0;
  for (Index r = 0; r < probabilities.rows(); ++r) {
    for (Index k = 0; k < probabilities.cols(); ++k) {
      if (labels(r, k) != 0) {
        total -= static_cast<double>(labels(r, k)) *
                 std::log(std::max(static_cast<double>(probabilities(r, k)), kProbabilityFloor));
      }
    }
  }
  return total / static_cast<double>(probabilities.rows());
}

template <typename Scalar>
struct HeadGradients {
  RowMatrix<Scalar> d_weights;  // (f, k)
  Vector<Scalar> d_bias;        // k
  double loss = 0.0;
};

/// Loss and parameter gradients of mean softmax cross-entropy for the dense
/// head. Accumulates in double regardless of Scalar.
template <typename DerivedX, typename DerivedY, typename DerivedW, typename DerivedB>
HeadGradients<typename DerivedW::Scalar> head_backward(const Eigen::MatrixBase<DerivedX>& features,
                                                       const Eigen::MatrixBase<DerivedY>& labels,
                                                       const Eigen::MatrixBase<DerivedW>& weights,
                                                       const Eigen::MatrixBase<DerivedB>& bias) {
  using Scalar = typename DerivedW::Scalar;
  require(labels.rows() == features.rows() && labels.cols() == weights.cols(), Errc::shape_mismatch,
          "head_backward: labels must be (n, k) with n=" + std::to_string(features.rows()) +
              " k=" + std::to_string(weights.cols()));
  require(features.rows() >= 1, Errc::invalid_argument, "head_backward: empty batch");

  const RowMatrix<double> x = features.template cast<double>();
  const RowMatrix<double> y = labels.template cast<double>();
  const RowMatrix<double> w = weights.template cast<double>();
  const Vector<double> b = bias.template cast<double>();

  const RowMatrix<double> probs = softmax(dense_forward(x, w, b));
  const double n = static_cast<double>(x.rows());
  const RowMatrix<double> d_logits = (probs - y) / n;

  HeadGradients<Scalar> g;
  g.loss = cross_entropy(probs, y);
  g.d_weights = (x.transpose() * d_logits).template cast<Scalar>();
  g.d_bias = d_logits.colwise().sum().transpose().template cast<Scalar>();
  return g;
}

}  // namespace xrt
