#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xrt/error.hpp"

namespace xrt {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixf = RowMatrix<float>;
using Vectorf = Vector<float>;

struct Shape4 {
  Index n = 0, c = 0, h = 0, w = 0;

  Index size() const { return n * c * h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

/// Dense NCHW tensor. Storage is contiguous row-major over (n, c, h, w).
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;

  BasicTensor() = default;

  explicit BasicTensor(Shape4 shape, Scalar fill = Scalar(0))
      : shape_(check_shape(shape)), data_(static_cast<std::size_t>(shape.size()), fill) {}

  BasicTensor(Shape4 shape, std::vector<Scalar> data) : shape_(check_shape(shape)), data_(std::move(data)) {
    require(static_cast<Index>(data_.size()) == shape_.size(), Errc::shape_mismatch,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                to_string(shape_));
  }

  const Shape4& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return shape_.size(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator()(Index n, Index c, Index y, Index x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(Index n, Index c, Index y, Index x) const { return data_[offset(n, c, y, x)]; }

  Scalar* sample(Index n) { return data_.data() + n * shape_.c * shape_.h * shape_.w; }
  const Scalar* sample(Index n) const { return data_.data() + n * shape_.c * shape_.h * shape_.w; }

  /// (n, c*h*w) view, the flattening used by dense layers.
  Eigen::Map<const RowMatrix<Scalar>> flat() const {
    return {data_.data(), shape_.n, shape_.c * shape_.h * shape_.w};
  }
  Eigen::Map<RowMatrix<Scalar>> flat() { return {data_.data(), shape_.n, shape_.c * shape_.h * shape_.w}; }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static Shape4 check_shape(Shape4 s) {
    require(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0, Errc::shape_mismatch,
            "negative tensor dimension in " + to_string(s));
    return s;
  }

  std::size_t offset(Index n, Index c, Index y, Index x) const {
    return static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + y) * shape_.w + x);
  }

  Shape4 shape_;
  std::vector<Scalar> data_;
};

using Tensor = BasicTensor<float>;

}  // namespace xrt
