#pragma once

// Dense channels-last tensors and the probability / label primitives shared by
// every module. The trailing axis is always the class (or channel) axis, and a
// tensor of shape (d0, ..., dk, C) is viewed as a row-major (d0*...*dk) x C
// matrix wherever per-element class vectors are needed.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "imloss/errors.hpp"

namespace imloss {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Probability clip applied before any logarithm.
inline constexpr double kClipEps = 1e-7;

inline Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  if (shape.empty()) throw ValidationError("tensor shape must have at least one axis");
  for (Index d : shape) {
    if (d <= 0) throw ValidationError("tensor extents must be positive, got " + shape_string(shape));
  }
}

template <typename Scalar>
class Tensor {
 public:
  using Data = Vector<Scalar>;
  using MatrixView = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixView = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Data::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Data data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
    }
  }

  template <typename Derived>
  static Tensor from_matrix(Shape shape, const Eigen::MatrixBase<Derived>& m) {
    Tensor t(std::move(shape));
    if (m.rows() != t.elements() || m.cols() != t.classes()) {
      throw ValidationError("matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                            " does not fit shape " + shape_string(t.shape()));
    }
    t.matrix() = m.template cast<Scalar>();
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index classes() const { return shape_.empty() ? 0 : shape_.back(); }
  Index elements() const { return classes() == 0 ? 0 : size() / classes(); }
  bool empty() const { return data_.size() == 0; }

  const Data& data() const { return data_; }
  Data& data() { return data_; }

  ConstMatrixView matrix() const { return ConstMatrixView(data_.data(), elements(), classes()); }
  MatrixView matrix() { return MatrixView(data_.data(), elements(), classes()); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Data data_;
};

template <typename Scalar>
constexpr double default_sum_tolerance() {
  return std::is_same_v<Scalar, float> ? 1e-5 : 1e-9;
}

/// Per-element class probabilities: values in [0,1], rows summing to one.
template <typename Scalar>
class ProbTensor {
 public:
  explicit ProbTensor(Tensor<Scalar> t, double sum_tolerance = default_sum_tolerance<Scalar>())
      : tensor_(std::move(t)) {
    if (tensor_.empty()) throw ValidationError("probability tensor is empty");
    const auto m = tensor_.matrix();
    for (Index i = 0; i < m.rows(); ++i) {
      double sum = 0;
      for (Index c = 0; c < m.cols(); ++c) {
        const double v = m(i, c);
        if (!(v >= 0.0 && v <= 1.0)) {
          throw ValidationError("probability out of [0,1] at element " + std::to_string(i) +
                                ", class " + std::to_string(c));
        }
        sum += v;
      }
      if (std::abs(sum - 1.0) > sum_tolerance) {
        throw ValidationError("class probabilities of element " + std::to_string(i) +
                              " sum to " + std::to_string(sum));
      }
    }
  }

  const Tensor<Scalar>& tensor() const { return tensor_; }
  const Shape& shape() const { return tensor_.shape(); }
  auto matrix() const { return tensor_.matrix(); }

 private:
  Tensor<Scalar> tensor_;
};

/// Ground truth in one-hot layout: exactly one 1 per element.
template <typename Scalar>
class OneHotMask {
 public:
  explicit OneHotMask(Tensor<Scalar> t) : tensor_(std::move(t)) {
    if (tensor_.empty()) throw ValidationError("one-hot mask is empty");
    const auto m = tensor_.matrix();
    for (Index i = 0; i < m.rows(); ++i) {
      int ones = 0;
      for (Index c = 0; c < m.cols(); ++c) {
        const Scalar v = m(i, c);
        if (v == Scalar(1)) {
          ++ones;
        } else if (v != Scalar(0)) {
          throw ValidationError("one-hot mask value at element " + std::to_string(i) +
                                " is neither 0 nor 1");
        }
      }
      if (ones != 1) {
        throw ValidationError("one-hot mask element " + std::to_string(i) + " has " +
                              std::to_string(ones) + " active classes");
      }
    }
  }

  const Tensor<Scalar>& tensor() const { return tensor_; }
  const Shape& shape() const { return tensor_.shape(); }
  auto matrix() const { return tensor_.matrix(); }

  template <typename Other>
  OneHotMask<Other> cast() const {
    return OneHotMask<Other>(tensor_.template cast<Other>());
  }

 private:
  Tensor<Scalar> tensor_;
};

/// Row-wise max-subtracted softmax of an N x C matrix.
template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

template <typename Scalar>
ProbTensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  if (!logits.all_finite()) {
    const auto& d = logits.data();
    for (Index i = 0; i < d.size(); ++i) {
      if (!std::isfinite(static_cast<double>(d[i]))) {
        throw ValidationError("softmax: non-finite logit at flat index " + std::to_string(i));
      }
    }
  }
  return ProbTensor<Scalar>(Tensor<Scalar>::from_matrix(logits.shape(), softmax_rows(logits.matrix())));
}

/// Clamp probabilities into [eps, 1 - eps]. The class-sum invariant is relaxed
/// to within C * eps.
template <typename Scalar>
ProbTensor<Scalar> clip_probs(const ProbTensor<Scalar>& p, double eps = kClipEps) {
  if (!(eps > 0.0 && eps < 0.5)) throw ValidationError("clip eps must lie in (0, 0.5)");
  Tensor<Scalar> t = p.tensor();
  t.data() = t.data().cwiseMax(Scalar(eps)).cwiseMin(Scalar(1.0 - eps));
  const double tol = static_cast<double>(t.classes()) * eps + default_sum_tolerance<Scalar>();
  return ProbTensor<Scalar>(std::move(t), tol);
}

/// Appends a class axis of length num_classes to an integer label tensor.
template <typename Scalar = double, typename Label>
OneHotMask<Scalar> one_hot(const Tensor<Label>& labels, Index num_classes) {
  if (num_classes < 1) throw ValidationError("one_hot: num_classes must be positive");
  Shape shape = labels.shape();
  shape.push_back(num_classes);
  Tensor<Scalar> out(shape);
  auto m = out.matrix();
  const auto& d = labels.data();
  for (Index i = 0; i < d.size(); ++i) {
    const auto label = static_cast<long long>(d[i]);
    if (label < 0 || label >= num_classes) {
      throw ValidationError("one_hot: label " + std::to_string(label) + " at index " +
                            std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    m(i, label) = Scalar(1);
  }
  return OneHotMask<Scalar>(std::move(out));
}

/// Index of the largest class value per element; drops the class axis. Ties
/// resolve to the lowest class index.
template <typename Scalar>
Tensor<int> argmax(const Tensor<Scalar>& t) {
  Shape shape(t.shape().begin(), t.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  Tensor<int> out(shape);
  const auto m = t.matrix();
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < m.cols(); ++c) {
      if (m(i, c) > m(i, best)) best = c;
    }
    out.data()[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace imloss
