#ifndef XMPR_TENSOR_HPP
#define XMPR_TENSOR_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmpr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of arbitrary rank backed by a flat Eigen array.
/// Rank-0 tensors (empty shape) hold a single scalar.
template <typename Scalar>
class TensorBase {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  TensorBase() = default;

  explicit TensorBase(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Storage::Zero(shape_numel(shape_));
  }

  TensorBase(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_))
      throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
  }

  static TensorBase zeros(Shape shape) { return TensorBase(std::move(shape)); }

  static TensorBase full(Shape shape, Scalar v) {
    TensorBase t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static TensorBase scalar(Scalar v) {
    TensorBase t(Shape{});
    t.data_.resize(1);
    t.data_[0] = v;
    return t;
  }

  static TensorBase from_vector(Shape shape, const std::vector<Scalar>& v) {
    TensorBase t(std::move(shape));
    if (static_cast<Index>(v.size()) != t.numel())
      throw std::invalid_argument("tensor: vector length does not match shape " +
                                  shape_string(t.shape()));
    for (Index i = 0; i < t.numel(); ++i) t.data_[i] = v[static_cast<std::size_t>(i)];
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return data_.size(); }
  bool is_scalar() const { return shape_.empty(); }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(std::initializer_list<Index> idx) { return data_[flat_index(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[flat_index(idx)]; }

  Index flat_index(std::initializer_list<Index> idx) const {
    if (static_cast<Index>(idx.size()) != rank())
      throw std::invalid_argument("tensor: index rank mismatch for shape " + shape_string(shape_));
    Index flat = 0;
    Index axis = 0;
    for (Index i : idx) {
      flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
      ++axis;
    }
    return flat;
  }

  Shape strides() const {
    Shape s(shape_.size(), 1);
    for (Index a = rank() - 2; a >= 0; --a)
      s[static_cast<std::size_t>(a)] =
          s[static_cast<std::size_t>(a + 1)] * shape_[static_cast<std::size_t>(a + 1)];
    return s;
  }

  /// View the flat data as a rows x cols row-major matrix; rows*cols must equal numel().
  Eigen::Map<const MatrixRM> as_matrix(Index rows, Index cols) const {
    if (rows * cols != numel())
      throw std::invalid_argument("tensor: matrix view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " incompatible with " +
                                  shape_string(shape_));
    return Eigen::Map<const MatrixRM>(data_.data(), rows, cols);
  }

  Eigen::Map<MatrixRM> as_matrix(Index rows, Index cols) {
    if (rows * cols != numel())
      throw std::invalid_argument("tensor: matrix view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " incompatible with " +
                                  shape_string(shape_));
    return Eigen::Map<MatrixRM>(data_.data(), rows, cols);
  }

  TensorBase reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " +
                                  shape_string(shape));
    return TensorBase(std::move(shape), data_);
  }

  bool same_shape(const TensorBase& other) const { return shape_ == other.shape_; }

  bool all_finite() const { return data_.isFinite().all(); }

  Scalar value() const {
    if (numel() != 1)
      throw std::invalid_argument("tensor: value() on non-scalar " + shape_string(shape_));
    return data_[0];
  }

 private:
  void validate_shape() const {
    for (Index e : shape_)
      if (e < 1)
        throw std::invalid_argument("tensor: shape extents must be >= 1, got " +
                                    shape_string(shape_));
  }

  Shape shape_;
  Storage data_;
};

using Tensor = TensorBase<double>;

}  // namespace xmpr

#endif  // XMPR_TENSOR_HPP
