#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace jempp {

/// Input rejected because its shape does not match what the receiver expects.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared where the model requires finite numbers.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major float64 array. Batches carry the batch extent as the
/// leading dimension.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Extent of the leading dimension.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  /// Number of elements per leading-dimension slice.
  std::size_t row_size() const { return shape_.empty() ? 1 : data_.size() / std::max<std::size_t>(shape_[0], 1); }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * row_size(), row_size()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * row_size(), row_size());
  }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Stack equally shaped samples into a batch with a new leading dimension.
inline Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("cannot stack an empty list of tensors");
  Shape shape = samples.front().shape();
  std::vector<double> data;
  data.reserve(samples.size() * samples.front().size());
  for (const Tensor& s : samples) {
    if (s.shape() != shape) throw ShapeError("stack: mismatched shapes " + shape_str(shape) + " vs " + shape_str(s.shape()));
    data.insert(data.end(), s.values().begin(), s.values().end());
  }
  shape.insert(shape.begin(), samples.size());
  return Tensor(std::move(shape), std::move(data));
}

/// Split a batch into per-sample tensors of the given sample shape.
inline std::vector<Tensor> unstack(const Tensor& batch) {
  Shape sample_shape(batch.shape().begin() + 1, batch.shape().end());
  if (sample_shape.empty()) sample_shape = {1};
  std::vector<Tensor> out;
  out.reserve(batch.rows());
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto row = batch.row(r);
    out.emplace_back(sample_shape, std::vector<double>(row.begin(), row.end()));
  }
  return out;
}

/// Rows of `a` followed by rows of `b`; both must share the sample shape.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows: mismatched shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> data(a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  Shape shape = a.shape();
  shape[0] += b.shape()[0];
  return Tensor(std::move(shape), std::move(data));
}

/// Prepend a unit batch dimension.
inline Tensor as_batch(const Tensor& sample) {
  Shape shape = sample.shape();
  shape.insert(shape.begin(), 1);
  return Tensor(std::move(shape), sample.values());
}

}  // namespace jempp
