#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "wscl/errors.hpp"

namespace wscl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Dense row-major tensor. Dimension 0 is the batch axis everywhere in this
// library; a "row" is one example's worth of values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_volume(shape_) != data_.size())
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  // Stacks equally sized rows into a (n, row_shape...) tensor.
  static Tensor from_rows(const std::vector<std::vector<double>>& rows, const Shape& row_shape) {
    Shape s{rows.size()};
    s.insert(s.end(), row_shape.begin(), row_shape.end());
    Tensor t(s);
    const std::size_t w = shape_volume(row_shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != w) throw ConfigError("row width mismatch in Tensor::from_rows");
      std::copy(rows[i].begin(), rows[i].end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t row_size() const { return rows() == 0 ? shape_volume(row_shape()) : data_.size() / rows(); }
  Shape row_shape() const { return shape_.empty() ? Shape{} : Shape(shape_.begin() + 1, shape_.end()); }

  std::span<double> row(std::size_t i) { return {data_.data() + i * row_size(), row_size()}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * row_size(), row_size()}; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * row_size() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * row_size() + j]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Rows [begin, end) as a new tensor.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t w = row_size();
    return Tensor(s, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * w),
                                         data_.begin() + static_cast<std::ptrdiff_t>(end * w)));
  }

  // Appends the rows of `other`; row shapes must agree.
  void append_rows(const Tensor& other) {
    if (other.rows() == 0) return;
    if (shape_.empty() || rows() == 0) {
      *this = other;
      return;
    }
    if (row_shape() != other.row_shape())
      throw ConfigError("append_rows: row shape " + shape_string(other.row_shape()) + " vs " +
                        shape_string(row_shape()));
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    shape_[0] += other.rows();
  }

  void reshape(Shape s) {
    if (shape_volume(s) != data_.size()) throw ConfigError("reshape to " + shape_string(s) + " changes volume");
    shape_ = std::move(s);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Row-wise numerically stable softmax of a (n, C) tensor.
inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    auto o = out.row(i);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  Tensor t({1, z.size()}, std::vector<double>(z.begin(), z.end()));
  return softmax_rows(t).storage();
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace wscl
