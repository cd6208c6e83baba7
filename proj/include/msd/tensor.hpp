#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace msd {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. A plain value: copying copies the data.
///
/// Rank 0 (shape `{}`) is a scalar holding exactly one element.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  /// The single element of a size-1 tensor.
  double item() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor transpose(const Tensor& t);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);

/// out = a * b for row-major matrices. The summation order of every output
/// element is independent of how many rows `a` has.
void matmul_into(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate = false);
Tensor matmul(const Tensor& a, const Tensor& b);

double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// max_i |a_i - b_i| / max(max_i |b_i|, 1e-300).
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace msd
