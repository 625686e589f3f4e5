#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cem {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 array. A scalar is a tensor of shape {1}.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor zeros_like(const Tensor& other);
  static Tensor ones_like(const Tensor& other);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  // Leading extent and product of the remaining extents, treating the tensor
  // as a matrix. A rank-1 tensor is a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const;
  double& at(std::size_t r, std::size_t c);

  // Value of a one-element tensor.
  double item() const;

  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  Tensor reshaped(Shape shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double factor);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double factor, Tensor a);

// Eager kernels shared by the tape ops and by code that never needs
// gradients (energies, oracles, data generation).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
Tensor transpose(const Tensor& a);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

// Numpy-style broadcast of two shapes; throws DimensionError naming both.
Shape broadcast_shapes(const Shape& a, const Shape& b);
// Sums a broadcast gradient back down to `target`.
Tensor sum_to_shape(const Tensor& g, const Shape& target);

}  // namespace cem
