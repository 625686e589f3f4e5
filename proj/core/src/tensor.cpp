#include "cem/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cem/error.hpp"

namespace cem {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* what) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " +
                         shape_string(a.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty()) shape_ = {1};
  for (std::size_t e : shape_) {
    if (e == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_string(shape_));
    }
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) shape_ = {1};
  for (std::size_t e : shape_) {
    if (e == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_string(shape_));
    }
  }
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
  return out;
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

Tensor Tensor::ones_like(const Tensor& other) {
  return Tensor(other.shape(), 1.0);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  return shape_.size() == 1 ? 1 : shape_.front();
}

std::size_t Tensor::cols() const { return data_.size() / rows(); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return data_[r * cols() + c];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data_[r * cols() + c];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
  }
  return data_[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double factor) {
  for (double& v : data_) v *= factor;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double factor, Tensor a) { return a *= factor; }

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a,
              bool transpose_b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw DimensionError("matmul: inner extents differ for " +
                         shape_string(a.shape()) + (transpose_a ? "^T" : "") +
                         " and " + shape_string(b.shape()) +
                         (transpose_b ? "^T" : ""));
  }
  Tensor out({m, n});
  ConstMap am(a.data().data(), static_cast<Eigen::Index>(a.dim(0)),
              static_cast<Eigen::Index>(a.dim(1)));
  ConstMap bm(b.data().data(), static_cast<Eigen::Index>(b.dim(0)),
              static_cast<Eigen::Index>(b.dim(1)));
  MutMap om(out.data().data(), static_cast<Eigen::Index>(m),
            static_cast<Eigen::Index>(n));
  if (!transpose_a && !transpose_b) {
    om.noalias() = am * bm;
  } else if (!transpose_a && transpose_b) {
    om.noalias() = am * bm.transpose();
  } else if (transpose_a && !transpose_b) {
    om.noalias() = am.transpose() * bm;
  } else {
    om.noalias() = am.transpose() * bm.transpose();
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.dim(0);
  const std::size_t c = a.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row mismatch " +
                           shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    total += p.cols();
  }
  Tensor out({r, total});
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      auto src = p.row(i);
      std::copy(src.begin(), src.end(), out.row(i).begin() + offset);
      offset += src.size();
    }
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of range for " +
                         shape_string(a.shape()));
  }
  Shape shape = a.shape();
  if (shape.size() == 1) shape = {1, a.size()};
  shape[0] = end - begin;
  const std::size_t c = a.cols();
  std::vector<double> data(a.data().begin() + begin * c,
                           a.data().begin() + end * c);
  return Tensor(std::move(shape), std::move(data));
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  if (begin >= end || end > a.dim(1)) {
    throw DimensionError("slice_cols: range out of bounds for " +
                         shape_string(a.shape()));
  }
  Tensor out({a.dim(0), end - begin});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = begin; j < end; ++j) out.at(i, j - begin) = a.at(i, j);
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

double l2_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("incompatible broadcast between " + shape_string(a) +
                           " and " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor sum_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape& gs = g.shape();
  if (target.size() > gs.size()) {
    throw DimensionError("sum_to_shape: cannot reduce " + shape_string(gs) +
                         " to " + shape_string(target));
  }
  const std::size_t r = gs.size();
  const std::size_t lead = r - target.size();
  // Strides of the target expressed over g's axes; broadcast axes get 0.
  std::vector<std::size_t> tstride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > lead;) {
    const std::size_t t = target[i - lead];
    if (t != 1 && t != gs[i]) {
      throw DimensionError("sum_to_shape: cannot reduce " + shape_string(gs) +
                           " to " + shape_string(target));
    }
    tstride[i] = t == 1 ? 0 : s;
    s *= t;
  }
  Tensor out(target);
  std::vector<std::size_t> idx(r, 0);
  std::size_t toff = 0;
  for (std::size_t flat = 0; flat < g.size(); ++flat) {
    out[toff] += g[flat];
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      toff += tstride[ax];
      if (idx[ax] < gs[ax]) break;
      toff -= tstride[ax] * gs[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace cem
