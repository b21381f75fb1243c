#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embsteal/errors.hpp"

namespace embsteal {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles. Rank 1 and 2 cover everything the
// encoder needs; kernels that act "per row" treat all leading axes as rows
// and the last axis as columns.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(extent_product(), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != extent_product()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void validate_shape() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }
  std::size_t extent_product() const {
    return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

// Kernels below operate on plain tensors. The differentiable versions in
// autodiff.hpp call into these for their forward values.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* br = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

// a × bᵀ without materializing the transpose.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_bt");
  require_rank2(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_bt inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "ᵀ");
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = &a(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = &b(j, 0);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_bt");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  require_finite(out, "softmax_rows");
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || shift.size() != d) {
    throw ShapeError("layer_norm affine params must have length " + std::to_string(d));
  }
  if (!(eps > 0.0)) throw ShapeError("layer_norm eps must be positive");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * inv * gain[j] + shift[j];
  }
  require_finite(out, "layer_norm");
  return out;
}

// Mean over the rows whose mask entry is true. Returns a rank-1 tensor.
inline Tensor mean_pool(const Tensor& x, const std::vector<bool>& mask) {
  require_rank2(x, "mean_pool");
  if (mask.size() != x.rows()) throw ShapeError("mean_pool mask length differs from sequence length");
  const std::size_t d = x.cols();
  Tensor out({d});
  std::size_t count = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (!mask[r]) continue;
    ++count;
    auto in = x.row(r);
    for (std::size_t j = 0; j < d; ++j) out[j] += in[j];
  }
  if (count == 0) throw ShapeError("mean_pool over an all-masked sequence");
  for (double& v : out.data()) v /= static_cast<double>(count);
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Normalizes each row to unit Euclidean length.
inline Tensor l2_normalize(const Tensor& v) {
  Tensor out(v.shape());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const double n = l2_norm(v.row(r));
    if (!(n > 0.0)) throw NumericError("l2_normalize of a zero vector");
    auto in = v.row(r);
    auto o = out.row(r);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] / n;
  }
  require_finite(out, "l2_normalize");
  return out;
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

}  // namespace embsteal
