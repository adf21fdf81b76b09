#pragma once
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cromac/errors.hpp"
#include "cromac/rng.hpp"

namespace cromac {

// Inline dimension list (rank <= 4); avoids a heap allocation per tensor.
class ShapeVec {
 public:
  ShapeVec() = default;
  ShapeVec(std::initializer_list<std::size_t> l) {
    for (std::size_t v : l) push_back(v);
  }
  explicit ShapeVec(const std::vector<std::size_t>& v) {
    for (std::size_t x : v) push_back(x);
  }
  std::size_t size() const { return n_; }
  bool empty() const { return n_ == 0; }
  std::size_t operator[](std::size_t i) const { return d_[i]; }
  std::size_t& operator[](std::size_t i) { return d_[i]; }
  bool operator==(const ShapeVec& o) const {
    if (n_ != o.n_) return false;
    for (std::size_t i = 0; i < n_; ++i)
      if (d_[i] != o.d_[i]) return false;
    return true;
  }
  const std::size_t* begin() const { return d_.data(); }
  const std::size_t* end() const { return d_.data() + n_; }
  void push_back(std::size_t v) {
    if (n_ >= d_.size()) throw ShapeError("tensor rank limit exceeded");
    d_[n_++] = v;
  }

 private:
  std::array<std::size_t, 4> d_{};
  std::size_t n_ = 0;
};

// Dense row-major 64-bit tensor. Rank 1 and 2 are what the framework uses;
// a rank-1 tensor of length n behaves as a [1, n] row where a matrix is
// expected. `grad` is allocated only for trainable parameters.
struct Tensor {
  ShapeVec shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty, or same length as data

  Tensor() = default;
  explicit Tensor(ShapeVec s) : shape(s), data(count(shape), 0.0) {}
  explicit Tensor(const std::vector<std::size_t>& s) : Tensor(ShapeVec(s)) {}
  Tensor(std::size_t r, std::size_t c) : shape{r, c}, data(r * c, 0.0) {}

  static std::size_t count(const ShapeVec& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static Tensor vec(std::initializer_list<double> v) {
    Tensor t(std::vector<std::size_t>{v.size()});
    std::copy(v.begin(), v.end(), t.data.begin());
    return t;
  }
  static Tensor zeros(std::size_t n) { return Tensor(std::vector<std::size_t>{n}); }
  static Tensor full(std::size_t n, double v) {
    Tensor t = zeros(n);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  // nested-list constructor for small literal matrices in tests and examples
  static Tensor mat(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Tensor t(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      for (double v : row) t.data[i++] = v;
    }
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // matrix view: rank-1 tensors are a single row
  std::size_t rows() const { return rank() >= 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (double& v : data) v = rng.uniform(lo, hi);
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap as_mat(const Tensor& t) {
  return ECMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}
inline EMap as_mat(Tensor& t) {
  return EMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

// c = a * b, plain matrix product ([m,k] x [k,n])
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
  Tensor c(a.rows(), b.cols());
  as_mat(c).noalias() = as_mat(a) * as_mat(b);
  return c;
}

// argmax over a row, ties resolved to the lowest index
inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
  if (t.cols() == 0) throw ContractError("argmax over empty row");
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t.at(row, c) > t.at(row, best)) best = c;
  return best;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cromac
