#include "ckpm/matrix.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "ckpm/errors.hpp"

namespace ckpm {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("DenseMatrix: data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("DenseMatrix: ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

DenseMatrix DenseMatrix::column(std::span<const double> values) {
  return DenseMatrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

DenseMatrix DenseMatrix::reshaped(std::size_t rows, std::size_t cols) const {
  if (rows * cols != data_.size()) {
    throw DimensionError("reshape: cannot view " + shape_string() + " as " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  return DenseMatrix(rows, cols, data_);
}

DenseMatrix DenseMatrix::block(std::size_t r0, std::size_t c0, std::size_t nr,
                               std::size_t nc) const {
  if (r0 + nr > rows_ || c0 + nc > cols_) {
    throw DimensionError("block: window exceeds " + shape_string());
  }
  DenseMatrix out(nr, nc);
  for (std::size_t r = 0; r < nr; ++r) {
    std::copy_n(data_.data() + (r0 + r) * cols_ + c0, nc, out.data_.data() + r * nc);
  }
  return out;
}

void DenseMatrix::set_block(std::size_t r0, std::size_t c0, const DenseMatrix& src) {
  if (r0 + src.rows_ > rows_ || c0 + src.cols_ > cols_) {
    throw DimensionError("set_block: " + src.shape_string() + " does not fit in " +
                         shape_string());
  }
  for (std::size_t r = 0; r < src.rows_; ++r) {
    std::copy_n(src.data_.data() + r * src.cols_, src.cols_,
                data_.data() + (r0 + r) * cols_ + c0);
  }
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_shape(*this, other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_shape(*this, other, "subtract");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

bool DenseMatrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string DenseMatrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

// Each output element accumulates over k in increasing order regardless of its
// row, so row permutations of `a` permute the result bit-exactly.
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const DenseMatrix& m) { return ConstView(m.data().data(), m.rows(), m.cols()); }
View view(DenseMatrix& m) { return View(m.data().data(), m.rows(), m.cols()); }

// C = A^T B or A B^T on row-major storage.
void gemm(bool trans_a, const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c,
          std::size_t inner) {
  if (c.size() == 0 || inner == 0) return;
  if (trans_a) {
    view(c).noalias() = view(a).transpose() * view(b);
  } else {
    view(c).noalias() = view(a) * view(b).transpose();
  }
}

}  // namespace

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape_string() + " * " +
                         b.shape_string());
  }
  const std::size_t n = a.rows(), inner = a.cols(), p = b.cols();
  DenseMatrix c(n, p);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  std::size_t i = 0;
  // Four rows share each pass over b.
  for (; i + 4 <= n; i += 4) {
    double* c0 = pc + i * p;
    double* c1 = c0 + p;
    double* c2 = c1 + p;
    double* c3 = c2 + p;
    const double* a0 = pa + i * inner;
    const double* a1 = a0 + inner;
    const double* a2 = a1 + inner;
    const double* a3 = a2 + inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      const double* bk = pb + k * p;
      for (std::size_t j = 0; j < p; ++j) {
        const double bj = bk[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < n; ++i) {
    double* ci = pc + i * p;
    const double* ai = pa + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = ai[k];
      const double* bk = pb + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: shape mismatch " + a.shape_string() + "^T * " +
                         b.shape_string());
  }
  DenseMatrix c(a.cols(), b.cols());
  gemm(true, a, b, c, a.rows());
  return c;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: shape mismatch " + a.shape_string() + " * " +
                         b.shape_string() + "^T");
  }
  DenseMatrix c(a.rows(), b.rows());
  gemm(false, a, b, c, a.cols());
  return c;
}

DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  }
  return t;
}

DenseMatrix hconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("hconcat: row mismatch " + parts.front().shape_string() + " vs " +
                           p.shape_string());
    }
    cols += p.cols();
  }
  DenseMatrix out(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    out.set_block(0, c0, p);
    c0 += p.cols();
  }
  return out;
}

DenseMatrix vconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("vconcat: column mismatch " + parts.front().shape_string() +
                           " vs " + p.shape_string());
    }
    data.insert(data.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return DenseMatrix(rows, cols, std::move(data));
}

double frobenius_norm(const DenseMatrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const DenseMatrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double trace(const DenseMatrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) s += a(i, i);
  return s;
}

Cholesky::Cholesky(const DenseMatrix& a) : lower_(a.rows(), a.cols()) {
  if (a.rows() != a.cols()) {
    throw DimensionError("cholesky: matrix must be square, got " + a.shape_string());
  }
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const auto lj = lower_.row(j);
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefiniteError(j, d);
    const double djj = std::sqrt(d);
    lower_(j, j) = djj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const auto li = lower_.row(i);
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      li[j] = s / djj;
    }
  }
}

DenseMatrix Cholesky::solve(const DenseMatrix& b) const {
  const std::size_t n = lower_.rows();
  if (b.rows() != n) {
    throw DimensionError("cholesky solve: rhs " + b.shape_string() + " incompatible with " +
                         lower_.shape_string());
  }
  const std::size_t p = b.cols();
  DenseMatrix x = b;
  // Forward substitution L y = b, row-wise over all right-hand sides.
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    const auto li = lower_.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = li[k];
      if (lik == 0.0) continue;
      const auto xk = x.row(k);
      for (std::size_t j = 0; j < p; ++j) xi[j] -= lik * xk[j];
    }
    const double inv = 1.0 / li[i];
    for (std::size_t j = 0; j < p; ++j) xi[j] *= inv;
  }
  // Back substitution L^T x = y.
  for (std::size_t ii = n; ii-- > 0;) {
    auto xi = x.row(ii);
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = lower_(k, ii);
      if (lki == 0.0) continue;
      const auto xk = x.row(k);
      for (std::size_t j = 0; j < p; ++j) xi[j] -= lki * xk[j];
    }
    const double inv = 1.0 / lower_(ii, ii);
    for (std::size_t j = 0; j < p; ++j) xi[j] *= inv;
  }
  return x;
}

DenseMatrix spd_solve_values(const DenseMatrix& a, const DenseMatrix& b) {
  return Cholesky(a).solve(b);
}

}  // namespace ckpm
