#pragma once

// Small dense linear algebra for d_X-sized systems: Gram accumulation with
// add/remove updates, pivoted Cholesky solves and OLS fits with RSS.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vcforest/errors.hpp"

namespace vcforest {

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimError("matrix product: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline std::vector<double> operator*(const Matrix& a, std::span<const double> v) {
  if (a.cols() != v.size()) throw DimError("matrix-vector product: dimension mismatch");
  std::vector<double> out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) acc += a(i, j) * v[j];
    out[i] = acc;
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Replaces m with (m + mᵀ)/2 so the result is symmetric to the bit.
inline void symmetrize(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) {
      const double avg = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = avg;
      m(j, i) = avg;
    }
}

// Sufficient statistics of a least-squares problem: Σxxᵀ, Σxy, Σy², count.
struct GramSystem {
  std::size_t dim = 0;
  Matrix gram;
  std::vector<double> cross;
  std::size_t count = 0;
  double yy = 0.0;

  GramSystem() = default;
  explicit GramSystem(std::size_t d) : dim(d), gram(d, d), cross(d, 0.0) {}

  void add_row(std::span<const double> x, double y) { update(x, y, 1.0); ++count; }

  void remove_row(std::span<const double> x, double y) {
    if (count == 0) throw DimError("remove_row on an empty Gram system");
    update(x, y, -1.0);
    --count;
  }

  friend bool operator==(const GramSystem&, const GramSystem&) = default;

 private:
  void update(std::span<const double> x, double y, double sign) {
    if (x.size() != dim)
      throw DimError("Gram row has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(dim));
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = i; j < dim; ++j) {
        const double v = gram(i, j) + sign * (x[i] * x[j]);
        gram(i, j) = v;
        gram(j, i) = v;
      }
      cross[i] += sign * (x[i] * y);
    }
    yy += sign * (y * y);
  }
};

// Accumulates rows produced by a callable `row(k) -> pair<span x, double y>`.
template <typename RowRange>
GramSystem gram_accumulate(std::size_t dim, const RowRange& rows) {
  GramSystem sys(dim);
  for (const auto& [x, y] : rows) sys.add_row(x, y);
  return sys;
}

// Symmetric positive (semi)definite factorization with diagonal pivoting on a
// Jacobi-equilibrated copy: P D A D Pᵀ = L Lᵀ. Fails when a relative pivot
// drops below rcond, which flags rank deficiency independent of column scale.
class PivotedCholesky {
 public:
  PivotedCholesky(const Matrix& a, double rcond) : n_(a.rows()) {
    if (a.rows() != a.cols()) throw DimError("Cholesky of a non-square matrix");
    scale_.assign(n_, 0.0);
    perm_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      perm_[i] = i;
      const double d = a(i, i);
      if (!(d > 0.0) || !std::isfinite(d)) {
        ok_ = false;
        min_pivot_ = 0.0;
        return;
      }
      scale_[i] = 1.0 / std::sqrt(d);
    }
    Matrix w(n_, n_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) w(i, j) = a(i, j) * scale_[i] * scale_[j];

    l_ = Matrix(n_, n_);
    min_pivot_ = n_ == 0 ? 1.0 : std::numeric_limits<double>::infinity();
    max_pivot_ = 0.0;
    for (std::size_t k = 0; k < n_; ++k) {
      std::size_t p = k;
      for (std::size_t i = k + 1; i < n_; ++i)
        if (w(i, i) > w(p, p)) p = i;
      if (p != k) {
        swap_symmetric(w, k, p);
        std::swap(perm_[k], perm_[p]);
        for (std::size_t c = 0; c < k; ++c) std::swap(l_(k, c), l_(p, c));
      }
      const double pivot = w(k, k);
      min_pivot_ = std::min(min_pivot_, pivot);
      max_pivot_ = std::max(max_pivot_, pivot);
      if (!(pivot >= rcond) || !std::isfinite(pivot)) {
        ok_ = false;
        return;
      }
      const double root = std::sqrt(pivot);
      l_(k, k) = root;
      for (std::size_t i = k + 1; i < n_; ++i) l_(i, k) = w(i, k) / root;
      for (std::size_t i = k + 1; i < n_; ++i)
        for (std::size_t j = k + 1; j <= i; ++j) {
          const double v = w(i, j) - l_(i, k) * l_(j, k);
          w(i, j) = v;
          w(j, i) = v;
        }
    }
    ok_ = true;
  }

  bool ok() const noexcept { return ok_; }
  // Smallest relative pivot seen; 1 for a perfectly conditioned system.
  double min_pivot() const noexcept { return min_pivot_; }
  double condition_hint() const noexcept {
    return ok_ && min_pivot_ > 0.0 ? max_pivot_ / min_pivot_
                                   : std::numeric_limits<double>::infinity();
  }

  std::vector<double> solve(std::span<const double> rhs) const {
    std::vector<double> t(n_);
    for (std::size_t i = 0; i < n_; ++i) t[i] = rhs[perm_[i]] * scale_[perm_[i]];
    for (std::size_t i = 0; i < n_; ++i) {
      double acc = t[i];
      for (std::size_t k = 0; k < i; ++k) acc -= l_(i, k) * t[k];
      t[i] = acc / l_(i, i);
    }
    for (std::size_t ii = n_; ii-- > 0;) {
      double acc = t[ii];
      for (std::size_t k = ii + 1; k < n_; ++k) acc -= l_(k, ii) * t[k];
      t[ii] = acc / l_(ii, ii);
    }
    std::vector<double> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[perm_[i]] = t[i] * scale_[perm_[i]];
    return out;
  }

 private:
  static void swap_symmetric(Matrix& w, std::size_t a, std::size_t b) {
    const std::size_t n = w.rows();
    for (std::size_t c = 0; c < n; ++c) std::swap(w(a, c), w(b, c));
    for (std::size_t r = 0; r < n; ++r) std::swap(w(r, a), w(r, b));
  }

  std::size_t n_;
  Matrix l_;
  std::vector<double> scale_;
  std::vector<std::size_t> perm_;
  bool ok_ = false;
  double min_pivot_ = 0.0;
  double max_pivot_ = 0.0;
};

struct OlsFit {
  std::vector<double> beta;
  double rss = 0.0;
  bool ok = false;
  double condition_hint = 0.0;

  friend bool operator==(const OlsFit&, const OlsFit&) = default;
};

inline constexpr double kDefaultRcond = 1e-10;

// OLS from sufficient statistics. Never throws on singular systems: the fit is
// flagged invalid with beta = 0 and rss = yy so split scans stay total-ordered.
inline OlsFit ols_solve(const GramSystem& sys, std::size_t min_count,
                        double rcond = kDefaultRcond) {
  OlsFit fit;
  fit.beta.assign(sys.dim, 0.0);
  fit.rss = std::max(sys.yy, 0.0);
  fit.condition_hint = std::numeric_limits<double>::infinity();
  if (sys.dim == 0 || sys.count < std::max<std::size_t>(min_count, 1)) return fit;

  PivotedCholesky chol(sys.gram, rcond);
  if (!chol.ok()) return fit;

  std::vector<double> beta = chol.solve(sys.cross);
  // One step of iterative refinement.
  std::vector<double> resid = sys.cross;
  for (std::size_t i = 0; i < sys.dim; ++i)
    for (std::size_t j = 0; j < sys.dim; ++j) resid[i] -= sys.gram(i, j) * beta[j];
  const std::vector<double> corr = chol.solve(resid);
  for (std::size_t i = 0; i < sys.dim; ++i) beta[i] += corr[i];

  fit.beta = std::move(beta);
  fit.rss = std::max(sys.yy - dot(fit.beta, sys.cross), 0.0);
  fit.ok = true;
  fit.condition_hint = chol.condition_hint();
  return fit;
}

// Solves m · sol = rhs for symmetric positive definite m, column by column.
inline Matrix spd_solve(const Matrix& m, const Matrix& rhs, double rcond = 1e-12) {
  if (m.rows() != m.cols() || m.rows() != rhs.rows())
    throw DimError("spd_solve: dimension mismatch");
  PivotedCholesky chol(m, rcond);
  if (!chol.ok()) throw SingularMatrixError("matrix is singular or not positive definite");
  Matrix sol(rhs.rows(), rhs.cols());
  std::vector<double> col(rhs.rows());
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    for (std::size_t r = 0; r < rhs.rows(); ++r) col[r] = rhs(r, c);
    const std::vector<double> x = chol.solve(col);
    for (std::size_t r = 0; r < rhs.rows(); ++r) sol(r, c) = x[r];
  }
  return sol;
}

inline std::vector<double> spd_solve(const Matrix& m, std::span<const double> rhs,
                                     double rcond = 1e-12) {
  Matrix r(rhs.size(), 1);
  for (std::size_t i = 0; i < rhs.size(); ++i) r(i, 0) = rhs[i];
  const Matrix s = spd_solve(m, r, rcond);
  return s.data();
}

}  // namespace vcforest
