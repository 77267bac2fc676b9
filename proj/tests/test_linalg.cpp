#include <random>
#include <utility>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vcforest;

namespace {

Matrix random_spd(std::size_t n, std::mt19937_64& rng, double ridge = 0.5) {
  std::normal_distribution<double> g;
  Matrix a(n, n);
  for (double& v : a.data()) v = g(rng);
  Matrix m = a.transpose() * a;
  for (std::size_t i = 0; i < n; ++i) m(i, i) += ridge;
  return m;
}

}  // namespace

TEST(GramSystem, HandSum) {
  const std::vector<std::pair<std::vector<double>, double>> rows = {{{1.0}, 2.0}, {{1.0}, 4.0}};
  const GramSystem g = gram_accumulate(1, rows);
  EXPECT_EQ(g.gram(0, 0), 2.0);
  EXPECT_EQ(g.cross[0], 6.0);
  EXPECT_EQ(g.yy, 20.0);
  EXPECT_EQ(g.count, 2u);
}

TEST(GramSystem, EmptyIsZero) {
  const std::vector<std::pair<std::vector<double>, double>> rows;
  const GramSystem g = gram_accumulate(2, rows);
  EXPECT_EQ(g.count, 0u);
  EXPECT_EQ(g.gram.max_abs(), 0.0);
  EXPECT_EQ(g.yy, 0.0);
}

TEST(GramSystem, AddThenRemoveRestores) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  GramSystem sys(3);
  for (int i = 0; i < 20; ++i) sys.add_row(std::vector<double>{g(rng), g(rng), g(rng)}, g(rng));
  const GramSystem before = sys;
  const std::vector<double> x{0.3, -1.7, 2.2};
  sys.add_row(x, 5.0);
  sys.remove_row(x, 5.0);
  EXPECT_EQ(sys.count, before.count);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(sys.gram(i, j), before.gram(i, j), 1e-12);
    EXPECT_NEAR(sys.cross[i], before.cross[i], 1e-12);
  }
  EXPECT_NEAR(sys.yy, before.yy, 1e-12);
}

TEST(GramSystem, RejectsWrongLengthAndEmptyRemoval) {
  GramSystem sys(2);
  EXPECT_THROW(sys.add_row(std::vector<double>{1.0}, 1.0), DimError);
  EXPECT_THROW(sys.remove_row(std::vector<double>{1.0, 2.0}, 1.0), DimError);
}

TEST(OlsSolve, ExactInterpolation) {
  GramSystem sys(2);
  const double xs[5][2] = {{1, 0}, {0, 1}, {1, 1}, {2, -1}, {0.5, 3}};
  for (const auto& x : xs) sys.add_row(std::vector<double>{x[0], x[1]}, 2 * x[0] - x[1]);
  const OlsFit fit = ols_solve(sys, 2);
  ASSERT_TRUE(fit.ok);
  EXPECT_NEAR(fit.beta[0], 2.0, 1e-10);
  EXPECT_NEAR(fit.beta[1], -1.0, 1e-10);
  EXPECT_LE(fit.rss, 1e-18 * sys.yy);
}

TEST(OlsSolve, DuplicatedColumnIsInvalid) {
  GramSystem sys(2);
  for (double v : {1.0, 2.0, 3.0, 4.0}) sys.add_row(std::vector<double>{v, v}, v);
  const OlsFit fit = ols_solve(sys, 2);
  EXPECT_FALSE(fit.ok);
  EXPECT_EQ(fit.beta, std::vector<double>({0.0, 0.0}));
  EXPECT_EQ(fit.rss, sys.yy);
}

TEST(OlsSolve, InterceptOnlyGivesMean) {
  GramSystem sys(1);
  for (double y : {1.0, 2.0, 3.0}) sys.add_row(std::vector<double>{1.0}, y);
  const OlsFit fit = ols_solve(sys, 1);
  ASSERT_TRUE(fit.ok);
  EXPECT_NEAR(fit.beta[0], 2.0, 1e-14);
  EXPECT_NEAR(fit.rss, 2.0, 1e-12);
}

TEST(OlsSolve, MinCountGate) {
  GramSystem sys(1);
  sys.add_row(std::vector<double>{1.0}, 1.0);
  sys.add_row(std::vector<double>{1.0}, 3.0);
  EXPECT_FALSE(ols_solve(sys, 3).ok);
  EXPECT_TRUE(ols_solve(sys, 2).ok);
}

TEST(OlsSolve, RssMatchesExplicitResiduals) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Dataset ds = oracle::random_dataset(40, 2, {0}, seed);
    std::vector<RowId> rows;
    std::mt19937_64 rng(seed);
    for (RowId r = 0; r < ds.n(); ++r)
      if (rng() % 2) rows.push_back(r);
    if (rows.size() < 4) continue;
    GramSystem sys(ds.dx());
    for (RowId r : rows) sys.add_row(ds.x.row(r), ds.y[r]);
    const OlsFit fit = ols_solve(sys, ds.dx());
    ASSERT_TRUE(fit.ok);
    double rss = 0.0;
    for (RowId r : rows) {
      const double e = ds.y[r] - dot(ds.x.row(r), fit.beta);
      rss += e * e;
    }
    EXPECT_NEAR(fit.rss, rss, 1e-8 * std::max(1.0, sys.yy));
    const oracle::Ls ref = oracle::least_squares(ds, rows);
    for (std::size_t j = 0; j < ds.dx(); ++j) EXPECT_NEAR(fit.beta[j], ref.beta[j], 1e-8);
  }
}

TEST(OlsSolve, DowndatingScanMatchesFromScratch) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Dataset ds = oracle::random_dataset(300, 2, {0}, seed);
    for (double& y : ds.y) y += 1e4;  // large offset stresses cancellation
    GramSystem left(ds.dx());
    GramSystem right(ds.dx());
    for (std::size_t i = 0; i < ds.n(); ++i) right.add_row(ds.x.row(i), ds.y[i]);
    for (std::size_t p = 0; p + 1 < ds.n(); ++p) {
      left.add_row(ds.x.row(p), ds.y[p]);
      right.remove_row(ds.x.row(p), ds.y[p]);
      // Same refresh cadence as the split scan.
      if ((p + 1) % 64 == 0) {
        right = GramSystem(ds.dx());
        for (std::size_t i = p + 1; i < ds.n(); ++i) right.add_row(ds.x.row(i), ds.y[i]);
      }
      if (p < 4 || ds.n() - p - 1 < 4) continue;
      std::vector<RowId> lrows(p + 1), rrows(ds.n() - p - 1);
      std::iota(lrows.begin(), lrows.end(), RowId{0});
      std::iota(rrows.begin(), rrows.end(), static_cast<RowId>(p + 1));
      const oracle::Ls lref = oracle::least_squares(ds, lrows);
      const oracle::Ls rref = oracle::least_squares(ds, rrows);
      const OlsFit lf = ols_solve(left, 3), rf = ols_solve(right, 3);
      ASSERT_TRUE(lf.ok && rf.ok);
      for (std::size_t j = 0; j < ds.dx(); ++j) {
        EXPECT_NEAR(lf.beta[j], lref.beta[j], 1e-8 * std::max(1.0, std::abs(lref.beta[j])));
        EXPECT_NEAR(rf.beta[j], rref.beta[j], 1e-8 * std::max(1.0, std::abs(rref.beta[j])));
      }
    }
  }
}

TEST(SpdSolve, IdentityAndDiagonal) {
  Matrix rhs(2, 2);
  rhs(0, 0) = 1.5;
  rhs(0, 1) = -2;
  rhs(1, 0) = 3;
  rhs(1, 1) = 0.25;
  EXPECT_EQ(spd_solve(Matrix::identity(2), rhs), rhs);
  Matrix four(1, 1, 4.0);
  EXPECT_DOUBLE_EQ(spd_solve(four, std::vector<double>{8.0})[0], 2.0);
}

TEST(SpdSolve, MatchesGaussJordanOracle) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_spd(3, rng);
    Matrix rhs(3, 2);
    for (double& v : rhs.data()) v = g(rng);
    const Matrix sol = spd_solve(m, rhs);
    const oracle::Dense ref = oracle::gauss_jordan(oracle::to_dense(m), oracle::to_dense(rhs));
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(sol(r, c), ref[r][c], 1e-8);
  }
}

TEST(SpdSolve, InverseRecoversIdentityUpToConditionOneMillion) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 5;
    // Q diag(λ) Qᵀ with eigenvalues spread over [1, 1e6].
    Matrix a(n, n);
    for (double& v : a.data()) v = g(rng);
    const oracle::Dense q0 = oracle::to_dense(a);
    std::vector<std::vector<double>> q;
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<double> v(n);
      for (std::size_t r = 0; r < n; ++r) v[r] = q0[r][c];
      for (const auto& u : q) {
        double p = 0.0;
        for (std::size_t r = 0; r < n; ++r) p += u[r] * v[r];
        for (std::size_t r = 0; r < n; ++r) v[r] -= p * u[r];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      for (double& x : v) x /= std::sqrt(norm);
      q.push_back(v);
    }
    Matrix m(n, n);
    for (std::size_t k = 0; k < n; ++k) {
      const double lambda = std::pow(1e6, static_cast<double>(k) / static_cast<double>(n - 1));
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) m(r, c) += lambda * q[k][r] * q[k][c];
    }
    symmetrize(m);
    const Matrix prod = m * spd_solve(m, Matrix::identity(n));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        EXPECT_NEAR(prod(r, c), r == c ? 1.0 : 0.0, 1e-8);
  }
}

TEST(SpdSolve, SingularThrows) {
  Matrix m(2, 2, 1.0);
  EXPECT_THROW(spd_solve(m, Matrix::identity(2)), SingularMatrixError);
  EXPECT_THROW(spd_solve(Matrix::identity(2), Matrix::identity(3)), DimError);
}
