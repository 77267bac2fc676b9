#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vcforest;

namespace {

Dataset homogeneous(std::size_t n, std::uint64_t seed, double noise) {
  return oracle::random_dataset(n, 1, {0, 0}, seed, noise,
                                [](std::span<const double> x, std::span<const double>) {
                                  return 0.7 * x[0] + 1.9 * x[1];
                                });
}

Dataset heterogeneous(std::size_t n, std::uint64_t seed) {
  return oracle::random_dataset(n, 1, {0, 0}, seed, 0.3,
                                [](std::span<const double> x, std::span<const double> z) {
                                  return 3.0 * z[0] * x[0] + (1.0 + 4.0 * z[0]) * x[1];
                                });
}

}  // namespace

TEST(GlobalOls, ResidualsOrthogonalToX) {
  const Dataset ds = heterogeneous(200, 1);
  const OlsGlobal ols = global_ols(ds);
  for (std::size_t j = 0; j < ds.dx(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.n(); ++i) acc += ols.residuals[i] * ds.x(i, j);
    EXPECT_NEAR(acc, 0.0, 1e-9);
  }
  const oracle::Ls ref = [&] {
    std::vector<RowId> rows(ds.n());
    std::iota(rows.begin(), rows.end(), RowId{0});
    return oracle::least_squares(ds, rows);
  }();
  EXPECT_NEAR(ols.rss, ref.rss, 1e-9);
}

TEST(LmTest, NoiselessHomogeneousGivesZero) {
  const Dataset ds = homogeneous(500, 2, 0.0);
  const Forest f = fit_forest(ds, oracle::small_config(50), 1);
  const LmTestResult r = lm_test(ds, f);
  double scale = 0.0;
  for (double y : ds.y) scale += std::abs(y);
  for (double m : r.m_vector) EXPECT_LE(std::abs(m), 1e-8 * scale);
  EXPECT_EQ(r.statistic, 0.0);
  EXPECT_EQ(r.p_value, 1.0);
  EXPECT_EQ(r.dof, 2u);
}

TEST(LmTest, DetectsHeterogeneity) {
  const Dataset ds = heterogeneous(600, 3);
  const Forest f = fit_forest(ds, oracle::small_config(100), 1);
  const LmTestResult r = lm_test(ds, f);
  EXPECT_LT(r.p_value, 1e-3);
}

TEST(LmTest, StatisticMatchesDirectAssembly) {
  const Dataset ds = heterogeneous(300, 4);
  const Forest f = fit_forest(ds, oracle::small_config(40), 1);
  const LmTestResult r = lm_test(ds, f);
  const std::size_t n = ds.n(), dx = ds.dx(), dz = ds.dz(), dw = dx + dz;
  const OlsGlobal ols = global_ols(ds);
  const Matrix beta = beta_at_rows(f);
  // Moment vector and sandwich assembled from scratch with dense helpers.
  std::vector<double> m(dz, 0.0);
  oracle::Dense sxx(dx, std::vector<double>(dx, 0.0)), szx(dz, std::vector<double>(dx, 0.0));
  oracle::Dense meat(dw, std::vector<double>(dw, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w;
    for (std::size_t a = 0; a < dz; ++a) w.push_back(ds.z(i, a));
    for (std::size_t c = 0; c < dx; ++c) w.push_back(ds.x(i, c));
    double fit = 0.0;
    for (std::size_t c = 0; c < dx; ++c) fit += ds.x(i, c) * beta(i, c);
    const double e = ds.y[i] - fit;
    for (std::size_t a = 0; a < dz; ++a) m[a] += ols.residuals[i] * ds.z(i, a);
    for (std::size_t a = 0; a < dx; ++a)
      for (std::size_t c = 0; c < dx; ++c) sxx[a][c] += ds.x(i, a) * ds.x(i, c);
    for (std::size_t a = 0; a < dz; ++a)
      for (std::size_t c = 0; c < dx; ++c) szx[a][c] += ds.z(i, a) * ds.x(i, c);
    for (std::size_t a = 0; a < dw; ++a)
      for (std::size_t c = 0; c < dw; ++c) meat[a][c] += e * e * w[a] * w[c];
  }
  oracle::Dense xz(dx, std::vector<double>(dz));
  for (std::size_t a = 0; a < dx; ++a)
    for (std::size_t c = 0; c < dz; ++c) xz[a][c] = szx[c][a];
  const oracle::Dense proj = oracle::gauss_jordan(sxx, xz);
  oracle::Dense l(dz, std::vector<double>(dw, 0.0));
  for (std::size_t a = 0; a < dz; ++a) {
    l[a][a] = 1.0;
    for (std::size_t c = 0; c < dx; ++c) l[a][dz + c] = -proj[c][a];
  }
  // n V̂ = L (Σ e² w wᵀ) Lᵀ.
  oracle::Dense nv(dz, std::vector<double>(dz, 0.0));
  for (std::size_t a = 0; a < dz; ++a)
    for (std::size_t b = 0; b < dz; ++b)
      for (std::size_t p = 0; p < dw; ++p)
        for (std::size_t q = 0; q < dw; ++q) nv[a][b] += l[a][p] * meat[p][q] * l[b][q];
  const auto sol = oracle::solve(nv, m);
  double t = 0.0;
  for (std::size_t a = 0; a < dz; ++a) t += m[a] * sol[a];
  EXPECT_NEAR(r.statistic, t, 1e-8 * std::max(1.0, t));
  EXPECT_NEAR(r.p_value, oracle::chi2_tail(t, dz), 1e-6);
}

TEST(LmTest, InvariantToRescalingX) {
  const Dataset ds = heterogeneous(300, 5);
  const ForestConfig cfg = oracle::small_config(40);
  const Forest f = fit_forest(ds, cfg, 1);
  Dataset scaled = ds;
  for (std::size_t i = 0; i < ds.n(); ++i) scaled.x(i, 1) *= 2.0;
  const Forest g = fit_forest(scaled, cfg, 1);
  for (std::size_t b = 0; b < f.num_trees(); ++b)
    ASSERT_EQ(structure_hash(f.trees[b]), structure_hash(g.trees[b]));
  const double t1 = lm_test(ds, f).statistic, t2 = lm_test(scaled, g).statistic;
  EXPECT_NEAR(t1, t2, 1e-8 * t1);
}

TEST(LmTest, VarianceSymmetricPsd) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Dataset ds = seed % 2 ? heterogeneous(250, seed) : homogeneous(250, seed, 0.5);
    const Forest f = fit_forest(ds, oracle::small_config(30), 1);
    const Matrix v = lm_test(ds, f).v_matrix;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for (std::size_t a = 0; a < v.rows(); ++a)
      for (std::size_t b = 0; b < v.cols(); ++b) EXPECT_EQ(v(a, b), v(b, a));
    for (int k = 0; k < 50; ++k) {
      const std::vector<double> p{g(rng), g(rng)};
      EXPECT_GE(dot(p, v * std::span<const double>(p)), -1e-12);
    }
  }
}

TEST(LmTest, FingerprintMismatch) {
  const Dataset ds = heterogeneous(200, 6);
  const Forest f = fit_forest(ds, oracle::small_config(10), 1);
  Dataset other = ds;
  other.y[0] += 1.0;
  EXPECT_THROW(lm_test(other, f), FingerprintError);
  EXPECT_THROW(glrt_test(other, f), FingerprintError);
}

TEST(GlrtLambda, Arithmetic) {
  EXPECT_EQ(glrt_lambda(3.0, 3.0, 100), 0.0);
  EXPECT_NEAR(glrt_lambda(2.0, 1.0, 100), 34.657, 1e-3);
  EXPECT_NEAR(glrt_lambda(2.0, 1.0, 100), 50.0 * std::log(2.0), 1e-12);
  // A forest can fit worse than OLS; the sign is reported, not clamped.
  EXPECT_LT(glrt_lambda(1.0, 2.0, 100), 0.0);
  EXPECT_THROW(glrt_lambda(1.0, 0.0, 100), DegenerateFitError);
}

TEST(GlrtTest, DegenerateZeroResidual) {
  const Dataset ds = homogeneous(300, 7, 0.0);
  const Forest f = fit_forest(ds, oracle::small_config(20), 1);
  EXPECT_THROW(glrt_test(ds, f), DegenerateFitError);
}

TEST(GlrtTest, SmootherReproducesFittedValues) {
  const Dataset ds = heterogeneous(150, 8);
  const Forest f = fit_forest(ds, oracle::small_config(30), 1);
  const Matrix h = smoother_matrix(f);
  const auto hy = h * std::span<const double>(ds.y);
  const Matrix beta = beta_at_rows(f);
  for (std::size_t i = 0; i < ds.n(); ++i)
    EXPECT_NEAR(hy[i], dot(ds.x.row(i), beta.row(i)), 1e-9);
}

TEST(GlrtTest, TracesMatchDenseAlgebra) {
  const Dataset ds = heterogeneous(80, 9);
  const Forest f = fit_forest(ds, oracle::small_config(20), 1);
  const Matrix h = smoother_matrix(f);
  const SmootherTraces t = smoother_traces(f, h);
  const std::size_t n = ds.n();
  // P = X (XᵀX)⁻¹ Xᵀ via the dense oracle.
  oracle::Dense xtx(2, std::vector<double>(2, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 2; ++b) xtx[a][b] += ds.x(i, a) * ds.x(i, b);
  oracle::Dense xt(2, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 2; ++a) xt[a][i] = ds.x(i, a);
  const oracle::Dense inv_xt = oracle::gauss_jordan(xtx, xt);
  double tr_m = 0.0, tr_m2 = 0.0, tr_h = 0.0;
  oracle::Dense mm(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    tr_h += h(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      double hth = 0.0;
      for (std::size_t k = 0; k < n; ++k) hth += h(k, i) * h(k, j);
      const double p = ds.x(i, 0) * inv_xt[0][j] + ds.x(i, 1) * inv_xt[1][j];
      mm[i][j] = h(i, j) + h(j, i) - hth - p;
    }
    tr_m += mm[i][i];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tr_m2 += mm[i][j] * mm[j][i];
  EXPECT_NEAR(t.trace_h, tr_h, 1e-10);
  EXPECT_NEAR(t.trace_m, tr_m, 1e-9);
  EXPECT_NEAR(t.trace_m2, tr_m2, 1e-9);
}

TEST(GlrtTest, RejectsStrongHeterogeneity) {
  const Dataset ds = heterogeneous(300, 10);
  const Forest f = fit_forest(ds, oracle::small_config(60), 1);
  const GlrtResult r = glrt_test(ds, f);
  EXPECT_GT(r.lambda, 0.0);
  EXPECT_LT(r.p_value, 0.01);
  const nlohmann::json j = to_json(r);
  EXPECT_TRUE(j.at("experimental").get<bool>());
  EXPECT_EQ(j.at("test"), "glrt");
}

TEST(GlrtTest, ThetaCalibrationsRun) {
  const Dataset ds = homogeneous(200, 11, 0.5);
  const Forest f = fit_forest(ds, oracle::small_config(40), 1);
  for (auto c : {GlrtCalibration::ThetaLambda, GlrtCalibration::ThetaDelta}) {
    GlrtOptions opt;
    opt.calibration = c;
    opt.pair_budget = 2000;
    const GlrtResult r = glrt_test(ds, f, opt);
    EXPECT_TRUE(std::isfinite(r.standardized));
    EXPECT_GT(r.nu_hat, 0.0);
    EXPECT_GE(r.moments.subset_size, 3u);
  }
}

TEST(ThetaMoments, MatchDirectPairwiseSums) {
  const Dataset ds = heterogeneous(60, 12);
  const Forest f = fit_forest(ds, oracle::small_config(20), 1);
  // Budget large enough to cover every row, so the subset is the full sample.
  const ThetaMoments mo = theta_moments(f, 100000, 1);
  ASSERT_EQ(mo.subset_size, ds.n());
  const std::size_t n = ds.n();
  double diag = 0.0, pair = 0.0, pair_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diag += theta_rows(f, i, i);
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) {
        const double t = theta_rows(f, i, j);
        pair += t;
        pair_sq += t * t;
      }
  }
  const double np = static_cast<double>(n * (n - 1));
  EXPECT_NEAR(mo.diag_mean, diag / static_cast<double>(n), 1e-14);
  EXPECT_NEAR(mo.pair_mean, pair / np, 1e-14);
  EXPECT_NEAR(mo.pair_sq, pair_sq / np, 1e-14);
}
