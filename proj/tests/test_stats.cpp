#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vcforest;

TEST(ChiSquare, ZeroGivesOne) {
  for (std::size_t k = 1; k <= 5; ++k) EXPECT_EQ(chi2_upper_tail(0.0, k), 1.0);
}

TEST(ChiSquare, TwoDegreesClosedForm) {
  EXPECT_NEAR(chi2_upper_tail(5.9915, 2), 0.05, 1e-4);
  for (double x : {0.1, 1.0, 3.0, 10.0, 25.0})
    EXPECT_NEAR(chi2_upper_tail(x, 2), std::exp(-x / 2.0), 1e-12);
}

TEST(ChiSquare, OneDegreeAgainstQuadrature) {
  EXPECT_NEAR(oracle::chi2_tail(3.8415, 1), 0.05, 1e-4);
  EXPECT_NEAR(chi2_upper_tail(3.8415, 1), 0.05, 1e-4);
}

TEST(ChiSquare, GridAgainstQuadrature) {
  for (std::size_t k = 1; k <= 10; ++k)
    for (double x : {0.5, 1.0, 2.0, 4.0, 7.5, 12.0, 20.0, 35.0})
      EXPECT_NEAR(chi2_upper_tail(x, k), oracle::chi2_tail(x, k), 1e-4) << "k=" << k << " x=" << x;
}

TEST(ChiSquare, Monotonicity) {
  for (std::size_t k = 1; k <= 8; ++k) {
    double prev = 1.0;
    for (double x = 0.25; x < 40.0; x += 0.25) {
      const double p = chi2_upper_tail(x, k);
      EXPECT_LE(p, prev);
      prev = p;
    }
  }
  for (double x : {9.0, 15.0, 30.0}) {
    double prev = 0.0;
    for (std::size_t k = 1; static_cast<double>(k) < x; ++k) {
      const double p = chi2_upper_tail(x, k);
      EXPECT_GE(p, prev);
      prev = p;
    }
  }
}

TEST(ChiSquare, DomainErrors) {
  EXPECT_THROW(chi2_upper_tail(-1.0, 2), DomainError);
  EXPECT_THROW(chi2_upper_tail(1.0, 0), DomainError);
  EXPECT_THROW(chi2_upper_tail(std::nan(""), 1), DomainError);
}

TEST(NormalQuantile, Median) { EXPECT_EQ(normal_quantile(0.5), 0.0); }

TEST(NormalQuantile, AgainstSeriesBisection) {
  EXPECT_NEAR(oracle::normal_quantile_bisect(0.975), 1.95996, 1e-4);
  EXPECT_NEAR(normal_quantile(0.975), 1.95996, 1e-4);
  for (double p : {0.001, 0.01, 0.05, 0.1, 0.3, 0.6, 0.9, 0.95, 0.99, 0.999})
    EXPECT_NEAR(normal_quantile(p), oracle::normal_quantile_bisect(p), 1e-6) << p;
}

TEST(NormalQuantile, InvertsCdf) {
  for (double x = -5.0; x <= 5.0; x += 0.25) EXPECT_NEAR(normal_quantile(normal_cdf(x)), x, 1e-6);
}

TEST(NormalCdf, AgainstSeries) {
  for (double x = -4.0; x <= 4.0; x += 0.5) {
    EXPECT_NEAR(normal_cdf(x), oracle::normal_cdf_series(x), 1e-12);
    EXPECT_NEAR(normal_upper_tail(x), 1.0 - oracle::normal_cdf_series(x), 1e-12);
  }
}

TEST(NormalQuantile, DomainErrors) {
  EXPECT_THROW(normal_quantile(0.0), DomainError);
  EXPECT_THROW(normal_quantile(1.0), DomainError);
}
