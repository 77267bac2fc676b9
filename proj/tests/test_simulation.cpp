#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vcforest;
namespace fs = std::filesystem;

namespace {

double sig(double u) { return std::exp(u) / (1.0 + std::exp(u)); }
double rise_fall(double z) { return 1.0 + sig(100.0 * z - 30.0) - sig(100.0 * z - 70.0); }
double half(double z) { return sig(100.0 * z - 50.0); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ForestConfig tiny_config() {
  ForestConfig c;
  c.num_trees = 30;
  return c;
}

}  // namespace

TEST(Models, ModelOneValues) {
  const double at_half = 5.0 * (1.0 + 1.0 / (1.0 + std::exp(-20.0)) - 1.0 / (1.0 + std::exp(20.0)));
  EXPECT_NEAR(beta1_eval(Model::M1, std::vector<double>{0.5}), at_half, 1e-12);
  EXPECT_NEAR(beta1_eval(Model::M1, std::vector<double>{0.5}), 10.0, 1e-7);
  EXPECT_NEAR(beta1_eval(Model::M1, std::vector<double>{0.0}), 5.0, 1e-4);
}

TEST(Models, FriedmanValue) {
  const std::vector<double> z(5, 0.5);
  EXPECT_NEAR(beta1_eval(Model::Friedman, z), 10.0 * std::sin(std::acos(-1.0) / 4.0) + 5.0 + 2.5,
              1e-12);
  EXPECT_NEAR(beta1_eval(Model::Friedman, z), 14.5711, 1e-4);
}

TEST(Models, ExpandedFormsAgree) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  for (int q = 0; q < 10; ++q) {
    std::vector<double> z(5);
    for (double& v : z) v = u(rng);
    // Model II: 2f₁f₂ − 2f₁(1 − f₂) = 2f₁(2f₂ − 1).
    const double f1 = rise_fall(z[0]), f2 = rise_fall(z[1]);
    EXPECT_NEAR(beta1_eval(Model::M2, std::span<const double>(z).first(2)), 2 * f1 * (2 * f2 - 1),
                1e-12);
    // Model III: g₁[g₂(3g₃ − 1) − 1.5(1 − g₂)].
    const double g1 = half(z[0]), g2 = half(z[1]), g3 = half(z[2]), g4 = half(z[3]),
                 g5 = half(z[4]);
    EXPECT_NEAR(beta1_eval(Model::M3, std::span<const double>(z).first(3)),
                g1 * (g2 * (3 * g3 - 1) - 1.5 * (1 - g2)), 1e-12);
    // Model IV grouped by g₁ and 1 − g₁.
    const double on = g2 * (2 * g3 - 1) - 1.5 * (1 - g2);
    const double off = 1.5 * g4 + (1 - g4) * (0.7 - 1.5 * g5);
    EXPECT_NEAR(beta1_eval(Model::M5, z), g1 * on + (1 - g1) * off, 1e-12);
  }
}

TEST(Models, LimitingRegimes) {
  // Deep inside each regime the logistic factors are 0 or 1.
  EXPECT_NEAR(beta1_eval(Model::M3, std::vector<double>{0.9, 0.9, 0.9}), 2.0, 1e-12);
  EXPECT_NEAR(beta1_eval(Model::M3, std::vector<double>{0.9, 0.1, 0.9}), -1.5, 1e-12);
  EXPECT_NEAR(beta1_eval(Model::M5, std::vector<double>{0.1, 0, 0, 0.1, 0.1}), 0.7, 1e-12);
  EXPECT_NEAR(beta1_eval(Model::M5, std::vector<double>{0.1, 0, 0, 0.1, 0.9}), -0.8, 1e-12);
}

TEST(Models, DimensionAndNames) {
  EXPECT_THROW(beta1_eval(Model::M2, std::vector<double>{0.5}), DimError);
  EXPECT_EQ(model_from_string("M1"), Model::M1);
  EXPECT_EQ(model_from_string(to_string(Model::Friedman)), Model::Friedman);
  EXPECT_THROW(model_from_string("M9"), ConfigError);
}

TEST(Generate, NoiselessHomogeneousIsAffine) {
  DgpSpec spec;
  spec.model = Model::HomogeneousLinear;
  spec.beta0 = {0.3, -1.2};
  spec.noise_sd = 0.0;
  spec.n = 200;
  const Dataset ds = generate(spec);
  for (std::size_t i = 0; i < ds.n(); ++i) EXPECT_EQ(ds.y[i], 0.3 + -1.2 * ds.x(i, 1));
}

TEST(Generate, NoiseStandardDeviation) {
  DgpSpec spec;
  spec.model = Model::M1;
  spec.n = 100000;
  spec.seed = 3;
  const Dataset ds = generate(spec);
  std::vector<double> u(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i)
    u[i] = ds.y[i] - beta1_eval(Model::M1, ds.z.row(i)) * ds.x(i, 1);
  EXPECT_NEAR(sample_moments(u).sd, 0.5, 0.01);
  EXPECT_NEAR(sample_moments(u).kurtosis, 3.0, 0.1);
}

TEST(Generate, UniformMarginals) {
  DgpSpec spec;
  spec.model = Model::M5;
  spec.n = 10000;
  spec.seed = 4;
  const Dataset ds = generate(spec);
  // χ²₁₉ upper 1% point.
  const double critical = 36.191;
  for (std::size_t j = 0; j < 5; ++j) {
    std::vector<int> bins(20, 0);
    for (std::size_t i = 0; i < ds.n(); ++i)
      ++bins[std::min<std::size_t>(19, static_cast<std::size_t>(ds.z(i, j) * 20))];
    double chi = 0.0;
    for (int b : bins) chi += (b - 500.0) * (b - 500.0) / 500.0;
    EXPECT_LT(chi, critical) << "column " << j;
  }
  EXPECT_NEAR(chi2_upper_tail(critical, 19), 0.01, 1e-4);
}

TEST(Moments, NonExcessKurtosis) {
  const std::vector<double> v{1, 2, 3, 4};
  const Moments m = sample_moments(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.sd, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_NEAR(m.kurtosis, 1.64, 1e-12);
  EXPECT_NEAR(m.skewness, 0.0, 1e-15);
}

TEST(MonteCarlo, SingleRepHasZeroSpread) {
  DgpSpec spec;
  spec.n = 80;
  const McReport r = run_monte_carlo(spec, tiny_config(), 1);
  EXPECT_EQ(r.residual.mc_sd.sd, 0.0);
  EXPECT_EQ(report_manifest_entry(r).at("single_rep"), true);
}

TEST(MonteCarlo, MseDominatesSquaredBias) {
  DgpSpec spec;
  spec.n = 150;
  spec.model = Model::M2;
  const McReport r = run_monte_carlo(spec, tiny_config(), 6);
  for (const PointSummary& p : r.points) {
    if (p.evaluated == 0) continue;
    for (std::size_t j = 0; j < 2; ++j) EXPECT_GE(p.mse[j] + 1e-12, p.bias[j] * p.bias[j]);
  }
}

TEST(MonteCarlo, ReproducibleTables) {
  DgpSpec spec;
  spec.n = 120;
  spec.seed = 5;
  const fs::path a = fs::temp_directory_path() / "vcforest_mc_a";
  const fs::path b = fs::temp_directory_path() / "vcforest_mc_b";
  fs::remove_all(a);
  fs::remove_all(b);
  McOptions serial, parallel;
  serial.threads = 1;
  parallel.threads = 3;
  write_report_tables(run_monte_carlo(spec, tiny_config(), 4, serial), a);
  write_report_tables(run_monte_carlo(spec, tiny_config(), 4, parallel), b);
  for (const char* name : {"goodness_of_fit.csv", "bias_mse_intercept.csv", "bias_mse_slope.csv",
                           "coverage_intercept.csv", "coverage_slope.csv", "lm_size.csv"}) {
    ASSERT_TRUE(fs::exists(a / name)) << name;
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(MonteCarlo, AbortsWhenTooManyRepsFail) {
  DgpSpec spec;
  spec.n = 20;
  ForestConfig cfg = tiny_config();
  cfg.min_count = 1000;  // no leaf can ever be fitted
  EXPECT_THROW(run_monte_carlo(spec, cfg, 5), AbortError);
}

TEST(MonteCarlo, TestPointGrid) {
  const auto g = test_point_grid();
  ASSERT_EQ(g.size(), 11u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_EQ(g[5], 0.5);
}
