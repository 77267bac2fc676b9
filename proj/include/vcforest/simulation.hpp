#pragma once

// Simulated varying-coefficient designs and the Monte Carlo harness behind the
// goodness-of-fit, bias/MSE, coverage and LM size tables.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "vcforest/config.hpp"
#include "vcforest/data.hpp"
#include "vcforest/errors.hpp"
#include "vcforest/forest.hpp"
#include "vcforest/inference.hpp"
#include "vcforest/stats.hpp"

namespace vcforest {

enum class Model { M1, M2, M3, M5, Friedman, HomogeneousLinear };

inline const char* to_string(Model m) {
  switch (m) {
    case Model::M1: return "M1";
    case Model::M2: return "M2";
    case Model::M3: return "M3";
    case Model::M5: return "M5";
    case Model::Friedman: return "Friedman";
    case Model::HomogeneousLinear: return "Homogeneous";
  }
  return "M1";
}

inline Model model_from_string(const std::string& s) {
  if (s == "M1" || s == "I") return Model::M1;
  if (s == "M2" || s == "II") return Model::M2;
  if (s == "M3" || s == "III") return Model::M3;
  if (s == "M5" || s == "IV") return Model::M5;
  if (s == "Friedman" || s == "friedman") return Model::Friedman;
  if (s == "Homogeneous" || s == "homogeneous") return Model::HomogeneousLinear;
  throw ConfigError("unknown model '" + s + "'");
}

struct DgpSpec {
  Model model = Model::M1;
  std::size_t n = 1000;
  std::optional<double> noise_sd;  // default 0.5, Friedman 1
  std::uint64_t seed = 1;
  // HomogeneousLinear only: (intercept, slope) and the number of Z columns.
  std::vector<double> beta0 = {1.0, 2.0};
  std::size_t homogeneous_dz = 1;

  double resolved_noise_sd() const {
    return noise_sd.value_or(model == Model::Friedman ? 1.0 : 0.5);
  }

  void validate() const {
    if (n < 10) throw ConfigError("simulated sample size must be >= 10");
    if (!(resolved_noise_sd() >= 0.0)) throw ConfigError("noise_sd must be >= 0");
    if (model == Model::HomogeneousLinear) {
      if (beta0.size() != 2) throw ConfigError("beta0 must hold (intercept, slope)");
      if (homogeneous_dz < 1) throw ConfigError("homogeneous model needs d_Z >= 1");
    }
  }
};

inline std::size_t model_dz(Model m, std::size_t homogeneous_dz = 1) {
  switch (m) {
    case Model::M1: return 1;
    case Model::M2: return 2;
    case Model::M3: return 3;
    case Model::M5:
    case Model::Friedman: return 5;
    case Model::HomogeneousLinear: return homogeneous_dz;
  }
  return 1;
}

inline std::size_t model_dz(const DgpSpec& spec) { return model_dz(spec.model, spec.homogeneous_dz); }

inline double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// Bump that rises near 0.3 and falls near 0.7.
inline double bump(double z) { return 1.0 + logistic(100.0 * (z - 0.3)) - logistic(100.0 * (z - 0.7)); }

inline double step(double z) { return logistic(100.0 * (z - 0.5)); }

inline void check_dim(std::span<const double> z, std::size_t dz) {
  if (z.size() != dz)
    throw DimError("model expects " + std::to_string(dz) + " Z coordinates, got " +
                   std::to_string(z.size()));
}

// Slope coefficient β₁(z) of each design.
inline double beta1_eval(Model m, std::span<const double> z, double homogeneous_slope = 2.0) {
  switch (m) {
    case Model::M1:
      check_dim(z, 1);
      return 5.0 * bump(z[0]);
    case Model::M2: {
      check_dim(z, 2);
      const double f1 = bump(z[0]), f2 = bump(z[1]);
      return 2.0 * f1 * f2 - 2.0 * f1 * (1.0 - f2);
    }
    case Model::M3: {
      check_dim(z, 3);
      const double f1 = step(z[0]), f2 = step(z[1]), f3 = step(z[2]);
      return 2.0 * f1 * f2 * f3 - f1 * f2 * (1.0 - f3) - 1.5 * f1 * (1.0 - f2);
    }
    case Model::M5: {
      check_dim(z, 5);
      const double f1 = step(z[0]), f2 = step(z[1]), f3 = step(z[2]), f4 = step(z[3]),
                   f5 = step(z[4]);
      return f1 * f2 * f3 - f1 * f2 * (1.0 - f3) - 1.5 * f1 * (1.0 - f2) +
             1.5 * (1.0 - f1) * f4 - 0.8 * (1.0 - f1) * (1.0 - f4) * f5 +
             0.7 * (1.0 - f1) * (1.0 - f4) * (1.0 - f5);
    }
    case Model::Friedman:
      check_dim(z, 5);
      return 10.0 * std::sin(std::numbers::pi * z[0] * z[1]) +
             20.0 * (z[2] - 0.5) * (z[2] - 0.5) + 10.0 * z[3] + 5.0 * z[4];
    case Model::HomogeneousLinear: return homogeneous_slope;
  }
  return 0.0;
}

// Intercept β₀(z); zero for every heterogeneous design.
inline double beta0_eval(const DgpSpec& spec, std::span<const double> z) {
  check_dim(z, model_dz(spec));
  return spec.model == Model::HomogeneousLinear ? spec.beta0[0] : 0.0;
}

inline double beta1_eval(const DgpSpec& spec, std::span<const double> z) {
  check_dim(z, model_dz(spec));
  return beta1_eval(spec.model, z, spec.model == Model::HomogeneousLinear ? spec.beta0[1] : 0.0);
}

// (intercept, slope) at z.
inline std::vector<double> true_beta(const DgpSpec& spec, std::span<const double> z) {
  return {beta0_eval(spec, z), beta1_eval(spec, z)};
}

// Z ~ U[0,1]^d_Z, X ~ U(0,1), Y = β₀(Z) + β₁(Z)X + U with U ~ N(0, noise_sd²).
// Rows are drawn in order (z₁..z_d, x, u). The intercept column is included.
inline Dataset generate(const DgpSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n, dz = model_dz(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sd = spec.resolved_noise_sd();

  Dataset ds;
  ds.y_name = "y";
  ds.x_names = {"intercept", "x"};
  for (std::size_t j = 0; j < dz; ++j) ds.z_columns.push_back(ZColumn{"z" + std::to_string(j + 1)});
  ds.y.resize(n);
  ds.x = Matrix(n, 2);
  ds.z = Matrix(n, dz);
  ds.has_intercept = true;
  ds.z_normalized = true;
  for (std::size_t i = 0; i < n; ++i) {
    auto z = ds.z.row(i);
    for (std::size_t j = 0; j < dz; ++j) z[j] = unif(rng);
    const double x = unif(rng);
    const double u = sd * noise(rng);
    ds.x(i, 0) = 1.0;
    ds.x(i, 1) = x;
    ds.y[i] = beta0_eval(spec, z) + beta1_eval(spec, z) * x + u;
  }
  return ds;
}

// Mean, sd (n−1 denominator), non-excess kurtosis m₄/m₂² and skewness m₃/m₂^{3/2}.
struct Moments {
  double mean = 0.0;
  double sd = 0.0;
  double kurtosis = 0.0;
  double skewness = 0.0;
};

inline Moments sample_moments(std::span<const double> v) {
  Moments m;
  if (v.empty()) return m;
  const auto n = static_cast<double>(v.size());
  for (double x : v) m.mean += x;
  m.mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - m.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m.sd = v.size() > 1 ? std::sqrt(m2 / (n - 1.0)) : 0.0;
  m2 /= n;
  m3 /= n;
  m4 /= n;
  m.kurtosis = m2 > 0.0 ? m4 / (m2 * m2) : std::nan("");
  m.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : std::nan("");
  return m;
}

inline constexpr double kLmLevels[] = {0.01, 0.05, 0.10};
inline constexpr double kCoverageLevels[] = {0.90, 0.95};

// One replication's measurements.
struct RepResult {
  std::uint64_t data_seed = 0;
  std::uint64_t forest_seed = 0;
  bool ok = false;
  std::string error;
  Moments residual, intercept_error, slope_error;
  double slope_mse_rows = 0.0;  // mean over rows of (β̄₁(Zᵢ) − β₁(Zᵢ))²
  // Per test point: estimate minus truth and coverage indicators [coef][level].
  std::vector<std::array<double, 2>> point_error;
  std::vector<std::array<std::array<bool, 2>, 2>> point_covered;
  std::vector<bool> point_ok;
  double lm_p_value = std::nan("");
};

struct PointSummary {
  double c = 0.0;
  std::size_t evaluated = 0;
  std::array<double, 2> bias{};
  std::array<double, 2> mse{};
  std::array<std::array<double, 2>, 2> coverage{};  // [coef][level]
};

struct MomentSummary {
  Moments average;   // across-rep average of each per-rep statistic
  Moments mc_sd;     // across-rep sd of each per-rep statistic
};

struct McReport {
  DgpSpec spec;
  ForestConfig cfg;
  std::size_t reps = 0;
  std::size_t failed = 0;
  MomentSummary residual, intercept_error, slope_error;
  double slope_mse_rows = 0.0;
  std::vector<PointSummary> points;
  std::array<double, 3> lm_rejection{};  // at kLmLevels
  std::size_t lm_evaluated = 0;
  std::vector<RepResult> rep_results;
};

struct McOptions {
  std::size_t threads = 0;
  bool run_lm = true;
};

inline std::vector<double> test_point_grid() {
  std::vector<double> c;
  for (int i = 0; i <= 10; ++i) c.push_back(i / 10.0);
  return c;
}

inline RepResult run_replication(const DgpSpec& spec, const ForestConfig& cfg, std::size_t rep,
                                 bool run_lm) {
  RepResult r;
  r.data_seed = derive_seed(spec.seed, rep);
  r.forest_seed = derive_seed(r.data_seed, cfg.master_seed);
  const std::vector<double> grid = test_point_grid();
  r.point_error.assign(grid.size(), {0.0, 0.0});
  r.point_covered.assign(grid.size(), {});
  r.point_ok.assign(grid.size(), false);
  try {
    DgpSpec rep_spec = spec;
    rep_spec.seed = r.data_seed;
    Dataset ds = generate(rep_spec);
    ForestConfig rep_cfg = cfg;
    rep_cfg.master_seed = r.forest_seed;
    const Forest f = fit_forest(ds, rep_cfg, 1);

    const Matrix beta = beta_at_rows(f);
    std::vector<double> resid(ds.n()), e0(ds.n()), e1(ds.n());
    for (std::size_t i = 0; i < ds.n(); ++i) {
      const auto z = ds.z.row(i);
      resid[i] = ds.y[i] - dot(ds.x.row(i), beta.row(i));
      e0[i] = beta(i, 0) - beta0_eval(spec, z);
      e1[i] = beta(i, 1) - beta1_eval(spec, z);
      r.slope_mse_rows += e1[i] * e1[i];
    }
    r.slope_mse_rows /= static_cast<double>(ds.n());
    r.residual = sample_moments(resid);
    r.intercept_error = sample_moments(e0);
    r.slope_error = sample_moments(e1);

    const std::size_t dz = ds.dz();
    for (std::size_t p = 0; p < grid.size(); ++p) {
      const std::vector<double> z(dz, grid[p]);
      try {
        const CovarianceEstimate cov = sigma_hat(f, TestPoint{z, std::nullopt});
        const std::vector<double> truth = true_beta(spec, z);
        for (std::size_t j = 0; j < 2; ++j) {
          const double est = cov.estimate.beta[j];
          const double var = cov.sigma_hat(j, j);
          if (var < -1e-12) throw NumericalError("negative variance estimate");
          const double se = std::sqrt(std::max(var, 0.0));
          r.point_error[p][j] = est - truth[j];
          for (std::size_t l = 0; l < 2; ++l) {
            const double q = normal_quantile(0.5 * (1.0 + kCoverageLevels[l]));
            r.point_covered[p][j][l] = std::abs(est - truth[j]) <= q * se;
          }
        }
        r.point_ok[p] = true;
      } catch (const Error&) {
        r.point_ok[p] = false;
      }
    }
    if (run_lm) r.lm_p_value = lm_test(ds, f).p_value;
    r.ok = true;
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.code() + ": " + e.what();
  }
  return r;
}

inline MomentSummary summarize(const std::vector<Moments>& per_rep) {
  MomentSummary s;
  const auto field = [&](double Moments::*m) {
    std::vector<double> v;
    for (const auto& r : per_rep) v.push_back(r.*m);
    const Moments mm = sample_moments(v);
    return std::pair{mm.mean, mm.sd};
  };
  std::tie(s.average.mean, s.mc_sd.mean) = field(&Moments::mean);
  std::tie(s.average.sd, s.mc_sd.sd) = field(&Moments::sd);
  std::tie(s.average.kurtosis, s.mc_sd.kurtosis) = field(&Moments::kurtosis);
  std::tie(s.average.skewness, s.mc_sd.skewness) = field(&Moments::skewness);
  return s;
}

inline McReport run_monte_carlo(const DgpSpec& spec, const ForestConfig& cfg, std::size_t reps,
                                const McOptions& opt = {}) {
  if (reps < 1) throw ConfigError("reps must be >= 1");
  spec.validate();
  cfg.validate(spec.n);
  McReport rep;
  rep.spec = spec;
  rep.cfg = cfg;
  rep.reps = reps;
  rep.rep_results.resize(reps);
  parallel_for(reps, opt.threads, [&](std::size_t r) {
    rep.rep_results[r] = run_replication(spec, cfg, r, opt.run_lm);
  });

  std::vector<Moments> res, icpt, slope;
  for (const RepResult& r : rep.rep_results) {
    if (!r.ok) {
      ++rep.failed;
      continue;
    }
    res.push_back(r.residual);
    icpt.push_back(r.intercept_error);
    slope.push_back(r.slope_error);
    rep.slope_mse_rows += r.slope_mse_rows;
  }
  if (5 * rep.failed > reps)
    throw AbortError(std::to_string(rep.failed) + " of " + std::to_string(reps) +
                     " replications failed");
  rep.residual = summarize(res);
  rep.intercept_error = summarize(icpt);
  rep.slope_error = summarize(slope);
  rep.slope_mse_rows /= static_cast<double>(res.size());

  const std::vector<double> grid = test_point_grid();
  for (std::size_t p = 0; p < grid.size(); ++p) {
    PointSummary ps;
    ps.c = grid[p];
    for (const RepResult& r : rep.rep_results) {
      if (!r.ok || !r.point_ok[p]) continue;
      ++ps.evaluated;
      for (std::size_t j = 0; j < 2; ++j) {
        ps.bias[j] += r.point_error[p][j];
        ps.mse[j] += r.point_error[p][j] * r.point_error[p][j];
        for (std::size_t l = 0; l < 2; ++l) ps.coverage[j][l] += r.point_covered[p][j][l];
      }
    }
    if (ps.evaluated > 0) {
      const auto m = static_cast<double>(ps.evaluated);
      for (std::size_t j = 0; j < 2; ++j) {
        ps.bias[j] /= m;
        ps.mse[j] /= m;
        for (std::size_t l = 0; l < 2; ++l) ps.coverage[j][l] /= m;
      }
    } else {
      for (std::size_t j = 0; j < 2; ++j) {
        ps.bias[j] = ps.mse[j] = std::nan("");
        ps.coverage[j] = {std::nan(""), std::nan("")};
      }
    }
    rep.points.push_back(ps);
  }

  for (const RepResult& r : rep.rep_results) {
    if (!r.ok || std::isnan(r.lm_p_value)) continue;
    ++rep.lm_evaluated;
    for (std::size_t l = 0; l < 3; ++l) rep.lm_rejection[l] += r.lm_p_value < kLmLevels[l];
  }
  if (rep.lm_evaluated > 0)
    for (double& v : rep.lm_rejection) v /= static_cast<double>(rep.lm_evaluated);
  return rep;
}

// Appends the six tables to `dir`, writing headers when files are new.
inline void write_report_tables(const McReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string model = to_string(r.spec.model);
  const std::string n = std::to_string(r.spec.n);
  const auto fmt = [](double v) { return detail::format_double(v); };
  const auto open = [&](const char* name, const char* header) {
    const auto path = dir / name;
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    if (fresh) out << header << '\n';
    return out;
  };

  {
    auto out = open("goodness_of_fit.csv", "model,n,panel,statistic,value,mc_sd,reps");
    const std::pair<const char*, const MomentSummary*> panels[] = {
        {"error_term", &r.residual}, {"intercept", &r.intercept_error}, {"slope", &r.slope_error}};
    for (const auto& [panel, s] : panels) {
      const std::pair<const char*, double Moments::*> stats[] = {{"mean", &Moments::mean},
                                                                 {"standard_deviation", &Moments::sd},
                                                                 {"kurtosis", &Moments::kurtosis},
                                                                 {"skewness", &Moments::skewness}};
      for (const auto& [name, field] : stats)
        out << model << ',' << n << ',' << panel << ',' << name << ',' << fmt(s->average.*field)
            << ',' << fmt(s->mc_sd.*field) << ',' << (r.reps - r.failed) << '\n';
    }
  }
  for (std::size_t j = 0; j < 2; ++j) {
    {
      auto out = open(j == 0 ? "bias_mse_intercept.csv" : "bias_mse_slope.csv",
                      "model,n,point,bias,mse,evaluated");
      for (const auto& p : r.points)
        out << model << ',' << n << ',' << fmt(p.c) << ',' << fmt(p.bias[j]) << ','
            << fmt(p.mse[j]) << ',' << p.evaluated << '\n';
    }
    {
      auto out = open(j == 0 ? "coverage_intercept.csv" : "coverage_slope.csv",
                      "model,n,point,level,coverage,evaluated");
      for (const auto& p : r.points)
        for (std::size_t l = 0; l < 2; ++l)
          out << model << ',' << n << ',' << fmt(p.c) << ',' << fmt(kCoverageLevels[l]) << ','
              << fmt(p.coverage[j][l]) << ',' << p.evaluated << '\n';
    }
  }
  {
    auto out = open("lm_size.csv", "model,n,level,rejection_rate,evaluated");
    for (std::size_t l = 0; l < 3; ++l)
      out << model << ',' << n << ',' << fmt(kLmLevels[l]) << ',' << fmt(r.lm_rejection[l]) << ','
          << r.lm_evaluated << '\n';
  }
}

inline nlohmann::json spec_to_json(const DgpSpec& s) {
  nlohmann::json j = {{"model", to_string(s.model)},
                      {"n", s.n},
                      {"noise_sd", s.resolved_noise_sd()},
                      {"seed", s.seed}};
  if (s.model == Model::HomogeneousLinear) {
    j["beta0"] = s.beta0;
    j["dz"] = s.homogeneous_dz;
  }
  return j;
}

inline nlohmann::json report_manifest_entry(const McReport& r) {
  nlohmann::json reps = nlohmann::json::array();
  for (std::size_t i = 0; i < r.rep_results.size(); ++i) {
    const RepResult& rr = r.rep_results[i];
    nlohmann::json e = {{"rep", i}, {"data_seed", rr.data_seed}, {"forest_seed", rr.forest_seed},
                        {"ok", rr.ok}};
    if (!rr.ok) e["error"] = rr.error;
    reps.push_back(std::move(e));
  }
  return {{"spec", spec_to_json(r.spec)},
          {"reps", r.reps},
          {"failed", r.failed},
          {"single_rep", r.reps - r.failed == 1},
          {"slope_mse_rows", r.slope_mse_rows},
          {"replications", std::move(reps)}};
}

}  // namespace vcforest
