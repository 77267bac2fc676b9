#pragma once

// Homogeneity tests of H0: β(z) = β0 against a varying β(z): the Lagrange
// multiplier test (primary) and the generalized likelihood ratio test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "vcforest/errors.hpp"
#include "vcforest/forest.hpp"
#include "vcforest/linalg.hpp"
#include "vcforest/stats.hpp"

namespace vcforest {

struct OlsGlobal {
  std::vector<double> beta;
  std::vector<double> residuals;
  double rss = 0.0;
  Matrix gram;  // Σ XᵢXᵢᵀ
};

inline OlsGlobal global_ols(const Dataset& ds) {
  GramSystem g(ds.dx());
  for (std::size_t i = 0; i < ds.n(); ++i) g.add_row(ds.x.row(i), ds.y[i]);
  OlsGlobal out;
  out.beta = spd_solve(g.gram, g.cross);
  out.gram = g.gram;
  out.residuals.resize(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    out.residuals[i] = ds.y[i] - dot(ds.x.row(i), out.beta);
    out.rss += out.residuals[i] * out.residuals[i];
  }
  return out;
}

inline std::vector<double> forest_residuals(const Forest& f) {
  const Matrix beta = beta_at_rows(f);
  std::vector<double> out(f.n());
  for (std::size_t i = 0; i < f.n(); ++i)
    out[i] = f.data.y[i] - dot(f.data.x.row(i), beta.row(i));
  return out;
}

inline void check_fingerprint(const Dataset& ds, const Forest& f) {
  if (fingerprint(ds) != f.data_fingerprint)
    throw FingerprintError("dataset fingerprint " + fingerprint(ds) +
                           " does not match the forest's " + f.data_fingerprint);
}

struct LmTestResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
  std::vector<double> m_vector;
  Matrix v_matrix;
};

// T = Mᵀ(nV̂)⁻¹M with M = Σ ε̂ᵢ^OLS Zᵢ and
// V̂ = L̂ (n⁻¹ Σ (ε̂ᵢ^RF)² WᵢWᵢᵀ) L̂ᵀ, Wᵢ = (Zᵢ, Xᵢ), L̂ = [I : −ΣZXᵀ(ΣXXᵀ)⁻¹].
// When M vanishes to rounding (exact fits) T = 0 without inverting V̂.
inline LmTestResult lm_test(const Dataset& ds, const Forest& f) {
  check_fingerprint(ds, f);
  const std::size_t n = ds.n(), dx = ds.dx(), dz = ds.dz();
  const OlsGlobal ols = global_ols(ds);
  const std::vector<double> eps_rf = forest_residuals(f);

  LmTestResult out;
  out.dof = dz;
  out.m_vector.assign(dz, 0.0);
  Matrix zx(dz, dx);
  double y_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = ds.z.row(i);
    const auto x = ds.x.row(i);
    for (std::size_t a = 0; a < dz; ++a) {
      out.m_vector[a] += ols.residuals[i] * z[a];
      for (std::size_t c = 0; c < dx; ++c) zx(a, c) += z[a] * x[c];
    }
    y_scale += std::abs(ds.y[i]);
  }

  // L̂ = [I : −ΣZXᵀ (ΣXXᵀ)⁻¹]; the right block is (ΣXXᵀ)⁻¹ ΣXZᵀ transposed.
  const Matrix proj = spd_solve(ols.gram, zx.transpose());  // d_X × d_Z
  const std::size_t dw = dz + dx;
  Matrix l(dz, dw);
  for (std::size_t a = 0; a < dz; ++a) {
    l(a, a) = 1.0;
    for (std::size_t c = 0; c < dx; ++c) l(a, dz + c) = -proj(c, a);
  }

  Matrix meat(dw, dw);
  std::vector<double> w(dw);
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = ds.z.row(i);
    const auto x = ds.x.row(i);
    std::copy(z.begin(), z.end(), w.begin());
    std::copy(x.begin(), x.end(), w.begin() + static_cast<std::ptrdiff_t>(dz));
    const double e2 = eps_rf[i] * eps_rf[i];
    for (std::size_t r = 0; r < dw; ++r)
      for (std::size_t c = r; c < dw; ++c) meat(r, c) += e2 * w[r] * w[c];
  }
  for (std::size_t r = 0; r < dw; ++r)
    for (std::size_t c = r; c < dw; ++c) {
      meat(r, c) /= static_cast<double>(n);
      meat(c, r) = meat(r, c);
    }
  out.v_matrix = l * meat * l.transpose();
  symmetrize(out.v_matrix);

  double m_max = 0.0;
  for (double v : out.m_vector) m_max = std::max(m_max, std::abs(v));
  if (m_max <= 1e-8 * std::max(y_scale, 1.0)) {
    out.statistic = 0.0;
    out.p_value = 1.0;
    return out;
  }

  Matrix nv = out.v_matrix;
  for (double& v : nv.data()) v *= static_cast<double>(n);
  const std::vector<double> sol = spd_solve(nv, out.m_vector);
  out.statistic = std::max(dot(out.m_vector, sol), 0.0);
  out.p_value = chi2_upper_tail(out.statistic, dz);
  return out;
}

// Plug-in moments of the forest kernel θ. Diagonal moments average over all
// rows; pair and triple moments use every pair and triple inside a uniform
// random subset of rows sized so that its pair count is about pair_budget.
struct ThetaMoments {
  double diag_mean = 0.0;    // E θ(Z,Z)
  double diag_sq = 0.0;      // E θ(Z,Z)²
  double t11_sq = 0.0;       // E (sθ(Z,Z) − 1)²
  double pair_mean = 0.0;    // E θ(Z,Z')
  double pair_sq = 0.0;      // E θ(Z,Z')²
  double t12_sq = 0.0;       // E (sθ(Z,Z') − 1)²
  double triple = 0.0;       // E θ(Z,Z')θ(Z,Z'')
  double pair_spread = 0.0;  // E (sθ(Z,Z') + s² E[θ(Z,Z')θ(Z,Z'')])²
  double eta_sq = 0.0;       // E η(Z,Z')², η = sθ − 1 + (n−2)/n·τ
  std::size_t subset_size = 0;
  std::size_t pairs = 0;
};

inline std::size_t subset_for_budget(std::size_t n, std::size_t pair_budget) {
  const double m = std::ceil(0.5 * (1.0 + std::sqrt(1.0 + 8.0 * static_cast<double>(pair_budget))));
  return std::clamp<std::size_t>(static_cast<std::size_t>(m), 3, n);
}

inline ThetaMoments theta_moments(const Forest& f, std::size_t pair_budget, std::uint64_t seed) {
  const std::size_t n = f.n();
  if (n < 3) throw DimError("theta moments need at least 3 rows");
  const auto s = static_cast<double>(f.cfg.subsample_size(n));
  const auto nd = static_cast<double>(n);
  ThetaMoments out;

  std::vector<double> diag(n, 0.0);
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const auto& leaves = f.trees[b].leaves;
    const auto& rl = f.row_leaf[b];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = leaves[rl[i]].a_count();
      if (a > 0) diag[i] += 1.0 / static_cast<double>(a);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(f.trees.size());
  for (double& v : diag) {
    v *= inv_b;
    out.diag_mean += v;
    out.diag_sq += v * v;
    out.t11_sq += (s * v - 1.0) * (s * v - 1.0);
  }
  out.diag_mean /= nd;
  out.diag_sq /= nd;
  out.t11_sq /= nd;

  const std::size_t m = subset_for_budget(n, pair_budget);
  out.subset_size = m;
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m; ++i)
    std::swap(ids[i], ids[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
  ids.resize(m);

  // θ̂ among subset rows: bucket rows by leaf in each tree.
  Matrix theta(m, m);
  std::vector<std::pair<std::uint32_t, std::size_t>> bucket(m);
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const auto& leaves = f.trees[b].leaves;
    const auto& rl = f.row_leaf[b];
    for (std::size_t r = 0; r < m; ++r) bucket[r] = {rl[ids[r]], r};
    std::sort(bucket.begin(), bucket.end());
    for (std::size_t lo = 0; lo < m;) {
      std::size_t hi = lo + 1;
      while (hi < m && bucket[hi].first == bucket[lo].first) ++hi;
      const std::size_t a = leaves[bucket[lo].first].a_count();
      if (a > 0 && hi - lo > 1) {
        const double w = 1.0 / static_cast<double>(a);
        for (std::size_t p = lo; p < hi; ++p)
          for (std::size_t q = lo; q < hi; ++q)
            if (p != q) theta(bucket[p].second, bucket[q].second) += w;
      }
      lo = hi;
    }
  }
  for (double& v : theta.data()) v *= inv_b;

  const auto md = static_cast<double>(m);
  const double npairs = md * (md - 1.0);
  double triple_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0.0, row_sq = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const double t = theta(i, j);
      row += t;
      row_sq += t * t;
      out.pair_mean += t;
      out.pair_sq += t * t;
      out.t12_sq += (s * t - 1.0) * (s * t - 1.0);
    }
    triple_sum += row * row - row_sq;
  }
  out.pair_mean /= npairs;
  out.pair_sq /= npairs;
  out.t12_sq /= npairs;
  out.triple = triple_sum / (md * (md - 1.0) * (md - 2.0));
  out.pairs = static_cast<std::size_t>(npairs / 2.0);

  // τ(Zj,Zk) = E_Z[(sθ(Z,Zj) − 1)(sθ(Z,Zk) − 1)], averaged over the other subset rows.
  Matrix g(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) g(i, j) = s * (i == j ? diag[ids[i]] : theta(i, j)) - 1.0;
  const double shift = s * s * out.triple;
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < m; ++k) {
      if (j == k) continue;
      double tau = 0.0;
      for (std::size_t i = 0; i < m; ++i)
        if (i != j && i != k) tau += g(i, j) * g(i, k);
      tau /= md - 2.0;
      const double eta = g(j, k) + (nd - 2.0) / nd * tau;
      out.eta_sq += eta * eta;
      const double nu_term = s * theta(j, k) + shift;
      out.pair_spread += nu_term * nu_term;
    }
  out.eta_sq /= npairs;
  out.pair_spread /= npairs;
  return out;
}

// How μ̂ and ν̂ are assembled from the θ moments.
enum class GlrtCalibration {
  // μ̂ from the θ expansion of Δ times σ̂², ν̂² = 4d_X·E(sθ(Z,Z') + s²E[θ(Z,Z')θ(Z,Z'')])²
  // times σ̂⁴; standardized = (Λ − μ̂)/ν̂.
  ThetaLambda,
  // Both moments from the θ expansion of Δ = RSS₀ − RSS; standardized
  // = (Δ − μ̂)/ν̂, the same as working with Λ ≈ Δ/(2σ̂²) on its own scale.
  ThetaDelta,
  // Exact conditional moments of Δ = RSS₀ − RSS = εᵀMε given the fitted
  // structure, M = H + Hᵀ − HᵀH − P with H the forest smoother and P the OLS
  // projection: μ̂ = σ̃² tr M, ν̂² = 2σ̃⁴ tr M², σ̃² = RSS / tr((I−H)ᵀ(I−H)).
  SmootherTrace,
};

inline const char* to_string(GlrtCalibration c) {
  switch (c) {
    case GlrtCalibration::ThetaLambda: return "theta_lambda";
    case GlrtCalibration::ThetaDelta: return "theta_delta";
    case GlrtCalibration::SmootherTrace: return "smoother_trace";
  }
  return "smoother_trace";
}

// Forest smoother H (n × n): row i holds the weights with which β̄(Zᵢ) turns
// the responses into the fitted value Xᵢᵀβ̄(Zᵢ), so fitted = H·y exactly.
inline Matrix smoother_matrix(const Forest& f) {
  const std::size_t n = f.n(), d = f.dx();
  Matrix h(n, n);
  std::vector<std::size_t> valid(n, 0);
  std::vector<double> u(d);
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const FittedTree& tree = f.trees[b];
    std::vector<Matrix> inverse(tree.leaves.size());
    for (std::size_t l = 0; l < tree.leaves.size(); ++l)
      if (tree.leaves[l].fit.ok)
        inverse[l] = spd_solve(tree.leaves[l].gram.gram, Matrix::identity(d), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t l = f.row_leaf[b][i];
      const TreeLeaf& leaf = tree.leaves[l];
      if (!leaf.fit.ok) continue;
      ++valid[i];
      const auto xi = f.data.x.row(i);
      for (std::size_t r = 0; r < d; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += inverse[l](r, c) * xi[c];
        u[r] = acc;
      }
      for (RowId j : leaf.a_indices) h(i, j) += dot(u, f.data.x.row(j));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (valid[i] == 0)
      throw NoValidLeafError("no tree has a valid leaf fit at training row " + std::to_string(i));
    const double inv = 1.0 / static_cast<double>(valid[i]);
    for (double& v : h.row(i)) v *= inv;
  }
  return h;
}

// tr M and tr M² for M = H + Hᵀ − HᵀH − P, P the OLS projection of rank d_X.
struct SmootherTraces {
  double trace_h = 0.0;
  double frobenius_h = 0.0;  // ‖H‖²_F = tr HᵀH
  double trace_m = 0.0;
  double trace_m2 = 0.0;
  double residual_df = 0.0;  // tr (I−H)ᵀ(I−H)
};

inline SmootherTraces smoother_traces(const Forest& f, const Matrix& h) {
  const std::size_t n = f.n(), d = f.dx();
  SmootherTraces t;
  for (std::size_t i = 0; i < n; ++i) t.trace_h += h(i, i);
  for (double v : h.data()) t.frobenius_h += v * v;

  // P = X (XᵀX)⁻¹ Xᵀ.
  GramSystem g(d);
  for (std::size_t i = 0; i < n; ++i) g.add_row(f.data.x.row(i), 0.0);
  const Matrix xt_inv = spd_solve(g.gram, f.data.x.transpose());  // d × n
  Matrix hth(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto hk = h.row(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = hk[i];
      if (a == 0.0) continue;
      auto out = hth.row(i);
      for (std::size_t j = 0; j < n; ++j) out[j] += a * hk[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = f.data.x.row(i);
    for (std::size_t j = i; j < n; ++j) {
      double p = 0.0;
      for (std::size_t c = 0; c < d; ++c) p += xi[c] * xt_inv(c, j);
      const double m = h(i, j) + h(j, i) - hth(i, j) - p;
      t.trace_m2 += (i == j ? 1.0 : 2.0) * m * m;
      if (i == j) t.trace_m += m;
    }
  }
  t.residual_df = static_cast<double>(n) - 2.0 * t.trace_h + t.frobenius_h;
  return t;
}

struct GlrtOptions {
  std::size_t pair_budget = 20000;
  std::uint64_t seed = 0;
  GlrtCalibration calibration = GlrtCalibration::SmootherTrace;
  // Multiply μ̂ by σ̂² and ν̂² by σ̂⁴.
  bool sigma_scaling = true;
};

struct GlrtResult {
  double lambda = 0.0;
  double rss0 = 0.0;
  double rss = 0.0;
  double mu_hat = 0.0;
  double nu_hat = 0.0;
  double standardized = 0.0;
  double p_value = 1.0;
  double sigma2_hat = 0.0;
  ThetaMoments moments;
  GlrtOptions options;
};

inline double glrt_lambda(double rss0, double rss, std::size_t n) {
  if (!(rss > 0.0) || !(rss0 > 0.0))
    throw DegenerateFitError("residual sum of squares is zero; the likelihood ratio is undefined");
  return 0.5 * static_cast<double>(n) * std::log(rss0 / rss);
}

inline GlrtResult glrt_test(const Dataset& ds, const Forest& f, const GlrtOptions& opt = {}) {
  check_fingerprint(ds, f);
  const std::size_t n = ds.n();
  const auto nd = static_cast<double>(n);
  const auto dx = static_cast<double>(ds.dx());
  const auto s = static_cast<double>(f.cfg.subsample_size(n));

  GlrtResult out;
  out.options = opt;
  const OlsGlobal ols = global_ols(ds);
  out.rss0 = ols.rss;
  for (double e : forest_residuals(f)) out.rss += e * e;
  double yy = 0.0;
  for (double y : ds.y) yy += y * y;
  if (out.rss <= 1e-14 * yy || out.rss0 <= 1e-14 * yy)
    throw DegenerateFitError("residual sum of squares is zero; the likelihood ratio is undefined");
  out.lambda = glrt_lambda(out.rss0, out.rss, n);
  out.sigma2_hat = out.rss / nd;

  if (opt.calibration == GlrtCalibration::SmootherTrace) {
    const SmootherTraces tr = smoother_traces(f, smoother_matrix(f));
    out.sigma2_hat = out.rss / tr.residual_df;
    const double s2 = opt.sigma_scaling ? out.sigma2_hat : 1.0;
    out.mu_hat = s2 * tr.trace_m;
    const double nu2 = 2.0 * s2 * s2 * tr.trace_m2;
    if (!(nu2 > 0.0) || !std::isfinite(nu2))
      throw NumericalError("GLRT spread estimate is not positive");
    out.nu_hat = std::sqrt(nu2);
    out.standardized = (out.rss0 - out.rss - out.mu_hat) / out.nu_hat;
    out.p_value = normal_upper_tail(out.standardized);
    return out;
  }

  out.moments = theta_moments(f, opt.pair_budget, opt.seed);
  const ThetaMoments& mo = out.moments;
  const double s2 = opt.sigma_scaling ? out.sigma2_hat : 1.0;
  const double mu = 2.0 * s2 * dx * (s * mo.diag_mean - 1.0) +
                    s2 * dx / (nd * nd) * (nd * mo.t11_sq + nd * (nd - 1.0) / 2.0 * mo.t12_sq);
  double nu2 = 0.0;
  double stat = 0.0;
  if (opt.calibration == GlrtCalibration::ThetaLambda) {
    nu2 = 4.0 * dx * mo.pair_spread * s2 * s2;
    stat = out.lambda;
  } else {
    nu2 = 4.0 * nd * (nd - 1.0) / (nd * nd) * s2 * s2 * dx * mo.eta_sq;
    stat = out.rss0 - out.rss;
  }
  if (!(nu2 > 0.0) || !std::isfinite(nu2))
    throw NumericalError("GLRT spread estimate is not positive");
  out.mu_hat = mu;
  out.nu_hat = std::sqrt(nu2);
  out.standardized = (stat - out.mu_hat) / out.nu_hat;
  out.p_value = normal_upper_tail(out.standardized);
  return out;
}

inline nlohmann::json to_json(const LmTestResult& r) {
  return {{"test", "lm"},       {"statistic", r.statistic}, {"dof", r.dof},
          {"p_value", r.p_value}, {"m_vector", r.m_vector}};
}

inline nlohmann::json to_json(const GlrtResult& r) {
  return {{"test", "glrt"},
          {"experimental", true},
          {"statistic", r.lambda},
          {"rss0", r.rss0},
          {"rss", r.rss},
          {"sigma2_hat", r.sigma2_hat},
          {"mu", r.mu_hat},
          {"nu", r.nu_hat},
          {"standardized", r.standardized},
          {"p_value", r.p_value},
          {"seed", r.options.seed},
          {"pair_budget", r.options.pair_budget},
          {"calibration", to_string(r.options.calibration)},
          {"sigma_scaling", r.options.sigma_scaling}};
}

}  // namespace vcforest
