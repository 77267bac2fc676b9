#pragma once

// Forest of honest trees: fitting, aggregated coefficient estimates, forest
// kernel weights and the sandwich covariance behind the confidence intervals.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "vcforest/config.hpp"
#include "vcforest/data.hpp"
#include "vcforest/errors.hpp"
#include "vcforest/linalg.hpp"
#include "vcforest/stats.hpp"
#include "vcforest/tree.hpp"

namespace vcforest {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed of stream `index` under `master`; used for trees, replications and
// pair sampling alike.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs body(i) for i in [0, count) on up to `threads` workers. The first
// exception thrown by any worker is rethrown after all workers join.
template <typename Body>
void parallel_for(std::size_t count, std::size_t threads, Body&& body) {
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(count, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next.store(count);
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct Forest {
  ForestConfig cfg;
  Dataset data;
  std::string data_fingerprint;
  std::vector<FittedTree> trees;
  // row_leaf[b][i]: leaf of tree b containing training row i.
  std::vector<std::vector<std::uint32_t>> row_leaf;

  std::size_t num_trees() const noexcept { return trees.size(); }
  std::size_t n() const noexcept { return data.n(); }
  std::size_t dx() const noexcept { return data.dx(); }
  std::size_t dz() const noexcept { return data.dz(); }
};

inline std::vector<std::uint32_t> assign_rows(const FittedTree& tree, const Dataset& ds) {
  std::vector<std::uint32_t> out(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i)
    out[i] = static_cast<std::uint32_t>(locate_leaf_unchecked(tree, ds.z.row(i)));
  return out;
}

// Recomputes the per-row leaf index; needed after trees are assembled by hand
// or loaded from disk.
inline void index_rows(Forest& f, std::size_t threads = 1) {
  f.row_leaf.assign(f.trees.size(), {});
  parallel_for(f.trees.size(), threads,
               [&](std::size_t b) { f.row_leaf[b] = assign_rows(f.trees[b], f.data); });
}

inline Forest fit_forest(Dataset ds, const ForestConfig& cfg, std::size_t threads = 0) {
  cfg.validate(ds.n());
  validate_dataset(ds);
  Forest f;
  f.cfg = cfg;
  f.data = std::move(ds);
  f.data_fingerprint = fingerprint(f.data);
  f.trees.resize(cfg.num_trees);
  f.row_leaf.resize(cfg.num_trees);
  parallel_for(cfg.num_trees, threads, [&](std::size_t b) {
    f.trees[b] = grow_tree(f.data, cfg, derive_seed(cfg.master_seed, b));
    f.row_leaf[b] = assign_rows(f.trees[b], f.data);
  });
  return f;
}

// Leaf of every tree at z.
inline std::vector<std::uint32_t> query_leaves(const Forest& f, const TestPoint& point) {
  if (point.z.size() != f.dz())
    throw DimError("test point has " + std::to_string(point.z.size()) +
                   " coordinates, expected " + std::to_string(f.dz()));
  for (double v : point.z)
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("test point lies outside [0,1]^d_Z");
  std::vector<std::uint32_t> out(f.trees.size());
  for (std::size_t b = 0; b < f.trees.size(); ++b)
    out[b] = static_cast<std::uint32_t>(locate_leaf_unchecked(f.trees[b], point.z));
  return out;
}

struct BetaEstimate {
  std::vector<double> beta;
  std::size_t valid_trees = 0;
  std::vector<char> per_tree_ok;
  std::vector<std::size_t> a_counts;

  bool unreliable() const noexcept {
    return 2 * valid_trees < per_tree_ok.size();
  }
};

inline BetaEstimate beta_bar(const Forest& f, const std::vector<std::uint32_t>& leaves) {
  BetaEstimate est;
  est.beta.assign(f.dx(), 0.0);
  est.per_tree_ok.resize(f.trees.size());
  est.a_counts.resize(f.trees.size());
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const TreeLeaf& leaf = f.trees[b].leaves[leaves[b]];
    est.a_counts[b] = leaf.a_count();
    est.per_tree_ok[b] = leaf.fit.ok;
    if (!leaf.fit.ok) continue;
    ++est.valid_trees;
    for (std::size_t j = 0; j < f.dx(); ++j) est.beta[j] += leaf.fit.beta[j];
  }
  if (est.valid_trees == 0)
    throw NoValidLeafError("no tree has a valid leaf fit at this point");
  for (double& v : est.beta) v /= static_cast<double>(est.valid_trees);
  return est;
}

inline BetaEstimate beta_bar(const Forest& f, const TestPoint& point) {
  return beta_bar(f, query_leaves(f, point));
}

// Ω̄(z) and γ̄(z): leaf averages of XXᵀ and XY over trees with a non-empty leaf.
struct LeafAverages {
  Matrix omega;
  std::vector<double> gamma;
  std::size_t trees_used = 0;
};

inline LeafAverages leaf_averages(const Forest& f, const std::vector<std::uint32_t>& leaves) {
  const std::size_t d = f.dx();
  LeafAverages avg{Matrix(d, d), std::vector<double>(d, 0.0), 0};
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const TreeLeaf& leaf = f.trees[b].leaves[leaves[b]];
    if (leaf.a_count() == 0) continue;
    ++avg.trees_used;
    const double w = 1.0 / static_cast<double>(leaf.a_count());
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) avg.omega(r, c) += w * leaf.gram.gram(r, c);
      avg.gamma[r] += w * leaf.gram.cross[r];
    }
  }
  if (avg.trees_used == 0) throw NoValidLeafError("every tree has an empty leaf at this point");
  const double inv = 1.0 / static_cast<double>(avg.trees_used);
  for (double& v : avg.omega.data()) v *= inv;
  for (double& v : avg.gamma) v *= inv;
  return avg;
}

inline std::vector<double> beta_check(const Forest& f, const TestPoint& point) {
  const LeafAverages avg = leaf_averages(f, query_leaves(f, point));
  return spd_solve(avg.omega, avg.gamma, f.cfg.rcond);
}

inline double s_weight(const Forest& f, std::size_t b, std::uint32_t leaf_at_z, std::size_t i) {
  const TreeLeaf& leaf = f.trees[b].leaves[leaf_at_z];
  if (leaf.a_count() == 0 || f.row_leaf[b][i] != leaf_at_z) return 0.0;
  return 1.0 / static_cast<double>(leaf.a_count());
}

inline double s_weight(const Forest& f, std::size_t b, const TestPoint& point, std::size_t i) {
  return s_weight(f, b, static_cast<std::uint32_t>(locate_leaf(f.trees[b], point)), i);
}

// θ̂(z, Zᵢ) for every training row i, summed in tree order.
inline std::vector<double> theta_vector(const Forest& f, const std::vector<std::uint32_t>& leaves) {
  std::vector<double> theta(f.n(), 0.0);
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const TreeLeaf& leaf = f.trees[b].leaves[leaves[b]];
    if (leaf.a_count() == 0) continue;
    const double w = 1.0 / static_cast<double>(leaf.a_count());
    const auto& rl = f.row_leaf[b];
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (rl[i] == leaves[b]) theta[i] += w;
  }
  const double inv_b = 1.0 / static_cast<double>(f.trees.size());
  for (double& v : theta) v *= inv_b;
  return theta;
}

inline double theta_hat(const Forest& f, const TestPoint& point, std::size_t i) {
  const auto leaves = query_leaves(f, point);
  double acc = 0.0;
  for (std::size_t b = 0; b < f.trees.size(); ++b) acc += s_weight(f, b, leaves[b], i);
  return acc / static_cast<double>(f.trees.size());
}

// θ̂(Zᵢ, Zⱼ) between two training rows.
inline double theta_rows(const Forest& f, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const auto leaf_i = f.row_leaf[b][i];
    if (f.row_leaf[b][j] != leaf_i) continue;
    const std::size_t a = f.trees[b].leaves[leaf_i].a_count();
    if (a > 0) acc += 1.0 / static_cast<double>(a);
  }
  return acc / static_cast<double>(f.trees.size());
}

inline double lambda_scale(const Forest& f) {
  const auto n = static_cast<double>(f.n());
  const std::size_t s = f.cfg.subsample_size(f.n());
  if (f.cfg.lambda_scaling == LambdaScaling::AsPrinted) {
    const auto sd = static_cast<double>(s);
    return sd * sd / n;
  }
  const auto a = static_cast<double>(s / 2);
  return a * a / (n * n);
}

// Λ̂(z) = c · Σᵢ ε̂ᵢ(z)² θ̂(z, Zᵢ)² XᵢXᵢᵀ with ε̂ᵢ(z) = Yᵢ − Xᵢᵀβ̄(z).
inline Matrix lambda_hat(const Forest& f, std::span<const double> beta,
                         std::span<const double> theta) {
  const std::size_t d = f.dx();
  Matrix lam(d, d);
  for (std::size_t i = 0; i < f.n(); ++i) {
    if (theta[i] == 0.0) continue;
    const auto x = f.data.x.row(i);
    const double eps = f.data.y[i] - dot(x, beta);
    const double w = eps * eps * theta[i] * theta[i];
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = r; c < d; ++c) lam(r, c) += w * x[r] * x[c];
  }
  const double scale = lambda_scale(f);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = r; c < d; ++c) {
      lam(r, c) *= scale;
      lam(c, r) = lam(r, c);
    }
  return lam;
}

struct ThetaSummary {
  std::size_t support = 0;  // rows with θ̂ > 0
  double max = 0.0;
  double sum = 0.0;
};

struct CovarianceEstimate {
  BetaEstimate estimate;
  Matrix omega_bar;
  Matrix lambda_hat;
  Matrix sigma_hat;
  ThetaSummary theta;
};

inline Matrix bread_matrix(const Forest& f, const std::vector<std::uint32_t>& leaves) {
  switch (f.cfg.bread) {
    case BreadMatrix::ForestAverage: return leaf_averages(f, leaves).omega;
    case BreadMatrix::SingleTree:
      for (std::size_t b = 0; b < f.trees.size(); ++b) {
        const TreeLeaf& leaf = f.trees[b].leaves[leaves[b]];
        if (!leaf.fit.ok) continue;
        Matrix m = leaf.gram.gram;
        for (double& v : m.data()) v /= static_cast<double>(leaf.a_count());
        return m;
      }
      throw NoValidLeafError("no tree has a valid leaf fit at this point");
    case BreadMatrix::FullSample: {
      GramSystem g(f.dx());
      for (std::size_t i = 0; i < f.n(); ++i) g.add_row(f.data.x.row(i), f.data.y[i]);
      Matrix m = g.gram;
      for (double& v : m.data()) v /= static_cast<double>(f.n());
      return m;
    }
  }
  throw ConfigError("unknown bread matrix");
}

inline CovarianceEstimate sigma_hat(const Forest& f, const TestPoint& point) {
  const auto leaves = query_leaves(f, point);
  CovarianceEstimate out;
  out.estimate = beta_bar(f, leaves);
  const std::vector<double> theta = theta_vector(f, leaves);
  for (double t : theta)
    if (t > 0.0) {
      ++out.theta.support;
      out.theta.max = std::max(out.theta.max, t);
      out.theta.sum += t;
    }
  out.lambda_hat = lambda_hat(f, out.estimate.beta, theta);
  out.omega_bar = bread_matrix(f, leaves);
  const Matrix inv = spd_solve(out.omega_bar, Matrix::identity(f.dx()), f.cfg.rcond);
  out.sigma_hat = inv * out.lambda_hat * inv;
  symmetrize(out.sigma_hat);
  return out;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct CoefficientIntervals {
  CovarianceEstimate cov;
  std::vector<double> se;
  std::vector<Interval> intervals;
};

inline CoefficientIntervals confidence_interval(const Forest& f, const TestPoint& point,
                                                double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0, 1)");
  CoefficientIntervals out;
  out.cov = sigma_hat(f, point);
  const double q = normal_quantile(0.5 * (1.0 + level));
  for (std::size_t j = 0; j < f.dx(); ++j) {
    const double var = out.cov.sigma_hat(j, j);
    if (var < -1e-12) throw NumericalError("negative variance estimate");
    const double se = std::sqrt(std::max(var, 0.0));
    const double b = out.cov.estimate.beta[j];
    out.se.push_back(se);
    out.intervals.push_back({b - q * se, b + q * se});
  }
  return out;
}

// β̄(Zᵢ) at every training row (n × d_X); rows with no valid tree throw.
inline Matrix beta_at_rows(const Forest& f) {
  const std::size_t d = f.dx();
  Matrix out(f.n(), d);
  std::vector<std::size_t> valid(f.n(), 0);
  for (std::size_t b = 0; b < f.trees.size(); ++b) {
    const auto& leaves = f.trees[b].leaves;
    const auto& rl = f.row_leaf[b];
    for (std::size_t i = 0; i < f.n(); ++i) {
      const TreeLeaf& leaf = leaves[rl[i]];
      if (!leaf.fit.ok) continue;
      ++valid[i];
      for (std::size_t j = 0; j < d; ++j) out(i, j) += leaf.fit.beta[j];
    }
  }
  for (std::size_t i = 0; i < f.n(); ++i) {
    if (valid[i] == 0)
      throw NoValidLeafError("no tree has a valid leaf fit at training row " + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j) out(i, j) /= static_cast<double>(valid[i]);
  }
  return out;
}

// Fraction of leaves (over all trees) whose OLS fit failed.
inline double invalid_leaf_fraction(const Forest& f) {
  std::size_t total = 0, bad = 0;
  for (const auto& t : f.trees)
    for (const auto& leaf : t.leaves) {
      ++total;
      bad += leaf.fit.ok ? 0 : 1;
    }
  return total == 0 ? 0.0 : static_cast<double>(bad) / static_cast<double>(total);
}

}  // namespace vcforest
