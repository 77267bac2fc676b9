#pragma once

// One honest, double-sample local-linear tree: the subsample is split into a
// structure half B (drives every split) and an estimation half A (fits the
// leaf OLS). Splits minimize the summed child RSS subject to α-regularity and
// stop once every leaf holds between k and 2k-1 B-rows.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "vcforest/config.hpp"
#include "vcforest/data.hpp"
#include "vcforest/errors.hpp"
#include "vcforest/linalg.hpp"

namespace vcforest {

using RowId = std::uint32_t;

enum class SplitKind : std::uint8_t {
  Threshold,  // z_dim <= delta goes left
  Category,   // z_dim == delta goes left
};

struct SplitCandidate {
  std::size_t dim = 0;
  SplitKind kind = SplitKind::Threshold;
  double delta = 0.0;
  // Δ = RSS(left) + RSS(right).
  double loss = 0.0;
  std::size_t left_count = 0;
  std::size_t right_count = 0;
};

// OLS gate used while scanning candidate children. Leaf fits use the stricter
// ForestConfig::min_count instead.
struct ScanGate {
  std::size_t ols_min_count = 1;
  double rcond = kDefaultRcond;
};

// Smallest admissible child size for a node of node_count B-rows.
inline std::size_t min_child_size(std::size_t node_count, double alpha, std::size_t min_child) {
  const auto by_alpha =
      static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(node_count) - 1e-9));
  return std::max({by_alpha, min_child, std::size_t{1}});
}

inline double child_rss(const GramSystem& g, const ScanGate& gate) {
  return ols_solve(g, gate.ols_min_count, gate.rcond).rss;
}

namespace detail {

inline double tie_tolerance(double yy) { return 1e-10 * std::max(1.0, std::abs(yy)); }

inline GramSystem accumulate_rows(const Dataset& ds, std::span<const RowId> rows) {
  GramSystem g(ds.dx());
  for (RowId r : rows) g.add_row(ds.x.row(r), ds.y[r]);
  return g;
}

}  // namespace detail

// Best threshold on a continuous dimension. Candidates are the node's observed
// values; both children must keep at least max(ceil(α·|node|), min_child) rows.
// Ties in Δ resolve to the smallest threshold.
inline std::optional<SplitCandidate> best_split_continuous(const Dataset& ds,
                                                           std::span<const RowId> rows,
                                                           std::size_t dim, double alpha,
                                                           std::size_t min_child,
                                                           const ScanGate& gate = {}) {
  const std::size_t m = rows.size();
  if (m < 2) return std::nullopt;
  const std::size_t need = min_child_size(m, alpha, min_child);
  if (2 * need > m) return std::nullopt;

  std::vector<std::pair<double, RowId>> sorted(m);
  for (std::size_t i = 0; i < m; ++i) sorted[i] = {ds.z(rows[i], dim), rows[i]};
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front().first == sorted.back().first) return std::nullopt;

  std::vector<RowId> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = sorted[i].second;

  GramSystem left(ds.dx());
  GramSystem right = detail::accumulate_rows(ds, order);
  const double tol = detail::tie_tolerance(right.yy);
  std::size_t removals = 0;
  std::optional<SplitCandidate> best;

  for (std::size_t p = 0; p + 1 < m; ++p) {
    const RowId r = order[p];
    left.add_row(ds.x.row(r), ds.y[r]);
    right.remove_row(ds.x.row(r), ds.y[r]);
    // Downdates drift; rebuild the right side periodically.
    if (++removals % 64 == 0)
      right = detail::accumulate_rows(ds, std::span<const RowId>(order).subspan(p + 1));
    if (sorted[p + 1].first == sorted[p].first) continue;
    const std::size_t lc = p + 1;
    const std::size_t rc = m - lc;
    if (lc < need) continue;
    if (rc < need) break;
    const double loss = child_rss(left, gate) + child_rss(right, gate);
    if (!best || loss < best->loss - tol)
      best = SplitCandidate{dim, SplitKind::Threshold, sorted[p].first, loss, lc, rc};
  }
  return best;
}

// Best one-vs-rest category split on a discrete dimension. Ties resolve to the
// smallest grid value.
inline std::optional<SplitCandidate> best_split_discrete(const Dataset& ds,
                                                         std::span<const RowId> rows,
                                                         std::size_t dim, double alpha,
                                                         std::size_t min_child,
                                                         const ScanGate& gate = {}) {
  const std::size_t m = rows.size();
  if (m < 2) return std::nullopt;
  const std::size_t need = min_child_size(m, alpha, min_child);

  std::vector<double> values;
  values.reserve(m);
  for (RowId r : rows) values.push_back(ds.z(r, dim));
  std::vector<double> present = values;
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  if (present.size() < 2) return std::nullopt;

  const double tol = detail::tie_tolerance(detail::accumulate_rows(ds, rows).yy);
  std::optional<SplitCandidate> best;
  for (double cat : present) {
    GramSystem left(ds.dx()), right(ds.dx());
    for (std::size_t i = 0; i < m; ++i) {
      const RowId r = rows[i];
      (values[i] == cat ? left : right).add_row(ds.x.row(r), ds.y[r]);
    }
    if (left.count < need || right.count < need) continue;
    const double loss = child_rss(left, gate) + child_rss(right, gate);
    if (!best || loss < best->loss - tol)
      best = SplitCandidate{dim, SplitKind::Category, cat, loss, left.count, right.count};
  }
  return best;
}

inline std::optional<SplitCandidate> best_split(const Dataset& ds, std::span<const RowId> rows,
                                                std::size_t dim, double alpha,
                                                std::size_t min_child, const ScanGate& gate) {
  return ds.z_columns[dim].discrete()
             ? best_split_discrete(ds, rows, dim, alpha, min_child, gate)
             : best_split_continuous(ds, rows, dim, alpha, min_child, gate);
}

struct DimChoiceOptions {
  double pi = 1.0;
  double alpha = 0.005;
  std::size_t min_child = 1;
  ScanGate gate;
};

// With probability π a dimension is drawn uniformly; otherwise (or when the
// drawn dimension has no feasible split) the dimension with the smallest Δ is
// taken, ties going to the lowest index. Every dimension is therefore selected
// with probability at least π/d_Z. Returns nullopt when no dimension is
// feasible.
template <typename Rng>
std::optional<SplitCandidate> choose_split_dim(Rng& rng, const Dataset& ds,
                                               std::span<const RowId> rows,
                                               const DimChoiceOptions& opt) {
  const std::size_t dz = ds.dz();
  std::vector<std::optional<std::optional<SplitCandidate>>> cache(dz);
  const auto eval = [&](std::size_t j) -> const std::optional<SplitCandidate>& {
    if (!cache[j]) cache[j] = best_split(ds, rows, j, opt.alpha, opt.min_child, opt.gate);
    return *cache[j];
  };

  bool uniform = opt.pi >= 1.0;
  if (!uniform) uniform = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < opt.pi;
  if (uniform) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, dz - 1)(rng);
    if (const auto& c = eval(j)) return c;
  }

  std::optional<SplitCandidate> best;
  for (std::size_t j = 0; j < dz; ++j) {
    const auto& c = eval(j);
    if (!c) continue;
    const double tol = detail::tie_tolerance(std::abs(c->loss));
    if (!best || c->loss < best->loss - tol) best = c;
  }
  return best;
}

struct TreeNode {
  // Internal nodes: split rule and children. Leaves: leaf >= 0.
  std::int32_t dim = -1;
  SplitKind kind = SplitKind::Threshold;
  double delta = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::int32_t leaf = -1;
  std::uint32_t b_count = 0;

  bool is_leaf() const noexcept { return leaf >= 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct TreeLeaf {
  std::vector<RowId> a_indices;
  GramSystem gram;  // Σ over A-rows in the leaf
  OlsFit fit;
  std::uint32_t b_count = 0;
  // Left unsplit although its B-count is outside [k, 2k-1].
  bool forced_terminal = false;

  std::size_t a_count() const noexcept { return a_indices.size(); }
  friend bool operator==(const TreeLeaf&, const TreeLeaf&) = default;
};

struct FittedTree {
  std::vector<TreeNode> nodes;
  std::vector<TreeLeaf> leaves;
  std::vector<RowId> a_indices;
  std::vector<RowId> b_indices;
  std::uint64_t seed = 0;

  friend bool operator==(const FittedTree&, const FittedTree&) = default;
};

// Unchecked descent; z must be a valid normalized point.
inline std::size_t locate_leaf_unchecked(const FittedTree& tree, std::span<const double> z) {
  std::size_t node = 0;
  while (!tree.nodes[node].is_leaf()) {
    const TreeNode& nd = tree.nodes[node];
    const double v = z[static_cast<std::size_t>(nd.dim)];
    const bool go_left = nd.kind == SplitKind::Threshold ? v <= nd.delta : v == nd.delta;
    node = static_cast<std::size_t>(go_left ? nd.left : nd.right);
  }
  return static_cast<std::size_t>(tree.nodes[node].leaf);
}

inline std::size_t locate_leaf(const FittedTree& tree, const TestPoint& point) {
  for (double v : point.z)
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("test point lies outside [0,1]^d_Z");
  return locate_leaf_unchecked(tree, point.z);
}

struct TreeBeta {
  std::vector<double> beta;
  bool ok = false;
  std::size_t a_count = 0;
};

inline TreeBeta tree_beta(const FittedTree& tree, const TestPoint& point) {
  const TreeLeaf& leaf = tree.leaves[locate_leaf(tree, point)];
  return TreeBeta{leaf.fit.beta, leaf.fit.ok, leaf.a_count()};
}

// Fits the leaf OLS from its A-rows in stored order.
inline void fit_leaf(const Dataset& ds, TreeLeaf& leaf, std::size_t min_count, double rcond) {
  leaf.gram = detail::accumulate_rows(ds, leaf.a_indices);
  leaf.fit = ols_solve(leaf.gram, min_count, rcond);
}

// Algorithm: draw s rows without replacement (partial Fisher-Yates), A = first
// floor(s/2), B = the rest; grow on B until every leaf has [k, 2k-1] B-rows or
// no admissible split remains; fit each leaf by OLS on its A-rows.
inline FittedTree grow_tree(const Dataset& ds, const ForestConfig& cfg, std::uint64_t seed) {
  cfg.validate(ds.n());
  const std::size_t n = ds.n();
  const std::size_t s = cfg.subsample_size(n);
  const std::size_t k = cfg.resolved_leaf_size(s);
  const std::size_t min_count = cfg.resolved_min_count(ds.dx());

  FittedTree tree;
  tree.seed = seed;
  std::mt19937_64 rng(seed);

  std::vector<RowId> ids(n);
  std::iota(ids.begin(), ids.end(), RowId{0});
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(ids[i], ids[j]);
  }
  const std::size_t a_size = s / 2;
  tree.a_indices.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(a_size));
  tree.b_indices.assign(ids.begin() + static_cast<std::ptrdiff_t>(a_size),
                        ids.begin() + static_cast<std::ptrdiff_t>(s));
  std::sort(tree.a_indices.begin(), tree.a_indices.end());
  std::sort(tree.b_indices.begin(), tree.b_indices.end());

  const DimChoiceOptions opt{cfg.pi, cfg.alpha, k, ScanGate{ds.dx(), cfg.rcond}};

  struct Pending {
    std::size_t node;
    std::vector<RowId> rows;
  };
  std::vector<Pending> stack;
  tree.nodes.push_back(TreeNode{});
  stack.push_back({0, tree.b_indices});

  while (!stack.empty()) {
    Pending cur = std::move(stack.back());
    stack.pop_back();
    const std::size_t count = cur.rows.size();
    tree.nodes[cur.node].b_count = static_cast<std::uint32_t>(count);

    std::optional<SplitCandidate> split;
    if (count >= 2 * k) split = choose_split_dim(rng, ds, cur.rows, opt);
    if (!split) {
      TreeLeaf leaf;
      leaf.b_count = static_cast<std::uint32_t>(count);
      leaf.forced_terminal = count < k || count > 2 * k - 1;
      tree.nodes[cur.node].leaf = static_cast<std::int32_t>(tree.leaves.size());
      tree.leaves.push_back(std::move(leaf));
      continue;
    }

    std::vector<RowId> left_rows, right_rows;
    left_rows.reserve(split->left_count);
    right_rows.reserve(split->right_count);
    for (RowId r : cur.rows) {
      const double v = ds.z(r, split->dim);
      const bool go_left =
          split->kind == SplitKind::Threshold ? v <= split->delta : v == split->delta;
      (go_left ? left_rows : right_rows).push_back(r);
    }

    const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
    const auto right_id = left_id + 1;
    TreeNode& nd = tree.nodes[cur.node];
    nd.dim = static_cast<std::int32_t>(split->dim);
    nd.kind = split->kind;
    nd.delta = split->delta;
    nd.left = left_id;
    nd.right = right_id;
    tree.nodes.push_back(TreeNode{});
    tree.nodes.push_back(TreeNode{});
    stack.push_back({static_cast<std::size_t>(right_id), std::move(right_rows)});
    stack.push_back({static_cast<std::size_t>(left_id), std::move(left_rows)});
  }

  for (RowId a : tree.a_indices)
    tree.leaves[locate_leaf_unchecked(tree, ds.z.row(a))].a_indices.push_back(a);
  for (TreeLeaf& leaf : tree.leaves) fit_leaf(ds, leaf, min_count, cfg.rcond);
  return tree;
}

// Hash of everything that depends only on Z and the RNG (never on Y).
inline std::uint64_t structure_hash(const FittedTree& tree) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  for (const TreeNode& nd : tree.nodes) {
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(nd.dim)));
    mix(static_cast<std::uint64_t>(nd.kind));
    mix(std::bit_cast<std::uint64_t>(nd.delta));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(nd.left)));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(nd.right)));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(nd.leaf)));
    mix(nd.b_count);
  }
  for (const TreeLeaf& leaf : tree.leaves) {
    mix(leaf.a_indices.size());
    for (RowId r : leaf.a_indices) mix(r);
    mix(leaf.b_count);
    mix(leaf.forced_terminal);
  }
  for (RowId r : tree.a_indices) mix(r);
  for (RowId r : tree.b_indices) mix(r);
  return h;
}

// Axis-aligned cell: continuous dims are (lo, hi] (closed at 0 for the root
// side), discrete dims carry the allowed category set.
struct NodeRegion {
  struct DimRange {
    double lo = 0.0;
    double hi = 1.0;
    bool lo_closed = true;
    std::vector<char> allowed;  // discrete only, indexed by category
  };
  std::vector<DimRange> dims;

  bool contains(std::span<const double> z, const std::vector<ZColumn>& columns) const {
    for (std::size_t j = 0; j < dims.size(); ++j) {
      const DimRange& d = dims[j];
      if (columns[j].discrete()) {
        const auto cat = grid_category(z[j], columns[j].categories);
        if (!cat || !d.allowed[static_cast<std::size_t>(*cat)]) return false;
      } else {
        const bool above = d.lo_closed ? z[j] >= d.lo : z[j] > d.lo;
        if (!above || z[j] > d.hi) return false;
      }
    }
    return true;
  }
};

inline NodeRegion root_region(const std::vector<ZColumn>& columns) {
  NodeRegion r;
  for (const ZColumn& c : columns) {
    NodeRegion::DimRange d;
    if (c.discrete()) d.allowed.assign(static_cast<std::size_t>(c.categories), 1);
    r.dims.push_back(std::move(d));
  }
  return r;
}

// Region of every leaf, indexed by leaf id.
inline std::vector<NodeRegion> leaf_regions(const FittedTree& tree,
                                            const std::vector<ZColumn>& columns) {
  std::vector<NodeRegion> out(tree.leaves.size());
  std::vector<std::pair<std::size_t, NodeRegion>> stack{{0, root_region(columns)}};
  while (!stack.empty()) {
    auto [node, region] = std::move(stack.back());
    stack.pop_back();
    const TreeNode& nd = tree.nodes[node];
    if (nd.is_leaf()) {
      out[static_cast<std::size_t>(nd.leaf)] = std::move(region);
      continue;
    }
    const auto dim = static_cast<std::size_t>(nd.dim);
    NodeRegion left = region, right = std::move(region);
    if (nd.kind == SplitKind::Threshold) {
      left.dims[dim].hi = std::min(left.dims[dim].hi, nd.delta);
      right.dims[dim].lo = nd.delta;
      right.dims[dim].lo_closed = false;
    } else {
      const auto cat = static_cast<std::size_t>(*grid_category(nd.delta, columns[dim].categories));
      std::fill(left.dims[dim].allowed.begin(), left.dims[dim].allowed.end(), 0);
      left.dims[dim].allowed[cat] = right.dims[dim].allowed[cat];
      right.dims[dim].allowed[cat] = 0;
    }
    stack.emplace_back(static_cast<std::size_t>(nd.right), std::move(right));
    stack.emplace_back(static_cast<std::size_t>(nd.left), std::move(left));
  }
  return out;
}

}  // namespace vcforest
