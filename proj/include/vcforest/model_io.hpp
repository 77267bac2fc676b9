#pragma once

// Versioned JSON model files. The training data travel with the model so that
// intervals and tests can be recomputed after loading; leaf fits are rebuilt
// from the stored A-row indices and checked against the stored coefficients.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "vcforest/config.hpp"
#include "vcforest/data.hpp"
#include "vcforest/errors.hpp"
#include "vcforest/forest.hpp"
#include "vcforest/tree.hpp"

namespace vcforest {

inline constexpr const char* kModelFormat = "vcforest-model";
inline constexpr int kModelVersion = 1;

inline nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json cols = nlohmann::json::array();
  for (const ZColumn& c : ds.z_columns)
    cols.push_back({{"name", c.name},
                    {"kind", c.discrete() ? "discrete" : "continuous"},
                    {"categories", c.categories},
                    {"offset", c.offset},
                    {"range", c.range}});
  return {{"y_name", ds.y_name},         {"x_names", ds.x_names},
          {"z_columns", std::move(cols)}, {"has_intercept", ds.has_intercept},
          {"z_normalized", ds.z_normalized}, {"n", ds.n()},
          {"y", ds.y},                   {"x", ds.x.data()},
          {"z", ds.z.data()}};
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  Dataset ds;
  ds.y_name = j.at("y_name").get<std::string>();
  ds.x_names = j.at("x_names").get<std::vector<std::string>>();
  for (const auto& c : j.at("z_columns")) {
    ZColumn col;
    col.name = c.at("name").get<std::string>();
    col.kind = c.at("kind").get<std::string>() == "discrete" ? ZKind::Discrete : ZKind::Continuous;
    col.categories = c.at("categories").get<int>();
    col.offset = c.at("offset").get<double>();
    col.range = c.at("range").get<double>();
    ds.z_columns.push_back(std::move(col));
  }
  ds.has_intercept = j.at("has_intercept").get<bool>();
  ds.z_normalized = j.at("z_normalized").get<bool>();
  const auto n = j.at("n").get<std::size_t>();
  ds.y = j.at("y").get<std::vector<double>>();
  ds.x = Matrix(n, ds.x_names.size());
  ds.z = Matrix(n, ds.z_columns.size());
  ds.x.data() = j.at("x").get<std::vector<double>>();
  ds.z.data() = j.at("z").get<std::vector<double>>();
  if (ds.y.size() != n || ds.x.data().size() != n * ds.x_names.size() ||
      ds.z.data().size() != n * ds.z_columns.size())
    throw ParseError("model data block has inconsistent sizes");
  return ds;
}

inline nlohmann::json tree_to_json(const FittedTree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const TreeNode& nd : t.nodes) {
    if (nd.is_leaf()) {
      const TreeLeaf& leaf = t.leaves[static_cast<std::size_t>(nd.leaf)];
      nodes.push_back({{"b_count", nd.b_count},
                       {"leaf",
                        {{"index", nd.leaf},
                         {"beta", leaf.fit.beta},
                         {"ok", leaf.fit.ok},
                         {"a_count", leaf.a_count()},
                         {"a_indices", leaf.a_indices},
                         {"b_count", leaf.b_count},
                         {"forced_terminal", leaf.forced_terminal}}}});
    } else {
      nodes.push_back({{"dim", nd.dim},
                       {"kind", nd.kind == SplitKind::Threshold ? "threshold" : "category"},
                       {"delta", nd.delta},
                       {"left", nd.left},
                       {"right", nd.right},
                       {"b_count", nd.b_count}});
    }
  }
  return {{"seed", t.seed}, {"b_indices", t.b_indices}, {"nodes", std::move(nodes)}};
}

inline FittedTree tree_from_json(const nlohmann::json& j, const Dataset& ds, std::size_t min_count,
                                 double rcond) {
  FittedTree t;
  t.seed = j.at("seed").get<std::uint64_t>();
  t.b_indices = j.at("b_indices").get<std::vector<RowId>>();
  const auto& nodes = j.at("nodes");
  std::size_t leaf_count = 0;
  for (const auto& jn : nodes) leaf_count += jn.contains("leaf") ? 1 : 0;
  t.leaves.resize(leaf_count);
  std::vector<bool> seen(leaf_count, false);
  for (const auto& jn : nodes) {
    TreeNode nd;
    nd.b_count = jn.at("b_count").get<std::uint32_t>();
    if (jn.contains("leaf")) {
      const auto& jl = jn.at("leaf");
      TreeLeaf leaf;
      leaf.a_indices = jl.at("a_indices").get<std::vector<RowId>>();
      leaf.b_count = jl.at("b_count").get<std::uint32_t>();
      leaf.forced_terminal = jl.at("forced_terminal").get<bool>();
      for (RowId r : leaf.a_indices)
        if (r >= ds.n()) throw ParseError("leaf row index out of range");
      fit_leaf(ds, leaf, min_count, rcond);
      const auto beta = jl.at("beta").get<std::vector<double>>();
      if (leaf.fit.ok != jl.at("ok").get<bool>() || beta.size() != leaf.fit.beta.size() ||
          leaf.a_count() != jl.at("a_count").get<std::size_t>())
        throw ParseError("stored leaf does not match its refit");
      for (std::size_t c = 0; c < beta.size(); ++c)
        if (std::abs(beta[c] - leaf.fit.beta[c]) > 1e-9 * (1.0 + std::abs(beta[c])))
          throw ParseError("stored leaf coefficients do not match their refit");
      const auto index = jl.at("index").get<std::size_t>();
      if (index >= leaf_count || seen[index]) throw ParseError("leaf index out of range");
      seen[index] = true;
      nd.leaf = static_cast<std::int32_t>(index);
      t.a_indices.insert(t.a_indices.end(), leaf.a_indices.begin(), leaf.a_indices.end());
      t.leaves[index] = std::move(leaf);
    } else {
      nd.dim = jn.at("dim").get<std::int32_t>();
      nd.kind = jn.at("kind").get<std::string>() == "category" ? SplitKind::Category
                                                                : SplitKind::Threshold;
      nd.delta = jn.at("delta").get<double>();
      nd.left = jn.at("left").get<std::int32_t>();
      nd.right = jn.at("right").get<std::int32_t>();
      const auto count = static_cast<std::int32_t>(nodes.size());
      if (nd.dim < 0 || static_cast<std::size_t>(nd.dim) >= ds.dz() || nd.left <= 0 ||
          nd.right <= 0 || nd.left >= count || nd.right >= count)
        throw ParseError("tree node references are out of range");
    }
    t.nodes.push_back(nd);
  }
  std::sort(t.a_indices.begin(), t.a_indices.end());
  return t;
}

inline nlohmann::json forest_to_json(const Forest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const FittedTree& t : f.trees) trees.push_back(tree_to_json(t));
  return {{"format", kModelFormat},
          {"version", kModelVersion},
          {"config", config_to_json(f.cfg)},
          {"schema", schema_to_json(f.data.schema())},
          {"fingerprint", f.data_fingerprint},
          {"data", dataset_to_json(f.data)},
          {"trees", std::move(trees)}};
}

inline Forest forest_from_json(const nlohmann::json& j, std::size_t threads = 1) {
  try {
    if (j.value("format", std::string{}) != kModelFormat)
      throw ParseError("not a vcforest model file");
    if (j.at("version").get<int>() != kModelVersion)
      throw ParseError("unsupported model version " + j.at("version").dump());
    Forest f;
    f.cfg = config_from_json(j.at("config"));
    f.data = dataset_from_json(j.at("data"));
    f.data_fingerprint = j.at("fingerprint").get<std::string>();
    if (fingerprint(f.data) != f.data_fingerprint)
      throw FingerprintError("embedded training data do not match the stored fingerprint");
    const std::size_t min_count = f.cfg.resolved_min_count(f.data.dx());
    const auto& trees = j.at("trees");
    f.trees.resize(trees.size());
    parallel_for(trees.size(), threads, [&](std::size_t b) {
      f.trees[b] = tree_from_json(trees[b], f.data, min_count, f.cfg.rcond);
    });
    index_rows(f, threads);
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed model file: ") + e.what());
  }
}

inline void save_model(const Forest& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << forest_to_json(f).dump() << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Forest load_model(const std::string& path, std::size_t threads = 1) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("model file is not valid JSON: ") + e.what());
  }
  return forest_from_json(j, threads);
}

}  // namespace vcforest
