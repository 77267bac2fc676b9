#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"

#include "vcforest/errors.hpp"
#include "vcforest/linalg.hpp"

namespace vcforest {

// Which matrix stands in for Ω̂(z) in the sandwich Σ̂ = Ω̂⁻¹ Λ̂ Ω̂⁻¹.
enum class BreadMatrix {
  ForestAverage,  // Ω̄(z): average of leaf Ω̂(z, ω_b) over trees with a non-empty leaf
  SingleTree,     // Ω̂(z, ω_b) of the first tree whose leaf at z is invertible
  FullSample,     // n⁻¹ Σ X Xᵀ
};

// Normalization of the variance kernel Λ̂(z) = c · Σᵢ ε̂ᵢ² θ̂ᵢ² XᵢXᵢᵀ.
enum class LambdaScaling {
  // c = |A|² / n²: influence of row i on β̄(z) is (|A|/n)·θ(z, Zᵢ) because only
  // the half-sample A enters the leaf estimates.
  HalfSample,
  // c = s² / n, the literal normalization.
  AsPrinted,
};

struct ForestConfig {
  std::size_t num_trees = 500;
  double s_fraction = 0.8;
  // Explicit leaf-size floor k; when absent k = ceil(s^leaf_exponent).
  std::optional<std::size_t> leaf_size;
  double leaf_exponent = 1.0 / 6.0;
  double alpha = 0.005;
  double pi = 1.0;
  double rcond = kDefaultRcond;
  // Minimum A-rows for a leaf OLS; default d_X + 2.
  std::optional<std::size_t> min_count;
  std::uint64_t master_seed = 42;
  BreadMatrix bread = BreadMatrix::ForestAverage;
  LambdaScaling lambda_scaling = LambdaScaling::HalfSample;

  std::size_t subsample_size(std::size_t n) const {
    return static_cast<std::size_t>(std::ceil(s_fraction * static_cast<double>(n) - 1e-9));
  }

  std::size_t resolved_leaf_size(std::size_t s) const {
    if (leaf_size) return *leaf_size;
    return static_cast<std::size_t>(
        std::ceil(std::pow(static_cast<double>(s), leaf_exponent) - 1e-9));
  }

  std::size_t resolved_min_count(std::size_t dx) const { return min_count.value_or(dx + 2); }

  void validate() const {
    if (num_trees < 1) throw ConfigError("num_trees must be >= 1");
    if (!(s_fraction > 0.0 && s_fraction <= 1.0))
      throw ConfigError("s_fraction must lie in (0, 1]");
    if (!(alpha > 0.0 && alpha < 0.5)) throw ConfigError("alpha must lie in (0, 0.5)");
    if (!(pi > 0.0 && pi <= 1.0)) throw ConfigError("pi must lie in (0, 1]");
    if (leaf_size && *leaf_size < 1) throw ConfigError("leaf_size k must be >= 1");
    if (!leaf_size && !(leaf_exponent >= 0.0 && leaf_exponent < 1.0))
      throw ConfigError("leaf_exponent must lie in [0, 1)");
    if (!(rcond > 0.0 && rcond < 1.0)) throw ConfigError("rcond must lie in (0, 1)");
  }

  void validate(std::size_t n) const {
    validate();
    const std::size_t s = subsample_size(n);
    if (s > n) throw ConfigError("subsample size exceeds n");
    if (s < 2) throw ConfigError("subsample size must be >= 2");
    const std::size_t k = resolved_leaf_size(s);
    if (k < 1) throw ConfigError("leaf size k must be >= 1");
    if (k > s) throw ConfigError("leaf size k exceeds the subsample size");
  }

  // Named presets: the published grid and a desk-scale reduction.
  static ForestConfig paper_preset() {
    ForestConfig c;
    c.num_trees = 3000;
    return c;
  }
  static ForestConfig desk_preset() { return ForestConfig{}; }
};

inline const char* to_string(BreadMatrix b) {
  switch (b) {
    case BreadMatrix::ForestAverage: return "forest_average";
    case BreadMatrix::SingleTree: return "single_tree";
    case BreadMatrix::FullSample: return "full_sample";
  }
  return "forest_average";
}

inline const char* to_string(LambdaScaling s) {
  return s == LambdaScaling::AsPrinted ? "as_printed" : "half_sample";
}

inline nlohmann::json config_to_json(const ForestConfig& c) {
  nlohmann::json j = {{"num_trees", c.num_trees},
                      {"s_fraction", c.s_fraction},
                      {"leaf_exponent", c.leaf_exponent},
                      {"alpha", c.alpha},
                      {"pi", c.pi},
                      {"rcond", c.rcond},
                      {"master_seed", c.master_seed},
                      {"bread", to_string(c.bread)},
                      {"lambda_scaling", to_string(c.lambda_scaling)}};
  j["leaf_size"] = c.leaf_size ? nlohmann::json(*c.leaf_size) : nlohmann::json(nullptr);
  j["min_count"] = c.min_count ? nlohmann::json(*c.min_count) : nlohmann::json(nullptr);
  return j;
}

// Overlays the fields present in j onto base.
inline ForestConfig config_from_json(const nlohmann::json& j, ForestConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    if (j.contains("num_trees")) base.num_trees = j["num_trees"].get<std::size_t>();
    if (j.contains("B")) base.num_trees = j["B"].get<std::size_t>();
    if (j.contains("s_fraction")) base.s_fraction = j["s_fraction"].get<double>();
    if (j.contains("leaf_exponent")) base.leaf_exponent = j["leaf_exponent"].get<double>();
    if (j.contains("leaf_size")) {
      if (j["leaf_size"].is_null())
        base.leaf_size.reset();
      else
        base.leaf_size = j["leaf_size"].get<std::size_t>();
    }
    if (j.contains("k")) base.leaf_size = j["k"].get<std::size_t>();
    if (j.contains("alpha")) base.alpha = j["alpha"].get<double>();
    if (j.contains("pi")) base.pi = j["pi"].get<double>();
    if (j.contains("rcond")) base.rcond = j["rcond"].get<double>();
    if (j.contains("min_count")) {
      if (j["min_count"].is_null())
        base.min_count.reset();
      else
        base.min_count = j["min_count"].get<std::size_t>();
    }
    if (j.contains("master_seed")) base.master_seed = j["master_seed"].get<std::uint64_t>();
    if (j.contains("seed")) base.master_seed = j["seed"].get<std::uint64_t>();
    if (j.contains("bread")) {
      const auto b = j["bread"].get<std::string>();
      if (b == "forest_average") base.bread = BreadMatrix::ForestAverage;
      else if (b == "single_tree") base.bread = BreadMatrix::SingleTree;
      else if (b == "full_sample") base.bread = BreadMatrix::FullSample;
      else throw ConfigError("unknown bread '" + b + "'");
    }
    if (j.contains("lambda_scaling")) {
      const auto s = j["lambda_scaling"].get<std::string>();
      if (s == "half_sample") base.lambda_scaling = LambdaScaling::HalfSample;
      else if (s == "as_printed") base.lambda_scaling = LambdaScaling::AsPrinted;
      else throw ConfigError("unknown lambda_scaling '" + s + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return base;
}

}  // namespace vcforest
