#pragma once

// Observation storage: (y, X, Z) with per-column Z metadata, CSV/JSON-schema
// ingestion, min-max normalization of continuous Z and intercept augmentation.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "vcforest/errors.hpp"
#include "vcforest/linalg.hpp"

namespace vcforest {

enum class ZKind { Continuous, Discrete };

struct ZColumn {
  std::string name;
  ZKind kind = ZKind::Continuous;
  // Number of categories m >= 2 for discrete columns; grid is {0, 1/(m-1), ..., 1}.
  int categories = 0;
  // normalized = (raw - offset) / range; identity until normalize_z runs.
  double offset = 0.0;
  double range = 1.0;

  bool discrete() const noexcept { return kind == ZKind::Discrete; }
  double to_unit(double raw) const { return discrete() ? raw : (raw - offset) / range; }
  double from_unit(double unit) const { return discrete() ? unit : unit * range + offset; }

  friend bool operator==(const ZColumn&, const ZColumn&) = default;
};

// Column roles of a CSV file.
struct Schema {
  std::string y;
  std::vector<std::string> x;
  std::vector<ZColumn> z;
  bool intercept = true;
};

inline Schema parse_schema(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("schema must be a JSON object");
  Schema s;
  if (!j.contains("y") || !j["y"].is_string()) throw SchemaError("schema is missing \"y\"");
  s.y = j["y"].get<std::string>();
  if (j.contains("x")) {
    if (!j["x"].is_array()) throw SchemaError("schema \"x\" must be an array of names");
    for (const auto& v : j["x"]) {
      if (!v.is_string()) throw SchemaError("schema \"x\" entries must be strings");
      s.x.push_back(v.get<std::string>());
    }
  }
  if (!j.contains("z") || !j["z"].is_array() || j["z"].empty())
    throw SchemaError("schema needs a non-empty \"z\" array");
  for (const auto& v : j["z"]) {
    ZColumn c;
    if (!v.is_object() || !v.contains("name") || !v["name"].is_string())
      throw SchemaError("each \"z\" entry needs a \"name\"");
    c.name = v["name"].get<std::string>();
    const std::string kind = v.value("kind", std::string("continuous"));
    if (kind == "continuous") {
      c.kind = ZKind::Continuous;
    } else if (kind == "discrete") {
      c.kind = ZKind::Discrete;
      if (!v.contains("m") || !v["m"].is_number_integer() || v["m"].get<int>() < 2)
        throw SchemaError("discrete column '" + c.name + "' needs integer \"m\" >= 2");
      c.categories = v["m"].get<int>();
    } else {
      throw SchemaError("unknown z kind '" + kind + "' for column '" + c.name + "'");
    }
    s.z.push_back(std::move(c));
  }
  if (j.contains("intercept")) {
    if (!j["intercept"].is_boolean()) throw SchemaError("\"intercept\" must be a boolean");
    s.intercept = j["intercept"].get<bool>();
  }
  if (s.x.empty() && !s.intercept)
    throw SchemaError("schema needs at least one x column or an intercept");
  return s;
}

inline nlohmann::json schema_to_json(const Schema& s) {
  nlohmann::json z = nlohmann::json::array();
  for (const auto& c : s.z) {
    nlohmann::json e = {{"name", c.name}, {"kind", c.discrete() ? "discrete" : "continuous"}};
    if (c.discrete()) e["m"] = c.categories;
    z.push_back(e);
  }
  return {{"y", s.y}, {"x", s.x}, {"z", z}, {"intercept", s.intercept}};
}

// Snaps v to the category grid of an m-category column. Returns the category
// index, or nullopt when v is not on the grid at 12 decimal digits.
inline std::optional<int> grid_category(double v, int m) {
  const double scaled = v * (m - 1);
  const double idx = std::round(scaled);
  if (idx < 0 || idx > m - 1) return std::nullopt;
  const double grid = idx / (m - 1);
  if (std::round(v * 1e12) != std::round(grid * 1e12)) return std::nullopt;
  return static_cast<int>(idx);
}

inline double grid_value(int category, int m) {
  return static_cast<double>(category) / (m - 1);
}

// Aligned (y, X, Z) table. Immutable once handed to the forest.
struct Dataset {
  std::string y_name = "y";
  std::vector<std::string> x_names;
  std::vector<ZColumn> z_columns;
  std::vector<double> y;
  Matrix x;  // n × d_X
  Matrix z;  // n × d_Z
  bool has_intercept = false;
  bool z_normalized = false;

  std::size_t n() const noexcept { return y.size(); }
  std::size_t dx() const noexcept { return x.cols(); }
  std::size_t dz() const noexcept { return z.cols(); }

  Schema schema() const {
    Schema s;
    s.y = y_name;
    s.x = x_names;
    if (has_intercept && !s.x.empty()) s.x.erase(s.x.begin());
    s.z = z_columns;
    for (auto& c : s.z) {
      c.offset = 0.0;
      c.range = 1.0;
    }
    s.intercept = has_intercept;
    return s;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::optional<double> parse_double(std::string_view cell) {
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0)
      line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    for (auto& c : cells) c = trim(std::move(c));
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw ParseError("line " + std::to_string(line_no) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(line_no);
  }
  if (t.header.empty()) throw ParseError("'" + path + "' has no header row");
  return t;
}

inline std::size_t column_index(const CsvTable& t, const std::string& name) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) throw SchemaError("missing column '" + name + "'");
  return static_cast<std::size_t>(it - t.header.begin());
}

inline double numeric_cell(const CsvTable& t, std::size_t r, std::size_t c) {
  const auto v = parse_double(t.rows[r][c]);
  if (!v || !std::isfinite(*v))
    throw ParseError("line " + std::to_string(t.line_numbers[r]) + ", column '" + t.header[c] +
                     "': '" + t.rows[r][c] + "' is not a finite number");
  return *v;
}

}  // namespace detail

// Reads a header-row CSV into a Dataset with columns in schema order. Discrete
// Z values must already lie on their category grid. Continuous Z are kept in
// raw units; call normalize_z before fitting.
inline Dataset load_csv(const std::string& path, const Schema& schema) {
  const detail::CsvTable t = detail::read_csv(path);
  Dataset ds;
  ds.y_name = schema.y;
  ds.x_names = schema.x;
  ds.z_columns = schema.z;
  const std::size_t yc = detail::column_index(t, schema.y);
  std::vector<std::size_t> xc, zc;
  for (const auto& name : schema.x) xc.push_back(detail::column_index(t, name));
  for (const auto& col : schema.z) zc.push_back(detail::column_index(t, col.name));

  const std::size_t n = t.rows.size();
  ds.y.resize(n);
  ds.x = Matrix(n, xc.size());
  ds.z = Matrix(n, zc.size());
  for (std::size_t r = 0; r < n; ++r) {
    ds.y[r] = detail::numeric_cell(t, r, yc);
    for (std::size_t j = 0; j < xc.size(); ++j) ds.x(r, j) = detail::numeric_cell(t, r, xc[j]);
    for (std::size_t j = 0; j < zc.size(); ++j) {
      double v = detail::numeric_cell(t, r, zc[j]);
      const ZColumn& col = schema.z[j];
      if (col.discrete()) {
        const auto cat = grid_category(v, col.categories);
        if (!cat)
          throw DomainError("line " + std::to_string(t.line_numbers[r]) + ", column '" +
                            col.name + "': " + t.rows[r][zc[j]] + " is not on the " +
                            std::to_string(col.categories) + "-category grid");
        v = grid_value(*cat, col.categories);
      }
      ds.z(r, j) = v;
    }
  }
  if (n < 2) throw SchemaError("'" + path + "' needs at least 2 data rows");
  return ds;
}

// Writes raw columns (y, x without the intercept, z in original units) in
// shortest round-trip decimal form.
inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  const std::size_t x0 = ds.has_intercept ? 1 : 0;
  std::vector<std::string> header{ds.y_name};
  for (std::size_t j = x0; j < ds.dx(); ++j) header.push_back(ds.x_names[j]);
  for (const auto& c : ds.z_columns) header.push_back(c.name);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (std::size_t r = 0; r < ds.n(); ++r) {
    out << detail::format_double(ds.y[r]);
    for (std::size_t j = x0; j < ds.dx(); ++j) out << ',' << detail::format_double(ds.x(r, j));
    for (std::size_t j = 0; j < ds.dz(); ++j)
      out << ',' << detail::format_double(ds.z_columns[j].from_unit(ds.z(r, j)));
    out << '\n';
  }
}

// Maps every continuous Z column affinely onto [0,1] (min -> 0, max -> 1) and
// composes the map into the column's stored parameters.
inline Dataset normalize_z(Dataset ds) {
  for (std::size_t j = 0; j < ds.dz(); ++j) {
    ZColumn& col = ds.z_columns[j];
    if (col.discrete()) continue;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t r = 0; r < ds.n(); ++r) {
      lo = std::min(lo, ds.z(r, j));
      hi = std::max(hi, ds.z(r, j));
    }
    if (!std::isfinite(lo) || !std::isfinite(hi))
      throw DomainError("column '" + col.name + "' has non-finite range");
    if (!(hi > lo)) throw DegenerateColumnError("column '" + col.name + "' is constant");
    const double range = hi - lo;
    for (std::size_t r = 0; r < ds.n(); ++r) {
      double u = (ds.z(r, j) - lo) / range;
      ds.z(r, j) = std::clamp(u, 0.0, 1.0);
    }
    col.offset += lo * col.range;
    col.range *= range;
  }
  ds.z_normalized = true;
  return ds;
}

// Prepends an all-ones column named "intercept".
inline Dataset augment_intercept(Dataset ds) {
  if (ds.has_intercept) throw AlreadyAugmentedError("dataset already has an intercept column");
  for (std::size_t j = 0; j < ds.dx(); ++j) {
    bool ones = ds.n() > 0;
    for (std::size_t r = 0; r < ds.n() && ones; ++r) ones = ds.x(r, j) == 1.0;
    if (ones)
      throw AlreadyAugmentedError("column '" + ds.x_names[j] + "' is already all ones");
  }
  Matrix x(ds.n(), ds.dx() + 1);
  for (std::size_t r = 0; r < ds.n(); ++r) {
    x(r, 0) = 1.0;
    for (std::size_t j = 0; j < ds.dx(); ++j) x(r, j + 1) = ds.x(r, j);
  }
  ds.x = std::move(x);
  ds.x_names.insert(ds.x_names.begin(), "intercept");
  ds.has_intercept = true;
  return ds;
}

// Checks the invariants a forest relies on.
inline void validate_dataset(const Dataset& ds) {
  if (ds.n() < 2) throw DomainError("dataset needs n >= 2");
  if (ds.dx() < 1) throw DomainError("dataset needs d_X >= 1");
  if (ds.dz() < 1) throw DomainError("dataset needs d_Z >= 1");
  if (ds.x.rows() != ds.n() || ds.z.rows() != ds.n() || ds.z_columns.size() != ds.dz())
    throw DimError("dataset columns are misaligned");
  for (std::size_t r = 0; r < ds.n(); ++r) {
    if (!std::isfinite(ds.y[r])) throw DomainError("non-finite y at row " + std::to_string(r));
    for (double v : ds.x.row(r))
      if (!std::isfinite(v)) throw DomainError("non-finite x at row " + std::to_string(r));
    for (std::size_t j = 0; j < ds.dz(); ++j) {
      const double v = ds.z(r, j);
      if (!(v >= 0.0 && v <= 1.0))
        throw DomainError("z column '" + ds.z_columns[j].name + "' row " + std::to_string(r) +
                          " is outside [0,1]; normalize first");
      if (ds.z_columns[j].discrete() && !grid_category(v, ds.z_columns[j].categories))
        throw DomainError("z column '" + ds.z_columns[j].name + "' row " +
                          std::to_string(r) + " is off its category grid");
    }
  }
}

// Stable 64-bit FNV-1a over the numeric content, rendered as 16 hex digits.
inline std::string fingerprint(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix_bytes = [&h](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t dims[3] = {ds.n(), ds.dx(), ds.dz()};
  mix_bytes(dims, sizeof(dims));
  mix_bytes(ds.y.data(), ds.y.size() * sizeof(double));
  mix_bytes(ds.x.data().data(), ds.x.data().size() * sizeof(double));
  mix_bytes(ds.z.data().data(), ds.z.data().size() * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// A query location in normalized Z units.
struct TestPoint {
  std::vector<double> z;
  std::optional<std::vector<double>> x;
};

// Validates a normalized point against the dataset's Z columns; discrete
// coordinates are snapped to their exact grid value.
inline TestPoint make_test_point(const std::vector<ZColumn>& columns, std::vector<double> z) {
  if (z.size() != columns.size())
    throw DimError("test point has " + std::to_string(z.size()) + " coordinates, expected " +
                   std::to_string(columns.size()));
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (!(z[j] >= 0.0 && z[j] <= 1.0))
      throw DomainError("test point coordinate '" + columns[j].name + "' = " +
                        detail::format_double(z[j]) + " is outside [0,1]");
    if (columns[j].discrete()) {
      const auto cat = grid_category(z[j], columns[j].categories);
      if (!cat)
        throw DomainError("test point coordinate '" + columns[j].name +
                          "' is off its category grid");
      z[j] = grid_value(*cat, columns[j].categories);
    }
  }
  return TestPoint{std::move(z), std::nullopt};
}

// Loads a schema JSON file.
inline Schema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("schema is not valid JSON: ") + e.what());
  }
  return parse_schema(j);
}

// load_csv + normalize_z + optional intercept, the usual ingestion path.
inline Dataset prepare_dataset(const std::string& csv_path, const Schema& schema) {
  Dataset ds = normalize_z(load_csv(csv_path, schema));
  if (schema.intercept) ds = augment_intercept(std::move(ds));
  validate_dataset(ds);
  return ds;
}

}  // namespace vcforest
