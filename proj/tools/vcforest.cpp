// Batch front end: fit, predict, test, simulate.
//
// Results go to stdout as JSON (CSV for tables); every failure prints one JSON
// line {"error": ..., "code": ...} on stderr and exits with 2 (usage/config),
// 3 (no prediction succeeded), 4 (fingerprint mismatch) or 5 (numerical).

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "vcforest/vcforest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vcforest;

namespace {

struct Options {
  std::string data, schema, config, model, points, spec;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  double level = 0.95;
  std::string preset;
  std::string test = "lm";
  std::size_t pair_budget = 20000;
};

std::size_t thread_count(const Options& o) {
  if (o.threads) return *o.threads;
  if (const char* env = std::getenv("VCF_THREADS")) {
    try {
      return static_cast<std::size_t>(std::stoul(env));
    } catch (const std::exception&) {
      throw ConfigError(std::string("VCF_THREADS is not a count: ") + env);
    }
  }
  return 0;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("'" + path + "' is not valid JSON: " + e.what());
  }
}

ForestConfig preset_config(const std::string& preset) {
  if (preset.empty() || preset == "desk") return ForestConfig::desk_preset();
  if (preset == "paper") return ForestConfig::paper_preset();
  throw ConfigError("unknown preset '" + preset + "'");
}

int cmd_fit(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const Schema schema = load_schema(o.schema);
  ForestConfig cfg = preset_config(o.preset);
  if (!o.config.empty()) cfg = config_from_json(read_json_file(o.config), cfg);
  if (o.seed) cfg.master_seed = *o.seed;
  cfg.validate();
  Dataset ds = prepare_dataset(o.data, schema);
  const Forest f = fit_forest(std::move(ds), cfg, thread_count(o));
  save_model(f, o.out);

  std::size_t forced = 0, leaves = 0;
  for (const auto& t : f.trees)
    for (const auto& l : t.leaves) {
      ++leaves;
      forced += l.forced_terminal ? 1 : 0;
    }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json summary = {{"command", "fit"},
                  {"trees", f.num_trees()},
                  {"n", f.n()},
                  {"d_x", f.dx()},
                  {"d_z", f.dz()},
                  {"leaves", leaves},
                  {"invalid_leaf_fraction", invalid_leaf_fraction(f)},
                  {"forced_terminal_leaves", forced},
                  {"fingerprint", f.data_fingerprint},
                  {"config", config_to_json(f.cfg)},
                  {"seconds", secs},
                  {"out", o.out}};
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_predict(const Options& o) {
  if (!(o.level > 0.0 && o.level < 1.0)) throw ConfigError("--level must lie in (0, 1)");
  const Forest f = load_model(o.model, thread_count(o));
  const detail::CsvTable table = detail::read_csv(o.points);
  std::vector<std::size_t> cols;
  for (const ZColumn& c : f.data.z_columns) cols.push_back(detail::column_index(table, c.name));

  std::ostringstream csv;
  for (const ZColumn& c : f.data.z_columns) csv << c.name << ',';
  for (const auto& name : f.data.x_names) csv << "beta_" << name << ',';
  for (const auto& name : f.data.x_names) csv << "se_" << name << ',';
  for (const auto& name : f.data.x_names) csv << "lo_" << name << ',';
  for (const auto& name : f.data.x_names) csv << "hi_" << name << ',';
  csv << "valid_trees,error\n";

  std::size_t failed = 0;
  const std::size_t d = f.dx();
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    std::vector<double> raw(cols.size());
    std::string error;
    std::optional<CoefficientIntervals> ci;
    try {
      std::vector<double> unit(cols.size());
      for (std::size_t j = 0; j < cols.size(); ++j) {
        raw[j] = detail::numeric_cell(table, r, cols[j]);
        unit[j] = f.data.z_columns[j].to_unit(raw[j]);
      }
      ci = confidence_interval(f, make_test_point(f.data.z_columns, unit), o.level);
    } catch (const Error& e) {
      error = e.code() + ": " + e.what();
      std::cerr << json{{"warning", error}, {"row", r + 1}}.dump() << '\n';
      ++failed;
    }
    for (std::size_t j = 0; j < cols.size(); ++j) csv << table.rows[r][cols[j]] << ',';
    if (ci) {
      const auto& b = ci->cov.estimate.beta;
      for (std::size_t j = 0; j < d; ++j) csv << detail::format_double(b[j]) << ',';
      for (std::size_t j = 0; j < d; ++j) csv << detail::format_double(ci->se[j]) << ',';
      for (std::size_t j = 0; j < d; ++j) csv << detail::format_double(ci->intervals[j].lo) << ',';
      for (std::size_t j = 0; j < d; ++j) csv << detail::format_double(ci->intervals[j].hi) << ',';
      csv << ci->cov.estimate.valid_trees << ",\n";
    } else {
      for (std::size_t j = 0; j < 4 * d; ++j) csv << ',';
      std::string quoted = error;
      for (char& ch : quoted)
        if (ch == '"') ch = '\'';
      csv << "0,\"" << quoted << "\"\n";
    }
  }

  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(o.out);
    if (!out) throw IoError("cannot write '" + o.out + "'");
    out << csv.str();
    std::cout << json{{"command", "predict"},
                      {"rows", table.rows.size()},
                      {"failed", failed},
                      {"level", o.level},
                      {"out", o.out}}
                     .dump()
              << '\n';
  }
  if (!table.rows.empty() && failed == table.rows.size()) {
    std::cerr << json{{"error", "every prediction row failed"}, {"code", "PredictionError"}}.dump()
              << '\n';
    return 3;
  }
  return 0;
}

int cmd_test(const Options& o) {
  if (o.test != "lm" && o.test != "glrt") throw ConfigError("--test must be lm or glrt");
  const Forest f = load_model(o.model, thread_count(o));
  Schema schema = f.data.schema();
  const Dataset ds = prepare_dataset(o.data, schema);
  json result;
  if (o.test == "lm") {
    result = to_json(lm_test(ds, f));
  } else {
    GlrtOptions opt;
    opt.pair_budget = o.pair_budget;
    opt.seed = o.seed.value_or(0);
    result = to_json(glrt_test(ds, f, opt));
  }
  result["fingerprint"] = f.data_fingerprint;
  result["config"] = config_to_json(f.cfg);
  std::cout << result.dump() << '\n';
  return 0;
}

std::vector<DgpSpec> parse_sim_spec(const json& j, std::optional<std::uint64_t> seed) {
  if (!j.is_object()) throw ConfigError("simulation spec must be a JSON object");
  DgpSpec base;
  try {
    base.model = model_from_string(j.at("model").get<std::string>());
    if (j.contains("noise_sd")) base.noise_sd = j["noise_sd"].get<double>();
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("beta0")) base.beta0 = j["beta0"].get<std::vector<double>>();
    if (j.contains("dz")) base.homogeneous_dz = j["dz"].get<std::size_t>();
    if (seed) base.seed = *seed;
    std::vector<std::size_t> ns;
    if (!j.contains("n"))
      ns = {250, 500, 1000};
    else if (j["n"].is_array())
      ns = j["n"].get<std::vector<std::size_t>>();
    else
      ns = {j["n"].get<std::size_t>()};
    std::vector<DgpSpec> out;
    for (std::size_t n : ns) {
      DgpSpec s = base;
      s.n = n;
      s.validate();
      out.push_back(s);
    }
    return out;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad simulation spec: ") + e.what());
  }
}

int cmd_simulate(const Options& o) {
  const json j = read_json_file(o.spec);
  const std::vector<DgpSpec> specs = parse_sim_spec(j, o.seed);
  const std::string preset = o.preset.empty() ? "desk" : o.preset;
  ForestConfig cfg = preset_config(preset);
  if (j.contains("config")) cfg = config_from_json(j["config"], cfg);
  cfg.validate();
  std::size_t reps = preset == "paper" ? 500 : 100;
  if (j.contains("reps")) {
    if (!j["reps"].is_number_unsigned()) throw ConfigError("reps must be a positive integer");
    reps = j["reps"].get<std::size_t>();
  }
  if (reps < 1) throw ConfigError("reps must be >= 1");

  const fs::path dir = o.out;
  fs::create_directories(dir);
  for (const char* name : {"goodness_of_fit.csv", "bias_mse_intercept.csv", "bias_mse_slope.csv",
                           "coverage_intercept.csv", "coverage_slope.csv", "lm_size.csv",
                           "manifest.json"})
    fs::remove(dir / name);

  McOptions mo;
  mo.threads = thread_count(o);
  json runs = json::array();
  for (const DgpSpec& s : specs) {
    std::cerr << "simulate " << to_string(s.model) << " n=" << s.n << " reps=" << reps << '\n';
    const McReport report = run_monte_carlo(s, cfg, reps, mo);
    write_report_tables(report, dir);
    runs.push_back(report_manifest_entry(report));
  }
  const json manifest = {{"preset", preset}, {"config", config_to_json(cfg)}, {"reps", reps},
                         {"runs", runs}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::cout << json{{"command", "simulate"}, {"runs", specs.size()}, {"reps", reps},
                    {"out", dir.string()}}
                   .dump()
            << '\n';
  return 0;
}

void emit_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", message}, {"code", code}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Honest local-linear random forests for varying-coefficient models"};
  app.require_subcommand(1);
  Options o;

  const auto add_threads = [&](CLI::App* c) {
    c->add_option("--threads", o.threads, "Worker threads (default: VCF_THREADS or all cores)");
  };

  auto* fit = app.add_subcommand("fit", "Fit a forest and write a model file");
  fit->add_option("data", o.data, "Training CSV")->required()->check(CLI::ExistingFile);
  fit->add_option("schema", o.schema, "Schema JSON")->required()->check(CLI::ExistingFile);
  fit->add_option("config", o.config, "Forest config JSON")->check(CLI::ExistingFile);
  fit->add_option("--out", o.out, "Model file to write")->required();
  fit->add_option("--seed", o.seed, "Master seed");
  fit->add_option("--preset", o.preset, "Config preset: desk or paper");
  add_threads(fit);

  auto* predict = app.add_subcommand("predict", "Coefficients and intervals at test points");
  predict->add_option("model", o.model, "Model file")->required()->check(CLI::ExistingFile);
  predict->add_option("points", o.points, "Test point CSV")->required()->check(CLI::ExistingFile);
  predict->add_option("--level", o.level, "Interval coverage level");
  predict->add_option("--out", o.out, "Output CSV (default: stdout)");
  add_threads(predict);

  auto* test = app.add_subcommand("test", "Homogeneity test of the coefficients");
  test->add_option("model", o.model, "Model file")->required()->check(CLI::ExistingFile);
  test->add_option("data", o.data, "Training CSV")->required()->check(CLI::ExistingFile);
  test->add_option("--test", o.test, "lm or glrt");
  test->add_option("--pair-budget", o.pair_budget, "Pairs sampled for GLRT moments");
  test->add_option("--seed", o.seed, "Pair sampling seed");
  add_threads(test);

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study on a simulated design");
  sim->add_option("spec", o.spec, "Simulation spec JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--preset", o.preset, "desk or paper");
  sim->add_option("--out", o.out, "Output directory")->required();
  sim->add_option("--seed", o.seed, "Overrides the spec seed");
  add_threads(sim);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("UsageError", e.what());
    return 2;
  }

  try {
    if (fit->parsed()) return cmd_fit(o);
    if (predict->parsed()) return cmd_predict(o);
    if (test->parsed()) return cmd_test(o);
    if (sim->parsed()) return cmd_simulate(o);
  } catch (const Error& e) {
    emit_error(e.code(), e.what());
    return exit_status(e.code());
  } catch (const std::exception& e) {
    emit_error("InternalError", e.what());
    return 2;
  }
  return 2;
}
