#pragma once

// Run configuration: one JSON file with nested sections. Unknown keys are
// rejected so a misspelt model section fails before any computation.
//
//   {
//     "data":     {"path": "panel.csv", "grid": {"horizon": 24, "lag": 12, "origin": 6},
//                  "columns": {"id": "id", "month": "month", ...},
//                  "covariates": [{"name": "injdrug"}, {"name": "site", "kind": "categorical"}]},
//     "model":    {"blip": [...], "treatment": [...], "censoring": [...],
//                  "outcome": [...], "delta": [...], "gamma": "lead"},
//     "tests":    [{"kind": "optimal-alt", "alternative": [...], "label": "..."}],
//     "simulate": {"scenario": "a", "n": [1000], "reps": 100, "methods": [...], "threads": 0},
//     "numeric":  {"ipcw_cap": 50, ...},
//     "alpha": 0.05, "seed": 1,
//     "output":   {"json": "report.json", "csv": "table.csv"}
//   }

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "snmm/error.hpp"
#include "snmm/estimator.hpp"
#include "snmm/gof.hpp"
#include "snmm/linmodels.hpp"
#include "snmm/panel.hpp"
#include "snmm/sim.hpp"

namespace snmm {

using json = nlohmann::json;

struct DataConfig {
  std::string path;
  CsvSchema schema;
};

struct SimulateConfig {
  std::string scenario = "a";
  std::optional<Scenario> custom;  // "scenario" given as an object
  std::vector<int> n{1000};
  int reps = 100;
  std::vector<Method> methods = all_methods();
  int threads = 0;
  bool sandwich = true;
  std::string export_csv;  // first replicate of the first n, when set
};

struct OutputConfig {
  std::string json;
  std::string csv;
};

struct RunConfig {
  std::optional<DataConfig> data;
  std::optional<ModelSpec> model;
  std::vector<QTildeSpec> tests;
  std::optional<SimulateConfig> simulate;
  NumericConfig numeric;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  OutputConfig output;
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items())
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
T get(const json& j, const std::string& key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::vector<std::string> terms(const json& j, const std::string& key, const std::string& where) {
  return get<std::vector<std::string>>(j, key, where, {});
}

inline CovariateKind parse_kind(const std::string& s, const std::string& where) {
  if (s == "numeric") return CovariateKind::numeric;
  if (s == "categorical") return CovariateKind::categorical;
  throw ConfigError(where + ": covariate kind must be numeric or categorical, got '" + s + "'");
}

}  // namespace detail

inline ModelSpec parse_model(const json& j) {
  using namespace detail;
  check_keys(j, "model", {"blip", "treatment", "censoring", "outcome", "delta", "gamma"});
  ModelSpec m;
  m.blip = j.contains("blip") ? terms(j, "blip", "model") : default_blip_basis();
  m.treatment = terms(j, "treatment", "model");
  m.censoring = terms(j, "censoring", "model");
  m.outcome = terms(j, "outcome", "model");
  m.delta = terms(j, "delta", "model");
  m.gamma = parse_gamma_structure(get<std::string>(j, "gamma", "model", "lead"));
  m.validate();
  return m;
}

inline RunConfig parse_config(const json& j) {
  using namespace detail;
  check_keys(j, "config", {"data", "model", "tests", "simulate", "numeric", "alpha", "seed", "output"});
  RunConfig c;
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "data", {"path", "grid", "columns", "covariates"});
    DataConfig dc;
    dc.path = get<std::string>(d, "path", "data", "");
    if (d.contains("grid")) {
      const json& g = d.at("grid");
      check_keys(g, "data.grid", {"horizon", "lag", "origin"});
      dc.schema.grid.horizon = get<int>(g, "horizon", "data.grid", dc.schema.grid.horizon);
      dc.schema.grid.lag = get<int>(g, "lag", "data.grid", dc.schema.grid.lag);
      dc.schema.grid.origin = get<int>(g, "origin", "data.grid", dc.schema.grid.origin);
    }
    dc.schema.grid.validate();
    if (d.contains("columns")) {
      const json& col = d.at("columns");
      check_keys(col, "data.columns", {"id", "month", "visit", "treatment", "outcome", "censored"});
      auto& s = dc.schema;
      s.id = get<std::string>(col, "id", "data.columns", s.id);
      s.month = get<std::string>(col, "month", "data.columns", s.month);
      s.visit = get<std::string>(col, "visit", "data.columns", s.visit);
      s.treatment = get<std::string>(col, "treatment", "data.columns", s.treatment);
      s.outcome = get<std::string>(col, "outcome", "data.columns", s.outcome);
      s.censored = get<std::string>(col, "censored", "data.columns", s.censored);
    }
    if (d.contains("covariates")) {
      if (!d.at("covariates").is_array()) throw ConfigError("data.covariates: expected an array");
      for (const auto& cv : d.at("covariates")) {
        check_keys(cv, "data.covariates[]", {"name", "kind"});
        const auto name = get<std::string>(cv, "name", "data.covariates[]", "");
        if (name.empty()) throw ConfigError("data.covariates[]: name is required");
        dc.schema.covariates.emplace_back(
            name, parse_kind(get<std::string>(cv, "kind", "data.covariates[]", "numeric"), "data.covariates[" + name + "]"));
      }
    }
    c.data = dc;
  }
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  if (j.contains("tests")) {
    if (!j.at("tests").is_array()) throw ConfigError("tests: expected an array");
    for (const auto& t : j.at("tests")) {
      check_keys(t, "tests[]", {"kind", "alternative", "terms", "label"});
      QTildeSpec q;
      q.kind = parse_qtilde_kind(get<std::string>(t, "kind", "tests[]", "optimal-alt"));
      q.terms = terms(t, q.kind == QTildeKind::custom ? "terms" : "alternative", "tests[]");
      q.label = get<std::string>(t, "label", "tests[]", "");
      c.tests.push_back(q);
    }
  }
  if (j.contains("simulate")) {
    const json& s = j.at("simulate");
    check_keys(s, "simulate", {"scenario", "n", "reps", "methods", "threads", "sandwich", "export_csv"});
    SimulateConfig sc;
    if (s.contains("scenario") && s.at("scenario").is_object()) {
      const json& o = s.at("scenario");
      check_keys(o, "simulate.scenario", {"name", "description", "true_blip", "true_psi", "null_blip", "alt_blip", "censoring"});
      Scenario x;
      x.name = get<std::string>(o, "name", "simulate.scenario", "custom");
      x.description = get<std::string>(o, "description", "simulate.scenario", "custom scenario");
      x.true_blip = terms(o, "true_blip", "simulate.scenario");
      x.true_psi = get<std::vector<double>>(o, "true_psi", "simulate.scenario", {});
      x.null_blip = o.contains("null_blip") ? terms(o, "null_blip", "simulate.scenario") : default_blip_basis();
      x.alt_blip = terms(o, "alt_blip", "simulate.scenario");
      x.model = simulation_model();
      if (o.contains("censoring")) {
        const json& h = o.at("censoring");
        check_keys(h, "simulate.scenario.censoring", {"terms", "coefficients"});
        x.censoring = CensoringHazard{terms(h, "terms", "simulate.scenario.censoring"),
                                      get<std::vector<double>>(h, "coefficients", "simulate.scenario.censoring", {})};
      }
      if (x.true_blip.empty()) throw ConfigError("simulate.scenario: true_blip is required");
      x.validate();
      sc.scenario = x.name;
      sc.custom = x;
    } else {
      sc.scenario = get<std::string>(s, "scenario", "simulate", sc.scenario);
      builtin_scenario(sc.scenario);
    }
    if (s.contains("n")) sc.n = s.at("n").is_array() ? get<std::vector<int>>(s, "n", "simulate", {}) : std::vector<int>{get<int>(s, "n", "simulate", 0)};
    sc.reps = get<int>(s, "reps", "simulate", sc.reps);
    if (s.contains("methods")) {
      sc.methods.clear();
      for (const auto& m : get<std::vector<std::string>>(s, "methods", "simulate", {})) sc.methods.push_back(parse_method(m));
    }
    sc.threads = get<int>(s, "threads", "simulate", sc.threads);
    sc.sandwich = get<bool>(s, "sandwich", "simulate", sc.sandwich);
    sc.export_csv = get<std::string>(s, "export_csv", "simulate", "");
    if (sc.n.empty()) throw ConfigError("simulate.n: at least one sample size is required");
    for (int n : sc.n)
      if (n < 1) throw ConfigError("simulate.n: sample sizes must be positive");
    if (sc.reps < 1) throw ConfigError("simulate.reps must be at least 1");
    c.simulate = sc;
  }
  if (j.contains("numeric")) {
    const json& n = j.at("numeric");
    check_keys(n, "numeric", {"wls_score_tol", "logistic_score_tol", "logistic_max_iter", "separation_threshold",
                              "rank_tol", "pivot_tol", "eigen_floor", "ipcw_cap", "fd_step"});
    auto& x = c.numeric;
    x.wls_score_tol = get<double>(n, "wls_score_tol", "numeric", x.wls_score_tol);
    x.logistic_score_tol = get<double>(n, "logistic_score_tol", "numeric", x.logistic_score_tol);
    x.logistic_max_iter = get<int>(n, "logistic_max_iter", "numeric", x.logistic_max_iter);
    x.separation_threshold = get<double>(n, "separation_threshold", "numeric", x.separation_threshold);
    x.rank_tol = get<double>(n, "rank_tol", "numeric", x.rank_tol);
    x.pivot_tol = get<double>(n, "pivot_tol", "numeric", x.pivot_tol);
    x.eigen_floor = get<double>(n, "eigen_floor", "numeric", x.eigen_floor);
    x.ipcw_cap = get<double>(n, "ipcw_cap", "numeric", x.ipcw_cap);
    x.fd_step = get<double>(n, "fd_step", "numeric", x.fd_step);
    if (!(x.ipcw_cap >= 1)) throw ConfigError("numeric.ipcw_cap must be at least 1");
  }
  c.alpha = get<double>(j, "alpha", "config", c.alpha);
  if (!(c.alpha > 0 && c.alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  c.seed = get<std::uint64_t>(j, "seed", "config", c.seed);
  if (j.contains("output")) {
    const json& o = j.at("output");
    check_keys(o, "output", {"json", "csv"});
    c.output.json = get<std::string>(o, "json", "output", "");
    c.output.csv = get<std::string>(o, "csv", "output", "");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

inline json to_json(const ModelSpec& m) {
  return {{"blip", m.blip},           {"treatment", m.treatment}, {"censoring", m.censoring},
          {"outcome", m.outcome},     {"delta", m.delta},         {"gamma", to_string(m.gamma)}};
}

inline json to_json(const NumericConfig& x) {
  return {{"wls_score_tol", x.wls_score_tol},
          {"logistic_score_tol", x.logistic_score_tol},
          {"logistic_max_iter", x.logistic_max_iter},
          {"separation_threshold", x.separation_threshold},
          {"rank_tol", x.rank_tol},
          {"pivot_tol", x.pivot_tol},
          {"eigen_floor", x.eigen_floor},
          {"ipcw_cap", x.ipcw_cap},
          {"fd_step", x.fd_step}};
}

/// The resolved configuration, defaults filled in; parse_config(to_json(c)) == c.
inline json to_json(const RunConfig& c) {
  json j;
  if (c.data) {
    const auto& s = c.data->schema;
    json cov = json::array();
    for (const auto& [name, kind] : s.covariates)
      cov.push_back({{"name", name}, {"kind", kind == CovariateKind::numeric ? "numeric" : "categorical"}});
    j["data"] = {{"path", c.data->path},
                 {"grid", {{"horizon", s.grid.horizon}, {"lag", s.grid.lag}, {"origin", s.grid.origin}}},
                 {"columns",
                  {{"id", s.id},
                   {"month", s.month},
                   {"visit", s.visit},
                   {"treatment", s.treatment},
                   {"outcome", s.outcome},
                   {"censored", s.censored}}},
                 {"covariates", cov}};
  }
  if (c.model) j["model"] = to_json(*c.model);
  if (!c.tests.empty()) {
    json t = json::array();
    for (const auto& q : c.tests) {
      json e{{"kind", to_string(q.kind)}, {"label", q.label}};
      e[q.kind == QTildeKind::custom ? "terms" : "alternative"] = q.terms;
      t.push_back(e);
    }
    j["tests"] = t;
  }
  if (c.simulate) {
    const auto& s = *c.simulate;
    std::vector<std::string> methods;
    for (Method m : s.methods) methods.push_back(to_string(m));
    json scenario = s.scenario;
    if (s.custom) {
      const auto& x = *s.custom;
      scenario = {{"name", x.name},           {"description", x.description}, {"true_blip", x.true_blip},
                  {"true_psi", x.true_psi},   {"null_blip", x.null_blip},     {"alt_blip", x.alt_blip}};
      if (x.censoring) scenario["censoring"] = {{"terms", x.censoring->terms}, {"coefficients", x.censoring->coefficients}};
    }
    j["simulate"] = {{"scenario", scenario}, {"n", s.n},           {"reps", s.reps},
                     {"methods", methods},   {"threads", s.threads}, {"sandwich", s.sandwich},
                     {"export_csv", s.export_csv}};
  }
  j["numeric"] = to_json(c.numeric);
  j["alpha"] = c.alpha;
  j["seed"] = c.seed;
  j["output"] = {{"json", c.output.json}, {"csv", c.output.csv}};
  return j;
}

}  // namespace snmm
