#pragma once

// Commands behind the snmm executable. Each returns the JSON report (which
// embeds the resolved config) and writes a text table to `out`; warnings
// and notes go to `log`.

#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "snmm/config.hpp"
#include "snmm/estimator.hpp"
#include "snmm/gof.hpp"
#include "snmm/panel.hpp"
#include "snmm/report.hpp"
#include "snmm/sim.hpp"

namespace snmm {

/// Runs f, prefixing any library error with the stage it came from.
template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), name + ": " + e.what());
  }
}

namespace detail {

inline void require_fit_inputs(const RunConfig& c) {
  if (!c.data || c.data->path.empty()) throw ConfigError("config: data.path is required");
  if (!c.model) throw ConfigError("config: a model section is required");
  c.model->validate();
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << body;
}

inline std::string canonical_key(const QTildeSpec& q, const std::vector<std::string>& covariates) {
  std::vector<std::string> texts;
  for (const auto& t : q.terms) texts.push_back(Term::parse(t, covariates).text());
  std::sort(texts.begin(), texts.end());
  std::string key = to_string(q.kind);
  for (const auto& t : texts) key += "|" + t;
  return key;
}

}  // namespace detail

struct FitRun {
  std::shared_ptr<const PanelData> data;
  EstimationResult fit;
};

inline FitRun run_fit(const RunConfig& c) {
  detail::require_fit_inputs(c);
  FitRun r;
  r.data = stage("loading data", [&] { return std::make_shared<const PanelData>(load_csv(c.data->path, c.data->schema)); });
  if (r.data->records.empty()) throw DataError("loading data: no patients in '" + c.data->path + "'");
  auto an = stage("fitting nuisance models", [&] { return std::make_shared<const Analysis>(r.data, *c.model, c.numeric); });
  r.fit = stage("estimating psi", [&] {
    return estimate(an, BlipModel(c.model->blip, r.data->covariate_names), {.sandwich = true, .check_block_means = true});
  });
  return r;
}

inline nlohmann::json cmd_fit(const RunConfig& c, std::ostream& out, std::ostream& log) {
  (void)log;
  const FitRun r = run_fit(c);
  print_fit(out, r.fit);
  nlohmann::json j{{"command", "fit"}, {"config", to_json(c)}, {"fit", to_json(r.fit)}};
  if (!c.output.csv.empty()) {
    std::ostringstream csv;
    write_fit_csv(csv, r.fit);
    detail::write_text_file(c.output.csv, csv.str());
  }
  return j;
}

/// Removes repeated directions (same kind and the same terms up to ordering).
inline std::vector<QTildeSpec> dedupe_tests(const std::vector<QTildeSpec>& tests,
                                            const std::vector<std::string>& covariates, std::ostream& log) {
  std::vector<QTildeSpec> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < tests.size(); ++i) {
    QTildeSpec q = tests[i];
    if (q.label.empty()) q.label = "test " + std::to_string(i + 1);
    if (!seen.insert(detail::canonical_key(q, covariates)).second) {
      log << "warning: test '" << q.label << "' repeats an earlier direction and is skipped\n";
      continue;
    }
    out.push_back(q);
  }
  return out;
}

inline nlohmann::json cmd_gof(const RunConfig& c, std::ostream& out, std::ostream& log) {
  if (c.tests.empty()) throw ConfigError("config: gof needs at least one entry in tests");
  const FitRun r = run_fit(c);
  const auto tests = stage("test directions", [&] { return dedupe_tests(c.tests, r.data->covariate_names, log); });
  std::vector<QTilde> qts;
  for (const auto& t : tests)
    qts.push_back(stage("building q-tilde '" + t.label + "'", [&] { return build_qtilde(r.fit, t); }));
  const auto reports = stage("goodness of fit", [&] { return gof_statistics(r.fit, qts); });
  print_fit(out, r.fit);
  out << "\n";
  print_gof(out, reports);
  std::vector<std::string> notes;
  if (reports.size() > 1)
    notes.push_back(std::to_string(reports.size()) +
                    " tests reported; p-values are not adjusted for multiple testing");
  if (r.fit.analysis->censoring_active()) notes.push_back("censoring-adjusted statistics (IPCW)");
  for (const auto& n : notes) log << "note: " << n << "\n";
  nlohmann::json tj = nlohmann::json::array();
  for (const auto& rep : reports) tj.push_back(to_json(rep));
  if (!c.output.csv.empty()) {
    std::ostringstream csv;
    write_gof_csv(csv, reports);
    detail::write_text_file(c.output.csv, csv.str());
  }
  return {{"command", "gof"}, {"config", to_json(c)}, {"fit", to_json(r.fit)}, {"tests", tj}, {"notes", notes}};
}

inline Scenario resolve_scenario(const SimulateConfig& s) {
  return s.custom ? *s.custom : builtin_scenario(s.scenario);
}

inline nlohmann::json cmd_simulate(const RunConfig& c, std::ostream& out, std::ostream& log) {
  if (!c.simulate) throw ConfigError("config: simulate section is required");
  const auto& s = *c.simulate;
  const Scenario sc = resolve_scenario(s);
  sc.validate();
  if (!s.export_csv.empty()) {
    const auto sim = generate(sc, s.n.front(), derive_seed(c.seed, 0, 2));
    write_csv(s.export_csv, *sim.data);
    log << "wrote replicate 0 (n = " << s.n.front() << ") to " << s.export_csv << "\n";
  }
  std::vector<McResult> results;
  for (int n : s.n) {
    McOptions o;
    o.n = n;
    o.reps = s.reps;
    o.alpha = c.alpha;
    o.seed = c.seed;
    o.methods = s.methods;
    o.threads = s.threads;
    o.sandwich = s.sandwich;
    if (c.model) o.model = *c.model;
    results.push_back(stage("simulating n = " + std::to_string(n), [&] { return run_mc(sc, o); }));
    if (results.back().failures > 0)
      log << "note: n = " << n << ": " << results.back().failures << " replicate(s) failed and were excluded\n";
  }
  print_mc(out, results);
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : results) rj.push_back(to_json(r));
  if (!c.output.csv.empty()) {
    std::ostringstream csv;
    write_mc_csv(csv, results);
    detail::write_text_file(c.output.csv, csv.str());
  }
  return {{"command", "simulate"}, {"config", to_json(c)}, {"scenario", sc.description}, {"results", rj}};
}

inline nlohmann::json cmd_scenarios(std::ostream& out) {
  std::vector<std::vector<std::string>> rows;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : builtin_scenarios()) {
    rows.push_back({s.name, s.description});
    j.push_back({{"name", s.name},
                 {"description", s.description},
                 {"true_blip", s.true_blip},
                 {"true_psi", s.true_psi},
                 {"null_blip", s.null_blip},
                 {"alt_blip", s.alt_blip},
                 {"censored", s.censoring.has_value()}});
  }
  detail::print_table(out, {"Scenario", "Description"}, rows, 2);
  return {{"command", "scenarios"}, {"scenarios", j}};
}

/// Serialized report; identical inputs give identical bytes.
inline std::string dump_report(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace snmm
