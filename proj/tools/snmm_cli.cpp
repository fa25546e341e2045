// snmm: fit, test and simulate coarse structural nested mean models.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "snmm/cli.hpp"

namespace {

struct Flags {
  std::string config;
  std::string data;
  std::string scenario;
  std::vector<int> n;
  std::optional<int> reps;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<int> threads;
  std::string export_csv;
  std::string json;
  std::string csv;
  std::string format = "text";
};

snmm::RunConfig resolve(const Flags& f, bool simulate) {
  snmm::RunConfig c = f.config.empty() ? snmm::RunConfig{} : snmm::load_config(f.config);
  if (!f.data.empty()) {
    if (!c.data) c.data = snmm::DataConfig{};
    c.data->path = f.data;
  }
  if (simulate) {
    if (!c.simulate) c.simulate = snmm::SimulateConfig{};
    auto& s = *c.simulate;
    if (!f.scenario.empty()) {
      snmm::builtin_scenario(f.scenario);
      s.scenario = f.scenario;
      s.custom.reset();
    }
    if (!f.n.empty()) s.n = f.n;
    if (f.reps) s.reps = *f.reps;
    if (f.threads) s.threads = *f.threads;
    if (!f.export_csv.empty()) s.export_csv = f.export_csv;
    for (int n : s.n)
      if (n <= 0) throw snmm::ConfigError("--n: sample sizes must be positive");
    if (s.reps < 1) throw snmm::ConfigError("--reps: must be at least 1");
  }
  if (f.seed) c.seed = *f.seed;
  if (f.alpha) c.alpha = *f.alpha;
  if (!(c.alpha > 0 && c.alpha < 1)) throw snmm::ConfigError("alpha must lie in (0, 1)");
  if (!f.json.empty()) c.output.json = f.json;
  if (!f.csv.empty()) c.output.csv = f.csv;
  return c;
}

void emit(const snmm::RunConfig& c, const nlohmann::json& report, const std::string& text, const std::string& format) {
  const std::string body = snmm::dump_report(report);
  if (!c.output.json.empty()) snmm::detail::write_text_file(c.output.json, body);
  std::cout << (format == "json" ? body : text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse structural nested mean models: estimation, goodness-of-fit tests, simulation"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("-c,--config", f.config, "JSON configuration file");
    s->add_option("--seed", f.seed, "Random seed");
    s->add_option("--alpha", f.alpha, "Test level");
    s->add_option("--json", f.json, "Write the JSON report to this file");
    s->add_option("--csv", f.csv, "Write a CSV summary to this file");
    s->add_option("--format", f.format, "Standard output format")->check(CLI::IsMember({"text", "json"}));
  };

  auto* fit = app.add_subcommand("fit", "Estimate the blip parameters");
  common(fit);
  fit->add_option("--data", f.data, "Person-month CSV (overrides data.path)");

  auto* gof = app.add_subcommand("gof", "Estimate and run the overidentification tests");
  common(gof);
  gof->add_option("--data", f.data, "Person-month CSV (overrides data.path)");

  auto* sim = app.add_subcommand("simulate", "Monte Carlo rejection rates for a scenario");
  common(sim);
  sim->add_option("--scenario", f.scenario, "Built-in scenario name");
  sim->add_option("--n", f.n, "Sample size(s), comma separated")->delimiter(',');
  sim->add_option("--reps", f.reps, "Replicates per sample size");
  sim->add_option("--threads", f.threads, "Worker threads (0: hardware concurrency)");
  sim->add_option("--export-csv", f.export_csv, "Write the first simulated data set to this CSV");

  auto* scen = app.add_subcommand("scenarios", "Built-in simulation scenarios");
  scen->require_subcommand(1);
  auto* list = scen->add_subcommand("list", "List the scenarios");
  list->add_option("--format", f.format, "Standard output format")->check(CLI::IsMember({"text", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    std::ostringstream text;
    if (list->parsed()) {
      const auto j = snmm::cmd_scenarios(text);
      std::cout << (f.format == "json" ? snmm::dump_report(j) : text.str());
      return 0;
    }
    const snmm::RunConfig c = resolve(f, sim->parsed());
    nlohmann::json report;
    if (fit->parsed())
      report = snmm::cmd_fit(c, text, std::cerr);
    else if (gof->parsed())
      report = snmm::cmd_gof(c, text, std::cerr);
    else
      report = snmm::cmd_simulate(c, text, std::cerr);
    emit(c, report, text.str(), f.format);
    return 0;
  } catch (const snmm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return snmm::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
