#pragma once

// Synthetic CD4 panels and Monte Carlo level/power studies.
//
// Calendar months 6..30 map to grid months 0..24 (origin 6, lag 12), so terms
// see calendar m and k. Untreated outcomes follow a random walk with drift,
// initiation follows a pooled logistic hazard, and observed outcomes add the
// true blip after initiation. Optional MAR censoring uses its own RNG stream,
// so a zero hazard reproduces the uncensored data exactly.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "snmm/blip.hpp"
#include "snmm/error.hpp"
#include "snmm/estimator.hpp"
#include "snmm/gof.hpp"
#include "snmm/panel.hpp"
#include "snmm/terms.hpp"

namespace snmm {

struct GeneratorParams {
  double idu_share = 0.10;
  double log_mean_idu = 6.0, log_sd_idu = 0.4;
  double log_mean_other = 6.6, log_sd_other = 0.5;
  double drift = -10.0;
  int first_month = 6;   // calendar month of grid month 0
  int last_month = 30;   // calendar month of the last outcome
  int lag = 12;
  // sigma_k = sigma_intercept - sigma_slope k up to sigma_break - 1, sigma_flat from sigma_break on
  double sigma_intercept = 52.375, sigma_slope = 1.625, sigma_flat = 21.5;
  int sigma_break = 20;
  // logit P(T = m | T >= m) = a + b injdrug + c Y_m + d m
  double init_intercept = -2.4, init_idu = -0.42, init_y = -0.0035, init_month = -0.026;
  int init_last_month = 29;  // last calendar month at which initiation may occur

  double sigma(int k) const { return k < sigma_break ? sigma_intercept - sigma_slope * k : sigma_flat; }

  Grid grid() const { return Grid{last_month - first_month, lag, first_month}; }

  void validate() const {
    grid().validate();
    if (!(idu_share >= 0 && idu_share <= 1)) throw ConfigError("generator: idu_share must lie in [0, 1]");
    if (!(log_sd_idu > 0 && log_sd_other > 0)) throw ConfigError("generator: log-normal sds must be positive");
    for (int k = first_month + 1; k <= last_month; ++k)
      if (!(sigma(k) > 0)) throw ConfigError("generator: sigma_" + std::to_string(k) + " is not positive");
    if (init_last_month < first_month || init_last_month >= last_month)
      throw ConfigError("generator: initiation window must end before the last outcome month");
  }
};

/// Logistic censoring hazard over the history at p - 1.
struct CensoringHazard {
  std::vector<std::string> terms;  // may use injdrug, Y, A, m
  std::vector<double> coefficients;
};

struct Scenario {
  std::string name;
  std::string description;
  std::vector<std::string> true_blip;
  std::vector<double> true_psi;
  std::vector<std::string> null_blip;
  std::vector<std::string> alt_blip;
  GeneratorParams gen;
  std::optional<CensoringHazard> censoring;
  ModelSpec model;  // nuisance designs for fitting; its blip is replaced by null_blip

  static const std::vector<std::string>& covariates() {
    static const std::vector<std::string> c{"injdrug"};
    return c;
  }

  void validate() const {
    gen.validate();
    const BlipModel truth(true_blip, covariates());
    if (truth.dimension() != true_psi.size()) throw ConfigError("scenario '" + name + "': true psi has wrong length");
    BlipModel(null_blip, covariates());
    if (!alt_blip.empty()) BlipModel(alt_blip, covariates());
    if (censoring) {
      Design(censoring->terms, covariates(), TermScope::with_treatment(), "censoring hazard");
      if (censoring->terms.size() != censoring->coefficients.size())
        throw ConfigError("scenario '" + name + "': censoring terms and coefficients differ in length");
    }
  }
};

inline ModelSpec simulation_model() {
  ModelSpec s;
  s.treatment = {"1", "injdrug", "Y", "m"};
  s.outcome = {"1", "Y", "dur"};
  s.delta = {"1", "m", "Y", "injdrug", "dur", "dur^2", "m*dur", "m*dur^2", "Y*dur", "Y*dur^2", "injdrug*dur"};
  s.censoring = {"1", "Y", "A", "injdrug"};
  // outcome noise scale moves with calendar month, so residual covariance is
  // not stationary in the lead
  s.gamma = GammaStructure::month;
  return s;
}

inline CensoringHazard default_censoring_hazard() {
  // about 15% of patients censored over follow-up; treated and low-CD4 patients leave more often
  return {{"1", "Y", "A", "injdrug"}, {-4.3, -0.0015, 0.6, 0.5}};
}

inline std::vector<Scenario> builtin_scenarios() {
  const std::vector<std::string> h0{"dur", "m*dur"};
  const std::vector<std::string> quad{"dur", "m*dur", "m^2*dur"};
  const std::vector<std::string> pow15{"dur^1.5", "m*dur^1.5"};
  auto make = [&](std::string name, std::string desc, std::vector<std::string> truth, std::vector<double> psi,
                  std::vector<std::string> null, std::vector<std::string> alt) {
    Scenario s;
    s.name = std::move(name);
    s.description = std::move(desc);
    s.true_blip = std::move(truth);
    s.true_psi = std::move(psi);
    s.null_blip = std::move(null);
    s.alt_blip = std::move(alt);
    s.model = simulation_model();
    return s;
  };
  std::vector<Scenario> out{
      make("a", "true (25 - 0.7m)(k-m); H0 (psi1 + psi2 m)(k-m); Ha adds m^2", h0, {25, -0.7}, h0, quad),
      make("b", "true (25 - 0.7m)(k-m); H0 adds injdrug; Ha (psi1 + psi2 m + psi3 m^2)(k-m)", h0, {25, -0.7},
           {"dur", "m*dur", "injdrug*dur"}, quad),
      make("c", "true (35 - 1.1m + 0.04m^2)(k-m); H0 linear in m; Ha adds m^2", quad, {35, -1.1, 0.04}, h0, quad),
      make("d", "true (35 - 1.1m + 0.04k^2)(k-m); H0 linear in m; Ha adds m^2", {"dur", "m*dur", "k^2*dur"},
           {35, -1.1, 0.04}, h0, quad),
      make("e", "true (25 - m + 0.03m^2)(k-m); H0 linear in m; Ha (psi3 + psi4 m)(k-m)^1.5", quad, {25, -1, 0.03}, h0,
           pow15),
      make("f", "true (10 - 1.1m)(k-m)^1.5; H0 linear in m; Ha (psi3 + psi4 m)(k-m)^1.5", pow15, {10, -1.1}, h0,
           pow15),
  };
  Scenario ac = out.front();
  ac.name = "a-censored";
  ac.description = "scenario a with MAR censoring depending on CD4, treatment and injdrug (about 15% censored)";
  ac.censoring = default_censoring_hazard();
  out.push_back(ac);
  return out;
}

inline Scenario builtin_scenario(const std::string& name) {
  for (auto& s : builtin_scenarios())
    if (s.name == name) return s;
  std::string names;
  for (const auto& s : builtin_scenarios()) names += (names.empty() ? "" : ", ") + s.name;
  throw ConfigError("unknown scenario '" + name + "'; built-ins: " + names);
}

// ---------------------------------------------------------------- seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for (base, replicate, stream); independent of evaluation order.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t replicate, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ splitmix64(replicate * 4 + stream + 1));
}

// ---------------------------------------------------------------- generation

struct SimulatedPanel {
  std::shared_ptr<PanelData> data;
  Eigen::MatrixXd y_never;  // untreated outcomes, n x months; oracle use only
  std::vector<int> idu;
};

/// Draw a panel; `seed` seeds the outcome/initiation stream, seed + 1 stream the censoring.
inline SimulatedPanel generate(const Scenario& sc, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate: n must be at least 1");
  const auto& g = sc.gen;
  const Grid grid = g.grid();
  const int months = grid.horizon + 1;
  const auto& covs = Scenario::covariates();
  const BlipModel truth(sc.true_blip, covs);
  const Eigen::VectorXd psi = Eigen::Map<const Eigen::VectorXd>(sc.true_psi.data(), static_cast<Eigen::Index>(sc.true_psi.size()));
  check_dimension(truth, psi);

  auto data = std::make_shared<PanelData>();
  data->grid = grid;
  data->covariate_names = covs;
  data->sources = {CovariateSource{"injdrug", CovariateKind::numeric, {}, 0, 1, false}};
  SimulatedPanel out;
  out.y_never.resize(n, months);
  out.idu.resize(static_cast<std::size_t>(n));

  std::mt19937_64 rng(derive_seed(seed, 0, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int init_last = g.init_last_month - g.first_month;

  data->records.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& r = data->records[static_cast<std::size_t>(i)];
    r.id = std::to_string(i + 1);
    const int idu = unif(rng) < g.idu_share ? 1 : 0;
    out.idu[static_cast<std::size_t>(i)] = idu;
    r.covariates.assign(static_cast<std::size_t>(months), static_cast<double>(idu));
    r.visit.assign(static_cast<std::size_t>(months), 1);
    r.treatment.assign(static_cast<std::size_t>(months), 0);
    r.outcome.assign(static_cast<std::size_t>(months), kNaN);

    const double mu = idu ? g.log_mean_idu : g.log_mean_other;
    const double sd = idu ? g.log_sd_idu : g.log_sd_other;
    double y = std::exp(mu + sd * normal(rng));
    out.y_never(i, 0) = y;
    for (int m = 1; m < months; ++m) {
      const int k = m + g.first_month;
      y = g.drift + y + g.sigma(k) * normal(rng);
      out.y_never(i, m) = y;
    }
    int start = kNever;
    for (int m = 0; m <= init_last; ++m) {
      const double cal = static_cast<double>(m + g.first_month);
      const double lp = g.init_intercept + g.init_idu * idu + g.init_y * out.y_never(i, m) + g.init_month * cal;
      if (unif(rng) < expit(lp)) {
        start = m;
        break;
      }
    }
    for (int m = 0; m < months; ++m) {
      r.outcome[static_cast<std::size_t>(m)] = out.y_never(i, m);
      if (m >= start) r.treatment[static_cast<std::size_t>(m)] = 1;
    }
    r.start = start;
    if (start != kNever)
      for (int k = start + 1; k < months; ++k)
        r.outcome[static_cast<std::size_t>(k)] += gamma(truth, psi, *data, r, start, k);
  }

  if (sc.censoring) {
    const Design hz(sc.censoring->terms, covs, TermScope::with_treatment(), "censoring hazard");
    const Eigen::VectorXd coef = Eigen::Map<const Eigen::VectorXd>(sc.censoring->coefficients.data(),
                                                                  static_cast<Eigen::Index>(sc.censoring->coefficients.size()));
    std::mt19937_64 crng(derive_seed(seed, 0, 1));
    std::uniform_real_distribution<double> cu(0.0, 1.0);
    Eigen::VectorXd x(static_cast<Eigen::Index>(hz.size()));
    for (auto& r : data->records) {
      for (int p = 1; p <= grid.horizon; ++p) {
        hz.evaluate(data->context(r, p - 1), {x.data(), hz.size()});
        if (cu(crng) < expit(x.dot(coef))) {
          r.censored_from = p;
          for (int m = p; m < months; ++m) {
            r.outcome[static_cast<std::size_t>(m)] = kNaN;
            r.treatment[static_cast<std::size_t>(m)] = 0;
            r.covariates[static_cast<std::size_t>(m)] = 0.0;  // as the CSV loader leaves unobserved months
          }
          break;
        }
      }
    }
  }
  data->validate();
  out.data = data;
  return out;
}

inline double censored_fraction(const PanelData& d) {
  if (d.records.empty()) return 0.0;
  const auto c = std::count_if(d.records.begin(), d.records.end(), [](const PatientRecord& r) { return r.censored_from.has_value(); });
  return static_cast<double>(c) / static_cast<double>(d.records.size());
}

/// Scenario with a censoring hazard; a pilot draw flags hazards censoring over 80%.
inline Scenario add_censoring(Scenario sc, const CensoringHazard& hazard) {
  sc.censoring = hazard;
  sc.validate();
  const auto pilot = generate(sc, 2000, 0x5eedULL);
  const double frac = censored_fraction(*pilot.data);
  if (frac > 0.8)
    throw ConfigError("censoring hazard censors " + std::to_string(100 * frac) + "% of patients (over 80%)");
  return sc;
}

// ---------------------------------------------------------------- Monte Carlo

enum class Method { gof_one, gof_delta, gof_opt, emft };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::gof_one: return "gof-one";
    case Method::gof_delta: return "gof-delta";
    case Method::gof_opt: return "gof-opt";
    case Method::emft: return "emft";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::gof_one, Method::gof_delta, Method::gof_opt, Method::emft})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (gof-one, gof-delta, gof-opt, emft)");
}

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::gof_one, Method::gof_delta, Method::gof_opt, Method::emft};
  return m;
}

struct McOptions {
  int n = 1000;
  int reps = 100;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  std::vector<Method> methods = all_methods();
  int threads = 0;  // 0: hardware concurrency
  bool sandwich = true;
  double max_failure_rate = 0.02;
  std::optional<ModelSpec> model;  // overrides the scenario's nuisance designs
};

struct ReplicateResult {
  bool ok = false;
  std::string error;
  Eigen::VectorXd psi, se;
  std::vector<double> statistics, p_values;  // per method
};

struct McResult {
  std::string scenario;
  int n = 0;
  int reps = 0;
  int failures = 0;
  double alpha = 0.05;
  std::uint64_t seed = 0;
  std::vector<Method> methods;
  std::vector<int> rejections;
  std::vector<std::vector<double>> p_values;  // per method, successful replicates in order
  std::vector<std::string> psi_names;
  Eigen::VectorXd psi_mean, psi_sd, coverage, true_psi;
  bool psi_comparable = false;  // null blip equals the true blip
  std::vector<std::string> failure_messages;

  int successes() const { return reps - failures; }
  double rate(std::size_t j) const { return successes() ? static_cast<double>(rejections[j]) / successes() : 0.0; }
  double mc_se(std::size_t j) const {
    const double p = rate(j);
    return successes() ? std::sqrt(p * (1 - p) / successes()) : 0.0;
  }
  /// Monte Carlo standard error of the mean of psi_j.
  double psi_mc_se(Eigen::Index j) const { return successes() ? psi_sd[j] / std::sqrt(static_cast<double>(successes())) : 0.0; }
};

/// One replicate: generate, fit the null model, run the requested tests.
inline ReplicateResult run_replicate(const Scenario& sc, const McOptions& opt, int rep) {
  ReplicateResult res;
  try {
    const auto sim = generate(sc, opt.n, derive_seed(opt.seed, static_cast<std::uint64_t>(rep), 2));
    ModelSpec spec = opt.model ? *opt.model : sc.model;
    spec.blip = sc.null_blip;
    if (!sc.censoring) spec.censoring.clear();
    auto an = std::make_shared<const Analysis>(sim.data, spec);
    const BlipModel null(sc.null_blip, Scenario::covariates());
    EstimationResult fit = estimate(an, null, {.sandwich = false, .check_block_means = false});

    std::vector<QTilde> qts;
    std::vector<int> slot;
    for (std::size_t j = 0; j < opt.methods.size(); ++j) {
      const Method m = opt.methods[j];
      if (m == Method::emft) continue;
      QTildeSpec qs;
      qs.kind = m == Method::gof_one ? QTildeKind::constant_one
                : m == Method::gof_delta ? QTildeKind::delta_alt
                                         : QTildeKind::optimal_alt;
      qs.terms = sc.alt_blip;
      qts.push_back(build_qtilde(fit, qs));
      slot.push_back(static_cast<int>(j));
    }
    res.statistics.assign(opt.methods.size(), kNaN);
    res.p_values.assign(opt.methods.size(), kNaN);
    if (!qts.empty()) {
      Linearization lin;
      const auto reports = gof_statistics(fit, qts, &lin);
      for (std::size_t t = 0; t < reports.size(); ++t) {
        res.statistics[static_cast<std::size_t>(slot[t])] = reports[t].statistic;
        res.p_values[static_cast<std::size_t>(slot[t])] = reports[t].p_value;
      }
      if (opt.sandwich) attach_sandwich(fit, lin);
    } else if (opt.sandwich) {
      attach_sandwich(fit, linearize(fit));
    }
    for (std::size_t j = 0; j < opt.methods.size(); ++j) {
      if (opt.methods[j] != Method::emft) continue;
      const auto e = emft_test(an, null, sc.alt_blip);
      res.statistics[j] = e.report.statistic;
      res.p_values[j] = e.report.p_value;
    }
    res.psi = fit.psi_hat;
    res.se = fit.has_sandwich ? fit.se : Eigen::VectorXd();
    res.ok = true;
  } catch (const Error& e) {
    res.error = e.what();
  }
  return res;
}

inline McResult run_mc(const Scenario& sc, const McOptions& opt) {
  sc.validate();
  if (opt.reps < 1) throw ConfigError("run_mc: reps must be at least 1");
  if (!(opt.alpha > 0 && opt.alpha < 1)) throw ConfigError("run_mc: alpha must lie in (0, 1)");
  for (Method m : opt.methods)
    if (m != Method::gof_one && sc.alt_blip.empty())
      throw ConfigError("run_mc: method " + to_string(m) + " needs an alternative blip");

  std::vector<ReplicateResult> results(static_cast<std::size_t>(opt.reps));
  const int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  const int threads = std::min(opt.threads > 0 ? opt.threads : hw, opt.reps);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int rep = next++; rep < opt.reps; rep = next++) results[static_cast<std::size_t>(rep)] = run_replicate(sc, opt, rep);
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  McResult out;
  out.scenario = sc.name;
  out.n = opt.n;
  out.reps = opt.reps;
  out.alpha = opt.alpha;
  out.seed = opt.seed;
  out.methods = opt.methods;
  out.rejections.assign(opt.methods.size(), 0);
  out.p_values.assign(opt.methods.size(), {});
  out.psi_names = BlipModel(sc.null_blip, Scenario::covariates()).names();
  out.psi_comparable = sc.null_blip == sc.true_blip;
  out.true_psi = Eigen::Map<const Eigen::VectorXd>(sc.true_psi.data(), static_cast<Eigen::Index>(sc.true_psi.size()));
  const Eigen::Index p = static_cast<Eigen::Index>(out.psi_names.size());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(p), sumsq = Eigen::VectorXd::Zero(p), cover = Eigen::VectorXd::Zero(p);
  int covered_reps = 0;
  for (const auto& r : results) {
    if (!r.ok) {
      ++out.failures;
      if (out.failure_messages.size() < 10) out.failure_messages.push_back(r.error);
      continue;
    }
    for (std::size_t j = 0; j < opt.methods.size(); ++j) {
      out.p_values[j].push_back(r.p_values[j]);
      if (r.p_values[j] < opt.alpha) ++out.rejections[j];
    }
    sum += r.psi;
    sumsq += r.psi.cwiseAbs2();
    if (r.se.size() == p && out.psi_comparable) {
      ++covered_reps;
      for (Eigen::Index j = 0; j < p; ++j)
        if (std::abs(r.psi[j] - out.true_psi[j]) <= 1.96 * r.se[j]) cover[j] += 1;
    }
  }
  const double s = out.successes();
  out.psi_mean = s > 0 ? Eigen::VectorXd(sum / s) : Eigen::VectorXd::Constant(p, kNaN);
  out.psi_sd = Eigen::VectorXd::Constant(p, kNaN);
  if (s > 1)
    for (Eigen::Index j = 0; j < p; ++j)
      out.psi_sd[j] = std::sqrt(std::max(0.0, (sumsq[j] - s * out.psi_mean[j] * out.psi_mean[j]) / (s - 1)));
  out.coverage = covered_reps > 0 ? Eigen::VectorXd(cover / covered_reps) : Eigen::VectorXd::Constant(p, kNaN);
  if (out.failures > opt.max_failure_rate * opt.reps) {
    std::string msg = "run_mc: " + std::to_string(out.failures) + " of " + std::to_string(opt.reps) +
                      " replicates failed (limit " + std::to_string(100 * opt.max_failure_rate) + "%)";
    if (!out.failure_messages.empty()) msg += "; first failure: " + out.failure_messages.front();
    throw NumericError(msg);
  }
  return out;
}

}  // namespace snmm
