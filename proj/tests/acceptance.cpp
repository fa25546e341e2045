// Acceptance run: one PASS/FAIL line per criterion. Optional arguments pick
// criteria by number (e.g. `snmm_acceptance 1 8`); the default runs all nine.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "snmm/snmm.hpp"

using namespace snmm;

namespace {

const std::vector<Method> kGof{Method::gof_one, Method::gof_delta, Method::gof_opt};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[fail] ";
    }
    detail << what << "; ";
  }
};

std::string fmt(double x, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, x);
  return buf;
}

McResult mc(const Scenario& sc, int n, int reps, std::uint64_t seed, std::vector<Method> methods = all_methods(),
            std::optional<ModelSpec> model = std::nullopt, bool sandwich = false) {
  McOptions o;
  o.n = n;
  o.reps = reps;
  o.seed = seed;
  o.methods = std::move(methods);
  o.sandwich = sandwich;
  o.model = std::move(model);
  const auto t0 = std::chrono::steady_clock::now();
  McResult r = run_mc(sc, o);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "  [" << sc.name << " n=" << n << " reps=" << reps << " " << fmt(secs, 0) << "s";
  for (std::size_t j = 0; j < r.methods.size(); ++j) std::cerr << " " << to_string(r.methods[j]) << "=" << fmt(r.rate(j));
  if (r.failures) std::cerr << " failures=" << r.failures;
  std::cerr << "]\n";
  return r;
}

std::size_t slot(const McResult& r, Method m) {
  return static_cast<std::size_t>(std::find(r.methods.begin(), r.methods.end(), m) - r.methods.begin());
}

void level_checks(Outcome& o, const McResult& r, const std::string& tag, double lo = 0.03, double hi = 0.08) {
  for (std::size_t j = 0; j < r.methods.size(); ++j) {
    const double p = r.rate(j);
    o.check(p >= lo && p <= hi, tag + " " + to_string(r.methods[j]) + " " + fmt(p) + " (se " + fmt(r.mc_se(j)) + ")");
  }
}

// Kolmogorov distribution tail with the small-sample adjustment of the statistic.
double ks_pvalue(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  const double n = static_cast<double>(u.size());
  double d = 0;
  for (std::size_t i = 0; i < u.size(); ++i)
    d = std::max({d, (static_cast<double>(i) + 1) / n - u[i], u[i] - static_cast<double>(i) / n});
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double q = 0;
  for (int j = 1; j <= 100; ++j) q += 2 * ((j % 2) ? 1 : -1) * std::exp(-2.0 * j * j * lambda * lambda);
  return std::clamp(q, 0.0, 1.0);
}

ModelSpec fitting_model(const Scenario& sc) {
  ModelSpec s = sc.model;
  s.blip = sc.null_blip;
  if (!sc.censoring) s.censoring.clear();
  return s;
}

// Scenario (a) at n = 1000 is used by criteria 1 and 9.
const McResult& scenario_a_level() {
  static const McResult r = mc(builtin_scenario("a"), 1000, 500, 1001);
  return r;
}

Outcome criterion1() {
  Outcome o;
  level_checks(o, scenario_a_level(), "(a) n=1000");
  return o;
}

Outcome criterion2() {
  Outcome o;
  const auto sc = builtin_scenario("b");
  const auto big = mc(sc, 1000, 500, 2001);
  const auto small = mc(sc, 500, 500, 2002);
  level_checks(o, big, "(b) n=1000");
  for (std::size_t j = 0; j < big.methods.size(); ++j)
    o.check(small.rate(j) > big.rate(j),
            to_string(big.methods[j]) + " n=500 " + fmt(small.rate(j)) + " > n=1000 " + fmt(big.rate(j)));
  return o;
}

// power >= target, with the Monte Carlo tolerance taken at the target
bool power_at_least(double p, double target, int reps) { return p >= target - 3 * std::sqrt(target * (1 - target) / reps); }

void ordering(Outcome& o, const McResult& r, const std::string& tag) {
  const auto one = slot(r, Method::gof_one), del = slot(r, Method::gof_delta), opt = slot(r, Method::gof_opt);
  auto below = [&](std::size_t a, std::size_t b) {
    const double tol = 3 * std::hypot(r.mc_se(a), r.mc_se(b));
    o.check(r.rate(a) < r.rate(b) + tol, tag + " " + to_string(r.methods[a]) + " " + fmt(r.rate(a)) + " < " +
                                             to_string(r.methods[b]) + " " + fmt(r.rate(b)) + " (tol " + fmt(tol) + ")");
  };
  below(one, del);
  below(del, opt);
}

Outcome criterion3() {
  Outcome o;
  const int reps = 200;
  const auto c = mc(builtin_scenario("c"), 1000, reps, 3001, kGof);
  const auto e = mc(builtin_scenario("e"), 1000, reps, 3002, kGof);
  ordering(o, c, "(c)");
  ordering(o, e, "(e)");
  const double pc = c.rate(slot(c, Method::gof_opt)), pe = e.rate(slot(e, Method::gof_opt));
  o.check(power_at_least(pc, 0.80, reps), "(c) gof-opt power " + fmt(pc) + " >= 0.80");
  o.check(power_at_least(pe, 0.60, reps), "(e) gof-opt power " + fmt(pe) + " >= 0.60");
  return o;
}

Outcome criterion4() {
  Outcome o;
  const int reps = 200;
  for (const char* name : {"d", "f"}) {
    const auto r = mc(builtin_scenario(name), 1000, reps, 4000 + (name[0] - 'a'), {Method::gof_opt});
    o.check(power_at_least(r.rate(0), 0.97, reps), std::string("(") + name + ") gof-opt power " + fmt(r.rate(0)) + " >= 0.97");
  }
  return o;
}

void bias_checks(Outcome& o, const McResult& r, const std::string& tag) {
  for (Eigen::Index j = 0; j < r.psi_mean.size(); ++j) {
    const double se = r.psi_mc_se(j), diff = r.psi_mean[j] - r.true_psi[j];
    o.check(std::abs(diff) <= 3 * se, tag + " mean psi" + std::to_string(j + 1) + " " + fmt(r.psi_mean[j], 3) +
                                          " vs " + fmt(r.true_psi[j], 2) + " (MC se " + fmt(se, 3) + ")");
  }
}

Outcome criterion5() {
  Outcome o;
  const auto r = mc(builtin_scenario("a"), 2000, 200, 5001, {Method::gof_one}, std::nullopt, true);
  bias_checks(o, r, "(a) n=2000");
  o.check(r.coverage[0] >= 0.92 && r.coverage[0] <= 0.98, "psi1 coverage " + fmt(r.coverage[0]));
  o.detail << "psi2 coverage " << fmt(r.coverage[1]) << "; ";
  return o;
}

Outcome criterion6() {
  Outcome o;
  const auto sc = builtin_scenario("a");
  ModelSpec wrong_treatment = fitting_model(sc);
  wrong_treatment.treatment = {"1", "injdrug", "m"};
  ModelSpec wrong_outcome = fitting_model(sc);
  wrong_outcome.outcome = {"1", "dur"};
  const auto t = mc(sc, 1000, 500, 6001, kGof, wrong_treatment);
  const auto y = mc(sc, 1000, 500, 6002, kGof, wrong_outcome);
  bias_checks(o, t, "treatment model without Y");
  level_checks(o, t, "treatment model without Y");
  bias_checks(o, y, "outcome model without Y");
  level_checks(o, y, "outcome model without Y");
  return o;
}

Outcome criterion7() {
  Outcome o;
  // a censoring model fitted to data without censoring events
  const auto sc = builtin_scenario("a");
  bool identical = true;
  for (std::uint64_t seed : {71, 72, 73}) {
    const auto sim = generate(sc, 1000, seed);
    ModelSpec plain = fitting_model(sc), with = sc.model;
    with.blip = sc.null_blip;
    const auto a = estimate(sim.data, plain, {}, {.sandwich = false, .check_block_means = false});
    const auto b = estimate(sim.data, with, {}, {.sandwich = false, .check_block_means = false});
    for (auto kind : {QTildeKind::constant_one, QTildeKind::delta_alt, QTildeKind::optimal_alt}) {
      QTildeSpec q;
      q.kind = kind;
      q.terms = sc.alt_blip;
      const auto ra = gof_statistic(a, build_qtilde(a, q));
      const auto rb = gof_statistic(b, build_qtilde(b, q));
      identical = identical && ra.statistic == rb.statistic && ra.p_value == rb.p_value && a.psi_hat == b.psi_hat;
    }
  }
  o.check(identical, "GOF^c equals GOF bit-for-bit without censoring events (3 data sets x 3 q-tilde)");
  const auto cens = builtin_scenario("a-censored");
  const double frac = censored_fraction(*generate(cens, 20000, 74).data);
  o.detail << "censored fraction " << fmt(frac) << "; ";
  const auto r = mc(cens, 1000, 500, 7001, kGof);
  level_checks(o, r, "(a) censored n=1000");
  return o;
}

Outcome criterion8() {
  Outcome o;
  const std::vector<std::pair<double, double>> table{{2.93, 0.09}, {0.99, 0.32}, {0.80, 0.37}};
  for (auto [x, p] : table) {
    const double got = chisq_sf(x, 1);
    o.check(std::abs(got - p) <= 0.005, "chisq_sf(" + fmt(x, 2) + ", 1) = " + fmt(got, 4) + " vs " + fmt(p, 2));
  }
  // WLS against the hand-solved normal equations
  Eigen::MatrixXd x(4, 2);
  x << 1, 0, 1, 1, 1, 2, 1, 3;
  const auto w = wls(DesignMatrix(x, Eigen::Vector4d(1, 2, 1, 1)), Eigen::Vector4d(1, 3, 2, 5));
  o.check(std::abs(w.coefficients[0] - 35.0 / 26) < 1e-12 && std::abs(w.coefficients[1] - 27.0 / 26) < 1e-12,
          "WLS hand oracle (35/26, 27/26)");
  // pooled initiation model against the generating coefficients
  const auto sim = generate(builtin_scenario("a"), 50000, 8001);
  const AnalysisFrame frame(sim.data);
  const Design design({"1", "injdrug", "Y", "m"}, sim.data->covariate_names, TermScope::month_only(), "treatment");
  const auto fit = fit_treatment(frame, design);
  const Eigen::Vector4d truth(-2.4, -0.42, -0.0035, -0.026);
  const Eigen::MatrixXd xt = frame.pm_design(design);
  const Eigen::VectorXd rows = frame.pm_visit();
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(4, 4);
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    if (rows[i] == 0) continue;
    const double p = expit(xt.row(i).dot(truth));
    info.noalias() += p * (1 - p) * xt.row(i).transpose() * xt.row(i);
  }
  const Eigen::VectorXd se = info.inverse().diagonal().cwiseSqrt();
  bool ok = true;
  for (int j = 0; j < 4; ++j) ok = ok && std::abs(fit.theta[j] - truth[j]) < 3 * se[j];
  o.check(ok, "logistic initiation model within 3 SE of truth at n=50000");
  return o;
}

Outcome criterion9() {
  Outcome o;
  std::mt19937_64 rng(9001);
  std::normal_distribution<double> z;
  auto random_matrix = [&](int d) {
    Eigen::MatrixXd m(d, d);
    do {
      for (auto& v : m.reshaped()) v = z(rng);
    } while (std::abs(m.determinant()) < 0.1);
    return m;
  };

  double gof_dev = 0, psi_dev = 0;
  for (const char* name : {"c", "e", "a-censored"}) {
    const auto sc = builtin_scenario(name);
    const auto sim = generate(sc, 1000, 9002);
    const auto fit = estimate(sim.data, fitting_model(sc), {}, {.sandwich = false, .check_block_means = false});
    for (auto kind : {QTildeKind::delta_alt, QTildeKind::optimal_alt}) {
      QTildeSpec qs;
      qs.kind = kind;
      qs.terms = sc.alt_blip;
      const auto q = build_qtilde(fit, qs);
      const double base = gof_statistic(fit, q).statistic;
      for (int t = 0; t < 3; ++t) {
        const double s = gof_statistic(fit, transform(q, random_matrix(q.nu()))).statistic;
        gof_dev = std::max(gof_dev, std::abs(s - base) / (1 + base));
      }
    }
    const auto& an = *fit.analysis;
    const Eigen::VectorXd wr = an.w().cwiseProduct(an.r());
    const Eigen::VectorXd cy = an.outcome() - an.outcome_x() * fit.outcome.xi1;
    for (int t = 0; t < 3; ++t) {
      const Eigen::MatrixXd m = random_matrix(static_cast<int>(fit.p()));
      const Eigen::VectorXd psi = solve_linear_psi(psi_system(fit.q * m.transpose(), wr, fit.b_start, cy), an.config(), "psi");
      psi_dev = std::max(psi_dev, ((psi - fit.psi_hat).cwiseAbs().array() / (1 + fit.psi_hat.cwiseAbs().array())).maxCoeff());
    }
  }
  o.check(gof_dev < 1e-7, "GOF invariant under q-tilde transforms (max rel dev " + fmt(gof_dev * 1e9, 3) + "e-9)");
  o.check(psi_dev < 1e-9, "psi invariant under q transforms (max rel dev " + fmt(psi_dev * 1e12, 3) + "e-12)");

  const auto& level = scenario_a_level();
  for (std::size_t j = 0; j < level.methods.size(); ++j) {
    const double p = ks_pvalue(level.p_values[j]);
    o.check(p >= 0.01, "KS uniformity " + to_string(level.methods[j]) + " p " + fmt(p));
  }

  double h_dev = 0;
  for (const char* name : {"a", "c", "d", "e", "f"}) {
    const auto sc = builtin_scenario(name);
    const auto sim = generate(sc, 500, 9003);
    const BlipModel b(sc.true_blip, sim.data->covariate_names);
    const Eigen::VectorXd psi = Eigen::Map<const Eigen::VectorXd>(sc.true_psi.data(), static_cast<Eigen::Index>(sc.true_psi.size()));
    for (std::size_t i = 0; i < sim.data->size(); ++i)
      for (int k = 0; k <= sim.data->grid.horizon; ++k) {
        const double y0 = sim.y_never(static_cast<Eigen::Index>(i), k);
        h_dev = std::max(h_dev, std::abs(blip_down(b, psi, *sim.data, sim.data->records[i], k) - y0) / std::abs(y0));
      }
  }
  o.check(h_dev < 1e-12, "H at the true psi equals Y never-treated (max rel dev " + fmt(h_dev * 1e15, 2) + "e-15)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Outcome (*)()> all{criterion1, criterion2, criterion3, criterion4, criterion5,
                                       criterion6, criterion7, criterion8, criterion9};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  int failed = 0;
  for (int c = 1; c <= 9; ++c) {
    if (!pick.empty() && !pick.count(c)) continue;
    Outcome o;
    try {
      o = all[static_cast<std::size_t>(c - 1)]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "error: " << e.what();
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c << ": " << o.detail.str() << std::endl;
  }
  return failed ? 1 : 0;
}
