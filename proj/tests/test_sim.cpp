#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace snmm;

TEST(Sim, OutcomeNoiseSchedule) {
  const GeneratorParams g;
  EXPECT_DOUBLE_EQ(g.sigma(7), 41.0);
  EXPECT_DOUBLE_EQ(g.sigma(19), 52.375 - 1.625 * 19);
  EXPECT_DOUBLE_EQ(g.sigma(20), 21.5);
  EXPECT_DOUBLE_EQ(g.sigma(30), 21.5);
}

TEST(Sim, GridFromCalendarWindow) {
  const Grid g = GeneratorParams{}.grid();
  EXPECT_EQ(g.horizon, 24);
  EXPECT_EQ(g.lag, 12);
  EXPECT_EQ(g.origin, 6);
}

TEST(Sim, BaselineLogMeanByGroup) {
  const auto sim = generate(builtin_scenario("a"), 40000, 1);
  double s[2] = {0, 0}, s2[2] = {0, 0};
  int c[2] = {0, 0};
  for (Eigen::Index i = 0; i < sim.y_never.rows(); ++i) {
    const int g = sim.idu[static_cast<std::size_t>(i)];
    const double l = std::log(sim.y_never(i, 0));
    s[g] += l;
    s2[g] += l * l;
    ++c[g];
  }
  const double share = c[1] / 40000.0;
  EXPECT_NEAR(share, 0.10, 3 * std::sqrt(0.1 * 0.9 / 40000));
  const double want_mean[2] = {6.6, 6.0}, want_sd[2] = {0.5, 0.4};
  for (int g = 0; g < 2; ++g) {
    const double mean = s[g] / c[g];
    const double sd = std::sqrt(s2[g] / c[g] - mean * mean);
    EXPECT_NEAR(mean, want_mean[g], 3 * want_sd[g] / std::sqrt(c[g])) << g;
    EXPECT_NEAR(sd, want_sd[g], 0.02) << g;
  }
}

TEST(Sim, UntreatedIncrementsHaveDriftAndScale) {
  const auto sim = generate(builtin_scenario("a"), 20000, 2);
  const GeneratorParams g;
  for (int m : {1, 10, 20}) {
    double s = 0, s2 = 0;
    const auto n = sim.y_never.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = sim.y_never(i, m) - sim.y_never(i, m - 1);
      s += d;
      s2 += d * d;
    }
    const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
    const double want = g.sigma(m + 6);
    EXPECT_NEAR(mean, -10.0, 3 * want / std::sqrt(static_cast<double>(n))) << m;
    EXPECT_NEAR(sd / want, 1.0, 0.03) << m;
  }
}

TEST(Sim, NoEffectMeansObservedEqualsCounterfactual) {
  Scenario sc = builtin_scenario("a");
  sc.true_psi = {0, 0};
  const auto sim = generate(sc, 300, 3);
  for (std::size_t i = 0; i < sim.data->size(); ++i)
    for (int k = 0; k <= 24; ++k) EXPECT_EQ(sim.data->records[i].outcome[static_cast<std::size_t>(k)], sim.y_never(static_cast<Eigen::Index>(i), k));
}

TEST(Sim, ObservedOutcomeAddsTrueBlipAfterStart) {
  const auto sc = builtin_scenario("c");
  const auto sim = generate(sc, 300, 4);
  const BlipModel b(sc.true_blip, sim.data->covariate_names);
  const Eigen::VectorXd psi = Eigen::Map<const Eigen::VectorXd>(sc.true_psi.data(), 3);
  for (std::size_t i = 0; i < sim.data->size(); ++i) {
    const auto& r = sim.data->records[i];
    for (int k = 0; k <= 24; ++k) {
      const double y0 = sim.y_never(static_cast<Eigen::Index>(i), k);
      const double want = r.start == kNever || k <= r.start ? y0 : y0 + gamma(b, psi, *sim.data, r, r.start, k);
      EXPECT_DOUBLE_EQ(r.outcome[static_cast<std::size_t>(k)], want);
    }
  }
}

TEST(Sim, InitiationWindowEndsBeforeLastMonth) {
  const auto sim = generate(builtin_scenario("a"), 3000, 5);
  int treated = 0;
  for (const auto& r : sim.data->records) {
    if (r.start == kNever) continue;
    ++treated;
    EXPECT_LE(r.start, 23);
  }
  EXPECT_GT(treated, 300);
  EXPECT_LT(treated, 1500);
}

TEST(Sim, SameSeedSameData) {
  const auto a = generate(builtin_scenario("a-censored"), 200, 77);
  const auto b = generate(builtin_scenario("a-censored"), 200, 77);
  ASSERT_EQ(a.data->size(), b.data->size());
  for (std::size_t i = 0; i < a.data->size(); ++i) EXPECT_EQ(a.data->records[i], b.data->records[i]);
  const auto c = generate(builtin_scenario("a-censored"), 200, 78);
  EXPECT_NE(a.data->records[0].outcome[0], c.data->records[0].outcome[0]);
}

TEST(Sim, CensoringDoesNotDisturbOutcomeStream) {
  const auto plain = generate(builtin_scenario("a"), 300, 9);
  const auto cens = generate(builtin_scenario("a-censored"), 300, 9);
  EXPECT_EQ(plain.y_never, cens.y_never);
  int censored = 0;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto& p = plain.data->records[i];
    const auto& c = cens.data->records[i];
    const int last = c.censored_from ? *c.censored_from : 25;
    censored += c.censored_from.has_value();
    for (int m = 0; m < last; ++m) EXPECT_EQ(p.outcome[static_cast<std::size_t>(m)], c.outcome[static_cast<std::size_t>(m)]);
  }
  EXPECT_GT(censored, 0);
}

TEST(Sim, ZeroHazardLeavesDataUnchanged) {
  Scenario sc = builtin_scenario("a");
  sc.censoring = CensoringHazard{{"1"}, {-1e6}};
  const auto a = generate(builtin_scenario("a"), 200, 10);
  const auto b = generate(sc, 200, 10);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(a.data->records[i], b.data->records[i]);
}

TEST(Sim, ConstantHazardGivesGeometricCensoring) {
  Scenario sc = builtin_scenario("a");
  const double h = 0.02;
  sc.censoring = CensoringHazard{{"1"}, {std::log(h / (1 - h))}};
  const int n = 20000;
  const auto sim = generate(sc, n, 11);
  const double want = 1 - std::pow(1 - h, 24);
  const double got = censored_fraction(*sim.data);
  EXPECT_NEAR(got, want, 3 * std::sqrt(want * (1 - want) / n));
  // the month of censoring is geometric
  int at1 = 0;
  for (const auto& r : sim.data->records) at1 += r.censored_from == 1;
  EXPECT_NEAR(at1 / static_cast<double>(n), h, 3 * std::sqrt(h * (1 - h) / n));
}

TEST(Sim, DefaultCensoringNearFifteenPercent) {
  const auto sim = generate(builtin_scenario("a-censored"), 20000, 12);
  const double f = censored_fraction(*sim.data);
  EXPECT_GT(f, 0.12);
  EXPECT_LT(f, 0.18);
}

TEST(Sim, HeavyCensoringIsFlagged) {
  EXPECT_THROW(add_censoring(builtin_scenario("a"), CensoringHazard{{"1"}, {-1.0}}), ConfigError);
  EXPECT_NO_THROW(add_censoring(builtin_scenario("a"), default_censoring_hazard()));
}

TEST(Sim, ScenarioValidation) {
  Scenario sc = builtin_scenario("a");
  sc.true_psi = {1, 2, 3};
  EXPECT_THROW(sc.validate(), ConfigError);
  sc = builtin_scenario("a");
  sc.gen.init_last_month = 30;
  EXPECT_THROW(sc.validate(), ConfigError);
  EXPECT_THROW(builtin_scenario("zz"), ConfigError);
  EXPECT_THROW(generate(builtin_scenario("a"), 0, 1), ConfigError);
}

TEST(Sim, BuiltinsAllValidate) {
  const auto all = builtin_scenarios();
  EXPECT_EQ(all.size(), 7u);
  for (const auto& s : all) EXPECT_NO_THROW(s.validate()) << s.name;
}

TEST(Sim, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0, 2), derive_seed(1, 1, 2));
  EXPECT_NE(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
  EXPECT_NE(derive_seed(1, 0, 2), derive_seed(2, 0, 2));
  EXPECT_EQ(derive_seed(5, 3, 2), derive_seed(5, 3, 2));
}

TEST(Sim, MonteCarloIsDeterministicAcrossThreadCounts) {
  McOptions opt;
  opt.n = 400;
  opt.reps = 4;
  opt.seed = 21;
  opt.threads = 1;
  const auto a = run_mc(builtin_scenario("a"), opt);
  opt.threads = 3;
  const auto b = run_mc(builtin_scenario("a"), opt);
  EXPECT_EQ(a.failures, 0);
  EXPECT_EQ(a.p_values, b.p_values);
  EXPECT_EQ(a.psi_mean, b.psi_mean);
  EXPECT_EQ(a.coverage, b.coverage);
}

TEST(Sim, ReplicateMatchesDirectFit) {
  McOptions opt;
  opt.n = 400;
  opt.reps = 1;
  opt.seed = 22;
  opt.methods = {Method::gof_one};
  const auto sc = builtin_scenario("a");
  const auto rep = run_replicate(sc, opt, 0);
  ASSERT_TRUE(rep.ok) << rep.error;
  const auto sim = generate(sc, 400, derive_seed(22, 0, 2));
  ModelSpec spec = sc.model;
  spec.censoring.clear();
  const auto fit = estimate(sim.data, spec);
  EXPECT_LT((rep.psi - fit.psi_hat).cwiseAbs().maxCoeff(), 1e-12 * fit.psi_hat.cwiseAbs().maxCoeff());
  EXPECT_LT((rep.se - fit.se).cwiseAbs().maxCoeff(), 1e-9 * fit.se.cwiseAbs().maxCoeff());
}

TEST(Sim, MonteCarloOptionValidation) {
  McOptions opt;
  opt.reps = 0;
  EXPECT_THROW(run_mc(builtin_scenario("a"), opt), ConfigError);
  opt.reps = 1;
  opt.alpha = 1.5;
  EXPECT_THROW(run_mc(builtin_scenario("a"), opt), ConfigError);
  Scenario sc = builtin_scenario("a");
  sc.alt_blip.clear();
  opt.alpha = 0.05;
  EXPECT_THROW(run_mc(sc, opt), ConfigError);
  EXPECT_EQ(parse_method("gof-opt"), Method::gof_opt);
  EXPECT_THROW(parse_method("nope"), ConfigError);
}
