#pragma once

// JSON and text renderings of fits, GOF tests and Monte Carlo studies.
// Numbers in text tables always carry a decimal point.

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "snmm/estimator.hpp"
#include "snmm/gof.hpp"
#include "snmm/sim.hpp"

namespace snmm {

namespace detail {

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::json to_rows(const Eigen::MatrixXd& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(to_vec(m.row(i).transpose()));
  return out;
}

// non-finite values become null rather than invalid JSON
inline nlohmann::json num(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline std::string fixed(double x, int digits) {
  if (!std::isfinite(x)) return "NA";
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << x;
  return s.str();
}

/// The first `left` columns are left-aligned, the rest right-aligned.
inline void print_table(std::ostream& out, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows, std::size_t left = 1) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t j = 0; j < header.size(); ++j) width[j] = header[j].size();
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size() && j < width.size(); ++j) width[j] = std::max(width[j], r[j].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j) out << "  ";
      if (j < left)
        out << std::left << std::setw(static_cast<int>(width[j])) << r[j];
      else
        out << std::right << std::setw(static_cast<int>(width[j])) << r[j];
    }
    out << std::left << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
}

}  // namespace detail

inline nlohmann::json to_json(const Diagnostics& d) {
  nlohmann::json blocks = nlohmann::json::object();
  for (const auto& [name, v] : d.block_means) blocks[name] = detail::num(v);
  return {{"psi_system_condition", detail::num(d.psi_system_condition)},
          {"preliminary_condition", detail::num(d.preliminary_condition)},
          {"preliminary_all_cells", d.preliminary_all_cells},
          {"gamma_condition", detail::num(d.gamma_condition)},
          {"gamma_floored", d.gamma_floored},
          {"gamma_diagonal_fallback", d.gamma_diagonal_fallback},
          {"gamma_pooled_months", d.gamma_pooled_months},
          {"jacobian_condition", detail::num(d.jacobian_condition)},
          {"max_weight", detail::num(d.max_weight)},
          {"capped_weights", d.capped_weights},
          {"treatment_iterations", d.treatment_iterations},
          {"censoring_iterations", d.censoring_iterations},
          {"risk_set_sizes", d.risk_set_sizes},
          {"block_means", blocks}};
}

inline nlohmann::json to_json(const EstimationResult& fit) {
  const auto& an = *fit.analysis;
  nlohmann::json j;
  j["n"] = fit.n();
  j["psi_names"] = fit.blip.names();
  j["psi"] = detail::to_vec(fit.psi_hat);
  j["psi_preliminary"] = detail::to_vec(fit.psi_p);
  if (fit.has_sandwich) {
    j["se"] = detail::to_vec(fit.se);
    j["ci_lower"] = detail::to_vec(fit.ci_lower);
    j["ci_upper"] = detail::to_vec(fit.ci_upper);
    j["sigma"] = detail::to_rows(fit.sigma);
  }
  j["treatment"] = {{"terms", an.treatment_design().sources()}, {"theta", detail::to_vec(an.treatment().theta)}};
  j["censoring"] = {{"active", an.censoring_active()},
                    {"terms", an.censoring_design() ? an.censoring_design()->sources() : std::vector<std::string>{}},
                    {"eta", detail::to_vec(an.censoring().eta)},
                    {"events", an.frame().censor_events()}};
  j["outcome"] = {{"terms", an.outcome_design().sources()}, {"xi1", detail::to_vec(fit.outcome.xi1)}};
  j["delta"] = {{"terms", an.delta_design().sources()}, {"xi2", detail::to_rows(fit.delta_regression.xi2)}};
  j["gamma"] = {{"structure", to_string(fit.covariance.structure)}, {"lead_matrix", detail::to_rows(fit.covariance.gamma)}};
  j["diagnostics"] = to_json(fit.diagnostics);
  return j;
}

inline nlohmann::json to_json(const GofReport& r) {
  return {{"label", r.label},
          {"kind", r.kind},
          {"components", r.components},
          {"statistic", detail::num(r.statistic)},
          {"df", r.df},
          {"p_value", detail::num(r.p_value)},
          {"sigma_condition", detail::num(r.sigma_condition)},
          {"censoring_adjusted", r.censoring_adjusted}};
}

inline nlohmann::json to_json(const McResult& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (std::size_t j = 0; j < r.methods.size(); ++j)
    methods.push_back({{"method", to_string(r.methods[j])},
                       {"rejections", r.rejections[j]},
                       {"rate", detail::num(r.rate(j))},
                       {"mc_se", detail::num(r.mc_se(j))}});
  nlohmann::json psi;
  psi["names"] = r.psi_names;
  psi["mean"] = nlohmann::json::array();
  psi["sd"] = nlohmann::json::array();
  psi["mc_se"] = nlohmann::json::array();
  psi["coverage"] = nlohmann::json::array();
  for (Eigen::Index j = 0; j < r.psi_mean.size(); ++j) {
    psi["mean"].push_back(detail::num(r.psi_mean[j]));
    psi["sd"].push_back(detail::num(r.psi_sd[j]));
    psi["mc_se"].push_back(detail::num(r.psi_mc_se(j)));
    psi["coverage"].push_back(detail::num(r.coverage.size() ? r.coverage[j] : kNaN));
  }
  psi["true"] = r.psi_comparable ? nlohmann::json(detail::to_vec(r.true_psi)) : nlohmann::json(nullptr);
  return {{"scenario", r.scenario}, {"n", r.n},        {"reps", r.reps},           {"failures", r.failures},
          {"alpha", r.alpha},       {"seed", r.seed},  {"methods", methods},       {"psi", psi},
          {"failure_messages", r.failure_messages}};
}

/// Estimates with 95% confidence intervals.
inline void print_fit(std::ostream& out, const EstimationResult& fit) {
  out << "Optimal estimator, n = " << fit.n() << (fit.analysis->censoring_active() ? " (IPCW)" : "") << "\n";
  std::vector<std::vector<std::string>> rows;
  const auto names = fit.blip.names();
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    std::vector<std::string> r{"psi" + std::to_string(j + 1) + "  " + names[j], detail::fixed(fit.psi_hat[i], 4)};
    if (fit.has_sandwich) {
      r.push_back(detail::fixed(fit.se[i], 4));
      r.push_back("(" + detail::fixed(fit.ci_lower[i], 3) + ", " + detail::fixed(fit.ci_upper[i], 3) + ")");
    }
    rows.push_back(r);
  }
  if (fit.has_sandwich)
    detail::print_table(out, {"Parameter", "Estimate", "SE", "95% CI"}, rows);
  else
    detail::print_table(out, {"Parameter", "Estimate"}, rows);
}

/// Statistic, DF, p-value per test direction.
inline void print_gof(std::ostream& out, const std::vector<GofReport>& reports) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::string comps;
    for (const auto& c : r.components) comps += (comps.empty() ? "" : ", ") + c;
    rows.push_back({r.label, comps, detail::fixed(r.statistic, 2), std::to_string(r.df), detail::fixed(r.p_value, 2)});
  }
  detail::print_table(out, {"Test", "Direction", "Statistic", "DF", "p-value"}, rows, 2);
}

/// Rejection percentages: one row per sample size, one column per method.
inline void print_mc(std::ostream& out, const std::vector<McResult>& results) {
  if (results.empty()) return;
  const auto& first = results.front();
  out << "Scenario " << first.scenario << ": rejection rate (x100) at alpha = " << detail::fixed(first.alpha, 3)
      << ", " << first.reps << " replicates\n";
  std::vector<std::string> header{"n"};
  for (Method m : first.methods) header.push_back(to_string(m));
  header.push_back("failures");
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : results) {
    std::vector<std::string> row{std::to_string(r.n)};
    for (std::size_t j = 0; j < r.methods.size(); ++j) row.push_back(detail::fixed(100 * r.rate(j), 1));
    row.push_back(std::to_string(r.failures));
    rows.push_back(row);
  }
  detail::print_table(out, header, rows);
  out << "MC standard error of a rate p is sqrt(p(1 - p)/reps).\n";
  for (const auto& r : results) {
    out << "n = " << r.n << ": mean psi_hat";
    for (Eigen::Index j = 0; j < r.psi_mean.size(); ++j) out << " " << detail::fixed(r.psi_mean[j], 4);
    out << "  (sd";
    for (Eigen::Index j = 0; j < r.psi_sd.size(); ++j) out << " " << detail::fixed(r.psi_sd[j], 4);
    out << ")";
    if (r.psi_comparable && r.coverage.size()) {
      out << "  CI coverage";
      for (Eigen::Index j = 0; j < r.coverage.size(); ++j) out << " " << detail::fixed(r.coverage[j], 3);
    }
    out << "\n";
  }
}

/// CSV version of print_mc.
inline void write_mc_csv(std::ostream& out, const std::vector<McResult>& results) {
  out << "scenario,n,reps,failures,method,rejections,rate,mc_se\n";
  for (const auto& r : results)
    for (std::size_t j = 0; j < r.methods.size(); ++j)
      out << r.scenario << ',' << r.n << ',' << r.reps << ',' << r.failures << ',' << to_string(r.methods[j]) << ','
          << r.rejections[j] << ',' << std::setprecision(17) << r.rate(j) << ',' << r.mc_se(j) << '\n';
}

inline void write_gof_csv(std::ostream& out, const std::vector<GofReport>& reports) {
  out << "label,kind,components,statistic,df,p_value\n";
  for (const auto& r : reports) {
    std::string comps;
    for (const auto& c : r.components) comps += (comps.empty() ? "" : ";") + c;
    out << r.label << ',' << r.kind << ",\"" << comps << "\"," << std::setprecision(17) << r.statistic << ',' << r.df
        << ',' << r.p_value << '\n';
  }
}

inline void write_fit_csv(std::ostream& out, const EstimationResult& fit) {
  out << "parameter,term,estimate,se,ci_lower,ci_upper\n";
  const auto names = fit.blip.names();
  out << std::setprecision(17);
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    out << "psi" << j + 1 << ',' << names[j] << ',' << fit.psi_hat[i];
    if (fit.has_sandwich)
      out << ',' << fit.se[i] << ',' << fit.ci_lower[i] << ',' << fit.ci_upper[i];
    else
      out << ",,,";
    out << '\n';
  }
}

}  // namespace snmm
