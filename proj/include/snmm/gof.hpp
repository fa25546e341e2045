#pragma once

// Overidentification goodness-of-fit test. Extra moment conditions
// P_n G-tilde = 0, with G-tilde built like G* but with a fixed q-tilde, are
// checked at the fitted parameters:
//   GOF = n gbar^T Sigma^-1 gbar,  Phi_i = G-tilde_i - B_n A_n^-1 U_i,
// with Sigma the sample covariance of Phi. Under censoring the same code runs
// with IPCW weights and the J_cen block, which gives GOF^c.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/blip.hpp"
#include "snmm/error.hpp"
#include "snmm/estimator.hpp"
#include "snmm/linmodels.hpp"
#include "snmm/nuisance.hpp"

namespace snmm {

enum class QTildeKind { constant_one, delta_alt, optimal_alt, custom };

inline std::string to_string(QTildeKind k) {
  switch (k) {
    case QTildeKind::constant_one: return "constant-one";
    case QTildeKind::delta_alt: return "delta-alt";
    case QTildeKind::optimal_alt: return "optimal-alt";
    case QTildeKind::custom: return "custom";
  }
  return "?";
}

inline QTildeKind parse_qtilde_kind(const std::string& s) {
  if (s == "constant-one" || s == "one" || s == "1") return QTildeKind::constant_one;
  if (s == "delta-alt" || s == "delta") return QTildeKind::delta_alt;
  if (s == "optimal-alt" || s == "opt" || s == "optimal") return QTildeKind::optimal_alt;
  if (s == "custom") return QTildeKind::custom;
  throw ConfigError("unknown q-tilde kind '" + s + "' (constant-one, delta-alt, optimal-alt, custom)");
}

struct QTildeSpec {
  QTildeKind kind = QTildeKind::optimal_alt;
  std::vector<std::string> terms;  // alternative blip basis, or custom q-tilde terms
  std::string label;
};

struct QTilde {
  QTildeSpec spec;
  Eigen::MatrixXd values;  // cells x nu
  std::vector<std::string> components;
  std::vector<std::string> dropped;  // alternative terms already in the null blip

  int nu() const { return static_cast<int>(values.cols()); }
};

struct GofReport {
  std::string label;
  std::string kind;
  std::vector<std::string> components;
  double statistic = 0;
  int df = 0;
  double p_value = 1;
  double sigma_condition = 0;
  bool censoring_adjusted = false;
  bool reject(double alpha) const { return p_value < alpha; }
};

/// Alternative basis terms absent from the null blip (canonical comparison).
inline std::vector<std::string> extra_terms(const BlipModel& null, const std::vector<std::string>& alternative,
                                            const std::vector<std::string>& covariates,
                                            std::vector<std::string>* dropped = nullptr) {
  const BlipModel alt(alternative, covariates);
  std::vector<std::string> out;
  for (const auto& t : alt.design().terms()) {
    if (null.contains(t.text())) {
      if (dropped) dropped->push_back(t.source());
    } else {
      out.push_back(t.source());
    }
  }
  return out;
}

/// Delta-tilde for the extra components of an alternative, with the null fit's
/// xi2 design and weights.
inline Eigen::MatrixXd alternative_delta(const EstimationResult& fit, const BlipModel& extra) {
  const auto& an = *fit.analysis;
  const Eigen::MatrixXd bs = an.frame().blip_at_start(extra);
  const Eigen::MatrixXd bm = an.frame().blip_at_month(extra);
  const DeltaRegression reg = fit_delta_parts(an.delta_design(), an.delta_solver(), bs, an.config());
  return delta_cells(bm, an.delta_x(), reg.xi2);
}

inline QTilde build_qtilde(const EstimationResult& fit, const QTildeSpec& spec) {
  const auto& an = *fit.analysis;
  const auto& cov = an.data().covariate_names;
  QTilde out;
  out.spec = spec;
  switch (spec.kind) {
    case QTildeKind::constant_one:
      out.values = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(an.frame().cells().size()), 1);
      out.components = {"1"};
      break;
    case QTildeKind::delta_alt:
    case QTildeKind::optimal_alt: {
      if (spec.terms.empty()) throw ConfigError("q-tilde " + to_string(spec.kind) + " needs an alternative blip");
      out.components = extra_terms(fit.blip, spec.terms, cov, &out.dropped);
      if (out.components.empty())
        throw ConfigError("alternative blip adds nothing to the null model; no test direction remains");
      const BlipModel extra(out.components, cov);
      const Eigen::MatrixXd d = alternative_delta(fit, extra);
      out.values = spec.kind == QTildeKind::delta_alt ? d : apply_windows(an.frame(), fit.gamma_inverse, d);
      break;
    }
    case QTildeKind::custom: {
      if (spec.terms.empty()) throw ConfigError("custom q-tilde needs at least one term");
      const Design design(spec.terms, cov, TermScope::with_outcome_month(), "q-tilde");
      out.values = an.frame().cell_design(design);
      out.components = design.sources();
      break;
    }
  }
  if (!out.values.allFinite()) throw NumericError("q-tilde has non-finite values");
  return out;
}

/// Several GOF statistics from one joint linearization.
inline std::vector<GofReport> gof_statistics(const EstimationResult& fit, const std::vector<QTilde>& qts,
                                             Linearization* keep = nullptr) {
  if (qts.empty()) return {};
  std::vector<Eigen::MatrixXd> extras;
  for (const auto& q : qts) extras.push_back(q.values);
  Linearization lin = linearize(fit, extras);
  const double n = static_cast<double>(fit.n());
  // Phi = G-tilde - U A^-T B^T
  const Eigen::MatrixXd phi = lin.g - lin.u * lin.jac_u_inv.transpose() * lin.jac_g.transpose();
  std::vector<GofReport> out;
  int off = 0;
  for (const auto& q : qts) {
    const int nu = q.nu();
    const Eigen::MatrixXd ph = phi.middleCols(off, nu);
    const Eigen::VectorXd gbar = lin.g.middleCols(off, nu).colwise().mean().transpose();
    const Eigen::RowVectorXd mu = ph.colwise().mean();
    const Eigen::MatrixXd centered = ph.rowwise() - mu;
    Eigen::MatrixXd sigma = centered.transpose() * centered / n;
    sigma = 0.5 * (sigma + sigma.transpose()).eval();
    GofReport r;
    r.label = q.spec.label.empty() ? to_string(q.spec.kind) : q.spec.label;
    r.kind = to_string(q.spec.kind);
    r.components = q.components;
    r.df = nu;
    r.sigma_condition = condition_number(sigma);
    r.censoring_adjusted = fit.analysis->censoring_active();
    Eigen::VectorXd x;
    try {
      x = solve(sigma, gbar, fit.analysis->config().pivot_tol);
    } catch (const SingularMatrixError&) {
      throw NumericError("GOF variance matrix is singular (condition number " + std::to_string(r.sigma_condition) +
                         "); refusing to pseudo-invert");
    }
    r.statistic = std::max(0.0, n * gbar.dot(x));
    r.p_value = chisq_sf(r.statistic, r.df);
    out.push_back(r);
    off += nu;
  }
  if (keep) *keep = std::move(lin);
  return out;
}

inline GofReport gof_statistic(const EstimationResult& fit, const QTilde& q) { return gof_statistics(fit, {q}).front(); }

/// q-tilde with every row mapped through a fixed nu x nu matrix.
inline QTilde transform(const QTilde& q, const Eigen::MatrixXd& m) {
  if (m.rows() != q.nu() || m.cols() != q.nu()) throw ConfigError("transform: matrix must be nu x nu");
  QTilde out = q;
  out.values = q.values * m.transpose();
  return out;
}

/// Elaborated-model fit and Wald test of the extra coefficients.
struct EmftResult {
  GofReport report;
  EstimationResult combined;
};

inline EmftResult emft_test(std::shared_ptr<const Analysis> an, const BlipModel& null,
                            const std::vector<std::string>& alternative) {
  const auto& cov = an->data().covariate_names;
  const auto extra = extra_terms(null, alternative, cov);
  if (extra.empty()) throw ConfigError("EMFT: alternative blip adds nothing to the null model");
  std::vector<std::string> basis = null.names();
  basis.insert(basis.end(), extra.begin(), extra.end());
  EmftResult out;
  out.combined = estimate(an, BlipModel(basis, cov), {.sandwich = true, .check_block_means = false});
  const int p0 = static_cast<int>(null.dimension()), e = static_cast<int>(extra.size());
  const Eigen::VectorXd est = out.combined.psi_hat.segment(p0, e);
  const Eigen::MatrixXd v = out.combined.sigma.block(p0, p0, e, e);
  auto& r = out.report;
  r.label = "emft";
  r.kind = "emft";
  r.components = extra;
  r.df = e;
  r.sigma_condition = condition_number(v);
  r.censoring_adjusted = an->censoring_active();
  Eigen::VectorXd x;
  try {
    x = solve(v, est, an->config().pivot_tol);
  } catch (const SingularMatrixError&) {
    throw NumericError("EMFT: covariance of the extra coefficients is singular");
  }
  r.statistic = std::max(0.0, static_cast<double>(an->n()) * est.dot(x));
  r.p_value = chisq_sf(r.statistic, r.df);
  return out;
}

}  // namespace snmm
