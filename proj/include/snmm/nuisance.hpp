#pragma once

// Nuisance models: treatment initiation p_theta(m), censoring hazard (eta) and
// the IPCW weights built from it, the outcome regression (xi1), the Delta
// regression (xi2) and the lead-pair residual covariance Gamma.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/blip.hpp"
#include "snmm/error.hpp"
#include "snmm/frame.hpp"
#include "snmm/linmodels.hpp"
#include "snmm/terms.hpp"

namespace snmm {

// ---------------------------------------------------------------- treatment

struct TreatmentModel {
  Design design;
  Eigen::VectorXd theta;
  FitResult fit;
  int rows = 0;
  int events = 0;

  /// p_theta(m); zero off the risk set or at a month without a visit.
  double probability(const PanelData& data, const PatientRecord& r, int m) const {
    if (!r.at_risk(m) || r.visit[static_cast<std::size_t>(m)] != 1) return 0.0;
    Eigen::VectorXd x(static_cast<Eigen::Index>(design.size()));
    design.evaluate(data.context(r, m), {x.data(), design.size()});
    return expit(x.dot(theta));
  }
};

/// Per person-month probabilities, zero at months without a visit.
inline Eigen::VectorXd treatment_probabilities(const Eigen::MatrixXd& x, const Eigen::VectorXd& visit,
                                               const Eigen::VectorXd& theta) {
  const Eigen::VectorXd eta = x * theta;
  Eigen::VectorXd p(eta.size());
  for (Eigen::Index j = 0; j < eta.size(); ++j) p[j] = visit[j] > 0 ? expit(eta[j]) : 0.0;
  return p;
}

/// Pooled logistic regression of A_m on the design over at-risk visit months.
inline TreatmentModel fit_treatment(const AnalysisFrame& frame, const Design& design, const Eigen::MatrixXd& x,
                                    const NumericConfig& cfg = {}) {
  TreatmentModel out;
  out.design = design;
  const Eigen::VectorXd visit = frame.pm_visit();
  const Eigen::VectorXd a = frame.pm_treated();
  out.rows = static_cast<int>(visit.sum());
  if (out.rows == 0) throw DataError("treatment model: no at-risk visit months");
  out.events = static_cast<int>(a.sum());
  if (out.events == 0) throw SeparationError("treatment model: nobody initiates treatment (degenerate response)");
  out.fit = logistic_fit(DesignMatrix(x, visit), a, cfg);
  out.theta = out.fit.coefficients;
  return out;
}

inline TreatmentModel fit_treatment(const AnalysisFrame& frame, const Design& design, const NumericConfig& cfg = {}) {
  return fit_treatment(frame, design, frame.pm_design(design), cfg);
}

// ---------------------------------------------------------------- censoring

struct CensoringModel {
  std::optional<Design> design;  // empty: no censoring model requested
  Eigen::VectorXd eta;
  FitResult fit;
  bool degenerate = true;  // no censoring events: hazard 0, weights 1
  double cap = 50.0;
  int rows = 0;
  int events = 0;

  /// P(C_p = 1 | history through p - 1).
  double hazard(const PanelData& data, const PatientRecord& r, int p) const {
    if (degenerate) return 0.0;
    Eigen::VectorXd x(static_cast<Eigen::Index>(design->size()));
    design->evaluate(data.context(r, p - 1), {x.data(), design->size()});
    return expit(x.dot(eta));
  }
};

inline CensoringModel fit_censoring(const AnalysisFrame& frame, const std::optional<Design>& design,
                                    const Eigen::MatrixXd& x, const NumericConfig& cfg = {}) {
  CensoringModel out;
  out.design = design;
  out.cap = cfg.ipcw_cap;
  out.rows = static_cast<int>(frame.censor_rows().size());
  out.events = frame.censor_events();
  if (out.events == 0) return out;
  if (!design)
    throw ConfigError("data contain censored patients but no censoring design was given");
  out.fit = logistic_fit(DesignMatrix(x), frame.censor_response(), cfg);
  out.eta = out.fit.coefficients;
  out.degenerate = false;
  return out;
}

inline CensoringModel fit_censoring(const AnalysisFrame& frame, const std::optional<Design>& design,
                                    const NumericConfig& cfg = {}) {
  if (!design || frame.censor_events() == 0) return fit_censoring(frame, design, Eigen::MatrixXd(), cfg);
  return fit_censoring(frame, design, frame.censor_design(*design), cfg);
}

/// W_m^k = prod_{p=m+1}^{k} 1 / (1 - h_p), truncated at the cap.
inline double ipcw_weight(const CensoringModel& model, const PanelData& data, const PatientRecord& r, int m,
                          int k) {
  if (!r.observed_through(k))
    throw DataError("patient '" + r.id + "' is censored before month " + std::to_string(k));
  if (model.degenerate) return 1.0;
  double w = 1.0;
  for (int p = m + 1; p <= k; ++p) w /= 1.0 - model.hazard(data, r, p);
  return std::min(w, model.cap);
}

/// Cell weights from censoring-row hazards; zero on unobserved cells.
/// Cumulative sums of -log(1 - h) per patient keep this linear in the rows.
inline Eigen::VectorXd cell_weights(const AnalysisFrame& frame, const Eigen::VectorXd& hazard, double cap) {
  const auto& cells = frame.cells();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cells.size()));
  const bool trivial = hazard.size() == 0;
  std::vector<double> cum;
  for (int i = 0; i < frame.n_patients(); ++i) {
    if (!trivial) {
      const int b = frame.cen_begin(i), e = frame.cen_end(i);
      cum.assign(static_cast<std::size_t>(e - b) + 1, 0.0);
      for (int j = b; j < e; ++j)
        cum[static_cast<std::size_t>(j - b) + 1] = cum[static_cast<std::size_t>(j - b)] - std::log1p(-hazard[j]);
    }
    for (int c = frame.cell_begin(i); c < frame.cell_end(i); ++c) {
      const auto& cell = cells[static_cast<std::size_t>(c)];
      if (!cell.observed) continue;
      // censoring row p sits at offset p - 1 within the patient's block
      w[c] = trivial ? 1.0
                     : std::min(cap, std::exp(cum[static_cast<std::size_t>(cell.k)] - cum[static_cast<std::size_t>(cell.m)]));
    }
  }
  return w;
}

inline Eigen::VectorXd censoring_hazards(const Eigen::MatrixXd& x, const Eigen::VectorXd& eta) {
  const Eigen::VectorXd lin = x * eta;
  Eigen::VectorXd h(lin.size());
  for (Eigen::Index j = 0; j < lin.size(); ++j) h[j] = expit(lin[j]);
  return h;
}

// ---------------------------------------------------------------- outcome regression

/// Weighted regression of H_psi(k) = Y - B psi on the xi1 design. Because H is
/// linear in psi, Y and the columns of B are regressed once and
/// xi1(psi) = xi_y - xi_b psi.
struct OutcomeRegression {
  Design design;
  Eigen::VectorXd xi_y;
  Eigen::MatrixXd xi_b;
  Eigen::VectorXd psi_p;
  Eigen::VectorXd xi1;  // at psi_p

  Eigen::VectorXd coefficients_at(const Eigen::VectorXd& psi) const { return xi_y - xi_b * psi; }

  double predict(const PanelData& data, const PatientRecord& r, int m, int k) const {
    Eigen::VectorXd x(static_cast<Eigen::Index>(design.size()));
    design.evaluate(data.context(r, m, k), {x.data(), design.size()});
    return x.dot(xi1);
  }
};

inline OutcomeRegression fit_outcome_parts(const Design& design, const WlsSolver& x1, const Eigen::VectorXd& y,
                                           const Eigen::MatrixXd& b, const NumericConfig& cfg = {}) {
  OutcomeRegression out;
  out.design = design;
  Eigen::MatrixXd rhs(y.size(), 1 + b.cols());
  rhs << y, b;
  double score = 0.0;
  const Eigen::MatrixXd coef = x1.solve(rhs, &score);
  if (!(score <= cfg.wls_score_tol)) throw NumericError("outcome regression: weighted score did not vanish");
  out.xi_y = coef.col(0);
  out.xi_b = coef.rightCols(b.cols());
  return out;
}

inline OutcomeRegression fit_outcome_regression(const AnalysisFrame& frame, const BlipModel& blip,
                                                const Eigen::VectorXd& psi_p, const Design& design,
                                                const Eigen::VectorXd& w, const NumericConfig& cfg = {}) {
  check_dimension(blip, psi_p);
  const WlsSolver x1(DesignMatrix(frame.cell_design(design), w), cfg);
  auto out = fit_outcome_parts(design, x1, frame.cell_outcome(), frame.blip_at_start(blip), cfg);
  out.psi_p = psi_p;
  out.xi1 = out.coefficients_at(psi_p);
  return out;
}

// ---------------------------------------------------------------- Delta regression

/// Per blip component: WLS of dH/dpsi_j = -b_j(T, k) 1(T < k) on the xi2
/// design; Delta_m^k = -b(m, k, L_m) - prediction.
struct DeltaRegression {
  Design design;
  Eigen::MatrixXd xi2;  // design size x p

  Eigen::VectorXd delta(const BlipModel& blip, const PanelData& data, const PatientRecord& r, int m, int k) const {
    Eigen::VectorXd x(static_cast<Eigen::Index>(design.size()));
    const auto ctx = data.context(r, m, k);
    design.evaluate(ctx, {x.data(), design.size()});
    return -blip.basis(ctx) - xi2.transpose() * x;
  }
};

inline DeltaRegression fit_delta_parts(const Design& design, const WlsSolver& x2, const Eigen::MatrixXd& b_start,
                                       const NumericConfig& cfg = {}) {
  DeltaRegression out;
  out.design = design;
  double score = 0.0;
  out.xi2 = x2.solve(-b_start, &score);
  if (!(score <= cfg.wls_score_tol)) throw NumericError("Delta regression: weighted score did not vanish");
  return out;
}

/// Delta on every cell given the fitted regression.
inline Eigen::MatrixXd delta_cells(const Eigen::MatrixXd& b_month, const Eigen::MatrixXd& x2,
                                   const Eigen::MatrixXd& xi2) {
  return -b_month - x2 * xi2;
}

inline DeltaRegression fit_delta_regression(const AnalysisFrame& frame, const BlipModel& blip, const Design& design,
                                            const Eigen::VectorXd& w, const NumericConfig& cfg = {}) {
  const WlsSolver x2(DesignMatrix(frame.cell_design(design), w), cfg);
  return fit_delta_parts(design, x2, frame.blip_at_start(blip), cfg);
}

// ---------------------------------------------------------------- residual covariance

/// `lead`: one matrix over lead pairs pooled across start months.
/// `month`: a separate window matrix per start month m from the residuals of
/// the risk set at m, falling back to the pooled matrix for small risk sets.
enum class GammaStructure { lead, month };

inline std::string to_string(GammaStructure g) { return g == GammaStructure::lead ? "lead" : "month"; }

inline GammaStructure parse_gamma_structure(const std::string& s) {
  if (s == "lead") return GammaStructure::lead;
  if (s == "month") return GammaStructure::month;
  throw ConfigError("unknown gamma structure '" + s + "' (lead, month)");
}

struct CovarianceModel {
  Eigen::MatrixXd gamma;  // lag x lag, entry (a-1, b-1) for leads a, b
  Eigen::MatrixXi pairs;  // residual pairs behind each entry
  bool diagonal_fallback = false;
  int floored = 0;
  GammaStructure structure = GammaStructure::lead;
  std::vector<Eigen::MatrixXd> by_month;  // month structure; empty entry: pooled fallback
  int pooled_months = 0;                  // start months that fell back to the pooled matrix

  /// Submatrix for leads first..last, floored again so every window is PD.
  Eigen::MatrixXd window(int first_lead, int last_lead, double floor_rel) const {
    const int w = last_lead - first_lead + 1;
    Eigen::MatrixXd g = gamma.block(first_lead - 1, first_lead - 1, w, w);
    floor_psd(g, floor_rel);
    return g;
  }

  /// Window used for start month m.
  Eigen::MatrixXd window_at(int m, int first_lead, int last_lead, double floor_rel) const {
    if (static_cast<std::size_t>(m) < by_month.size() && by_month[static_cast<std::size_t>(m)].size() > 0)
      return by_month[static_cast<std::size_t>(m)];
    return window(first_lead, last_lead, floor_rel);
  }
};

/// Gamma(a, b) pools products of residual pairs sharing (patient, m) over m,
/// weighted by the IPCW weight of the later month.
inline CovarianceModel estimate_gamma_cov(const AnalysisFrame& frame, const Eigen::VectorXd& resid,
                                          const Eigen::VectorXd& w, const NumericConfig& cfg = {}) {
  const int lag = frame.grid().lag;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(lag, lag), wsum = Eigen::MatrixXd::Zero(lag, lag);
  Eigen::MatrixXi count = Eigen::MatrixXi::Zero(lag, lag);
  Eigen::MatrixXi used = Eigen::MatrixXi::Zero(lag, lag);  // lead pairs sharing some window
  const auto& cells = frame.cells();
  for (const auto& pm : frame.person_months()) {
    for (int c = pm.cell_begin; c < pm.cell_end; ++c) {
      const int a = cells[static_cast<std::size_t>(c)].k - pm.month - 1;
      for (int d = c; d < pm.cell_end; ++d) {
        const int b = cells[static_cast<std::size_t>(d)].k - pm.month - 1;
        used(a, b) = 1;
        const double wl = w[d];  // later cell; zero when either is unobserved
        if (wl <= 0.0) continue;
        sum(a, b) += wl * resid[c] * resid[d];
        wsum(a, b) += wl;
        count(a, b) += 1;
      }
    }
  }
  CovarianceModel out;
  out.gamma = Eigen::MatrixXd::Zero(lag, lag);
  out.pairs = Eigen::MatrixXi::Zero(lag, lag);
  for (int a = 0; a < lag; ++a) {
    for (int b = a; b < lag; ++b) {
      out.pairs(a, b) = out.pairs(b, a) = count(a, b);
      if (used(a, b) && count(a, b) < 2) out.diagonal_fallback = true;
      if (count(a, b) > 0) out.gamma(a, b) = out.gamma(b, a) = sum(a, b) / wsum(a, b);
    }
  }
  if (out.diagonal_fallback) {
    for (int a = 0; a < lag; ++a)
      if (used(a, a) && count(a, a) < 2) throw NumericError("residual covariance: fewer than 2 residuals at lead " +
                                                            std::to_string(a + 1));
    out.gamma = Eigen::MatrixXd(out.gamma.diagonal().asDiagonal());
  }
  // leads that never share a window get no cross term
  for (int a = 0; a < lag; ++a)
    for (int b = 0; b < lag; ++b)
      if (a != b && !used(std::min(a, b), std::max(a, b))) out.gamma(a, b) = 0.0;
  out.floored = floor_psd(out.gamma, cfg.eigen_floor);
  return out;
}

/// Per-start-month covariance: weighted products of residual pairs from the
/// person-months at m. A month needs min_rows person-months with every cell
/// observed (and at least 3 per window lead), otherwise it uses the pooled matrix.
inline CovarianceModel estimate_gamma_by_month(const AnalysisFrame& frame, const Eigen::VectorXd& resid,
                                               const Eigen::VectorXd& w, const NumericConfig& cfg = {},
                                               int min_rows = 50) {
  CovarianceModel out = estimate_gamma_cov(frame, resid, w, cfg);
  out.structure = GammaStructure::month;
  const int months = frame.grid().last_start() + 1;
  std::vector<Eigen::MatrixXd> sum(static_cast<std::size_t>(months)), wsum(static_cast<std::size_t>(months));
  std::vector<int> rows(static_cast<std::size_t>(months), 0);
  for (int m = 0; m < months; ++m) {
    const int len = frame.window_last(m) - frame.window_first(m) + 1;
    sum[static_cast<std::size_t>(m)] = Eigen::MatrixXd::Zero(len, len);
    wsum[static_cast<std::size_t>(m)] = Eigen::MatrixXd::Zero(len, len);
  }
  const auto& cells = frame.cells();
  for (const auto& pm : frame.person_months()) {
    auto& s = sum[static_cast<std::size_t>(pm.month)];
    auto& ws = wsum[static_cast<std::size_t>(pm.month)];
    bool complete = true;
    for (int c = pm.cell_begin; c < pm.cell_end; ++c) {
      if (!cells[static_cast<std::size_t>(c)].observed) complete = false;
      for (int d = c; d < pm.cell_end; ++d) {
        const double wl = w[d];
        if (wl <= 0.0) continue;
        const int a = c - pm.cell_begin, b = d - pm.cell_begin;
        s(a, b) += wl * resid[c] * resid[d];
        ws(a, b) += wl;
      }
    }
    if (complete) ++rows[static_cast<std::size_t>(pm.month)];
  }
  out.by_month.assign(static_cast<std::size_t>(months), Eigen::MatrixXd());
  for (int m = 0; m < months; ++m) {
    const auto i = static_cast<std::size_t>(m);
    const int len = static_cast<int>(sum[i].rows());
    if (len == 0 || rows[i] < std::max(min_rows, 3 * len)) {
      ++out.pooled_months;
      continue;
    }
    Eigen::MatrixXd g(len, len);
    for (int a = 0; a < len; ++a)
      for (int b = a; b < len; ++b) g(a, b) = g(b, a) = sum[i](a, b) / wsum[i](a, b);
    out.floored += floor_psd(g, cfg.eigen_floor);
    out.by_month[i] = std::move(g);
  }
  return out;
}

}  // namespace snmm
