#pragma once

// Optimal doubly robust estimation of a linear blip model.
//
// Pipeline on one dataset:
//   theta (treatment initiation) and eta (censoring) from pooled logistic fits,
//   IPCW cell weights W, the Delta regression (xi2), the preliminary psi_p
//   jointly with xi1, the lead-pair covariance Gamma, q_opt = Gamma^-1 Delta,
//   and psi_hat from one p x p solve.
// The stacked estimating function per patient is
//   U = (G*, G_p, J1, J_trt, J_cen)  in parameters  (psi, psi_p, xi1, theta, eta)
// and the sandwich A^-1 B A^-T gives the covariance of sqrt(n)(psi_hat - psi).
// xi2, Gamma and hence q_opt enter only through q, are held fixed in U, and are
// not part of the parameter vector: G* is unbiased for any fixed q.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "snmm/blip.hpp"
#include "snmm/error.hpp"
#include "snmm/frame.hpp"
#include "snmm/linmodels.hpp"
#include "snmm/nuisance.hpp"
#include "snmm/panel.hpp"
#include "snmm/terms.hpp"

namespace snmm {

struct ModelSpec {
  std::vector<std::string> blip = default_blip_basis();
  std::vector<std::string> treatment;
  std::vector<std::string> censoring;  // empty: no censoring model
  std::vector<std::string> outcome;    // xi1 design
  std::vector<std::string> delta;      // xi2 design
  GammaStructure gamma = GammaStructure::lead;

  void validate() const {
    if (blip.empty()) throw ConfigError("model: blip basis is empty");
    if (treatment.empty()) throw ConfigError("model: treatment design is empty");
    if (outcome.empty()) throw ConfigError("model: outcome (xi1) design is empty");
    if (delta.empty()) throw ConfigError("model: delta (xi2) design is empty");
  }
};

/// Dataset-level state shared by every blip model fitted to the same data:
/// the pooled frame, nuisance design matrices, and the treatment and
/// censoring fits (neither depends on the blip).
class Analysis {
 public:
  Analysis(std::shared_ptr<const PanelData> data, const ModelSpec& spec, const NumericConfig& cfg = {})
      : cfg_(cfg), frame_(std::move(data)) {
    spec.validate();
    gamma_ = spec.gamma;
    const auto& cov = frame_.data().covariate_names;
    treatment_design_ = Design(spec.treatment, cov, TermScope::month_only(), "treatment design");
    if (!spec.censoring.empty())
      censoring_design_ = Design(spec.censoring, cov, TermScope::with_treatment(), "censoring design");
    outcome_design_ = Design(spec.outcome, cov, TermScope::with_outcome_month(), "outcome design");
    delta_design_ = Design(spec.delta, cov, TermScope::with_outcome_month(), "delta design");
    if (frame_.person_months().empty()) throw DataError("no person-months at risk");

    xt_ = frame_.pm_design(treatment_design_);
    a_ = frame_.pm_treated();
    visit_ = frame_.pm_visit();
    treatment_ = fit_treatment(frame_, treatment_design_, xt_, cfg_);

    if (censoring_design_ && frame_.censor_events() > 0) {
      xc_ = frame_.censor_design(*censoring_design_);
      cresp_ = frame_.censor_response();
    }
    censoring_ = fit_censoring(frame_, censoring_design_, xc_, cfg_);

    x1_ = frame_.cell_design(outcome_design_);
    x2_ = frame_.cell_design(delta_design_);
    y_ = frame_.cell_outcome();
    const auto& cells = frame_.cells();
    cell_pm_.resize(cells.size());
    lag_mask_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      cell_pm_[c] = cells[c].pm;
      if (cells[c].k == cells[c].m + frame_.grid().lag) lag_mask_[static_cast<Eigen::Index>(c)] = 1.0;
    }
    p_ = probabilities(treatment_.theta);
    w_ = weights(censoring_.eta);
    r_ = cell_treatment_residual(p_);
    outcome_solver_ = WlsSolver(DesignMatrix(x1_, w_), cfg_);
    delta_solver_ = WlsSolver(DesignMatrix(x2_, w_), cfg_);
  }

  const NumericConfig& config() const { return cfg_; }
  const AnalysisFrame& frame() const { return frame_; }
  const PanelData& data() const { return frame_.data(); }
  int n() const { return frame_.n_patients(); }
  bool censoring_active() const { return !censoring_.degenerate; }
  GammaStructure gamma_structure() const { return gamma_; }

  const Design& treatment_design() const { return treatment_design_; }
  const std::optional<Design>& censoring_design() const { return censoring_design_; }
  const Design& outcome_design() const { return outcome_design_; }
  const Design& delta_design() const { return delta_design_; }
  const TreatmentModel& treatment() const { return treatment_; }
  const CensoringModel& censoring() const { return censoring_; }

  const Eigen::MatrixXd& treatment_x() const { return xt_; }
  const Eigen::MatrixXd& censoring_x() const { return xc_; }
  const Eigen::MatrixXd& outcome_x() const { return x1_; }
  const Eigen::MatrixXd& delta_x() const { return x2_; }
  const Eigen::VectorXd& treated() const { return a_; }
  const Eigen::VectorXd& visit() const { return visit_; }
  const Eigen::VectorXd& censor_response() const { return cresp_; }
  const Eigen::VectorXd& outcome() const { return y_; }
  const Eigen::VectorXd& lag_mask() const { return lag_mask_; }
  const std::vector<int>& cell_pm() const { return cell_pm_; }
  /// W-weighted least squares on the xi1 and xi2 designs, factorized once.
  const WlsSolver& outcome_solver() const { return outcome_solver_; }
  const WlsSolver& delta_solver() const { return delta_solver_; }

  /// Fitted p_theta per person-month, W per cell, A - p_theta per cell.
  const Eigen::VectorXd& p() const { return p_; }
  const Eigen::VectorXd& w() const { return w_; }
  const Eigen::VectorXd& r() const { return r_; }

  Eigen::VectorXd probabilities(const Eigen::VectorXd& theta) const {
    return treatment_probabilities(xt_, visit_, theta);
  }

  /// Cell weights at eta; exactly 1 on observed cells without a censoring fit.
  Eigen::VectorXd weights(const Eigen::VectorXd& eta) const {
    if (!censoring_active()) return cell_weights(frame_, Eigen::VectorXd(), cfg_.ipcw_cap);
    return cell_weights(frame_, censoring_hazards(xc_, eta), cfg_.ipcw_cap);
  }

  Eigen::VectorXd cell_treatment_residual(const Eigen::VectorXd& p) const {
    Eigen::VectorXd r(static_cast<Eigen::Index>(cell_pm_.size()));
    for (std::size_t c = 0; c < cell_pm_.size(); ++c) r[static_cast<Eigen::Index>(c)] = a_[cell_pm_[c]] - p[cell_pm_[c]];
    return r;
  }

 private:
  NumericConfig cfg_;
  GammaStructure gamma_ = GammaStructure::lead;
  AnalysisFrame frame_;
  Design treatment_design_, outcome_design_, delta_design_;
  std::optional<Design> censoring_design_;
  TreatmentModel treatment_;
  CensoringModel censoring_;
  Eigen::MatrixXd xt_, xc_, x1_, x2_;
  Eigen::VectorXd a_, visit_, cresp_, y_, lag_mask_;
  std::vector<int> cell_pm_;
  Eigen::VectorXd p_, w_, r_;
  WlsSolver outcome_solver_, delta_solver_;
};

struct Diagnostics {
  double psi_system_condition = 0;
  double preliminary_condition = 0;
  bool preliminary_all_cells = false;  // lag-only system was rank deficient
  double gamma_condition = 0;
  double jacobian_condition = 0;
  int gamma_floored = 0;
  bool gamma_diagonal_fallback = false;
  int gamma_pooled_months = 0;
  double max_weight = 1;
  int capped_weights = 0;
  int treatment_iterations = 0;
  int censoring_iterations = 0;
  std::vector<int> risk_set_sizes;
  std::vector<std::pair<std::string, double>> block_means;  // scaled |P_n U| per block
};

struct EstimationResult {
  std::shared_ptr<const Analysis> analysis;
  BlipModel blip;
  Eigen::MatrixXd b_start;  // b(T, k) 1(T < k) per cell
  DeltaRegression delta_regression;
  Eigen::MatrixXd delta;  // Delta per cell
  OutcomeRegression outcome;
  CovarianceModel covariance;
  std::vector<Eigen::MatrixXd> gamma_inverse;  // per start month, window x window
  Eigen::MatrixXd q;                           // q_opt per cell
  Eigen::VectorXd psi_p;
  Eigen::VectorXd preliminary_mask;  // cells entering G_p
  Eigen::VectorXd psi_hat;

  bool has_sandwich = false;
  Eigen::MatrixXd sigma;      // covariance of sqrt(n)(psi_hat - psi)
  Eigen::MatrixXd influence;  // n x p
  Eigen::VectorXd se, ci_lower, ci_upper;
  Diagnostics diagnostics;

  int n() const { return analysis->n(); }
  std::size_t p() const { return blip.dimension(); }
};

/// Optimal weights for one window: rows are leads, columns blip components,
/// q = Gamma^-1 Delta (the transpose of Delta^T Gamma^-1).
inline Eigen::MatrixXd optimal_q(const Eigen::MatrixXd& delta_window, const Eigen::MatrixXd& gamma_window,
                                 double pivot_tol = 1e-12) {
  if (gamma_window.rows() != delta_window.rows())
    throw NumericError("optimal_q: Gamma window does not match the number of leads");
  return solve(gamma_window, delta_window, pivot_tol);
}

/// Apply per-start-month window blocks to a cells x c matrix.
inline Eigen::MatrixXd apply_windows(const AnalysisFrame& frame, const std::vector<Eigen::MatrixXd>& blocks,
                                     const Eigen::MatrixXd& values) {
  Eigen::MatrixXd out(values.rows(), values.cols());
  for (const auto& pm : frame.person_months()) {
    const int len = pm.cell_end - pm.cell_begin;
    out.middleRows(pm.cell_begin, len) = blocks[static_cast<std::size_t>(pm.month)] * values.middleRows(pm.cell_begin, len);
  }
  return out;
}

/// psi solving P_n sum W q (A - p)(Y - B psi - X1 xi1) = 0.
struct LinearSystem {
  Eigen::MatrixXd m;
  Eigen::VectorXd c;
};

inline LinearSystem psi_system(const Eigen::MatrixXd& q, const Eigen::VectorXd& wr, const Eigen::MatrixXd& b,
                               const Eigen::VectorXd& centered_y) {
  LinearSystem s;
  const Eigen::MatrixXd qw = wr.asDiagonal() * q;
  s.m = qw.transpose() * b;
  s.c = qw.transpose() * centered_y;
  return s;
}

inline Eigen::VectorXd solve_linear_psi(const LinearSystem& s, const NumericConfig& cfg, const char* what) {
  Eigen::VectorXd psi;
  try {
    psi = solve(s.m, s.c, cfg.pivot_tol);
  } catch (const SingularMatrixError& e) {
    throw NumericError(std::string(what) + ": " + e.what() + "; risk sets are probably too small");
  }
  const double resid = (s.m * psi - s.c).norm();
  const double scale = std::max(s.c.norm(), (s.m.cwiseAbs() * psi.cwiseAbs()).norm());
  if (!(resid <= 1e-8 * std::max(scale, 1e-300)))
    throw NumericError(std::string(what) + ": residual of the linear solve too large");
  return psi;
}

/// Preliminary psi_p from G_p (q = Delta on the masked cells), solved
/// jointly with xi1 so that J1 = 0 holds at (psi_p, xi1(psi_p)).
inline LinearSystem preliminary_system(const Analysis& an, const Eigen::MatrixXd& b_start, const Eigen::MatrixXd& delta,
                                       const OutcomeRegression& parts, const Eigen::VectorXd& mask) {
  const Eigen::VectorXd ry = an.outcome() - an.outcome_x() * parts.xi_y;
  const Eigen::MatrixXd rb = b_start - an.outcome_x() * parts.xi_b;
  const Eigen::VectorXd wr = an.w().cwiseProduct(an.r()).cwiseProduct(mask);
  LinearSystem s;
  const Eigen::MatrixXd dw = wr.asDiagonal() * delta;
  s.m = dw.transpose() * rb;
  s.c = dw.transpose() * ry;
  return s;
}

/// True when the columns of b restricted to the masked rows are linearly
/// dependent (relative pivot of the column-normalized Gram matrix).
inline bool collinear_on(const Eigen::MatrixXd& b, const Eigen::VectorXd& mask, double rank_tol) {
  Eigen::MatrixXd x = mask.asDiagonal() * b;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double nrm = x.col(j).norm();
    if (nrm == 0.0) return true;
    x.col(j) /= nrm;
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(x.transpose() * x);
  const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
  return !(std::sqrt(d.minCoeff() / d.maxCoeff()) > rank_tol);
}

/// Uses k = m + lag cells. When the blip components b(m, m + lag) are
/// collinear there (a basis mixing dur and dur^1.5, say), every window cell
/// is used instead, which keeps psi_p identified and G_p unbiased.
inline Eigen::VectorXd preliminary_psi(const Analysis& an, const Eigen::MatrixXd& b_start,
                                       const Eigen::MatrixXd& b_month, const Eigen::MatrixXd& delta,
                                       const OutcomeRegression& parts, Eigen::VectorXd* mask,
                                       Diagnostics* dg = nullptr) {
  const bool all_cells = collinear_on(b_month, an.lag_mask(), an.config().rank_tol);
  *mask = all_cells ? Eigen::VectorXd::Ones(an.lag_mask().size()) : an.lag_mask();
  const LinearSystem s = preliminary_system(an, b_start, delta, parts, *mask);
  if (dg) {
    dg->preliminary_condition = condition_number(s.m);
    dg->preliminary_all_cells = all_cells;
  }
  return solve_linear_psi(s, an.config(), "preliminary psi");
}

/// Generic per-record estimating function, evaluated from the record-level
/// nuisance models: sum over (k, m) of W q (H_psi(k) - E_xi1[H | L_m]) (A_m - p_theta(m)).
using QFunction = std::function<Eigen::VectorXd(const PatientRecord&, int m, int k)>;

inline Eigen::VectorXd g_function(const PanelData& data, const PatientRecord& record, const BlipModel& blip,
                                  const Eigen::VectorXd& psi, const TreatmentModel& treatment,
                                  const CensoringModel& censoring, const OutcomeRegression& outcome, const QFunction& q) {
  check_dimension(blip, psi);
  Eigen::VectorXd g;
  for (const auto& [k, m] : index_pairs(data)) {
    if (!record.at_risk(m) || !record.observed_through(k)) continue;
    const Eigen::VectorXd qv = q(record, m, k);
    if (g.size() == 0) g = Eigen::VectorXd::Zero(qv.size());
    if (qv.size() != g.size()) throw NumericError("g_function: q changes dimension across (k, m)");
    const double resid = blip_down(blip, psi, data, record, k) - outcome.predict(data, record, m, k);
    const double a = record.treated_at(m) ? 1.0 : 0.0;
    const double w = ipcw_weight(censoring, data, record, m, k);
    g += w * qv * resid * (a - treatment.probability(data, record, m));
  }
  return g;
}

// ---------------------------------------------------------------- stacked system

/// Parameter vector (psi, psi_p, xi1, theta, eta) and the per-patient stacked
/// functions (G*, G_p, J1, J_trt, J_cen), optionally followed by extra
/// G-tilde blocks with their own fixed q-tilde.
class StackedSystem {
 public:
  StackedSystem(const EstimationResult& fit, std::vector<Eigen::MatrixXd> extras = {})
      : fit_(fit), an_(*fit.analysis), extras_(std::move(extras)) {
    p_ = static_cast<int>(fit.p());
    d1_ = static_cast<int>(an_.outcome_x().cols());
    dt_ = static_cast<int>(an_.treatment_x().cols());
    de_ = an_.censoring_active() ? static_cast<int>(an_.censoring_x().cols()) : 0;
    nu_ = 0;
    for (const auto& e : extras_) nu_ += static_cast<int>(e.cols());
  }

  int dim() const { return 2 * p_ + d1_ + dt_ + de_; }
  int extra_dim() const { return nu_; }
  int psi_offset() const { return 0; }
  int psi_p_offset() const { return p_; }
  int xi1_offset() const { return 2 * p_; }
  int theta_offset() const { return 2 * p_ + d1_; }
  int eta_offset() const { return 2 * p_ + d1_ + dt_; }

  std::vector<std::pair<std::string, std::pair<int, int>>> blocks() const {
    std::vector<std::pair<std::string, std::pair<int, int>>> b{{"G*", {0, p_}},
                                                               {"G_p", {p_, p_}},
                                                               {"J1", {2 * p_, d1_}},
                                                               {"J_trt", {theta_offset(), dt_}}};
    if (de_ > 0) b.push_back({"J_cen", {eta_offset(), de_}});
    return b;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd phi(dim());
    phi.segment(0, p_) = fit_.psi_hat;
    phi.segment(p_, p_) = fit_.psi_p;
    phi.segment(2 * p_, d1_) = fit_.outcome.xi1;
    phi.segment(theta_offset(), dt_) = an_.treatment().theta;
    if (de_ > 0) phi.segment(eta_offset(), de_) = an_.censoring().eta;
    return phi;
  }

  /// n x (dim + extra_dim), per-patient sums (not divided by n).
  Eigen::MatrixXd per_patient(const Eigen::VectorXd& phi) const {
    const Terms t = terms(phi);
    const auto& fr = an_.frame();
    const int n = an_.n();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, dim() + nu_);
    for (int i = 0; i < n; ++i) {
      const int cb = fr.cell_begin(i), cl = fr.cell_end(i) - cb;
      if (cl > 0) {
        out.row(i).segment(0, p_) = t.s1.segment(cb, cl).transpose() * fit_.q.middleRows(cb, cl);
        out.row(i).segment(p_, p_) = t.s2.segment(cb, cl).transpose() * fit_.delta.middleRows(cb, cl);
        out.row(i).segment(2 * p_, d1_) = t.s3.segment(cb, cl).transpose() * an_.outcome_x().middleRows(cb, cl);
        int off = dim();
        for (const auto& e : extras_) {
          out.row(i).segment(off, e.cols()) = t.s1.segment(cb, cl).transpose() * e.middleRows(cb, cl);
          off += static_cast<int>(e.cols());
        }
      }
      const int pb = fr.pm_begin(i), pl = fr.pm_end(i) - pb;
      if (pl > 0)
        out.row(i).segment(theta_offset(), dt_) = t.st.segment(pb, pl).transpose() * an_.treatment_x().middleRows(pb, pl);
      if (de_ > 0) {
        const int eb = fr.cen_begin(i), el = fr.cen_end(i) - eb;
        if (el > 0)
          out.row(i).segment(eta_offset(), de_) = t.sc.segment(eb, el).transpose() * an_.censoring_x().middleRows(eb, el);
      }
    }
    return out;
  }

  /// P_n of the stacked functions.
  Eigen::VectorXd mean(const Eigen::VectorXd& phi) const {
    const Terms t = terms(phi);
    Eigen::VectorXd out(dim() + nu_);
    out.segment(0, p_) = fit_.q.transpose() * t.s1;
    out.segment(p_, p_) = fit_.delta.transpose() * t.s2;
    out.segment(2 * p_, d1_) = an_.outcome_x().transpose() * t.s3;
    out.segment(theta_offset(), dt_) = an_.treatment_x().transpose() * t.st;
    if (de_ > 0) out.segment(eta_offset(), de_) = an_.censoring_x().transpose() * t.sc;
    int off = dim();
    for (const auto& e : extras_) {
      out.segment(off, e.cols()) = e.transpose() * t.s1;
      off += static_cast<int>(e.cols());
    }
    return out / static_cast<double>(an_.n());
  }

  /// d P_n / d phi: analytic in psi, central differences elsewhere.
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& phi) const {
    const int rows = dim() + nu_;
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(rows, dim());
    jac.leftCols(p_) = psi_jacobian(phi);
    const double step = an_.config().fd_step;
    for (int j = p_; j < dim(); ++j) {
      const double h = step * (1.0 + std::abs(phi[j]));
      Eigen::VectorXd up = phi, dn = phi;
      up[j] += h;
      dn[j] -= h;
      jac.col(j) = (mean(up) - mean(dn)) / (2.0 * h);
    }
    return jac;
  }

  /// Analytic psi columns: -P_n W (A - p) q B for G* and each G-tilde.
  Eigen::MatrixXd psi_jacobian(const Eigen::VectorXd& phi) const {
    const Terms t = terms(phi);
    const Eigen::MatrixXd wb = t.wr.asDiagonal() * fit_.b_start;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(dim() + nu_, p_);
    out.topRows(p_) = -fit_.q.transpose() * wb;
    int off = dim();
    for (const auto& e : extras_) {
      out.middleRows(off, e.cols()) = -e.transpose() * wb;
      off += static_cast<int>(e.cols());
    }
    return out / static_cast<double>(an_.n());
  }

 private:
  struct Terms {
    Eigen::VectorXd wr;  // W (A - p) per cell
    Eigen::VectorXd s1;  // W (A - p) (Y - B psi - X1 xi1)
    Eigen::VectorXd s2;  // W (A - p) (Y - B psi_p - X1 xi1) on the preliminary cells
    Eigen::VectorXd s3;  // W (Y - B psi_p - X1 xi1)
    Eigen::VectorXd st;  // visit (A - p) per person-month
    Eigen::VectorXd sc;  // C - h per censoring row
  };

  Terms terms(const Eigen::VectorXd& phi) const {
    const Eigen::VectorXd psi = phi.segment(0, p_);
    const Eigen::VectorXd psi_p = phi.segment(p_, p_);
    const Eigen::VectorXd xi1 = phi.segment(2 * p_, d1_);
    const Eigen::VectorXd theta = phi.segment(theta_offset(), dt_);
    Terms t;
    // p and W are recomputed only when their own parameters move
    const bool theta_fitted = theta == an_.treatment().theta;
    const Eigen::VectorXd p = theta_fitted ? an_.p() : an_.probabilities(theta);
    Eigen::VectorXd w;
    if (de_ > 0) {
      const Eigen::VectorXd eta = phi.segment(eta_offset(), de_);
      if (eta == an_.censoring().eta) {
        w = an_.w();
        t.sc = an_.censor_response() - censoring_hazards(an_.censoring_x(), eta);
      } else {
        const Eigen::VectorXd h = censoring_hazards(an_.censoring_x(), eta);
        w = cell_weights(an_.frame(), h, an_.config().ipcw_cap);
        t.sc = an_.censor_response() - h;
      }
    } else {
      w = an_.w();
    }
    const Eigen::VectorXd r = theta_fitted ? an_.r() : an_.cell_treatment_residual(p);
    const Eigen::VectorXd base = an_.outcome() - an_.outcome_x() * xi1;
    t.wr = w.cwiseProduct(r);
    t.s1 = t.wr.cwiseProduct(base - fit_.b_start * psi);
    const Eigen::VectorXd e2 = base - fit_.b_start * psi_p;
    t.s2 = t.wr.cwiseProduct(e2).cwiseProduct(fit_.preliminary_mask);
    t.s3 = w.cwiseProduct(e2);
    t.st = an_.visit().cwiseProduct(an_.treated() - p);
    return t;
  }

  const EstimationResult& fit_;
  const Analysis& an_;
  std::vector<Eigen::MatrixXd> extras_;
  int p_ = 0, d1_ = 0, dt_ = 0, de_ = 0, nu_ = 0;
};

struct Linearization {
  Eigen::MatrixXd u;          // n x dim
  Eigen::MatrixXd g;          // n x extra_dim
  Eigen::MatrixXd jac_u;      // dim x dim
  Eigen::MatrixXd jac_g;      // extra_dim x dim
  Eigen::MatrixXd jac_u_inv;  // A_n^-1
};

inline Linearization linearize(const EstimationResult& fit, std::vector<Eigen::MatrixXd> extras = {}) {
  StackedSystem sys(fit, std::move(extras));
  const Eigen::VectorXd phi = sys.parameters();
  const Eigen::MatrixXd all = sys.per_patient(phi);
  const Eigen::MatrixXd jac = sys.jacobian(phi);
  const int d = sys.dim(), nu = sys.extra_dim();
  Linearization lin;
  lin.u = all.leftCols(d);
  lin.g = all.rightCols(nu);
  lin.jac_u = jac.topRows(d);
  lin.jac_g = jac.bottomRows(nu);
  try {
    lin.jac_u_inv = inverse(lin.jac_u, fit.analysis->config().pivot_tol);
  } catch (const SingularMatrixError& e) {
    throw NumericError(std::string("sandwich: Jacobian of the stacked equations is singular: ") + e.what());
  }
  return lin;
}

/// Sandwich A^-1 B A^-T for a generic stacked system given per-unit
/// estimating-function rows U (n x d) and the Jacobian A of their mean.
inline Eigen::MatrixXd sandwich(const Eigen::MatrixXd& u, const Eigen::MatrixXd& a, double pivot_tol = 1e-12) {
  const double n = static_cast<double>(u.rows());
  const Eigen::MatrixXd ainv = inverse(a, pivot_tol);
  const Eigen::MatrixXd b = u.transpose() * u / n;
  Eigen::MatrixXd s = ainv * b * ainv.transpose();
  return 0.5 * (s + s.transpose());
}

inline void attach_sandwich(EstimationResult& fit, const Linearization& lin) {
  const int p = static_cast<int>(fit.p());
  const double n = static_cast<double>(fit.n());
  const Eigen::MatrixXd b = lin.u.transpose() * lin.u / n;
  Eigen::MatrixXd full = lin.jac_u_inv * b * lin.jac_u_inv.transpose();
  full = 0.5 * (full + full.transpose()).eval();
  fit.sigma = full.topLeftCorner(p, p);
  fit.influence = -(lin.u * lin.jac_u_inv.transpose()).leftCols(p);
  fit.se = (fit.sigma.diagonal() / n).cwiseSqrt();
  fit.ci_lower = fit.psi_hat - 1.96 * fit.se;
  fit.ci_upper = fit.psi_hat + 1.96 * fit.se;
  fit.diagnostics.jacobian_condition = condition_number(lin.jac_u);
  fit.has_sandwich = true;
}

struct EstimateOptions {
  bool sandwich = true;
  bool check_block_means = true;
};

/// Blip-specific fits on a prepared analysis.
inline EstimationResult estimate(std::shared_ptr<const Analysis> an, const BlipModel& blip,
                                 const EstimateOptions& opt = {}) {
  const auto& cfg = an->config();
  const auto& fr = an->frame();
  EstimationResult fit;
  fit.analysis = an;
  fit.blip = blip;
  fit.b_start = fr.blip_at_start(blip);
  const Eigen::MatrixXd b_month = fr.blip_at_month(blip);

  fit.delta_regression = fit_delta_parts(an->delta_design(), an->delta_solver(), fit.b_start, cfg);
  fit.delta = delta_cells(b_month, an->delta_x(), fit.delta_regression.xi2);

  fit.outcome = fit_outcome_parts(an->outcome_design(), an->outcome_solver(), an->outcome(), fit.b_start, cfg);
  fit.psi_p = preliminary_psi(*an, fit.b_start, b_month, fit.delta, fit.outcome, &fit.preliminary_mask, &fit.diagnostics);
  fit.outcome.psi_p = fit.psi_p;
  fit.outcome.xi1 = fit.outcome.coefficients_at(fit.psi_p);

  const Eigen::VectorXd resid = an->outcome() - fit.b_start * fit.psi_p - an->outcome_x() * fit.outcome.xi1;
  fit.covariance = an->gamma_structure() == GammaStructure::month ? estimate_gamma_by_month(fr, resid, an->w(), cfg)
                                                                   : estimate_gamma_cov(fr, resid, an->w(), cfg);
  fit.diagnostics.gamma_condition = condition_number(fit.covariance.gamma);
  fit.diagnostics.gamma_floored = fit.covariance.floored;
  fit.diagnostics.gamma_diagonal_fallback = fit.covariance.diagonal_fallback;
  fit.diagnostics.gamma_pooled_months = fit.covariance.pooled_months;

  const int months = fr.grid().last_start() + 1;
  fit.gamma_inverse.resize(static_cast<std::size_t>(months));
  for (int m = 0; m < months; ++m) {
    const int lo = fr.window_first(m) - m, hi = fr.window_last(m) - m;
    const Eigen::MatrixXd g = fit.covariance.window_at(m, lo, hi, cfg.eigen_floor);
    try {
      fit.gamma_inverse[static_cast<std::size_t>(m)] = inverse(g, cfg.pivot_tol);
    } catch (const SingularMatrixError& e) {
      throw NumericError(std::string("residual covariance window is singular after flooring: ") + e.what());
    }
  }
  fit.q = apply_windows(fr, fit.gamma_inverse, fit.delta);

  const Eigen::VectorXd wr = an->w().cwiseProduct(an->r());
  const LinearSystem sys = psi_system(fit.q, wr, fit.b_start, an->outcome() - an->outcome_x() * fit.outcome.xi1);
  fit.diagnostics.psi_system_condition = condition_number(sys.m);
  fit.psi_hat = solve_linear_psi(sys, cfg, "psi");

  auto& dg = fit.diagnostics;
  dg.treatment_iterations = an->treatment().fit.iterations;
  dg.censoring_iterations = an->censoring().fit.iterations;
  dg.max_weight = an->w().size() ? an->w().maxCoeff() : 1.0;
  dg.capped_weights = static_cast<int>((an->w().array() >= cfg.ipcw_cap).count());
  dg.risk_set_sizes.assign(static_cast<std::size_t>(months), 0);
  for (const auto& pm : fr.person_months()) ++dg.risk_set_sizes[static_cast<std::size_t>(pm.month)];

  if (opt.check_block_means || opt.sandwich) {
    StackedSystem st(fit);
    const Eigen::VectorXd phi = st.parameters();
    const Eigen::VectorXd mean = st.mean(phi);
    // scale each block by the mean absolute size of its summands
    const Eigen::MatrixXd rows = st.per_patient(phi);
    for (const auto& [name, span] : st.blocks()) {
      const double num = mean.segment(span.first, span.second).cwiseAbs().maxCoeff();
      const double den = rows.middleCols(span.first, span.second).cwiseAbs().mean();
      dg.block_means.push_back({name, num / std::max(den, 1e-300)});
    }
  }
  if (opt.sandwich) attach_sandwich(fit, linearize(fit));
  return fit;
}

inline EstimationResult estimate(std::shared_ptr<const PanelData> data, const ModelSpec& spec,
                                 const NumericConfig& cfg = {}, const EstimateOptions& opt = {}) {
  auto an = std::make_shared<const Analysis>(data, spec, cfg);
  return estimate(an, BlipModel(spec.blip, data->covariate_names), opt);
}

}  // namespace snmm
