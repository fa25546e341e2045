#pragma once

// Dense numerical kernel: weighted least squares, logistic regression by
// IRLS, pivoted linear solves and the chi-squared upper tail.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "snmm/error.hpp"

namespace snmm {

/// Tolerances used across the library. Tests may tighten these.
struct NumericConfig {
  double wls_score_tol = 1e-10;       // scaled weighted score at the WLS solution
  double logistic_score_tol = 1e-8;   // scaled score at the IRLS solution
  int logistic_max_iter = 100;
  double separation_threshold = 1e3;  // |beta| beyond this is reported as separation
  double rank_tol = 1e-7;             // relative pivot of column-normalized design (Gram resolves ~1e-8)
  double pivot_tol = 1e-12;           // relative pivot for `solve`
  double eigen_floor = 1e-8;          // PSD flooring, relative to largest eigenvalue
  double ipcw_cap = 50.0;
  double fd_step = 1e-5;              // finite-difference step, scaled by (1 + |param|)
};

struct DesignMatrix {
  Eigen::MatrixXd values;
  Eigen::VectorXd weights;  // empty means unit weights

  DesignMatrix() = default;
  explicit DesignMatrix(Eigen::MatrixXd x) : values(std::move(x)) {}
  DesignMatrix(Eigen::MatrixXd x, Eigen::VectorXd w) : values(std::move(x)), weights(std::move(w)) {}

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  bool weighted() const { return weights.size() != 0; }
  double weight(Eigen::Index i) const { return weighted() ? weights[i] : 1.0; }

  void validate(const char* who) const {
    if (weighted() && weights.size() != values.rows())
      throw NumericError(std::string(who) + ": weight vector length does not match rows");
    if (!values.allFinite())
      throw NumericError(std::string(who) + ": design contains non-finite entries");
    if (weighted() && (!weights.allFinite() || (weights.array() < 0.0).any()))
      throw NumericError(std::string(who) + ": weights must be finite and nonnegative");
  }
};

struct FitResult {
  Eigen::VectorXd coefficients;
  bool converged = false;
  int iterations = 0;
  double score_norm = 0.0;
  std::vector<double> loglik_trace;  // logistic only
};

/// Solves A x = B by Gaussian elimination with partial pivoting.
/// A pivot below pivot_tol * max|A| is reported as singular.
inline Eigen::MatrixXd solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             double pivot_tol = NumericConfig{}.pivot_tol) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw NumericError("solve: matrix is not square");
  if (b.rows() != n) throw NumericError("solve: right-hand side has wrong length");
  if (!a.allFinite() || !b.allFinite()) throw NumericError("solve: non-finite input");
  Eigen::MatrixXd lu = a;
  Eigen::MatrixXd x = b;
  const double scale = n > 0 ? lu.cwiseAbs().maxCoeff() : 0.0;
  for (Eigen::Index col = 0; col < n; ++col) {
    Eigen::Index piv = col;
    lu.col(col).tail(n - col).cwiseAbs().maxCoeff(&piv);
    piv += col;
    if (!(std::abs(lu(piv, col)) > pivot_tol * scale))
      throw SingularMatrixError("solve", static_cast<int>(col));
    if (piv != col) {
      lu.row(col).swap(lu.row(piv));
      x.row(col).swap(x.row(piv));
    }
    const double d = lu(col, col);
    for (Eigen::Index r = col + 1; r < n; ++r) {
      const double f = lu(r, col) / d;
      if (f == 0.0) continue;
      lu.row(r).tail(n - col) -= f * lu.row(col).tail(n - col);
      x.row(r) -= f * x.row(col);
    }
  }
  for (Eigen::Index col = n - 1; col >= 0; --col) {
    x.row(col) -= lu.row(col).tail(n - col - 1) * x.bottomRows(n - col - 1);
    x.row(col) /= lu(col, col);
  }
  return x;
}

inline Eigen::VectorXd solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& b,
                             double pivot_tol = NumericConfig{}.pivot_tol) {
  return solve(a, Eigen::MatrixXd(b), pivot_tol).col(0);
}

inline Eigen::MatrixXd inverse(const Eigen::MatrixXd& a, double pivot_tol = 1e-12) {
  return solve(a, Eigen::MatrixXd(Eigen::MatrixXd::Identity(a.rows(), a.cols())), pivot_tol);
}

/// Weighted least squares with several responses sharing one design.
/// Columns of sqrt(W) X are scaled to unit norm and the Gram matrix is
/// factorized once by pivoted LDL^T; its pivots are the squared QR pivots, so
/// rank deficiency shows as a small relative pivot. Each solve takes one
/// refinement step against the residual, which keeps the normal equations
/// accurate for the moderately conditioned designs used here.
class WlsSolver {
 public:
  WlsSolver() = default;
  explicit WlsSolver(const DesignMatrix& x, const NumericConfig& cfg = {}) : x_(x.values) {
    x.validate("wls");
    if (x.rows() < x.cols()) throw NumericError("wls: fewer rows than columns");
    w_ = x.weighted() ? x.weights : Eigen::VectorXd::Ones(x.rows());
    sw_ = w_.cwiseSqrt();
    xs_ = sw_.asDiagonal() * x.values;
    colnorm_ = xs_.colwise().norm().transpose();
    for (Eigen::Index j = 0; j < colnorm_.size(); ++j) {
      if (colnorm_[j] == 0.0) throw RankDeficientError("wls: column " + std::to_string(j) + " is zero", 0.0);
      xs_.col(j) /= colnorm_[j];
    }
    ldlt_.compute(xs_.transpose() * xs_);
    const Eigen::VectorXd d = ldlt_.vectorD().cwiseAbs();
    const double pivot = std::sqrt(d.minCoeff() / d.maxCoeff());
    if (ldlt_.info() != Eigen::Success || !(pivot > cfg.rank_tol)) throw RankDeficientError("wls", pivot);
  }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& y, double* score_norm = nullptr) const {
    if (y.rows() != x_.rows()) throw NumericError("wls: response length does not match design");
    if (!y.allFinite()) throw NumericError("wls: non-finite response");
    const Eigen::MatrixXd ys = sw_.asDiagonal() * y;
    Eigen::MatrixXd beta = ldlt_.solve(xs_.transpose() * ys);
    beta += ldlt_.solve(xs_.transpose() * (ys - xs_ * beta));
    beta = colnorm_.cwiseInverse().asDiagonal() * beta;
    if (score_norm) {
      const Eigen::MatrixXd wr = w_.asDiagonal() * (y - x_ * beta);
      const Eigen::MatrixXd score = x_.transpose() * wr;
      const Eigen::MatrixXd scale = x_.cwiseAbs().transpose() * (w_.asDiagonal() * y.cwiseAbs());
      *score_norm = (score.cwiseAbs().array() / scale.array().max(1.0)).maxCoeff();
    }
    return beta;
  }

  Eigen::Index rows() const { return x_.rows(); }
  Eigen::Index cols() const { return x_.cols(); }

 private:
  Eigen::MatrixXd x_, xs_;
  Eigen::VectorXd w_, sw_, colnorm_;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

inline Eigen::MatrixXd wls_multi(const DesignMatrix& x, const Eigen::MatrixXd& y,
                                 const NumericConfig& cfg = {}, double* score_norm = nullptr) {
  return WlsSolver(x, cfg).solve(y, score_norm);
}

inline FitResult wls(const DesignMatrix& x, const Eigen::VectorXd& y, const NumericConfig& cfg = {}) {
  FitResult out;
  out.coefficients = wls_multi(x, y, cfg, &out.score_norm).col(0);
  out.iterations = 1;
  out.converged = out.score_norm <= cfg.wls_score_tol;
  if (!out.converged) throw NumericError("wls: weighted score did not vanish to tolerance");
  return out;
}

inline double expit(double eta) {
  return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

namespace detail {

inline double bernoulli_loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y, const DesignMatrix& x) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + exp(eta)) computed stably
    const double e = eta[i];
    const double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += x.weight(i) * (y[i] * e - log1pexp);
  }
  return ll;
}

}  // namespace detail

/// Weighted Bernoulli maximum likelihood by IRLS with step-halving.
/// The reported score norm is max_j |X_j^T W (y - p)| / max(1, sum_i w_i |x_ij|).
inline FitResult logistic_fit(const DesignMatrix& x, const Eigen::VectorXd& y, const NumericConfig& cfg = {}) {
  x.validate("logistic_fit");
  const Eigen::Index n = x.rows(), d = x.cols();
  if (y.size() != n) throw NumericError("logistic_fit: response length does not match design");
  if (n < d) throw NumericError("logistic_fit: fewer rows than columns");
  double wsum = 0.0, ysum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw NumericError("logistic_fit: response must be 0/1");
    wsum += x.weight(i);
    ysum += x.weight(i) * y[i];
  }
  if (ysum <= 0.0 || ysum >= wsum)
    throw SeparationError("logistic_fit: response is constant (degenerate, separated)");

  Eigen::VectorXd scale(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += x.weight(i) * std::abs(x.values(i, j));
    scale[j] = std::max(1.0, s);
  }

  FitResult out;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(n);
  double ll = detail::bernoulli_loglik(eta, y, x);
  out.loglik_trace.push_back(ll);
  Eigen::VectorXd p(n), w(n);

  for (int iter = 1; iter <= cfg.logistic_max_iter; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      p[i] = expit(eta[i]);
      w[i] = x.weight(i) * p[i] * (1.0 - p[i]);
    }
    const Eigen::VectorXd resid = (y - p).cwiseProduct(x.weighted() ? x.weights : Eigen::VectorXd::Ones(n));
    const Eigen::VectorXd score = x.values.transpose() * resid;
    out.score_norm = (score.cwiseAbs().array() / scale.array()).maxCoeff();
    out.iterations = iter - 1;
    if (out.score_norm <= cfg.logistic_score_tol) {
      out.converged = true;
      double worst = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(y[i] - p[i]));
      if (worst < 1e-6) throw SeparationError("logistic_fit: fitted probabilities reproduce the response (separation)");
      // one more Newton step takes the score to rounding level
      const Eigen::MatrixXd info = x.values.transpose() * w.asDiagonal() * x.values;
      const Eigen::VectorXd cand = beta + solve(info, score, cfg.pivot_tol);
      const Eigen::VectorXd cand_eta = x.values * cand;
      const double cand_ll = detail::bernoulli_loglik(cand_eta, y, x);
      if (cand_ll >= ll) {
        beta = cand;
        eta = cand_eta;
        for (Eigen::Index i = 0; i < n; ++i) p[i] = expit(eta[i]);
        const Eigen::VectorXd r2 = (y - p).cwiseProduct(x.weighted() ? x.weights : Eigen::VectorXd::Ones(n));
        out.score_norm = ((x.values.transpose() * r2).cwiseAbs().array() / scale.array()).maxCoeff();
        out.loglik_trace.push_back(cand_ll);
      }
      break;
    }
    const Eigen::MatrixXd info = x.values.transpose() * w.asDiagonal() * x.values;
    Eigen::VectorXd step;
    try {
      step = solve(info, score, cfg.pivot_tol);
    } catch (const SingularMatrixError&) {
      throw SeparationError("logistic_fit: information matrix became singular (separation)");
    }
    double t = 1.0;
    Eigen::VectorXd cand = beta + step;
    Eigen::VectorXd cand_eta = x.values * cand;
    double cand_ll = detail::bernoulli_loglik(cand_eta, y, x);
    int halvings = 0;
    while (!(cand_ll >= ll - 1e-12 * std::abs(ll)) && halvings < 40) {
      t *= 0.5;
      cand = beta + t * step;
      cand_eta = x.values * cand;
      cand_ll = detail::bernoulli_loglik(cand_eta, y, x);
      ++halvings;
    }
    if (!(cand_ll >= ll - 1e-12 * std::abs(ll))) break;  // no ascent possible: fall through to checks
    beta = cand;
    eta = cand_eta;
    ll = std::max(ll, cand_ll);
    out.loglik_trace.push_back(ll);
    out.iterations = iter;

    if (beta.cwiseAbs().maxCoeff() > cfg.separation_threshold)
      throw SeparationError("logistic_fit: coefficients diverging (|beta| > " +
                            std::to_string(cfg.separation_threshold) + "), complete separation");
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(y[i] - expit(eta[i])));
    if (worst < 1e-9) throw SeparationError("logistic_fit: fitted probabilities reproduce the response exactly (separation)");
  }
  out.coefficients = beta;
  if (!out.converged) {
    // final score at the last accepted iterate
    for (Eigen::Index i = 0; i < n; ++i) p[i] = expit(eta[i]);
    const Eigen::VectorXd resid = (y - p).cwiseProduct(x.weighted() ? x.weights : Eigen::VectorXd::Ones(n));
    out.score_norm = ((x.values.transpose() * resid).cwiseAbs().array() / scale.array()).maxCoeff();
    out.converged = out.score_norm <= cfg.logistic_score_tol;
  }
  if (!out.converged) throw ConvergenceError("logistic_fit: IRLS did not converge in " +
                                             std::to_string(cfg.logistic_max_iter) + " iterations");
  return out;
}

/// P(chi^2_df > x) through the regularized upper incomplete gamma.
inline double chisq_sf(double x, int df) {
  if (df <= 0) throw NumericError("chisq_sf: degrees of freedom must be positive");
  if (!(x >= 0.0)) throw NumericError("chisq_sf: statistic must be nonnegative");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

/// Symmetrize and floor eigenvalues at floor_rel * max eigenvalue.
/// Returns the number of eigenvalues raised.
inline int floor_psd(Eigen::MatrixXd& m, double floor_rel) {
  m = 0.5 * (m + m.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  const double top = ev.maxCoeff();
  const double lo = floor_rel * std::max(top, std::numeric_limits<double>::min());
  int raised = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < lo) {
      ev[i] = lo;
      ++raised;
    }
  }
  if (raised > 0) {
    m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    m = 0.5 * (m + m.transpose()).eval();
  }
  return raised;
}

inline double condition_number(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 1.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  const double smin = s[s.size() - 1];
  return smin > 0 ? s[0] / smin : std::numeric_limits<double>::infinity();
}

}  // namespace snmm
