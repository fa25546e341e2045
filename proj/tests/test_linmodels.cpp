#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "snmm/linmodels.hpp"

using namespace snmm;

namespace {

// Adaptive Simpson quadrature; independent of the incomplete-gamma route.
double simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb, double whole,
               double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6 * (fa + 4 * flm + fm), right = (b - m) / 6 * (fm + 4 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15 * tol) return left + right + (left + right - whole) / 15;
  return simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return simpson(f, a, b, fa, fm, fb, (b - a) / 6 * (fa + 4 * fm + fb), tol, 60);
}

double chisq_tail_by_quadrature(double x, int df) {
  const double k = 0.5 * df;
  const double c = 1.0 / (std::pow(2.0, k) * std::tgamma(k));
  auto dens = [&](double t) { return c * std::pow(t, k - 1) * std::exp(-t / 2); };
  // split the range so each piece is smooth and well resolved
  double sum = 0.0, a = x;
  for (double b : {x + 1, x + 5, x + 20, x + 60, x + 200}) {
    sum += integrate(dens, a, b, 1e-14);
    a = b;
  }
  return sum;
}

}  // namespace

TEST(Wls, InterceptOnlyGivesMean) {
  const auto fit = wls(DesignMatrix(Eigen::MatrixXd::Ones(3, 1)), Eigen::Vector3d(1, 2, 3));
  EXPECT_NEAR(fit.coefficients[0], 2.0, 1e-12);
  EXPECT_TRUE(fit.converged);
}

TEST(Wls, ExactLinearData) {
  Eigen::MatrixXd x(4, 1);
  x << 1, 2, 3, 4;
  const auto fit = wls(DesignMatrix(x), Eigen::Vector4d(3, 6, 9, 12));
  EXPECT_NEAR(fit.coefficients[0], 3.0, 1e-12);
  EXPECT_NEAR((Eigen::Vector4d(3, 6, 9, 12) - x * fit.coefficients).norm(), 0.0, 1e-12);
}

TEST(Wls, DuplicatedColumnIsRankDeficient) {
  Eigen::MatrixXd x(4, 2);
  x << 1, 1, 2, 2, 3, 3, 4, 4;
  try {
    wls(DesignMatrix(x), Eigen::Vector4d(1, 2, 3, 4));
    FAIL();
  } catch (const RankDeficientError& e) {
    EXPECT_LT(e.smallest_pivot(), 1e-7);
  }
}

TEST(Wls, MatchesHandNormalEquations) {
  // X'WX = [[5, 7], [7, 15]], X'Wy = (14, 25) → β = (35/26, 27/26)
  Eigen::MatrixXd x(4, 2);
  x << 1, 0, 1, 1, 1, 2, 1, 3;
  const auto fit = wls(DesignMatrix(x, Eigen::Vector4d(1, 2, 1, 1)), Eigen::Vector4d(1, 3, 2, 5));
  EXPECT_NEAR(fit.coefficients[0], 35.0 / 26.0, 1e-12);
  EXPECT_NEAR(fit.coefficients[1], 27.0 / 26.0, 1e-12);
}

TEST(Wls, InvariantToCommonWeightScaling) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.1, 3);
  Eigen::MatrixXd x(200, 3);
  Eigen::VectorXd y(200), w(200);
  for (int i = 0; i < 200; ++i) {
    x.row(i) << 1, z(rng), z(rng) * 50;
    y[i] = 2 + x(i, 1) - 0.01 * x(i, 2) + z(rng);
    w[i] = u(rng);
  }
  const auto a = wls(DesignMatrix(x, w), y).coefficients;
  const auto b = wls(DesignMatrix(x, 1234.5 * w), y).coefficients;
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10 * (1 + a.cwiseAbs().maxCoeff()));
}

TEST(Wls, ScoreVanishes) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z;
  Eigen::MatrixXd x(500, 4);
  Eigen::VectorXd y(500), w(500);
  for (int i = 0; i < 500; ++i) {
    x.row(i) << 1, z(rng), 700 + 100 * z(rng), i % 12;
    y[i] = z(rng) * 10 + x(i, 2);
    w[i] = 1 + (i % 5);
  }
  const auto fit = wls(DesignMatrix(x, w), y);
  const Eigen::VectorXd score = x.transpose() * w.asDiagonal() * (y - x * fit.coefficients);
  const Eigen::VectorXd scale = x.cwiseAbs().transpose() * (w.asDiagonal() * y.cwiseAbs());
  EXPECT_LE((score.cwiseAbs().array() / scale.array()).maxCoeff(), 1e-10);
}

TEST(Logistic, InterceptOnlyIsLogitOfMean) {
  Eigen::VectorXd y(10);
  y << 1, 0, 0, 1, 1, 0, 1, 0, 0, 0;
  const auto fit = logistic_fit(DesignMatrix(Eigen::MatrixXd::Ones(10, 1)), y);
  EXPECT_NEAR(fit.coefficients[0], logit(0.4), 1e-8);
}

TEST(Logistic, SeparatedDataReported) {
  Eigen::MatrixXd x(6, 2);
  x << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd y(6);
  y << 0, 0, 0, 1, 1, 1;
  EXPECT_THROW(logistic_fit(DesignMatrix(x), y), SeparationError);
}

TEST(Logistic, ConstantResponseIsDegenerate) {
  EXPECT_THROW(logistic_fit(DesignMatrix(Eigen::MatrixXd::Ones(5, 1)), Eigen::VectorXd::Zero(5)), SeparationError);
}

TEST(Logistic, RecoversInitiationModelWithinMonteCarloError) {
  const Eigen::Vector4d truth(-2.4, -0.42, -0.0035, -0.026);
  const int n = 50000;
  std::mt19937_64 rng(20240611);
  std::bernoulli_distribution idu(0.1);
  std::normal_distribution<double> cd4(650, 200);
  std::uniform_int_distribution<int> month(6, 29);
  std::uniform_real_distribution<double> u;
  Eigen::MatrixXd x(n, 4);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x.row(i) << 1, idu(rng) ? 1 : 0, std::max(20.0, cd4(rng)), month(rng);
    y[i] = u(rng) < expit(x.row(i).dot(truth)) ? 1 : 0;
  }
  const auto fit = logistic_fit(DesignMatrix(x), y);
  // standard errors from the Fisher information at the true coefficients
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(4, 4);
  for (int i = 0; i < n; ++i) {
    const double p = expit(x.row(i).dot(truth));
    info += p * (1 - p) * x.row(i).transpose() * x.row(i);
  }
  const Eigen::VectorXd se = info.inverse().diagonal().cwiseSqrt();
  for (int j = 0; j < 4; ++j) EXPECT_LT(std::abs(fit.coefficients[j] - truth[j]), 3 * se[j]) << "coefficient " << j;
}

TEST(Logistic, ScoreVanishesAndLoglikNondecreasing) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u;
  const int n = 3000;
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n), w(n);
  for (int i = 0; i < n; ++i) {
    x.row(i) << 1, z(rng), 400 + 150 * z(rng);
    y[i] = u(rng) < expit(-1 + 0.8 * x(i, 1) + 0.002 * x(i, 2)) ? 1 : 0;
    w[i] = 1 + u(rng);
  }
  const DesignMatrix d(x, w);
  const auto fit = logistic_fit(d, y);
  EXPECT_TRUE(fit.converged);
  EXPECT_LE(fit.score_norm, 1e-8);
  Eigen::VectorXd p(n);
  for (int i = 0; i < n; ++i) p[i] = expit(x.row(i).dot(fit.coefficients));
  const Eigen::VectorXd score = x.transpose() * (w.cwiseProduct(y - p));
  EXPECT_LE(score.cwiseAbs().maxCoeff() / (x.cwiseAbs().transpose() * w).maxCoeff(), 1e-8);
  for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
    EXPECT_GE(fit.loglik_trace[i], fit.loglik_trace[i - 1] - 1e-9 * std::abs(fit.loglik_trace[i - 1]));
}

TEST(ChiSq, PublishedPValues) {
  EXPECT_NEAR(chisq_sf(2.93, 1), 0.09, 0.005);
  EXPECT_NEAR(chisq_sf(0.99, 1), 0.32, 0.005);
  EXPECT_NEAR(chisq_sf(0.80, 1), 0.37, 0.005);
}

TEST(ChiSq, ZeroStatisticHasUnitTail) {
  for (int df : {1, 2, 7}) EXPECT_EQ(chisq_sf(0.0, df), 1.0);
}

TEST(ChiSq, MatchesQuadratureOracle) {
  for (int df : {1, 2, 5})
    for (double x : {0.1, 1.0, 5.0, 20.0}) EXPECT_NEAR(chisq_sf(x, df), chisq_tail_by_quadrature(x, df), 1e-8) << x << " " << df;
}

TEST(ChiSq, MonotoneInStatistic) {
  for (int df : {1, 3}) {
    double prev = 1.0;
    for (double x = 0.05; x < 40; x += 0.05) {
      const double p = chisq_sf(x, df);
      EXPECT_LT(p, prev);
      prev = p;
    }
  }
}

TEST(ChiSq, RejectsBadArguments) {
  EXPECT_THROW(chisq_sf(-1, 1), NumericError);
  EXPECT_THROW(chisq_sf(1, 0), NumericError);
}

TEST(Solve, Identity) {
  const Eigen::Vector3d b(1, -2, 3);
  EXPECT_EQ(solve(Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd(b)), b);
}

TEST(Solve, Diagonal) {
  Eigen::MatrixXd a(2, 2);
  a << 2, 0, 0, 4;
  const Eigen::VectorXd x = solve(a, Eigen::VectorXd(Eigen::Vector2d(2, 4)));
  EXPECT_NEAR(x[0], 1, 1e-15);
  EXPECT_NEAR(x[1], 1, 1e-15);
}

TEST(Solve, ZeroRowIsSingular) {
  Eigen::MatrixXd a(3, 3);
  a << 1, 2, 3, 0, 0, 0, 4, 5, 6;
  EXPECT_THROW(solve(a, Eigen::VectorXd(Eigen::Vector3d(1, 2, 3))), SingularMatrixError);
}

TEST(Solve, ResidualSmall) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  Eigen::MatrixXd a(6, 6);
  Eigen::VectorXd b(6);
  for (int i = 0; i < 6; ++i) {
    b[i] = z(rng);
    for (int j = 0; j < 6; ++j) a(i, j) = z(rng);
  }
  const Eigen::VectorXd x = solve(a, b);
  EXPECT_LE((a * x - b).norm(), 1e-8 * b.norm());
}

TEST(FloorPsd, RaisesNegativeEigenvalues) {
  Eigen::MatrixXd m(2, 2);
  m << 1, 1, 1, 1;
  EXPECT_EQ(floor_psd(m, 1e-8), 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}
