#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <vector>

#include "ctl/spectral.hpp"

namespace {

using ctl::Matrix;
using ctl::Vector;

Vector random_vector(Eigen::Index n, ctl::Rng& rng, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

Matrix random_symmetric(Eigen::Index n, ctl::Rng& rng) {
  Matrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rng.normal();
  return 0.5 * (m + m.transpose());
}

double dominant_magnitude(const Matrix& h) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(h);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

ctl::LabeledDataset gaussian_set(std::size_t d0, std::size_t n, int classes, std::uint64_t seed) {
  ctl::Rng rng(seed);
  ctl::LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(d0), static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < d.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) d.inputs(i, j) = rng.normal();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  d.num_classes = classes;
  return d;
}

TEST(Hvp, ExactOnQuadratic) {
  ctl::Rng rng(1);
  const auto q = ctl::Quadratic::centered(random_symmetric(8, rng));
  const Vector x0 = random_vector(8, rng), v = random_vector(8, rng);
  EXPECT_LT((ctl::hvp(q, x0, v) - q.a * v).norm(), 1e-8 * (q.a * v).norm());
  EXPECT_THROW(ctl::hvp(q, x0, Vector::Zero(8)), ctl::ValidationError);
  EXPECT_THROW(ctl::hvp(q, x0, Vector::Ones(3)), ctl::ShapeError);
}

TEST(PowerIteration, MatchesDenseSolverOnQuadratics) {
  ctl::Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto q = ctl::Quadratic::centered(random_symmetric(12, rng));
    ctl::PowerIterationOptions o;
    o.tol = 1e-12;
    o.max_iters = 20000;
    o.seed = static_cast<std::uint64_t>(t);
    const auto est = ctl::power_iteration_lambda_max(q, Vector::Zero(12), o);
    ASSERT_TRUE(est.converged);
    const double ref = dominant_magnitude(q.a);
    EXPECT_LT(std::abs(est.lambda_max - ref) / ref, 1e-3);
  }
}

// Dense Hessian by central differences of the exact gradient, symmetrized,
// then a full eigendecomposition: an independent path to lambda_max.
TEST(PowerIteration, MatchesDenseHessianOfSmallNet) {
  const ctl::ModelSpec spec{{3, 4, 3}};  // 31 parameters
  ASSERT_LE(spec.parameter_count(), 60u);
  const auto data = gaussian_set(3, 40, 3, 5);
  const ctl::MlpLoss f{spec, &data, ctl::LossKind::cross_entropy};
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto p = ctl::init_params(spec, s);
    const Vector theta = ctl::flatten(p);
    const auto n = theta.size();
    Matrix h(n, n);
    const double eps = 1e-5;
    for (Eigen::Index k = 0; k < n; ++k) {
      Vector tp = theta, tm = theta;
      tp(k) += eps;
      tm(k) -= eps;
      h.col(k) = (f.gradient(tp) - f.gradient(tm)) / (2 * eps);
    }
    h = 0.5 * (h + h.transpose());
    ctl::PowerIterationOptions o;
    o.tol = 1e-10;
    o.max_iters = 20000;
    o.hvp_epsilon = 1e-6;
    const auto est = ctl::power_iteration_lambda_max(f, theta, o);
    ASSERT_TRUE(est.converged);
    const double ref = dominant_magnitude(h);
    EXPECT_LT(std::abs(est.lambda_max - ref) / ref, 1e-3) << "seed " << s;
  }
}

// For a quadratic with Hessian A the gap is alpha(1-alpha)/2 d^T A d with
// d = theta_i - theta_j; linear and constant terms cancel.
TEST(Gap, QuadraticClosedForm) {
  ctl::Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    ctl::Quadratic q{random_symmetric(7, rng), random_vector(7, rng), random_vector(7, rng), rng.normal()};
    const Vector a = random_vector(7, rng), b = random_vector(7, rng);
    const double alpha = rng.uniform();
    const Vector d = a - b;
    EXPECT_NEAR(ctl::linearity_gap(q, a, b, alpha), std::abs(alpha * (1 - alpha) / 2 * d.dot(q.a * d)), 1e-9);
  }
}

TEST(Gap, ZeroAtEndpointsAndForEqualPoints) {
  ctl::Rng rng(4);
  const auto q = ctl::Quadratic::centered(random_symmetric(5, rng));
  const Vector a = random_vector(5, rng), b = random_vector(5, rng);
  EXPECT_EQ(ctl::linearity_gap(q, a, b, 0.0), 0.0);
  EXPECT_EQ(ctl::linearity_gap(q, a, b, 1.0), 0.0);
  EXPECT_EQ(ctl::linearity_gap(q, a, a, 0.3), 0.0);
  EXPECT_THROW(ctl::linearity_gap(q, a, b, -0.1), ctl::ValidationError);
}

// |d^T A d| <= |lambda|_max ||d||^2, so on a quadratic the bound always holds.
TEST(Audit, BoundHoldsOnQuadratics) {
  ctl::Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const auto q = ctl::Quadratic::centered(random_symmetric(6, rng));
    const std::vector<Vector> anchors{Vector::Zero(6)};
    std::vector<ctl::AuditPair> pairs;
    for (int k = 0; k < 5; ++k)
      pairs.push_back({"p" + std::to_string(k), 0, random_vector(6, rng), random_vector(6, rng)});
    ctl::PowerIterationOptions o;
    o.tol = 1e-12;
    o.max_iters = 20000;
    const auto rep = ctl::theorem1_audit(q, anchors, pairs, 0.5, o);
    ASSERT_EQ(rep.records.size(), 5u);
    for (const auto& r : rep.records) EXPECT_LE(r.delta, r.bound_term * (1 + 1e-6) + 1e-12);
    EXPECT_EQ(rep.summary.status, "ok");
  }
}

TEST(Audit, MissingAnchorIsRejected) {
  ctl::Rng rng(6);
  const auto q = ctl::Quadratic::centered(random_symmetric(3, rng));
  const std::vector<Vector> anchors{Vector::Zero(3)};
  const std::vector<ctl::AuditPair> pairs{{"p", 1, Vector::Zero(3), Vector::Ones(3)}};
  EXPECT_THROW(ctl::theorem1_audit(q, anchors, pairs), ctl::ValidationError);
}

TEST(RSquared, HandComputedFourPoints) {
  // sxy = 5.5, sxx = 5, syy = 8.75: R^2 = 30.25 / 43.75 = 121/175
  const std::vector<double> x{0, 1, 2, 3}, y{1, 3, 2, 5};
  EXPECT_NEAR(ctl::fit_r_squared(x, y), 121.0 / 175.0, 1e-15);
}

TEST(RSquared, PerfectLineAndConstant) {
  const std::vector<double> x{1, 2, 3}, y{5, 3, 1}, c{2, 2, 2};
  EXPECT_NEAR(ctl::fit_r_squared(x, y), 1.0, 1e-15);
  EXPECT_EQ(ctl::fit_r_squared(c, y), 0.0);
}

TEST(Summary, FewerThanThreePairsIsInsufficient) {
  std::vector<ctl::GapRecord> r(2);
  EXPECT_EQ(ctl::summarize_audit(r).status, "insufficient_sample");
  EXPECT_TRUE(std::isnan(ctl::summarize_audit(r).r2_bound));
  r.resize(3);
  for (std::size_t k = 0; k < 3; ++k) {
    r[k].delta = static_cast<double>(k);
    r[k].bound_term = 2.0 * static_cast<double>(k);
    r[k].sq_distance = static_cast<double>(k * k);
    r[k].lambda_max = 1.0;
  }
  const auto s = ctl::summarize_audit(r);
  EXPECT_EQ(s.status, "ok");
  EXPECT_NEAR(s.r2_bound, 1.0, 1e-15);
  EXPECT_EQ(s.r2_lambda, 0.0);
}

}  // namespace
