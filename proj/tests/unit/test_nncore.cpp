#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ctl/nncore.hpp"
#include "ctl/rng.hpp"

namespace {

using ctl::Matrix;
using ctl::ModelParams;
using ctl::ModelSpec;
using ctl::Vector;

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  ctl::Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

ModelParams random_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams p = ctl::init_params(spec, seed);
  ctl::Rng rng(seed + 1000);
  for (auto& b : p.biases)
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.3 * rng.normal();
  return p;
}

// Scalar-loop forward pass, written without Eigen expressions.
std::vector<std::vector<double>> loop_forward(const ModelParams& p, const std::vector<double>& x) {
  std::vector<std::vector<double>> layers;
  std::vector<double> prev = x;
  for (std::size_t l = 0; l < p.depth(); ++l) {
    const auto& w = p.weights[l];
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = p.biases[l](r);
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * prev[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = (l + 1 < p.depth()) ? std::max(s, 0.0) : s;
    }
    layers.push_back(z);
    prev = z;
  }
  return layers;
}

TEST(InitParams, SameSeedGivesIdenticalBytes) {
  const ModelSpec spec{{2, 3, 2}};
  EXPECT_TRUE(ctl::init_params(spec, 7) == ctl::init_params(spec, 7));
  EXPECT_EQ(ctl::digest(ctl::init_params(spec, 7)), ctl::digest(ctl::init_params(spec, 7)));
}

TEST(InitParams, DifferentSeedsDiffer) {
  const ModelSpec spec{{2, 3, 2}};
  EXPECT_FALSE(ctl::init_params(spec, 7) == ctl::init_params(spec, 8));
}

TEST(InitParams, MnistShapes) {
  const auto p = ctl::init_params(ModelSpec{{784, 100, 100, 10}}, 0);
  ASSERT_EQ(p.depth(), 3u);
  EXPECT_EQ(p.weights[0].rows(), 100);
  EXPECT_EQ(p.weights[0].cols(), 784);
  EXPECT_EQ(p.weights[1].rows(), 100);
  EXPECT_EQ(p.weights[1].cols(), 100);
  EXPECT_EQ(p.weights[2].rows(), 10);
  EXPECT_EQ(p.weights[2].cols(), 100);
}

TEST(InitParams, WithinFanInBoundAndZeroBias) {
  const auto p = ctl::init_params(ModelSpec{{9, 16, 4}}, 3);
  for (std::size_t l = 0; l < p.depth(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.weights[l].cols()));
    EXPECT_LE(p.weights[l].cwiseAbs().maxCoeff(), bound);
    EXPECT_EQ(p.biases[l].cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(ModelSpec, RejectsShortOrZeroDims) {
  EXPECT_THROW(ModelSpec{{3}}.validate(), ctl::ValidationError);
  EXPECT_THROW((ModelSpec{{3, 0, 2}}.validate()), ctl::ValidationError);
}

TEST(Forward, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelSpec spec{{5, 7, 6, 3}};
    const auto p = random_params(spec, seed);
    const Matrix x = random_matrix(5, 4, seed + 50);
    const auto fs = ctl::forward(p, x);
    ASSERT_EQ(fs.depth(), 3u);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      std::vector<double> col(x.col(j).data(), x.col(j).data() + x.rows());
      const auto ref = loop_forward(p, col);
      for (std::size_t l = 1; l <= 3; ++l)
        for (std::size_t r = 0; r < ref[l - 1].size(); ++r)
          EXPECT_NEAR(fs.layer(l)(static_cast<Eigen::Index>(r), j), ref[l - 1][r], 1e-12);
    }
  }
}

TEST(Forward, OutputIsLastLayerAndColumnsAgree) {
  const auto p = random_params(ModelSpec{{3, 4, 2}}, 1);
  const auto fs = ctl::forward(p, random_matrix(3, 6, 2));
  EXPECT_EQ(&fs.output(), &fs.layer(2));
  EXPECT_EQ(fs.layer(1).cols(), fs.layer(2).cols());
  EXPECT_GE(fs.layer(1).minCoeff(), 0.0);
}

TEST(Forward, ShapeErrorNamesLayer) {
  const auto p = random_params(ModelSpec{{3, 4, 2}}, 1);
  try {
    ctl::forward(p, random_matrix(5, 2, 0));
    FAIL() << "expected a shape error";
  } catch (const ctl::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Forward, FromLayerContinuesFullPass) {
  const auto p = random_params(ModelSpec{{4, 5, 5, 3}}, 4);
  const Matrix x = random_matrix(4, 3, 5);
  const auto full = ctl::forward(p, x);
  const auto tail = ctl::forward_from(p, full.layer(1), 2);
  EXPECT_TRUE(tail.output() == full.output());
}

TEST(Loss, HandComputedValues) {
  const ModelSpec spec{{1, 2}};
  ModelParams p = ModelParams::zeros(spec);
  const Matrix x = Matrix::Zero(1, 1);
  const std::vector<int> y{0};
  EXPECT_NEAR(ctl::loss_value(p, x, y, ctl::LossKind::cross_entropy), std::log(2.0), 1e-15);
  p.biases[0] << 2.0, 0.0;
  // 0.5 * ((2 - 1)^2 + 0^2)
  EXPECT_NEAR(ctl::loss_value(p, x, y, ctl::LossKind::mse), 0.5, 1e-15);
  // log(e^2 + 1) - 2
  EXPECT_NEAR(ctl::loss_value(p, x, y, ctl::LossKind::cross_entropy), std::log(std::exp(2.0) + 1.0) - 2.0, 1e-15);
}

TEST(Loss, RejectsOutOfRangeLabel) {
  const auto p = random_params(ModelSpec{{2, 3}}, 0);
  const std::vector<int> y{3};
  EXPECT_THROW(ctl::loss_value(p, random_matrix(2, 1, 0), y, ctl::LossKind::cross_entropy), ctl::ValidationError);
}

class GradientCheck : public ::testing::TestWithParam<ctl::LossKind> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const ModelSpec spec{{4, 6, 5, 3}};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = random_params(spec, seed);
    const Matrix x = random_matrix(4, 8, seed + 20);
    std::vector<int> y;
    for (int i = 0; i < 8; ++i) y.push_back(i % 3);
    const auto g = ctl::flatten(ctl::loss_and_grad(p, x, y, GetParam()).grad);
    const Vector theta = ctl::flatten(p);
    const double eps = 1e-6;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
      Vector tp = theta, tm = theta;
      tp(k) += eps;
      tm(k) -= eps;
      const double fd = (ctl::loss_value(ctl::unflatten(spec, tp), x, y, GetParam()) -
                         ctl::loss_value(ctl::unflatten(spec, tm), x, y, GetParam())) /
                        (2 * eps);
      EXPECT_LT(std::abs(fd - g(k)), 1e-6) << "parameter " << k;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(BothLosses, GradientCheck,
                         ::testing::Values(ctl::LossKind::cross_entropy, ctl::LossKind::mse));

TEST(Gradient, LossFieldEqualsLossValue) {
  const auto p = random_params(ModelSpec{{3, 4, 2}}, 9);
  const Matrix x = random_matrix(3, 5, 10);
  const std::vector<int> y{0, 1, 1, 0, 1};
  EXPECT_EQ(ctl::loss_and_grad(p, x, y, ctl::LossKind::cross_entropy).loss,
            ctl::loss_value(p, x, y, ctl::LossKind::cross_entropy));
}

TEST(SgdStep, ZeroRateIsIdentityAndNegativeRejected) {
  const auto p = random_params(ModelSpec{{3, 4, 2}}, 1);
  const std::vector<int> y{0, 1};
  const auto g = ctl::loss_and_grad(p, random_matrix(3, 2, 0), y, ctl::LossKind::cross_entropy);
  EXPECT_TRUE(ctl::sgd_step(p, g, 0.0) == p);
  EXPECT_THROW(ctl::sgd_step(p, g, -0.1), ctl::ValidationError);
}

TEST(SgdStep, SubtractsScaledGradient) {
  const auto p = random_params(ModelSpec{{3, 4, 2}}, 1);
  const std::vector<int> y{0, 1};
  const auto g = ctl::loss_and_grad(p, random_matrix(3, 2, 0), y, ctl::LossKind::cross_entropy);
  const auto q = ctl::sgd_step(p, g, 0.25);
  EXPECT_LT((ctl::flatten(q) - (ctl::flatten(p) - 0.25 * ctl::flatten(g.grad))).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Algebra, LerpEndpointsAreExact) {
  const ModelSpec spec{{3, 4, 2}};
  const auto a = random_params(spec, 1), b = random_params(spec, 2);
  EXPECT_TRUE(ctl::lerp_params(a, b, 1.0) == a);
  EXPECT_TRUE(ctl::lerp_params(a, b, 0.0) == b);
  EXPECT_TRUE(ctl::lerp_params(a, a, 0.3) == a);
  EXPECT_THROW(ctl::lerp_params(a, b, 1.5), ctl::ValidationError);
}

TEST(Algebra, LerpMatchesFlatFormula) {
  const ModelSpec spec{{3, 4, 2}};
  const auto a = random_params(spec, 1), b = random_params(spec, 2);
  const Vector expect = 0.3 * ctl::flatten(a) + 0.7 * ctl::flatten(b);
  EXPECT_LT((ctl::flatten(ctl::lerp_params(a, b, 0.3)) - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Algebra, CombineOfIdenticalCopiesIsFixedPoint) {
  const auto a = random_params(ModelSpec{{3, 4, 2}}, 5);
  const std::vector<ModelParams> ms{a, a, a};
  const std::vector<double> c{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_LT((ctl::flatten(ctl::combine_params(ms, c)) - ctl::flatten(a)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Algebra, SpecMismatchIsShapeError) {
  const auto a = random_params(ModelSpec{{3, 4, 2}}, 1);
  const auto b = random_params(ModelSpec{{3, 5, 2}}, 1);
  EXPECT_THROW(a + b, ctl::ShapeError);
  EXPECT_THROW(ctl::lerp_params(a, b, 0.5), ctl::ShapeError);
}

TEST(Algebra, FlattenRoundTripAndDot) {
  const ModelSpec spec{{3, 4, 2}};
  const auto a = random_params(spec, 3), b = random_params(spec, 4);
  EXPECT_TRUE(ctl::unflatten(spec, ctl::flatten(a)) == a);
  EXPECT_EQ(static_cast<std::size_t>(ctl::flatten(a).size()), spec.parameter_count());
  EXPECT_NEAR(ctl::dot(a, b), ctl::flatten(a).dot(ctl::flatten(b)), 1e-12);
  EXPECT_NEAR(ctl::squared_norm(a - b), (ctl::flatten(a) - ctl::flatten(b)).squaredNorm(), 1e-12);
}

TEST(Accuracy, ArgmaxTiesGoToLowestIndex) {
  Matrix logits(3, 2);
  logits << 1, 0, 1, 2, 0, 2;
  const auto pred = ctl::argmax_columns(logits);
  EXPECT_EQ(pred[0], 0);
  EXPECT_EQ(pred[1], 1);
  const std::vector<int> y{0, 2};
  EXPECT_DOUBLE_EQ(ctl::accuracy_of_logits(logits, y), 0.5);
}

}  // namespace
