#include <gtest/gtest.h>

#include <vector>

#include "ctl/arithmetic.hpp"

namespace {

using ctl::LabeledDataset;
using ctl::Matrix;
using ctl::ModelParams;
using ctl::ModelSpec;

LabeledDataset gaussian_set(std::size_t d0, std::size_t n, int classes, std::uint64_t seed) {
  ctl::Rng rng(seed);
  LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(d0), static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < d.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) d.inputs(i, j) = rng.normal();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  d.num_classes = classes;
  d.task_id = "gauss" + std::to_string(seed);
  return d;
}

ModelParams random_params(const ModelSpec& spec, std::uint64_t seed, double scale = 1.0) {
  ModelParams p = ModelParams::zeros(spec);
  ctl::Rng rng(seed);
  for (auto& w : p.weights) w = w.unaryExpr([&](double) { return scale * rng.normal(); });
  for (auto& b : p.biases) b = b.unaryExpr([&](double) { return scale * rng.normal(); });
  return p;
}

// A single affine layer is linear in its parameters, so both identities hold exactly.
TEST(LinearModel, AdditionIdentityHolds) {
  const ModelSpec spec{{6, 4}};
  const auto data = gaussian_set(6, 80, 4, 1);
  const std::vector<std::size_t> layers{1};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto pt = random_params(spec, s);
    const auto ti = ctl::task_vector(random_params(spec, s + 100), pt);
    const auto tj = ctl::task_vector(random_params(spec, s + 200), pt);
    for (double lambda : {0.2, 0.4, 1.0}) {
      const auto rep = ctl::addition_ctl_check(pt, ti, tj, lambda, data, layers);
      EXPECT_LT(rep.at(1).one_minus_cosine.q3, 1e-10);
      EXPECT_NEAR(rep.at(1).coef.median, 1.0, 1e-10);
    }
  }
}

TEST(LinearModel, NegationIdentityHolds) {
  const ModelSpec spec{{6, 4}};
  const auto data = gaussian_set(6, 80, 4, 2);
  const std::vector<std::size_t> layers{1};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto pt = random_params(spec, s);
    const auto tau = ctl::task_vector(random_params(spec, s + 300), pt);
    for (double lambda : {0.1, 0.5, 1.0}) {
      const auto rep = ctl::negation_ctl_check(pt, tau, lambda, data, layers);
      EXPECT_LT(rep.at(1).one_minus_cosine.q3, 1e-10);
      EXPECT_NEAR(rep.at(1).coef.median, 1.0, 1e-10);
    }
  }
}

// The addition check must use the doubled scale: without it the identity
// does not hold even for a linear model.
TEST(LinearModel, AdditionNeedsDoubledScale) {
  const ModelSpec spec{{6, 4}};
  const auto data = gaussian_set(6, 80, 4, 1);
  const std::vector<std::size_t> layers{1};
  const auto pt = random_params(spec, 0);
  const auto ti = ctl::task_vector(random_params(spec, 100), pt);
  const auto tj = ctl::task_vector(random_params(spec, 200), pt);
  const auto rep = ctl::addition_ctl_check(pt, ti, tj, 0.5, data, layers, 1.0);
  EXPECT_GT(std::abs(rep.at(1).coef.median - 1.0), 1e-3);
}

TEST(TaskVectors, ApplyAddsScaledDifferences) {
  const ModelSpec spec{{3, 4, 2}};
  const auto pt = random_params(spec, 1), a = random_params(spec, 2), b = random_params(spec, 3);
  const auto ta = ctl::task_vector(a, pt), tb = ctl::task_vector(b, pt);
  EXPECT_EQ(ta.base_digest, ctl::digest(pt));
  const std::vector<ctl::VectorTerm> terms{{&ta, 0.3}, {&tb, -0.7}};
  const auto got = ctl::flatten(ctl::apply_vectors(pt, terms));
  const ctl::Vector want = ctl::flatten(pt) + 0.3 * (ctl::flatten(a) - ctl::flatten(pt)) -
                           0.7 * (ctl::flatten(b) - ctl::flatten(pt));
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((ctl::flatten(ctl::apply_vector(pt, ta, 1.0)) - ctl::flatten(a)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(TaskVectors, RejectsMismatchedSpec) {
  const auto pt = random_params(ModelSpec{{3, 4, 2}}, 1);
  const auto other = random_params(ModelSpec{{3, 5, 2}}, 1);
  const auto tau = ctl::task_vector(other, other);
  EXPECT_THROW(ctl::apply_vector(pt, tau, 1.0), ctl::ShapeError);
  const std::vector<ctl::VectorTerm> null_term{{nullptr, 1.0}};
  EXPECT_THROW(ctl::apply_vectors(pt, null_term), ctl::ValidationError);
}

TEST(Stitch, OwnFeaturesReproduceOutput) {
  const ModelSpec spec{{5, 7, 6, 3}};
  const auto pt = random_params(spec, 4, 0.5);
  const auto data = gaussian_set(5, 20, 3, 5);
  const auto fs = ctl::forward(pt, data.inputs);
  for (std::size_t l : {1u, 2u}) EXPECT_TRUE(ctl::stitch_forward(pt, fs.layer(l), l) == fs.output());
  EXPECT_THROW(ctl::stitch_forward(pt, fs.layer(1), 3), ctl::ValidationError);
}

TEST(Stitch, DefaultLayerIsMiddleHidden) {
  EXPECT_EQ(ctl::default_stitch_layer(ModelSpec{{784, 100, 100, 10}}), 1u);
  EXPECT_EQ(ctl::default_stitch_layer(ModelSpec{{4, 5, 5, 5, 2}}), 2u);
  EXPECT_EQ(ctl::default_stitch_layer(ModelSpec{{4, 5, 2}}), 1u);
}

TEST(Stitch, LambdaGridIsExactTwentieths) {
  const auto g = ctl::default_lambda_grid();
  ASSERT_EQ(g.size(), 20u);
  EXPECT_EQ(g.front(), 0.05);
  EXPECT_EQ(g[7], 0.4);
  EXPECT_EQ(g.back(), 1.0);
}

TEST(Stitch, AdditionTableMatchesManualStitching) {
  const ModelSpec spec{{5, 7, 6, 3}};
  const auto pt = random_params(spec, 4, 0.5);
  const auto ti = ctl::task_vector(random_params(spec, 5, 0.5), pt);
  const auto tj = ctl::task_vector(random_params(spec, 6, 0.5), pt);
  const auto di = gaussian_set(5, 40, 3, 7), dj = gaussian_set(5, 40, 3, 8);
  const std::vector<double> lambdas{0.5};
  const auto rows = ctl::stitch_addition_table(pt, ti, tj, lambdas, 1, di, dj);
  ASSERT_EQ(rows.size(), 1u);
  const auto mi = ctl::apply_vector(pt, ti, 0.5), mj = ctl::apply_vector(pt, tj, 0.5);
  auto acc = [&](const LabeledDataset& d, double wi, double wj) {
    const Matrix f = wi * ctl::forward(mi, d.inputs).layer(1) + wj * ctl::forward(mj, d.inputs).layer(1);
    return ctl::accuracy_of_logits(ctl::stitch_forward(pt, f, 1), d.labels);
  };
  EXPECT_DOUBLE_EQ(rows[0].mean_on_i, acc(di, 0.5, 0.5));
  EXPECT_DOUBLE_EQ(rows[0].mean_on_j, acc(dj, 0.5, 0.5));
  EXPECT_DOUBLE_EQ(rows[0].single_i_on_j, acc(dj, 1, 0));
  EXPECT_DOUBLE_EQ(rows[0].single_j_on_i, acc(di, 0, 1));
}

TEST(Stitch, ZeroTaskVectorsLeavePretrainedAccuracy) {
  const ModelSpec spec{{5, 7, 3}};
  const auto pt = random_params(spec, 4, 0.5);
  const auto zero = ctl::task_vector(pt, pt);
  const auto d = gaussian_set(5, 40, 3, 7);
  const double base = ctl::accuracy(pt, d);
  const std::vector<double> lambdas{0.0, 1.0};
  for (const auto& r : ctl::stitch_addition_table(pt, zero, zero, lambdas, 1, d, d)) {
    EXPECT_DOUBLE_EQ(r.mean_on_i, base);
    EXPECT_DOUBLE_EQ(r.single_j_on_j, base);
  }
  for (const auto& r : ctl::negation_stitch_curve(pt, zero, lambdas, 1, d, d)) {
    EXPECT_DOUBLE_EQ(r.delta_on_pt, base);
    EXPECT_DOUBLE_EQ(r.raw_on_i, base);
  }
}

TEST(Stitch, NegationCurveMatchesManualFeatures) {
  const ModelSpec spec{{5, 7, 6, 3}};
  const auto pt = random_params(spec, 9, 0.5);
  const auto tau = ctl::task_vector(random_params(spec, 10, 0.5), pt);
  const auto dpt = gaussian_set(5, 40, 3, 11), di = gaussian_set(5, 40, 3, 12);
  const std::vector<double> lambdas{0.7};
  const auto rows = ctl::negation_stitch_curve(pt, tau, lambdas, 2, dpt, di);
  auto delta_acc = [&](const LabeledDataset& d) {
    const Matrix base = ctl::forward(pt, d.inputs).layer(2);
    const Matrix edited = ctl::forward(ctl::apply_vector(pt, tau, 0.7), d.inputs).layer(2);
    return ctl::accuracy_of_logits(ctl::stitch_forward(pt, base - (edited - base), 2), d.labels);
  };
  auto raw_acc = [&](const LabeledDataset& d) {
    return ctl::accuracy_of_logits(
        ctl::stitch_forward(pt, ctl::forward(ctl::apply_vector(pt, tau, -0.7), d.inputs).layer(2), 2), d.labels);
  };
  EXPECT_DOUBLE_EQ(rows[0].delta_on_pt, delta_acc(dpt));
  EXPECT_DOUBLE_EQ(rows[0].delta_on_i, delta_acc(di));
  EXPECT_DOUBLE_EQ(rows[0].raw_on_pt, raw_acc(dpt));
  EXPECT_DOUBLE_EQ(rows[0].raw_on_i, raw_acc(di));
}

TEST(Stitch, RejectsOutputLayer) {
  const ModelSpec spec{{5, 7, 3}};
  const auto pt = random_params(spec, 4);
  const auto zero = ctl::task_vector(pt, pt);
  const auto d = gaussian_set(5, 4, 3, 7);
  const std::vector<double> lambdas{1.0};
  EXPECT_THROW(ctl::stitch_addition_table(pt, zero, zero, lambdas, 2, d, d), ctl::ValidationError);
  EXPECT_THROW(ctl::negation_stitch_curve(pt, zero, lambdas, 0, d, d), ctl::ValidationError);
}

}  // namespace
