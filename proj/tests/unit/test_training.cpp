#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ctl/datasets.hpp"
#include "ctl/training.hpp"

namespace {

namespace fs = std::filesystem;
using ctl::LabeledDataset;
using ctl::ModelSpec;
using ctl::TrainConfig;

// Two Gaussian blobs in 4 dimensions, linearly separable with high probability.
LabeledDataset blobs(std::size_t n, std::uint64_t seed, int classes = 2) {
  ctl::Rng rng(seed);
  LabeledDataset d;
  d.inputs.resize(4, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(classes));
    d.labels.push_back(y);
    for (Eigen::Index r = 0; r < 4; ++r)
      d.inputs(r, static_cast<Eigen::Index>(i)) = 0.3 * rng.normal() + (r == y ? 1.5 : 0.0);
  }
  d.num_classes = classes;
  d.task_id = "blobs" + std::to_string(seed);
  return d;
}

TrainConfig cfg(double lr, std::size_t batch, std::size_t epochs, std::uint64_t shuffle) {
  TrainConfig c;
  c.lr = lr;
  c.batch_size = batch;
  c.epochs = epochs;
  c.shuffle_seed = shuffle;
  return c;
}

const ModelSpec kSpec{{4, 6, 2}};

TEST(Train, DeterministicGivenSeeds) {
  const auto d = blobs(40, 1);
  const auto init = ctl::init_params(kSpec, 3);
  EXPECT_TRUE(ctl::train(init, d, cfg(0.1, 8, 2, 5)) == ctl::train(init, d, cfg(0.1, 8, 2, 5)));
  EXPECT_FALSE(ctl::train(init, d, cfg(0.1, 8, 2, 5)) == ctl::train(init, d, cfg(0.1, 8, 2, 6)));
}

TEST(Train, StepCountIsEpochsTimesBatches) {
  const auto d = blobs(41, 1);
  std::size_t steps = 0;
  ctl::train(ctl::init_params(kSpec, 0), d, cfg(0.1, 8, 3, 0), 0, [&](std::size_t, const ctl::ModelParams&) { ++steps; });
  EXPECT_EQ(steps, 3u * 6u);
}

TEST(Train, FullBatchStepMatchesManualGradientStep) {
  const auto d = blobs(10, 2);
  const auto init = ctl::init_params(kSpec, 4);
  const auto got = ctl::train(init, d, cfg(0.05, 10, 1, 9));
  // A single full batch: order only permutes columns, which leaves the mean gradient unchanged.
  const auto g = ctl::loss_and_grad(init, d.inputs, d.labels, ctl::LossKind::cross_entropy);
  const auto want = ctl::sgd_step(init, g, 0.05);
  EXPECT_LT((ctl::flatten(got) - ctl::flatten(want)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Train, LearnsSeparableBlobs) {
  const auto d = blobs(200, 3);
  const auto init = ctl::init_params(kSpec, 0);
  const auto trained = ctl::train(init, d, cfg(0.2, 16, 10, 1));
  EXPECT_LT(ctl::evaluate_loss(trained, d), ctl::evaluate_loss(init, d));
  EXPECT_GT(ctl::accuracy(trained, d), 0.95);
}

TEST(Train, RejectsMismatchedData) {
  const auto d = blobs(20, 1, 3);
  EXPECT_THROW(ctl::train(ctl::init_params(kSpec, 0), d, cfg(0.1, 4, 1, 0)), ctl::ValidationError);
  EXPECT_THROW(ctl::train(ctl::init_params(ModelSpec{{5, 3, 3}}, 0), d, cfg(0.1, 4, 1, 0)), ctl::ShapeError);
  EXPECT_THROW(ctl::train(ctl::init_params(kSpec, 0), blobs(20, 1), cfg(0.1, 0, 1, 0)), ctl::ValidationError);
}

TEST(Train, DivergenceIsNumericError) {
  const auto d = blobs(20, 1);
  EXPECT_THROW(ctl::train(ctl::init_params(kSpec, 0), d, cfg(1e300, 4, 3, 0)), ctl::NumericError);
}

// Branches share the joint prefix. A branch whose seed equals the joint
// seed continues the uninterrupted run exactly.
TEST(Spawn, PrefixIsSharedAndContinuationMatches) {
  const auto d = blobs(32, 5);
  const auto c = cfg(0.1, 8, 0, 21);
  const auto fam = ctl::spawn_family(kSpec, d, 2, 4, c, 7, {21, 22});
  TrainConfig joint = c;
  joint.epochs = 2;
  EXPECT_TRUE(fam.anchor.params == ctl::train(ctl::init_params(kSpec, 7), d, joint));
  TrainConfig full = c;
  full.epochs = 4;
  EXPECT_TRUE(fam.branches.first.params == ctl::train(ctl::init_params(kSpec, 7), d, full));
  EXPECT_FALSE(fam.branches.first.params == fam.branches.second.params);
  EXPECT_EQ(fam.branches.second.lineage.back().phase, ctl::Phase::spawn);
}

TEST(Spawn, ZeroJointEpochsStartsFromInit) {
  const auto d = blobs(16, 5);
  const auto fam = ctl::spawn_family(kSpec, d, 0, 1, cfg(0.1, 8, 0, 0), 2, {3, 4});
  EXPECT_TRUE(fam.anchor.params == ctl::init_params(kSpec, 2));
  EXPECT_THROW(ctl::spawn_family(kSpec, d, 2, 1, cfg(0.1, 8, 0, 0), 2, {3, 4}), ctl::ValidationError);
}

TEST(Family, SharedConfigDerivesPerTaskShuffles) {
  const auto pre = blobs(30, 1);
  const std::vector<LabeledDataset> tasks{blobs(30, 2), blobs(30, 3)};
  const auto fam = ctl::pretrain_finetune_family(kSpec, pre, tasks, cfg(0.1, 8, 1, 4), {cfg(0.1, 8, 1, 9)}, {0, 1});
  ASSERT_EQ(fam.finetuned.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    auto c = cfg(0.1, 8, 1, ctl::derive_seed(9, k));
    EXPECT_TRUE(fam.finetuned[k].params == ctl::train(fam.pretrained.params, tasks[k], c));
    EXPECT_EQ(fam.finetuned[k].lineage.size(), 3u);
    EXPECT_FALSE(fam.finetuned[k].lineage.back().head_reinitialized);
  }
}

TEST(Family, NewClassCountGetsFreshHeadButKeepsHiddenLayers) {
  const auto pre = blobs(30, 1);
  const std::vector<LabeledDataset> tasks{blobs(30, 2, 3)};
  const auto fam =
      ctl::pretrain_finetune_family(kSpec, pre, tasks, cfg(0.1, 8, 1, 4), {cfg(1e-300, 8, 1, 9)}, {0, 1});
  const auto& ft = fam.finetuned[0];
  EXPECT_TRUE(ft.lineage.back().head_reinitialized);
  EXPECT_EQ(ft.params.spec.output_dim(), 3u);
  // Steps of 1e-300 are below one ulp, so hidden layers stay at the pretrained values.
  EXPECT_TRUE(ft.params.weights[0] == fam.pretrained.params.weights[0]);
}

TEST(Family, RejectsWrongConfigCount) {
  const std::vector<LabeledDataset> tasks{blobs(8, 2), blobs(8, 3), blobs(8, 4)};
  const auto c = cfg(0.1, 8, 1, 0);
  EXPECT_THROW(ctl::pretrain_finetune_family(kSpec, blobs(8, 1), tasks, c, {c, c}, {}), ctl::ValidationError);
}

ctl::Checkpoint sample_checkpoint() {
  const auto d = blobs(20, 1);
  return ctl::pretrain_finetune_family(kSpec, d, {blobs(20, 2)}, cfg(0.1, 4, 1, 1), {cfg(0.1, 4, 1, 2)}, {3, 1})
      .finetuned[0];
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = sample_checkpoint();
  const fs::path p = fs::temp_directory_path() / "ctl_training_roundtrip.json";
  ctl::save_checkpoint(c, p);
  const auto back = ctl::load_checkpoint(p);
  EXPECT_TRUE(back.params == c.params);
  ASSERT_EQ(back.lineage.size(), c.lineage.size());
  for (std::size_t i = 0; i < c.lineage.size(); ++i) {
    EXPECT_EQ(back.lineage[i].phase, c.lineage[i].phase);
    EXPECT_EQ(back.lineage[i].task_id, c.lineage[i].task_id);
    EXPECT_EQ(back.lineage[i].config_digest, c.lineage[i].config_digest);
  }
  EXPECT_EQ(ctl::digest(back.params), ctl::digest(c.params));
}

TEST(Checkpoint, TamperedValueChangesDigest) {
  const auto c = sample_checkpoint();
  auto j = ctl::checkpoint_to_json(c);
  j["layers"][0]["weights"][0] = "0.123456";
  const auto back = ctl::checkpoint_from_json(j);
  EXPECT_NE(ctl::digest(back.params), ctl::digest(c.params));
}

TEST(Checkpoint, VersionMismatch) {
  auto j = ctl::checkpoint_to_json(sample_checkpoint());
  j["format_version"] = 2;
  EXPECT_THROW(ctl::checkpoint_from_json(j), ctl::CheckpointVersionError);
}

TEST(Checkpoint, ShapeMismatch) {
  auto j = ctl::checkpoint_to_json(sample_checkpoint());
  j["spec"]["layer_dims"] = {4, 7, 2};
  EXPECT_THROW(ctl::checkpoint_from_json(j), ctl::CheckpointShapeError);
  auto k = ctl::checkpoint_to_json(sample_checkpoint());
  k["layers"].erase(1);
  EXPECT_THROW(ctl::checkpoint_from_json(k), ctl::CheckpointShapeError);
}

TEST(Checkpoint, SchemaErrors) {
  auto j = ctl::checkpoint_to_json(sample_checkpoint());
  j["layers"][0]["bias"][0] = 1.5;
  EXPECT_THROW(ctl::checkpoint_from_json(j), ctl::CheckpointSchemaError);
  auto k = ctl::checkpoint_to_json(sample_checkpoint());
  k.erase("lineage");
  EXPECT_THROW(ctl::checkpoint_from_json(k), ctl::CheckpointSchemaError);
  auto m = ctl::checkpoint_to_json(sample_checkpoint());
  m["layers"][0]["bias"][0] = "nan";
  EXPECT_THROW(ctl::checkpoint_from_json(m), ctl::CheckpointError);
}

TEST(Checkpoint, MalformedFile) {
  const fs::path p = fs::temp_directory_path() / "ctl_training_bad.json";
  std::ofstream(p) << "{ not json";
  EXPECT_THROW(ctl::load_checkpoint(p), ctl::CheckpointSchemaError);
  EXPECT_THROW(ctl::load_checkpoint(p.string() + ".missing"), ctl::CheckpointError);
}

TEST(TrainConfigDigest, DependsOnEveryField) {
  const auto base = cfg(0.1, 8, 1, 0);
  auto a = base;
  a.lr = 0.2;
  auto b = base;
  b.batch_size = 9;
  auto c = base;
  c.loss_kind = ctl::LossKind::mse;
  auto d = base;
  d.shuffle_seed = 1;
  for (const auto& x : {a, b, c, d}) EXPECT_NE(x.digest(), base.digest());
  EXPECT_EQ(cfg(0.1, 8, 1, 0).digest(), base.digest());
}

}  // namespace
