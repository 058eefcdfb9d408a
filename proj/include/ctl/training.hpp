#pragma once

// Deterministic SGD training, the pretrain/finetune and spawning pipelines,
// and versioned JSON checkpoints.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/rng.hpp"

namespace ctl {

struct TrainConfig {
  double lr = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  LossKind loss_kind = LossKind::cross_entropy;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train.lr must be a positive finite number");
    if (batch_size == 0) throw ValidationError("train.batch_size must be positive");
    if (epochs == 0) throw ValidationError("train.epochs must be positive");
  }

  /// Canonical text form; the digest is taken over this string.
  std::string canonical() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "lr=%.17g;batch=%zu;epochs=%zu;loss=%s;shuffle=%llu", lr, batch_size, epochs,
                  to_string(loss_kind).c_str(), static_cast<unsigned long long>(shuffle_seed));
    return buf;
  }
  std::uint64_t digest() const { return fnv1a(canonical()); }
};

enum class Phase { init, pretrain, spawn, finetune };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::init: return "init";
    case Phase::pretrain: return "pretrain";
    case Phase::spawn: return "spawn";
    case Phase::finetune: return "finetune";
  }
  return "?";
}

inline Phase phase_from_string(const std::string& s) {
  if (s == "init") return Phase::init;
  if (s == "pretrain") return Phase::pretrain;
  if (s == "spawn") return Phase::spawn;
  if (s == "finetune") return Phase::finetune;
  throw CheckpointSchemaError("unknown lineage phase '" + s + "'");
}

struct LineageEntry {
  Phase phase = Phase::init;
  std::string task_id;
  std::uint64_t config_digest = 0;
  bool head_reinitialized = false;

  friend bool operator==(const LineageEntry&, const LineageEntry&) = default;
};

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::vector<LineageEntry> lineage;
  int format_version = kCheckpointFormatVersion;

  void validate() const {
    if (lineage.empty()) throw ValidationError("checkpoint lineage is empty");
    if (lineage.front().phase != Phase::init) throw ValidationError("checkpoint lineage must start with init");
    params.check_shapes();
  }
};

// ---------------------------------------------------------------------------
// Evaluation

inline double accuracy(const ModelParams& params, const LabeledDataset& data) {
  return accuracy_of_logits(forward(params, data.inputs).output(), data.labels);
}

inline double evaluate_loss(const ModelParams& params, const LabeledDataset& data,
                            LossKind kind = LossKind::cross_entropy) {
  return loss_value(params, data.inputs, data.labels, kind);
}

// ---------------------------------------------------------------------------
// Training

/// Called after every SGD step with the global step index (0-based) and the
/// parameters after that step.
using StepObserver = std::function<void(std::size_t, const ModelParams&)>;

/// Plain minibatch SGD. Epoch e (counting from `first_epoch`) visits the data
/// in a Fisher-Yates order drawn from derive_seed(config.shuffle_seed, e); the
/// last batch of an epoch may be short. Runs epochs * ceil(n / batch) steps.
inline ModelParams train(const ModelParams& init, const LabeledDataset& data, const TrainConfig& config,
                         std::size_t first_epoch = 0, const StepObserver& observer = {}) {
  config.validate();
  data.validate();
  init.check_shapes();
  if (static_cast<std::size_t>(data.num_classes) != init.spec.output_dim())
    throw ValidationError("train: dataset has " + std::to_string(data.num_classes) + " classes, model outputs " +
                          std::to_string(init.spec.output_dim()));
  if (data.input_dim() != init.spec.input_dim()) throw ShapeError("train: dataset input dim differs from d_0");

  ModelParams params = init;
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  Matrix batch_x;
  std::vector<int> batch_y;
  std::size_t step = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.shuffle_seed, first_epoch + e));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t m = std::min(config.batch_size, n - start);
      batch_x.resize(data.inputs.rows(), static_cast<Eigen::Index>(m));
      batch_y.resize(m);
      for (std::size_t k = 0; k < m; ++k) {
        batch_x.col(static_cast<Eigen::Index>(k)) = data.inputs.col(static_cast<Eigen::Index>(order[start + k]));
        batch_y[k] = data.labels[order[start + k]];
      }
      const auto g = loss_and_grad(params, batch_x, batch_y, config.loss_kind);
      if (!std::isfinite(g.loss)) throw NumericError("train: loss diverged at step " + std::to_string(step));
      params = sgd_step(params, g, config.lr);
      if (observer) observer(step, params);
      ++step;
    }
  }
  return params;
}

struct FamilySeeds {
  std::uint64_t init = 0;  // network initialization
  std::uint64_t head = 1;  // fresh output layers when class counts change
};

struct PretrainFinetuneFamily {
  Checkpoint pretrained;
  std::vector<Checkpoint> finetuned;
};

/// Pretrains from a seeded init, then finetunes one copy per task.
///
/// `finetune_configs` holds either one config per task or a single config
/// that is shared; in the shared case task k shuffles with
/// derive_seed(config.shuffle_seed, k) so tasks never share a data order.
/// A task whose class count differs from the pretrained head gets a freshly
/// seeded output layer; hidden layers are always inherited.
inline PretrainFinetuneFamily pretrain_finetune_family(const ModelSpec& spec, const LabeledDataset& pretrain_task,
                                                       const std::vector<LabeledDataset>& finetune_tasks,
                                                       const TrainConfig& pretrain_config,
                                                       const std::vector<TrainConfig>& finetune_configs,
                                                       const FamilySeeds& seeds) {
  spec.validate();
  if (finetune_configs.size() != 1 && finetune_configs.size() != finetune_tasks.size())
    throw ValidationError("pretrain_finetune_family: need one finetune config or one per task");

  PretrainFinetuneFamily fam;
  const ModelParams init = init_params(spec, seeds.init);
  const LineageEntry init_entry{Phase::init, "seed=" + std::to_string(seeds.init), 0, false};
  fam.pretrained.params = train(init, pretrain_task, pretrain_config);
  fam.pretrained.lineage = {init_entry, {Phase::pretrain, pretrain_task.task_id, pretrain_config.digest(), false}};

  for (std::size_t k = 0; k < finetune_tasks.size(); ++k) {
    TrainConfig cfg = finetune_configs.size() == 1 ? finetune_configs.front() : finetune_configs[k];
    if (finetune_configs.size() == 1) cfg.shuffle_seed = derive_seed(cfg.shuffle_seed, k);
    const auto& task = finetune_tasks[k];
    ModelParams start = fam.pretrained.params;
    bool reinit = false;
    if (static_cast<std::size_t>(task.num_classes) != spec.output_dim()) {
      ModelSpec head_spec = spec;
      head_spec.layer_dims.back() = static_cast<std::size_t>(task.num_classes);
      ModelParams fresh = init_params(head_spec, derive_seed(seeds.head, k));
      for (std::size_t l = 0; l + 1 < start.depth(); ++l) {
        fresh.weights[l] = start.weights[l];
        fresh.biases[l] = start.biases[l];
      }
      start = std::move(fresh);
      reinit = true;
    }
    Checkpoint ft;
    ft.params = train(start, task, cfg);
    ft.lineage = fam.pretrained.lineage;
    ft.lineage.push_back({Phase::finetune, task.task_id, cfg.digest(), reinit});
    fam.finetuned.push_back(std::move(ft));
  }
  return fam;
}

struct SpawnFamily {
  Checkpoint anchor;
  std::pair<Checkpoint, Checkpoint> branches;
};

/// Trains jointly for `joint_epochs`, then continues two copies for the
/// remaining epochs with data orders drawn from the two branch seeds.
/// Epoch numbering continues across the split so the joint prefix is shared.
inline SpawnFamily spawn_family(const ModelSpec& spec, const LabeledDataset& task, std::size_t joint_epochs,
                                std::size_t total_epochs, const TrainConfig& config, std::uint64_t init_seed,
                                std::pair<std::uint64_t, std::uint64_t> branch_seeds) {
  if (joint_epochs > total_epochs) throw ValidationError("spawn_family: joint epochs exceed total epochs");
  if (total_epochs == 0) throw ValidationError("spawn_family: total epochs must be positive");
  SpawnFamily fam;
  fam.anchor.params = init_params(spec, init_seed);
  fam.anchor.lineage = {{Phase::init, "seed=" + std::to_string(init_seed), 0, false}};
  if (joint_epochs > 0) {
    TrainConfig joint = config;
    joint.epochs = joint_epochs;
    fam.anchor.params = train(fam.anchor.params, task, joint);
    fam.anchor.lineage.push_back({Phase::pretrain, task.task_id, joint.digest(), false});
  }
  auto branch = [&](std::uint64_t seed) {
    Checkpoint c = fam.anchor;
    if (total_epochs > joint_epochs) {
      TrainConfig cfg = config;
      cfg.epochs = total_epochs - joint_epochs;
      cfg.shuffle_seed = seed;
      c.params = train(c.params, task, cfg, joint_epochs);
      c.lineage.push_back({Phase::spawn, task.task_id, cfg.digest(), false});
    }
    return c;
  };
  fam.branches = {branch(branch_seeds.first), branch(branch_seeds.second)};
  return fam;
}

// ---------------------------------------------------------------------------
// Checkpoint JSON

namespace detail {

/// Shortest decimal string that parses back to the identical double.
inline std::string shortest_repr(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline double parse_double(const nlohmann::json& j, const std::string& where) {
  if (!j.is_string()) throw CheckpointSchemaError(where + ": expected a decimal string");
  const auto& s = j.get_ref<const std::string&>();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw CheckpointSchemaError(where + ": '" + s + "' is not a decimal number");
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw CheckpointSchemaError("config_digest '" + s + "' is not hex");
  return v;
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, bool (nlohmann::json::*is)() const noexcept,
                              const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !(j.at(key).*is)())
    throw CheckpointSchemaError(where + ": missing or mistyped field '" + key + "'");
  return j.at(key);
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  c.validate();
  nlohmann::json j;
  j["format_version"] = c.format_version;
  j["spec"]["layer_dims"] = c.params.spec.layer_dims;
  auto& lineage = j["lineage"] = nlohmann::json::array();
  for (const auto& e : c.lineage)
    lineage.push_back({{"phase", to_string(e.phase)},
                       {"task_id", e.task_id},
                       {"config_digest", detail::hex64(e.config_digest)},
                       {"head_reinitialized", e.head_reinitialized}});
  auto& layers = j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < c.params.depth(); ++l) {
    nlohmann::json w = nlohmann::json::array(), b = nlohmann::json::array();
    const auto& W = c.params.weights[l];
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index k = 0; k < W.cols(); ++k) w.push_back(detail::shortest_repr(W(r, k)));
    for (Eigen::Index r = 0; r < c.params.biases[l].size(); ++r)
      b.push_back(detail::shortest_repr(c.params.biases[l][r]));
    layers.push_back({{"weights", std::move(w)}, {"bias", std::move(b)}});
  }
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  using nlohmann::json;
  if (!j.is_object()) throw CheckpointSchemaError("checkpoint root must be an object");
  const auto& ver = detail::require(j, "format_version", &json::is_number_integer, "checkpoint");
  if (ver.get<int>() != kCheckpointFormatVersion)
    throw CheckpointVersionError("unsupported checkpoint format_version " + ver.dump() + " (expected " +
                                 std::to_string(kCheckpointFormatVersion) + ")");
  const auto& spec_j = detail::require(j, "spec", &json::is_object, "checkpoint");
  const auto& dims_j = detail::require(spec_j, "layer_dims", &json::is_array, "spec");
  ModelSpec spec;
  for (const auto& d : dims_j) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0)
      throw CheckpointShapeError("spec.layer_dims entries must be positive integers");
    spec.layer_dims.push_back(d.get<std::size_t>());
  }
  if (spec.layer_dims.size() < 2) throw CheckpointShapeError("spec.layer_dims needs at least two entries");

  Checkpoint c;
  for (const auto& e : detail::require(j, "lineage", &json::is_array, "checkpoint")) {
    LineageEntry le;
    le.phase = phase_from_string(detail::require(e, "phase", &json::is_string, "lineage").get<std::string>());
    le.task_id = detail::require(e, "task_id", &json::is_string, "lineage").get<std::string>();
    le.config_digest =
        detail::parse_hex64(detail::require(e, "config_digest", &json::is_string, "lineage").get<std::string>());
    if (e.contains("head_reinitialized")) {
      if (!e.at("head_reinitialized").is_boolean()) throw CheckpointSchemaError("lineage: head_reinitialized");
      le.head_reinitialized = e.at("head_reinitialized").get<bool>();
    }
    c.lineage.push_back(std::move(le));
  }
  if (c.lineage.empty() || c.lineage.front().phase != Phase::init)
    throw CheckpointSchemaError("lineage must be non-empty and start with init");

  const auto& layers = detail::require(j, "layers", &json::is_array, "checkpoint");
  if (layers.size() != spec.depth())
    throw CheckpointShapeError("checkpoint has " + std::to_string(layers.size()) + " layers, spec implies " +
                               std::to_string(spec.depth()));
  c.params = ModelParams::zeros(spec);
  for (std::size_t l = 0; l < spec.depth(); ++l) {
    const std::string where = "layers[" + std::to_string(l) + "]";
    const auto& w = detail::require(layers[l], "weights", &json::is_array, where);
    const auto& b = detail::require(layers[l], "bias", &json::is_array, where);
    auto& W = c.params.weights[l];
    if (w.size() != static_cast<std::size_t>(W.size()) || b.size() != static_cast<std::size_t>(W.rows()))
      throw CheckpointShapeError(where + ": entry count inconsistent with spec.layer_dims");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < W.rows(); ++r)
      for (Eigen::Index q = 0; q < W.cols(); ++q) W(r, q) = detail::parse_double(w[k++], where + ".weights");
    for (Eigen::Index r = 0; r < W.rows(); ++r) c.params.biases[l][r] = detail::parse_double(b[r], where + ".bias");
  }
  if (!c.params.all_finite()) throw CheckpointSchemaError("checkpoint holds non-finite parameters");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << checkpoint_to_json(c).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointSchemaError(std::string("malformed checkpoint JSON: ") + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ctl
