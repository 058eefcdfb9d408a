#pragma once

// Experiment configuration for the lab runner: JSON parsing with field-path
// diagnostics, a canonical re-serialization (the digest is taken over it), and
// construction of the task datasets a config names.
//
// Format (config_version 1) is documented in docs/config.md.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/rng.hpp"
#include "ctl/spectral.hpp"
#include "ctl/training.hpp"

namespace ctl {

inline constexpr int kConfigVersion = 1;

inline const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names{"ctl_sweep",          "barrier",          "model_averaging",
                                              "avg_vs_ensemble",    "task_addition",    "task_negation",
                                              "stitch_addition",    "stitch_negation",  "ablation_no_pretrain",
                                              "ablation_random_label", "theorem1_audit", "lemma_checks"};
  return names;
}

struct Diagnostic {
  std::string path;  // dotted field path, e.g. "pretrain.train.lr"
  std::string message;
};

inline std::string to_string(const Diagnostic& d) { return d.path + ": " + d.message; }

/// Raised by parse_config when diagnostics are non-empty.
class ConfigError : public ValidationError {
 public:
  explicit ConfigError(std::vector<Diagnostic> diags)
      : ValidationError(diags.empty() ? "invalid config" : to_string(diags.front())), diagnostics(std::move(diags)) {}
  std::vector<Diagnostic> diagnostics;
};

struct TaskSpec {
  std::string kind = "rotated";  // rotated | split_classes | shuffled_labels
  double angle = 0.0;
  int class_lo = 0, class_hi = 0;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx
  std::uint64_t seed = 0;
  int grid = 16;
  int num_classes = 10;
  double noise_sigma = 0.1;
  std::size_t n_train = 20000, n_test = 2000;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t eval_per_task = 1000;  // test samples per task in evaluation sets
};

struct PretrainBlock {
  std::vector<TaskSpec> tasks;  // concatenated
  TrainConfig train;
  std::uint64_t init_seed = 0;
};

struct FinetuneBlock {
  std::vector<TaskSpec> tasks;
  std::vector<TrainConfig> trains;  // one shared config or one per task
  std::uint64_t head_seed = 1;
};

struct BarrierBlock {
  TaskSpec task;
  TrainConfig train;
  std::uint64_t init_seed = 0;
  std::size_t spawn_epochs = 1, total_epochs = 2;
  std::pair<std::uint64_t, std::uint64_t> branch_seeds{1, 2};
  std::pair<std::uint64_t, std::uint64_t> independent_init_seeds{10, 11};
};

struct AveragingBlock {
  std::size_t subset_size = 3;
  bool with_replacement = true;  // multisets; otherwise plain subsets
};

struct ArithmeticBlock {
  double lambda = 0.4;
  double scale = 2.0;  // addition compares against theta_PT + scale*lambda*tau
};

struct StitchBlock {
  std::size_t layer = 0;  // 0: middle hidden layer
  std::vector<double> lambdas;
  std::optional<TaskSpec> control_task;  // negation: the pretraining-task evaluation set
};

struct AblationBlock {
  std::size_t probe_count = 512;
  std::size_t max_passes = 20;
  std::size_t scratch_epochs = 0;
  std::pair<std::uint64_t, std::uint64_t> init_seeds{0, 1};
  std::uint64_t label_shuffle_seed = 0;
  std::size_t random_pretrain_epochs = 0;
};

struct AuditAnchor {
  double lr = 0.1;
  std::size_t epochs = 1;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t init_seed = 0;
};

struct SurrogateBlock {
  std::size_t input_dim = 4, hidden = 5, classes = 3, samples = 40;
  std::size_t pairs = 12;
  std::uint64_t seed = 0;
};

struct AuditBlock {
  std::vector<AuditAnchor> anchors;
  std::vector<double> finetune_lrs;
  std::size_t eval_per_task = 300;
  double alpha = 0.5;
  PowerIterationOptions power{1e-6, 3000, 1e-6, 0};
  SurrogateBlock surrogate;
};

struct LemmaBlock {
  std::size_t instances = 100;
  std::size_t grid_points = 11;
  std::size_t samples = 40, input_dim = 6, classes = 3;
  std::uint64_t seed = 0;
  std::size_t draws = 20;  // random convex coefficient vectors for the multi-model check
  std::uint64_t coeff_seed = 0;
};

struct ExperimentConfig {
  int config_version = kConfigVersion;
  std::string recipe;
  std::string output_dir;
  std::vector<std::size_t> hidden_dims{100, 100};
  DataConfig data;
  std::optional<PretrainBlock> pretrain;
  std::optional<FinetuneBlock> finetune;
  std::vector<double> alphas{0.25, 0.5, 0.75};
  std::vector<std::size_t> layers;  // empty: every comparable layer
  std::optional<BarrierBlock> barrier;
  AveragingBlock averaging;
  ArithmeticBlock arithmetic;
  StitchBlock stitch;
  AblationBlock ablation;
  std::optional<AuditBlock> audit;
  LemmaBlock lemma;
  bool save_checkpoints = false;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

using nlohmann::json;

class Reader {
 public:
  std::vector<Diagnostic> diags;

  void error(const std::string& path, std::string msg) { diags.push_back({path, std::move(msg)}); }

  static std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

  void known_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) return;
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (!allowed.count(it.key())) error(join(path, it.key()), "unknown field");
  }

  bool object(const json& j, const std::string& path) {
    if (j.is_object()) return true;
    error(path, "expected an object");
    return false;
  }

  template <class T>
  void number(const json& obj, const char* key, const std::string& path, T& out, bool required = false) {
    const std::string p = join(path, key);
    if (!obj.contains(key)) {
      if (required) error(p, "required field is missing");
      return;
    }
    const json& v = obj.at(key);
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return error(p, "expected a number");
      out = v.get<double>();
      if (!std::isfinite(out)) error(p, "must be finite");
    } else {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        return error(p, "expected a non-negative integer");
      out = static_cast<T>(v.get<std::uint64_t>());
    }
  }

  void string(const json& obj, const char* key, const std::string& path, std::string& out, bool required = false) {
    const std::string p = join(path, key);
    if (!obj.contains(key)) {
      if (required) error(p, "required field is missing");
      return;
    }
    if (!obj.at(key).is_string()) return error(p, "expected a string");
    out = obj.at(key).get<std::string>();
  }

  void boolean(const json& obj, const char* key, const std::string& path, bool& out) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_boolean()) return error(join(path, key), "expected true or false");
    out = obj.at(key).get<bool>();
  }

  template <class T>
  void number_list(const json& obj, const char* key, const std::string& path, std::vector<T>& out, bool required = false) {
    const std::string p = join(path, key);
    if (!obj.contains(key)) {
      if (required) error(p, "required field is missing");
      return;
    }
    const json& v = obj.at(key);
    if (!v.is_array()) return error(p, "expected an array");
    out.clear();
    for (std::size_t k = 0; k < v.size(); ++k) {
      json wrap = {{"v", v[k]}};
      T x{};
      const auto before = diags.size();
      number(wrap, "v", p + "[" + std::to_string(k) + "]", x);
      if (diags.size() > before) diags.back().path = p + "[" + std::to_string(k) + "]";
      out.push_back(x);
    }
  }

  template <class T>
  void seed_pair(const json& obj, const char* key, const std::string& path, std::pair<T, T>& out) {
    std::vector<T> v;
    if (!obj.contains(key)) return;
    number_list(obj, key, path, v);
    if (v.size() != 2) return error(join(path, key), "expected exactly two entries");
    out = {v[0], v[1]};
  }

  TaskSpec task(const json& j, const std::string& path) {
    TaskSpec t;
    if (!object(j, path)) return t;
    known_keys(j, path, {"kind", "angle", "class_lo", "class_hi", "seed"});
    string(j, "kind", path, t.kind, true);
    if (t.kind == "rotated") {
      number(j, "angle", path, t.angle, true);
      if (!(t.angle >= 0.0 && t.angle < 360.0)) error(join(path, "angle"), "rotation angle must lie in [0, 360)");
    } else if (t.kind == "split_classes") {
      number(j, "class_lo", path, t.class_lo, true);
      number(j, "class_hi", path, t.class_hi, true);
      if (t.class_hi < t.class_lo) error(join(path, "class_hi"), "must not be below class_lo");
    } else if (t.kind == "shuffled_labels") {
      number(j, "seed", path, t.seed, true);
    } else {
      error(join(path, "kind"), "unknown task kind '" + t.kind + "' (rotated, split_classes, shuffled_labels)");
    }
    return t;
  }

  std::vector<TaskSpec> tasks(const json& obj, const char* key, const std::string& path) {
    std::vector<TaskSpec> out;
    const std::string p = join(path, key);
    if (!obj.contains(key)) {
      error(p, "required field is missing");
      return out;
    }
    if (!obj.at(key).is_array() || obj.at(key).empty()) {
      error(p, "expected a non-empty array of tasks");
      return out;
    }
    for (std::size_t k = 0; k < obj.at(key).size(); ++k) out.push_back(task(obj.at(key)[k], p + "[" + std::to_string(k) + "]"));
    return out;
  }

  TrainConfig train(const json& j, const std::string& path) {
    TrainConfig c;
    if (!object(j, path)) return c;
    known_keys(j, path, {"lr", "batch_size", "epochs", "loss", "shuffle_seed"});
    number(j, "lr", path, c.lr);
    if (!(c.lr > 0.0)) error(join(path, "lr"), "learning rate must be positive");
    number(j, "batch_size", path, c.batch_size);
    if (c.batch_size == 0) error(join(path, "batch_size"), "must be positive");
    number(j, "epochs", path, c.epochs);
    if (c.epochs == 0) error(join(path, "epochs"), "must be positive");
    std::string loss = to_string(c.loss_kind);
    string(j, "loss", path, loss);
    if (loss == "cross_entropy") c.loss_kind = LossKind::cross_entropy;
    else if (loss == "mse") c.loss_kind = LossKind::mse;
    else error(join(path, "loss"), "expected cross_entropy or mse");
    number(j, "shuffle_seed", path, c.shuffle_seed, true);
    return c;
  }

  void alphas(const std::vector<double>& a, const std::string& path, bool need_endpoints) {
    if (a.empty()) error(path, "at least one alpha is required");
    for (std::size_t k = 0; k < a.size(); ++k)
      if (!(a[k] >= 0.0 && a[k] <= 1.0))
        error(path + "[" + std::to_string(k) + "]",
              "alpha " + std::to_string(a[k]) + " is outside [0, 1]; interpolation is only defined on the segment");
    if (need_endpoints) {
      for (std::size_t k = 1; k < a.size(); ++k)
        if (!(a[k] > a[k - 1])) error(path, "alphas must be strictly increasing");
      if (a.empty() || a.front() != 0.0 || a.back() != 1.0) error(path, "a barrier sweep must start at 0 and end at 1");
    }
  }
};

}  // namespace detail

/// Parses and validates; throws ConfigError listing every diagnostic.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::Reader r;
  ExperimentConfig c;
  if (!j.is_object()) throw ConfigError(std::vector<Diagnostic>{{"", "config must be a JSON object"}});
  r.known_keys(j, "", {"config_version", "recipe", "output_dir", "model", "data", "pretrain", "finetune", "alphas",
                       "layers", "barrier", "averaging", "arithmetic", "stitch", "ablation", "audit", "lemma",
                       "save_checkpoints"});

  r.number(j, "config_version", "", c.config_version, true);
  if (j.contains("config_version") && c.config_version != kConfigVersion)
    r.error("config_version", "unsupported version " + std::to_string(c.config_version) + " (expected " +
                                  std::to_string(kConfigVersion) + ")");
  r.string(j, "recipe", "", c.recipe, true);
  const auto& names = recipe_names();
  const bool known = std::find(names.begin(), names.end(), c.recipe) != names.end();
  if (j.contains("recipe") && !known) r.error("recipe", "unknown recipe '" + c.recipe + "'");
  r.string(j, "output_dir", "", c.output_dir, true);
  r.boolean(j, "save_checkpoints", "", c.save_checkpoints);

  if (j.contains("model") && r.object(j["model"], "model")) {
    r.known_keys(j["model"], "model", {"hidden_dims"});
    r.number_list(j["model"], "hidden_dims", "model", c.hidden_dims);
    for (std::size_t k = 0; k < c.hidden_dims.size(); ++k)
      if (c.hidden_dims[k] == 0) r.error("model.hidden_dims[" + std::to_string(k) + "]", "must be positive");
  }

  if (j.contains("data") && r.object(j["data"], "data")) {
    const auto& d = j["data"];
    r.known_keys(d, "data", {"source", "seed", "grid", "num_classes", "noise_sigma", "n_train", "n_test", "train_images",
                             "train_labels", "test_images", "test_labels", "eval_per_task"});
    r.string(d, "source", "data", c.data.source);
    if (c.data.source == "synthetic") {
      r.number(d, "seed", "data", c.data.seed, true);
      r.number(d, "grid", "data", c.data.grid);
      r.number(d, "num_classes", "data", c.data.num_classes);
      r.number(d, "noise_sigma", "data", c.data.noise_sigma);
      r.number(d, "n_train", "data", c.data.n_train);
      r.number(d, "n_test", "data", c.data.n_test);
      if (c.data.grid < 2) r.error("data.grid", "must be at least 2");
      if (c.data.num_classes < 2) r.error("data.num_classes", "must be at least 2");
      if (c.data.noise_sigma < 0.0) r.error("data.noise_sigma", "must be non-negative");
      if (c.data.n_train == 0) r.error("data.n_train", "must be positive");
      if (c.data.n_test == 0) r.error("data.n_test", "must be positive");
    } else if (c.data.source == "idx") {
      r.string(d, "train_images", "data", c.data.train_images, true);
      r.string(d, "train_labels", "data", c.data.train_labels, true);
      r.string(d, "test_images", "data", c.data.test_images, true);
      r.string(d, "test_labels", "data", c.data.test_labels, true);
      r.number(d, "num_classes", "data", c.data.num_classes);
    } else {
      r.error("data.source", "expected synthetic or idx");
    }
    r.number(d, "eval_per_task", "data", c.data.eval_per_task);
    if (c.data.eval_per_task == 0) r.error("data.eval_per_task", "must be positive");
  } else if (!j.contains("data")) {
    r.error("data", "required field is missing");
  }

  if (j.contains("pretrain") && r.object(j["pretrain"], "pretrain")) {
    const auto& p = j["pretrain"];
    r.known_keys(p, "pretrain", {"tasks", "train", "init_seed"});
    PretrainBlock b;
    b.tasks = r.tasks(p, "tasks", "pretrain");
    if (p.contains("train")) b.train = r.train(p["train"], "pretrain.train");
    else r.error("pretrain.train", "required field is missing");
    r.number(p, "init_seed", "pretrain", b.init_seed, true);
    c.pretrain = b;
  }

  if (j.contains("finetune") && r.object(j["finetune"], "finetune")) {
    const auto& f = j["finetune"];
    r.known_keys(f, "finetune", {"tasks", "train", "trains", "head_seed"});
    FinetuneBlock b;
    b.tasks = r.tasks(f, "tasks", "finetune");
    if (f.contains("train") == f.contains("trains")) {
      r.error("finetune.train", "give exactly one of train (shared) or trains (per task)");
    } else if (f.contains("train")) {
      b.trains.push_back(r.train(f["train"], "finetune.train"));
    } else if (!f["trains"].is_array()) {
      r.error("finetune.trains", "expected an array");
    } else {
      for (std::size_t k = 0; k < f["trains"].size(); ++k)
        b.trains.push_back(r.train(f["trains"][k], "finetune.trains[" + std::to_string(k) + "]"));
    }
    r.number(f, "head_seed", "finetune", b.head_seed);
    c.finetune = b;
  }

  r.number_list(j, "alphas", "", c.alphas);
  r.number_list(j, "layers", "", c.layers);
  for (std::size_t k = 0; k < c.layers.size(); ++k)
    if (c.layers[k] < 1 || c.layers[k] > c.hidden_dims.size() + 1)
      r.error("layers[" + std::to_string(k) + "]", "layer index out of range [1, " +
                                                       std::to_string(c.hidden_dims.size() + 1) + "]");

  if (j.contains("barrier") && r.object(j["barrier"], "barrier")) {
    const auto& b = j["barrier"];
    r.known_keys(b, "barrier", {"task", "train", "init_seed", "spawn_epochs", "total_epochs", "branch_seeds",
                                "independent_init_seeds"});
    BarrierBlock bb;
    if (b.contains("task")) bb.task = r.task(b["task"], "barrier.task");
    else r.error("barrier.task", "required field is missing");
    if (b.contains("train")) bb.train = r.train(b["train"], "barrier.train");
    else r.error("barrier.train", "required field is missing");
    r.number(b, "init_seed", "barrier", bb.init_seed, true);
    r.number(b, "spawn_epochs", "barrier", bb.spawn_epochs);
    r.number(b, "total_epochs", "barrier", bb.total_epochs);
    if (bb.total_epochs == 0) r.error("barrier.total_epochs", "must be positive");
    if (bb.spawn_epochs > bb.total_epochs) r.error("barrier.spawn_epochs", "must not exceed total_epochs");
    r.seed_pair(b, "branch_seeds", "barrier", bb.branch_seeds);
    r.seed_pair(b, "independent_init_seeds", "barrier", bb.independent_init_seeds);
    c.barrier = bb;
  }

  if (j.contains("averaging") && r.object(j["averaging"], "averaging")) {
    r.known_keys(j["averaging"], "averaging", {"subset_size", "with_replacement"});
    r.number(j["averaging"], "subset_size", "averaging", c.averaging.subset_size);
    r.boolean(j["averaging"], "with_replacement", "averaging", c.averaging.with_replacement);
    if (c.averaging.subset_size == 0) r.error("averaging.subset_size", "must be positive");
  }

  if (j.contains("arithmetic") && r.object(j["arithmetic"], "arithmetic")) {
    r.known_keys(j["arithmetic"], "arithmetic", {"lambda", "scale"});
    r.number(j["arithmetic"], "lambda", "arithmetic", c.arithmetic.lambda);
    r.number(j["arithmetic"], "scale", "arithmetic", c.arithmetic.scale);
  }

  if (j.contains("stitch") && r.object(j["stitch"], "stitch")) {
    const auto& s = j["stitch"];
    r.known_keys(s, "stitch", {"layer", "lambdas", "control_task"});
    r.number(s, "layer", "stitch", c.stitch.layer);
    if (c.stitch.layer > 0 && c.stitch.layer > c.hidden_dims.size())
      r.error("stitch.layer", "must be a hidden layer in [1, " + std::to_string(c.hidden_dims.size()) + "]");
    r.number_list(s, "lambdas", "stitch", c.stitch.lambdas);
    if (s.contains("control_task")) c.stitch.control_task = r.task(s["control_task"], "stitch.control_task");
  }

  if (j.contains("ablation") && r.object(j["ablation"], "ablation")) {
    const auto& a = j["ablation"];
    r.known_keys(a, "ablation", {"probe_count", "max_passes", "scratch_epochs", "init_seeds", "label_shuffle_seed",
                                 "random_pretrain_epochs"});
    r.number(a, "probe_count", "ablation", c.ablation.probe_count);
    r.number(a, "max_passes", "ablation", c.ablation.max_passes);
    r.number(a, "scratch_epochs", "ablation", c.ablation.scratch_epochs);
    r.seed_pair(a, "init_seeds", "ablation", c.ablation.init_seeds);
    r.number(a, "label_shuffle_seed", "ablation", c.ablation.label_shuffle_seed);
    r.number(a, "random_pretrain_epochs", "ablation", c.ablation.random_pretrain_epochs);
    if (c.ablation.probe_count == 0) r.error("ablation.probe_count", "must be positive");
    if (c.ablation.max_passes == 0) r.error("ablation.max_passes", "must be positive");
  }

  if (j.contains("audit") && r.object(j["audit"], "audit")) {
    const auto& a = j["audit"];
    r.known_keys(a, "audit", {"anchors", "finetune_lrs", "eval_per_task", "alpha", "power_iteration", "surrogate"});
    AuditBlock ab;
    if (!a.contains("anchors") || !a["anchors"].is_array() || a["anchors"].empty()) {
      r.error("audit.anchors", "expected a non-empty array of anchors");
    } else {
      for (std::size_t k = 0; k < a["anchors"].size(); ++k) {
        const std::string p = "audit.anchors[" + std::to_string(k) + "]";
        const auto& an = a["anchors"][k];
        AuditAnchor x;
        if (r.object(an, p)) {
          r.known_keys(an, p, {"lr", "epochs", "shuffle_seed", "init_seed"});
          r.number(an, "lr", p, x.lr, true);
          if (!(x.lr > 0.0)) r.error(p + ".lr", "learning rate must be positive");
          r.number(an, "epochs", p, x.epochs);
          if (x.epochs == 0) r.error(p + ".epochs", "must be positive");
          r.number(an, "shuffle_seed", p, x.shuffle_seed, true);
          r.number(an, "init_seed", p, x.init_seed, true);
        }
        ab.anchors.push_back(x);
      }
    }
    r.number_list(a, "finetune_lrs", "audit", ab.finetune_lrs, true);
    for (std::size_t k = 0; k < ab.finetune_lrs.size(); ++k)
      if (!(ab.finetune_lrs[k] > 0.0)) r.error("audit.finetune_lrs[" + std::to_string(k) + "]", "learning rate must be positive");
    r.number(a, "eval_per_task", "audit", ab.eval_per_task);
    r.number(a, "alpha", "audit", ab.alpha);
    if (!(ab.alpha >= 0.0 && ab.alpha <= 1.0))
      r.error("audit.alpha", "alpha is outside [0, 1]; interpolation is only defined on the segment");
    if (a.contains("power_iteration") && r.object(a["power_iteration"], "audit.power_iteration")) {
      const auto& pi = a["power_iteration"];
      r.known_keys(pi, "audit.power_iteration", {"tol", "max_iters", "hvp_epsilon", "seed"});
      r.number(pi, "tol", "audit.power_iteration", ab.power.tol);
      r.number(pi, "max_iters", "audit.power_iteration", ab.power.max_iters);
      r.number(pi, "hvp_epsilon", "audit.power_iteration", ab.power.hvp_epsilon);
      r.number(pi, "seed", "audit.power_iteration", ab.power.seed);
      if (!(ab.power.tol > 0.0)) r.error("audit.power_iteration.tol", "must be positive");
      if (ab.power.max_iters == 0) r.error("audit.power_iteration.max_iters", "must be positive");
      if (!(ab.power.hvp_epsilon > 0.0)) r.error("audit.power_iteration.hvp_epsilon", "must be positive");
    }
    if (a.contains("surrogate") && r.object(a["surrogate"], "audit.surrogate")) {
      const auto& s = a["surrogate"];
      const std::string p = "audit.surrogate";
      r.known_keys(s, p, {"input_dim", "hidden", "classes", "samples", "pairs", "seed"});
      r.number(s, "input_dim", p, ab.surrogate.input_dim);
      r.number(s, "hidden", p, ab.surrogate.hidden);
      r.number(s, "classes", p, ab.surrogate.classes);
      r.number(s, "samples", p, ab.surrogate.samples);
      r.number(s, "pairs", p, ab.surrogate.pairs);
      r.number(s, "seed", p, ab.surrogate.seed);
      if (ab.surrogate.input_dim == 0 || ab.surrogate.hidden == 0 || ab.surrogate.samples == 0)
        r.error(p, "dimensions and sample count must be positive");
      if (ab.surrogate.classes < 2) r.error(p + ".classes", "must be at least 2");
    }
    c.audit = ab;
  }

  if (j.contains("lemma") && r.object(j["lemma"], "lemma")) {
    const auto& l = j["lemma"];
    r.known_keys(l, "lemma", {"instances", "grid_points", "samples", "input_dim", "classes", "seed", "draws", "coeff_seed"});
    r.number(l, "instances", "lemma", c.lemma.instances);
    r.number(l, "grid_points", "lemma", c.lemma.grid_points);
    r.number(l, "samples", "lemma", c.lemma.samples);
    r.number(l, "input_dim", "lemma", c.lemma.input_dim);
    r.number(l, "classes", "lemma", c.lemma.classes);
    r.number(l, "seed", "lemma", c.lemma.seed);
    r.number(l, "draws", "lemma", c.lemma.draws);
    r.number(l, "coeff_seed", "lemma", c.lemma.coeff_seed);
    if (c.lemma.grid_points < 2) r.error("lemma.grid_points", "need at least the two endpoints");
    if (c.lemma.classes < 2) r.error("lemma.classes", "must be at least 2");
    if (c.lemma.samples == 0 || c.lemma.input_dim == 0) r.error("lemma", "samples and input_dim must be positive");
  }

  // Recipe-specific requirements.
  if (known) {
    const std::string& rc = c.recipe;
    if (rc != "barrier" && !c.pretrain) r.error("pretrain", "required by recipe " + rc);
    if (rc != "barrier" && !c.finetune) r.error("finetune", "required by recipe " + rc);
    if (c.finetune) {
      const auto n = c.finetune->tasks.size();
      const bool member_per_config = (rc == "model_averaging" || rc == "avg_vs_ensemble") && n == 1;
      if (c.finetune->trains.size() > 1 && c.finetune->trains.size() != n && !member_per_config)
        r.error("finetune.trains", "need one config per task (" + std::to_string(n) + ")");
      auto need = [&](bool ok, const std::string& what) {
        if (!ok) r.error("finetune.tasks", "recipe " + rc + " needs " + what);
      };
      if (rc == "ctl_sweep") need(n >= 2, "at least two tasks");
      if (rc == "task_addition" || rc == "stitch_addition" || rc == "ablation_no_pretrain" ||
          rc == "ablation_random_label" || rc == "theorem1_audit")
        need(n == 2, "exactly two tasks");
      if (rc == "task_negation" || rc == "stitch_negation") need(n == 1, "exactly one task");
      if (rc == "model_averaging" || rc == "avg_vs_ensemble") {
        need(n == 1 || n == c.finetune->trains.size(), "one task or one task per member");
        if (c.finetune->trains.size() < 2) r.error("finetune.trains", "recipe " + rc + " needs a family of at least two members");
      }
      if (rc == "lemma_checks") need(n >= 2, "at least two tasks");
      if (rc == "ablation_random_label" && c.finetune->trains.size() != 2)
        r.error("finetune.trains", "recipe " + rc + " needs two finetune configs");
    }
    if (rc == "barrier") {
      if (!c.barrier) r.error("barrier", "required by recipe barrier");
      r.alphas(c.alphas, "alphas", true);
    } else {
      r.alphas(c.alphas, "alphas", false);
    }
    if (rc == "stitch_negation" && !c.stitch.control_task) r.error("stitch.control_task", "required by recipe " + rc);
    if (rc == "stitch_addition" || rc == "stitch_negation") {
      for (std::size_t k = 0; k < c.stitch.lambdas.size(); ++k)
        if (!(c.stitch.lambdas[k] >= 0.0)) r.error("stitch.lambdas[" + std::to_string(k) + "]", "must be non-negative");
    }
    if (rc == "theorem1_audit" && !c.audit) r.error("audit", "required by recipe theorem1_audit");
  }

  if (!r.diags.empty()) throw ConfigError(std::move(r.diags));
  return c;
}

/// Diagnostics without throwing; empty when the config is valid.
inline std::vector<Diagnostic> validate_config(const nlohmann::json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.diagnostics;
  }
  return {};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::vector<Diagnostic>{{"", "cannot open " + path.string()}});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::vector<Diagnostic>{{"", path.string() + " is not valid JSON: " + e.what()}});
  }
}

// ---------------------------------------------------------------------------
// Canonical form

inline nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j{{"kind", t.kind}};
  if (t.kind == "rotated") j["angle"] = t.angle;
  if (t.kind == "split_classes") {
    j["class_lo"] = t.class_lo;
    j["class_hi"] = t.class_hi;
  }
  if (t.kind == "shuffled_labels") j["seed"] = t.seed;
  return j;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr}, {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"loss", to_string(c.loss_kind)},
          {"shuffle_seed", c.shuffle_seed}};
}

/// Every field with defaults filled in. Keys are sorted by nlohmann's object
/// map, so dump() of this is independent of the input's formatting and order.
inline nlohmann::json canonical_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json j;
  j["config_version"] = c.config_version;
  j["recipe"] = c.recipe;
  j["output_dir"] = c.output_dir;
  j["save_checkpoints"] = c.save_checkpoints;
  j["model"] = {{"hidden_dims", c.hidden_dims}};
  json d{{"source", c.data.source}, {"eval_per_task", c.data.eval_per_task}};
  if (c.data.source == "synthetic") {
    d["seed"] = c.data.seed;
    d["grid"] = c.data.grid;
    d["num_classes"] = c.data.num_classes;
    d["noise_sigma"] = c.data.noise_sigma;
    d["n_train"] = c.data.n_train;
    d["n_test"] = c.data.n_test;
  } else {
    d["train_images"] = c.data.train_images;
    d["train_labels"] = c.data.train_labels;
    d["test_images"] = c.data.test_images;
    d["test_labels"] = c.data.test_labels;
    d["num_classes"] = c.data.num_classes;
  }
  j["data"] = d;
  auto tasks = [](const std::vector<TaskSpec>& ts) {
    json a = json::array();
    for (const auto& t : ts) a.push_back(to_json(t));
    return a;
  };
  if (c.pretrain)
    j["pretrain"] = {{"tasks", tasks(c.pretrain->tasks)}, {"train", to_json(c.pretrain->train)},
                     {"init_seed", c.pretrain->init_seed}};
  if (c.finetune) {
    json f{{"tasks", tasks(c.finetune->tasks)}, {"head_seed", c.finetune->head_seed}};
    if (c.finetune->trains.size() == 1) {
      f["train"] = to_json(c.finetune->trains.front());
    } else {
      f["trains"] = json::array();
      for (const auto& t : c.finetune->trains) f["trains"].push_back(to_json(t));
    }
    j["finetune"] = f;
  }
  j["alphas"] = c.alphas;
  j["layers"] = c.layers;
  if (c.barrier) {
    const auto& b = *c.barrier;
    j["barrier"] = {{"task", to_json(b.task)},
                    {"train", to_json(b.train)},
                    {"init_seed", b.init_seed},
                    {"spawn_epochs", b.spawn_epochs},
                    {"total_epochs", b.total_epochs},
                    {"branch_seeds", {b.branch_seeds.first, b.branch_seeds.second}},
                    {"independent_init_seeds", {b.independent_init_seeds.first, b.independent_init_seeds.second}}};
  }
  j["averaging"] = {{"subset_size", c.averaging.subset_size}, {"with_replacement", c.averaging.with_replacement}};
  j["arithmetic"] = {{"lambda", c.arithmetic.lambda}, {"scale", c.arithmetic.scale}};
  j["stitch"] = {{"layer", c.stitch.layer}, {"lambdas", c.stitch.lambdas}};
  if (c.stitch.control_task) j["stitch"]["control_task"] = to_json(*c.stitch.control_task);
  j["ablation"] = {{"probe_count", c.ablation.probe_count},
                   {"max_passes", c.ablation.max_passes},
                   {"scratch_epochs", c.ablation.scratch_epochs},
                   {"init_seeds", {c.ablation.init_seeds.first, c.ablation.init_seeds.second}},
                   {"label_shuffle_seed", c.ablation.label_shuffle_seed},
                   {"random_pretrain_epochs", c.ablation.random_pretrain_epochs}};
  if (c.audit) {
    const auto& a = *c.audit;
    json anchors = json::array();
    for (const auto& an : a.anchors)
      anchors.push_back({{"lr", an.lr}, {"epochs", an.epochs}, {"shuffle_seed", an.shuffle_seed}, {"init_seed", an.init_seed}});
    j["audit"] = {{"anchors", anchors},
                  {"finetune_lrs", a.finetune_lrs},
                  {"eval_per_task", a.eval_per_task},
                  {"alpha", a.alpha},
                  {"power_iteration",
                   {{"tol", a.power.tol},
                    {"max_iters", a.power.max_iters},
                    {"hvp_epsilon", a.power.hvp_epsilon},
                    {"seed", a.power.seed}}},
                  {"surrogate",
                   {{"input_dim", a.surrogate.input_dim},
                    {"hidden", a.surrogate.hidden},
                    {"classes", a.surrogate.classes},
                    {"samples", a.surrogate.samples},
                    {"pairs", a.surrogate.pairs},
                    {"seed", a.surrogate.seed}}}};
  }
  j["lemma"] = {{"instances", c.lemma.instances}, {"grid_points", c.lemma.grid_points}, {"samples", c.lemma.samples},
                {"input_dim", c.lemma.input_dim}, {"classes", c.lemma.classes},         {"seed", c.lemma.seed},
                {"draws", c.lemma.draws},         {"coeff_seed", c.lemma.coeff_seed}};
  return j;
}

inline std::string canonical_text(const ExperimentConfig& c) { return canonical_json(c).dump(); }

inline std::uint64_t config_digest(const ExperimentConfig& c) { return fnv1a(canonical_text(c)); }

// ---------------------------------------------------------------------------
// Datasets

/// Train and test splits of the base data plus every task built from them.
class TaskFactory {
 public:
  explicit TaskFactory(const DataConfig& cfg) : cfg_(cfg) {
    if (cfg.source == "synthetic") {
      std::tie(train_, test_) = generate_synthetic_base(cfg.seed, cfg.n_train, cfg.n_test,
                                                        SyntheticOptions{cfg.grid, cfg.num_classes, cfg.noise_sigma});
    } else {
      train_ = read_idx(cfg.train_images, cfg.train_labels, cfg.num_classes, Split::train);
      test_ = read_idx(cfg.test_images, cfg.test_labels, cfg.num_classes, Split::test);
      if (train_.num_classes != test_.num_classes)
        throw ValidationError("data: train and test IDX files disagree on the class count");
    }
  }

  const LabeledDataset& base_train() const { return train_; }
  const LabeledDataset& base_test() const { return test_; }
  std::size_t input_dim() const { return train_.input_dim(); }
  int num_classes() const { return train_.num_classes; }

  LabeledDataset train(const TaskSpec& t) const { return apply(t, train_); }
  LabeledDataset test(const TaskSpec& t) const { return apply(t, test_); }
  LabeledDataset train(const std::vector<TaskSpec>& ts) const { return joined(ts, train_); }

  /// First eval_per_task test samples of each task, concatenated.
  LabeledDataset eval(const std::vector<TaskSpec>& ts, std::size_t per_task = 0) const {
    const std::size_t n = per_task ? per_task : cfg_.eval_per_task;
    LabeledDataset out = head(test(ts.front()), n);
    for (std::size_t k = 1; k < ts.size(); ++k) out = concat(out, head(test(ts[k]), n));
    return out;
  }
  LabeledDataset eval(const TaskSpec& t, std::size_t per_task = 0) const { return eval(std::vector<TaskSpec>{t}, per_task); }

 private:
  static TaskRecipe recipe_of(const TaskSpec& t) {
    TaskRecipe r;
    if (t.kind == "rotated") {
      r.kind = TaskRecipe::Kind::rotated;
      r.angle_degrees = t.angle;
    } else if (t.kind == "split_classes") {
      r.kind = TaskRecipe::Kind::split_classes;
      r.class_lo = t.class_lo;
      r.class_hi = t.class_hi;
    } else if (t.kind == "shuffled_labels") {
      r.kind = TaskRecipe::Kind::shuffled_labels;
      r.shuffle_seed = t.seed;
    } else {
      throw ValidationError("unknown task kind '" + t.kind + "'");
    }
    return r;
  }
  static LabeledDataset apply(const TaskSpec& t, const LabeledDataset& base) { return apply_recipe(recipe_of(t), base); }
  static LabeledDataset joined(const std::vector<TaskSpec>& ts, const LabeledDataset& base) {
    if (ts.empty()) throw ValidationError("no tasks given");
    LabeledDataset out = apply(ts.front(), base);
    for (std::size_t k = 1; k < ts.size(); ++k) out = concat(out, apply(ts[k], base));
    return out;
  }

  DataConfig cfg_;
  LabeledDataset train_, test_;
};

inline ModelSpec model_spec(const ExperimentConfig& c, std::size_t input_dim, std::size_t num_classes) {
  ModelSpec s;
  s.layer_dims.push_back(input_dim);
  for (auto h : c.hidden_dims) s.layer_dims.push_back(h);
  s.layer_dims.push_back(num_classes);
  s.validate();
  return s;
}

}  // namespace ctl
