#pragma once

// The named experiments of the lab runner. Each recipe has a typed entry
// point (used by the acceptance suite) and an emitter that turns its result
// into CSV tables, a report document and manifest summary statistics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctl/alignment.hpp"
#include "ctl/arithmetic.hpp"
#include "ctl/config.hpp"
#include "ctl/connectivity.hpp"
#include "ctl/datasets.hpp"
#include "ctl/nncore.hpp"
#include "ctl/report.hpp"
#include "ctl/spectral.hpp"
#include "ctl/stats.hpp"
#include "ctl/training.hpp"

namespace ctl {

/// The stage a recipe is in; reported when a run fails.
struct StageLog {
  std::string current = "setup";
  void enter(std::string stage) { current = std::move(stage); }
};

struct RecipeOutput {
  std::vector<std::pair<std::string, CsvTable>> tables;  // file name, table
  nlohmann::json data = nlohmann::json::object();        // recipe-specific report body
  PlotSections plots;
  std::string default_plot = "errorbar";
  nlohmann::json summary = nlohmann::json::object();
  std::vector<std::pair<std::string, Checkpoint>> checkpoints;
};

inline std::string task_label(const TaskSpec& t) {
  char buf[64];
  if (t.kind == "rotated") {
    std::snprintf(buf, sizeof buf, "rot%g", t.angle);
  } else if (t.kind == "split_classes") {
    std::snprintf(buf, sizeof buf, "classes%d-%d", t.class_lo, t.class_hi);
  } else {
    std::snprintf(buf, sizeof buf, "shuffled%llu", static_cast<unsigned long long>(t.seed));
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Shared pieces

struct FamilyRun {
  ModelSpec spec;
  PretrainFinetuneFamily family;
  std::vector<TaskSpec> member_tasks;  // task of each finetuned member
};

/// Pretrains once and finetunes one member per finetune task; with a single
/// task and several train configs, one member per config on that task.
inline FamilyRun build_family(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  const auto& pt = *cfg.pretrain;
  const auto& ft = *cfg.finetune;
  FamilyRun run;
  run.member_tasks = ft.tasks;
  if (ft.tasks.size() == 1 && ft.trains.size() > 1) run.member_tasks.assign(ft.trains.size(), ft.tasks.front());

  log.enter("data");
  const LabeledDataset pt_data = data.train(pt.tasks);
  std::vector<LabeledDataset> ft_data;
  for (const auto& t : run.member_tasks) ft_data.push_back(data.train(t));
  run.spec = model_spec(cfg, data.input_dim(), static_cast<std::size_t>(pt_data.num_classes));

  log.enter("pretrain+finetune");
  run.family = pretrain_finetune_family(run.spec, pt_data, ft_data, pt.train, ft.trains, {pt.init_seed, ft.head_seed});
  return run;
}

inline std::vector<std::size_t> resolve_layers(const ExperimentConfig& cfg, const ModelSpec& spec, bool shared_heads) {
  return cfg.layers.empty() ? comparable_layers(spec, shared_heads) : cfg.layers;
}

inline bool all_heads_shared(const std::vector<Checkpoint>& ms) {
  for (std::size_t a = 0; a < ms.size(); ++a)
    for (std::size_t b = a + 1; b < ms.size(); ++b)
      if (!heads_shared(ms[a], ms[b])) return false;
  return true;
}

inline void add_family_checkpoints(const FamilyRun& run, RecipeOutput& out) {
  out.checkpoints.push_back({"pretrained", run.family.pretrained});
  for (std::size_t k = 0; k < run.family.finetuned.size(); ++k)
    out.checkpoints.push_back({"finetuned_" + std::to_string(k), run.family.finetuned[k]});
}

inline void add_summary_rows(CsvTable& t, std::vector<CsvTable::Cell> prefix, const char* metric, const Summary& s) {
  for (auto [stat, v] : {std::pair{"mean", s.mean}, std::pair{"q1", s.q1}, std::pair{"q3", s.q3}}) {
    auto row = prefix;
    row.emplace_back(metric);
    row.emplace_back(stat);
    row.emplace_back(v);
    t.add(std::move(row));
  }
}

inline nlohmann::json comparison_json(const LayerComparison& c) {
  return {{"layer", c.layer},
          {"one_minus_cosine", summary_json(c.one_minus_cosine)},
          {"coef", summary_json(c.coef)},
          {"baseline", summary_json(c.baseline_one_minus_cosine)}};
}

inline CsvTable comparison_table(const std::string& key_name) {
  return CsvTable({key_name, "layer", "metric", "statistic", "value"});
}

inline void add_comparison_rows(CsvTable& t, const std::string& key, const LayerComparison& c) {
  add_summary_rows(t, {key, c.layer}, "one_minus_cosine", c.one_minus_cosine);
  add_summary_rows(t, {key, c.layer}, "coef", c.coef);
  add_summary_rows(t, {key, c.layer}, "baseline", c.baseline_one_minus_cosine);
}

// ---------------------------------------------------------------------------
// ctl_sweep

struct CtlSweepResult {
  FamilyRun run;
  std::vector<std::size_t> layers;
  std::vector<InterpReport> pairs;
};

inline CtlSweepResult run_ctl_sweep(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  CtlSweepResult res;
  res.run = build_family(cfg, data, log);
  const auto& ft = res.run.family.finetuned;
  res.layers = resolve_layers(cfg, res.run.spec, all_heads_shared(ft));
  log.enter("measure");
  for (std::size_t a = 0; a < ft.size(); ++a)
    for (std::size_t b = a + 1; b < ft.size(); ++b) {
      const auto& ta = res.run.member_tasks[a];
      const auto& tb = res.run.member_tasks[b];
      const LabeledDataset eval = data.eval({ta, tb});
      res.pairs.push_back(ctl_sweep(ft[a], ft[b], eval, cfg.alphas, res.layers, task_label(ta) + "~" + task_label(tb)));
    }
  return res;
}

inline RecipeOutput emit(const CtlSweepResult& res) {
  RecipeOutput out;
  CsvTable t({"pair_id", "layer", "alpha", "metric", "statistic", "value"});
  nlohmann::json pairs = nlohmann::json::array();
  double worst_ratio = 0.0, min_median_coef = INFINITY, max_median_coef = -INFINITY;
  for (const auto& rep : res.pairs) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : rep.rows) {
      const Summary& base = rep.baseline_at(row.layer);
      add_summary_rows(t, {rep.pair_id, row.layer, row.alpha}, "one_minus_cosine", row.one_minus_cosine);
      add_summary_rows(t, {rep.pair_id, row.layer, row.alpha}, "coef", row.coef);
      add_summary_rows(t, {rep.pair_id, row.layer, row.alpha}, "baseline", base);
      rows.push_back({{"layer", row.layer},
                      {"alpha", row.alpha},
                      {"one_minus_cosine", summary_json(row.one_minus_cosine)},
                      {"coef", summary_json(row.coef)},
                      {"baseline", summary_json(base)}});
      out.plots.errorbars.push_back({rep.pair_id + " layer " + std::to_string(row.layer), row.alpha,
                                     row.one_minus_cosine.mean, row.one_minus_cosine.q1, row.one_minus_cosine.q3});
      worst_ratio = std::max(worst_ratio, row.one_minus_cosine.mean / base.mean);
      min_median_coef = std::min(min_median_coef, row.coef.median);
      max_median_coef = std::max(max_median_coef, row.coef.median);
    }
    pairs.push_back({{"pair_id", rep.pair_id}, {"eval_set_id", rep.eval_set_id}, {"rows", rows}});
  }
  out.tables.emplace_back("ctl_sweep.csv", std::move(t));
  out.data = {{"layers", res.layers}, {"pairs", pairs}};
  out.plots.title = "1 - cosine of interpolated features";
  out.plots.x_label = "alpha";
  out.plots.y_label = "1 - cosine";
  out.summary = {{"pairs", res.pairs.size()},
                 {"worst_ratio_to_baseline", worst_ratio},
                 {"min_median_coef", min_median_coef},
                 {"max_median_coef", max_median_coef}};
  add_family_checkpoints(res.run, out);
  return out;
}

// ---------------------------------------------------------------------------
// barrier

struct BarrierResult {
  ModelSpec spec;
  SpawnFamily spawned;
  std::pair<ModelParams, ModelParams> independent;
  BarrierReport spawned_report, independent_report;
};

inline BarrierResult run_barrier(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  const auto& b = *cfg.barrier;
  log.enter("data");
  const LabeledDataset task = data.train(b.task);
  const LabeledDataset eval = data.eval(b.task);
  BarrierResult res;
  res.spec = model_spec(cfg, data.input_dim(), static_cast<std::size_t>(task.num_classes));
  log.enter("spawn");
  res.spawned = spawn_family(res.spec, task, b.spawn_epochs, b.total_epochs, b.train, b.init_seed, b.branch_seeds);
  log.enter("independent");
  auto solo = [&](std::uint64_t init_seed, std::uint64_t shuffle_seed) {
    TrainConfig c = b.train;
    c.epochs = b.total_epochs;
    c.shuffle_seed = shuffle_seed;
    return train(init_params(res.spec, init_seed), task, c);
  };
  res.independent = {solo(b.independent_init_seeds.first, b.branch_seeds.first),
                     solo(b.independent_init_seeds.second, b.branch_seeds.second)};
  log.enter("measure");
  const auto loss = b.train.loss_kind;
  res.spawned_report =
      barrier_sweep(res.spawned.branches.first.params, res.spawned.branches.second.params, eval, cfg.alphas, loss);
  res.independent_report = barrier_sweep(res.independent.first, res.independent.second, eval, cfg.alphas, loss);
  return res;
}

inline RecipeOutput emit(const BarrierResult& res) {
  RecipeOutput out;
  CsvTable t({"pair", "alpha", "loss", "accuracy"});
  nlohmann::json body = nlohmann::json::object();
  for (const auto& [name, rep] : {std::pair{"spawned", &res.spawned_report}, std::pair{"independent", &res.independent_report}}) {
    for (std::size_t k = 0; k < rep->alphas.size(); ++k) {
      t.add({name, rep->alphas[k], rep->loss_at_alpha[k], rep->acc_at_alpha[k]});
      out.plots.errorbars.push_back({name, rep->alphas[k], rep->loss_at_alpha[k], rep->loss_at_alpha[k], rep->loss_at_alpha[k]});
    }
    body[name] = {{"alphas", rep->alphas},          {"loss", rep->loss_at_alpha},   {"accuracy", rep->acc_at_alpha},
                  {"loss_i", rep->loss_i},          {"loss_j", rep->loss_j},        {"acc_i", rep->acc_i},
                  {"acc_j", rep->acc_j},            {"barrier_height", rep->barrier_height}};
  }
  out.tables.emplace_back("barrier.csv", std::move(t));
  out.data = body;
  out.plots.title = "loss along the linear path";
  out.plots.x_label = "alpha";
  out.plots.y_label = "loss";
  out.summary = {{"spawned_barrier", res.spawned_report.barrier_height},
                 {"independent_barrier", res.independent_report.barrier_height}};
  out.checkpoints.push_back({"spawn_anchor", res.spawned.anchor});
  out.checkpoints.push_back({"spawn_branch_0", res.spawned.branches.first});
  out.checkpoints.push_back({"spawn_branch_1", res.spawned.branches.second});
  return out;
}

// ---------------------------------------------------------------------------
// model_averaging / avg_vs_ensemble

/// Index tuples of size k over n members: nondecreasing (multisets) when
/// `with_replacement`, strictly increasing otherwise; lexicographic order.
inline std::vector<std::vector<std::size_t>> member_subsets(std::size_t n, std::size_t k, bool with_replacement) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t start) {
    if (cur.size() == k) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      cur.push_back(i);
      rec(with_replacement ? i : i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

inline std::string subset_id(const std::vector<std::size_t>& s) {
  std::string id;
  for (std::size_t k = 0; k < s.size(); ++k) id += (k ? "-" : "") + std::to_string(s[k]);
  return id;
}

struct AveragingResult {
  FamilyRun run;
  std::vector<std::size_t> layers;
  std::vector<std::vector<std::size_t>> subsets;
  std::vector<AggregateReport> checks;             // model_averaging
  std::vector<AverageEnsembleAccuracy> accuracies;  // avg_vs_ensemble
  std::vector<double> member_accuracy;
  /// Per layer: mean over subsets of mean(1 - cos_avg) and of the baseline.
  std::vector<std::pair<double, double>> pooled;
  double pearson_r = 0.0;
};

inline AveragingResult run_averaging(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log,
                                     bool ctl_checks, bool accuracy_pairs) {
  AveragingResult res;
  res.run = build_family(cfg, data, log);
  const auto& ft = res.run.family.finetuned;
  res.layers = resolve_layers(cfg, res.run.spec, all_heads_shared(ft));
  std::vector<TaskSpec> distinct;
  for (const auto& t : res.run.member_tasks)
    if (std::none_of(distinct.begin(), distinct.end(), [&](const TaskSpec& d) { return task_label(d) == task_label(t); }))
      distinct.push_back(t);
  const LabeledDataset eval = data.eval(distinct);

  log.enter("measure");
  for (const auto& m : ft) res.member_accuracy.push_back(accuracy(m.params, eval));
  res.subsets = member_subsets(ft.size(), cfg.averaging.subset_size, cfg.averaging.with_replacement);
  for (const auto& s : res.subsets) {
    std::vector<ModelParams> models;
    for (auto i : s) models.push_back(ft[i].params);
    if (ctl_checks) {
      const std::vector<double> w(models.size(), 1.0 / static_cast<double>(models.size()));
      res.checks.push_back(multi_average_check(models, w, eval, res.layers));
    }
    if (accuracy_pairs) res.accuracies.push_back(avg_vs_ensemble(models, eval));
  }
  if (ctl_checks)
    for (std::size_t li = 0; li < res.layers.size(); ++li) {
      std::vector<double> m, b;
      for (const auto& c : res.checks) {
        m.push_back(c.layers[li].one_minus_cosine.mean);
        b.push_back(c.layers[li].baseline_one_minus_cosine.mean);
      }
      res.pooled.emplace_back(mean(m), mean(b));
    }
  if (accuracy_pairs && res.accuracies.size() >= 2) {
    std::vector<double> x, y;
    for (const auto& a : res.accuracies) {
      x.push_back(a.acc_avg);
      y.push_back(a.acc_ens);
    }
    res.pearson_r = pearson(x, y);
  }
  return res;
}

inline RecipeOutput emit_model_averaging(const AveragingResult& res) {
  RecipeOutput out;
  CsvTable t = comparison_table("subset_id");
  nlohmann::json subsets = nlohmann::json::array();
  for (std::size_t k = 0; k < res.subsets.size(); ++k) {
    const std::string id = subset_id(res.subsets[k]);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& c : res.checks[k].layers) {
      add_comparison_rows(t, id, c);
      layers.push_back(comparison_json(c));
    }
    subsets.push_back({{"subset_id", id}, {"members", res.subsets[k]}, {"layers", layers}});
  }
  CsvTable pooled({"layer", "mean_one_minus_cosine_avg", "mean_one_minus_cosine_base"});
  nlohmann::json pooled_json = nlohmann::json::array();
  for (std::size_t li = 0; li < res.layers.size(); ++li) {
    pooled.add({res.layers[li], res.pooled[li].first, res.pooled[li].second});
    pooled_json.push_back({{"layer", res.layers[li]}, {"one_minus_cosine", res.pooled[li].first},
                           {"baseline", res.pooled[li].second}});
    for (const auto& c : res.checks) {
      const auto& l = c.layers[li];
      out.plots.errorbars.push_back({"averaged", static_cast<double>(res.layers[li]), l.one_minus_cosine.mean,
                                     l.one_minus_cosine.q1, l.one_minus_cosine.q3});
    }
  }
  out.tables.emplace_back("model_averaging.csv", std::move(t));
  out.tables.emplace_back("model_averaging_pooled.csv", std::move(pooled));
  out.data = {{"layers", res.layers}, {"member_accuracy", res.member_accuracy}, {"subsets", subsets},
              {"pooled", pooled_json}};
  out.plots.title = "1 - cosine between averaged-model and averaged features";
  out.plots.x_label = "layer";
  out.plots.y_label = "1 - cosine";
  out.summary = {{"subsets", res.subsets.size()}, {"pooled", pooled_json}};
  add_family_checkpoints(res.run, out);
  return out;
}

inline RecipeOutput emit_avg_vs_ensemble(const AveragingResult& res) {
  RecipeOutput out;
  CsvTable t({"subset_id", "acc_avg", "acc_ens"});
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t k = 0; k < res.subsets.size(); ++k) {
    const std::string id = subset_id(res.subsets[k]);
    const auto& a = res.accuracies[k];
    t.add({id, a.acc_avg, a.acc_ens});
    rows.push_back({{"subset_id", id}, {"acc_avg", a.acc_avg}, {"acc_ens", a.acc_ens}});
    out.plots.points.push_back({a.acc_avg, a.acc_ens, id});
  }
  out.tables.emplace_back("avg_vs_ensemble.csv", std::move(t));
  out.data = {{"member_accuracy", res.member_accuracy}, {"subsets", rows}, {"pearson", res.pearson_r}};
  out.default_plot = "scatter";
  out.plots.title = "model averaging vs logits ensemble";
  out.plots.x_label = "accuracy of averaged model";
  out.plots.y_label = "accuracy of logits ensemble";
  out.plots.reference_identity = true;
  out.summary = {{"subsets", res.subsets.size()}, {"pearson", res.pearson_r}};
  add_family_checkpoints(res.run, out);
  return out;
}

// ---------------------------------------------------------------------------
// task_addition / task_negation

struct ArithmeticResult {
  FamilyRun run;
  std::vector<std::size_t> layers;
  AggregateReport report;
};

inline ArithmeticResult run_task_arithmetic(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log,
                                            bool addition) {
  ArithmeticResult res;
  res.run = build_family(cfg, data, log);
  const auto& fam = res.run.family;
  res.layers = resolve_layers(cfg, res.run.spec, all_heads_shared(fam.finetuned));
  log.enter("measure");
  if (addition) {
    const TaskVector ti = task_vector(fam.finetuned[0], fam.pretrained);
    const TaskVector tj = task_vector(fam.finetuned[1], fam.pretrained);
    const LabeledDataset eval = data.eval(res.run.member_tasks);
    res.report = addition_ctl_check(fam.pretrained.params, ti, tj, cfg.arithmetic.lambda, eval, res.layers,
                                    cfg.arithmetic.scale);
  } else {
    if (!heads_shared(fam.pretrained, fam.finetuned[0]))
      throw ValidationError("task negation needs a finetune task with the pretraining label space");
    const TaskVector t = task_vector(fam.finetuned[0], fam.pretrained);
    std::vector<TaskSpec> tasks = cfg.pretrain->tasks;
    tasks.push_back(res.run.member_tasks[0]);
    const LabeledDataset eval = data.eval(tasks);
    res.report = negation_ctl_check(fam.pretrained.params, t, cfg.arithmetic.lambda, eval, res.layers);
  }
  return res;
}

inline RecipeOutput emit(const ArithmeticResult& res, double lambda) {
  RecipeOutput out;
  CsvTable t = comparison_table("check");
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& c : res.report.layers) {
    add_comparison_rows(t, res.report.kind, c);
    layers.push_back(comparison_json(c));
    out.plots.errorbars.push_back({"edited", static_cast<double>(c.layer), c.one_minus_cosine.mean,
                                   c.one_minus_cosine.q1, c.one_minus_cosine.q3});
    out.plots.errorbars.push_back({"baseline", static_cast<double>(c.layer), c.baseline_one_minus_cosine.mean,
                                   c.baseline_one_minus_cosine.q1, c.baseline_one_minus_cosine.q3});
  }
  out.tables.emplace_back(res.report.kind + ".csv", std::move(t));
  out.data = {{"kind", res.report.kind}, {"lambda", lambda}, {"eval_set_id", res.report.eval_set_id}, {"layers", layers}};
  out.plots.title = res.report.kind + " feature check";
  out.plots.x_label = "layer";
  out.plots.y_label = "1 - cosine";
  nlohmann::json s = nlohmann::json::array();
  for (const auto& c : res.report.layers)
    s.push_back({{"layer", c.layer}, {"one_minus_cosine", c.one_minus_cosine.mean},
                 {"baseline", c.baseline_one_minus_cosine.mean}});
  out.summary = {{"layers", s}};
  add_family_checkpoints(res.run, out);
  return out;
}

// ---------------------------------------------------------------------------
// stitch_addition / stitch_negation

struct StitchAdditionResult {
  FamilyRun run;
  std::size_t layer = 0;
  double chance = 0.0;
  std::vector<StitchAdditionRow> rows;
};

inline StitchAdditionResult run_stitch_addition(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  StitchAdditionResult res;
  res.run = build_family(cfg, data, log);
  const auto& fam = res.run.family;
  res.layer = cfg.stitch.layer ? cfg.stitch.layer : default_stitch_layer(res.run.spec);
  const std::vector<double> lambdas = cfg.stitch.lambdas.empty() ? default_lambda_grid() : cfg.stitch.lambdas;
  log.enter("measure");
  const TaskVector ti = task_vector(fam.finetuned[0], fam.pretrained);
  const TaskVector tj = task_vector(fam.finetuned[1], fam.pretrained);
  const LabeledDataset ei = data.eval(res.run.member_tasks[0]);
  const LabeledDataset ej = data.eval(res.run.member_tasks[1]);
  res.chance = 1.0 / ei.num_classes;
  res.rows = stitch_addition_table(fam.pretrained.params, ti, tj, lambdas, res.layer, ei, ej);
  return res;
}

inline RecipeOutput emit(const StitchAdditionResult& res) {
  RecipeOutput out;
  CsvTable t({"lambda", "mean_on_i", "mean_on_j", "single_i_on_i", "single_i_on_j", "single_j_on_i", "single_j_on_j"});
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : res.rows) {
    t.add({r.lambda, r.mean_on_i, r.mean_on_j, r.single_i_on_i, r.single_i_on_j, r.single_j_on_i, r.single_j_on_j});
    rows.push_back({{"lambda", r.lambda},
                    {"mean_on_i", r.mean_on_i},
                    {"mean_on_j", r.mean_on_j},
                    {"single_i_on_i", r.single_i_on_i},
                    {"single_i_on_j", r.single_i_on_j},
                    {"single_j_on_i", r.single_j_on_i},
                    {"single_j_on_j", r.single_j_on_j}});
    for (auto [name, v] : {std::pair{"mean on i", r.mean_on_i}, std::pair{"mean on j", r.mean_on_j}})
      out.plots.errorbars.push_back({name, r.lambda, v, v, v});
  }
  out.tables.emplace_back("stitch_addition.csv", std::move(t));
  out.data = {{"stitch_layer", res.layer}, {"chance", res.chance}, {"rows", rows}};
  out.plots.title = "stitched accuracy, task addition";
  out.plots.x_label = "lambda";
  out.plots.y_label = "accuracy";
  out.summary = {{"stitch_layer", res.layer}, {"chance", res.chance}, {"rows", res.rows.size()}};
  add_family_checkpoints(res.run, out);
  return out;
}

struct StitchNegationResult {
  FamilyRun run;
  std::size_t layer = 0;
  std::vector<StitchNegationRow> rows;
};

/// Lambda grid of the negation curve: the configured one, else 0 followed by
/// the default grid (the trend is read between the first and last entries).
inline std::vector<double> negation_lambdas(const ExperimentConfig& cfg) {
  if (!cfg.stitch.lambdas.empty()) return cfg.stitch.lambdas;
  std::vector<double> l{0.0};
  for (double x : default_lambda_grid()) l.push_back(x);
  return l;
}

inline StitchNegationResult run_stitch_negation(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  StitchNegationResult res;
  res.run = build_family(cfg, data, log);
  const auto& fam = res.run.family;
  res.layer = cfg.stitch.layer ? cfg.stitch.layer : default_stitch_layer(res.run.spec);
  log.enter("measure");
  const TaskVector tau = task_vector(fam.finetuned[0], fam.pretrained);
  const LabeledDataset e_pt = data.eval(*cfg.stitch.control_task);
  const LabeledDataset e_i = data.eval(res.run.member_tasks[0]);
  res.rows = negation_stitch_curve(fam.pretrained.params, tau, negation_lambdas(cfg), res.layer, e_pt, e_i);
  return res;
}

inline RecipeOutput emit(const StitchNegationResult& res) {
  RecipeOutput out;
  CsvTable t({"lambda", "delta_on_pt", "delta_on_i", "raw_on_pt", "raw_on_i"});
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : res.rows) {
    t.add({r.lambda, r.delta_on_pt, r.delta_on_i, r.raw_on_pt, r.raw_on_i});
    rows.push_back({{"lambda", r.lambda},
                    {"delta_on_pt", r.delta_on_pt},
                    {"delta_on_i", r.delta_on_i},
                    {"raw_on_pt", r.raw_on_pt},
                    {"raw_on_i", r.raw_on_i}});
    for (auto [name, v] : {std::pair{"pretraining task", r.delta_on_pt}, std::pair{"negated task", r.delta_on_i}})
      out.plots.errorbars.push_back({name, r.lambda, v, v, v});
  }
  out.tables.emplace_back("stitch_negation.csv", std::move(t));
  out.data = {{"stitch_layer", res.layer}, {"rows", rows}};
  out.plots.title = "stitched accuracy, task negation";
  out.plots.x_label = "lambda";
  out.plots.y_label = "accuracy";
  const auto& first = res.rows.front();
  const auto& last = res.rows.back();
  out.summary = {{"stitch_layer", res.layer},
                 {"negated_task_drop", first.delta_on_i - last.delta_on_i},
                 {"pretraining_task_change", last.delta_on_pt - first.delta_on_pt}};
  add_family_checkpoints(res.run, out);
  return out;
}

// ---------------------------------------------------------------------------
// ablations

struct AblationResult {
  std::vector<std::size_t> layers;
  AblationReport report;
};

inline AblationResult run_ablation(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log, bool random_label) {
  log.enter("data");
  const auto& pt = *cfg.pretrain;
  const auto& ft = *cfg.finetune;
  const LabeledDataset pt_data = data.train(pt.tasks);
  const LabeledDataset ti = data.train(ft.tasks[0]);
  const LabeledDataset tj = data.train(ft.tasks[1]);
  const LabeledDataset eval = data.eval(ft.tasks);
  const ModelSpec spec = model_spec(cfg, data.input_dim(), static_cast<std::size_t>(pt_data.num_classes));
  const bool same_heads = ti.num_classes == pt_data.num_classes && tj.num_classes == pt_data.num_classes;

  AblationResult res;
  res.layers = resolve_layers(cfg, spec, same_heads);
  log.enter("train+align");
  if (random_label) {
    RandomLabelInputs in{spec, pt_data, cfg.ablation.label_shuffle_seed, ti, tj, pt.train, cfg.ablation.random_pretrain_epochs,
                         ft.trains, FamilySeeds{pt.init_seed, ft.head_seed}};
    res.report = ablation_random_label(in, eval, res.layers);
  } else {
    NoPretrainInputs in;
    in.spec = spec;
    in.pretrain_task = pt_data;
    in.task_i = ti;
    in.task_j = tj;
    in.pretrain_config = pt.train;
    in.finetune_config = ft.trains.front();
    in.init_seed_i = cfg.ablation.init_seeds.first;
    in.init_seed_j = cfg.ablation.init_seeds.second;
    in.scratch_epochs = cfg.ablation.scratch_epochs;
    in.probe_count = cfg.ablation.probe_count;
    in.max_passes = cfg.ablation.max_passes;
    res.report = ablation_no_pretraining(in, eval, res.layers);
  }
  return res;
}

inline RecipeOutput emit(const AblationResult& res) {
  RecipeOutput out;
  CsvTable t = comparison_table("setting");
  nlohmann::json settings = nlohmann::json::array();
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : res.report.settings) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& c : s.layers) {
      add_comparison_rows(t, s.name, c);
      layers.push_back(comparison_json(c));
      out.plots.errorbars.push_back({s.name, static_cast<double>(c.layer), c.one_minus_cosine.mean,
                                     c.one_minus_cosine.q1, c.one_minus_cosine.q3});
      summary.push_back({{"setting", s.name}, {"layer", c.layer}, {"one_minus_cosine", c.one_minus_cosine.mean}});
    }
    settings.push_back({{"name", s.name}, {"layers", layers}});
  }
  nlohmann::json perms = nlohmann::json::array();
  for (const auto& p : res.report.permutations) perms.push_back(p.perms);
  out.tables.emplace_back(res.report.kind + ".csv", std::move(t));
  out.data = {{"kind", res.report.kind},
              {"eval_set_id", res.report.eval_set_id},
              {"settings", settings},
              {"permutations", perms},
              {"finetune_config_digests", res.report.finetune_config_digests}};
  out.plots.title = "1 - cosine at alpha = 0.5 by setting";
  out.plots.x_label = "layer";
  out.plots.y_label = "1 - cosine";
  out.summary = {{"settings", summary}};
  return out;
}

// ---------------------------------------------------------------------------
// theorem1_audit

namespace detail {

/// Dense Hessian by central differences of the exact gradient, symmetrized.
template <Objective F>
Matrix dense_hessian(const F& f, const Vector& x, double eps = 1e-5) {
  const auto n = x.size();
  Matrix h(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    Vector e = Vector::Zero(n);
    e(k) = eps;
    h.col(k) = (f.gradient(x + e) - f.gradient(x - e)) / (2.0 * eps);
  }
  return 0.5 * (h + h.transpose());
}

/// Gaussian inputs labelled by a random linear teacher.
inline LabeledDataset teacher_task(std::size_t input_dim, std::size_t classes, std::size_t samples, std::uint64_t seed,
                                   const std::string& id) {
  Rng rng(seed);
  LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(input_dim), static_cast<Eigen::Index>(samples));
  for (Eigen::Index j = 0; j < d.inputs.cols(); ++j)
    for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) d.inputs(i, j) = rng.normal();
  Matrix teacher(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index j = 0; j < teacher.cols(); ++j)
    for (Eigen::Index i = 0; i < teacher.rows(); ++i) teacher(i, j) = rng.normal();
  d.labels = argmax_columns(teacher * d.inputs);
  d.num_classes = static_cast<int>(classes);
  d.task_id = id;
  return d;
}

}  // namespace detail

struct AuditResult {
  AuditReport mlp;
  std::vector<std::size_t> pair_anchor;
  AuditReport surrogate;
  std::size_t surrogate_violations = 0;  // records with delta > bound_term + estimate_slack
};

/// Trained-MLP audit: for each anchor, a pretrained theta_0 and one pair per
/// finetune learning rate (task i and task j from the same theta_0).
/// Surrogate audit: the second-order expansion of a tiny MLP's loss at its
/// pretrained point, audited on its own finetuned pairs.
inline AuditResult run_theorem1_audit(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  const auto& pt = *cfg.pretrain;
  const auto& ft = *cfg.finetune;
  const auto& au = *cfg.audit;
  AuditResult res;

  log.enter("data");
  const LabeledDataset pt_data = data.train(pt.tasks);
  const LabeledDataset ti = data.train(ft.tasks[0]);
  const LabeledDataset tj = data.train(ft.tasks[1]);
  const LabeledDataset objective_data = data.eval(ft.tasks, au.eval_per_task);
  const ModelSpec spec = model_spec(cfg, data.input_dim(), static_cast<std::size_t>(pt_data.num_classes));
  const TrainConfig ft_base = ft.trains.front();

  log.enter("anchors+pairs");
  std::vector<Vector> anchors;
  std::vector<AuditPair> pairs;
  const std::size_t per_anchor = au.finetune_lrs.size();
  for (std::size_t g = 0; g < au.anchors.size(); ++g) {
    const auto& an = au.anchors[g];
    TrainConfig pc = pt.train;
    pc.lr = an.lr;
    pc.epochs = an.epochs;
    pc.shuffle_seed = an.shuffle_seed;
    const ModelParams theta0 = train(init_params(spec, an.init_seed), pt_data, pc);
    anchors.push_back(flatten(theta0));
    for (std::size_t k = 0; k < per_anchor; ++k) {
      TrainConfig fc = ft_base;
      fc.lr = au.finetune_lrs[k];
      fc.shuffle_seed = derive_seed(ft_base.shuffle_seed, 2 * (g * per_anchor + k));
      const ModelParams a = train(theta0, ti, fc);
      fc.shuffle_seed = derive_seed(ft_base.shuffle_seed, 2 * (g * per_anchor + k) + 1);
      const ModelParams b = train(theta0, tj, fc);
      pairs.push_back({"a" + std::to_string(g) + "-lr" + std::to_string(k), g, flatten(a), flatten(b)});
      res.pair_anchor.push_back(g);
    }
  }

  log.enter("power_iteration");
  const MlpLoss f{spec, &objective_data, ft_base.loss_kind};
  res.mlp = theorem1_audit(f, std::span<const Vector>(anchors), std::span<const AuditPair>(pairs), au.alpha, au.power);

  log.enter("surrogate");
  const auto& sg = au.surrogate;
  const ModelSpec tiny{{sg.input_dim, sg.hidden, sg.classes}};
  const LabeledDataset base = detail::teacher_task(sg.input_dim, sg.classes, sg.samples, derive_seed(sg.seed, 0), "teacher0");
  const LabeledDataset task_a = detail::teacher_task(sg.input_dim, sg.classes, sg.samples, derive_seed(sg.seed, 1), "teacher1");
  const LabeledDataset task_b = detail::teacher_task(sg.input_dim, sg.classes, sg.samples, derive_seed(sg.seed, 2), "teacher2");
  TrainConfig tiny_pt{0.1, 8, 20, LossKind::cross_entropy, derive_seed(sg.seed, 3)};
  const ModelParams tiny0 = train(init_params(tiny, derive_seed(sg.seed, 4)), base, tiny_pt);
  const MlpLoss tiny_loss{tiny, &base, LossKind::cross_entropy};
  const Vector x0 = flatten(tiny0);
  Quadratic q = Quadratic::centered(detail::dense_hessian(tiny_loss, x0));
  q.center = x0;
  q.linear = tiny_loss.gradient(x0);
  q.offset = tiny_loss.value(x0);
  std::vector<AuditPair> qpairs;
  for (std::size_t p = 0; p < sg.pairs; ++p) {
    TrainConfig c{0.01 * static_cast<double>(p + 1), 8, 2, LossKind::cross_entropy, derive_seed(sg.seed, 100 + 2 * p)};
    const ModelParams a = train(tiny0, task_a, c);
    c.shuffle_seed = derive_seed(sg.seed, 101 + 2 * p);
    const ModelParams b = train(tiny0, task_b, c);
    qpairs.push_back({"q" + std::to_string(p), 0, flatten(a), flatten(b)});
  }
  const std::vector<Vector> qanchor{x0};
  res.surrogate = theorem1_audit(q, std::span<const Vector>(qanchor), std::span<const AuditPair>(qpairs), au.alpha, au.power);
  for (const auto& r : res.surrogate.records)
    if (r.delta > r.bound_term + r.estimate_slack) ++res.surrogate_violations;
  return res;
}

inline RecipeOutput emit(const AuditResult& res) {
  RecipeOutput out;
  auto gap_table = [](const AuditReport& rep) {
    CsvTable t({"pair_id", "alpha", "delta", "sq_distance", "lambda_max", "bound_term"});
    for (const auto& r : rep.records) t.add({r.pair_id, r.alpha, r.delta, r.sq_distance, r.lambda_max, r.bound_term});
    return t;
  };
  auto anchor_table = [](const AuditReport& rep) {
    CsvTable t({"anchor", "lambda_max", "rayleigh", "iterations", "residual", "hvp_epsilon", "status"});
    for (std::size_t k = 0; k < rep.anchors.size(); ++k) {
      const auto& a = rep.anchors[k];
      t.add({k, a.lambda_max, a.rayleigh, a.iterations_used, a.residual, a.hvp_epsilon, a.status()});
    }
    return t;
  };
  CsvTable slack({"pair_id", "delta", "bound_term", "estimate_slack", "excess"});
  for (const auto& r : res.surrogate.records) slack.add({r.pair_id, r.delta, r.bound_term, r.estimate_slack, r.excess()});
  out.tables.emplace_back("theorem1_gaps.csv", gap_table(res.mlp));
  out.tables.emplace_back("theorem1_anchors.csv", anchor_table(res.mlp));
  out.tables.emplace_back("theorem1_surrogate_gaps.csv", gap_table(res.surrogate));
  out.tables.emplace_back("theorem1_surrogate_slack.csv", std::move(slack));

  auto summary = [](const AuditSummary& s) {
    return nlohmann::json{{"status", s.status}, {"r2_bound", s.r2_bound}, {"r2_lambda", s.r2_lambda},
                          {"r2_distance", s.r2_distance}};
  };
  for (const auto& r : res.mlp.records) out.plots.points.push_back({r.bound_term, r.delta, r.pair_id});
  out.default_plot = "scatter";
  out.plots.title = "linearity gap against the curvature bound";
  out.plots.x_label = "bound_term";
  out.plots.y_label = "delta";
  out.data = {{"mlp", summary(res.mlp.summary)},
              {"surrogate", summary(res.surrogate.summary)},
              {"surrogate_violations", res.surrogate_violations},
              {"pairs", res.mlp.records.size()}};
  out.summary = out.data;
  return out;
}

// ---------------------------------------------------------------------------
// lemma_checks

struct LemmaResult {
  struct Instance {
    std::size_t index = 0;
    LossKind loss = LossKind::cross_entropy;
    LemmaCheckReport report;
  };
  std::vector<Instance> instances;
  std::size_t violations = 0;
  FamilyRun run;
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> coeffs;
  std::vector<AggregateReport> multi;
};

/// Uniform draw from the probability simplex (normalized exponentials).
inline std::vector<double> random_convex_coeffs(std::size_t k, Rng& rng) {
  std::vector<double> c(k);
  double s = 0.0;
  for (auto& x : c) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    x = -std::log(u);
    s += x;
  }
  for (auto& x : c) x /= s;
  return c;
}

inline LemmaResult run_lemma_checks(const ExperimentConfig& cfg, const TaskFactory& data, StageLog& log) {
  const auto& lm = cfg.lemma;
  LemmaResult res;
  log.enter("lemma1");
  std::vector<double> alphas;
  for (std::size_t k = 0; k < lm.grid_points; ++k)
    alphas.push_back(static_cast<double>(k) / static_cast<double>(lm.grid_points - 1));
  for (std::size_t k = 0; k < lm.instances; ++k) {
    const LabeledDataset d =
        detail::teacher_task(lm.input_dim, lm.classes, lm.samples, derive_seed(lm.seed, 2 * k), "lemma" + std::to_string(k));
    for (LossKind loss : {LossKind::cross_entropy, LossKind::mse}) {
      LemmaResult::Instance inst{k, loss, llfc_induces_lmc_check(d, alphas, derive_seed(lm.seed, 2 * k + 1), loss)};
      if (!inst.report.holds) ++res.violations;
      res.instances.push_back(std::move(inst));
    }
  }

  res.run = build_family(cfg, data, log);
  const auto& ft = res.run.family.finetuned;
  res.layers = resolve_layers(cfg, res.run.spec, all_heads_shared(ft));
  log.enter("lemma2");
  const LabeledDataset eval = data.eval(res.run.member_tasks);
  std::vector<ModelParams> models;
  for (const auto& m : ft) models.push_back(m.params);
  Rng rng(lm.coeff_seed);
  for (std::size_t k = 0; k < lm.draws; ++k) {
    res.coeffs.push_back(random_convex_coeffs(models.size(), rng));
    res.multi.push_back(multi_average_check(models, res.coeffs.back(), eval, res.layers));
  }
  return res;
}

inline RecipeOutput emit(const LemmaResult& res) {
  RecipeOutput out;
  CsvTable l1({"instance", "loss", "endpoint_loss_i", "endpoint_loss_j", "max_violation", "holds"});
  for (const auto& in : res.instances)
    l1.add({in.index, to_string(in.loss), in.report.endpoint_loss_i, in.report.endpoint_loss_j, in.report.max_violation,
            in.report.holds ? "true" : "false"});
  CsvTable l2 = comparison_table("draw");
  CsvTable coeffs({"draw", "member", "coeff"});
  nlohmann::json draws = nlohmann::json::array();
  for (std::size_t k = 0; k < res.multi.size(); ++k) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& c : res.multi[k].layers) {
      add_comparison_rows(l2, std::to_string(k), c);
      layers.push_back(comparison_json(c));
      out.plots.errorbars.push_back({"draw " + std::to_string(k), static_cast<double>(c.layer), c.one_minus_cosine.mean,
                                     c.one_minus_cosine.q1, c.one_minus_cosine.q3});
    }
    for (std::size_t m = 0; m < res.coeffs[k].size(); ++m) coeffs.add({k, m, res.coeffs[k][m]});
    draws.push_back({{"coeffs", res.coeffs[k]}, {"layers", layers}});
  }
  out.tables.emplace_back("lemma1.csv", std::move(l1));
  out.tables.emplace_back("lemma2.csv", std::move(l2));
  out.tables.emplace_back("lemma2_coeffs.csv", std::move(coeffs));
  out.data = {{"lemma1_checks", res.instances.size()}, {"lemma1_violations", res.violations}, {"lemma2_draws", draws}};
  out.plots.title = "multi-model averaging at random convex coefficients";
  out.plots.x_label = "layer";
  out.plots.y_label = "1 - cosine";
  out.summary = {{"lemma1_checks", res.instances.size()}, {"lemma1_violations", res.violations},
                 {"lemma2_draws", res.multi.size()}};
  add_family_checkpoints(res.run, out);
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch

inline RecipeOutput run_recipe(const ExperimentConfig& cfg, StageLog& log) {
  log.enter("data");
  const TaskFactory data(cfg.data);
  const std::string& r = cfg.recipe;
  if (r == "ctl_sweep") return emit(run_ctl_sweep(cfg, data, log));
  if (r == "barrier") return emit(run_barrier(cfg, data, log));
  if (r == "model_averaging") return emit_model_averaging(run_averaging(cfg, data, log, true, false));
  if (r == "avg_vs_ensemble") return emit_avg_vs_ensemble(run_averaging(cfg, data, log, false, true));
  if (r == "task_addition") return emit(run_task_arithmetic(cfg, data, log, true), cfg.arithmetic.lambda);
  if (r == "task_negation") return emit(run_task_arithmetic(cfg, data, log, false), cfg.arithmetic.lambda);
  if (r == "stitch_addition") return emit(run_stitch_addition(cfg, data, log));
  if (r == "stitch_negation") return emit(run_stitch_negation(cfg, data, log));
  if (r == "ablation_no_pretrain") return emit(run_ablation(cfg, data, log, false));
  if (r == "ablation_random_label") return emit(run_ablation(cfg, data, log, true));
  if (r == "theorem1_audit") return emit(run_theorem1_audit(cfg, data, log));
  if (r == "lemma_checks") return emit(run_lemma_checks(cfg, data, log));
  throw ValidationError("unknown recipe '" + r + "'");
}

}  // namespace ctl
