#pragma once

// Hidden-unit permutation alignment (weight matching, activation matching)
// and the two pretraining ablations built on top of it.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ctl/connectivity.hpp"
#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/training.hpp"

namespace ctl {

using Permutation = std::vector<std::size_t>;

enum class Sense { min, max };

/// Exact linear assignment (Hungarian method with row/column potentials,
/// O(n^3)). Returns perm with perm[row] = assigned column. The search scans
/// columns in index order and only moves on strict improvement, so ties go to
/// the lowest index reached first and the result is fully deterministic.
inline Permutation solve_assignment(const Matrix& cost, Sense sense = Sense::min) {
  if (cost.rows() != cost.cols()) throw ValidationError("solve_assignment: cost matrix must be square");
  if (!cost.allFinite()) throw ValidationError("solve_assignment: cost matrix has non-finite entries");
  const auto n = static_cast<std::size_t>(cost.rows());
  if (n == 0) return {};
  const double sign = sense == Sense::min ? 1.0 : -1.0;
  auto a = [&](std::size_t i, std::size_t j) { return sign * cost(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j - 1)); };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);  // p[col] = row, 1-based; 0 = free
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Permutation perm(n);
  for (std::size_t j = 1; j <= n; ++j) perm[p[j] - 1] = j - 1;
  return perm;
}

inline double assignment_value(const Matrix& cost, const Permutation& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
  return s;
}

inline bool is_permutation_of_iota(const Permutation& p) {
  std::vector<char> seen(p.size(), 0);
  for (auto x : p) {
    if (x >= p.size() || seen[x]) return false;
    seen[x] = 1;
  }
  return true;
}

inline Permutation inverse(const Permutation& p) {
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

/// One permutation per hidden layer; perms[l-1][i] is the unit of the
/// permuted model that ends up at position i of hidden layer l.
struct PermutationSet {
  std::vector<Permutation> perms;

  static PermutationSet identity(const ModelSpec& spec) {
    PermutationSet s;
    for (std::size_t l = 1; l < spec.depth(); ++l) {
      Permutation p(spec.layer_dims[l]);
      std::iota(p.begin(), p.end(), std::size_t{0});
      s.perms.push_back(std::move(p));
    }
    return s;
  }

  void validate(const ModelSpec& spec) const {
    if (perms.size() + 1 != spec.depth()) throw ValidationError("PermutationSet: need one permutation per hidden layer");
    for (std::size_t l = 1; l < spec.depth(); ++l) {
      if (perms[l - 1].size() != spec.layer_dims[l] || !is_permutation_of_iota(perms[l - 1]))
        throw ValidationError("PermutationSet: layer " + std::to_string(l) + " is not a bijection of its units");
    }
  }

  bool operator==(const PermutationSet&) const = default;
};

inline PermutationSet inverse(const PermutationSet& s) {
  PermutationSet out;
  for (const auto& p : s.perms) out.perms.push_back(inverse(p));
  return out;
}

/// Reorders the hidden units of `b`: rows of W_l and b_l, and columns of
/// W_{l+1}. The permuted network computes the same function as `b`.
inline ModelParams apply_permutations(const ModelParams& b, const PermutationSet& p) {
  p.validate(b.spec);
  ModelParams out = b;
  const std::size_t depth = b.depth();
  for (std::size_t l = 1; l <= depth; ++l) {
    const auto& w = b.weights[l - 1];
    auto& ow = out.weights[l - 1];
    const bool rows_perm = l < depth;
    const bool cols_perm = l > 1;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const auto src_r = rows_perm ? static_cast<Eigen::Index>(p.perms[l - 1][static_cast<std::size_t>(r)]) : r;
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        const auto src_c = cols_perm ? static_cast<Eigen::Index>(p.perms[l - 2][static_cast<std::size_t>(c)]) : c;
        ow(r, c) = w(src_r, src_c);
      }
      out.biases[l - 1](r) = b.biases[l - 1](src_r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight matching

struct WeightMatchingResult {
  PermutationSet perms;
  std::vector<double> objective_trace;  // starts at the identity objective, one entry per layer update
  std::size_t passes = 0;
};

/// sum over layers of <W_l^a, W_l^b'> + <b_l^a, b_l^b'> for b' = b permuted.
inline double weight_matching_objective(const ModelParams& a, const ModelParams& b_permuted) {
  double s = 0.0;
  for (std::size_t l = 0; l < a.depth(); ++l) {
    s += a.weights[l].cwiseProduct(b_permuted.weights[l]).sum();
    s += a.biases[l].dot(b_permuted.biases[l]);
  }
  return s;
}

namespace detail {

/// Similarity between unit i of `a` and unit k of `b` at hidden layer l, with
/// b's neighbouring layers already permuted by `perms` (layer l itself is not).
inline Matrix unit_similarity(const ModelParams& a, const ModelParams& b, const PermutationSet& perms, std::size_t l) {
  PermutationSet others = perms;
  std::iota(others.perms[l - 1].begin(), others.perms[l - 1].end(), std::size_t{0});
  const ModelParams bp = apply_permutations(b, others);
  Matrix s = a.weights[l - 1] * bp.weights[l - 1].transpose();
  s += a.biases[l - 1] * bp.biases[l - 1].transpose();
  s += a.weights[l].transpose() * bp.weights[l];
  return s;
}

}  // namespace detail

/// Coordinate ascent over hidden layers 1..L-1 in order: each step solves the
/// max-trace assignment of b's units to a's at one layer with the other
/// layers held fixed. Stops after a pass with no improvement or at max_passes.
inline WeightMatchingResult weight_matching(const ModelParams& a, const ModelParams& b, std::size_t max_passes = 20) {
  ctl::detail::require_same_spec(a, b, "weight_matching");
  WeightMatchingResult res;
  res.perms = PermutationSet::identity(a.spec);
  double best = weight_matching_objective(a, b);
  res.objective_trace.push_back(best);
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    ++res.passes;
    bool improved = false;
    for (std::size_t l = 1; l < a.spec.depth(); ++l) {
      const Matrix sim = detail::unit_similarity(a, b, res.perms, l);
      Permutation candidate = solve_assignment(sim, Sense::max);
      PermutationSet trial = res.perms;
      trial.perms[l - 1] = candidate;
      const double value = weight_matching_objective(a, apply_permutations(b, trial));
      // Keep the old permutation unless the objective strictly improves, so
      // the trace is non-decreasing even under round-off.
      if (value > best) {
        best = value;
        res.perms = std::move(trial);
        improved = true;
      }
      res.objective_trace.push_back(best);
    }
    if (!improved) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Activation matching

inline constexpr std::size_t kDefaultProbeCount = 512;

/// Per hidden layer, the assignment maximizing the summed correlation between
/// unit activations of `a` and `b` over `probe_inputs`. Activations are
/// centered and scaled to unit norm per unit; a constant (dead) unit becomes a
/// zero row, correlates 0 with everything and is placed by the solver's
/// deterministic tie rule.
inline PermutationSet activation_matching(const ModelParams& a, const ModelParams& b, const Matrix& probe_inputs) {
  ctl::detail::require_same_spec(a, b, "activation_matching");
  const FeatureStack fa = forward(a, probe_inputs);
  const FeatureStack fb = forward(b, probe_inputs);
  auto standardize = [](const Matrix& m) {
    Matrix out = m.colwise() - m.rowwise().mean();
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double nrm = out.row(r).norm();
      if (nrm < kZeroNormTolerance) out.row(r).setZero();
      else out.row(r) /= nrm;
    }
    return out;
  };
  PermutationSet res;
  for (std::size_t l = 1; l < a.spec.depth(); ++l) {
    const Matrix corr = standardize(fa.layer(l)) * standardize(fb.layer(l)).transpose();
    res.perms.push_back(solve_assignment(corr, Sense::max));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationSetting {
  std::string name;
  std::vector<LayerComparison> layers;
  const LayerComparison& at(std::size_t layer) const {
    for (const auto& c : layers)
      if (c.layer == layer) return c;
    throw ValidationError("AblationSetting has no layer " + std::to_string(layer));
  }
};

struct AblationReport {
  std::string kind;
  std::string eval_set_id;
  std::vector<AblationSetting> settings;
  std::vector<PermutationSet> permutations;  // weight then activation matching, when computed
  std::vector<std::uint64_t> finetune_config_digests;

  const AblationSetting& setting(const std::string& name) const {
    for (const auto& s : settings)
      if (s.name == name) return s;
    throw ValidationError("AblationReport has no setting " + name);
  }
};

inline AblationSetting midpoint_setting(std::string name, const ModelParams& a, const ModelParams& b,
                                        const LabeledDataset& eval_set, std::span<const std::size_t> layers) {
  const FeatureStack fi = forward(a, eval_set.inputs);
  const FeatureStack fj = forward(b, eval_set.inputs);
  const FeatureStack fm = forward(lerp_params(a, b, 0.5), eval_set.inputs);
  AblationSetting s{std::move(name), {}};
  for (std::size_t l : layers) s.layers.push_back(compare_layer(fm, fi, fj, 0.5, l));
  return s;
}

struct NoPretrainInputs {
  ModelSpec spec;
  LabeledDataset pretrain_task;
  LabeledDataset task_i, task_j;
  TrainConfig pretrain_config;
  TrainConfig finetune_config;  // also the from-scratch config; per-task shuffle seeds are derived
  std::uint64_t init_seed_i = 0, init_seed_j = 1;
  std::size_t scratch_epochs = 0;  // 0: pretrain epochs + finetune epochs
  std::size_t probe_count = kDefaultProbeCount;
  std::size_t max_passes = 20;
};

/// Two models trained from scratch on task i and task j (independent inits),
/// compared at alpha = 0.5 without alignment, after weight matching and after
/// activation matching; plus the pretrain-then-finetune pair on the same tasks.
inline AblationReport ablation_no_pretraining(const NoPretrainInputs& in, const LabeledDataset& eval_set,
                                              std::span<const std::size_t> layers) {
  detail::check_layers(in.spec, layers);
  TrainConfig scratch = in.finetune_config;
  scratch.epochs = in.scratch_epochs ? in.scratch_epochs : in.pretrain_config.epochs + in.finetune_config.epochs;
  TrainConfig si = scratch, sj = scratch;
  si.shuffle_seed = derive_seed(scratch.shuffle_seed, 0);
  sj.shuffle_seed = derive_seed(scratch.shuffle_seed, 1);
  const ModelParams a = train(init_params(in.spec, in.init_seed_i), in.task_i, si);
  const ModelParams b = train(init_params(in.spec, in.init_seed_j), in.task_j, sj);

  const std::vector<LabeledDataset> tasks{in.task_i, in.task_j};
  const auto fam = pretrain_finetune_family(in.spec, in.pretrain_task, tasks, in.pretrain_config,
                                            std::vector<TrainConfig>{in.finetune_config},
                                            FamilySeeds{in.init_seed_i, derive_seed(in.init_seed_i, 99)});

  const auto wm = weight_matching(a, b, in.max_passes);
  const LabeledDataset probes = head(in.task_i, std::min(in.probe_count, in.task_i.size()));
  const PermutationSet am = activation_matching(a, b, probes.inputs);

  AblationReport rep;
  rep.kind = "ablation_no_pretrain";
  rep.eval_set_id = eval_set.task_id;
  rep.settings.push_back(midpoint_setting("no_matching", a, b, eval_set, layers));
  rep.settings.push_back(midpoint_setting("weight_matching", a, apply_permutations(b, wm.perms), eval_set, layers));
  rep.settings.push_back(midpoint_setting("activation_matching", a, apply_permutations(b, am), eval_set, layers));
  rep.settings.push_back(
      midpoint_setting("normal", fam.finetuned[0].params, fam.finetuned[1].params, eval_set, layers));
  rep.permutations = {wm.perms, am};
  return rep;
}

struct RandomLabelInputs {
  ModelSpec spec;
  LabeledDataset pretrain_task;  // labels are shuffled for the random setting
  std::uint64_t label_shuffle_seed = 0;
  LabeledDataset task_i, task_j;  // may be the same task
  TrainConfig pretrain_config;
  std::size_t random_pretrain_epochs = 0;  // 0: same as pretrain_config
  std::vector<TrainConfig> finetune_configs;  // two configs, shared by both settings
  FamilySeeds seeds;
};

/// Normal pretraining versus pretraining on shuffled labels, each followed by
/// the identical pair of finetuning runs, compared at alpha = 0.5.
inline AblationReport ablation_random_label(const RandomLabelInputs& in, const LabeledDataset& eval_set,
                                            std::span<const std::size_t> layers) {
  detail::check_layers(in.spec, layers);
  if (in.finetune_configs.size() != 2) throw ValidationError("ablation_random_label: need two finetune configs");
  const std::vector<LabeledDataset> tasks{in.task_i, in.task_j};

  const auto normal = pretrain_finetune_family(in.spec, in.pretrain_task, tasks, in.pretrain_config,
                                               in.finetune_configs, in.seeds);
  LabeledDataset shuffled = shuffle_labels(in.pretrain_task, in.label_shuffle_seed);
  TrainConfig random_pt = in.pretrain_config;
  if (in.random_pretrain_epochs) random_pt.epochs = in.random_pretrain_epochs;
  const auto random = pretrain_finetune_family(in.spec, shuffled, tasks, random_pt, in.finetune_configs, in.seeds);

  AblationReport rep;
  rep.kind = "ablation_random_label";
  rep.eval_set_id = eval_set.task_id;
  rep.settings.push_back(
      midpoint_setting("random_label", random.finetuned[0].params, random.finetuned[1].params, eval_set, layers));
  rep.settings.push_back(
      midpoint_setting("normal", normal.finetuned[0].params, normal.finetuned[1].params, eval_set, layers));
  for (const auto& fam : {&random, &normal})
    for (const auto& c : fam->finetuned) rep.finetune_config_digests.push_back(c.lineage.back().config_digest);
  return rep;
}

}  // namespace ctl
