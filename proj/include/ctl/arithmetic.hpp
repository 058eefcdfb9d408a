#pragma once

// Task vectors and the feature-space readings of task addition and negation:
// CTL checks on edited models, and stitched models that splice features into
// the back half of the pretrained network.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctl/connectivity.hpp"
#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/training.hpp"

namespace ctl {

/// tau = theta_ft - theta_pt, tagged with the task it came from and the digest
/// of the base it must be applied to.
struct TaskVector {
  ModelParams delta;
  std::string source_task;
  std::uint64_t base_digest = 0;
};

inline TaskVector task_vector(const ModelParams& theta_ft, const ModelParams& theta_pt, std::string source_task = {}) {
  return {theta_ft - theta_pt, std::move(source_task), digest(theta_pt)};
}

inline TaskVector task_vector(const Checkpoint& ft, const Checkpoint& pt) {
  return task_vector(ft.params, pt.params, ft.lineage.back().task_id);
}

struct VectorTerm {
  const TaskVector* vector = nullptr;
  double coeff = 1.0;
};

/// base + sum_k c_k tau_k, accumulated in term order.
inline ModelParams apply_vectors(const ModelParams& base, std::span<const VectorTerm> terms) {
  std::vector<ModelParams> models{base};
  std::vector<double> coeffs{1.0};
  for (const auto& t : terms) {
    if (!t.vector) throw ValidationError("apply_vectors: null task vector");
    if (!(t.vector->delta.spec == base.spec)) throw ShapeError("apply_vectors: task vector spec differs from base");
    models.push_back(t.vector->delta);
    coeffs.push_back(t.coeff);
  }
  return combine_params(models, coeffs);
}

inline ModelParams apply_vector(const ModelParams& base, const TaskVector& tau, double coeff) {
  const VectorTerm term{&tau, coeff};
  return apply_vectors(base, std::span<const VectorTerm>(&term, 1));
}

/// f(theta_PT + lambda(tau_i + tau_j)) against the midpoint of
/// f(theta_PT + s lambda tau_i) and f(theta_PT + s lambda tau_j), s = `scale`
/// (2 in the doubled-scale form of the addition identity). The baseline is the
/// cosine between the two single-vector models.
inline AggregateReport addition_ctl_check(const ModelParams& theta_pt, const TaskVector& tau_i, const TaskVector& tau_j,
                                          double lambda, const LabeledDataset& eval_set,
                                          std::span<const std::size_t> layers, double scale = 2.0) {
  detail::check_layers(theta_pt.spec, layers);
  const std::vector<VectorTerm> both{{&tau_i, lambda}, {&tau_j, lambda}};
  const FeatureStack fm = forward(apply_vectors(theta_pt, both), eval_set.inputs);
  const FeatureStack fi = forward(apply_vector(theta_pt, tau_i, scale * lambda), eval_set.inputs);
  const FeatureStack fj = forward(apply_vector(theta_pt, tau_j, scale * lambda), eval_set.inputs);
  AggregateReport rep;
  rep.kind = "task_addition";
  rep.eval_set_id = eval_set.task_id;
  for (std::size_t l : layers) rep.layers.push_back(compare_layer(fm, fi, fj, 0.5, l));
  return rep;
}

/// f(theta_PT) against the midpoint of f(theta_PT + lambda tau) and
/// f(theta_PT - lambda tau).
inline AggregateReport negation_ctl_check(const ModelParams& theta_pt, const TaskVector& tau, double lambda,
                                          const LabeledDataset& eval_set, std::span<const std::size_t> layers) {
  detail::check_layers(theta_pt.spec, layers);
  const FeatureStack fm = forward(theta_pt, eval_set.inputs);
  const FeatureStack fp = forward(apply_vector(theta_pt, tau, lambda), eval_set.inputs);
  const FeatureStack fn = forward(apply_vector(theta_pt, tau, -lambda), eval_set.inputs);
  AggregateReport rep;
  rep.kind = "task_negation";
  rep.eval_set_id = eval_set.task_id;
  for (std::size_t l : layers) rep.layers.push_back(compare_layer(fm, fp, fn, 0.5, l));
  return rep;
}

/// Delta(lambda tau) = f(theta_PT + lambda tau) - f(theta_PT) at `layer`.
inline Matrix delta_features(const ModelParams& theta_pt, const TaskVector& tau, double lambda, const Matrix& inputs,
                             std::size_t layer) {
  const FeatureStack edited = forward(apply_vector(theta_pt, tau, lambda), inputs);
  const FeatureStack base = forward(theta_pt, inputs);
  return edited.layer(layer) - base.layer(layer);
}

// ---------------------------------------------------------------------------
// Stitching

enum class Replacement { mean_of_two, delta_negation, raw_finetuned };

inline std::string to_string(Replacement r) {
  switch (r) {
    case Replacement::mean_of_two: return "mean_of_two";
    case Replacement::delta_negation: return "delta_negation";
    case Replacement::raw_finetuned: return "raw_finetuned";
  }
  return "?";
}

struct StitchConfig {
  std::size_t stitch_layer = 1;
  Replacement replacement = Replacement::mean_of_two;

  void validate(const ModelSpec& spec) const {
    if (!spec.is_hidden(stitch_layer))
      throw ValidationError("stitch.layer must be a hidden layer in [1, " + std::to_string(spec.depth() - 1) + "]");
  }
};

/// Middle hidden layer; the lower of the two middles for an even count.
inline std::size_t default_stitch_layer(const ModelSpec& spec) {
  if (spec.depth() < 2) throw ValidationError("stitching needs at least one hidden layer");
  return spec.depth() / 2;
}

/// Runs layers layer+1..L of `back_model` on features standing in for its
/// layer-`layer` output. No adapter is inserted between the two halves.
inline Matrix stitch_forward(const ModelParams& back_model, const Matrix& replaced_features, std::size_t layer) {
  if (!back_model.spec.is_hidden(layer)) throw ValidationError("stitch_forward: layer must be hidden");
  if (replaced_features.rows() != static_cast<Eigen::Index>(back_model.spec.layer_dims[layer]))
    throw ShapeError("stitch_forward: features have " + std::to_string(replaced_features.rows()) +
                     " rows, layer " + std::to_string(layer) + " has " +
                     std::to_string(back_model.spec.layer_dims[layer]) + " units");
  return forward_from(back_model, replaced_features, layer + 1).output();
}

struct StitchAdditionRow {
  double lambda = 0.0;
  double mean_on_i = 0.0, mean_on_j = 0.0;      // 1/2 f(PT + lambda tau_i) + 1/2 f(PT + lambda tau_j)
  double single_i_on_i = 0.0, single_i_on_j = 0.0;  // f(PT + lambda tau_i)
  double single_j_on_i = 0.0, single_j_on_j = 0.0;  // f(PT + lambda tau_j)
};

/// Accuracy of the pretrained back half fed with layer-`layer` features of
/// the edited models, on both sub-tasks, for every lambda.
inline std::vector<StitchAdditionRow> stitch_addition_table(const ModelParams& theta_pt, const TaskVector& tau_i,
                                                            const TaskVector& tau_j, std::span<const double> lambdas,
                                                            std::size_t layer, const LabeledDataset& eval_i,
                                                            const LabeledDataset& eval_j) {
  StitchConfig{layer, Replacement::mean_of_two}.validate(theta_pt.spec);
  std::vector<StitchAdditionRow> out;
  for (double lambda : lambdas) {
    const ModelParams mi = apply_vector(theta_pt, tau_i, lambda);
    const ModelParams mj = apply_vector(theta_pt, tau_j, lambda);
    auto score = [&](const LabeledDataset& d, double wi, double wj) {
      const Matrix fi = forward(mi, d.inputs).layer(layer);
      const Matrix fj = forward(mj, d.inputs).layer(layer);
      return accuracy_of_logits(stitch_forward(theta_pt, wi * fi + wj * fj, layer), d.labels);
    };
    StitchAdditionRow row;
    row.lambda = lambda;
    row.mean_on_i = score(eval_i, 0.5, 0.5);
    row.mean_on_j = score(eval_j, 0.5, 0.5);
    row.single_i_on_i = score(eval_i, 1.0, 0.0);
    row.single_i_on_j = score(eval_j, 1.0, 0.0);
    row.single_j_on_i = score(eval_i, 0.0, 1.0);
    row.single_j_on_j = score(eval_j, 0.0, 1.0);
    out.push_back(row);
  }
  return out;
}

struct StitchNegationRow {
  double lambda = 0.0;
  double delta_on_pt = 0.0, delta_on_i = 0.0;  // f(PT) - Delta(lambda tau) stitched into PT
  double raw_on_pt = 0.0, raw_on_i = 0.0;      // f(PT - lambda tau) stitched into PT
};

/// Accuracy on the pretraining task and on task i of the pretrained back half
/// fed with f(PT) - Delta(lambda tau) and with f(PT - lambda tau).
inline std::vector<StitchNegationRow> negation_stitch_curve(const ModelParams& theta_pt, const TaskVector& tau,
                                                            std::span<const double> lambdas, std::size_t layer,
                                                            const LabeledDataset& eval_pt,
                                                            const LabeledDataset& eval_i) {
  StitchConfig{layer, Replacement::delta_negation}.validate(theta_pt.spec);
  const Matrix base_pt = forward(theta_pt, eval_pt.inputs).layer(layer);
  const Matrix base_i = forward(theta_pt, eval_i.inputs).layer(layer);
  std::vector<StitchNegationRow> out;
  for (double lambda : lambdas) {
    StitchNegationRow row;
    row.lambda = lambda;
    auto score = [&](const LabeledDataset& d, const Matrix& base, Replacement kind) {
      if (lambda == 0.0) return accuracy_of_logits(stitch_forward(theta_pt, base, layer), d.labels);
      Matrix feats;
      if (kind == Replacement::delta_negation) {
        feats = base - delta_features(theta_pt, tau, lambda, d.inputs, layer);
      } else {
        feats = forward(apply_vector(theta_pt, tau, -lambda), d.inputs).layer(layer);
      }
      return accuracy_of_logits(stitch_forward(theta_pt, feats, layer), d.labels);
    };
    row.delta_on_pt = score(eval_pt, base_pt, Replacement::delta_negation);
    row.delta_on_i = score(eval_i, base_i, Replacement::delta_negation);
    row.raw_on_pt = score(eval_pt, base_pt, Replacement::raw_finetuned);
    row.raw_on_i = score(eval_i, base_i, Replacement::raw_finetuned);
    out.push_back(row);
  }
  return out;
}

/// lambda grid 0.05, 0.10, ..., 1.00 computed as k/20 so every point is the
/// nearest double to its decimal value.
inline std::vector<double> default_lambda_grid() {
  std::vector<double> out;
  for (int k = 1; k <= 20; ++k) out.push_back(k / 20.0);
  return out;
}

}  // namespace ctl
