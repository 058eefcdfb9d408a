#pragma once

// Feature-space linearity measurements between checkpoints: per-sample cosine
// and projection-coefficient metrics, interpolation sweeps, loss barriers,
// multi-model averaging and the averaging-versus-ensemble comparison.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/stats.hpp"
#include "ctl/training.hpp"

namespace ctl {

/// Per-sample metric values; nullopt marks a sample excluded for a
/// zero-norm feature vector.
using SampleValues = std::vector<std::optional<double>>;

/// Feature vectors with a norm below this are treated as zero.
inline constexpr double kZeroNormTolerance = 1e-12;

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": feature shape mismatch");
}

/// alpha*fi + (1-alpha)*fj, the feature-space counterpart of lerp_params.
inline Matrix interpolate(const Matrix& fi, const Matrix& fj, double alpha) {
  return alpha * fi + (1.0 - alpha) * fj;
}

inline double column_dot(const Matrix& a, Eigen::Index ca, const Matrix& b, Eigen::Index cb) {
  return a.col(ca).dot(b.col(cb));
}

/// Column-wise cosine between a and b.
inline SampleValues column_cosines(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "cosine");
  SampleValues out(static_cast<std::size_t>(a.cols()));
  const double tol2 = kZeroNormTolerance * kZeroNormTolerance;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double na = column_dot(a, j, a, j), nb = column_dot(b, j, b, j);
    if (na < tol2 || nb < tol2) continue;
    // sqrt(na*nb) rather than sqrt(na)*sqrt(nb): identical columns give exactly 1.
    const double c = column_dot(a, j, b, j) / std::sqrt(na * nb);
    out[static_cast<std::size_t>(j)] = std::clamp(c, -1.0, 1.0);
  }
  return out;
}

/// Column-wise length of the projection of `a` onto `target`, relative to
/// ||target||: ||a|| cos(a, target) / ||target|| = <a, target> / ||target||^2.
inline SampleValues column_coefs(const Matrix& a, const Matrix& target) {
  require_same_shape(a, target, "coef");
  SampleValues out(static_cast<std::size_t>(a.cols()));
  const double tol2 = kZeroNormTolerance * kZeroNormTolerance;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double na = column_dot(a, j, a, j), nt = column_dot(target, j, target, j);
    if (na < tol2 || nt < tol2) continue;
    out[static_cast<std::size_t>(j)] = column_dot(a, j, target, j) / nt;
  }
  return out;
}

inline SampleValues one_minus(const SampleValues& v) {
  SampleValues out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) out[i] = 1.0 - *v[i];
  return out;
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
}

}  // namespace detail

/// cos[f(theta_alpha), alpha f(theta_i) + (1-alpha) f(theta_j)] per sample at `layer`.
inline SampleValues cosine_metric(const FeatureStack& fa, const FeatureStack& fi, const FeatureStack& fj, double alpha,
                                  std::size_t layer) {
  detail::check_alpha(alpha);
  const Matrix& a = fa.layer(layer);
  detail::require_same_shape(fi.layer(layer), fj.layer(layer), "cosine_metric");
  return detail::column_cosines(a, detail::interpolate(fi.layer(layer), fj.layer(layer), alpha));
}

/// ||f(theta_alpha)|| cos_alpha / ||alpha f_i + (1-alpha) f_j|| per sample at `layer`.
inline SampleValues coef_metric(const FeatureStack& fa, const FeatureStack& fi, const FeatureStack& fj, double alpha,
                                std::size_t layer) {
  detail::check_alpha(alpha);
  detail::require_same_shape(fi.layer(layer), fj.layer(layer), "coef_metric");
  return detail::column_coefs(fa.layer(layer), detail::interpolate(fi.layer(layer), fj.layer(layer), alpha));
}

/// cos[f(theta_i), f(theta_j)] per sample at `layer`.
inline SampleValues baseline_cosine(const FeatureStack& fi, const FeatureStack& fj, std::size_t layer) {
  return detail::column_cosines(fi.layer(layer), fj.layer(layer));
}

/// Layers compared by default: every hidden layer, plus the logits when both
/// models share one classification head.
inline std::vector<std::size_t> comparable_layers(const ModelSpec& spec, bool heads_shared) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l < spec.depth(); ++l) out.push_back(l);
  if (heads_shared) out.push_back(spec.depth());
  return out;
}

/// Same-head test from lineage: neither side re-initialized its output layer.
inline bool heads_shared(const Checkpoint& a, const Checkpoint& b) {
  auto reinit = [](const Checkpoint& c) {
    return std::any_of(c.lineage.begin(), c.lineage.end(), [](const auto& e) { return e.head_reinitialized; });
  };
  return a.params.spec == b.params.spec && !reinit(a) && !reinit(b);
}

// ---------------------------------------------------------------------------
// Interpolation sweep

struct SweepRow {
  std::size_t layer = 0;
  double alpha = 0.0;
  Summary one_minus_cosine;
  Summary coef;
};

struct InterpReport {
  std::vector<double> alphas;
  std::vector<std::size_t> layers;
  std::vector<SweepRow> rows;     // layer-major, then alpha
  std::vector<Summary> baseline;  // 1 - cos(f_i, f_j), one per layer
  std::string eval_set_id;
  std::string pair_id;

  const SweepRow& at(std::size_t layer, double alpha) const {
    for (const auto& r : rows)
      if (r.layer == layer && r.alpha == alpha) return r;
    throw ValidationError("InterpReport has no row for layer " + std::to_string(layer));
  }
  const Summary& baseline_at(std::size_t layer) const {
    for (std::size_t k = 0; k < layers.size(); ++k)
      if (layers[k] == layer) return baseline[k];
    throw ValidationError("InterpReport has no baseline for layer " + std::to_string(layer));
  }
};

namespace detail {

inline void check_layers(const ModelSpec& spec, std::span<const std::size_t> layers) {
  if (layers.empty()) throw ValidationError("no layers selected");
  for (auto l : layers)
    if (l < 1 || l > spec.depth()) throw ValidationError("layer " + std::to_string(l) + " out of range");
}

}  // namespace detail

/// Cross-task linearity sweep for theta_i (= a) and theta_j (= b): one forward
/// pass per alpha plus the endpoints, summarized per (layer, alpha).
inline InterpReport ctl_sweep(const ModelParams& a, const ModelParams& b, const LabeledDataset& eval_set,
                              std::span<const double> alphas, std::span<const std::size_t> layers,
                              std::string pair_id = {}) {
  ctl::detail::require_same_spec(a, b, "ctl_sweep");
  detail::check_layers(a.spec, layers);
  if (alphas.empty()) throw ValidationError("ctl_sweep: no alphas");
  for (double al : alphas) detail::check_alpha(al);

  InterpReport rep;
  rep.alphas.assign(alphas.begin(), alphas.end());
  rep.layers.assign(layers.begin(), layers.end());
  rep.eval_set_id = eval_set.task_id;
  rep.pair_id = std::move(pair_id);

  const FeatureStack fi = forward(a, eval_set.inputs);
  const FeatureStack fj = forward(b, eval_set.inputs);
  std::vector<FeatureStack> fa;
  fa.reserve(alphas.size());
  for (double al : alphas) fa.push_back(forward(lerp_params(a, b, al), eval_set.inputs));

  for (std::size_t l : layers) {
    rep.baseline.push_back(summarize(detail::one_minus(baseline_cosine(fi, fj, l))));
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      SweepRow row;
      row.layer = l;
      row.alpha = alphas[k];
      row.one_minus_cosine = summarize(detail::one_minus(cosine_metric(fa[k], fi, fj, alphas[k], l)));
      row.coef = summarize(coef_metric(fa[k], fi, fj, alphas[k], l));
      rep.rows.push_back(row);
    }
  }
  return rep;
}

inline InterpReport ctl_sweep(const Checkpoint& a, const Checkpoint& b, const LabeledDataset& eval_set,
                              std::span<const double> alphas, std::span<const std::size_t> layers,
                              std::string pair_id = {}) {
  return ctl_sweep(a.params, b.params, eval_set, alphas, layers, std::move(pair_id));
}

// ---------------------------------------------------------------------------
// Aggregate comparisons (averaging, task arithmetic, ablations)

struct LayerComparison {
  std::size_t layer = 0;
  Summary one_minus_cosine;           // 1 - cos(merged features, combined features)
  Summary coef;                       // projection coefficient of the same pair
  Summary baseline_one_minus_cosine;  // 1 - reference cosine
};

struct AggregateReport {
  std::string kind;
  std::string eval_set_id;
  std::vector<LayerComparison> layers;

  const LayerComparison& at(std::size_t layer) const {
    for (const auto& c : layers)
      if (c.layer == layer) return c;
    throw ValidationError("AggregateReport has no layer " + std::to_string(layer));
  }
};

/// One layer of a merged-versus-interpolated comparison: features `fm` of a
/// merged model against alpha*fi + (1-alpha)*fj, with cos(fi, fj) as baseline.
inline LayerComparison compare_layer(const FeatureStack& fm, const FeatureStack& fi, const FeatureStack& fj,
                                     double alpha, std::size_t layer) {
  return {layer, summarize(detail::one_minus(cosine_metric(fm, fi, fj, alpha, layer))),
          summarize(coef_metric(fm, fi, fj, alpha, layer)), summarize(detail::one_minus(baseline_cosine(fi, fj, layer)))};
}

/// Checks f(sum_k c_k theta_k) against sum_k c_k f(theta_k) per layer.
/// The baseline is sum_k c_k cos[f(theta_avg), f(theta_k)], the coefficient-
/// weighted form of the uniform 1/k average.
inline AggregateReport multi_average_check(std::span<const ModelParams> models, std::span<const double> coeffs,
                                           const LabeledDataset& eval_set, std::span<const std::size_t> layers) {
  if (models.empty() || models.size() != coeffs.size())
    throw ValidationError("multi_average_check: need one coefficient per model");
  double total = 0.0;
  for (double c : coeffs) {
    if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("multi_average_check: coefficients must lie in [0,1]");
    total += c;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("multi_average_check: coefficients must sum to 1");
  detail::check_layers(models.front().spec, layers);

  const ModelParams merged = combine_params(models, coeffs);
  const FeatureStack fm = forward(merged, eval_set.inputs);
  std::vector<FeatureStack> fk;
  for (const auto& m : models) fk.push_back(forward(m, eval_set.inputs));

  AggregateReport rep;
  rep.kind = "model_averaging";
  rep.eval_set_id = eval_set.task_id;
  for (std::size_t l : layers) {
    Matrix combined = coeffs[0] * fk[0].layer(l);
    for (std::size_t k = 1; k < models.size(); ++k) combined += coeffs[k] * fk[k].layer(l);

    SampleValues base(static_cast<std::size_t>(fm.batch_size()));
    std::vector<SampleValues> per_model;
    for (std::size_t k = 0; k < models.size(); ++k)
      per_model.push_back(detail::column_cosines(fm.layer(l), fk[k].layer(l)));
    for (std::size_t s = 0; s < base.size(); ++s) {
      double acc = 0.0;
      bool ok = true;
      for (std::size_t k = 0; k < models.size() && ok; ++k) {
        if (!per_model[k][s]) ok = false;
        else acc += coeffs[k] * *per_model[k][s];
      }
      if (ok) base[s] = 1.0 - acc;
    }
    rep.layers.push_back({l, summarize(detail::one_minus(detail::column_cosines(fm.layer(l), combined))),
                          summarize(detail::column_coefs(fm.layer(l), combined)), summarize(base)});
  }
  return rep;
}

struct AverageEnsembleAccuracy {
  double acc_avg = 0.0;  // accuracy of f(mean theta)
  double acc_ens = 0.0;  // accuracy of argmax mean_k f(theta_k)
};

/// Model averaging versus logits ensembling with uniform weights. Repeated
/// entries in `models` simply weigh that member more.
inline AverageEnsembleAccuracy avg_vs_ensemble(std::span<const ModelParams> models, const LabeledDataset& eval_set) {
  if (models.empty()) throw ValidationError("avg_vs_ensemble: no models");
  const std::vector<double> w(models.size(), 1.0 / static_cast<double>(models.size()));
  const ModelParams avg = combine_params(models, w);
  Matrix logits = w[0] * forward(models[0], eval_set.inputs).output();
  for (std::size_t k = 1; k < models.size(); ++k) logits += w[k] * forward(models[k], eval_set.inputs).output();
  return {accuracy(avg, eval_set), accuracy_of_logits(logits, eval_set.labels)};
}

// ---------------------------------------------------------------------------
// Loss barrier

struct BarrierReport {
  std::vector<double> alphas;
  std::vector<double> loss_at_alpha;
  std::vector<double> acc_at_alpha;
  double loss_i = 0.0, loss_j = 0.0;  // alpha = 1 and alpha = 0
  double acc_i = 0.0, acc_j = 0.0;
  /// max over alpha of loss(alpha) - (alpha loss_i + (1-alpha) loss_j).
  double barrier_height = 0.0;
};

/// Loss and accuracy along alpha*theta_i + (1-alpha)*theta_j. `alphas` must be
/// strictly increasing in [0,1] and include both endpoints.
inline BarrierReport barrier_sweep(const ModelParams& theta_i, const ModelParams& theta_j,
                                   const LabeledDataset& eval_set, std::span<const double> alphas,
                                   LossKind loss_kind = LossKind::cross_entropy) {
  if (alphas.size() < 2 || alphas.front() != 0.0 || alphas.back() != 1.0)
    throw ValidationError("barrier_sweep: alphas must start at 0 and end at 1");
  for (std::size_t k = 1; k < alphas.size(); ++k)
    if (!(alphas[k] > alphas[k - 1])) throw ValidationError("barrier_sweep: alphas must be strictly increasing");

  BarrierReport rep;
  rep.alphas.assign(alphas.begin(), alphas.end());
  rep.loss_i = evaluate_loss(theta_i, eval_set, loss_kind);
  rep.loss_j = evaluate_loss(theta_j, eval_set, loss_kind);
  rep.acc_i = accuracy(theta_i, eval_set);
  rep.acc_j = accuracy(theta_j, eval_set);
  rep.barrier_height = -std::numeric_limits<double>::infinity();
  for (double al : alphas) {
    const ModelParams m = lerp_params(theta_i, theta_j, al);
    const FeatureStack fs = forward(m, eval_set.inputs);
    const double loss = detail::output_loss(fs.output(), eval_set.labels, loss_kind, nullptr);
    rep.loss_at_alpha.push_back(loss);
    rep.acc_at_alpha.push_back(accuracy_of_logits(fs.output(), eval_set.labels));
    rep.barrier_height = std::max(rep.barrier_height, loss - (al * rep.loss_i + (1.0 - al) * rep.loss_j));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// LLFC => LMC on models that are linear in their parameters

struct LemmaCheckReport {
  std::vector<double> alphas;
  std::vector<double> loss_at_alpha;
  double endpoint_loss_i = 0.0;
  double endpoint_loss_j = 0.0;
  double max_violation = 0.0;  // max over alpha of loss(alpha) - endpoint loss (<= 0 when it holds)
  bool holds = false;
};

/// Builds a pair of single-affine-layer models (outputs linear in the
/// parameters, so features interpolate exactly) with equal loss on `eval_set`
/// and checks L(alpha theta_i + (1-alpha) theta_j) <= L(theta_i) over `alphas`.
///
/// theta_i is drawn at random; theta_j lies on a random line through theta_i,
/// placed by bisection where the (convex) loss along that line climbs back to
/// L(theta_i).
inline LemmaCheckReport llfc_induces_lmc_check(const LabeledDataset& eval_set, std::span<const double> alphas,
                                               std::uint64_t seed, LossKind loss_kind = LossKind::cross_entropy,
                                               double slack = 1e-10) {
  eval_set.validate();
  for (double al : alphas) detail::check_alpha(al);
  const ModelSpec spec{{eval_set.input_dim(), static_cast<std::size_t>(eval_set.num_classes)}};
  Rng rng(seed);
  auto random_params = [&](double scale) {
    ModelParams p = ModelParams::zeros(spec);
    for (auto& w : p.weights) w = w.unaryExpr([&](double) { return scale * rng.normal(); });
    for (auto& b : p.biases) b = b.unaryExpr([&](double) { return scale * rng.normal(); });
    return p;
  };
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.input_dim()));
  const ModelParams theta_i = random_params(scale);
  ModelParams dir = random_params(scale);
  auto loss_at = [&](const ModelParams& p) { return evaluate_loss(p, eval_set, loss_kind); };
  const double target = loss_at(theta_i);
  auto along = [&](double s) { return theta_i + s * dir; };

  // Orient the line downhill at theta_i.
  const double eps = 1e-6;
  if (loss_at(along(eps)) > target) dir = -1.0 * dir;
  double lo = eps;
  while (loss_at(along(lo)) >= target) {
    lo *= 0.5;
    if (lo < 1e-300) throw NumericError("llfc_induces_lmc_check: no descent direction");
  }
  double hi = 2.0 * lo;
  while (loss_at(along(hi)) <= target) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e12) throw NumericError("llfc_induces_lmc_check: loss is not coercive along the line");
  }
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    (loss_at(along(mid)) <= target ? lo : hi) = mid;
  }
  const ModelParams theta_j = along(std::abs(loss_at(along(lo)) - target) <= std::abs(loss_at(along(hi)) - target) ? lo : hi);

  LemmaCheckReport rep;
  rep.alphas.assign(alphas.begin(), alphas.end());
  rep.endpoint_loss_i = target;
  rep.endpoint_loss_j = loss_at(theta_j);
  rep.max_violation = -std::numeric_limits<double>::infinity();
  const double reference = std::max(rep.endpoint_loss_i, rep.endpoint_loss_j);
  for (double al : alphas) {
    const double l = loss_at(lerp_params(theta_i, theta_j, al));
    rep.loss_at_alpha.push_back(l);
    rep.max_violation = std::max(rep.max_violation, l - reference);
  }
  rep.holds = rep.max_violation <= slack && std::abs(rep.endpoint_loss_i - rep.endpoint_loss_j) <= slack;
  return rep;
}

}  // namespace ctl
