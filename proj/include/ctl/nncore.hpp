#pragma once

// Deterministic dense-MLP engine: forward with per-layer feature capture,
// reverse-mode gradients, SGD, and parameter-space vector algebra.
//
// Layer numbering follows the usual convention: layer 0 is the input, layers
// 1..L are the affine maps. Hidden layers (1..L-1) apply ReLU, layer L is
// identity (logits).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "ctl/errors.hpp"
#include "ctl/rng.hpp"

namespace ctl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class LossKind { cross_entropy, mse };

inline std::string to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross_entropy" : "mse"; }

struct ModelSpec {
  std::vector<std::size_t> layer_dims;

  /// Number of affine layers L.
  std::size_t depth() const noexcept { return layer_dims.empty() ? 0 : layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
  /// True when layer `l` (1-based) is followed by ReLU.
  bool is_hidden(std::size_t l) const noexcept { return l >= 1 && l < depth(); }

  void validate() const {
    if (layer_dims.size() < 2) throw ValidationError("model spec needs at least two layer dims");
    for (std::size_t i = 0; i < layer_dims.size(); ++i)
      if (layer_dims[i] == 0) throw ValidationError("model spec dim " + std::to_string(i) + " is zero");
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (std::size_t l = 1; l < layer_dims.size(); ++l) n += layer_dims[l] * (layer_dims[l - 1] + 1);
    return n;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::string to_string(const ModelSpec& spec) {
  std::string s = "[";
  for (std::size_t i = 0; i < spec.layer_dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(spec.layer_dims[i]);
  }
  return s + "]";
}

/// Weights and biases of an MLP. weights[l-1] is d_l x d_{l-1}.
struct ModelParams {
  ModelSpec spec;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  /// All-zero parameters of the given shape.
  static ModelParams zeros(const ModelSpec& spec) {
    spec.validate();
    ModelParams p;
    p.spec = spec;
    for (std::size_t l = 1; l <= spec.depth(); ++l) {
      p.weights.push_back(Matrix::Zero(spec.layer_dims[l], spec.layer_dims[l - 1]));
      p.biases.push_back(Vector::Zero(spec.layer_dims[l]));
    }
    return p;
  }

  std::size_t depth() const noexcept { return weights.size(); }

  bool all_finite() const {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (!weights[i].allFinite() || !biases[i].allFinite()) return false;
    return true;
  }

  /// Throws ShapeError if the arrays disagree with `spec`.
  void check_shapes() const {
    spec.validate();
    if (weights.size() != spec.depth() || biases.size() != spec.depth())
      throw ShapeError("parameter layer count does not match spec " + to_string(spec));
    for (std::size_t l = 1; l <= spec.depth(); ++l) {
      const auto& w = weights[l - 1];
      if (static_cast<std::size_t>(w.rows()) != spec.layer_dims[l] ||
          static_cast<std::size_t>(w.cols()) != spec.layer_dims[l - 1])
        throw ShapeError("weight shape mismatch at layer " + std::to_string(l));
      if (static_cast<std::size_t>(biases[l - 1].size()) != spec.layer_dims[l])
        throw ShapeError("bias shape mismatch at layer " + std::to_string(l));
    }
  }

  /// Bitwise equality of every entry.
  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.spec != b.spec) return false;
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
      if (std::memcmp(a.weights[i].data(), b.weights[i].data(), sizeof(double) * a.weights[i].size()) != 0)
        return false;
      if (std::memcmp(a.biases[i].data(), b.biases[i].data(), sizeof(double) * a.biases[i].size()) != 0)
        return false;
    }
    return true;
  }
};

/// Post-activation features for a batch. per_layer[l-1] is d_l x n.
struct FeatureStack {
  std::vector<Matrix> per_layer;

  std::size_t depth() const noexcept { return per_layer.size(); }
  Eigen::Index batch_size() const noexcept { return per_layer.empty() ? 0 : per_layer.front().cols(); }
  const Matrix& layer(std::size_t l) const {
    if (l < 1 || l > per_layer.size()) throw ShapeError("feature layer " + std::to_string(l) + " out of range");
    return per_layer[l - 1];
  }
  const Matrix& output() const { return per_layer.back(); }
};

/// Gradient of a dataset-mean loss; `grad` has the same shape as the params.
struct GradientBundle {
  ModelParams grad;
  double loss = 0.0;
};

// ---------------------------------------------------------------------------
// Parameter-space algebra

namespace detail {

inline void require_same_spec(const ModelParams& a, const ModelParams& b, const char* what) {
  if (a.spec != b.spec)
    throw ShapeError(std::string(what) + ": spec mismatch " + to_string(a.spec) + " vs " + to_string(b.spec));
}

template <class F>
ModelParams zip_map(const ModelParams& a, const ModelParams& b, F&& f) {
  ModelParams out = a;
  for (std::size_t i = 0; i < a.depth(); ++i) {
    out.weights[i] = f(a.weights[i], b.weights[i]);
    out.biases[i] = f(a.biases[i], b.biases[i]);
  }
  return out;
}

}  // namespace detail

inline ModelParams operator+(const ModelParams& a, const ModelParams& b) {
  detail::require_same_spec(a, b, "add");
  return detail::zip_map(a, b, [](const auto& x, const auto& y) { return (x + y).eval(); });
}

inline ModelParams operator-(const ModelParams& a, const ModelParams& b) {
  detail::require_same_spec(a, b, "subtract");
  return detail::zip_map(a, b, [](const auto& x, const auto& y) { return (x - y).eval(); });
}

inline ModelParams operator*(double s, const ModelParams& a) {
  ModelParams out = a;
  for (std::size_t i = 0; i < a.depth(); ++i) {
    out.weights[i] *= s;
    out.biases[i] *= s;
  }
  return out;
}

/// Euclidean inner product over all weights and biases.
inline double dot(const ModelParams& a, const ModelParams& b) {
  detail::require_same_spec(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.depth(); ++i) {
    s += a.weights[i].cwiseProduct(b.weights[i]).sum();
    s += a.biases[i].dot(b.biases[i]);
  }
  return s;
}

inline double squared_norm(const ModelParams& a) { return dot(a, a); }

/// Flattens to one vector: per layer, weights row-major then bias.
inline Vector flatten(const ModelParams& p) {
  Vector v(static_cast<Eigen::Index>(p.spec.parameter_count()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < p.depth(); ++l) {
    const auto& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) v[k++] = w(r, c);
    for (Eigen::Index r = 0; r < p.biases[l].size(); ++r) v[k++] = p.biases[l][r];
  }
  return v;
}

inline ModelParams unflatten(const ModelSpec& spec, const Vector& v) {
  if (static_cast<std::size_t>(v.size()) != spec.parameter_count())
    throw ShapeError("flat vector has " + std::to_string(v.size()) + " entries, spec needs " +
                     std::to_string(spec.parameter_count()));
  ModelParams p = ModelParams::zeros(spec);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < p.depth(); ++l) {
    auto& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = v[k++];
    for (Eigen::Index r = 0; r < p.biases[l].size(); ++r) p.biases[l][r] = v[k++];
  }
  return p;
}

/// FNV-1a digest over the layer widths and the raw parameter bytes.
inline std::uint64_t digest(const ModelParams& p) {
  Fnv1a h;
  for (auto d : p.spec.layer_dims) h.update_value(static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < p.depth(); ++i) {
    h.update(p.weights[i].data(), sizeof(double) * p.weights[i].size());
    h.update(p.biases[i].data(), sizeof(double) * p.biases[i].size());
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Operations

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.
/// Entries are drawn layer by layer in row-major order.
inline ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(spec);
  Rng rng(seed);
  for (std::size_t l = 0; l < p.depth(); ++l) {
    auto& w = p.weights[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
  }
  return p;
}

/// Re-draws layer `l` (1-based) with the init rule above; other layers untouched.
inline ModelParams reinit_layer(const ModelParams& params, std::size_t l, std::uint64_t seed) {
  if (l < 1 || l > params.depth()) throw ValidationError("reinit_layer: layer out of range");
  ModelParams p = params;
  Rng rng(seed);
  auto& w = p.weights[l - 1];
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
  p.biases[l - 1].setZero();
  return p;
}

/// Applies layers first_layer..L to `features`, which must be the
/// post-activation output of layer first_layer-1 (the input when first_layer == 1).
inline FeatureStack forward_from(const ModelParams& params, const Matrix& features, std::size_t first_layer) {
  const std::size_t depth = params.depth();
  if (first_layer < 1 || first_layer > depth) throw ShapeError("forward_from: start layer out of range");
  FeatureStack out;
  out.per_layer.reserve(depth - first_layer + 1);
  const Matrix* prev = &features;
  for (std::size_t l = first_layer; l <= depth; ++l) {
    const auto& w = params.weights[l - 1];
    if (prev->rows() != w.cols())
      throw ShapeError("dimension mismatch at layer " + std::to_string(l) + ": expected " +
                       std::to_string(w.cols()) + " rows, got " + std::to_string(prev->rows()));
    Matrix z = w * (*prev);
    z.colwise() += params.biases[l - 1];
    if (l < depth) z = z.cwiseMax(0.0);
    out.per_layer.push_back(std::move(z));
    prev = &out.per_layer.back();
  }
  return out;
}

/// Full forward pass capturing post-activation features of every layer.
inline FeatureStack forward(const ModelParams& params, const Matrix& inputs) {
  if (!inputs.allFinite()) throw ValidationError("forward: non-finite inputs");
  return forward_from(params, inputs, 1);
}

namespace detail {

/// Loss of each column of `logits` and d(mean loss)/d(logits).
inline double output_loss(const Matrix& logits, std::span<const int> labels, LossKind kind, Matrix* dlogits) {
  const Eigen::Index c = logits.rows();
  const Eigen::Index n = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  if (dlogits) dlogits->resize(c, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= c)
      throw ValidationError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
    const auto col = logits.col(j);
    if (kind == LossKind::cross_entropy) {
      const double m = col.maxCoeff();
      const Vector e = (col.array() - m).exp();
      const double s = e.sum();
      total += std::log(s) + m - col[y];
      if (dlogits) {
        dlogits->col(j) = e / s;
        (*dlogits)(y, j) -= 1.0;
        dlogits->col(j) *= inv_n;
      }
    } else {
      Vector r = col;
      r[y] -= 1.0;
      total += 0.5 * r.squaredNorm();
      if (dlogits) dlogits->col(j) = r * inv_n;
    }
  }
  return total * inv_n;
}

inline void check_batch(const ModelParams& params, const Matrix& inputs, std::span<const int> labels) {
  if (static_cast<std::size_t>(inputs.cols()) != labels.size())
    throw ShapeError("input column count differs from label count");
  if (inputs.cols() == 0) throw ValidationError("empty batch");
  if (static_cast<std::size_t>(inputs.rows()) != params.spec.input_dim())
    throw ShapeError("dimension mismatch at layer 1: input rows differ from d_0");
}

}  // namespace detail

/// Dataset-mean loss only (no gradient). Softmax for cross-entropy lives here;
/// mse compares logits with one-hot targets and uses 0.5*||f - e_y||^2 per sample.
inline double loss_value(const ModelParams& params, const Matrix& inputs, std::span<const int> labels,
                         LossKind kind) {
  detail::check_batch(params, inputs, labels);
  const FeatureStack fs = forward(params, inputs);
  return detail::output_loss(fs.output(), labels, kind, nullptr);
}

/// Mean loss and its exact reverse-mode gradient.
inline GradientBundle loss_and_grad(const ModelParams& params, const Matrix& inputs, std::span<const int> labels,
                                    LossKind kind) {
  detail::check_batch(params, inputs, labels);
  const FeatureStack fs = forward(params, inputs);
  GradientBundle out;
  out.grad = ModelParams::zeros(params.spec);
  Matrix delta;
  out.loss = detail::output_loss(fs.output(), labels, kind, &delta);
  for (std::size_t l = params.depth(); l >= 1; --l) {
    const Matrix& below = (l == 1) ? inputs : fs.per_layer[l - 2];
    out.grad.weights[l - 1].noalias() = delta * below.transpose();
    out.grad.biases[l - 1] = delta.rowwise().sum();
    if (l > 1) {
      Matrix up = params.weights[l - 1].transpose() * delta;
      // ReLU derivative, taken as 0 at exactly 0.
      up.array() *= (below.array() > 0.0).cast<double>();
      delta = std::move(up);
    }
  }
  return out;
}

/// theta - lr * grad. Pure.
inline ModelParams sgd_step(const ModelParams& params, const GradientBundle& grads, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("sgd_step: learning rate must be finite and >= 0");
  detail::require_same_spec(params, grads.grad, "sgd_step");
  if (!grads.grad.all_finite()) throw NumericError("sgd_step: non-finite gradient entries");
  ModelParams out = params;
  for (std::size_t i = 0; i < params.depth(); ++i) {
    out.weights[i] -= lr * grads.grad.weights[i];
    out.biases[i] -= lr * grads.grad.biases[i];
  }
  return out;
}

/// alpha*a + (1-alpha)*b with alpha in [0,1]. Endpoints, and a == b, return an
/// operand exactly.
inline ModelParams lerp_params(const ModelParams& a, const ModelParams& b, double alpha) {
  detail::require_same_spec(a, b, "lerp_params");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ValidationError("lerp_params: alpha must lie in [0,1], got " + std::to_string(alpha));
  if (alpha == 1.0 || a == b) return a;
  if (alpha == 0.0) return b;
  const double beta = 1.0 - alpha;
  return detail::zip_map(a, b, [&](const auto& x, const auto& y) { return (alpha * x + beta * y).eval(); });
}

/// Sum_k coeffs[k] * models[k]; coefficients are unconstrained.
inline ModelParams combine_params(std::span<const ModelParams> models, std::span<const double> coeffs) {
  if (models.empty()) throw ValidationError("combine_params: need at least one model");
  if (models.size() != coeffs.size()) throw ShapeError("combine_params: coefficient count differs from model count");
  for (const auto& m : models) detail::require_same_spec(models.front(), m, "combine_params");
  ModelParams out = coeffs[0] * models[0];
  for (std::size_t k = 1; k < models.size(); ++k) {
    for (std::size_t i = 0; i < out.depth(); ++i) {
      out.weights[i] += coeffs[k] * models[k].weights[i];
      out.biases[i] += coeffs[k] * models[k].biases[i];
    }
  }
  return out;
}

/// Column-wise argmax, lowest index wins ties.
inline std::vector<int> argmax_columns(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < logits.rows(); ++r)
      if (logits(r, j) > logits(best, j)) best = r;
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy_of_logits(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.cols()) != labels.size()) throw ShapeError("accuracy: size mismatch");
  if (labels.empty()) throw ValidationError("accuracy: empty label set");
  const auto pred = argmax_columns(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += (pred[i] == labels[i]);
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace ctl
