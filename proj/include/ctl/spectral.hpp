#pragma once

// Hessian-vector products by central differences of gradients, power
// iteration for the top Hessian eigenvalue, the linearity gap of a scalar
// objective along a segment, and the audit regressing that gap on the
// curvature-times-distance bound.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ctl/datasets.hpp"
#include "ctl/errors.hpp"
#include "ctl/nncore.hpp"
#include "ctl/rng.hpp"
#include "ctl/stats.hpp"

namespace ctl {

/// A scalar objective over flat parameter vectors with an exact gradient.
template <class F>
concept Objective = requires(const F& f, const Vector& x) {
  { f.value(x) } -> std::convertible_to<double>;
  { f.gradient(x) } -> std::convertible_to<Vector>;
};

/// Mean loss of an MLP on a fixed dataset, as a function of flatten(params).
struct MlpLoss {
  ModelSpec spec;
  const LabeledDataset* data = nullptr;
  LossKind loss_kind = LossKind::cross_entropy;

  double value(const Vector& theta) const {
    return loss_value(unflatten(spec, theta), data->inputs, data->labels, loss_kind);
  }
  Vector gradient(const Vector& theta) const {
    const auto g = loss_and_grad(unflatten(spec, theta), data->inputs, data->labels, loss_kind);
    return flatten(g.grad);
  }
};

/// 0.5 (x - c)^T A (x - c) + g^T (x - c) + f0 with symmetric A.
struct Quadratic {
  Matrix a;
  Vector center;
  Vector linear;
  double offset = 0.0;

  static Quadratic centered(Matrix a) {
    const auto n = a.rows();
    return {std::move(a), Vector::Zero(n), Vector::Zero(n), 0.0};
  }
  double value(const Vector& x) const {
    const Vector d = x - center;
    return 0.5 * d.dot(a * d) + linear.dot(d) + offset;
  }
  Vector gradient(const Vector& x) const { return a * (x - center) + linear; }
};

inline constexpr double kDefaultHvpEpsilon = 1e-4;

/// H(theta0) v ~ (grad(theta0 + eps v^) - grad(theta0 - eps v^)) / (2 eps) * ||v||
/// with v^ = v / ||v||.
template <Objective F>
Vector hvp(const F& f, const Vector& theta0, const Vector& v, double epsilon = kDefaultHvpEpsilon) {
  if (v.size() != theta0.size()) throw ShapeError("hvp: direction has the wrong length");
  const double nv = v.norm();
  if (!(nv > 0.0)) throw ValidationError("hvp: direction must be non-zero");
  if (!(epsilon > 0.0)) throw ValidationError("hvp: epsilon must be positive");
  const Vector unit = v / nv;
  const Vector gp = f.gradient(theta0 + epsilon * unit);
  const Vector gm = f.gradient(theta0 - epsilon * unit);
  if (!gp.allFinite() || !gm.allFinite()) throw NumericError("hvp: non-finite gradient");
  return (gp - gm) / (2.0 * epsilon) * nv;
}

struct PowerIterationOptions {
  double tol = 1e-6;  // relative change of successive estimates
  std::size_t max_iters = 1000;
  double hvp_epsilon = kDefaultHvpEpsilon;
  std::uint64_t seed = 0;
};

/// lambda_max is the magnitude of the dominant Hessian eigenvalue (the
/// Rayleigh quotient at the final iterate); residual is ||Hv - lambda v|| for
/// the unit iterate v. Lower spectrum ends are not estimated.
struct SpectralEstimate {
  double lambda_max = 0.0;
  double rayleigh = 0.0;  // signed
  std::size_t iterations_used = 0;
  double residual = std::numeric_limits<double>::quiet_NaN();
  double hvp_epsilon = kDefaultHvpEpsilon;
  bool converged = false;

  std::string status() const { return converged ? "converged" : "not_converged"; }
};

/// Power iteration through hvp from a seeded Gaussian start. Stops once
/// |lambda_k - lambda_{k-1}| <= tol * |lambda_k|; otherwise returns the last
/// estimate flagged not converged.
template <Objective F>
SpectralEstimate power_iteration_lambda_max(const F& f, const Vector& theta0, const PowerIterationOptions& opts = {}) {
  if (!(opts.tol > 0.0) || opts.max_iters == 0) throw ValidationError("power iteration: tol and max_iters must be positive");
  Rng rng(opts.seed);
  Vector v(theta0.size());
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = rng.normal();
  v.normalize();

  SpectralEstimate est;
  est.hvp_epsilon = opts.hvp_epsilon;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t it = 1; it <= opts.max_iters; ++it) {
    const Vector hv = hvp(f, theta0, v, opts.hvp_epsilon);
    const double lambda = v.dot(hv);
    est.rayleigh = lambda;
    est.lambda_max = std::abs(lambda);
    est.iterations_used = it;
    est.residual = (hv - lambda * v).norm();
    if (it > 1 && std::abs(lambda - prev) <= opts.tol * std::abs(lambda)) {
      est.converged = true;
      break;
    }
    prev = lambda;
    const double nh = hv.norm();
    if (!(nh > 0.0)) {  // H v = 0: v already spans a null direction
      est.converged = true;
      break;
    }
    v = hv / nh;
  }
  return est;
}

namespace detail {

inline Vector lerp(const Vector& a, const Vector& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  if (a.size() != b.size()) throw ShapeError("lerp: length mismatch");
  if (alpha == 1.0 || a == b) return a;
  if (alpha == 0.0) return b;
  return alpha * a + (1.0 - alpha) * b;
}

}  // namespace detail

/// |f(alpha a + (1-alpha) b) - alpha f(a) - (1-alpha) f(b)|, evaluated as
/// |f(mid) - f(b) - alpha (f(a) - f(b))| so the endpoints and a == b give 0.
template <Objective F>
double linearity_gap(const F& f, const Vector& theta_i, const Vector& theta_j, double alpha) {
  const Vector mid = detail::lerp(theta_i, theta_j, alpha);
  const double fi = f.value(theta_i), fj = f.value(theta_j), fm = f.value(mid);
  return std::abs(fm - fj - alpha * (fi - fj));
}

/// R^2 of the least-squares line y ~ a + b x. A constant x or y explains
/// nothing, so R^2 is 0 there.
inline double fit_r_squared(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("fit_r_squared: need two equal samples of size >= 2");
  const double mx = mean(x), my = mean(y);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return (sxy * sxy) / (sxx * syy);
}

// ---------------------------------------------------------------------------
// Audit

struct GapRecord {
  std::string pair_id;
  double alpha = 0.5;
  double delta = 0.0;
  double sq_distance = 0.0;
  double lambda_max = 0.0;
  double bound_term = 0.0;  // alpha (1-alpha) lambda_max / 2 * ||theta_i - theta_j||^2
  /// alpha (1-alpha) / 2 * ||theta_i - theta_j||^2 * (eigen-residual of the
  /// lambda_max estimate): how far the bound may move given the estimate's accuracy.
  double estimate_slack = 0.0;
  double excess() const { return delta - bound_term; }
};

struct AuditPair {
  std::string pair_id;
  std::size_t anchor = 0;  // index into the anchor list (theta_0 of this pair)
  Vector theta_i;
  Vector theta_j;
};

struct AuditSummary {
  std::string status;  // "ok" or "insufficient_sample"
  double r2_bound = std::numeric_limits<double>::quiet_NaN();
  double r2_lambda = std::numeric_limits<double>::quiet_NaN();
  double r2_distance = std::numeric_limits<double>::quiet_NaN();
};

struct AuditReport {
  std::vector<GapRecord> records;
  std::vector<SpectralEstimate> anchors;
  AuditSummary summary;
};

/// Fewer pairs than this leave a one-variable regression without residual
/// degrees of freedom.
inline constexpr std::size_t kMinAuditPairs = 3;

inline AuditSummary summarize_audit(std::span<const GapRecord> records) {
  AuditSummary s;
  if (records.size() < kMinAuditPairs) {
    s.status = "insufficient_sample";
    return s;
  }
  std::vector<double> y, xb, xl, xd;
  for (const auto& r : records) {
    y.push_back(r.delta);
    xb.push_back(r.bound_term);
    xl.push_back(r.lambda_max);
    xd.push_back(r.sq_distance);
  }
  s.status = "ok";
  s.r2_bound = fit_r_squared(xb, y);
  s.r2_lambda = fit_r_squared(xl, y);
  s.r2_distance = fit_r_squared(xd, y);
  return s;
}

/// For every pair: the gap at alpha, the squared distance, and the bound
/// built from lambda_max at the pair's anchor. lambda_max is estimated once
/// per anchor.
template <Objective F>
AuditReport theorem1_audit(const F& f, std::span<const Vector> anchors, std::span<const AuditPair> pairs,
                           double alpha = 0.5, const PowerIterationOptions& opts = {}) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("audit: alpha must lie in [0,1]");
  AuditReport rep;
  for (const auto& a : anchors) {
    rep.anchors.push_back(power_iteration_lambda_max(f, a, opts));
    if (!rep.anchors.back().converged) throw NumericError("audit: power iteration did not converge");
  }
  const double w = alpha * (1.0 - alpha) / 2.0;
  for (const auto& p : pairs) {
    if (p.anchor >= anchors.size()) throw ValidationError("audit: pair " + p.pair_id + " names a missing anchor");
    const auto& est = rep.anchors[p.anchor];
    GapRecord r;
    r.pair_id = p.pair_id;
    r.alpha = alpha;
    r.delta = linearity_gap(f, p.theta_i, p.theta_j, alpha);
    r.sq_distance = (p.theta_i - p.theta_j).squaredNorm();
    r.lambda_max = est.lambda_max;
    r.bound_term = w * est.lambda_max * r.sq_distance;
    r.estimate_slack = w * est.residual * r.sq_distance;
    rep.records.push_back(r);
  }
  rep.summary = summarize_audit(rep.records);
  return rep;
}

}  // namespace ctl
