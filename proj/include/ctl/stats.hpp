#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "ctl/errors.hpp"

namespace ctl {

/// Quantile by linear interpolation between order statistics (Hyndman-Fan
/// type 7, the R/NumPy default). `sorted` must be ascending and non-empty.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, q);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ValidationError("mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Mean and quartiles of one metric over an evaluation set. Samples whose
/// metric was undefined (zero-norm features) are counted in `excluded`;
/// with no valid sample every statistic is NaN.
struct Summary {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double q1 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q3 = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
  std::size_t excluded = 0;
};

/// Summarizes values in sample order; the sum runs in index order so the
/// result does not depend on how the samples were produced.
inline Summary summarize(std::span<const std::optional<double>> samples) {
  Summary s;
  std::vector<double> v;
  v.reserve(samples.size());
  for (const auto& x : samples) {
    if (x) v.push_back(*x);
    else ++s.excluded;
  }
  s.count = v.size();
  if (v.empty()) return s;
  s.mean = mean(v);
  std::sort(v.begin(), v.end());
  s.q1 = quantile_sorted(v, 0.25);
  s.median = quantile_sorted(v, 0.5);
  s.q3 = quantile_sorted(v, 0.75);
  return s;
}

inline Summary summarize(std::span<const double> samples) {
  std::vector<std::optional<double>> v(samples.begin(), samples.end());
  return summarize(v);
}

/// Pearson correlation; NaN when either side has zero variance.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("pearson: need two equal samples of size >= 2");
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace ctl
