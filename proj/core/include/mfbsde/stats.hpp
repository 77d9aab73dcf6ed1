#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mfbsde {

struct Summary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double se = 0.0;  // standard error of the mean
  std::size_t n = 0;
};

Summary summarize(std::span<const double> v);

struct VarianceEstimate {
  double value = 0.0;
  double se = 0.0;
};

// Unbiased variance with a fourth-moment standard error.
VarianceEstimate variance_with_error(std::span<const double> v);

struct Moments {
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double skewness_se = 0.0;
  double kurtosis_se = 0.0;
};

Moments sample_moments(std::span<const double> v);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Kolmogorov tail Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2).
double kolmogorov_tail(double lambda);
KsResult ks_two_sample(std::span<const double> a, std::span<const double> b);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t points = 0;
  bool degraded = false;  // fewer than 3 usable points
};

// Weighted least squares of log(value) on log(n), weights (value / se)^2.
// Points with non-finite or non-positive values are skipped.
SlopeFit fit_log_slope(std::span<const double> n, std::span<const double> value, std::span<const double> se);

}  // namespace mfbsde
