#include "mfbsde/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mfbsde {

Summary summarize(std::span<const double> v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / v.size();
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.variance = ss / (v.size() - 1);
    s.se = std::sqrt(s.variance / v.size());
  }
  return s;
}

VarianceEstimate variance_with_error(std::span<const double> v) {
  if (v.size() < 2) throw std::invalid_argument("variance_with_error: need at least 2 samples");
  Summary s = summarize(v);
  double m4 = 0.0;
  for (double x : v) m4 += std::pow(x - s.mean, 4);
  m4 /= v.size();
  double n = static_cast<double>(v.size());
  double var_of_var = std::max(0.0, (m4 - s.variance * s.variance * (n - 3.0) / (n - 1.0)) / n);
  return {s.variance, std::sqrt(var_of_var)};
}

Moments sample_moments(std::span<const double> v) {
  if (v.size() < 4) throw std::invalid_argument("sample_moments: need at least 4 samples");
  Summary s = summarize(v);
  double n = static_cast<double>(v.size());
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    double d = x - s.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  Moments m;
  m.skewness = m3 / std::pow(m2, 1.5);
  m.excess_kurtosis = m4 / (m2 * m2) - 3.0;
  m.skewness_se = std::sqrt(6.0 * (n - 2.0) / ((n + 1.0) * (n + 3.0)));
  m.kurtosis_se = 2.0 * m.skewness_se * std::sqrt((n * n - 1.0) / ((n - 3.0) * (n + 5.0)));
  return m;
}

double kolmogorov_tail(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0, sign = 1.0;
  for (int k = 1; k <= 200; ++k) {
    double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += sign * term;
    if (term < 1e-17) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  double na = x.size(), nb = y.size();
  while (i < x.size() && j < y.size()) {
    double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  double ne = std::sqrt(na * nb / (na + nb));
  KsResult r;
  r.statistic = d;
  r.p_value = kolmogorov_tail((ne + 0.12 + 0.11 / ne) * d);
  return r;
}

SlopeFit fit_log_slope(std::span<const double> n, std::span<const double> value, std::span<const double> se) {
  if (n.size() != value.size() || n.size() != se.size())
    throw std::invalid_argument("fit_log_slope: size mismatch");
  std::vector<double> lx, ly, w;
  for (std::size_t k = 0; k < n.size(); ++k) {
    if (!(n[k] > 0.0) || !(value[k] > 0.0) || !std::isfinite(value[k]) || !std::isfinite(se[k])) continue;
    double rel = std::max(se[k] / value[k], 1e-6);
    lx.push_back(std::log(n[k]));
    ly.push_back(std::log(value[k]));
    w.push_back(1.0 / (rel * rel));
  }
  SlopeFit fit;
  fit.points = lx.size();
  if (lx.size() < 3) {
    fit.degraded = true;
    fit.slope = fit.ci_low = fit.ci_high = std::nan("");
    return fit;
  }
  double sw = 0, sx = 0, sy = 0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    sw += w[k];
    sx += w[k] * lx[k];
    sy += w[k] * ly[k];
  }
  double mx = sx / sw, my = sy / sw;
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    sxx += w[k] * (lx[k] - mx) * (lx[k] - mx);
    sxy += w[k] * (lx[k] - mx) * (ly[k] - my);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.se = std::sqrt(1.0 / sxx);
  fit.ci_low = fit.slope - 1.96 * fit.se;
  fit.ci_high = fit.slope + 1.96 * fit.se;
  return fit;
}

}  // namespace mfbsde
