#include "mfbsde/regression.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mfbsde {

namespace {

constexpr double kRankThreshold = 1e-10;
constexpr double kSpreadThreshold = 1e-10;

void exponents_rec(int var, int vars, int remaining, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
  if (var == vars) {
    if (remaining == 0) out.push_back(cur);
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    cur[var] = e;
    exponents_rec(var + 1, vars, remaining - e, cur, out);
  }
  cur[var] = 0;
}

double monomial(const std::vector<int>& exps, const double* u) {
  double v = 1.0;
  for (std::size_t k = 0; k < exps.size(); ++k)
    for (int e = 0; e < exps[k]; ++e) v *= u[k];
  return v;
}

Eigen::MatrixXd design(const Eigen::MatrixXd& u, const std::vector<std::vector<int>>& exps) {
  Eigen::MatrixXd a(u.rows(), static_cast<Eigen::Index>(exps.size()));
  std::vector<double> row(u.cols());
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    for (Eigen::Index k = 0; k < u.cols(); ++k) row[k] = u(r, k);
    for (std::size_t b = 0; b < exps.size(); ++b) a(r, static_cast<Eigen::Index>(b)) = monomial(exps[b], row.data());
  }
  return a;
}

}  // namespace

std::vector<std::vector<int>> monomial_exponents(int vars, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(vars, 0);
  for (int total = 0; total <= degree; ++total) exponents_rec(0, vars, total, cur, out);
  return out;
}

std::size_t basis_size(int vars, int degree) {
  // C(vars + degree, degree)
  std::size_t n = 1;
  for (int k = 1; k <= degree; ++k) n = n * (vars + k) / k;
  return n;
}

RegressionFit fit_regression(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets, int degree,
                             Eigen::MatrixXd* fitted) {
  if (features.rows() != targets.rows()) throw std::invalid_argument("fit_regression: row count mismatch");
  if (features.rows() < 1) throw std::invalid_argument("fit_regression: no samples");
  if (degree < 0) throw std::invalid_argument("fit_regression: negative degree");
  RegressionFit fit;
  fit.requested_degree = degree;
  const Eigen::Index n = features.rows();

  for (Eigen::Index k = 0; k < features.cols(); ++k) {
    double mean = features.col(k).mean();
    double sd = std::sqrt((features.col(k).array() - mean).square().mean());
    if (sd > kSpreadThreshold * std::max(1.0, std::abs(mean))) {
      fit.features.push_back(static_cast<int>(k));
      fit.center.push_back(mean);
      fit.scale.push_back(sd);
    }
  }
  Eigen::MatrixXd u(n, static_cast<Eigen::Index>(fit.features.size()));
  for (std::size_t k = 0; k < fit.features.size(); ++k)
    u.col(static_cast<Eigen::Index>(k)) = (features.col(fit.features[k]).array() - fit.center[k]) / fit.scale[k];

  int deg = fit.features.empty() ? 0 : degree;
  for (; deg >= 0; --deg) {
    auto exps = monomial_exponents(static_cast<int>(fit.features.size()), deg);
    if (static_cast<Eigen::Index>(exps.size()) > n) continue;
    Eigen::MatrixXd a = design(u, exps);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    qr.setThreshold(kRankThreshold);
    if (qr.rank() < a.cols() && deg > 0) continue;
    fit.degree = deg;
    fit.exponents = std::move(exps);
    fit.coef = qr.solve(targets);
    Eigen::MatrixXd fv = a * fit.coef;
    fit.residual_rms = std::sqrt((targets.col(0) - fv.col(0)).squaredNorm() / static_cast<double>(n));
    if (fitted) *fitted = std::move(fv);
    return fit;
  }
  throw std::logic_error("fit_regression: no admissible degree");
}

void RegressionFit::evaluate(std::span<const double> x, std::span<double> out) const {
  constexpr std::size_t kMaxFeatures = 32;
  if (features.size() > kMaxFeatures) throw std::invalid_argument("RegressionFit: too many features");
  double u[kMaxFeatures];
  for (std::size_t k = 0; k < features.size(); ++k) u[k] = (x[features[k]] - center[k]) / scale[k];
  for (Eigen::Index t = 0; t < coef.cols(); ++t) out[t] = 0.0;
  for (std::size_t b = 0; b < exponents.size(); ++b) {
    double m = monomial(exponents[b], u);
    for (Eigen::Index t = 0; t < coef.cols(); ++t) out[t] += coef(static_cast<Eigen::Index>(b), t) * m;
  }
}

double RegressionFit::evaluate(std::span<const double> x) const {
  double out[64];
  if (coef.cols() > 64) throw std::invalid_argument("RegressionFit: too many targets");
  evaluate(x, std::span<double>(out, static_cast<std::size_t>(coef.cols())));
  return out[0];
}

}  // namespace mfbsde
