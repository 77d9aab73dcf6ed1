#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace mfbsde {

// Monomials of total degree <= p in k variables, graded order, constant first.
std::vector<std::vector<int>> monomial_exponents(int vars, int degree);
std::size_t basis_size(int vars, int degree);

struct RegressionFit {
  int requested_degree = 0;
  int degree = 0;              // degree actually used after fallback
  std::vector<int> features;   // indices of the input features kept
  std::vector<double> center;  // per kept feature
  std::vector<double> scale;
  std::vector<std::vector<int>> exponents;
  Eigen::MatrixXd coef;        // basis x targets
  double residual_rms = 0.0;   // of the first target

  bool fell_back() const { return degree < requested_degree; }
  int targets() const { return static_cast<int>(coef.cols()); }

  void evaluate(std::span<const double> x, std::span<double> out) const;
  double evaluate(std::span<const double> x) const;
};

// Least squares of targets (rows = samples) on a polynomial basis of the features.
// Features with negligible spread are dropped; a rank-deficient design drops one
// degree at a time down to the sample mean. Fitted values are written to `fitted`
// when it is non-null.
RegressionFit fit_regression(const Eigen::MatrixXd& features, const Eigen::MatrixXd& targets, int degree,
                             Eigen::MatrixXd* fitted = nullptr);

}  // namespace mfbsde
