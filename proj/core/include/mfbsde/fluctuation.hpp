#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <string>
#include <vector>

#include "mfbsde/backward.hpp"
#include "mfbsde/forward.hpp"
#include "mfbsde/stats.hpp"

namespace mfbsde {

// Fields: 1 = drift, 2 = diffusion, 3 = terminal (time-independent), 4 = driver.
struct LambdaPoint {
  Vec x;
  double y = 0.0;
  Vec z;
};

struct FieldLattice {
  std::vector<double> times;  // grid nodes; block 3 ignores them
  std::vector<Vec> points;    // state probes for blocks 1-3
  std::vector<LambdaPoint> lambdas;  // probes for block 4
  std::array<bool, 4> blocks{true, true, true, false};
};

struct FieldIndex {
  int block = 1;
  int node = 0;
  int probe = 0;
  int component = 0;  // coordinate (block 1) or i * d + j (block 2)
};

std::vector<FieldIndex> lattice_index(const FieldLattice& lattice, const TimeGrid& grid, int dim);

struct CovarianceMatrix {
  std::vector<FieldIndex> index;
  Eigen::MatrixXd value;
  Eigen::MatrixXd se;  // Monte Carlo standard error per entry
  int samples = 0;
};

inline constexpr std::array<double, 5> kJitterTiers{0.0, 1e-12, 1e-10, 1e-8, 1e-6};

struct FieldSample {
  std::vector<FieldIndex> index;
  std::vector<double> values;
  double jitter = 0.0;  // absolute jitter added to the diagonal
};

// Per-sample feature vectors coeff(p, X^c) over a law cloud, flattened [c][index].
Eigen::MatrixXd field_features(const ModelSpec& model, const LawFlow& law, const BsdeSolution* limit,
                               const std::vector<FieldIndex>& index, const FieldLattice& lattice);

// Covariance of the columns of `samples` (rows are draws), symmetrized, with the
// standard error of each entry from the spread of the centered products averaged
// over consecutive groups of `group` rows (2 for antithetic law clouds).
CovarianceMatrix sample_covariance(const Eigen::MatrixXd& samples, int group = 1);

// Covariance of the limit fields over the law's sample paths (>= 100 samples).
CovarianceMatrix theoretical_covariance(const ModelSpec& model, const LawFlow& law, const FieldLattice& lattice,
                                        const BsdeSolution* limit = nullptr);

// Lower Cholesky factor after symmetrization, with the smallest sufficient jitter tier.
// Throws SolverError if the matrix has an eigenvalue below -1e-8 * max diagonal.
Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& cov, double* jitter_used);

FieldSample sample_field_on_lattice(const CovarianceMatrix& cov, const StreamKey& key);

// Joint sample of all four fields along one limit path: per node xi1 (d), xi2 (d*d),
// xi4 (when `limit` is given), then xi3 at the terminal state.
FieldSample sample_field_along_path(const ModelSpec& model, const LawFlow& law, std::span<const double> path,
                                    const StreamKey& key, const BsdeSolution* limit = nullptr);

// Fluctuation fields of one N-particle environment:
//   xi^{i,N}(p) = N^{-1/2} sum_k (coeff(p, zeta^k) - E coeff(p, X)),
// with the expectation taken under `centering` (quadrature for closed form).
// Returns [rep][index].
Eigen::MatrixXd empirical_fields(const ModelSpec& model, const SdeNResult& sde, const LawFlow& centering,
                                 const FieldLattice& lattice, const BsdeSolution* limit = nullptr);

struct EntryVariance {
  std::vector<double> value;
  std::vector<double> se;
};

// Variance over replications of the coupling residual block
//   N^{-1/2} sum_k (coeff(p, zeta^{N,k}) - coeff(p, zeta^k)),
// where zeta^k is the limit path on the same increments as environment path k.
EntryVariance residual_field_variance(const ModelSpec& model, const SdeNResult& sde, const PathEnsemble& coupled,
                                      const FieldLattice& lattice);

// Finite-rank Gaussian field with the covariance of a limit cloud:
//   xi(p) = sum_c a_c phi_c(p),  phi_c(p) = (M - 1)^{-1/2} (coeff(p, X^c) - mean_c coeff(p, X^c)).
// Coefficients that ignore their partner give identically zero fields.
class FieldCloud {
 public:
  FieldCloud(const ModelSpec& model, const LawFlow& law, int size, const BsdeSolution* limit);

  int size() const { return size_; }
  void drift(int node, CSpan x, CSpan a, MSpan out) const;
  void diffusion(int node, CSpan x, CSpan a, MSpan out) const;
  double terminal(CSpan x, CSpan a) const;
  double driver(int node, const Lambda& lam, CSpan a) const;

  // Basis values phi_c, laid out [component][c].
  void drift_basis(int node, CSpan x, MSpan out) const;
  void diffusion_basis(int node, CSpan x, MSpan out) const;
  void terminal_basis(CSpan x, MSpan out) const;
  void driver_basis(int node, const Lambda& lam, MSpan out) const;

 private:
  template <class Eval>
  void combine(int width, Eval&& eval, CSpan a, MSpan out) const;
  template <class Eval>
  void basis(int width, Eval&& eval, MSpan out) const;
  double partner_y(int node, int c) const;

  const ModelSpec& model_;
  const LawFlow& law_;
  int size_;
  std::vector<double> y_;  // [node][c], limit Y on the cloud when the driver reads it
};

struct LimitSystemOptions {
  int members = 1000;
  int field_cloud = 1024;
  int inner_paths = 64;      // conditioning ensemble, shared by all members
  int law_cap = 1024;        // cloud samples used for law expectations (closed form uses quadrature)
  int mean_field_cap = 0;    // members used for cross-member averages (0 = all)
  int degree = 2;
  bool backward = true;
};

struct LimitSystemResult {
  PathEnsemble x;            // member limit paths with increments
  std::vector<double> xbar;  // [node][member][coord]
  std::vector<double> ybar;  // [node][member], empty without backward
  std::vector<double> zbar;  // [step][member][coord]
  int fallback_count = 0;
  bool corrector_pass = false;

  double xbar_at(int member, int node, int coord) const {
    return xbar[(static_cast<std::size_t>(node) * x.reps() + member) * x.dim() + coord];
  }
  double ybar_at(int member, int node) const { return ybar[static_cast<std::size_t>(node) * x.reps() + member]; }
  double zbar_at(int member, int step, int coord) const {
    return zbar[(static_cast<std::size_t>(step) * x.reps() + member) * x.dim() + coord];
  }
};

// Linear limit fluctuation system over an ensemble of (W, xi) members.
LimitSystemResult solve_limit_system(const ModelSpec& model, const LawFlow& law, const BsdeSolution* limit,
                                     const LimitSystemOptions& opts, const StreamKey& key);

struct CltQuantity {
  std::string name;
  std::vector<double> approx;  // sqrt(N) (approximation - limit)
  std::vector<double> limit;   // limit fluctuation samples
};

struct CltRow {
  std::string name;
  Summary approx, limit;
  VarianceEstimate approx_var, limit_var;
  double variance_ratio = 0.0;
  KsResult ks;
};

struct CltReport {
  std::vector<CltRow> rows;
};

inline constexpr std::size_t kMinCltSamples = 200;

CltReport clt_compare(const std::vector<CltQuantity>& quantities);

// Quadrature of int phi(t) Z_t dt for one replication and coordinate.
double z_functional(const BsdeSolution& sol, int rep, int coord, const std::function<double(double)>& phi);

}  // namespace mfbsde
