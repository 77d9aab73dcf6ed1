#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfbsde/forward.hpp"
#include "mfbsde/regression.hpp"

namespace mfbsde {

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RegressionOptions {
  int degree = 2;
  int inner_iters = 2;         // sweeps of the implicit driver step (predictor + corrector)
  int inner_paths = 128;       // conditioning ensemble per replication
  int mean_field_cap = 1024;   // samples used by pointwise law / ensemble averages
  double z_bound = 5.0;
  // Y^N law iteration, used only when the driver reads the partner's y.
  int y_law_paths = 256;
  int y_law_iters = 3;
  double y_law_tol = 1e-3;
};

inline constexpr double kContractionTol = 1e-10;

struct NodeFit {
  RegressionFit continuation;  // E[Y_{i+1} | state_i]
  RegressionFit z;             // E[(Y_{i+1} - continuation) dW_i | state_i] / h
};

struct BsdeSolution {
  TimeGrid grid;
  int reps = 0;
  int dim = 0;
  std::vector<double> y;  // [node][rep]
  std::vector<double> z;  // [step][rep][coord]
  std::vector<NodeFit> fits;  // per step, empty for conditioned solves

  // Driver environment snapshots, per step and sweep: first `cap` ensemble states
  // and the y-values of the previous sweep.
  std::vector<std::vector<double>> env_x;               // [step] -> [m][coord]
  std::vector<std::vector<std::vector<double>>> env_y;  // [step][sweep] -> [m]

  int sweeps = 2;           // driver sweeps used at every node
  int mean_field_cap = 0;   // law / ensemble averages limited to this many samples

  std::string variant;
  std::vector<int> degree_used;  // per step (min over replications for conditioned solves)
  int fallback_count = 0;
  bool contraction_flag = false;
  bool z_bound_exceeded = false;
  double max_abs_z = 0.0;
  double residual_rms = 0.0;
  int y_law_iterations = 0;
  bool y_law_converged = true;

  double y_at(int rep, int node) const { return y[static_cast<std::size_t>(node) * reps + rep]; }
  double z_at(int rep, int step, int coord) const {
    return z[(static_cast<std::size_t>(step) * reps + rep) * dim + coord];
  }
  std::vector<double> y_path(int rep) const;
};

// Limit mean-field BSDE by regression Monte Carlo on the given limit paths.
BsdeSolution solve_mfbsde(const ModelSpec& model, const LawFlow& law, const PathEnsemble& x_paths,
                          const RegressionOptions& opts);

struct LimitValue {
  double continuation = 0.0;
  double y = 0.0;
  std::vector<double> z;
};

// The limit solution as a function of the state at a node (terminal node included).
LimitValue evaluate_limit(const ModelSpec& model, const LawFlow& law, const BsdeSolution& limit, int node,
                          std::span<const double> x);

struct LimitInputs {
  const LawFlow* law = nullptr;
  const PathEnsemble* paths = nullptr;  // limit paths on the same increments as the X^N replications
  const BsdeSolution* solution = nullptr;
};

// BSDE with N-particle environment. Each replication is conditioned on its frozen
// environment through a nested ensemble that shares it.
BsdeSolution solve_bsde_n(const ModelSpec& model, int n, const SdeNResult& sde, const LimitInputs& limit,
                          const RegressionOptions& opts, const StreamKey& inner_key);

// Linear BSDE on a conditioning ensemble:
//   Y_T = terminal, Y_i = E[Y_{i+1} | features_i] + h (alpha + beta Y_i + gamma . Z_i).
struct LinearBsdeProblem {
  TimeGrid grid;
  int paths = 0;
  int dim = 0;
  int feature_count = 0;
  std::vector<double> features;  // [node][path][k]
  std::vector<double> dw;        // [step][path][coord]
  std::vector<double> terminal;  // [path]
  std::vector<double> alpha;     // [step][path]
  std::vector<double> beta;      // [step][path]
  std::vector<double> gamma;     // [step][path][coord]
};

struct LinearBsdeResult {
  std::vector<double> y;  // [node][path]
  std::vector<double> z;  // [step][path][coord]
  int fallback_count = 0;
};

LinearBsdeResult solve_linear_limit_bsde(const LinearBsdeProblem& problem, int degree);

// Standard (non mean-field) BSDE data for comparison checks.
struct PlainBsdeData {
  std::function<double(std::span<const double> x)> terminal;
  std::function<double(double t, std::span<const double> x, double y, std::span<const double> z)> driver;
};

BsdeSolution solve_plain_bsde(const PathEnsemble& x_paths, const PlainBsdeData& data, const RegressionOptions& opts);

struct ComparisonResult {
  bool pass = false;
  double margin = 0.0;     // min over nodes and replications of Y1 - Y2
  double tolerance = 0.0;  // 1e-6 + 2 * regression residual RMS
  BsdeSolution first, second;
};

// Requires terminal1 >= terminal2 and driver1 >= driver2 on the sampled support,
// otherwise throws std::invalid_argument.
ComparisonResult check_comparison(const PathEnsemble& x_paths, const PlainBsdeData& first,
                                  const PlainBsdeData& second, const RegressionOptions& opts);

struct HolderFit {
  std::vector<double> gaps;
  std::vector<double> mean_sq_increment;
  std::vector<double> se;
  double slope = 0.0;
};

// E|Y_{t+delta} - Y_t|^2 over dyadic gaps delta = h 2^k, k = 0..levels-1, and its log-log slope.
HolderFit holder_exponent(const BsdeSolution& sol, int levels = 6);

}  // namespace mfbsde
