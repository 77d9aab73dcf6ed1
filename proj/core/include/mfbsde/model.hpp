#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mfbsde/noise.hpp"

namespace mfbsde {

using Vec = std::vector<double>;
using CSpan = std::span<const double>;
using MSpan = std::span<double>;

// Driver arguments: lambda = (x, y, z) for the solution and (x', y') for the partner.
struct Lambda {
  CSpan x;
  double y = 0.0;
  CSpan z;
};

struct Partner {
  CSpan x;
  double y = 0.0;
};

// Which coefficients read the partner argument. A false flag is a promise the
// solvers rely on: the coefficient is evaluated once instead of averaged.
struct PartnerUse {
  bool drift = true;
  bool diffusion = true;
  bool terminal = true;
  bool driver_x = true;
  bool driver_y = true;

  bool driver() const { return driver_x || driver_y; }
  bool any() const { return drift || diffusion || terminal || driver(); }
};

struct ClosedForm {
  // Mean of the continuous-time limit state.
  std::function<Vec(double t)> mean;
  // Continuous-time limit solution at the grid nodes, driven by the given increments.
  // Output layout [node][coord].
  std::function<void(const TimeGrid&, CSpan dw, MSpan path)> path;
  // Exact solution of the Euler-discretized limit equation on the same increments.
  std::function<void(const TimeGrid&, CSpan dw, MSpan path)> grid_path;
  // Gaussian marginal of the discretized limit at a node: mean (d) and covariance (d*d).
  std::function<void(const TimeGrid&, int node, MSpan mean, MSpan cov)> grid_marginal;
  // Discretized backward solution (Y per node, Z per step [step][coord]); may be empty.
  std::function<void(const TimeGrid&, CSpan dw, MSpan y, MSpan z)> grid_bsde;
  // Continuous-time Y_0.
  std::optional<double> y0;
};

struct ModelSpec {
  std::string name;
  int dim = 1;
  Vec x0;
  double horizon = 1.0;

  // b_i(x, x'), out has d entries.
  std::function<void(CSpan x, CSpan xp, MSpan out)> drift;
  // sigma_ij(x, x'), row-major d*d.
  std::function<void(CSpan x, CSpan xp, MSpan out)> diffusion;
  std::function<double(const Lambda&, const Partner&)> driver;
  std::function<double(CSpan x, CSpan xp)> terminal;

  // Jacobians: drift_dx[i*d + k] = d b_i / d x_k.
  std::function<void(CSpan x, CSpan xp, MSpan out)> drift_dx;
  std::function<void(CSpan x, CSpan xp, MSpan out)> drift_dxp;
  // diffusion_dx[(i*d + j)*d + k] = d sigma_ij / d x_k.
  std::function<void(CSpan x, CSpan xp, MSpan out)> diffusion_dx;
  std::function<void(CSpan x, CSpan xp, MSpan out)> diffusion_dxp;
  std::function<void(CSpan x, CSpan xp, MSpan out)> terminal_dx;
  std::function<void(CSpan x, CSpan xp, MSpan out)> terminal_dxp;
  // Gradient in lambda = (x, y, z): 2d + 1 entries.
  std::function<void(const Lambda&, const Partner&, MSpan out)> driver_dlambda;
  // Gradient in (x', y'): d + 1 entries.
  std::function<void(const Lambda&, const Partner&, MSpan out)> driver_dpartner;

  double lipschitz = 0.0;
  bool unbounded = false;
  PartnerUse partner;
  std::optional<ClosedForm> closed_form;
};

using ModelPtr = std::shared_ptr<const ModelSpec>;

struct CatalogParams {
  std::map<std::string, double> values;
  Vec x0;
  double horizon = 1.0;
};

// Names: constant, ou_mean_field, tanh_bounded, mf_bsde_linear.
ModelPtr catalog_model(const std::string& name, const CatalogParams& params);
std::vector<std::string> catalog_names();

struct Probe {
  Vec x;
  Vec xp;
  double y = 0.0;
  double yp = 0.0;
  Vec z;
};

struct GradientReport {
  std::map<std::string, double> max_error;  // |analytic - fd| / max(1, |analytic|), per gradient
  double worst = 0.0;
  bool pass = true;
};

inline constexpr double kGradientStep = 1e-5;
inline constexpr double kGradientTolerance = 1e-5;

GradientReport check_gradients(const ModelSpec& model, const std::vector<Probe>& probes);

// Random probes on unit-scale inputs.
std::vector<Probe> random_probes(const ModelSpec& model, const StreamKey& key, int count);

enum class Coefficient { drift, diffusion, terminal };

// Average of coeff(x, x'_k) over the environment list.
Vec evaluate_mean_field(const ModelSpec& model, Coefficient which, CSpan x, const std::vector<Vec>& env);
double evaluate_driver_mean_field(const ModelSpec& model, const Lambda& lambda, const std::vector<Vec>& env_x,
                                  const std::vector<double>& env_y);

std::size_t coefficient_size(const ModelSpec& model, Coefficient which);

}  // namespace mfbsde
