#pragma once

#include <cmath>
#include <memory>

#include "mfbsde/model.hpp"

namespace mfbsde::testing {

inline double sq(double x) { return x * x; }

inline ModelPtr catalog(const std::string& name, std::map<std::string, double> values, Vec x0 = {1.0},
                        double horizon = 1.0) {
  CatalogParams p;
  p.values = std::move(values);
  p.x0 = std::move(x0);
  p.horizon = horizon;
  return catalog_model(name, p);
}

// Nonlinear model whose coefficients ignore every partner argument.
inline ModelPtr decoupled_model() {
  auto m = std::make_shared<ModelSpec>();
  m->name = "decoupled";
  m->dim = 1;
  m->x0 = {0.5};
  m->drift = [](CSpan x, CSpan, MSpan out) { out[0] = -x[0] + 0.3 * std::sin(x[0]); };
  m->diffusion = [](CSpan x, CSpan, MSpan out) { out[0] = 0.8 + 0.2 * std::tanh(x[0]); };
  m->terminal = [](CSpan x, CSpan) { return std::sin(x[0]) + x[0]; };
  m->driver = [](const Lambda& l, const Partner&) { return -0.5 * l.y + 0.1 * std::tanh(l.z[0]) + 0.2 * l.x[0]; };
  m->drift_dx = [](CSpan x, CSpan, MSpan out) { out[0] = -1.0 + 0.3 * std::cos(x[0]); };
  m->drift_dxp = [](CSpan, CSpan, MSpan out) { out[0] = 0.0; };
  m->diffusion_dx = [](CSpan x, CSpan, MSpan out) { out[0] = 0.2 / sq(std::cosh(x[0])); };
  m->diffusion_dxp = [](CSpan, CSpan, MSpan out) { out[0] = 0.0; };
  m->terminal_dx = [](CSpan x, CSpan, MSpan out) { out[0] = std::cos(x[0]) + 1.0; };
  m->terminal_dxp = [](CSpan, CSpan, MSpan out) { out[0] = 0.0; };
  m->driver_dlambda = [](const Lambda& l, const Partner&, MSpan out) {
    out[0] = 0.2;
    out[1] = -0.5;
    out[2] = 0.1 / sq(std::cosh(l.z[0]));
  };
  m->driver_dpartner = [](const Lambda&, const Partner&, MSpan out) { out[0] = out[1] = 0.0; };
  m->partner = PartnerUse{false, false, false, false, false};
  m->lipschitz = 2.0;
  return m;
}

// Copy of `base` with the drift scaled by c.
inline ModelPtr scaled_drift(const ModelSpec& base, double c) {
  auto m = std::make_shared<ModelSpec>(base);
  auto b = base.drift;
  m->drift = [b, c](CSpan x, CSpan xp, MSpan out) {
    b(x, xp, out);
    for (double& v : out) v *= c;
  };
  m->closed_form.reset();
  return m;
}

}  // namespace mfbsde::testing
