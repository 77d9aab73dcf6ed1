#include "mfbsde/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace mfbsde {

namespace {

double sech2(double v) {
  double t = std::tanh(v);
  return 1.0 - t * t;
}

double param(const CatalogParams& p, const std::string& key, double fallback) {
  auto it = p.values.find(key);
  return it == p.values.end() ? fallback : it->second;
}

void zero(MSpan out) { std::fill(out.begin(), out.end(), 0.0); }

void check_params(const std::string& name, const CatalogParams& p, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : p.values) {
    if (!allowed.contains(key))
      throw std::invalid_argument("model '" + name + "': unknown parameter '" + key + "'");
    if (!std::isfinite(value))
      throw std::invalid_argument("model '" + name + "': parameter '" + key + "' is not finite");
  }
  for (double v : p.x0)
    if (!std::isfinite(v)) throw std::invalid_argument("model '" + name + "': x0 is not finite");
  if (!std::isfinite(p.horizon) || !(p.horizon > 0.0))
    throw std::invalid_argument("model '" + name + "': horizon must be positive and finite");
}

std::shared_ptr<ModelSpec> base_spec(const std::string& name, const CatalogParams& p) {
  auto m = std::make_shared<ModelSpec>();
  m->name = name;
  m->x0 = p.x0.empty() ? Vec{1.0} : p.x0;
  m->dim = static_cast<int>(m->x0.size());
  m->horizon = p.horizon;
  return m;
}

// Scaled identity diffusion, partner-free.
void set_additive_noise(ModelSpec& m, double s) {
  int d = m.dim;
  m.diffusion = [d, s](CSpan, CSpan, MSpan out) {
    zero(out);
    for (int i = 0; i < d; ++i) out[i * d + i] = s;
  };
  m.diffusion_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m.diffusion_dxp = [](CSpan, CSpan, MSpan out) { zero(out); };
  m.partner.diffusion = false;
}

void set_constant_driver(ModelSpec& m, double f0) {
  m.driver = [f0](const Lambda&, const Partner&) { return f0; };
  m.driver_dlambda = [](const Lambda&, const Partner&, MSpan out) { zero(out); };
  m.driver_dpartner = [](const Lambda&, const Partner&, MSpan out) { zero(out); };
  m.partner.driver_x = false;
  m.partner.driver_y = false;
}

// Gaussian marginals and paths of X = m(t) + s W, given a mean curve on the grid.
void set_gaussian_forward(ClosedForm& cf, int d, double s, std::function<double(int coord, double t)> mean,
                          std::function<double(int coord, const TimeGrid&, int node)> grid_mean) {
  cf.mean = [d, mean](double t) {
    Vec out(d);
    for (int j = 0; j < d; ++j) out[j] = mean(j, t);
    return out;
  };
  auto make_path = [d, s](auto mean_at) {
    return [d, s, mean_at](const TimeGrid& g, CSpan dw, MSpan path) {
      Vec w(d, 0.0);
      for (int i = 0; i <= g.steps; ++i) {
        for (int j = 0; j < d; ++j) path[i * d + j] = mean_at(j, g, i) + s * w[j];
        if (i < g.steps)
          for (int j = 0; j < d; ++j) w[j] += dw[i * d + j];
      }
    };
  };
  cf.path = make_path([mean](int j, const TimeGrid& g, int i) { return mean(j, g.t(i)); });
  cf.grid_path = make_path(grid_mean);
  cf.grid_marginal = [d, s, grid_mean](const TimeGrid& g, int node, MSpan mu, MSpan cov) {
    zero(cov);
    for (int j = 0; j < d; ++j) {
      mu[j] = grid_mean(j, g, node);
      cov[j * d + j] = s * s * g.t(node);
    }
  };
}

ModelPtr make_constant(const CatalogParams& p) {
  check_params("constant", p, {"b0", "s", "phi0", "f0"});
  auto m = base_spec("constant", p);
  double b0 = param(p, "b0", 0.0), s = param(p, "s", 1.0), phi0 = param(p, "phi0", 0.0), f0 = param(p, "f0", 0.0);
  int d = m->dim;
  m->drift = [b0](CSpan, CSpan, MSpan out) { std::fill(out.begin(), out.end(), b0); };
  m->drift_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->drift_dxp = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->partner.drift = false;
  set_additive_noise(*m, s);
  m->terminal = [phi0](CSpan, CSpan) { return phi0; };
  m->terminal_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->terminal_dxp = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->partner.terminal = false;
  set_constant_driver(*m, f0);
  m->lipschitz = 0.0;
  m->unbounded = false;

  ClosedForm cf;
  Vec x0 = m->x0;
  auto mean = [x0, b0](int j, double t) { return x0[j] + b0 * t; };
  set_gaussian_forward(cf, d, s, mean, [mean](int j, const TimeGrid& g, int i) { return mean(j, g.t(i)); });
  // Same recursion and operation order as the Euler step.
  cf.grid_path = [d, s, b0, x0](const TimeGrid& g, CSpan dw, MSpan path) {
    for (int j = 0; j < d; ++j) path[j] = x0[j];
    for (int i = 0; i < g.steps; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = path[i * d + j] + b0 * g.h();
        for (int k = 0; k < d; ++k) acc += (k == j ? s : 0.0) * dw[i * d + k];
        path[(i + 1) * d + j] = acc;
      }
  };
  double T = m->horizon;
  cf.grid_bsde = [d, phi0, f0, T](const TimeGrid& g, CSpan, MSpan y, MSpan z) {
    for (int i = 0; i <= g.steps; ++i) y[i] = phi0 + f0 * (T - g.t(i));
    std::fill(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(g.steps) * d, 0.0);
  };
  cf.y0 = phi0 + f0 * T;
  m->closed_form = std::move(cf);
  return m;
}

// b = beta x', sigma = s I; terminal sum_j (x_j + coupling * x'_j), f = 0.
ModelPtr make_linear(const std::string& name, const CatalogParams& p, double coupling) {
  check_params(name, p, {"beta", "s"});
  auto m = base_spec(name, p);
  double beta = param(p, "beta", 1.0), s = param(p, "s", 1.0);
  int d = m->dim;
  m->drift = [beta](CSpan, CSpan xp, MSpan out) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = beta * xp[j];
  };
  m->drift_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->drift_dxp = [d, beta](CSpan, CSpan, MSpan out) {
    zero(out);
    for (int i = 0; i < d; ++i) out[i * d + i] = beta;
  };
  m->partner.drift = true;
  set_additive_noise(*m, s);
  m->terminal = [coupling](CSpan x, CSpan xp) {
    double v = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) v += x[j] + coupling * xp[j];
    return v;
  };
  m->terminal_dx = [](CSpan, CSpan, MSpan out) { std::fill(out.begin(), out.end(), 1.0); };
  m->terminal_dxp = [coupling](CSpan, CSpan, MSpan out) { std::fill(out.begin(), out.end(), coupling); };
  m->partner.terminal = coupling != 0.0;
  set_constant_driver(*m, 0.0);
  m->lipschitz = std::max(std::abs(beta), std::sqrt((1.0 + coupling * coupling) * d));
  m->unbounded = true;

  ClosedForm cf;
  Vec x0 = m->x0;
  auto mean = [x0, beta](int j, double t) { return x0[j] * std::exp(beta * t); };
  auto grid_mean = [x0, beta](int j, const TimeGrid& g, int i) {
    return x0[j] * std::pow(1.0 + beta * g.h(), i);
  };
  set_gaussian_forward(cf, d, s, mean, grid_mean);
  cf.grid_bsde = [d, s, coupling, grid_mean](const TimeGrid& g, CSpan dw, MSpan y, MSpan z) {
    double terminal_mean = 0.0;
    for (int j = 0; j < d; ++j) terminal_mean += (1.0 + coupling) * grid_mean(j, g, g.steps);
    double w = 0.0;
    for (int i = 0; i <= g.steps; ++i) {
      y[i] = terminal_mean + s * w;
      if (i < g.steps) {
        for (int j = 0; j < d; ++j) {
          w += dw[i * d + j];
          z[i * d + j] = s;
        }
      }
    }
  };
  double y0 = 0.0;
  for (int j = 0; j < d; ++j) y0 += (1.0 + coupling) * mean(j, m->horizon);
  cf.y0 = y0;
  m->closed_form = std::move(cf);
  return m;
}

ModelPtr make_tanh(const CatalogParams& p) {
  check_params("tanh_bounded", p, {"a", "s"});
  auto m = base_spec("tanh_bounded", p);
  double a = param(p, "a", 1.0), s = param(p, "s", 1.0);
  int d = m->dim;
  m->drift = [a](CSpan, CSpan xp, MSpan out) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = a * std::tanh(xp[j]);
  };
  m->drift_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->drift_dxp = [d, a](CSpan, CSpan xp, MSpan out) {
    zero(out);
    for (int i = 0; i < d; ++i) out[i * d + i] = a * sech2(xp[i]);
  };
  m->diffusion = [d, s](CSpan, CSpan xp, MSpan out) {
    zero(out);
    for (int i = 0; i < d; ++i) out[i * d + i] = s * (1.0 + 0.2 * std::tanh(xp[i]));
  };
  m->diffusion_dx = [](CSpan, CSpan, MSpan out) { zero(out); };
  m->diffusion_dxp = [d, s](CSpan, CSpan xp, MSpan out) {
    zero(out);
    for (int i = 0; i < d; ++i) out[(i * d + i) * d + i] = 0.2 * s * sech2(xp[i]);
  };
  m->terminal = [](CSpan x, CSpan xp) {
    double v = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) v += std::tanh(x[j] + xp[j]);
    return v;
  };
  m->terminal_dx = [](CSpan x, CSpan xp, MSpan out) {
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = sech2(x[j] + xp[j]);
  };
  m->terminal_dxp = m->terminal_dx;
  m->driver = [](const Lambda& l, const Partner& q) {
    double v = -0.25 * std::tanh(l.y) + 0.25 * std::tanh(q.y);
    for (double xp : q.x) v += 0.5 * std::tanh(xp);
    for (double z : l.z) v += 0.1 * std::tanh(z);
    return v;
  };
  m->driver_dlambda = [d](const Lambda& l, const Partner&, MSpan out) {
    zero(out);
    out[d] = -0.25 * sech2(l.y);
    for (int j = 0; j < d; ++j) out[d + 1 + j] = 0.1 * sech2(l.z[j]);
  };
  m->driver_dpartner = [d](const Lambda&, const Partner& q, MSpan out) {
    for (int j = 0; j < d; ++j) out[j] = 0.5 * sech2(q.x[j]);
    out[d] = 0.25 * sech2(q.y);
  };
  m->partner = PartnerUse{};
  m->lipschitz = std::max({std::abs(a), 0.2 * std::abs(s), std::sqrt(2.0 * d),
                           std::sqrt(0.26 * d + 0.125)});
  m->unbounded = false;
  return m;
}

}  // namespace

std::vector<std::string> catalog_names() { return {"constant", "ou_mean_field", "tanh_bounded", "mf_bsde_linear"}; }

ModelPtr catalog_model(const std::string& name, const CatalogParams& params) {
  if (name == "constant") return make_constant(params);
  if (name == "ou_mean_field") return make_linear(name, params, 0.0);
  if (name == "mf_bsde_linear") return make_linear(name, params, 1.0);
  if (name == "tanh_bounded") return make_tanh(params);
  throw std::invalid_argument("unknown model '" + name + "'");
}

std::size_t coefficient_size(const ModelSpec& model, Coefficient which) {
  std::size_t d = model.dim;
  switch (which) {
    case Coefficient::drift: return d;
    case Coefficient::diffusion: return d * d;
    case Coefficient::terminal: return 1;
  }
  return 0;
}

Vec evaluate_mean_field(const ModelSpec& model, Coefficient which, CSpan x, const std::vector<Vec>& env) {
  if (env.empty()) throw std::invalid_argument("evaluate_mean_field: empty environment");
  if (x.size() != static_cast<std::size_t>(model.dim))
    throw std::invalid_argument("evaluate_mean_field: state dimension mismatch");
  std::size_t n = coefficient_size(model, which);
  Vec acc(n, 0.0), tmp(n);
  for (const auto& xp : env) {
    if (xp.size() != x.size()) throw std::invalid_argument("evaluate_mean_field: partner dimension mismatch");
    switch (which) {
      case Coefficient::drift: model.drift(x, xp, tmp); break;
      case Coefficient::diffusion: model.diffusion(x, xp, tmp); break;
      case Coefficient::terminal: tmp[0] = model.terminal(x, xp); break;
    }
    for (std::size_t k = 0; k < n; ++k) acc[k] += tmp[k];
  }
  for (auto& v : acc) v /= static_cast<double>(env.size());
  return acc;
}

double evaluate_driver_mean_field(const ModelSpec& model, const Lambda& lambda, const std::vector<Vec>& env_x,
                                  const std::vector<double>& env_y) {
  if (env_x.empty()) throw std::invalid_argument("evaluate_driver_mean_field: empty environment");
  if (env_x.size() != env_y.size()) throw std::invalid_argument("evaluate_driver_mean_field: env size mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < env_x.size(); ++k) acc += model.driver(lambda, Partner{env_x[k], env_y[k]});
  return acc / static_cast<double>(env_x.size());
}

std::vector<Probe> random_probes(const ModelSpec& model, const StreamKey& key, int count) {
  std::vector<Probe> probes;
  Stream s(key);
  for (int k = 0; k < count; ++k) {
    Probe p;
    p.x.resize(model.dim);
    p.xp.resize(model.dim);
    p.z.resize(model.dim);
    for (auto& v : p.x) v = s.normal();
    for (auto& v : p.xp) v = s.normal();
    p.y = s.normal();
    p.yp = s.normal();
    for (auto& v : p.z) v = s.normal();
    probes.push_back(std::move(p));
  }
  return probes;
}

namespace {

struct ErrorTracker {
  GradientReport& report;
  void record(const std::string& name, double analytic, double fd) {
    double e = std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
    if (!std::isfinite(e)) e = std::numeric_limits<double>::infinity();
    double& slot = report.max_error[name];
    slot = std::max(slot, e);
    report.worst = std::max(report.worst, e);
  }
};

// Central differences of a vector function of one perturbed argument.
template <class F>
void compare_jacobian(ErrorTracker& tr, const std::string& name, Vec arg, std::size_t out_size, F&& eval,
                      const Vec& analytic) {
  const double h = kGradientStep;
  Vec plus(out_size), minus(out_size);
  for (std::size_t k = 0; k < arg.size(); ++k) {
    double keep = arg[k];
    arg[k] = keep + h;
    eval(arg, plus);
    arg[k] = keep - h;
    eval(arg, minus);
    arg[k] = keep;
    for (std::size_t i = 0; i < out_size; ++i)
      tr.record(name, analytic[i * arg.size() + k], (plus[i] - minus[i]) / (2.0 * h));
  }
}

}  // namespace

GradientReport check_gradients(const ModelSpec& model, const std::vector<Probe>& probes) {
  GradientReport report;
  ErrorTracker tr{report};
  std::size_t d = model.dim;
  for (const auto& p : probes) {
    Vec jac(d * d), jac3(d * d * d), grad(d);
    model.drift_dx(p.x, p.xp, jac);
    compare_jacobian(tr, "drift_dx", p.x, d, [&](const Vec& a, Vec& out) { model.drift(a, p.xp, out); }, jac);
    model.drift_dxp(p.x, p.xp, jac);
    compare_jacobian(tr, "drift_dxp", p.xp, d, [&](const Vec& a, Vec& out) { model.drift(p.x, a, out); }, jac);
    model.diffusion_dx(p.x, p.xp, jac3);
    compare_jacobian(tr, "diffusion_dx", p.x, d * d,
                     [&](const Vec& a, Vec& out) { model.diffusion(a, p.xp, out); }, jac3);
    model.diffusion_dxp(p.x, p.xp, jac3);
    compare_jacobian(tr, "diffusion_dxp", p.xp, d * d,
                     [&](const Vec& a, Vec& out) { model.diffusion(p.x, a, out); }, jac3);
    model.terminal_dx(p.x, p.xp, grad);
    compare_jacobian(tr, "terminal_dx", p.x, 1, [&](const Vec& a, Vec& out) { out[0] = model.terminal(a, p.xp); },
                     grad);
    model.terminal_dxp(p.x, p.xp, grad);
    compare_jacobian(tr, "terminal_dxp", p.xp, 1,
                     [&](const Vec& a, Vec& out) { out[0] = model.terminal(p.x, a); }, grad);

    // Driver: pack lambda = (x, y, z) and partner = (x', y').
    Vec lam(2 * d + 1), part(d + 1);
    std::copy(p.x.begin(), p.x.end(), lam.begin());
    lam[d] = p.y;
    std::copy(p.z.begin(), p.z.end(), lam.begin() + d + 1);
    std::copy(p.xp.begin(), p.xp.end(), part.begin());
    part[d] = p.yp;
    auto driver_at = [&](const Vec& l, const Vec& q) {
      Lambda L{CSpan(l.data(), d), l[d], CSpan(l.data() + d + 1, d)};
      Partner Q{CSpan(q.data(), d), q[d]};
      return model.driver(L, Q);
    };
    Lambda L{p.x, p.y, p.z};
    Partner Q{p.xp, p.yp};
    Vec glam(2 * d + 1), gpart(d + 1);
    model.driver_dlambda(L, Q, glam);
    compare_jacobian(tr, "driver_dlambda", lam, 1, [&](const Vec& a, Vec& out) { out[0] = driver_at(a, part); },
                     glam);
    model.driver_dpartner(L, Q, gpart);
    compare_jacobian(tr, "driver_dpartner", part, 1, [&](const Vec& a, Vec& out) { out[0] = driver_at(lam, a); },
                     gpart);
  }
  report.pass = report.worst <= kGradientTolerance;
  return report;
}

}  // namespace mfbsde
