#include "mfbsde/backward.hpp"

#include <cmath>
#include <mutex>

#include "mfbsde/parallel.hpp"
#include "mfbsde/stats.hpp"

namespace mfbsde {

namespace {

using Matrix = Eigen::MatrixXd;

// E_law[Phi(x, X'_T)], or Phi(x, x) when Phi ignores its partner.
double terminal_mean(const ModelSpec& m, const LawFlow& law, CSpan x, int cap) {
  if (!m.partner.terminal) return m.terminal(x, x);
  double acc = 0.0, wsum = 0.0;
  law.for_each(
      law.grid().steps,
      [&](CSpan xp, double w) {
        acc += w * m.terminal(x, xp);
        wsum += w;
      },
      cap);
  return acc / wsum;
}

// Driver averaged over m partner states (flat [m][d]) with y-values; the partner
// arguments are ignored when the driver does not read them.
double driver_average(const ModelSpec& m, const Lambda& lam, const double* env_x, const double* env_y,
                      std::size_t count) {
  if (!m.partner.driver() || count == 0) return m.driver(lam, Partner{lam.x, lam.y});
  std::size_t d = lam.x.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < count; ++k)
    acc += m.driver(lam, Partner{CSpan(env_x + k * d, d), env_y ? env_y[k] : 0.0});
  return acc / static_cast<double>(count);
}

// One node of the limit solution at a point: y^(0) = c, y^(k) = c + h fbar_k(x, y^(k-1), z).
double limit_node_y(const ModelSpec& m, const BsdeSolution& sol, int step, CSpan x, double c, CSpan z, int sweeps,
                    double* last_change) {
  double h = sol.grid.h();
  double cur = c;
  double change = 0.0;
  const std::vector<double>& ex = sol.env_x.empty() ? std::vector<double>{} : sol.env_x[step];
  std::size_t count = ex.size() / sol.dim;
  for (int k = 0; k < sweeps; ++k) {
    const double* ey = m.partner.driver() ? sol.env_y[step][k].data() : nullptr;
    double next = c + h * driver_average(m, Lambda{x, cur, z}, ex.data(), ey, count);
    change = std::abs(next - cur);
    cur = next;
  }
  if (last_change) *last_change = change;
  return cur;
}

Matrix node_features(const PathEnsemble& p, int node) {
  Matrix f(p.reps(), p.dim());
  for (int r = 0; r < p.reps(); ++r)
    for (int j = 0; j < p.dim(); ++j) f(r, j) = p.value(r, node, j);
  return f;
}

void require_paths(const PathEnsemble& p, const char* who) {
  if (p.reps() < 1 || !p.has_increments())
    throw std::invalid_argument(std::string(who) + ": paths must carry their Brownian increments");
}

}  // namespace

std::vector<double> BsdeSolution::y_path(int rep) const {
  std::vector<double> out(grid.nodes());
  for (int i = 0; i < grid.nodes(); ++i) out[i] = y_at(rep, i);
  return out;
}

BsdeSolution solve_mfbsde(const ModelSpec& model, const LawFlow& law, const PathEnsemble& x_paths,
                          const RegressionOptions& opts) {
  require_paths(x_paths, "solve_mfbsde");
  const int d = model.dim, R = x_paths.reps();
  const TimeGrid& g = x_paths.grid();
  if (x_paths.dim() != d) throw std::invalid_argument("solve_mfbsde: dimension mismatch");
  if (opts.degree < 0 || opts.inner_iters < 1) throw std::invalid_argument("solve_mfbsde: invalid regression options");
  std::size_t basis = basis_size(d, opts.degree);
  if (static_cast<std::size_t>(R) < 10 * basis)
    throw std::invalid_argument("solve_mfbsde: need at least " + std::to_string(10 * basis) + " paths for degree " +
                                std::to_string(opts.degree));
  const double h = g.h();
  const int cap = opts.mean_field_cap;

  BsdeSolution sol;
  sol.grid = g;
  sol.reps = R;
  sol.dim = d;
  sol.variant = "mfbsde";
  sol.sweeps = opts.inner_iters;
  sol.mean_field_cap = cap;
  sol.y.assign(static_cast<std::size_t>(g.nodes()) * R, 0.0);
  sol.z.assign(static_cast<std::size_t>(g.steps) * R * d, 0.0);
  sol.fits.resize(g.steps);
  sol.degree_used.assign(g.steps, opts.degree);
  if (model.partner.driver()) {
    sol.env_x.resize(g.steps);
    sol.env_y.assign(g.steps, std::vector<std::vector<double>>(opts.inner_iters));
  }

  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r)
      sol.y[static_cast<std::size_t>(g.steps) * R + r] = terminal_mean(model, law, x_paths.state(r, g.steps), cap);
  });

  double sq_resid = 0.0;
  std::vector<double> c(R), cur(R), next(R);
  for (int i = g.steps - 1; i >= 0; --i) {
    Matrix feat = node_features(x_paths, i);
    Matrix target(R, 1);
    for (int r = 0; r < R; ++r) target(r, 0) = sol.y_at(r, i + 1);
    NodeFit& fit = sol.fits[i];
    fit.continuation = fit_regression(feat, target, opts.degree);
    for (int r = 0; r < R; ++r) c[r] = fit.continuation.evaluate(x_paths.state(r, i));
    Matrix zt(R, d);
    for (int r = 0; r < R; ++r) {
      double resid = sol.y_at(r, i + 1) - c[r];
      sq_resid += resid * resid;
      for (int j = 0; j < d; ++j) zt(r, j) = resid * x_paths.increment(r, i)[j] / h;
    }
    fit.z = fit_regression(feat, zt, opts.degree);
    for (int r = 0; r < R; ++r)
      fit.z.evaluate(x_paths.state(r, i), std::span<double>(sol.z.data() + (static_cast<std::size_t>(i) * R + r) * d, d));
    sol.degree_used[i] = std::min(fit.continuation.degree, fit.z.degree);
    if (fit.continuation.fell_back() || fit.z.fell_back()) ++sol.fallback_count;

    int m = std::min(R, cap > 0 ? cap : R);
    if (model.partner.driver()) {
      sol.env_x[i].resize(static_cast<std::size_t>(m) * d);
      for (int r = 0; r < m; ++r)
        for (int j = 0; j < d; ++j) sol.env_x[i][r * d + j] = x_paths.value(r, i, j);
    }
    cur = c;
    double change = 0.0;
    for (int k = 0; k < opts.inner_iters; ++k) {
      const double* ey = nullptr;
      if (model.partner.driver()) {
        sol.env_y[i][k].assign(cur.begin(), cur.begin() + m);
        ey = sol.env_y[i][k].data();
      }
      const double* ex = model.partner.driver() ? sol.env_x[i].data() : nullptr;
      std::size_t count = model.partner.driver() ? static_cast<std::size_t>(m) : 0;
      std::vector<double> changes(R, 0.0);
      parallel_for(R, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
          CSpan z(sol.z.data() + (static_cast<std::size_t>(i) * R + r) * d, d);
          next[r] = c[r] + h * driver_average(model, Lambda{x_paths.state(r, i), cur[r], z}, ex, ey, count);
          changes[r] = std::abs(next[r] - cur[r]);
        }
      });
      change = *std::max_element(changes.begin(), changes.end());
      std::swap(cur, next);
    }
    if (opts.inner_iters >= 2 && change > kContractionTol) sol.contraction_flag = true;
    for (int r = 0; r < R; ++r) sol.y[static_cast<std::size_t>(i) * R + r] = cur[r];
  }
  sol.residual_rms = std::sqrt(sq_resid / (static_cast<double>(R) * g.steps));
  for (double v : sol.z) sol.max_abs_z = std::max(sol.max_abs_z, std::abs(v));
  sol.z_bound_exceeded = sol.max_abs_z > opts.z_bound;
  return sol;
}

LimitValue evaluate_limit(const ModelSpec& model, const LawFlow& law, const BsdeSolution& limit, int node,
                          std::span<const double> x) {
  LimitValue v;
  v.z.assign(limit.dim, 0.0);
  if (node == limit.grid.steps) {
    v.y = v.continuation = terminal_mean(model, law, x, limit.mean_field_cap);
    return v;
  }
  const NodeFit& fit = limit.fits.at(node);
  v.continuation = fit.continuation.evaluate(x);
  fit.z.evaluate(x, v.z);
  v.y = limit_node_y(model, limit, node, x, v.continuation, v.z, limit.sweeps, nullptr);
  return v;
}

namespace {

// Env y-values for the partner states of the X^N environment cloud, per node.
struct EnvY {
  std::vector<double> table;  // [node][sample]
  int samples = 0;
  const double* at(int node) const {
    return table.empty() ? nullptr : table.data() + static_cast<std::size_t>(node) * samples;
  }
};

struct ConditionedPath {
  std::vector<double> y;  // [node]
  std::vector<double> z;  // [step][coord]
  int fallbacks = 0;
  int min_degree = 1 << 20;
  bool contraction = false;
};

struct ConditionedContext {
  const ModelSpec& model;
  int n;
  const LawFlow& env_law;
  const EnvY& env_y;
  const LawFlow& law;
  const BsdeSolution& limit;
  const RegressionOptions& opts;
};

// Y^N and Z^N along one replication, conditioned on its environment through a
// nested ensemble. Inner path 0 is the replication itself.
ConditionedPath conditioned_solve(const ConditionedContext& ctx, CSpan dw0, CSpan xn0, CSpan x0,
                                  std::span<const std::uint32_t> env, std::uint64_t inner_root) {
  const ModelSpec& m = ctx.model;
  const TimeGrid& g = ctx.law.grid();
  const int d = m.dim, M = std::max(1, ctx.opts.inner_paths), nodes = g.nodes(), steps = g.steps;
  const double h = g.h();
  const std::size_t pn = static_cast<std::size_t>(nodes) * d, ps = static_cast<std::size_t>(steps) * d;

  std::vector<double> X(M * pn), XN(M * pn), DW(M * ps);
  std::copy(x0.begin(), x0.end(), X.begin());
  std::copy(xn0.begin(), xn0.end(), XN.begin());
  std::copy(dw0.begin(), dw0.end(), DW.begin());
  for (int j = 1; j < M; ++j) {
    std::span<double> dw(DW.data() + j * ps, ps);
    brownian_increments(derive_digest(inner_root, Role::inner, j), g, d, dw);
    sde_n_path(m, ctx.env_law, env, dw, std::span<double>(XN.data() + j * pn, pn));
    limit_path(m, ctx.law, dw, std::span<double>(X.data() + j * pn, pn), ctx.opts.mean_field_cap);
  }
  auto state = [&](std::vector<double>& v, int j, int i) { return std::span<const double>(v.data() + j * pn + i * d, d); };

  // Limit solution along every inner path.
  std::vector<double> ylim(M * nodes), clim(M * nodes), zlim(M * ps);
  for (int j = 0; j < M; ++j)
    for (int i = 0; i < nodes; ++i) {
      LimitValue lv = evaluate_limit(m, ctx.law, ctx.limit, i, state(X, j, i));
      ylim[j * nodes + i] = lv.y;
      clim[j * nodes + i] = lv.continuation;
      if (i < steps) std::copy(lv.z.begin(), lv.z.end(), zlim.begin() + j * ps + i * d);
    }

  const PathEnsemble& cloud = ctx.env_law.samples();
  const std::size_t N = env.size();
  std::vector<double> envx(N * d), envy(N);
  auto load_env = [&](int node) {
    const double* ey = ctx.env_y.at(node);
    for (std::size_t k = 0; k < N; ++k) {
      auto s = cloud.state(static_cast<int>(env[k]), node);
      std::copy(s.begin(), s.end(), envx.begin() + k * d);
      envy[k] = ey ? ey[env[k]] : 0.0;
    }
  };

  ConditionedPath out;
  out.y.assign(nodes, 0.0);
  out.z.assign(ps, 0.0);
  std::vector<double> D(M), YN(M), ZN(M * d);

  for (int j = 0; j < M; ++j) {
    CSpan xn = state(XN, j, steps);
    double phi;
    if (!m.partner.terminal) {
      phi = m.terminal(xn, xn);
    } else {
      double acc = 0.0;
      for (std::size_t k = 0; k < N; ++k) acc += m.terminal(xn, cloud.state(static_cast<int>(env[k]), steps));
      phi = acc / static_cast<double>(N);
    }
    YN[j] = phi;
    D[j] = phi - ylim[j * nodes + steps];
  }
  out.y[steps] = YN[0];

  Matrix feat(M, 2 * d), target(M, 1), zt(M, d);
  std::vector<double> fx(2 * d), cd(M), base(M), cur(M), nxt(M);
  for (int i = steps - 1; i >= 0; --i) {
    for (int j = 0; j < M; ++j) {
      auto x = state(X, j, i);
      auto xn = state(XN, j, i);
      for (int k = 0; k < d; ++k) {
        feat(j, k) = x[k];
        feat(j, d + k) = xn[k] - x[k];
      }
      target(j, 0) = D[j];
    }
    RegressionFit fc = fit_regression(feat, target, ctx.opts.degree);
    for (int j = 0; j < M; ++j) {
      for (int k = 0; k < 2 * d; ++k) fx[k] = feat(j, k);
      cd[j] = fc.evaluate(fx);
      double resid = D[j] - cd[j];
      for (int k = 0; k < d; ++k) zt(j, k) = resid * DW[j * ps + i * d + k] / h;
    }
    RegressionFit fz = fit_regression(feat, zt, ctx.opts.degree);
    for (int j = 0; j < M; ++j) {
      for (int k = 0; k < 2 * d; ++k) fx[k] = feat(j, k);
      std::span<double> zn(ZN.data() + j * d, d);
      fz.evaluate(fx, zn);
      for (int k = 0; k < d; ++k) zn[k] = zlim[j * ps + i * d + k] + zn[k];
    }
    out.min_degree = std::min({out.min_degree, fc.degree, fz.degree});
    if (fc.fell_back() || fz.fell_back()) ++out.fallbacks;

    if (m.partner.driver()) load_env(i);
    for (int j = 0; j < M; ++j) base[j] = cur[j] = clim[j * nodes + i] + cd[j];
    double change = 0.0;
    for (int k = 0; k < ctx.opts.inner_iters; ++k) {
      change = 0.0;
      for (int j = 0; j < M; ++j) {
        Lambda lam{state(XN, j, i), cur[j], CSpan(ZN.data() + j * d, d)};
        nxt[j] = base[j] + h * driver_average(m, lam, envx.data(), m.partner.driver_y ? envy.data() : nullptr,
                                              m.partner.driver() ? N : 0);
        change = std::max(change, std::abs(nxt[j] - cur[j]));
      }
      std::swap(cur, nxt);
    }
    if (ctx.opts.inner_iters >= 2 && change > kContractionTol) out.contraction = true;
    for (int j = 0; j < M; ++j) {
      YN[j] = cur[j];
      D[j] = YN[j] - ylim[j * nodes + i];
    }
    out.y[i] = YN[0];
    std::copy(ZN.begin(), ZN.begin() + d, out.z.begin() + i * d);
  }
  return out;
}

// Env y-values of the environment cloud from a function of (node, state).
template <class F>
EnvY tabulate_env_y(const LawFlow& env_law, F&& fn) {
  EnvY t;
  t.samples = env_law.size();
  int nodes = env_law.grid().nodes();
  t.table.resize(static_cast<std::size_t>(nodes) * t.samples);
  parallel_for(t.samples, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k)
      for (int i = 0; i < nodes; ++i)
        t.table[static_cast<std::size_t>(i) * t.samples + k] = fn(i, env_law.samples().state(static_cast<int>(k), i));
  });
  return t;
}

}  // namespace

BsdeSolution solve_bsde_n(const ModelSpec& model, int n, const SdeNResult& sde, const LimitInputs& limit,
                          const RegressionOptions& opts, const StreamKey& inner_key) {
  if (!limit.law || !limit.paths || !limit.solution) throw std::invalid_argument("solve_bsde_n: missing limit inputs");
  const PathEnsemble& xn = sde.paths;
  require_paths(xn, "solve_bsde_n");
  const PathEnsemble& xl = *limit.paths;
  const int R = xn.reps(), d = model.dim;
  const TimeGrid& g = xn.grid();
  if (xl.reps() != R || xl.grid().steps != g.steps || limit.solution->grid.steps != g.steps)
    throw std::invalid_argument("solve_bsde_n: limit paths do not match the X^N replications");
  if (static_cast<int>(sde.environments.size()) != R)
    throw std::invalid_argument("solve_bsde_n: one environment per replication required");
  if (opts.inner_paths < 1) throw std::invalid_argument("solve_bsde_n: inner_paths must be >= 1");

  const LawFlow& law = *limit.law;
  const BsdeSolution& lim = *limit.solution;

  BsdeSolution sol;
  sol.grid = g;
  sol.reps = R;
  sol.dim = d;
  sol.variant = "bsde_n";
  sol.y.assign(static_cast<std::size_t>(g.nodes()) * R, 0.0);
  sol.z.assign(static_cast<std::size_t>(g.steps) * R * d, 0.0);

  EnvY env_y;
  if (model.partner.driver_y) {
    env_y = tabulate_env_y(sde.env_law, [&](int i, CSpan x) { return evaluate_limit(model, law, lim, i, x).y; });

    // Iterate the Y^N law on a sub-cloud of fresh X^N particles.
    const int My = std::min(opts.y_law_paths, sde.env_law.size());
    const std::uint64_t env_root = sde.env_key.digest();
    const std::size_t pn = static_cast<std::size_t>(g.nodes()) * d, ps = static_cast<std::size_t>(g.steps) * d;
    std::vector<double> sub_dw(My * ps), sub_xn(My * pn), sub_x(My * pn);
    std::vector<std::vector<std::uint32_t>> sub_env(My);
    for (int c = 0; c < My; ++c) {
      std::span<double> dw(sub_dw.data() + c * ps, ps);
      cloud_increments(env_root, c, g, d, dw);
      Stream s(derive_digest(env_root, Role::aux, c));
      sub_env[c].resize(n);
      for (auto& v : sub_env[c]) v = static_cast<std::uint32_t>(s.below(sde.env_law.size()));
      sde_n_path(model, sde.env_law, sub_env[c], dw, std::span<double>(sub_xn.data() + c * pn, pn));
      limit_path(model, law, dw, std::span<double>(sub_x.data() + c * pn, pn), opts.mean_field_cap);
    }
    auto values_of = [&](auto&& fn) {
      std::vector<double> v(static_cast<std::size_t>(My) * g.nodes());
      for (int c = 0; c < My; ++c)
        for (int i = 0; i < g.nodes(); ++i) v[i * My + c] = fn(i, CSpan(sub_xn.data() + c * pn + i * d, d));
      return v;
    };
    std::vector<double> prev =
        values_of([&](int i, CSpan x) { return evaluate_limit(model, law, lim, i, x).y; });
    sol.y_law_converged = false;
    for (int level = 0; level < opts.y_law_iters; ++level) {
      ConditionedContext ctx{model, n, sde.env_law, env_y, law, lim, opts};
      std::vector<double> now(static_cast<std::size_t>(My) * g.nodes());
      parallel_for(My, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t c = lo; c < hi; ++c) {
          auto res = conditioned_solve(ctx, CSpan(sub_dw.data() + c * ps, ps), CSpan(sub_xn.data() + c * pn, pn),
                                       CSpan(sub_x.data() + c * pn, pn), sub_env[c],
                                       derive_digest(inner_key.digest(), Role::cloud, c));
          for (int i = 0; i < g.nodes(); ++i) now[i * My + c] = res.y[i];
        }
      });
      std::vector<RegressionFit> fits(g.nodes());
      for (int i = 0; i < g.nodes(); ++i) {
        Matrix f(My, d), t(My, 1);
        for (int c = 0; c < My; ++c) {
          for (int k = 0; k < d; ++k) f(c, k) = sub_xn[c * pn + i * d + k];
          t(c, 0) = now[i * My + c];
        }
        fits[i] = fit_regression(f, t, opts.degree);
      }
      double metric = 0.0;
      for (int i = 0; i < g.nodes(); ++i) {
        Summary a = summarize(CSpan(prev.data() + i * My, My)), b = summarize(CSpan(now.data() + i * My, My));
        metric = std::max(metric, std::abs(a.mean - b.mean) + std::abs(a.variance - b.variance));
      }
      env_y = tabulate_env_y(sde.env_law, [&](int i, CSpan x) { return fits[i].evaluate(x); });
      sol.y_law_iterations = level + 1;
      prev = std::move(now);
      if (metric < opts.y_law_tol) {
        sol.y_law_converged = true;
        break;
      }
    }
  }

  ConditionedContext ctx{model, n, sde.env_law, env_y, law, lim, opts};
  std::vector<int> fallbacks(R, 0), degrees(R, opts.degree);
  std::vector<char> contraction(R, 0);
  const std::uint64_t inner_root = inner_key.digest();
  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      int rep = static_cast<int>(r);
      auto dw = xn.increments_of(rep);
      auto pxn = xn.path_of(rep);
      auto px = xl.path_of(rep);
      auto res = conditioned_solve(ctx, dw, pxn, px, sde.environments[r].indices,
                                   derive_digest(inner_root, Role::replication, r));
      for (int i = 0; i < g.nodes(); ++i) sol.y[static_cast<std::size_t>(i) * R + r] = res.y[i];
      for (int i = 0; i < g.steps; ++i)
        for (int k = 0; k < d; ++k) sol.z[(static_cast<std::size_t>(i) * R + r) * d + k] = res.z[i * d + k];
      fallbacks[r] = res.fallbacks;
      degrees[r] = res.min_degree;
      contraction[r] = res.contraction;
    }
  });
  for (int r = 0; r < R; ++r) {
    sol.fallback_count += fallbacks[r];
    sol.contraction_flag = sol.contraction_flag || contraction[r];
  }
  sol.degree_used.assign(g.steps, *std::min_element(degrees.begin(), degrees.end()));
  for (double v : sol.z) sol.max_abs_z = std::max(sol.max_abs_z, std::abs(v));
  sol.z_bound_exceeded = sol.max_abs_z > opts.z_bound;
  return sol;
}

LinearBsdeResult solve_linear_limit_bsde(const LinearBsdeProblem& p, int degree) {
  const int M = p.paths, d = p.dim, K = p.feature_count, steps = p.grid.steps;
  if (M < 1 || d < 1 || K < 1) throw std::invalid_argument("solve_linear_limit_bsde: empty problem");
  const double h = p.grid.h();
  LinearBsdeResult out;
  out.y.assign(static_cast<std::size_t>(p.grid.nodes()) * M, 0.0);
  out.z.assign(static_cast<std::size_t>(steps) * M * d, 0.0);
  for (int j = 0; j < M; ++j) out.y[static_cast<std::size_t>(steps) * M + j] = p.terminal[j];
  Matrix feat(M, K), target(M, 1), zt(M, d);
  std::vector<double> c(M);
  for (int i = steps - 1; i >= 0; --i) {
    for (int j = 0; j < M; ++j) {
      for (int k = 0; k < K; ++k) feat(j, k) = p.features[(static_cast<std::size_t>(i) * M + j) * K + k];
      target(j, 0) = out.y[static_cast<std::size_t>(i + 1) * M + j];
    }
    RegressionFit fc = fit_regression(feat, target, degree);
    for (int j = 0; j < M; ++j) {
      c[j] = fc.evaluate(CSpan(p.features.data() + (static_cast<std::size_t>(i) * M + j) * K, K));
      double resid = target(j, 0) - c[j];
      for (int k = 0; k < d; ++k) zt(j, k) = resid * p.dw[(static_cast<std::size_t>(i) * M + j) * d + k] / h;
    }
    RegressionFit fz = fit_regression(feat, zt, degree);
    if (fc.fell_back() || fz.fell_back()) ++out.fallback_count;
    for (int j = 0; j < M; ++j) {
      std::size_t at = static_cast<std::size_t>(i) * M + j;
      std::span<double> z(out.z.data() + at * d, d);
      fz.evaluate(CSpan(p.features.data() + at * K, K), z);
      double gz = 0.0;
      for (int k = 0; k < d; ++k) gz += p.gamma[at * d + k] * z[k];
      out.y[at] = (c[j] + h * (p.alpha[at] + gz)) / (1.0 - h * p.beta[at]);
    }
  }
  return out;
}

BsdeSolution solve_plain_bsde(const PathEnsemble& x_paths, const PlainBsdeData& data, const RegressionOptions& opts) {
  require_paths(x_paths, "solve_plain_bsde");
  if (!data.terminal || !data.driver) throw std::invalid_argument("solve_plain_bsde: incomplete data");
  const int R = x_paths.reps(), d = x_paths.dim();
  const TimeGrid& g = x_paths.grid();
  const double h = g.h();
  BsdeSolution sol;
  sol.grid = g;
  sol.reps = R;
  sol.dim = d;
  sol.variant = "plain";
  sol.y.assign(static_cast<std::size_t>(g.nodes()) * R, 0.0);
  sol.z.assign(static_cast<std::size_t>(g.steps) * R * d, 0.0);
  sol.fits.resize(g.steps);
  sol.degree_used.assign(g.steps, opts.degree);
  for (int r = 0; r < R; ++r) sol.y[static_cast<std::size_t>(g.steps) * R + r] = data.terminal(x_paths.state(r, g.steps));
  double sq_resid = 0.0;
  std::vector<double> c(R);
  for (int i = g.steps - 1; i >= 0; --i) {
    Matrix feat = node_features(x_paths, i), target(R, 1), zt(R, d);
    for (int r = 0; r < R; ++r) target(r, 0) = sol.y_at(r, i + 1);
    NodeFit& fit = sol.fits[i];
    fit.continuation = fit_regression(feat, target, opts.degree);
    for (int r = 0; r < R; ++r) {
      c[r] = fit.continuation.evaluate(x_paths.state(r, i));
      double resid = target(r, 0) - c[r];
      sq_resid += resid * resid;
      for (int j = 0; j < d; ++j) zt(r, j) = resid * x_paths.increment(r, i)[j] / h;
    }
    fit.z = fit_regression(feat, zt, opts.degree);
    sol.degree_used[i] = std::min(fit.continuation.degree, fit.z.degree);
    if (fit.continuation.fell_back() || fit.z.fell_back()) ++sol.fallback_count;
    double t = g.t(i);
    for (int r = 0; r < R; ++r) {
      std::span<double> z(sol.z.data() + (static_cast<std::size_t>(i) * R + r) * d, d);
      fit.z.evaluate(x_paths.state(r, i), z);
      double cur = c[r], change = 0.0;
      for (int k = 0; k < opts.inner_iters; ++k) {
        double next = c[r] + h * data.driver(t, x_paths.state(r, i), cur, z);
        change = std::abs(next - cur);
        cur = next;
      }
      if (opts.inner_iters >= 2 && change > kContractionTol) sol.contraction_flag = true;
      sol.y[static_cast<std::size_t>(i) * R + r] = cur;
    }
  }
  sol.residual_rms = std::sqrt(sq_resid / (static_cast<double>(R) * g.steps));
  for (double v : sol.z) sol.max_abs_z = std::max(sol.max_abs_z, std::abs(v));
  sol.z_bound_exceeded = sol.max_abs_z > opts.z_bound;
  return sol;
}

ComparisonResult check_comparison(const PathEnsemble& x_paths, const PlainBsdeData& first,
                                  const PlainBsdeData& second, const RegressionOptions& opts) {
  const int R = x_paths.reps(), steps = x_paths.grid().steps;
  constexpr double slack = 1e-12;
  for (int r = 0; r < R; ++r) {
    auto x = x_paths.state(r, steps);
    if (first.terminal(x) < second.terminal(x) - slack)
      throw std::invalid_argument("check_comparison: terminal ordering violated on the sampled support");
  }
  ComparisonResult res;
  res.first = solve_plain_bsde(x_paths, first, opts);
  res.second = solve_plain_bsde(x_paths, second, opts);
  const int d = x_paths.dim();
  for (int i = 0; i < steps; ++i) {
    double t = x_paths.grid().t(i);
    for (int r = 0; r < R; ++r) {
      auto x = x_paths.state(r, i);
      for (const BsdeSolution* s : {&res.first, &res.second}) {
        CSpan z(s->z.data() + (static_cast<std::size_t>(i) * R + r) * d, d);
        double y = s->y_at(r, i);
        if (first.driver(t, x, y, z) < second.driver(t, x, y, z) - slack)
          throw std::invalid_argument("check_comparison: driver ordering violated on the sampled support");
      }
    }
  }
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < res.first.y.size(); ++k) margin = std::min(margin, res.first.y[k] - res.second.y[k]);
  res.margin = margin;
  res.tolerance = 1e-6 + 2.0 * std::max(res.first.residual_rms, res.second.residual_rms);
  res.pass = margin >= -res.tolerance;
  return res;
}

HolderFit holder_exponent(const BsdeSolution& sol, int levels) {
  const int steps = sol.grid.steps, R = sol.reps;
  HolderFit out;
  for (int k = 0; k < levels; ++k) {
    int gap = 1 << k;
    if (gap > steps) break;
    std::vector<double> per_rep(R, 0.0);
    int count = steps - gap + 1;
    for (int r = 0; r < R; ++r) {
      double acc = 0.0;
      for (int i = 0; i + gap <= steps; ++i) acc += std::pow(sol.y_at(r, i + gap) - sol.y_at(r, i), 2);
      per_rep[r] = acc / count;
    }
    Summary s = summarize(per_rep);
    out.gaps.push_back(gap * sol.grid.h());
    out.mean_sq_increment.push_back(s.mean);
    out.se.push_back(s.se);
  }
  out.slope = fit_log_slope(out.gaps, out.mean_sq_increment, out.se).slope;
  return out;
}

}  // namespace mfbsde
