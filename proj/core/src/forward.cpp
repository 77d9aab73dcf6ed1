#include "mfbsde/forward.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "mfbsde/parallel.hpp"
#include "mfbsde/stats.hpp"

namespace mfbsde {

namespace {

constexpr int kBlock = 256;

struct Scratch {
  Vec drift, diff, tmp_d, tmp_dd;
  explicit Scratch(int d) : drift(d), diff(d * d), tmp_d(d), tmp_dd(d * d) {}
};

// Drift and diffusion averaged over partners(fn) where fn(x', weight).
template <class Partners>
void averaged_coefficients(const ModelSpec& m, CSpan x, Partners&& partners, Scratch& s) {
  if (!m.partner.drift) m.drift(x, x, s.drift);
  if (!m.partner.diffusion) m.diffusion(x, x, s.diff);
  if (!m.partner.drift && !m.partner.diffusion) return;
  if (m.partner.drift) std::fill(s.drift.begin(), s.drift.end(), 0.0);
  if (m.partner.diffusion) std::fill(s.diff.begin(), s.diff.end(), 0.0);
  double wsum = 0.0;
  partners([&](CSpan xp, double w) {
    wsum += w;
    if (m.partner.drift) {
      m.drift(x, xp, s.tmp_d);
      for (std::size_t j = 0; j < s.drift.size(); ++j) s.drift[j] += w * s.tmp_d[j];
    }
    if (m.partner.diffusion) {
      m.diffusion(x, xp, s.tmp_dd);
      for (std::size_t j = 0; j < s.diff.size(); ++j) s.diff[j] += w * s.tmp_dd[j];
    }
  });
  if (m.partner.drift)
    for (auto& v : s.drift) v /= wsum;
  if (m.partner.diffusion)
    for (auto& v : s.diff) v /= wsum;
}

void euler(CSpan x, const Scratch& s, CSpan dw, double h, MSpan out, int step) {
  std::size_t d = x.size();
  for (std::size_t j = 0; j < d; ++j) {
    double acc = x[j] + s.drift[j] * h;
    for (std::size_t k = 0; k < d; ++k) acc += s.diff[j * d + k] * dw[k];
    if (!std::isfinite(acc) || std::abs(acc) > kDivergenceBound)
      throw DivergenceError("state left the divergence bound at step " + std::to_string(step), step);
    out[j] = acc;
  }
}

std::vector<std::uint32_t> draw_indices(std::uint64_t digest, int n, int population) {
  std::vector<std::uint32_t> idx(n);
  Stream s(digest);
  for (auto& v : idx) v = static_cast<std::uint32_t>(s.below(static_cast<std::uint64_t>(population)));
  return idx;
}

// Simulates X^N for particles [begin, end) of `out`, step-major inside the block.
template <class WFill, class IdxDigest>
void simulate_sde_n_range(const ModelSpec& m, const LawFlow& env, int n, int begin, int end, WFill&& w_fill,
                          IdxDigest&& idx_digest, PathEnsemble& out, std::vector<EnvironmentDraw>* draws) {
  const TimeGrid& g = out.grid();
  int d = m.dim;
  std::size_t per = static_cast<std::size_t>(g.steps) * d;
  for (int b0 = begin; b0 < end; b0 += kBlock) {
    int b1 = std::min(end, b0 + kBlock);
    int count = b1 - b0;
    std::vector<double> dw(count * per);
    std::vector<std::uint32_t> idx(static_cast<std::size_t>(count) * n);
    for (int c = 0; c < count; ++c) {
      w_fill(b0 + c, std::span<double>(dw.data() + c * per, per));
      auto ix = draw_indices(idx_digest(b0 + c), n, env.size());
      std::copy(ix.begin(), ix.end(), idx.begin() + static_cast<std::ptrdiff_t>(c) * n);
      auto x = out.state(b0 + c, 0);
      std::copy(m.x0.begin(), m.x0.end(), x.begin());
      if (out.has_increments()) out.set_increments(b0 + c, std::span<const double>(dw.data() + c * per, per));
      if (draws) (*draws)[b0 + c].indices = std::move(ix);
    }
    Scratch s(d);
    const PathEnsemble& cloud = env.samples();
    for (int i = 0; i < g.steps; ++i) {
      for (int c = 0; c < count; ++c) {
        const std::uint32_t* ix = idx.data() + static_cast<std::size_t>(c) * n;
        auto partners = [&](auto&& fn) {
          for (int k = 0; k < n; ++k) fn(cloud.state(static_cast<int>(ix[k]), i), 1.0);
        };
        averaged_coefficients(m, out.state(b0 + c, i), partners, s);
        euler(out.state(b0 + c, i), s, std::span<const double>(dw.data() + c * per + i * d, d), g.h(),
              out.state(b0 + c, i + 1), i);
      }
    }
  }
}

template <class F>
void parallel_blocks(int count, F&& fn) {
  int blocks = (count + kBlock - 1) / kBlock;
  parallel_for(static_cast<std::size_t>(blocks), [&](std::size_t lo, std::size_t hi) {
    fn(static_cast<int>(lo) * kBlock, std::min(count, static_cast<int>(hi) * kBlock));
  });
}

}  // namespace

PathEnsemble::PathEnsemble(TimeGrid grid, int dim, int reps, bool with_increments)
    : grid_(grid), dim_(dim), reps_(reps) {
  if (dim < 1 || reps < 1) throw std::invalid_argument("PathEnsemble: dim and reps must be positive");
  values_.assign(static_cast<std::size_t>(grid_.nodes()) * reps * dim, 0.0);
  if (with_increments) increments_.assign(static_cast<std::size_t>(grid_.steps) * reps * dim, 0.0);
}

std::vector<double> PathEnsemble::path_of(int rep) const {
  std::vector<double> p(static_cast<std::size_t>(nodes()) * dim_);
  for (int i = 0; i < nodes(); ++i)
    for (int j = 0; j < dim_; ++j) p[i * dim_ + j] = value(rep, i, j);
  return p;
}

std::vector<double> PathEnsemble::increments_of(int rep) const {
  if (!has_increments()) throw std::logic_error("PathEnsemble: no increments stored");
  std::vector<double> p(static_cast<std::size_t>(grid_.steps) * dim_);
  for (int i = 0; i < grid_.steps; ++i)
    for (int j = 0; j < dim_; ++j) p[i * dim_ + j] = increments_[index(rep, i) + j];
  return p;
}

void PathEnsemble::set_path(int rep, std::span<const double> path) {
  for (int i = 0; i < nodes(); ++i)
    for (int j = 0; j < dim_; ++j) values_[index(rep, i) + j] = path[i * dim_ + j];
}

void PathEnsemble::set_increments(int rep, std::span<const double> dw) {
  if (!has_increments()) throw std::logic_error("PathEnsemble: no increments stored");
  for (int i = 0; i < grid_.steps; ++i)
    for (int j = 0; j < dim_; ++j) increments_[index(rep, i) + j] = dw[i * dim_ + j];
}

std::vector<double> PathEnsemble::sample_mean(int node) const {
  std::vector<double> m(dim_, 0.0);
  for (int r = 0; r < reps_; ++r)
    for (int j = 0; j < dim_; ++j) m[j] += value(r, node, j);
  for (auto& v : m) v /= reps_;
  return m;
}

std::vector<double> PathEnsemble::sample_variance(int node) const {
  auto m = sample_mean(node);
  std::vector<double> v(dim_, 0.0);
  if (reps_ < 2) return v;
  for (int r = 0; r < reps_; ++r)
    for (int j = 0; j < dim_; ++j) v[j] += (value(r, node, j) - m[j]) * (value(r, node, j) - m[j]);
  for (auto& x : v) x /= (reps_ - 1);
  return v;
}

QuadratureRule gauss_hermite(int points) {
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(points, points);
  for (int k = 0; k + 1 < points; ++k) jac(k, k + 1) = jac(k + 1, k) = std::sqrt(static_cast<double>(k + 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
  QuadratureRule q;
  for (int k = 0; k < points; ++k) {
    q.points.push_back(es.eigenvalues()(k));
    double v = es.eigenvectors()(0, k);
    q.weights.push_back(v * v);
  }
  return q;
}

LawFlow LawFlow::from_cloud(PathEnsemble cloud) {
  if (cloud.reps() < 2) throw std::invalid_argument("LawFlow: cloud needs at least 2 samples");
  LawFlow law;
  law.kind_ = Kind::cloud;
  law.samples_ = std::move(cloud);
  return law;
}

void cloud_increments(std::uint64_t root, int c, const TimeGrid& grid, int dim, std::span<double> out) {
  brownian_increments(derive_digest(root, Role::cloud, static_cast<std::uint64_t>(c / 2)), grid, dim, out);
  if (c % 2 == 1)
    for (double& v : out) v = -v;
}

LawFlow LawFlow::closed_form(const ModelSpec& model, const TimeGrid& grid, int samples, const StreamKey& key) {
  if (!model.closed_form) throw std::invalid_argument("LawFlow: model '" + model.name + "' has no closed form");
  if (samples < 2) throw std::invalid_argument("LawFlow: need at least 2 samples");
  const ClosedForm& cf = *model.closed_form;
  int d = model.dim;
  LawFlow law;
  law.kind_ = Kind::closed_form;
  law.samples_ = PathEnsemble(grid, d, samples);
  law.samples_.key_root = key;
  law.samples_.key_role = Role::cloud;
  parallel_for(static_cast<std::size_t>(samples), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> dw(static_cast<std::size_t>(grid.steps) * d), path(static_cast<std::size_t>(grid.nodes()) * d);
    for (std::size_t c = lo; c < hi; ++c) {
      cloud_increments(key.digest(), static_cast<int>(c), grid, d, dw);
      cf.grid_path(grid, dw, path);
      law.samples_.set_path(static_cast<int>(c), path);
    }
  });

  int per_axis = d == 1 ? 20 : d == 2 ? 10 : d == 3 ? 6 : 0;
  Vec mu(d), cov(d * d);
  for (int i = 0; i < grid.nodes(); ++i) {
    cf.grid_marginal(grid, i, mu, cov);
    law.exact_mean_.push_back(mu);
    Vec var(d);
    for (int j = 0; j < d; ++j) var[j] = cov[j * d + j];
    law.exact_var_.push_back(var);
    if (per_axis == 0) continue;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> c(cov.data(), d, d);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    Eigen::MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    QuadratureRule base = gauss_hermite(per_axis);
    QuadratureRule rule;
    std::size_t total = 1;
    for (int j = 0; j < d; ++j) total *= per_axis;
    std::vector<int> digit(d, 0);
    Eigen::VectorXd z(d);
    for (std::size_t k = 0; k < total; ++k) {
      std::size_t rem = k;
      double w = 1.0;
      for (int j = 0; j < d; ++j) {
        digit[j] = static_cast<int>(rem % per_axis);
        rem /= per_axis;
        z(j) = base.points[digit[j]];
        w *= base.weights[digit[j]];
      }
      Eigen::VectorXd x = root * z;
      for (int j = 0; j < d; ++j) rule.points.push_back(mu[j] + x(j));
      rule.weights.push_back(w);
    }
    law.quadrature_.push_back(std::move(rule));
  }
  return law;
}

std::vector<double> LawFlow::mean(int node) const {
  return exact_mean_.empty() ? samples_.sample_mean(node) : exact_mean_[node];
}

std::vector<double> LawFlow::variance(int node) const {
  return exact_var_.empty() ? samples_.sample_variance(node) : exact_var_[node];
}

double law_distance(const LawFlow& a, const LawFlow& b) {
  if (a.grid().steps != b.grid().steps || a.dim() != b.dim())
    throw std::invalid_argument("law_distance: incompatible laws");
  double worst = 0.0;
  for (int i = 0; i < a.grid().nodes(); ++i) {
    auto ma = a.samples().sample_mean(i), mb = b.samples().sample_mean(i);
    auto va = a.samples().sample_variance(i), vb = b.samples().sample_variance(i);
    for (int j = 0; j < a.dim(); ++j) worst = std::max(worst, std::abs(ma[j] - mb[j]) + std::abs(va[j] - vb[j]));
  }
  return worst;
}

PathEnsemble solve_classical_system(const ModelSpec& model, int n, const TimeGrid& grid, const StreamKey& key) {
  if (n < 2) throw std::invalid_argument("solve_classical_system: need at least 2 particles");
  int d = model.dim;
  PathEnsemble out(grid, d, n, true);
  out.key_root = key;
  out.key_role = Role::particle;
  std::vector<double> dw(static_cast<std::size_t>(grid.steps) * d);
  for (int p = 0; p < n; ++p) {
    brownian_increments(derive_digest(key.digest(), Role::particle, p), grid, d, dw);
    out.set_increments(p, dw);
    auto x = out.state(p, 0);
    std::copy(model.x0.begin(), model.x0.end(), x.begin());
  }
  for (int i = 0; i < grid.steps; ++i) {
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
      Scratch s(d);
      for (std::size_t p = lo; p < hi; ++p) {
        auto partners = [&](auto&& fn) {
          for (int q = 0; q < n; ++q) fn(std::span<const double>(out.state(q, i)), 1.0);
        };
        averaged_coefficients(model, out.state(static_cast<int>(p), i), partners, s);
        euler(out.state(static_cast<int>(p), i), s, out.increment(static_cast<int>(p), i), grid.h(),
              out.state(static_cast<int>(p), i + 1), i);
      }
    });
  }
  return out;
}

LawFlow solve_limit_forward(const ModelSpec& model, const TimeGrid& grid, int cloud_size, const StreamKey& key) {
  if (cloud_size < 2) throw std::invalid_argument("solve_limit_forward: cloud size must be >= 2");
  if (model.closed_form) return LawFlow::closed_form(model, grid, cloud_size, key);
  PathEnsemble cloud = solve_classical_system(model, cloud_size, grid, key);
  cloud.key_role = Role::particle;
  return LawFlow::from_cloud(std::move(cloud));
}

SdeNResult solve_sde_n(const ModelSpec& model, int n, const TimeGrid& grid, const LawFlow& init_law,
                       const PicardOptions& picard, const StreamKey& w_key, const StreamKey& env_key, int reps) {
  if (n < 1) throw std::invalid_argument("solve_sde_n: N must be >= 1");
  if (reps < 1) throw std::invalid_argument("solve_sde_n: reps must be >= 1");
  if (picard.max_iters < 1 || picard.cloud_size < 2 || !(picard.tol > 0.0))
    throw std::invalid_argument("solve_sde_n: invalid Picard options");
  if (!keys_disjoint(w_key, env_key))
    throw std::invalid_argument("solve_sde_n: Brownian and environment keys must be disjoint");
  if (init_law.grid().steps != grid.steps || init_law.dim() != model.dim)
    throw std::invalid_argument("solve_sde_n: initial law does not match grid or dimension");
  int d = model.dim;
  std::uint64_t env_root = env_key.digest();

  SdeNResult result;
  result.env_key = env_key;
  const LawFlow* current = &init_law;
  LawFlow iterate;
  for (int j = 0; j < picard.max_iters; ++j) {
    PathEnsemble cloud(grid, d, picard.cloud_size);
    cloud.key_root = env_key;
    cloud.key_role = Role::cloud;
    const LawFlow& env = *current;
    parallel_blocks(picard.cloud_size, [&](int lo, int hi) {
      simulate_sde_n_range(
          model, env, n, lo, hi, [&](int c, std::span<double> dw) { cloud_increments(env_root, c, grid, d, dw); },
          [&](int c) { return derive_digest(env_root, Role::environment, c); }, cloud, nullptr);
    });
    LawFlow next = LawFlow::from_cloud(std::move(cloud));
    double metric = law_distance(env, next);
    result.picard_history.push_back(metric);
    iterate = std::move(next);
    current = &iterate;
    result.iterations = j + 1;
    if (metric < picard.tol) {
      result.converged = true;
      break;
    }
  }
  result.env_law = std::move(iterate);

  result.paths = PathEnsemble(grid, d, reps, true);
  result.paths.key_root = w_key;
  result.paths.key_role = Role::replication;
  result.environments.resize(reps);
  for (int r = 0; r < reps; ++r) result.environments[r].key = derive_key(env_key, Role::replication, r);
  std::uint64_t w_root = w_key.digest();
  parallel_blocks(reps, [&](int lo, int hi) {
    simulate_sde_n_range(
        model, result.env_law, n, lo, hi,
        [&](int r, std::span<double> dw) { brownian_increments(derive_digest(w_root, Role::replication, r), grid, d, dw); },
        [&](int r) { return derive_digest(env_root, Role::replication, r); }, result.paths, &result.environments);
  });
  return result;
}

void limit_path(const ModelSpec& model, const LawFlow& law, std::span<const double> dw, std::span<double> path,
                int cap) {
  const TimeGrid& g = law.grid();
  int d = model.dim;
  Scratch s(d);
  std::copy(model.x0.begin(), model.x0.end(), path.begin());
  for (int i = 0; i < g.steps; ++i) {
    CSpan x(path.data() + i * d, d);
    auto partners = [&](auto&& fn) { law.for_each(i, fn, cap); };
    averaged_coefficients(model, x, partners, s);
    euler(x, s, dw.subspan(i * d, d), g.h(), path.subspan((i + 1) * d, d), i);
  }
}

PathEnsemble limit_paths(const ModelSpec& model, const LawFlow& law, const PathEnsemble& driving, int cap) {
  if (!driving.has_increments()) throw std::invalid_argument("limit_paths: driving ensemble has no increments");
  PathEnsemble out(driving.grid(), driving.dim(), driving.reps(), true);
  out.key_root = driving.key_root;
  out.key_role = driving.key_role;
  parallel_for(static_cast<std::size_t>(driving.reps()), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> path(static_cast<std::size_t>(driving.nodes()) * driving.dim());
    for (std::size_t r = lo; r < hi; ++r) {
      auto dw = driving.increments_of(static_cast<int>(r));
      limit_path(model, law, dw, path, cap);
      out.set_path(static_cast<int>(r), path);
      out.set_increments(static_cast<int>(r), dw);
    }
  });
  return out;
}

void sde_n_path(const ModelSpec& model, const LawFlow& env_law, std::span<const std::uint32_t> indices,
                std::span<const double> dw, std::span<double> path) {
  const TimeGrid& g = env_law.grid();
  int d = model.dim;
  Scratch s(d);
  const PathEnsemble& cloud = env_law.samples();
  std::copy(model.x0.begin(), model.x0.end(), path.begin());
  for (int i = 0; i < g.steps; ++i) {
    CSpan x(path.data() + i * d, d);
    auto partners = [&](auto&& fn) {
      for (auto k : indices) fn(cloud.state(static_cast<int>(k), i), 1.0);
    };
    averaged_coefficients(model, x, partners, s);
    euler(x, s, dw.subspan(i * d, d), g.h(), path.subspan((i + 1) * d, d), i);
  }
}

ErrorEstimate forward_error(const ModelSpec& model, const SdeNResult& sde) {
  if (!model.closed_form) throw std::invalid_argument("forward_error: model '" + model.name + "' has no closed form");
  const PathEnsemble& xn = sde.paths;
  const TimeGrid& g = xn.grid();
  int d = model.dim;
  ErrorEstimate est;
  est.per_rep.resize(xn.reps());
  std::vector<double> path(static_cast<std::size_t>(g.nodes()) * d);
  for (int r = 0; r < xn.reps(); ++r) {
    auto dw = xn.increments_of(r);
    model.closed_form->grid_path(g, dw, path);
    double sup = 0.0;
    for (int i = 0; i < g.nodes(); ++i) {
      double e = 0.0;
      for (int j = 0; j < d; ++j) e += std::pow(xn.value(r, i, j) - path[i * d + j], 2);
      sup = std::max(sup, e);
    }
    est.per_rep[r] = sup;
  }
  Summary s = summarize(est.per_rep);
  est.mean = s.mean;
  est.se = s.se;
  return est;
}

ErrorEstimate forward_error(const ModelSpec& model, int n, const TimeGrid& grid, int reps, const StreamKey& w_key,
                            const StreamKey& env_key, const PicardOptions& picard) {
  if (!model.closed_form) throw std::invalid_argument("forward_error: model '" + model.name + "' has no closed form");
  LawFlow init = LawFlow::closed_form(model, grid, picard.cloud_size, env_key);
  SdeNResult sde = solve_sde_n(model, n, grid, init, picard, w_key, env_key, reps);
  return forward_error(model, sde);
}

}  // namespace mfbsde
