#include "mfbsde/fluctuation.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "mfbsde/parallel.hpp"

namespace mfbsde {

namespace {

using Matrix = Eigen::MatrixXd;

bool finite(CSpan v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// coeff(probe, x', y') for one flattened field index.
class CoefficientEval {
 public:
  CoefficientEval(const ModelSpec& m, const FieldLattice& lat) : m_(m), lat_(lat), buf_(m.dim * m.dim) {}

  double operator()(const FieldIndex& ix, CSpan xp, double yp) {
    const int d = m_.dim;
    switch (ix.block) {
      case 1:
        m_.drift(lat_.points[ix.probe], xp, MSpan(buf_.data(), d));
        return buf_[ix.component];
      case 2:
        m_.diffusion(lat_.points[ix.probe], xp, buf_);
        return buf_[ix.component];
      case 3:
        return m_.terminal(lat_.points[ix.probe], xp);
      default: {
        const LambdaPoint& l = lat_.lambdas[ix.probe];
        return m_.driver(Lambda{l.x, l.y, l.z}, Partner{xp, yp});
      }
    }
  }

 private:
  const ModelSpec& m_;
  const FieldLattice& lat_;
  std::vector<double> buf_;
};

// A block whose coefficient ignores its partner is identically zero.
bool partner_free(const ModelSpec& m, int block) {
  switch (block) {
    case 1:
      return !m.partner.drift;
    case 2:
      return !m.partner.diffusion;
    case 3:
      return !m.partner.terminal;
    default:
      return !m.partner.driver();
  }
}

bool needs_y(const ModelSpec& m, const std::vector<FieldIndex>& index) {
  if (!m.partner.driver_y) return false;
  for (const auto& ix : index)
    if (ix.block == 4) return true;
  return false;
}

void validate_lattice(const FieldLattice& lat, int d) {
  for (const auto& p : lat.points)
    if (static_cast<int>(p.size()) != d || !finite(p))
      throw std::invalid_argument("field lattice: probe points must be finite with the model dimension");
  std::set<Vec> distinct(lat.points.begin(), lat.points.end());
  if (distinct.size() != lat.points.size()) throw std::invalid_argument("field lattice: probe points must be distinct");
  for (const auto& l : lat.lambdas)
    if (static_cast<int>(l.x.size()) != d || static_cast<int>(l.z.size()) != d || !finite(l.x) || !finite(l.z) ||
        !std::isfinite(l.y))
      throw std::invalid_argument("field lattice: driver probes must be finite with the model dimension");
}

}  // namespace

std::vector<FieldIndex> lattice_index(const FieldLattice& lat, const TimeGrid& grid, int d) {
  validate_lattice(lat, d);
  std::vector<int> nodes;
  for (double t : lat.times) nodes.push_back(grid.node_of(t));
  std::set<int> distinct(nodes.begin(), nodes.end());
  if (distinct.size() != nodes.size()) throw std::invalid_argument("field lattice: time nodes must be distinct");
  const int P = static_cast<int>(lat.points.size()), L = static_cast<int>(lat.lambdas.size());
  std::vector<FieldIndex> out;
  if (lat.blocks[0])
    for (int n : nodes)
      for (int p = 0; p < P; ++p)
        for (int k = 0; k < d; ++k) out.push_back({1, n, p, k});
  if (lat.blocks[1])
    for (int n : nodes)
      for (int p = 0; p < P; ++p)
        for (int k = 0; k < d * d; ++k) out.push_back({2, n, p, k});
  if (lat.blocks[2])
    for (int p = 0; p < P; ++p) out.push_back({3, grid.steps, p, 0});
  if (lat.blocks[3]) {
    for (int n : nodes)
      if (n == grid.steps) throw std::invalid_argument("field lattice: driver block is defined on [0, T) only");
    for (int n : nodes)
      for (int q = 0; q < L; ++q) out.push_back({4, n, q, 0});
  }
  return out;
}

Eigen::MatrixXd field_features(const ModelSpec& model, const LawFlow& law, const BsdeSolution* limit,
                               const std::vector<FieldIndex>& index, const FieldLattice& lattice) {
  const bool with_y = needs_y(model, index);
  if (with_y && !limit) throw std::invalid_argument("field_features: driver block needs the limit Y-values");
  const int M = law.size(), K = static_cast<int>(index.size());
  const PathEnsemble& cloud = law.samples();
  Matrix F(M, K);
  parallel_for(M, [&](std::size_t lo, std::size_t hi) {
    CoefficientEval eval(model, lattice);
    std::vector<double> ycache(cloud.nodes(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = lo; c < hi; ++c) {
      int ci = static_cast<int>(c);
      std::fill(ycache.begin(), ycache.end(), std::numeric_limits<double>::quiet_NaN());
      for (int k = 0; k < K; ++k) {
        const FieldIndex& ix = index[k];
        if (partner_free(model, ix.block)) {
          F(ci, k) = 0.0;
          continue;
        }
        CSpan xp = cloud.state(ci, ix.node);
        double yp = 0.0;
        if (ix.block == 4 && with_y) {
          if (std::isnan(ycache[ix.node])) ycache[ix.node] = evaluate_limit(model, law, *limit, ix.node, xp).y;
          yp = ycache[ix.node];
        }
        F(ci, k) = eval(ix, xp, yp);
      }
    }
  });
  return F;
}

CovarianceMatrix sample_covariance(const Eigen::MatrixXd& samples, int group) {
  if (group < 1) throw std::invalid_argument("sample_covariance: group must be >= 1");
  const Eigen::Index rows = samples.rows(), units = rows / group;
  if (units < 2) throw std::invalid_argument("sample_covariance: need at least 2 sample groups");
  CovarianceMatrix out;
  out.samples = static_cast<int>(rows);
  const double M = static_cast<double>(rows);
  Matrix C = samples.rowwise() - samples.colwise().mean();
  out.value = C.transpose() * C / (M - 1.0);
  out.value = 0.5 * (out.value + out.value.transpose()).eval();
  // Group sums U_u = sum_{c in u} C_c C_c^T; se of the mean product from their spread.
  const Eigen::Index k = samples.cols();
  Matrix s1 = Matrix::Zero(k, k), s2 = Matrix::Zero(k, k);
  for (Eigen::Index u = 0; u < units; ++u) {
    auto block = C.middleRows(u * group, group);
    Matrix U = block.transpose() * block / static_cast<double>(group);
    s1 += U;
    s2 += U.cwiseProduct(U);
  }
  const double n = static_cast<double>(units);
  Matrix mean_u = s1 / n;
  Matrix var_u = ((s2 / n - mean_u.cwiseProduct(mean_u)) * (n / (n - 1.0))).cwiseMax(0.0);
  out.se = (var_u / n).cwiseSqrt();
  return out;
}

CovarianceMatrix theoretical_covariance(const ModelSpec& model, const LawFlow& law, const FieldLattice& lattice,
                                        const BsdeSolution* limit) {
  if (law.size() < 100) throw std::invalid_argument("theoretical_covariance: law cloud needs at least 100 samples");
  std::vector<FieldIndex> index = lattice_index(lattice, law.grid(), model.dim);
  CovarianceMatrix out = sample_covariance(field_features(model, law, limit, index, lattice), 2);
  out.index = std::move(index);
  return out;
}

Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& cov, double* jitter_used) {
  if (cov.rows() != cov.cols()) throw std::invalid_argument("jittered_cholesky: matrix must be square");
  const Eigen::Index n = cov.rows();
  if (jitter_used) *jitter_used = 0.0;
  if (n == 0) return Matrix();
  if (!cov.allFinite()) throw SolverError("jittered_cholesky: non-finite covariance");
  Matrix sym = 0.5 * (cov + cov.transpose());
  double maxdiag = sym.diagonal().cwiseAbs().maxCoeff();
  if (maxdiag == 0.0) {
    if (sym.cwiseAbs().maxCoeff() == 0.0) return Matrix::Zero(n, n);
    throw SolverError("jittered_cholesky: zero diagonal with non-zero off-diagonal entries");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  double min_eig = eig.eigenvalues().minCoeff();
  if (min_eig < -1e-8 * maxdiag)
    throw SolverError("jittered_cholesky: eigenvalue " + std::to_string(min_eig) + " below -1e-8 * max diagonal");
  for (double tier : kJitterTiers) {
    Matrix a = sym;
    a.diagonal().array() += tier * maxdiag;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) continue;
    Matrix L = llt.matrixL();
    if (!L.allFinite()) continue;
    if (jitter_used) *jitter_used = tier * maxdiag;
    return L;
  }
  throw SolverError("jittered_cholesky: factorization failed after maximum jitter");
}

FieldSample sample_field_on_lattice(const CovarianceMatrix& cov, const StreamKey& key) {
  FieldSample s;
  s.index = cov.index;
  Matrix L = jittered_cholesky(cov.value, &s.jitter);
  std::vector<double> z = standard_normals(key, static_cast<std::size_t>(L.rows()));
  Eigen::VectorXd v = L * Eigen::Map<const Eigen::VectorXd>(z.data(), L.rows());
  s.values.assign(v.data(), v.data() + v.size());
  return s;
}

FieldSample sample_field_along_path(const ModelSpec& model, const LawFlow& law, std::span<const double> path,
                                    const StreamKey& key, const BsdeSolution* limit) {
  const TimeGrid& g = law.grid();
  const int d = model.dim;
  if (path.size() != static_cast<std::size_t>(g.nodes()) * d)
    throw std::invalid_argument("sample_field_along_path: path does not match the grid");
  if (law.size() < 100) throw std::invalid_argument("sample_field_along_path: law cloud needs at least 100 samples");
  if (!finite(path)) throw std::invalid_argument("sample_field_along_path: non-finite path");
  FieldLattice lat;
  std::vector<FieldIndex> index;
  for (int i = 0; i < g.nodes(); ++i) {
    CSpan x = path.subspan(static_cast<std::size_t>(i) * d, d);
    lat.points.emplace_back(x.begin(), x.end());
    if (limit && i < g.steps) {
      LimitValue lv = evaluate_limit(model, law, *limit, i, x);
      lat.lambdas.push_back({Vec(x.begin(), x.end()), lv.y, lv.z});
    } else {
      lat.lambdas.push_back({Vec(x.begin(), x.end()), 0.0, Vec(d, 0.0)});
    }
  }
  for (int i = 0; i < g.nodes(); ++i) {
    for (int k = 0; k < d; ++k) index.push_back({1, i, i, k});
    for (int k = 0; k < d * d; ++k) index.push_back({2, i, i, k});
    if (limit && i < g.steps) index.push_back({4, i, i, 0});
  }
  index.push_back({3, g.steps, g.steps, 0});

  Matrix F = field_features(model, law, limit, index, lat);
  Matrix C = F.rowwise() - F.colwise().mean();
  Matrix cov = (C.transpose() * C) / static_cast<double>(F.rows() - 1);
  FieldSample s;
  s.index = index;
  Matrix L = jittered_cholesky(cov, &s.jitter);
  std::vector<double> z = standard_normals(key, index.size());
  Eigen::VectorXd v = L * Eigen::Map<const Eigen::VectorXd>(z.data(), L.rows());
  s.values.assign(v.data(), v.data() + v.size());
  return s;
}

Eigen::MatrixXd empirical_fields(const ModelSpec& model, const SdeNResult& sde, const LawFlow& centering,
                                 const FieldLattice& lattice, const BsdeSolution* limit) {
  const PathEnsemble& cloud = sde.env_law.samples();
  std::vector<FieldIndex> index = lattice_index(lattice, cloud.grid(), model.dim);
  const bool with_y = needs_y(model, index);
  if (with_y && !limit) throw std::invalid_argument("empirical_fields: driver block needs environment Y-values");
  const int K = static_cast<int>(index.size()), R = static_cast<int>(sde.environments.size());

  std::vector<double> center(K, 0.0);
  parallel_for(K, [&](std::size_t lo, std::size_t hi) {
    CoefficientEval eval(model, lattice);
    for (std::size_t k = lo; k < hi; ++k) {
      const FieldIndex& ix = index[k];
      double acc = 0.0, wsum = 0.0;
      centering.for_each(ix.node, [&](CSpan xp, double w) {
        double yp = (ix.block == 4 && with_y) ? evaluate_limit(model, centering, *limit, ix.node, xp).y : 0.0;
        acc += w * eval(ix, xp, yp);
        wsum += w;
      });
      center[k] = acc / wsum;
    }
  });

  // Environment y-values on demand, per (node, sample).
  std::vector<double> env_y;
  if (with_y) {
    std::set<int> nodes;
    for (const auto& ix : index)
      if (ix.block == 4) nodes.insert(ix.node);
    env_y.assign(static_cast<std::size_t>(cloud.nodes()) * cloud.reps(), 0.0);
    for (int n : nodes)
      parallel_for(cloud.reps(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t c = lo; c < hi; ++c)
          env_y[static_cast<std::size_t>(n) * cloud.reps() + c] =
              evaluate_limit(model, sde.env_law, *limit, n, cloud.state(static_cast<int>(c), n)).y;
      });
  }

  Matrix out(R, K);
  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    CoefficientEval eval(model, lattice);
    for (std::size_t r = lo; r < hi; ++r) {
      const auto& env = sde.environments[r].indices;
      const double scale = 1.0 / std::sqrt(static_cast<double>(env.size()));
      for (int k = 0; k < K; ++k) {
        const FieldIndex& ix = index[k];
        double acc = 0.0;
        if (partner_free(model, ix.block)) {
          out(static_cast<Eigen::Index>(r), k) = 0.0;
          continue;
        }
        for (std::uint32_t e : env) {
          double yp = with_y && ix.block == 4 ? env_y[static_cast<std::size_t>(ix.node) * cloud.reps() + e] : 0.0;
          acc += eval(ix, cloud.state(static_cast<int>(e), ix.node), yp) - center[k];
        }
        out(static_cast<Eigen::Index>(r), k) = acc * scale;
      }
    }
  });
  return out;
}

EntryVariance residual_field_variance(const ModelSpec& model, const SdeNResult& sde, const PathEnsemble& coupled,
                                      const FieldLattice& lattice) {
  if (lattice.blocks[3]) throw std::invalid_argument("residual_field_variance: driver block not supported");
  const PathEnsemble& cloud = sde.env_law.samples();
  if (coupled.reps() != cloud.reps() || coupled.grid().steps != cloud.grid().steps)
    throw std::invalid_argument("residual_field_variance: coupled cloud does not match the environment cloud");
  std::vector<FieldIndex> index = lattice_index(lattice, cloud.grid(), model.dim);
  const int K = static_cast<int>(index.size()), R = static_cast<int>(sde.environments.size());
  std::vector<double> v(static_cast<std::size_t>(K) * R);
  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    CoefficientEval eval(model, lattice);
    for (std::size_t r = lo; r < hi; ++r) {
      const auto& env = sde.environments[r].indices;
      const double scale = 1.0 / std::sqrt(static_cast<double>(env.size()));
      for (int k = 0; k < K; ++k) {
        const FieldIndex& ix = index[k];
        double acc = 0.0;
        if (!partner_free(model, ix.block))
          for (std::uint32_t e : env) {
            int c = static_cast<int>(e);
            acc += eval(ix, cloud.state(c, ix.node), 0.0) - eval(ix, coupled.state(c, ix.node), 0.0);
          }
        v[static_cast<std::size_t>(k) * R + r] = acc * scale;
      }
    }
  });
  EntryVariance out;
  for (int k = 0; k < K; ++k) {
    VarianceEstimate e = variance_with_error(CSpan(v.data() + static_cast<std::size_t>(k) * R, R));
    out.value.push_back(e.value);
    out.se.push_back(e.se);
  }
  return out;
}

FieldCloud::FieldCloud(const ModelSpec& model, const LawFlow& law, int size, const BsdeSolution* limit)
    : model_(model), law_(law), size_(std::min(size, law.size())) {
  if (size_ < 2) throw std::invalid_argument("FieldCloud: need at least 2 cloud samples");
  if (model.partner.driver_y && limit) {
    const int nodes = law.grid().nodes();
    y_.assign(static_cast<std::size_t>(nodes) * size_, 0.0);
    parallel_for(size_, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t c = lo; c < hi; ++c)
        for (int i = 0; i < law.grid().steps; ++i)
          y_[static_cast<std::size_t>(i) * size_ + c] =
              evaluate_limit(model, law, *limit, i, law.samples().state(static_cast<int>(c), i)).y;
    });
  }
}

double FieldCloud::partner_y(int node, int c) const {
  if (!model_.partner.driver_y) return 0.0;
  if (y_.empty()) throw std::invalid_argument("FieldCloud: driver field needs the limit solution");
  return y_[static_cast<std::size_t>(node) * size_ + c];
}

template <class Eval>
void FieldCloud::combine(int width, Eval&& eval, CSpan a, MSpan out) const {
  if (static_cast<int>(a.size()) != size_) throw std::invalid_argument("FieldCloud: weight vector size mismatch");
  std::vector<double> buf(width), s0(width, 0.0), s1(width, 0.0);
  double asum = 0.0;
  for (int c = 0; c < size_; ++c) {
    eval(c, MSpan(buf));
    asum += a[c];
    for (int k = 0; k < width; ++k) {
      s0[k] += buf[k];
      s1[k] += a[c] * buf[k];
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(size_ - 1));
  for (int k = 0; k < width; ++k) out[k] = (s1[k] - asum * s0[k] / size_) * scale;
}

template <class Eval>
void FieldCloud::basis(int width, Eval&& eval, MSpan out) const {
  std::vector<double> buf(width);
  for (int c = 0; c < size_; ++c) {
    eval(c, MSpan(buf));
    for (int k = 0; k < width; ++k) out[static_cast<std::size_t>(k) * size_ + c] = buf[k];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(size_ - 1));
  for (int k = 0; k < width; ++k) {
    MSpan row = out.subspan(static_cast<std::size_t>(k) * size_, size_);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= size_;
    for (double& v : row) v = (v - mean) * scale;
  }
}

void FieldCloud::drift(int node, CSpan x, CSpan a, MSpan out) const {
  const int d = model_.dim;
  if (!model_.partner.drift) return std::fill(out.begin(), out.begin() + d, 0.0);
  combine(d, [&](int c, MSpan b) { model_.drift(x, law_.samples().state(c, node), b); }, a, out);
}

void FieldCloud::diffusion(int node, CSpan x, CSpan a, MSpan out) const {
  const int w = model_.dim * model_.dim;
  if (!model_.partner.diffusion) return std::fill(out.begin(), out.begin() + w, 0.0);
  combine(w, [&](int c, MSpan b) { model_.diffusion(x, law_.samples().state(c, node), b); }, a, out);
}

double FieldCloud::terminal(CSpan x, CSpan a) const {
  if (!model_.partner.terminal) return 0.0;
  double v = 0.0;
  const int T = law_.grid().steps;
  combine(1, [&](int c, MSpan b) { b[0] = model_.terminal(x, law_.samples().state(c, T)); }, a, MSpan(&v, 1));
  return v;
}

double FieldCloud::driver(int node, const Lambda& lam, CSpan a) const {
  if (!model_.partner.driver()) return 0.0;
  double v = 0.0;
  combine(
      1, [&](int c, MSpan b) { b[0] = model_.driver(lam, Partner{law_.samples().state(c, node), partner_y(node, c)}); },
      a, MSpan(&v, 1));
  return v;
}

void FieldCloud::drift_basis(int node, CSpan x, MSpan out) const {
  const int d = model_.dim;
  if (!model_.partner.drift) return std::fill(out.begin(), out.begin() + static_cast<std::size_t>(d) * size_, 0.0);
  basis(d, [&](int c, MSpan b) { model_.drift(x, law_.samples().state(c, node), b); }, out);
}

void FieldCloud::diffusion_basis(int node, CSpan x, MSpan out) const {
  const int w = model_.dim * model_.dim;
  if (!model_.partner.diffusion) return std::fill(out.begin(), out.begin() + static_cast<std::size_t>(w) * size_, 0.0);
  basis(w, [&](int c, MSpan b) { model_.diffusion(x, law_.samples().state(c, node), b); }, out);
}

void FieldCloud::terminal_basis(CSpan x, MSpan out) const {
  if (!model_.partner.terminal) return std::fill(out.begin(), out.begin() + size_, 0.0);
  const int T = law_.grid().steps;
  basis(1, [&](int c, MSpan b) { b[0] = model_.terminal(x, law_.samples().state(c, T)); }, out);
}

void FieldCloud::driver_basis(int node, const Lambda& lam, MSpan out) const {
  if (!model_.partner.driver()) return std::fill(out.begin(), out.begin() + size_, 0.0);
  basis(1, [&](int c, MSpan b) { b[0] = model_.driver(lam, Partner{law_.samples().state(c, node), partner_y(node, c)}); },
        out);
}

namespace {

// Mean-field coefficients of the linearized forward equation at one state.
struct ForwardTerms {
  std::vector<double> A;   // E[grad_x b(x, X')], d*d
  std::vector<double> g;   // mean_m grad_x' b(x, X^m) Xbar^m, d
  std::vector<double> Js;  // E[grad_x sigma(x, X')], d*d*d
  std::vector<double> Gs;  // mean_m grad_x' sigma(x, X^m) Xbar^m, d*d
};

// Member states and fluctuations at one node, for cross-member averages.
struct MemberSlice {
  const double* x = nullptr;
  const double* xbar = nullptr;
  const double* y = nullptr;     // limit Y, driver terms only
  const double* ybar = nullptr;  // null in the predictor pass
  int count = 0;
};

class Linearization {
 public:
  Linearization(const ModelSpec& m, const LawFlow& law, int law_cap) : m_(m), law_(law), cap_(law_cap) {}

  // E_law[J(x, X'_node)] or J(x, x) when the coefficient ignores its partner.
  template <class Fn>
  void law_average(bool partner, const Fn& fn, int node, CSpan x, std::vector<double>& out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (!partner) return fn(x, x, MSpan(out));
    std::vector<double> tmp(out.size());
    double wsum = 0.0;
    law_.for_each(
        node,
        [&](CSpan xp, double w) {
          fn(x, xp, MSpan(tmp));
          for (std::size_t k = 0; k < out.size(); ++k) out[k] += w * tmp[k];
          wsum += w;
        },
        cap_);
    for (double& v : out) v /= wsum;
  }

  // mean_m J(x, X^m) Xbar^m with J laid out [row][k], rows = out.size().
  template <class Fn>
  void cross_average(bool partner, const Fn& fn, CSpan x, const MemberSlice& ms, std::vector<double>& out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (!partner || ms.count == 0) return;
    const int d = m_.dim;
    const std::size_t rows = out.size();
    std::vector<double> J(rows * d);
    for (int k = 0; k < ms.count; ++k) {
      fn(x, CSpan(ms.x + static_cast<std::size_t>(k) * d, d), MSpan(J));
      const double* xb = ms.xbar + static_cast<std::size_t>(k) * d;
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out[r] += J[r * d + j] * xb[j];
    }
    for (double& v : out) v /= ms.count;
  }

  void forward(int node, CSpan x, const MemberSlice& ms, ForwardTerms& t) const {
    const int d = m_.dim;
    t.A.resize(d * d);
    t.g.resize(d);
    t.Js.resize(d * d * d);
    t.Gs.resize(d * d);
    law_average(m_.partner.drift, m_.drift_dx, node, x, t.A);
    cross_average(m_.partner.drift, m_.drift_dxp, x, ms, t.g);
    law_average(m_.partner.diffusion, m_.diffusion_dx, node, x, t.Js);
    cross_average(m_.partner.diffusion, m_.diffusion_dxp, x, ms, t.Gs);
  }

  // E[grad_x Phi(x, X'_T)] and mean_m grad_x' Phi(x, X^m_T) Xbar^m_T.
  double terminal(CSpan x, CSpan xbar, const MemberSlice& ms) const {
    const int d = m_.dim;
    std::vector<double> gx(d), cross(1);
    law_average(m_.partner.terminal, m_.terminal_dx, law_.grid().steps, x, gx);
    cross_average(m_.partner.terminal, m_.terminal_dxp, x, ms, cross);
    double v = cross[0];
    for (int k = 0; k < d; ++k) v += gx[k] * xbar[k];
    return v;
  }

  // Driver gradient in lambda averaged over the limit environment, 2d + 1 entries.
  void driver_gradient(const BsdeSolution& limit, int node, const Lambda& lam, std::vector<double>& out) const {
    const int d = m_.dim;
    out.assign(2 * d + 1, 0.0);
    if (!m_.partner.driver() || limit.env_x.empty()) {
      m_.driver_dlambda(lam, Partner{lam.x, lam.y}, MSpan(out));
      return;
    }
    const auto& ex = limit.env_x[node];
    const double* ey = limit.env_y[node].empty() ? nullptr : limit.env_y[node].back().data();
    const std::size_t count = ex.size() / d;
    std::vector<double> tmp(out.size());
    for (std::size_t k = 0; k < count; ++k) {
      m_.driver_dlambda(lam, Partner{CSpan(ex.data() + k * d, d), ey ? ey[k] : 0.0}, MSpan(tmp));
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += tmp[j];
    }
    for (double& v : out) v /= static_cast<double>(count);
  }

  // mean_m grad_lambda' f(lambda, Lambda^m) . (Xbar^m, Ybar^m).
  double driver_cross(const Lambda& lam, const MemberSlice& ms) const {
    if (!m_.partner.driver() || ms.count == 0) return 0.0;
    const int d = m_.dim;
    std::vector<double> J(d + 1);
    double acc = 0.0;
    for (int k = 0; k < ms.count; ++k) {
      m_.driver_dpartner(lam, Partner{CSpan(ms.x + static_cast<std::size_t>(k) * d, d), ms.y[k]}, MSpan(J));
      const double* xb = ms.xbar + static_cast<std::size_t>(k) * d;
      for (int j = 0; j < d; ++j) acc += J[j] * xb[j];
      if (ms.ybar) acc += J[d] * ms.ybar[k];
    }
    return acc / ms.count;
  }

 private:
  const ModelSpec& m_;
  const LawFlow& law_;
  int cap_;
};

// One Euler step of the linearized forward equation.
void linear_step(int d, double h, CSpan xb, CSpan xi1, CSpan xi2, const ForwardTerms& t, CSpan dw, MSpan next,
                 int step) {
  for (int i = 0; i < d; ++i) {
    double drift = xi1[i] + t.g[i];
    for (int k = 0; k < d; ++k) drift += t.A[i * d + k] * xb[k];
    double acc = xb[i] + h * drift;
    for (int j = 0; j < d; ++j) {
      double vol = xi2[i * d + j] + t.Gs[i * d + j];
      for (int k = 0; k < d; ++k) vol += t.Js[(i * d + j) * d + k] * xb[k];
      acc += vol * dw[j];
    }
    if (!std::isfinite(acc) || std::abs(acc) > kDivergenceBound)
      throw DivergenceError("solve_limit_system: fluctuation diverged", step);
    next[i] = acc;
  }
}

}  // namespace

LimitSystemResult solve_limit_system(const ModelSpec& model, const LawFlow& law, const BsdeSolution* limit,
                                     const LimitSystemOptions& opts, const StreamKey& key) {
  const int R = opts.members, d = model.dim;
  const TimeGrid& g = law.grid();
  const int steps = g.steps, nodes = g.nodes();
  const double h = g.h();
  if (R < 100) throw std::invalid_argument("solve_limit_system: need at least 100 members");
  if (opts.backward && !limit) throw std::invalid_argument("solve_limit_system: backward pass needs the limit solution");
  if (opts.backward && opts.inner_paths < 2) throw std::invalid_argument("solve_limit_system: inner_paths must be >= 2");

  FieldCloud field(model, law, opts.field_cloud, opts.backward ? limit : nullptr);
  const int Mf = field.size();
  const int cap = opts.mean_field_cap > 0 ? std::min(opts.mean_field_cap, R) : R;
  Linearization lin(model, law, opts.law_cap);

  LimitSystemResult res;
  res.x = PathEnsemble(g, d, R, true);
  res.x.key_root = key;
  res.x.key_role = Role::member;
  Matrix a(Mf, R);
  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> path(static_cast<std::size_t>(nodes) * d);
    for (std::size_t r = lo; r < hi; ++r) {
      int m = static_cast<int>(r);
      auto dw = brownian_increments(derive_key(key, Role::member, r), g, d);
      limit_path(model, law, dw, path, opts.law_cap);
      res.x.set_path(m, path);
      res.x.set_increments(m, dw);
      auto w = standard_normals(derive_key(key, Role::field, r), Mf);
      std::copy(w.begin(), w.end(), a.col(m).data());
    }
  });
  auto weights = [&](int m) { return CSpan(a.col(m).data(), Mf); };
  auto member_slice = [&](int node) {
    MemberSlice ms;
    ms.x = res.x.node_slice(node).data();
    ms.xbar = res.xbar.data() + static_cast<std::size_t>(node) * R * d;
    ms.count = cap;
    return ms;
  };

  // Forward pass, step-synchronous across members.
  res.xbar.assign(static_cast<std::size_t>(nodes) * R * d, 0.0);
  for (int i = 0; i < steps; ++i) {
    MemberSlice ms = member_slice(i);
    parallel_for(R, [&](std::size_t lo, std::size_t hi) {
      ForwardTerms t;
      std::vector<double> xi1(d), xi2(d * d);
      for (std::size_t r = lo; r < hi; ++r) {
        int m = static_cast<int>(r);
        CSpan x = res.x.state(m, i);
        field.drift(i, x, weights(m), xi1);
        field.diffusion(i, x, weights(m), xi2);
        lin.forward(i, x, ms, t);
        CSpan xb(res.xbar.data() + (static_cast<std::size_t>(i) * R + r) * d, d);
        MSpan next(res.xbar.data() + (static_cast<std::size_t>(i + 1) * R + r) * d, d);
        linear_step(d, h, xb, xi1, xi2, t, res.x.increment(m, i), next, i);
      }
    });
  }
  if (!opts.backward) return res;

  // Limit solution along member paths.
  const BsdeSolution& lim = *limit;
  std::vector<double> my(static_cast<std::size_t>(nodes) * R), mz(static_cast<std::size_t>(steps) * R * d);
  parallel_for(R, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r)
      for (int i = 0; i < nodes; ++i) {
        LimitValue lv = evaluate_limit(model, law, lim, i, res.x.state(static_cast<int>(r), i));
        my[static_cast<std::size_t>(i) * R + r] = lv.y;
        if (i < steps) std::copy(lv.z.begin(), lv.z.end(), mz.begin() + (static_cast<std::size_t>(i) * R + r) * d);
      }
  });

  // Conditioning paths shared by all members; path 0 of each member's ensemble is its own.
  const int J = opts.inner_paths - 1;
  const std::size_t pn = static_cast<std::size_t>(nodes) * d, ps = static_cast<std::size_t>(steps) * d;
  std::vector<double> ix(J * pn), idw(J * ps), iy(static_cast<std::size_t>(J) * nodes), iz(J * ps);
  std::vector<ForwardTerms> iterms(static_cast<std::size_t>(J) * steps);
  std::vector<double> igrad(static_cast<std::size_t>(J) * steps * (2 * d + 1));
  parallel_for(J, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j = lo; j < hi; ++j) {
      MSpan dw(idw.data() + j * ps, ps);
      brownian_increments(derive_digest(key.digest(), Role::inner, j), g, d, dw);
      limit_path(model, law, dw, MSpan(ix.data() + j * pn, pn), opts.law_cap);
      for (int i = 0; i < nodes; ++i) {
        CSpan x(ix.data() + j * pn + i * d, d);
        LimitValue lv = evaluate_limit(model, law, lim, i, x);
        iy[j * nodes + i] = lv.y;
        if (i < steps) std::copy(lv.z.begin(), lv.z.end(), iz.begin() + j * ps + i * d);
      }
      for (int i = 0; i < steps; ++i) {
        CSpan x(ix.data() + j * pn + i * d, d);
        lin.forward(i, x, member_slice(i), iterms[j * steps + i]);
        std::vector<double> gl;
        lin.driver_gradient(lim, i, Lambda{x, iy[j * nodes + i], CSpan(iz.data() + j * ps + i * d, d)}, gl);
        std::copy(gl.begin(), gl.end(), igrad.begin() + (j * steps + i) * (2 * d + 1));
      }
    }
  });

  // Field basis on the shared paths: rows drift [j][i][k], diffusion [j][i][k], driver [j][i], terminal [j].
  const bool fb = model.partner.drift, fs = model.partner.diffusion, ft = model.partner.terminal,
             ff = model.partner.driver();
  const std::size_t off_s = fb ? static_cast<std::size_t>(J) * steps * d : 0;
  const std::size_t off_f = off_s + (fs ? static_cast<std::size_t>(J) * steps * d * d : 0);
  const std::size_t off_t = off_f + (ff ? static_cast<std::size_t>(J) * steps : 0);
  const std::size_t rows = off_t + (ft ? static_cast<std::size_t>(J) : 0);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> P(rows, Mf);
  parallel_for(J, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j = lo; j < hi; ++j) {
      for (int i = 0; i < steps; ++i) {
        CSpan x(ix.data() + j * pn + i * d, d);
        if (fb) field.drift_basis(i, x, MSpan(P.row((j * steps + i) * d).data(), static_cast<std::size_t>(d) * Mf));
        if (fs)
          field.diffusion_basis(i, x,
                                MSpan(P.row(off_s + (j * steps + i) * d * d).data(), static_cast<std::size_t>(d * d) * Mf));
        if (ff)
          field.driver_basis(i, Lambda{x, iy[j * nodes + i], CSpan(iz.data() + j * ps + i * d, d)},
                             MSpan(P.row(off_f + j * steps + i).data(), Mf));
      }
      if (ft) field.terminal_basis(CSpan(ix.data() + j * pn + steps * d, d), MSpan(P.row(off_t + j).data(), Mf));
    }
  });

  // Terminal mean-field terms on shared paths need the member X-bar at T.
  MemberSlice ms_T = member_slice(steps);
  ms_T.y = my.data() + static_cast<std::size_t>(steps) * R;

  res.ybar.assign(static_cast<std::size_t>(nodes) * R, 0.0);
  res.zbar.assign(static_cast<std::size_t>(steps) * R * d, 0.0);
  const int passes = model.partner.driver() ? 2 : 1;
  res.corrector_pass = passes == 2;
  constexpr int kBatch = 32;

  for (int pass = 0; pass < passes; ++pass) {
    std::vector<double> prev_ybar;
    if (pass == 1) prev_ybar = res.ybar;
    auto driver_slice = [&](int node) {
      MemberSlice ms = member_slice(node);
      ms.y = my.data() + static_cast<std::size_t>(node) * R;
      ms.ybar = pass == 1 ? prev_ybar.data() + static_cast<std::size_t>(node) * R : nullptr;
      return ms;
    };
    std::vector<double> icross(static_cast<std::size_t>(J) * steps, 0.0);
    if (ff)
      parallel_for(J, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j)
          for (int i = 0; i < steps; ++i)
            icross[j * steps + i] = lin.driver_cross(
                Lambda{CSpan(ix.data() + j * pn + i * d, d), iy[j * nodes + i], CSpan(iz.data() + j * ps + i * d, d)},
                driver_slice(i));
      });

    std::vector<int> fallbacks(R, 0);
    for (int b0 = 0; b0 < R; b0 += kBatch) {
      const int bn = std::min(kBatch, R - b0);
      Matrix XI = P * a.middleCols(b0, bn);  // rows x bn
      parallel_for(bn, [&](std::size_t lo, std::size_t hi) {
        const int M = J + 1, K = 2 * d;
        LinearBsdeProblem p;
        p.grid = g;
        p.paths = M;
        p.dim = d;
        p.feature_count = K;
        p.features.assign(static_cast<std::size_t>(nodes) * M * K, 0.0);
        p.dw.assign(static_cast<std::size_t>(steps) * M * d, 0.0);
        p.terminal.assign(M, 0.0);
        p.alpha.assign(static_cast<std::size_t>(steps) * M, 0.0);
        p.beta.assign(static_cast<std::size_t>(steps) * M, 0.0);
        p.gamma.assign(static_cast<std::size_t>(steps) * M * d, 0.0);
        std::vector<double> xb(pn), xi1(d), xi2(d * d), gl;
        ForwardTerms t;
        for (std::size_t q = lo; q < hi; ++q) {
          const int m = b0 + static_cast<int>(q);
          const auto col = XI.col(static_cast<Eigen::Index>(q));
          auto set_features = [&](int path, int node, CSpan x, CSpan xbar) {
            double* f = p.features.data() + (static_cast<std::size_t>(node) * M + path) * K;
            std::copy(x.begin(), x.end(), f);
            std::copy(xbar.begin(), xbar.end(), f + d);
          };
          auto set_driver = [&](int path, int step, const std::vector<double>& grad, double xi4, double cross,
                                CSpan xbar) {
            std::size_t at = static_cast<std::size_t>(step) * M + path;
            double alpha = xi4 + cross;
            for (int k = 0; k < d; ++k) alpha += grad[k] * xbar[k];
            p.alpha[at] = alpha;
            p.beta[at] = grad[d];
            for (int k = 0; k < d; ++k) p.gamma[at * d + k] = grad[d + 1 + k];
          };

          // Own path.
          for (int i = 0; i < nodes; ++i)
            set_features(0, i, res.x.state(m, i),
                         CSpan(res.xbar.data() + (static_cast<std::size_t>(i) * R + m) * d, d));
          for (int i = 0; i < steps; ++i) {
            auto inc = res.x.increment(m, i);
            std::copy(inc.begin(), inc.end(), p.dw.begin() + (static_cast<std::size_t>(i) * M) * d);
            CSpan x = res.x.state(m, i);
            Lambda lam{x, my[static_cast<std::size_t>(i) * R + m],
                       CSpan(mz.data() + (static_cast<std::size_t>(i) * R + m) * d, d)};
            lin.driver_gradient(lim, i, lam, gl);
            double xi4 = ff ? field.driver(i, lam, weights(m)) : 0.0;
            double cross = ff ? lin.driver_cross(lam, driver_slice(i)) : 0.0;
            set_driver(0, i, gl, xi4, cross, CSpan(res.xbar.data() + (static_cast<std::size_t>(i) * R + m) * d, d));
          }
          {
            CSpan xT = res.x.state(m, steps);
            CSpan xbT(res.xbar.data() + (static_cast<std::size_t>(steps) * R + m) * d, d);
            p.terminal[0] = (ft ? field.terminal(xT, weights(m)) : 0.0) + lin.terminal(xT, xbT, ms_T);
          }

          // Shared paths driven by this member's field.
          for (int j = 0; j < J; ++j) {
            const int path = j + 1;
            std::fill(xb.begin(), xb.begin() + d, 0.0);
            for (int i = 0; i < steps; ++i) {
              const std::size_t js = static_cast<std::size_t>(j) * steps + i;
              for (int k = 0; k < d; ++k) xi1[k] = fb ? col(js * d + k) : 0.0;
              for (int k = 0; k < d * d; ++k) xi2[k] = fs ? col(off_s + js * d * d + k) : 0.0;
              CSpan dw(idw.data() + j * ps + i * d, d);
              linear_step(d, h, CSpan(xb.data() + i * d, d), xi1, xi2, iterms[js], dw,
                          MSpan(xb.data() + (i + 1) * d, d), i);
              std::copy(dw.begin(), dw.end(), p.dw.begin() + (static_cast<std::size_t>(i) * M + path) * d);
              std::vector<double> grad(igrad.begin() + js * (2 * d + 1), igrad.begin() + (js + 1) * (2 * d + 1));
              set_driver(path, i, grad, ff ? col(off_f + js) : 0.0, icross[js], CSpan(xb.data() + i * d, d));
            }
            for (int i = 0; i < nodes; ++i)
              set_features(path, i, CSpan(ix.data() + j * pn + i * d, d), CSpan(xb.data() + i * d, d));
            CSpan xT(ix.data() + j * pn + steps * d, d);
            p.terminal[path] = (ft ? col(off_t + j) : 0.0) + lin.terminal(xT, CSpan(xb.data() + steps * d, d), ms_T);
          }

          LinearBsdeResult sol = solve_linear_limit_bsde(p, opts.degree);
          for (int i = 0; i < nodes; ++i) res.ybar[static_cast<std::size_t>(i) * R + m] = sol.y[static_cast<std::size_t>(i) * M];
          for (int i = 0; i < steps; ++i)
            for (int k = 0; k < d; ++k)
              res.zbar[(static_cast<std::size_t>(i) * R + m) * d + k] = sol.z[(static_cast<std::size_t>(i) * M) * d + k];
          fallbacks[m] = sol.fallback_count;
        }
      });
    }
    res.fallback_count = 0;
    for (int v : fallbacks) res.fallback_count += v;
  }
  return res;
}

CltReport clt_compare(const std::vector<CltQuantity>& quantities) {
  CltReport report;
  for (const auto& q : quantities) {
    if (q.approx.size() < kMinCltSamples || q.limit.size() < kMinCltSamples)
      throw std::invalid_argument("clt_compare: '" + q.name + "' needs at least " + std::to_string(kMinCltSamples) +
                                  " samples on each side");
    CltRow row;
    row.name = q.name;
    row.approx = summarize(q.approx);
    row.limit = summarize(q.limit);
    row.approx_var = variance_with_error(q.approx);
    row.limit_var = variance_with_error(q.limit);
    row.variance_ratio = row.limit_var.value > 0.0 ? row.approx_var.value / row.limit_var.value
                                                   : (row.approx_var.value == 0.0 ? 1.0 : INFINITY);
    row.ks = ks_two_sample(q.approx, q.limit);
    report.rows.push_back(std::move(row));
  }
  return report;
}

double z_functional(const BsdeSolution& sol, int rep, int coord, const std::function<double(double)>& phi) {
  double acc = 0.0;
  for (int i = 0; i < sol.grid.steps; ++i) acc += phi(sol.grid.t(i)) * sol.z_at(rep, i, coord);
  return acc * sol.grid.h();
}

}  // namespace mfbsde
