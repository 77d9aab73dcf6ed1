#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfbsde/model.hpp"
#include "mfbsde/noise.hpp"

namespace mfbsde {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int step) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

inline constexpr double kDivergenceBound = 1e8;

// Paths stored node-major: value(rep, node, coord) lives at [(node * reps + rep) * dim + coord].
class PathEnsemble {
 public:
  PathEnsemble() = default;
  PathEnsemble(TimeGrid grid, int dim, int reps, bool with_increments = false);

  const TimeGrid& grid() const { return grid_; }
  int dim() const { return dim_; }
  int reps() const { return reps_; }
  int nodes() const { return grid_.nodes(); }
  bool has_increments() const { return !increments_.empty(); }

  std::span<double> state(int rep, int node) {
    return {values_.data() + index(rep, node), static_cast<std::size_t>(dim_)};
  }
  std::span<const double> state(int rep, int node) const {
    return {values_.data() + index(rep, node), static_cast<std::size_t>(dim_)};
  }
  double value(int rep, int node, int coord) const { return values_[index(rep, node) + coord]; }
  std::span<const double> node_slice(int node) const {
    return {values_.data() + index(0, node), static_cast<std::size_t>(reps_) * dim_};
  }

  std::span<double> increment(int rep, int step) {
    return {increments_.data() + index(rep, step), static_cast<std::size_t>(dim_)};
  }
  std::span<const double> increment(int rep, int step) const {
    return {increments_.data() + index(rep, step), static_cast<std::size_t>(dim_)};
  }

  std::vector<double> path_of(int rep) const;        // [node][coord]
  std::vector<double> increments_of(int rep) const;  // [step][coord]
  void set_path(int rep, std::span<const double> path);
  void set_increments(int rep, std::span<const double> dw);

  // Replication r was driven by derive_key(key_root, key_role, r).
  StreamKey key_root;
  Role key_role = Role::replication;
  StreamKey key_of(int rep) const { return derive_key(key_root, key_role, static_cast<std::uint64_t>(rep)); }

  std::vector<double> sample_mean(int node) const;
  std::vector<double> sample_variance(int node) const;

 private:
  std::size_t index(int rep, int node) const {
    return (static_cast<std::size_t>(node) * reps_ + rep) * dim_;
  }
  TimeGrid grid_;
  int dim_ = 0;
  int reps_ = 0;
  std::vector<double> values_;
  std::vector<double> increments_;
};

struct QuadratureRule {
  std::vector<double> points;  // [q][coord]
  std::vector<double> weights;
};

// Probabilists' Gauss-Hermite rule: sum_q w_q g(z_q) = E[g(Z)], Z ~ N(0, 1).
QuadratureRule gauss_hermite(int points);

// Law of the limit state over time. Always carries a materialized sample; a
// closed-form law also carries per-node quadrature rules for its Gaussian
// marginals, which expectations use instead of the sample.
class LawFlow {
 public:
  enum class Kind { cloud, closed_form };

  LawFlow() = default;
  static LawFlow from_cloud(PathEnsemble cloud);
  static LawFlow closed_form(const ModelSpec& model, const TimeGrid& grid, int samples, const StreamKey& key);

  Kind kind() const { return kind_; }
  const PathEnsemble& samples() const { return samples_; }
  const TimeGrid& grid() const { return samples_.grid(); }
  int size() const { return samples_.reps(); }
  int dim() const { return samples_.dim(); }

  // Calls fn(partner_state, weight) over a weighted representation of the law at
  // a node. For a cloud the first `cap` samples are used (0 = all).
  template <class F>
  void for_each(int node, F&& fn, int cap = 0) const {
    if (kind_ == Kind::closed_form && !quadrature_.empty()) {
      const auto& q = quadrature_[node];
      std::size_t d = samples_.dim();
      for (std::size_t k = 0; k < q.weights.size(); ++k)
        fn(std::span<const double>(q.points.data() + k * d, d), q.weights[k]);
      return;
    }
    int n = cap > 0 ? std::min(cap, samples_.reps()) : samples_.reps();
    for (int c = 0; c < n; ++c) fn(samples_.state(c, node), 1.0);
  }

  // Moments used by the Picard stopping rule (exact for closed form).
  std::vector<double> mean(int node) const;
  std::vector<double> variance(int node) const;

 private:
  Kind kind_ = Kind::cloud;
  PathEnsemble samples_;
  std::vector<QuadratureRule> quadrature_;
  std::vector<std::vector<double>> exact_mean_, exact_var_;
};

// max over nodes and coordinates of |mean difference| + |variance difference|.
double law_distance(const LawFlow& a, const LawFlow& b);

struct EnvironmentDraw {
  std::vector<std::uint32_t> indices;  // into the environment law's sample
  StreamKey key;
};

struct PicardOptions {
  int max_iters = 5;
  double tol = 1e-3;
  int cloud_size = 4096;
};

struct SdeNResult {
  PathEnsemble paths;  // with increments
  std::vector<EnvironmentDraw> environments;
  LawFlow env_law;     // final Picard iterate; environments index its sample
  StreamKey env_key;
  int iterations = 0;
  bool converged = false;
  std::vector<double> picard_history;
};

// Increments of law-cloud sample c: antithetic pairs, sample 2k + 1 is the negation of
// sample 2k, both drawn from derive_key(root, cloud, k).
void cloud_increments(std::uint64_t root, int c, const TimeGrid& grid, int dim, std::span<double> out);

LawFlow solve_limit_forward(const ModelSpec& model, const TimeGrid& grid, int cloud_size, const StreamKey& key);

// N fully interacting particles; particle i driven by derive_key(key, particle, i).
PathEnsemble solve_classical_system(const ModelSpec& model, int n, const TimeGrid& grid, const StreamKey& key);

SdeNResult solve_sde_n(const ModelSpec& model, int n, const TimeGrid& grid, const LawFlow& init_law,
                       const PicardOptions& picard, const StreamKey& w_key, const StreamKey& env_key, int reps);

// Euler path of the limit equation driven by dw, with coefficient expectations
// taken under `law` (quadrature for closed form, first `cap` samples for a cloud).
void limit_path(const ModelSpec& model, const LawFlow& law, std::span<const double> dw, std::span<double> path,
                int cap = 0);
PathEnsemble limit_paths(const ModelSpec& model, const LawFlow& law, const PathEnsemble& driving, int cap = 0);

// Euler path of X^N driven by dw with partners env_law.samples()[indices].
void sde_n_path(const ModelSpec& model, const LawFlow& env_law, std::span<const std::uint32_t> indices,
                std::span<const double> dw, std::span<double> path);

struct ErrorEstimate {
  double mean = 0.0;
  double se = 0.0;
  std::vector<double> per_rep;
};

// E sup_i |X^N_i - X_i|^2 against the closed form of the discretized limit on the same increments.
ErrorEstimate forward_error(const ModelSpec& model, const SdeNResult& sde);
ErrorEstimate forward_error(const ModelSpec& model, int n, const TimeGrid& grid, int reps, const StreamKey& w_key,
                            const StreamKey& env_key, const PicardOptions& picard);

}  // namespace mfbsde
