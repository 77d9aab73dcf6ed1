#include <CLI11.hpp>

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfbsde/harness.hpp"
#include "mfbsde/parallel.hpp"

using namespace mfbsde;

namespace {

// Tolerances.
constexpr double kOuLimitVariance = 1.0 / 12.0;  // beta^2 s^2 / 3 with beta = 1, s = 0.5
constexpr double kTheoreticalSe = 3.0;
constexpr double kEmpiricalSe = 4.0;
constexpr double kZBound = 5.0;
constexpr int kZReps = 200;
constexpr double kHolderLow = 0.7, kHolderHigh = 1.3;
constexpr double kSamplerSe = 3.0;
constexpr int kComparisonPairs = 20;

const std::vector<int> kNGrid{8, 16, 32, 64, 128, 256};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::string n_list() {
  std::string s = "[";
  for (std::size_t i = 0; i < kNGrid.size(); ++i) s += (i ? ", " : "") + std::to_string(kNGrid[i]);
  return s + "]";
}

ModelPtr model(const std::string& name, std::map<std::string, double> values, Vec x0 = {1.0}) {
  CatalogParams p;
  p.values = std::move(values);
  p.x0 = std::move(x0);
  return catalog_model(name, p);
}

PathEnsemble driving(const TimeGrid& g, int d, int reps, const StreamKey& key) {
  PathEnsemble p(g, d, reps, true);
  p.key_root = key;
  for (int r = 0; r < reps; ++r) p.set_increments(r, brownian_increments(derive_key(key, Role::replication, r), g, d));
  return p;
}

const SlopeResult* slope_of(const StudyReport& r, const std::string& metric) {
  for (const auto& s : r.slopes)
    if (s.metric == metric) return &s;
  return nullptr;
}

const CltRowResult* row_of(const StudyReport& r, const std::string& name) {
  for (const auto& row : r.clt)
    if (row.row.name == name) return &row;
  return nullptr;
}

std::string describe(const SlopeResult* s) {
  if (!s) return "missing";
  if (s->verdict == "exact") return "exact (all errors <= 1e-10, no slope)";
  return fmt("slope %.3f [%.3f, %.3f] band [%.2f, %.2f] %s", s->fit.slope, s->fit.ci_low, s->fit.ci_high, s->band_low,
             s->band_high, s->verdict.c_str());
}

template <class T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

Outcome forward_rate() {
  auto cfg = parse_config(R"({"model": {"name": "ou_mean_field", "beta": 1, "s": 0.5, "x0": [1], "T": 1},
    "grid": {"steps": 64}, "study": {"n_list": )" + n_list() + R"(, "reps": 2000, "backward": false, "seed": 101}})");
  StudyReport r = run_convergence_study(cfg);
  const SlopeResult* x = slope_of(r, "x");
  return {x && x->verdict == "pass", "E sup|X^N - X|^2 " + describe(x)};
}

Outcome backward_rate() {
  auto cfg = parse_config(R"({"model": {"name": "mf_bsde_linear", "beta": 1, "s": 0.5, "x0": [1], "T": 1},
    "grid": {"steps": 64}, "study": {"n_list": )" + n_list() + R"(, "reps": 2000, "degree": 2, "seed": 102}})");
  StudyReport r = run_convergence_study(cfg);
  const SlopeResult* y = slope_of(r, "y");
  const SlopeResult* z = slope_of(r, "z");
  bool pass = y && z && y->verdict == "pass" && z->verdict == "pass";
  return {pass, "Y: " + describe(y) + "; Z: " + describe(z)};
}

std::shared_ptr<ModelSpec> decoupled() {
  auto m = std::make_shared<ModelSpec>();
  m->name = "decoupled";
  m->dim = 1;
  m->x0 = {0.5};
  m->drift = [](CSpan x, CSpan, MSpan out) { out[0] = -x[0] + 0.3 * std::sin(x[0]); };
  m->diffusion = [](CSpan x, CSpan, MSpan out) { out[0] = 0.8 + 0.2 * std::tanh(x[0]); };
  m->terminal = [](CSpan x, CSpan) { return std::sin(x[0]) + x[0]; };
  m->driver = [](const Lambda& l, const Partner&) { return -0.5 * l.y + 0.1 * std::tanh(l.z[0]) + 0.2 * l.x[0]; };
  m->partner = PartnerUse{false, false, false, false, false};
  m->lipschitz = 2.0;
  return m;
}

Outcome decoupling() {
  std::vector<std::pair<std::string, ModelPtr>> models{
      {"decoupled", decoupled()}, {"constant", model("constant", {{"b0", 0.2}, {"s", 0.7}, {"phi0", 1.0}, {"f0", 0.3}})}};
  TimeGrid g(1.0, 32);
  RegressionOptions ro;
  ro.inner_paths = 32;
  ro.mean_field_cap = 128;
  PicardOptions po;
  po.cloud_size = 256;
  int checked = 0;
  for (const auto& [name, m] : models) {
    StreamKey root(103);
    LawFlow law = solve_limit_forward(*m, g, 256, derive_key(root, Role::law, 0));
    for (int n : {1, 8, 64, 256}) {
      SdeNResult sde = solve_sde_n(*m, n, g, law, po, derive_key(root, Role::replication, n),
                                   derive_key(root, Role::environment, n), 200);
      PathEnsemble xl = limit_paths(*m, law, sde.paths);
      for (int r = 0; r < 200; ++r)
        if (!bit_equal(sde.paths.path_of(r), xl.path_of(r)))
          return {false, fmt("%s N=%d: X^N differs from X at rep %d", name.c_str(), n, r)};
      BsdeSolution lim = solve_mfbsde(*m, law, xl, ro);
      BsdeSolution yn = solve_bsde_n(*m, n, sde, LimitInputs{&law, &xl, &lim}, ro, derive_key(root, Role::inner, n));
      if (!bit_equal(yn.y, lim.y)) return {false, fmt("%s N=%d: Y^N differs from Y", name.c_str(), n)};
      if (!bit_equal(yn.z, lim.z)) return {false, fmt("%s N=%d: Z^N differs from Z", name.c_str(), n)};
      ++checked;
    }
  }
  return {true, fmt("X^N, Y^N, Z^N bit-identical to the limit in %d (model, N) runs, N in {1, 8, 64, 256}", checked)};
}

struct CltOutcomes {
  Outcome variance, distribution;
};

CltOutcomes clt() {
  auto ou = parse_config(R"({"model": {"name": "ou_mean_field", "beta": 1, "s": 0.5, "x0": [1], "T": 1},
    "grid": {"steps": 64}, "study": {"n": 256, "reps": 4000, "env_cloud": 16384, "backward": false,
    "probe_times": [1.0], "seed": 104}})");
  StudyReport r = run_clt_study(ou);
  CltOutcomes out;
  const CltRowResult* x = row_of(r, "x0(t=1)");
  if (!x) {
    out.variance = out.distribution = {false, "row x0(t=1) missing; failed stages: " + std::to_string(r.failed_stages.size())};
    return out;
  }
  double ea = x->row.approx_var.value / kOuLimitVariance - 1.0;
  double el = x->row.limit_var.value / kOuLimitVariance - 1.0;
  out.variance = {std::fabs(ea) <= kVarianceTolerance && std::fabs(el) <= kVarianceTolerance,
                  fmt("Var sqrt(N)(X^N_1 - X_1) = %.5f (%+.1f%%), Var Xbar_1 = %.5f (%+.1f%%), target 1/12, tol 15%%",
                      x->row.approx_var.value, 100 * ea, x->row.limit_var.value, 100 * el)};

  auto lin = parse_config(R"({"model": {"name": "mf_bsde_linear", "beta": 1, "s": 0.5, "x0": [1], "T": 1},
    "grid": {"steps": 64}, "study": {"n": 256, "reps": 4000, "env_cloud": 16384, "probe_times": [0.5],
    "seed": 105}})");
  StudyReport b = run_clt_study(lin);
  const CltRowResult* y = row_of(b, "y(t=0.5)");
  double px = x->row.ks.p_value, py = y ? y->row.ks.p_value : std::nan("");
  out.distribution = {px > kKsLevel && y && py > kKsLevel,
                      fmt("KS p: X_1 (ou) %.3f, Y_0.5 (mf_bsde_linear) %.3f, level %.2f", px, py, kKsLevel)};
  return out;
}

Outcome field_covariance() {
  auto m = model("ou_mean_field", {{"beta", 1.0}, {"s", 1.0}});
  TimeGrid g(1.0, 64);
  StreamKey root(106);
  LawFlow law = LawFlow::closed_form(*m, g, 8192, derive_key(root, Role::law, 0));
  FieldLattice lat;
  lat.times = {0.25, 0.5, 1.0};
  lat.points = {{1.0}};
  lat.blocks = {true, false, false, false};
  CovarianceMatrix theo = theoretical_covariance(*m, law, lat);
  double worst_theo = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      worst_theo = std::max(worst_theo, std::fabs(theo.value(i, j) - std::min(lat.times[i], lat.times[j])) / theo.se(i, j));

  PicardOptions po;
  po.cloud_size = 4096;
  SdeNResult sde = solve_sde_n(*m, 256, g, law, po, derive_key(root, Role::replication, 0),
                               derive_key(root, Role::environment, 0), 10000);
  CovarianceMatrix emp = sample_covariance(empirical_fields(*m, sde, law, lat));
  double worst_emp = 0.0;
  for (const auto& c : compare_covariance(theo, emp, kEmpiricalSe)) worst_emp = std::max(worst_emp, std::fabs(c.z));
  return {worst_theo <= kTheoreticalSe && worst_emp <= kEmpiricalSe,
          fmt("theoretical vs min(t,t'): max %.2f se (tol 3); empirical N=256 vs theoretical: max %.2f se (tol 4)",
              worst_theo, worst_emp)};
}

Outcome z_bound() {
  RegressionOptions ro;
  ro.inner_paths = 64;
  ro.mean_field_cap = 128;
  ro.y_law_paths = 64;
  ro.y_law_iters = 2;
  PicardOptions po;
  po.cloud_size = 4096;
  TimeGrid g(1.0, 64);
  double worst = 0.0;
  std::string where;
  for (const auto& [name, m] : std::vector<std::pair<std::string, ModelPtr>>{
           {"mf_bsde_linear", model("mf_bsde_linear", {{"beta", 1.0}, {"s", 0.5}})},
           {"tanh_bounded", model("tanh_bounded", {{"a", 1.0}, {"s", 0.5}})}}) {
    StreamKey root(107);
    LawFlow law = solve_limit_forward(*m, g, 2048, derive_key(root, Role::law, 0));
    for (int n : kNGrid) {
      SdeNResult sde = solve_sde_n(*m, n, g, law, po, derive_key(root, Role::replication, n),
                                   derive_key(root, Role::environment, n), kZReps);
      PathEnsemble xl = limit_paths(*m, law, sde.paths);
      BsdeSolution lim = solve_mfbsde(*m, law, xl, ro);
      BsdeSolution yn = solve_bsde_n(*m, n, sde, LimitInputs{&law, &xl, &lim}, ro, derive_key(root, Role::inner, n));
      if (yn.max_abs_z > worst) {
        worst = yn.max_abs_z;
        where = name + " N=" + std::to_string(n);
      }
    }
  }
  return {worst < kZBound, fmt("max |Z^N| = %.4f (%s), bound %.1f", worst, where.c_str(), kZBound)};
}

Outcome comparison() {
  TimeGrid g(1.0, 32);
  auto m = model("constant", {{"s", 1.0}}, {0.0});
  LawFlow law = LawFlow::closed_form(*m, g, 64, StreamKey(108));
  PathEnsemble x = limit_paths(*m, law, driving(g, 1, 1000, StreamKey(109)));
  RegressionOptions ro;
  Stream rng(derive_key(StreamKey(110), Role::inner, 0).digest());
  int passed = 0;
  double min_margin = std::numeric_limits<double>::infinity();
  for (int k = 0; k < kComparisonPairs; ++k) {
    double a = rng.uniform() * 2 - 1, b = rng.uniform() * 2 - 1, c = rng.uniform() * 0.5;
    double ky = rng.uniform(), kz = rng.uniform() * 0.3, kx = rng.uniform() * 0.4 - 0.2;
    double curve = rng.uniform() * 0.3, lift = rng.uniform() * 0.3;
    // Terminal gaps are non-negative members of the regression span.
    PlainBsdeData low{[a, b](CSpan x) { return a * std::sin(x[0]) + b * std::tanh(x[0]); },
                      [ky, kz, kx](double, CSpan x, double y, CSpan z) {
                        return kx * x[0] - ky * y + kz * std::tanh(z[0]);
                      }};
    PlainBsdeData high{[a, b, c, curve](CSpan x) {
                         return a * std::sin(x[0]) + b * std::tanh(x[0]) + c + curve * x[0] * x[0];
                       },
                       [ky, kz, kx, lift](double t, CSpan x, double y, CSpan z) {
                         return kx * x[0] - ky * y + kz * std::tanh(z[0]) + lift * t;
                       }};
    ComparisonResult res = check_comparison(x, high, low, ro);
    min_margin = std::min(min_margin, res.margin);
    if (res.pass && res.margin >= 0.0) ++passed;
  }
  return {passed == kComparisonPairs,
          fmt("%d/%d ordered pairs pass with margin >= 0 (min margin %.4g)", passed, kComparisonPairs, min_margin)};
}

Outcome holder() {
  auto m = model("mf_bsde_linear", {{"beta", 1.0}, {"s", 0.5}});
  TimeGrid g(1.0, 64);
  StreamKey root(111);
  LawFlow law = LawFlow::closed_form(*m, g, 4096, derive_key(root, Role::law, 0));
  PicardOptions po;
  SdeNResult sde = solve_sde_n(*m, 64, g, law, po, derive_key(root, Role::replication, 0),
                               derive_key(root, Role::environment, 0), 1000);
  PathEnsemble xl = limit_paths(*m, law, sde.paths);
  RegressionOptions ro;
  BsdeSolution lim = solve_mfbsde(*m, law, xl, ro);
  BsdeSolution yn = solve_bsde_n(*m, 64, sde, LimitInputs{&law, &xl, &lim}, ro, derive_key(root, Role::inner, 0));
  HolderFit h = holder_exponent(yn);
  return {h.slope >= kHolderLow && h.slope <= kHolderHigh,
          fmt("slope of log E|dY^N|^2 vs log dt = %.3f, band [%.1f, %.1f]", h.slope, kHolderLow, kHolderHigh)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every emitted file, with the report timestamp line removed.
std::map<std::string, std::string> emitted(const StudyReport& r, const std::filesystem::path& dir) {
  std::filesystem::remove_all(dir);
  emit_report(r, dir);
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::string text = slurp(e.path());
    if (e.path().filename() == "report.json") {
      std::istringstream in(text);
      std::string line, kept;
      while (std::getline(in, line))
        if (line.find("\"timestamp\"") == std::string::npos) kept += line + "\n";
      text = kept;
    }
    files[e.path().filename().string()] = text;
  }
  std::filesystem::remove_all(dir);
  return files;
}

Outcome infrastructure() {
  int models = 0;
  double worst = 0.0;
  bool grads = true;
  for (const auto& name : catalog_names())
    for (Vec x0 : {Vec{1.0}, Vec{0.5, -0.3}}) {
      auto m = model(name, {}, x0);
      GradientReport rep = check_gradients(*m, random_probes(*m, StreamKey(112), 200));
      grads = grads && rep.pass && rep.worst <= kGradientTolerance;
      worst = std::max(worst, rep.worst);
      ++models;
    }

  auto conv = parse_config(R"({"model": {"name": "tanh_bounded", "a": 1, "s": 0.5}, "grid": {"steps": 16},
    "study": {"n_list": [4, 8, 16], "reps": 200, "cloud": 256, "env_cloud": 256, "inner_paths": 32, "seed": 113}})");
  auto clt_cfg = parse_config(R"({"model": {"name": "ou_mean_field", "beta": 1, "s": 0.5}, "grid": {"steps": 16},
    "study": {"n": 16, "reps": 300, "env_cloud": 1024, "cloud": 1024, "field_cloud": 256, "inner_paths": 32,
    "limit_inner_paths": 32, "seed": 114}})");
  auto tmp = std::filesystem::temp_directory_path();
  bool same = true;
  for (auto run : {run_convergence_study, run_clt_study}) {
    const auto& cfg = run == run_convergence_study ? conv : clt_cfg;
    set_default_threads(1);
    auto first = emitted(run(cfg), tmp / "mfbsde_acceptance_a");
    set_default_threads(3);
    auto second = emitted(run(cfg), tmp / "mfbsde_acceptance_b");
    set_default_threads(0);
    same = same && first == second && !first.empty();
  }

  auto ou = model("ou_mean_field", {{"beta", 1.0}, {"s", 1.0}});
  TimeGrid g(1.0, 16);
  LawFlow law = LawFlow::closed_form(*ou, g, 2048, StreamKey(115));
  FieldLattice lat;
  lat.times = {0.25, 0.5, 1.0};
  lat.points = {{1.0}};
  lat.blocks = {true, false, false, false};
  CovarianceMatrix c = theoretical_covariance(*ou, law, lat);
  const int n = 10000, k = static_cast<int>(c.index.size());
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(k, k);
  for (int q = 0; q < n; ++q) {
    FieldSample f = sample_field_on_lattice(c, derive_key(StreamKey(116), Role::field, q));
    Eigen::Map<const Eigen::VectorXd> v(f.values.data(), k);
    acc += v * v.transpose();
  }
  acc /= n;
  double worst_sampler = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      double se = std::sqrt((c.value(i, i) * c.value(j, j) + c.value(i, j) * c.value(i, j)) / n);
      worst_sampler = std::max(worst_sampler, std::fabs(acc(i, j) - c.value(i, j)) / se);
    }
  bool sampler = worst_sampler <= kSamplerSe;
  return {grads && same && sampler,
          fmt("gradients %s (%d models, worst rel err %.2e); determinism %s; sampler covariance max %.2f se (tol 3)",
              grads ? "ok" : "FAIL", models, worst, same ? "byte-identical" : "DIFFERS", worst_sampler)};
}

void report(int id, const std::string& title, const Outcome& o, double seconds) {
  std::printf("criterion %2d %-4s %s: %s [%.0f s]\n", id, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str(),
              seconds);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Criteria to run (4 and 5 run together)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  std::set<int> want(only.begin(), only.end());
  if (want.empty())
    for (int k = 1; k <= 10; ++k) want.insert(k);
  if (want.count(5)) want.insert(4);

  bool all = true;
  auto timed = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    if (!want.count(id)) return;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    report(id, title, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed(1, "forward rate", forward_rate);
  timed(2, "backward rate", backward_rate);
  timed(3, "decoupling exactness", decoupling);
  if (want.count(4)) {
    auto t0 = std::chrono::steady_clock::now();
    CltOutcomes c;
    try {
      c = clt();
    } catch (const std::exception& e) {
      c.variance = c.distribution = {false, std::string("error: ") + e.what()};
    }
    double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && c.variance.pass && c.distribution.pass;
    report(4, "clt variance", c.variance, s);
    report(5, "clt distribution", c.distribution, s);
  }
  timed(6, "field covariance", field_covariance);
  timed(7, "z boundedness", z_bound);
  timed(8, "comparison", comparison);
  timed(9, "holder in time", holder);
  timed(10, "infrastructure", infrastructure);
  return all ? 0 : 1;
}
