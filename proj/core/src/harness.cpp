#include "mfbsde/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace mfbsde {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt_exact(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Collects violations while reading one JSON object strictly.
class Reader {
 public:
  Reader(const json& obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {}

  bool ok() const { return obj_.is_object(); }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  void fail(const std::string& key, const std::string& msg) { errors_.push_back(where(key) + ": " + msg); }

  void allow(std::initializer_list<const char*> keys) {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!allowed.count(it.key())) errors_.push_back(where(it.key()) + ": unknown key");
  }

  const json* find(const std::string& key) const {
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void integer(const std::string& key, int& out, int min = 1) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer()) return fail(key, "must be an integer");
    long long x = v->get<long long>();
    if (x < min || x > std::numeric_limits<int>::max()) return fail(key, "must be an integer >= " + std::to_string(min));
    out = static_cast<int>(x);
  }

  void number(const std::string& key, double& out, bool positive = true) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number()) return fail(key, "must be a number");
    double x = v->get<double>();
    if (!std::isfinite(x) || (positive && !(x > 0.0))) return fail(key, positive ? "must be positive" : "must be finite");
    out = x;
  }

  void boolean(const std::string& key, bool& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_boolean()) return fail(key, "must be true or false");
    out = v->get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_string() || v->get<std::string>().empty()) return fail(key, "must be a non-empty string");
    out = v->get<std::string>();
  }

  void numbers(const std::string& key, std::vector<double>& out) {
    const json* v = find(key);
    if (!v) return;
    if (!read_numbers(*v, out)) fail(key, "must be a list of finite numbers");
  }

  static bool read_numbers(const json& v, std::vector<double>& out) {
    if (!v.is_array()) return false;
    std::vector<double> tmp;
    for (const auto& e : v) {
      if (!e.is_number() || !std::isfinite(e.get<double>())) return false;
      tmp.push_back(e.get<double>());
    }
    out = std::move(tmp);
    return true;
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<std::string>& errors_;
};

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("not valid JSON: ") + e.what()});
  }
}

void read_lattice(const json& doc, const std::string& path, FieldLattice& lat, std::vector<std::string>& errors) {
  if (!doc.is_object()) {
    errors.push_back(path + ": must be an object");
    return;
  }
  Reader r(doc, path, errors);
  r.allow({"times", "points", "lambdas", "blocks"});
  r.numbers("times", lat.times);
  if (const json* v = r.find("points")) {
    lat.points.clear();
    bool good = v->is_array();
    if (good)
      for (const auto& p : *v) {
        Vec x;
        if (!Reader::read_numbers(p, x) || x.empty()) {
          good = false;
          break;
        }
        lat.points.push_back(std::move(x));
      }
    if (!good) r.fail("points", "must be a list of non-empty number lists");
  }
  if (const json* v = r.find("lambdas")) {
    lat.lambdas.clear();
    if (!v->is_array()) r.fail("lambdas", "must be a list of {x, y, z} objects");
    else
      for (std::size_t i = 0; i < v->size(); ++i) {
        const json& e = (*v)[i];
        std::string at = r.where("lambdas") + "[" + std::to_string(i) + "]";
        if (!e.is_object()) {
          errors.push_back(at + ": must be an object");
          continue;
        }
        Reader le(e, at, errors);
        le.allow({"x", "y", "z"});
        LambdaPoint lp;
        le.numbers("x", lp.x);
        le.number("y", lp.y, false);
        le.numbers("z", lp.z);
        if (lp.x.empty() || lp.z.size() != lp.x.size()) errors.push_back(at + ": x and z must be non-empty and equally long");
        lat.lambdas.push_back(std::move(lp));
      }
  }
  if (const json* v = r.find("blocks")) {
    lat.blocks = {false, false, false, false};
    bool good = v->is_array() && !v->empty();
    if (good)
      for (const auto& b : *v) {
        if (!b.is_number_integer() || b.get<int>() < 1 || b.get<int>() > 4) {
          good = false;
          break;
        }
        lat.blocks[b.get<int>() - 1] = true;
      }
    if (!good) r.fail("blocks", "must be a non-empty list of block numbers 1-4");
  }
}

ordered_json lattice_json(const FieldLattice& lat) {
  ordered_json j;
  j["times"] = lat.times;
  j["points"] = lat.points;
  ordered_json lams = ordered_json::array();
  for (const auto& l : lat.lambdas) lams.push_back({{"x", l.x}, {"y", l.y}, {"z", l.z}});
  j["lambdas"] = lams;
  std::vector<int> blocks;
  for (int b = 0; b < 4; ++b)
    if (lat.blocks[b]) blocks.push_back(b + 1);
  j["blocks"] = blocks;
  return j;
}

std::string fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

bool on_grid(double t, const TimeGrid& grid) {
  try {
    grid.node_of(t);
    return t >= 0.0 && t <= grid.horizon + 1e-12;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : std::invalid_argument("invalid config: " + join(violations, "; ")), violations_(std::move(violations)) {}

std::string normalized_config(const ExperimentConfig& cfg) {
  const StudyConfig& s = cfg.study;
  ordered_json model = {{"name", cfg.model.name}, {"x0", cfg.model.params.x0}, {"T", cfg.model.params.horizon}};
  for (const auto& [k, v] : cfg.model.params.values) model[k] = v;
  ordered_json study = {{"n_list", s.n_list},
                        {"n", s.n},
                        {"reps", s.reps},
                        {"cloud", s.cloud},
                        {"env_cloud", s.env_cloud},
                        {"center_cloud", s.center_cloud},
                        {"picard_iters", s.picard_iters},
                        {"picard_tol", s.picard_tol},
                        {"degree", s.degree},
                        {"inner_iters", s.inner_iters},
                        {"inner_paths", s.inner_paths},
                        {"mean_field_cap", s.mean_field_cap},
                        {"z_bound", s.z_bound},
                        {"y_law_iters", s.y_law_iters},
                        {"members", s.members},
                        {"field_cloud", s.field_cloud},
                        {"limit_inner_paths", s.limit_inner_paths},
                        {"backward", s.backward},
                        {"reference", s.reference},
                        {"lattice", s.lattice ? lattice_json(*s.lattice) : ordered_json(nullptr)},
                        {"probe_times", s.probe_times},
                        {"seed", s.seed}};
  ordered_json doc = {{"model", model},
                      {"grid", {{"steps", cfg.steps}}},
                      {"study", study},
                      {"output", {{"dir", cfg.out_dir}}}};
  return doc.dump();
}

ExperimentConfig parse_config(const std::string& text) {
  json doc = parse_json(text);
  if (!doc.is_object()) throw ConfigError({"document must be a JSON object"});
  std::vector<std::string> errors;
  ExperimentConfig cfg;
  Reader top(doc, "", errors);
  top.allow({"model", "grid", "study", "output"});

  const json* model = top.find("model");
  if (!model) errors.push_back("model: missing");
  else if (!model->is_object()) errors.push_back("model: must be an object");
  else {
    Reader m(*model, "model", errors);
    if (!m.find("name")) errors.push_back("model.name: missing");
    m.string("name", cfg.model.name);
    m.numbers("x0", cfg.model.params.x0);
    m.number("T", cfg.model.params.horizon);
    for (auto it = model->begin(); it != model->end(); ++it) {
      if (it.key() == "name" || it.key() == "x0" || it.key() == "T") continue;
      if (!it->is_number()) errors.push_back("model." + it.key() + ": parameters must be numbers");
      else cfg.model.params.values[it.key()] = it->get<double>();
    }
  }

  if (const json* grid = top.find("grid")) {
    if (!grid->is_object()) errors.push_back("grid: must be an object");
    else {
      Reader g(*grid, "grid", errors);
      g.allow({"T", "steps"});
      double t = cfg.model.params.horizon;
      g.number("T", t);
      if (model && model->is_object() && model->contains("T") && t != cfg.model.params.horizon)
        errors.push_back("grid.T: conflicts with model.T");
      cfg.model.params.horizon = t;
      g.integer("steps", cfg.steps);
    }
  }

  StudyConfig& s = cfg.study;
  const json* study = top.find("study");
  if (!study) errors.push_back("study: missing (study.seed is required)");
  else if (!study->is_object()) errors.push_back("study: must be an object");
  else {
    Reader r(*study, "study", errors);
    r.allow({"n_list", "n", "reps", "cloud", "env_cloud", "center_cloud", "picard_iters", "picard_tol", "degree",
             "inner_iters", "inner_paths", "mean_field_cap", "z_bound", "y_law_iters", "members", "field_cloud",
             "limit_inner_paths", "backward", "reference", "lattice", "probe_times", "seed"});
    if (const json* v = r.find("n_list")) {
      bool good = v->is_array();
      if (good)
        for (const auto& e : *v) {
          if (!e.is_number_integer() || e.get<long long>() < 1 || e.get<long long>() > 1 << 24) {
            good = false;
            break;
          }
          s.n_list.push_back(e.get<int>());
        }
      if (!good) r.fail("n_list", "must be a list of positive integers");
      else {
        for (std::size_t i = 1; i < s.n_list.size(); ++i)
          if (s.n_list[i] <= s.n_list[i - 1]) {
            r.fail("n_list", "not strictly increasing");
            break;
          }
        if (!s.n_list.empty() && s.n_list.size() < 3) r.fail("n_list", "needs at least 3 entries for a slope fit");
      }
    }
    r.integer("n", s.n);
    r.integer("reps", s.reps);
    r.integer("cloud", s.cloud, 2);
    r.integer("env_cloud", s.env_cloud, 2);
    r.integer("center_cloud", s.center_cloud, 2);
    r.integer("picard_iters", s.picard_iters);
    r.number("picard_tol", s.picard_tol);
    r.integer("degree", s.degree, 0);
    r.integer("inner_iters", s.inner_iters);
    r.integer("inner_paths", s.inner_paths);
    r.integer("mean_field_cap", s.mean_field_cap, 0);
    r.number("z_bound", s.z_bound);
    r.integer("y_law_iters", s.y_law_iters);
    r.integer("members", s.members, 0);
    r.integer("field_cloud", s.field_cloud, 2);
    r.integer("limit_inner_paths", s.limit_inner_paths);
    r.boolean("backward", s.backward);
    r.string("reference", s.reference);
    if (s.reference != "auto" && s.reference != "oracle" && s.reference != "self")
      r.fail("reference", "must be auto, oracle or self");
    if (const json* v = r.find("lattice")) {
      FieldLattice lat;
      read_lattice(*v, "study.lattice", lat, errors);
      s.lattice = std::move(lat);
    }
    r.numbers("probe_times", s.probe_times);
    const json* seed = r.find("seed");
    if (!seed) errors.push_back("study.seed: missing (runs are never seeded from the clock)");
    else if (!seed->is_number_unsigned() && !(seed->is_number_integer() && seed->get<long long>() >= 0))
      r.fail("seed", "must be a non-negative integer");
    else s.seed = seed->get<std::uint64_t>();
  }

  if (const json* out = top.find("output")) {
    if (!out->is_object()) errors.push_back("output: must be an object");
    else {
      Reader o(*out, "output", errors);
      o.allow({"dir"});
      o.string("dir", cfg.out_dir);
    }
  }

  ModelPtr built;
  if (!cfg.model.name.empty()) {
    try {
      built = build_model(cfg);
    } catch (const std::invalid_argument& e) {
      errors.push_back(std::string("model: ") + e.what());
    }
  }
  TimeGrid grid(cfg.model.params.horizon, cfg.steps);
  for (double t : s.probe_times)
    if (!on_grid(t, grid)) errors.push_back("study.probe_times: " + fmt(t) + " is not a grid node");
  if (s.lattice) {
    for (double t : s.lattice->times)
      if (!on_grid(t, grid)) errors.push_back("study.lattice.times: " + fmt(t) + " is not a grid node");
    if (built) {
      for (const auto& p : s.lattice->points)
        if (static_cast<int>(p.size()) != built->dim) errors.push_back("study.lattice.points: dimension mismatch");
      for (const auto& l : s.lattice->lambdas)
        if (static_cast<int>(l.x.size()) != built->dim) errors.push_back("study.lattice.lambdas: dimension mismatch");
    }
  }
  if (built && s.reference == "oracle" && !built->closed_form)
    errors.push_back("study.reference: model '" + cfg.model.name + "' has no closed form for oracle mode");

  if (!errors.empty()) throw ConfigError(std::move(errors));
  cfg.model.params.x0 = built->x0;
  cfg.hash = fnv1a(normalized_config(cfg));
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError({"cannot read config file " + file.string()});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

FieldLattice parse_lattice(const std::string& text) {
  json doc = parse_json(text);
  std::vector<std::string> errors;
  FieldLattice lat;
  read_lattice(doc, "lattice", lat, errors);
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return lat;
}

ModelPtr build_model(const ExperimentConfig& cfg) { return catalog_model(cfg.model.name, cfg.model.params); }

TimeGrid build_grid(const ExperimentConfig& cfg) { return TimeGrid(cfg.model.params.horizon, cfg.steps); }

RegressionOptions regression_options(const StudyConfig& s) {
  RegressionOptions o;
  o.degree = s.degree;
  o.inner_iters = s.inner_iters;
  o.inner_paths = s.inner_paths;
  o.mean_field_cap = s.mean_field_cap;
  o.z_bound = s.z_bound;
  o.y_law_iters = s.y_law_iters;
  return o;
}

PicardOptions picard_options(const StudyConfig& s, int cloud) {
  PicardOptions p;
  p.max_iters = s.picard_iters;
  p.tol = s.picard_tol;
  p.cloud_size = cloud;
  return p;
}

namespace {

StudyReport report_base(const ExperimentConfig& cfg, const std::string& study) {
  StudyReport rep;
  rep.study = study;
  rep.model = cfg.model.name;
  rep.seed = cfg.study.seed;
  rep.config_hash = cfg.hash.empty() ? fnv1a(normalized_config(cfg)) : cfg.hash;
  rep.config = normalized_config(cfg);
  return rep;
}

std::string tag(const std::string& name, int n) { return name + ".N=" + std::to_string(n); }

bool all_within(const std::vector<double>& v, double tol) {
  return std::all_of(v.begin(), v.end(), [tol](double x) { return std::fabs(x) <= tol; });
}

std::string overall_of(const std::vector<Verdict>& verdicts) {
  if (verdicts.empty()) return "no-data";
  bool fail = false, degraded = false, exact = true;
  for (const auto& v : verdicts) {
    fail |= v.status == "fail";
    degraded |= v.status == "degraded";
    exact &= v.status == "exact";
  }
  if (fail) return "fail";
  if (degraded) return "degraded";
  return exact ? "exact" : "pass";
}

struct MetricSeries {
  std::vector<double> n, value, se;
};

}  // namespace

StudyReport run_convergence_study(const ExperimentConfig& cfg) {
  StudyReport rep = report_base(cfg, "convergence");
  const StudyConfig& s = cfg.study;
  if (s.n_list.empty()) return rep;
  ModelPtr model = build_model(cfg);
  const TimeGrid grid = build_grid(cfg);
  const bool oracle = s.reference == "oracle" || (s.reference == "auto" && model->closed_form);
  rep.reference = oracle ? "oracle" : "self";
  const StreamKey root(s.seed);
  const RegressionOptions ro = regression_options(s);

  LawFlow ref_law;
  if (!oracle) {
    int m = std::max(s.cloud, 8 * s.n_list.back());
    PathEnsemble cloud = solve_classical_system(*model, m, grid, derive_key(root, Role::law, 0));
    cloud.key_role = Role::particle;
    ref_law = LawFlow::from_cloud(std::move(cloud));
    rep.diagnostics.push_back({"reference_cloud", static_cast<double>(m)});
  }

  std::map<std::string, MetricSeries> series;
  auto record = [&](int n, const std::string& metric, const std::vector<double>& per_rep) {
    Summary sm = summarize(per_rep);
    rep.errors.push_back({n, metric, sm.mean, sm.se});
    auto& ms = series[metric];
    ms.n.push_back(n);
    ms.value.push_back(sm.mean);
    ms.se.push_back(sm.se);
  };

  const int R = s.reps, steps = grid.steps, d = model->dim;
  for (int n : s.n_list) {
    const StreamKey wk = derive_key(root, Role::replication, static_cast<std::uint64_t>(n));
    const StreamKey ek = derive_key(root, Role::environment, static_cast<std::uint64_t>(n));
    LawFlow init = oracle ? LawFlow::closed_form(*model, grid, s.env_cloud, ek) : ref_law;
    SdeNResult sde = solve_sde_n(*model, n, grid, init, picard_options(s, s.env_cloud), wk, ek, R);
    rep.diagnostics.push_back({tag("picard_iterations", n), static_cast<double>(sde.iterations)});
    rep.diagnostics.push_back({tag("picard_converged", n), sde.converged ? 1.0 : 0.0});
    const LawFlow& limit_law = oracle ? init : ref_law;
    PathEnsemble xl = limit_paths(*model, limit_law, sde.paths);

    std::vector<double> ex(R, 0.0);
    for (int r = 0; r < R; ++r)
      for (int i = 0; i <= steps; ++i) {
        double e = 0.0;
        for (int k = 0; k < d; ++k) {
          double diff = sde.paths.value(r, i, k) - xl.value(r, i, k);
          e += diff * diff;
        }
        ex[r] = std::max(ex[r], e);
      }
    record(n, "x", ex);

    if (!s.backward) continue;
    BsdeSolution lim = solve_mfbsde(*model, limit_law, xl, ro);
    BsdeSolution yn = solve_bsde_n(*model, n, sde, LimitInputs{&limit_law, &xl, &lim}, ro,
                                   derive_key(root, Role::inner, static_cast<std::uint64_t>(n)));
    std::vector<double> ey(R, 0.0), ez(R, 0.0);
    const double h = grid.h();
    for (int r = 0; r < R; ++r) {
      for (int i = 0; i <= steps; ++i) {
        double diff = yn.y_at(r, i) - lim.y_at(r, i);
        ey[r] = std::max(ey[r], diff * diff);
      }
      for (int i = 0; i < steps; ++i)
        for (int k = 0; k < d; ++k) {
          double diff = yn.z_at(r, i, k) - lim.z_at(r, i, k);
          ez[r] += h * diff * diff;
        }
    }
    record(n, "y", ey);
    record(n, "z", ez);
    rep.diagnostics.push_back({tag("max_abs_z", n), yn.max_abs_z});
    rep.diagnostics.push_back({tag("z_bound_exceeded", n), yn.z_bound_exceeded ? 1.0 : 0.0});
    rep.diagnostics.push_back({tag("fallback_count", n), static_cast<double>(yn.fallback_count)});
    rep.diagnostics.push_back({tag("contraction_flag", n), yn.contraction_flag ? 1.0 : 0.0});
    rep.diagnostics.push_back({tag("y_law_iterations", n), static_cast<double>(yn.y_law_iterations)});
    rep.diagnostics.push_back({tag("limit_max_abs_z", n), lim.max_abs_z});
  }

  for (const char* metric : {"x", "y", "z"}) {
    auto it = series.find(metric);
    if (it == series.end()) continue;
    const MetricSeries& ms = it->second;
    SlopeResult sr;
    sr.metric = metric;
    const bool forward = sr.metric == "x";
    sr.band_low = forward ? kForwardSlopeLow : kBackwardSlopeLow;
    sr.band_high = forward ? kForwardSlopeHigh : kBackwardSlopeHigh;
    std::string detail;
    if (all_within(ms.value, kExactTolerance)) {
      sr.fit.degraded = true;
      sr.fit.slope = std::numeric_limits<double>::quiet_NaN();
      sr.verdict = "exact";
      detail = "all errors <= " + fmt(kExactTolerance) + "; slope undefined";
    } else {
      sr.fit = fit_log_slope(ms.n, ms.value, ms.se);
      if (sr.fit.degraded) {
        sr.verdict = "degraded";
        detail = "fewer than 3 usable error points";
      } else {
        bool in = sr.fit.slope >= sr.band_low && sr.fit.slope <= sr.band_high;
        sr.verdict = in ? "pass" : "fail";
        detail = "slope " + fmt(sr.fit.slope) + " (se " + fmt(sr.fit.se) + ") " + (in ? "in" : "outside") + " [" +
                 fmt(sr.band_low) + ", " + fmt(sr.band_high) + "]";
      }
    }
    rep.verdicts.push_back({std::string("convergence.") + metric, sr.verdict, detail});
    rep.slopes.push_back(std::move(sr));
  }
  rep.overall = overall_of(rep.verdicts);
  return rep;
}

std::vector<CovarianceCheck> compare_covariance(const CovarianceMatrix& theoretical, const CovarianceMatrix& empirical,
                                                double tolerance) {
  const auto k = theoretical.value.rows();
  if (empirical.value.rows() != k || empirical.value.cols() != k || theoretical.value.cols() != k)
    throw std::invalid_argument("compare_covariance: size mismatch");
  std::vector<CovarianceCheck> out;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i; j < k; ++j) {
      CovarianceCheck c;
      c.i = static_cast<int>(i);
      c.j = static_cast<int>(j);
      if (static_cast<Eigen::Index>(theoretical.index.size()) == k)
        c.block = block_tag(theoretical.index[i], theoretical.index[j]);
      c.theoretical = theoretical.value(i, j);
      c.theoretical_se = theoretical.se(i, j);
      c.empirical = empirical.value(i, j);
      c.empirical_se = empirical.se(i, j);
      double diff = c.empirical - c.theoretical;
      double se = std::hypot(c.theoretical_se, c.empirical_se);
      c.z = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff));
      c.pass = std::fabs(c.z) <= tolerance;
      out.push_back(c);
    }
  return out;
}

std::string block_tag(const FieldIndex& a, const FieldIndex& b) {
  return std::to_string(a.block) + "-" + std::to_string(b.block);
}

namespace {

FieldLattice default_lattice(const ModelSpec& model, const TimeGrid& grid) {
  FieldLattice lat;
  for (double f : {0.25, 0.5, 1.0}) {
    double t = grid.t(grid.node_of(f * grid.horizon));
    if (lat.times.empty() || lat.times.back() != t) lat.times.push_back(t);
  }
  lat.points = {model.x0};
  lat.blocks = {true, false, false, false};
  return lat;
}

std::string row_status(const CltQuantity& q, const CltRow& row) {
  if (all_within(q.approx, kExactTolerance) && all_within(q.limit, kExactTolerance)) return "exact";
  bool ks = row.ks.p_value > kKsLevel;
  bool var = std::fabs(row.variance_ratio - 1.0) <= kVarianceTolerance;
  return ks && var ? "pass" : "fail";
}

}  // namespace

StudyReport run_clt_study(const ExperimentConfig& cfg) {
  StudyReport rep = report_base(cfg, "clt");
  const StudyConfig& s = cfg.study;
  ModelPtr model = build_model(cfg);
  const TimeGrid grid = build_grid(cfg);
  const bool closed = static_cast<bool>(model->closed_form);
  rep.reference = closed ? "oracle" : "self";
  const StreamKey root(s.seed);
  const RegressionOptions ro = regression_options(s);
  const int N = s.n, R = s.reps, d = model->dim;
  const bool backward = s.backward;
  const double sqrt_n = std::sqrt(static_cast<double>(N));

  std::vector<double> probes = s.probe_times;
  if (probes.empty()) probes = {grid.t(grid.node_of(0.5 * grid.horizon)), grid.horizon};

  // Approximation: coupled (X^N, X) and (Y^N, Z^N) / (Y, Z) on shared increments.
  LawFlow init;
  SdeNResult sde;
  PathEnsemble xl;
  BsdeSolution lim, yn;
  bool approx_ok = false;
  try {
    const StreamKey ek = derive_key(root, Role::environment, 0);
    init = closed ? LawFlow::closed_form(*model, grid, s.env_cloud, ek)
                  : solve_limit_forward(*model, grid, s.cloud, derive_key(root, Role::law, 0));
    sde = solve_sde_n(*model, N, grid, init, picard_options(s, s.env_cloud), derive_key(root, Role::replication, 0),
                      ek, R);
    rep.diagnostics.push_back({"picard_iterations", static_cast<double>(sde.iterations)});
    rep.diagnostics.push_back({"picard_converged", sde.converged ? 1.0 : 0.0});
    xl = limit_paths(*model, init, sde.paths);
    if (backward) {
      lim = solve_mfbsde(*model, init, xl, ro);
      yn = solve_bsde_n(*model, N, sde, LimitInputs{&init, &xl, &lim}, ro, derive_key(root, Role::inner, 0));
      rep.diagnostics.push_back({"max_abs_z", yn.max_abs_z});
      rep.diagnostics.push_back({"fallback_count", static_cast<double>(yn.fallback_count)});
    }
    approx_ok = true;
  } catch (const std::exception& e) {
    rep.failed_stages.push_back(std::string("approximation: ") + e.what());
  }

  // Limit system on an independent law and its own limit solution.
  LimitSystemResult ls;
  LawFlow sys_law;
  BsdeSolution sys_lim;
  bool limit_ok = false;
  if (approx_ok) try {
      sys_law = closed ? LawFlow::closed_form(*model, grid, s.cloud, derive_key(root, Role::law, 1)) : init;
      if (backward) sys_lim = solve_mfbsde(*model, sys_law, limit_paths(*model, sys_law, xl), ro);
      LimitSystemOptions lo;
      lo.members = s.members > 0 ? s.members : R;
      lo.field_cloud = s.field_cloud;
      lo.inner_paths = s.limit_inner_paths;
      lo.degree = s.degree;
      lo.backward = backward;
      ls = solve_limit_system(*model, sys_law, backward ? &sys_lim : nullptr, lo, derive_key(root, Role::member, 0));
      rep.diagnostics.push_back({"limit_fallback_count", static_cast<double>(ls.fallback_count)});
      rep.diagnostics.push_back({"limit_corrector_pass", ls.corrector_pass ? 1.0 : 0.0});
      limit_ok = true;
    } catch (const std::exception& e) {
      rep.failed_stages.push_back(std::string("limit-system: ") + e.what());
    }

  bool all_exact = true;
  if (approx_ok && limit_ok) try {
      const int members = ls.x.reps();
      std::vector<CltQuantity> qs;
      std::vector<double> times;
      for (double t : probes) {
        int node = grid.node_of(t);
        for (int k = 0; k < d; ++k) {
          CltQuantity q;
          q.name = "x" + std::to_string(k) + "(t=" + fmt(t) + ")";
          for (int r = 0; r < R; ++r) q.approx.push_back(sqrt_n * (sde.paths.value(r, node, k) - xl.value(r, node, k)));
          for (int m = 0; m < members; ++m) q.limit.push_back(ls.xbar_at(m, node, k));
          qs.push_back(std::move(q));
          times.push_back(t);
        }
        if (backward) {
          CltQuantity q;
          q.name = "y(t=" + fmt(t) + ")";
          for (int r = 0; r < R; ++r) q.approx.push_back(sqrt_n * (yn.y_at(r, node) - lim.y_at(r, node)));
          for (int m = 0; m < members; ++m) q.limit.push_back(ls.ybar_at(m, node));
          qs.push_back(std::move(q));
          times.push_back(t);
        }
      }
      if (backward) {
        const std::vector<std::pair<std::string, std::function<double(double)>>> phis = {
            {"1", [](double) { return 1.0; }}, {"t", [](double t) { return t; }}};
        for (int k = 0; k < d; ++k)
          for (const auto& [label, phi] : phis) {
            CltQuantity q;
            q.name = "z" + std::to_string(k) + "(phi=" + label + ")";
            for (int r = 0; r < R; ++r)
              q.approx.push_back(sqrt_n * (z_functional(yn, r, k, phi) - z_functional(lim, r, k, phi)));
            for (int m = 0; m < members; ++m) {
              double acc = 0.0;
              for (int i = 0; i < grid.steps; ++i) acc += phi(grid.t(i)) * ls.zbar_at(m, i, k);
              q.limit.push_back(grid.h() * acc);
            }
            qs.push_back(std::move(q));
            times.push_back(std::numeric_limits<double>::quiet_NaN());
          }
      }
      CltReport cr = clt_compare(qs);
      for (std::size_t i = 0; i < cr.rows.size(); ++i) {
        CltRowResult rr{cr.rows[i], times[i], row_status(qs[i], cr.rows[i])};
        all_exact &= rr.status == "exact";
        std::string detail = "variance ratio " + fmt(rr.row.variance_ratio) + ", KS p " + fmt(rr.row.ks.p_value);
        rep.verdicts.push_back({"clt." + rr.row.name, rr.status, detail});
        rep.clt.push_back(std::move(rr));
      }
      for (int r = 0; r < R; ++r)
        for (double t : probes) {
          int node = grid.node_of(t);
          for (int k = 0; k < d; ++k)
            rep.fluctuations.push_back({r, t, k, sqrt_n * (sde.paths.value(r, node, k) - xl.value(r, node, k))});
          if (backward) rep.fluctuations.push_back({r, t, d, sqrt_n * (yn.y_at(r, node) - lim.y_at(r, node))});
        }
    } catch (const std::exception& e) {
      rep.failed_stages.push_back(std::string("comparison: ") + e.what());
    }

  // Field covariance: theoretical over an independent law cloud vs the empirical fields of the run.
  bool cov_zero = true;
  if (approx_ok) try {
      FieldLattice lat = s.lattice ? *s.lattice : default_lattice(*model, grid);
      const BsdeSolution* field_limit = (lat.blocks[3] && backward) ? &lim : nullptr;
      if (lat.blocks[3] && !field_limit) throw std::invalid_argument("driver block needs the backward stage");
      LawFlow theo_law = closed ? LawFlow::closed_form(*model, grid, s.cloud, derive_key(root, Role::law, 2)) : init;
      CovarianceMatrix theo = theoretical_covariance(*model, theo_law, lat, field_limit);
      LawFlow centering =
          closed ? theo_law : solve_limit_forward(*model, grid, s.center_cloud, derive_key(root, Role::center, 0));
      CovarianceMatrix emp = sample_covariance(empirical_fields(*model, sde, centering, lat, field_limit));
      emp.index = theo.index;
      double jitter = 0.0;
      jittered_cholesky(theo.value, &jitter);
      rep.diagnostics.push_back({"field_jitter", jitter});
      rep.covariance_checks = compare_covariance(theo, emp, kCovarianceSe);
      cov_zero = theo.value.cwiseAbs().maxCoeff() <= kExactTolerance && emp.value.cwiseAbs().maxCoeff() <= kExactTolerance;
      bool pass = std::all_of(rep.covariance_checks.begin(), rep.covariance_checks.end(),
                              [](const CovarianceCheck& c) { return c.pass; });
      double worst = 0.0;
      for (const auto& c : rep.covariance_checks) worst = std::max(worst, std::fabs(c.z));
      rep.verdicts.push_back({"covariance.fields", cov_zero ? "exact" : (pass ? "pass" : "fail"),
                              "max |z| " + fmt(worst) + " over " + std::to_string(rep.covariance_checks.size()) +
                                  " entries, tolerance " + fmt(kCovarianceSe)});
      rep.covariance = std::move(theo);
    } catch (const std::exception& e) {
      rep.failed_stages.push_back(std::string("covariance: ") + e.what());
    }

  if (!rep.failed_stages.empty()) rep.overall = "fail";
  else if (!model->partner.any()) rep.overall = all_exact && cov_zero ? "degenerate-pass" : "fail";
  else rep.overall = overall_of(rep.verdicts);
  return rep;
}

namespace {

ordered_json num(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

ordered_json summary_json(const Summary& s, const VarianceEstimate& v) {
  return {{"mean", num(s.mean)}, {"mean_stderr", num(s.se)}, {"variance", num(v.value)}, {"variance_stderr", num(v.se)},
          {"samples", s.n}};
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

}  // namespace

std::string report_json(const StudyReport& r, const std::string& timestamp) {
  ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["generator"] = std::string("mfbsde ") + kVersion;
  j["timestamp"] = timestamp;
  j["study"] = r.study;
  j["model"] = r.model;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["config"] = r.config.empty() ? ordered_json(nullptr) : ordered_json::parse(r.config);
  j["reference"] = r.reference;

  ordered_json errors = ordered_json::array();
  for (const auto& e : r.errors)
    errors.push_back({{"n", e.n}, {"metric", e.metric}, {"value", num(e.value)}, {"stderr", num(e.se)}});
  j["errors"] = errors;

  ordered_json slopes = ordered_json::array();
  for (const auto& s : r.slopes)
    slopes.push_back({{"metric", s.metric},
                      {"slope", num(s.fit.slope)},
                      {"stderr", num(s.fit.se)},
                      {"ci", {num(s.fit.ci_low), num(s.fit.ci_high)}},
                      {"points", s.fit.points},
                      {"band", {s.band_low, s.band_high}},
                      {"verdict", s.verdict}});
  j["slopes"] = slopes;

  ordered_json clt = ordered_json::array();
  for (const auto& c : r.clt)
    clt.push_back({{"name", c.row.name},
                   {"time", num(c.time)},
                   {"approx", summary_json(c.row.approx, c.row.approx_var)},
                   {"limit", summary_json(c.row.limit, c.row.limit_var)},
                   {"variance_ratio", num(c.row.variance_ratio)},
                   {"ks", {{"statistic", num(c.row.ks.statistic)}, {"p_value", num(c.row.ks.p_value)}}},
                   {"status", c.status}});
  j["clt"] = clt;

  ordered_json cov = ordered_json::array();
  for (const auto& c : r.covariance_checks)
    cov.push_back({{"i", c.i},
                   {"j", c.j},
                   {"block", c.block},
                   {"theoretical", num(c.theoretical)},
                   {"theoretical_stderr", num(c.theoretical_se)},
                   {"empirical", num(c.empirical)},
                   {"empirical_stderr", num(c.empirical_se)},
                   {"z", num(c.z)},
                   {"pass", c.pass}});
  j["covariance"] = cov;

  ordered_json verdicts = ordered_json::array();
  for (const auto& v : r.verdicts) verdicts.push_back({{"id", v.id}, {"status", v.status}, {"detail", v.detail}});
  j["verdicts"] = verdicts;

  ordered_json diag(ordered_json::value_t::object);
  for (const auto& d : r.diagnostics) diag[d.name] = num(d.value);
  j["diagnostics"] = diag;
  j["failed_stages"] = r.failed_stages;
  j["overall"] = r.overall;
  return j.dump(2) + "\n";
}

void emit_report(const StudyReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());

  write_file(dir / "report.json", report_json(r, utc_now()));

  std::string csv = "N,metric,value,stderr\n";
  for (const auto& e : r.errors)
    csv += std::to_string(e.n) + "," + e.metric + "," + fmt_exact(e.value) + "," + fmt_exact(e.se) + "\n";
  write_file(dir / "errors.csv", csv);

  csv = "metric,slope,stderr,ci_low,ci_high,points,verdict\n";
  for (const auto& s : r.slopes)
    csv += s.metric + "," + fmt_exact(s.fit.slope) + "," + fmt_exact(s.fit.se) + "," + fmt_exact(s.fit.ci_low) + "," +
           fmt_exact(s.fit.ci_high) + "," + std::to_string(s.fit.points) + "," + s.verdict + "\n";
  write_file(dir / "slope.csv", csv);

  if (r.study != "clt") return;
  csv = "i,j,block,value,stderr\n";
  const auto& c = r.covariance;
  for (Eigen::Index i = 0; i < c.value.rows(); ++i)
    for (Eigen::Index j = 0; j < c.value.cols(); ++j) {
      std::string block = static_cast<Eigen::Index>(c.index.size()) == c.value.rows() ? block_tag(c.index[i], c.index[j]) : "";
      csv += std::to_string(i) + "," + std::to_string(j) + "," + block + "," + fmt_exact(c.value(i, j)) + "," +
             fmt_exact(c.se(i, j)) + "\n";
    }
  write_file(dir / "covariance.csv", csv);

  std::string fl = "rep,t,coord,value\n";
  for (const auto& f : r.fluctuations)
    fl += std::to_string(f.rep) + "," + fmt_exact(f.t) + "," + std::to_string(f.coord) + "," + fmt_exact(f.value) + "\n";
  write_file(dir / "fluctuations.csv", fl);
}

}  // namespace mfbsde
