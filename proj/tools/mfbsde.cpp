#include <CLI11.hpp>
#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "mfbsde/harness.hpp"
#include "mfbsde/parallel.hpp"

using namespace mfbsde;
using json = nlohmann::json;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read " + path});
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Loads an experiment config; a bare model block ({"name": ...}) is accepted too.
// --seed overrides study.seed.
ExperimentConfig load(const std::string& path, const Globals& g,
                      const std::function<void(json&)>& patch = nullptr) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError({path + ": not valid JSON: " + e.what()});
  }
  if (doc.is_object() && doc.contains("name")) doc = json{{"model", doc}};
  if (doc.is_object()) {
    if (g.seed) doc["study"]["seed"] = *g.seed;
    if (patch) patch(doc);
  }
  return parse_config(doc.dump());
}

class CsvOut {
 public:
  explicit CsvOut(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_.open(path);
    if (!file_) throw std::runtime_error("cannot open " + path + " for writing");
  }
  std::ostream& os() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

LawFlow initial_law(const ModelSpec& model, const TimeGrid& grid, const StudyConfig& s, const StreamKey& root) {
  if (model.closed_form) return LawFlow::closed_form(model, grid, s.env_cloud, derive_key(root, Role::environment, 0));
  return solve_limit_forward(model, grid, s.cloud, derive_key(root, Role::law, 0));
}

SdeNResult simulate(const ModelSpec& model, int n, const TimeGrid& grid, const StudyConfig& s, const StreamKey& root,
                    const LawFlow& init) {
  return solve_sde_n(model, n, grid, init, picard_options(s, s.env_cloud), derive_key(root, Role::replication, 0),
                     derive_key(root, Role::environment, 0), s.reps);
}

void write_paths(std::ostream& os, const PathEnsemble& p) {
  os << "rep,t,coord,value\n";
  for (int r = 0; r < p.reps(); ++r)
    for (int i = 0; i < p.nodes(); ++i)
      for (int k = 0; k < p.dim(); ++k) os << r << ',' << num(p.grid().t(i)) << ',' << k << ',' << num(p.value(r, i, k)) << '\n';
}

// Reads rep,t,coord,value rows and recovers the increments by inverting the Euler step
// of the limit equation under `law`.
PathEnsemble read_paths(const std::string& path, const ModelSpec& model, const LawFlow& law, const TimeGrid& grid) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != "rep,t,coord,value") throw std::runtime_error(path + ": expected header rep,t,coord,value");
  const int d = model.dim;
  std::map<int, std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int rep, coord;
    double t, value;
    if (std::sscanf(line.c_str(), "%d,%lf,%d,%lf", &rep, &t, &coord, &value) != 4 || rep < 0 || coord < 0 ||
        coord >= d)
      throw std::runtime_error(path + ": malformed row '" + line + "'");
    auto& v = rows[rep];
    v.resize(static_cast<std::size_t>(grid.nodes()) * d, std::numeric_limits<double>::quiet_NaN());
    v[static_cast<std::size_t>(grid.node_of(t)) * d + coord] = value;
  }
  if (rows.empty() || rows.rbegin()->first != static_cast<int>(rows.size()) - 1)
    throw std::runtime_error(path + ": replications must be numbered 0..R-1");
  PathEnsemble out(grid, d, static_cast<int>(rows.size()), true);
  Vec b(d), sig(static_cast<std::size_t>(d) * d), tmp_b(d), tmp_s(sig.size());
  std::vector<double> dw(static_cast<std::size_t>(grid.steps) * d);
  for (auto& [r, v] : rows) {
    for (double x : v)
      if (std::isnan(x)) throw std::runtime_error(path + ": replication " + std::to_string(r) + " is incomplete");
    for (int i = 0; i < grid.steps; ++i) {
      CSpan x(v.data() + static_cast<std::size_t>(i) * d, d);
      std::fill(b.begin(), b.end(), 0.0);
      std::fill(sig.begin(), sig.end(), 0.0);
      law.for_each(i, [&](CSpan xp, double w) {
        model.drift(x, xp, tmp_b);
        model.diffusion(x, xp, tmp_s);
        for (int k = 0; k < d; ++k) b[k] += w * tmp_b[k];
        for (std::size_t k = 0; k < sig.size(); ++k) sig[k] += w * tmp_s[k];
      });
      double total = 0.0;
      law.for_each(i, [&](CSpan, double w) { total += w; });
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> S(sig.data(), d, d);
      Eigen::VectorXd rhs(d);
      for (int k = 0; k < d; ++k)
        rhs[k] = v[static_cast<std::size_t>(i + 1) * d + k] - x[k] - b[k] / total * grid.h();
      Eigen::VectorXd inc = (S / total).fullPivLu().solve(rhs);
      for (int k = 0; k < d; ++k) dw[static_cast<std::size_t>(i) * d + k] = inc[k];
    }
    out.set_path(r, v);
    out.set_increments(r, dw);
  }
  return out;
}

void write_bsde(std::ostream& os, const BsdeSolution& sol) {
  os << "rep,t,y";
  for (int k = 0; k < sol.dim; ++k) os << ",z_" << k + 1;
  os << '\n';
  const int steps = sol.grid.steps;
  for (int r = 0; r < sol.reps; ++r)
    for (int i = 0; i <= steps; ++i) {
      os << r << ',' << num(sol.grid.t(i)) << ',' << num(sol.y_at(r, i));
      // Z lives on steps; the terminal node repeats the last step.
      int step = std::min(i, steps - 1);
      for (int k = 0; k < sol.dim; ++k) os << ',' << num(sol.z_at(r, step, k));
      os << '\n';
    }
}

void print_report(const StudyReport& rep, const std::string& dir) {
  for (const auto& v : rep.verdicts) std::printf("%-28s %-8s %s\n", v.id.c_str(), v.status.c_str(), v.detail.c_str());
  for (const auto& f : rep.failed_stages) std::printf("failed stage: %s\n", f.c_str());
  std::printf("overall: %s (report in %s)\n", rep.overall.c_str(), dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field FBSDE particle approximations: convergence and fluctuation studies"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed (overrides study.seed)");
  app.add_option("--threads", g.threads, "Worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);
  app.add_option("--out", g.out, "Output CSV file (forward, backward) or directory (studies)");

  std::string model_cfg, config, paths = "fresh", n_arg, lattice;
  int n = 0, steps = 0, reps = 0, degree = -1;

  auto* fwd = app.add_subcommand("forward", "Simulate X^N replications, CSV rep,t,coord,value");
  fwd->add_option("--model", model_cfg, "Model or experiment config (JSON)")->required();
  fwd->add_option("--n", n, "Environment size N")->required()->check(CLI::PositiveNumber);
  fwd->add_option("--steps", steps, "Time steps")->check(CLI::PositiveNumber);
  fwd->add_option("--reps", reps, "Replications")->check(CLI::PositiveNumber);

  auto* bwd = app.add_subcommand("backward", "Solve Y^N (or the limit Y), CSV rep,t,y,z_1..z_d");
  bwd->add_option("--model", model_cfg, "Model or experiment config (JSON)")->required();
  bwd->add_option("--n", n_arg, "Environment size N or 'limit'")->required();
  bwd->add_option("--paths", paths, "Forward CSV treated as limit paths (needs --n limit), or 'fresh'");
  bwd->add_option("--degree", degree, "Regression degree")->check(CLI::NonNegativeNumber);
  bwd->add_option("--steps", steps, "Time steps")->check(CLI::PositiveNumber);
  bwd->add_option("--reps", reps, "Replications")->check(CLI::PositiveNumber);

  auto* clt = app.add_subcommand("clt", "Fluctuation study: report.json, covariance.csv, fluctuations.csv");
  auto* clt_config = clt->add_option("--config", config, "Experiment config (JSON)");
  auto* clt_model = clt->add_option("--model", model_cfg, "Model or experiment config (JSON)");
  clt_config->excludes(clt_model);
  clt->add_option("--n", n, "Environment size N")->check(CLI::PositiveNumber);
  clt->add_option("--reps", reps, "Replications")->check(CLI::PositiveNumber);
  clt->add_option("--lattice", lattice, "Field lattice (JSON)");

  auto* conv = app.add_subcommand("convergence", "Error-vs-N study: report.json, errors.csv, slope.csv");
  conv->add_option("--config", config, "Experiment config (JSON)")->required();

  auto* val = app.add_subcommand("validate", "Check a config and print its hash");
  val->add_option("--config", config, "Experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);
  if (g.threads > 0) set_default_threads(g.threads);

  try {
    if (*val) {
      ExperimentConfig cfg = load(config, g);
      std::printf("valid %s (model %s, seed %llu)\n", cfg.hash.c_str(), cfg.model.name.c_str(),
                  static_cast<unsigned long long>(cfg.study.seed));
      return 0;
    }

    if (*conv || *clt) {
      auto patch = [&](json& doc) {
        if (n > 0) doc["study"]["n"] = n;
        if (reps > 0) doc["study"]["reps"] = reps;
        if (!lattice.empty()) doc["study"]["lattice"] = json::parse(read_text(lattice));
      };
      if (*clt && config.empty() && model_cfg.empty()) throw ConfigError({"clt needs --config or --model"});
      ExperimentConfig cfg = load(config.empty() ? model_cfg : config, g, patch);
      std::string dir = g.out.empty() ? cfg.out_dir : g.out;
      StudyReport rep = *conv ? run_convergence_study(cfg) : run_clt_study(cfg);
      emit_report(rep, dir);
      print_report(rep, dir);
      return 0;
    }

    auto patch = [&](json& doc) {
      if (steps > 0) doc["grid"]["steps"] = steps;
      if (reps > 0) doc["study"]["reps"] = reps;
      if (degree >= 0) doc["study"]["degree"] = degree;
    };
    ExperimentConfig cfg = load(model_cfg, g, patch);
    ModelPtr model = build_model(cfg);
    const TimeGrid grid = build_grid(cfg);
    const StudyConfig& s = cfg.study;
    const StreamKey root(s.seed);
    CsvOut out(g.out);

    if (*fwd) {
      LawFlow init = initial_law(*model, grid, s, root);
      write_paths(out.os(), simulate(*model, n, grid, s, root, init).paths);
      return 0;
    }

    const bool limit = n_arg == "limit";
    int nn = 0;
    if (!limit) {
      try {
        nn = std::stoi(n_arg);
      } catch (const std::exception&) {
        nn = 0;
      }
      if (nn < 1) throw ConfigError({"--n must be a positive integer or 'limit'"});
    }
    if (paths != "fresh" && !limit) throw ConfigError({"--paths <file> requires --n limit"});
    LawFlow init = initial_law(*model, grid, s, root);
    const RegressionOptions ro = regression_options(s);
    if (paths != "fresh") {
      PathEnsemble xp = read_paths(paths, *model, init, grid);
      write_bsde(out.os(), solve_mfbsde(*model, init, xp, ro));
      return 0;
    }
    if (limit) {
      PathEnsemble driving(grid, model->dim, s.reps, true);
      driving.key_root = derive_key(root, Role::replication, 0);
      for (int r = 0; r < s.reps; ++r) driving.set_increments(r, brownian_increments(driving.key_of(r), grid, model->dim));
      write_bsde(out.os(), solve_mfbsde(*model, init, limit_paths(*model, init, driving), ro));
      return 0;
    }
    SdeNResult sde = simulate(*model, nn, grid, s, root, init);
    PathEnsemble xl = limit_paths(*model, init, sde.paths);
    BsdeSolution lim = solve_mfbsde(*model, init, xl, ro);
    write_bsde(out.os(), solve_bsde_n(*model, nn, sde, LimitInputs{&init, &xl, &lim}, ro,
                                      derive_key(root, Role::inner, 0)));
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error:\n");
    for (const auto& v : e.violations()) std::fprintf(stderr, "  %s\n", v.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
