#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfbsde/fluctuation.hpp"

namespace mfbsde {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

struct ModelConfig {
  std::string name;
  CatalogParams params;
};

struct StudyConfig {
  std::vector<int> n_list;  // convergence
  int n = 256;              // clt
  int reps = 2000;
  int cloud = 4096;         // limit law cloud
  int env_cloud = 4096;     // Picard cloud of the N-particle law
  int center_cloud = 8192;  // centering cloud for empirical fields (cloud laws only)
  int picard_iters = 5;
  double picard_tol = 1e-3;
  int degree = 2;
  int inner_iters = 2;
  int inner_paths = 64;
  int mean_field_cap = 1024;
  double z_bound = 5.0;
  int y_law_iters = 3;
  int members = 0;  // limit-system ensemble, 0 = reps
  int field_cloud = 1024;
  int limit_inner_paths = 64;
  bool backward = true;
  std::string reference = "auto";  // oracle, self or auto
  std::optional<FieldLattice> lattice;
  std::vector<double> probe_times;  // clt, default {T/2, T}
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  ModelConfig model;
  int steps = 64;
  StudyConfig study;
  std::string out_dir = "out";
  std::string hash;  // of the normalized document
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

// Strict JSON config; throws ConfigError listing every violation.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& file);
FieldLattice parse_lattice(const std::string& text);
// Canonical JSON of the resolved config (defaults filled); hashed into ExperimentConfig::hash.
std::string normalized_config(const ExperimentConfig& cfg);

ModelPtr build_model(const ExperimentConfig& cfg);
TimeGrid build_grid(const ExperimentConfig& cfg);
RegressionOptions regression_options(const StudyConfig& s);
PicardOptions picard_options(const StudyConfig& s, int cloud);

struct ErrorPoint {
  int n = 0;
  std::string metric;  // x, y, z
  double value = 0.0;
  double se = 0.0;
};

struct SlopeResult {
  std::string metric;
  SlopeFit fit;
  double band_low = 0.0;
  double band_high = 0.0;
  std::string verdict;  // pass, fail, exact, degraded
};

struct CltRowResult {
  CltRow row;
  double time = 0.0;  // probe time, NaN for Z functionals
  std::string status;  // pass, fail, exact
};

struct CovarianceCheck {
  int i = 0, j = 0;
  std::string block;
  double theoretical = 0.0, theoretical_se = 0.0;
  double empirical = 0.0, empirical_se = 0.0;
  double z = 0.0;  // difference in combined standard errors
  bool pass = false;
};

struct FluctuationValue {
  int rep = 0;
  double t = 0.0;
  int coord = 0;  // state coordinates, then d for Y
  double value = 0.0;
};

struct Verdict {
  std::string id;
  std::string status;
  std::string detail;
};

struct Diagnostic {
  std::string name;
  double value = 0.0;
};

struct StudyReport {
  std::string study;  // convergence, clt or empty
  std::string model;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string config;     // normalized document
  std::string reference;  // oracle or self
  std::vector<ErrorPoint> errors;
  std::vector<SlopeResult> slopes;
  std::vector<CltRowResult> clt;
  CovarianceMatrix covariance;
  std::vector<CovarianceCheck> covariance_checks;
  std::vector<FluctuationValue> fluctuations;
  std::vector<Verdict> verdicts;
  std::vector<Diagnostic> diagnostics;
  std::vector<std::string> failed_stages;
  std::string overall = "no-data";
};

// Slope bands per metric.
inline constexpr double kForwardSlopeLow = -1.25, kForwardSlopeHigh = -0.75;
inline constexpr double kBackwardSlopeLow = -1.3, kBackwardSlopeHigh = -0.7;
inline constexpr double kKsLevel = 0.01;
inline constexpr double kVarianceTolerance = 0.15;
inline constexpr double kCovarianceSe = 4.0;
inline constexpr double kExactTolerance = 1e-10;

StudyReport run_convergence_study(const ExperimentConfig& cfg);
StudyReport run_clt_study(const ExperimentConfig& cfg);

// Entrywise comparison within `tolerance` combined standard errors.
std::vector<CovarianceCheck> compare_covariance(const CovarianceMatrix& theoretical, const CovarianceMatrix& empirical,
                                                double tolerance);

std::string block_tag(const FieldIndex& a, const FieldIndex& b);

// report.json contents; the timestamp is the only field that varies between identical runs.
std::string report_json(const StudyReport& report, const std::string& timestamp);
void emit_report(const StudyReport& report, const std::filesystem::path& dir);

}  // namespace mfbsde
