#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spinnoise/dynamics.hpp"
#include "spinnoise/qcore.hpp"
#include "spinnoise/spectral.hpp"

namespace spinnoise {

enum class Recipe {
  static_distance_sweep,
  angle_sweep,
  density_sweep,
  power_sweep,
  trace_dump,
  lf_tail,
  ou_check,
  perturbation_check,
};

std::string to_string(Recipe r);
Recipe recipe_from_string(const std::string& s);

struct ExperimentConfig {
  Recipe recipe = Recipe::density_sweep;
  SimulationParams params;
  std::string sweep_key;             // config key the sweep values override
  std::vector<double> sweep_values;  // in the units of sweep_key
  int ensemble = 1;
  std::uint64_t master_seed = 1;
  std::string output_dir = "results";

  // static geometry (static-distance-sweep, angle-sweep)
  double r_m = 0.0;
  double theta_rad = 0.0;
  double phi_rad = 0.0;
  bool isotropic_angles = false;

  // spectral estimation
  int segment_len = 2000;
  FitModel fit_model = FitModel::single_peak;
  double f_min_hz = 0.0;
  double f_max_hz = 25e6;

  // ou-check
  double ou_gamma_hz = 270e3;
  double ou_duration_s = 0.0;  // 0: segment_len * dt * 200

  // Canonical "key=value" lines in schema order. Independent of the order
  // in which the keys were given.
  std::string canonical() const;
  // FNV-1a 64 of canonical() without output_dir, hex.
  std::string hash() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Parse flat key=value text ('#' comments). Unknown keys, bad values and
// missing required fields throw ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Apply one "key=value" override on top of a parsed config.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
// Keys accepted by parse_config.
std::vector<std::string> config_keys();

struct PointResult {
  double sweep_value = 0.0;
  std::uint64_t seed = 0;
  Spectrum spectrum;  // empty for perturbation-check
  FitResult fit;
  std::optional<FitResult> splitting_fit;  // two-peak fit when attempted
  std::map<std::string, double> scalars;   // hwhm_hz, splitting_hz, lf_fraction, ...
  HygieneReport hygiene;
  double seconds = 0.0;
  std::string error;  // non-empty if the point failed
  std::vector<TimeTrace> traces;  // trace-dump only
};

struct ResultSet {
  std::string recipe;
  std::string sweep_key;
  std::string config_hash;
  std::string code_version;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::string> config;  // canonical key/value pairs
  std::vector<PointResult> points;
  double total_seconds = 0.0;
};

std::string code_version();

// Default worker count: SPINNOISE_THREADS if set, else hardware concurrency.
int default_thread_count();

// Runs the recipe. On a failing sweep point the partial ResultSet is
// written to cfg.output_dir (if write_partial) and NumericalError is thrown
// naming the point.
ResultSet run_experiment(const ExperimentConfig& cfg, int threads = 0, bool write_partial = false);

void write_results(const ResultSet& rs, const std::filesystem::path& dir);
ResultSet read_results(const std::filesystem::path& dir);

// Plot-ready aggregation over a stored ResultSet. Writes report.csv (all
// scalars) and one two-column CSV per scalar; returns written paths.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir);

// Spectrum CSV with '#' header lines (resolution_hz, n_averages, seed).
void write_spectrum_csv(const Spectrum& s, std::uint64_t seed, const std::filesystem::path& path);
Spectrum read_spectrum_csv(const std::filesystem::path& path, std::uint64_t* seed = nullptr);
void write_trace_csv(const TimeTrace& t, const std::filesystem::path& path,
                     const std::filesystem::path& events_path);

// Ensemble-averaged PSD of n traces (index order, thread-count independent).
struct EnsembleSpectrum {
  Spectrum spectrum;
  HygieneReport hygiene;
};
EnsembleSpectrum ensemble_spectrum(const SimulationParams& p, const TraceOptions& opt, int n_traces,
                                   std::uint64_t seed, int segment_len, int threads = 0);

}  // namespace spinnoise
