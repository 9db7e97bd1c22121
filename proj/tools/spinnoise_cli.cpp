// spinnoise run|validate|report
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "spinnoise/harness.hpp"

using namespace spinnoise;

namespace {

constexpr int kOk = 0, kConfigError = 1, kRuntimeError = 2;

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_config(c.config_file);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.master_seed = *c.seed;
  if (c.out) cfg.output_dir = *c.out;
  cfg.validate();
  return cfg;
}

void print_summary(const ResultSet& rs) {
  std::printf("recipe %s  hash %s  seed %llu  %.1f s\n", rs.recipe.c_str(), rs.config_hash.c_str(),
              static_cast<unsigned long long>(rs.master_seed), rs.total_seconds);
  for (const auto& p : rs.points) {
    std::printf("  %s=%-12g", rs.sweep_key.empty() ? "point" : rs.sweep_key.c_str(), p.sweep_value);
    for (const auto& [k, v] : p.scalars) std::printf(" %s=%.6g", k.c_str(), v);
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-atom spin-noise simulator"};
  app.require_subcommand(1);
  Common common;
  int threads = 0;
  std::string report_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", common.config_file, "config file (key=value)")->required()->check(CLI::ExistingFile);
    sub->add_option("--override", common.overrides, "key=value, repeatable")->take_all();
    sub->add_option("--seed", common.seed, "master seed");
    sub->add_option("--out", common.out, "output directory");
  };
  auto* run = app.add_subcommand("run", "run an experiment recipe");
  add_common(run);
  run->add_option("--threads", threads, "worker threads (default: SPINNOISE_THREADS or all cores)");
  auto* validate = app.add_subcommand("validate", "check a config without running it");
  add_common(validate);
  auto* report = app.add_subcommand("report", "aggregate a stored result set into plot-ready CSV");
  report->add_option("resultset", report_dir, "result directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kOk : kConfigError;
  }

  try {
    if (*validate) {
      const auto cfg = load(common);
      std::printf("ok %s %s\n", to_string(cfg.recipe).c_str(), cfg.hash().c_str());
      return kOk;
    }
    if (*run) {
      const auto cfg = load(common);
      const auto rs = run_experiment(cfg, threads, true);
      write_results(rs, cfg.output_dir);
      print_summary(rs);
      std::printf("wrote %s\n", cfg.output_dir.c_str());
      return kOk;
    }
    if (*report) {
      for (const auto& p : write_report(report_dir)) std::printf("%s\n", p.string().c_str());
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kConfigError;
}
