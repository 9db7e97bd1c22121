#include "spinnoise/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "spinnoise/perturbation.hpp"

#ifndef SPINNOISE_VERSION
#define SPINNOISE_VERSION "0.0.0"
#endif

namespace spinnoise {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs job(i) for i in [0, n) on up to `threads` workers. The first
// exception (lowest index) is rethrown after the join.
template <class Job>
void parallel_for(int n, int threads, Job&& job) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  int failed_index = n;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (i < failed_index) {
            failed_index = i;
            failure = std::current_exception();
          }
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Segment-weighted mean in index order, equal to one Welch average over
// all segments.
Spectrum combine(const std::vector<Spectrum>& per) {
  Spectrum out = per.at(0);
  std::size_t n = 0;
  for (auto& v : out.psd) v = 0.0;
  for (const auto& s : per) {
    const double w = static_cast<double>(s.n_averages);
    for (std::size_t k = 0; k < out.psd.size(); ++k) out.psd[k] += w * s.psd[k];
    n += s.n_averages;
  }
  for (auto& v : out.psd) v /= static_cast<double>(n);
  out.n_averages = n;
  return out;
}

FitOptions fit_options(const ExperimentConfig& cfg, std::uint64_t seed) {
  FitOptions fo;
  fo.f_min_hz = cfg.f_min_hz;
  fo.f_max_hz = cfg.f_max_hz;
  fo.seed = seed;
  return fo;
}

void peak_scalars(PointResult& pr, const FitResult& fit, const Spectrum& s) {
  if (!fit.peaks.empty()) {
    pr.scalars["hwhm_hz"] = fit.peaks[0].hwhm_hz();
    pr.scalars["hwhm_err_hz"] = fit.peaks[0].gamma_err / kTwoPi;
    pr.scalars["center_hz"] = fit.peaks[0].center_hz();
  }
  pr.scalars["reduced_chi2"] = fit.reduced_chi2;
  if (fit.lf.present) {
    pr.scalars["lf_fraction"] = lf_fraction(s, fit);
    if (fit.lf.sinc) {
      pr.scalars["lf_tau_c_s"] = fit.lf.tau_c;
      if (fit.lf.tau_c > 0) pr.scalars["lf_first_zero_hz"] = 1.0 / fit.lf.tau_c;
    } else {
      pr.scalars["lf_gamma_c_hz"] = fit.lf.gamma_c / kTwoPi;
    }
  }
}

void run_point(const ExperimentConfig& cfg, const ExperimentConfig& pc, PointResult& pr, int threads) {
  const SimulationParams& p = pc.params;
  const std::uint64_t fit_seed = derive_seed(pr.seed, 0xf17);
  switch (cfg.recipe) {
    case Recipe::static_distance_sweep:
    case Recipe::angle_sweep: {
      if (!(pc.r_m > 0)) throw ConfigError("r_m: must be > 0 for a static geometry");
      TraceOptions opt;
      opt.mode = TraceMode::static_geometry;
      opt.conformation = Conformation{pc.r_m, pc.theta_rad, pc.phi_rad};
      auto es = ensemble_spectrum(p, opt, pc.ensemble, pr.seed, pc.segment_len, threads);
      pr.spectrum = std::move(es.spectrum);
      pr.hygiene = es.hygiene;
      pr.fit = fit_spectrum(pr.spectrum, pc.fit_model, fit_options(pc, fit_seed));
      peak_scalars(pr, pr.fit, pr.spectrum);
      const auto split = extract_splitting(pr.spectrum, fit_options(pc, fit_seed));
      pr.splitting_fit = split.fit;
      pr.scalars["splitting_hz"] = split.resolved ? split.splitting / kTwoPi : 0.0;
      pr.scalars["resolved"] = split.resolved ? 1.0 : 0.0;
      if (split.fit.peaks.size() == 2) {
        pr.scalars["doublet_hwhm_max_hz"] =
            std::max(split.fit.peaks[0].hwhm_hz(), split.fit.peaks[1].hwhm_hz());
      }
      const auto lines = ground_manifold_frequencies(p, *opt.conformation);
      pr.scalars["exact_splitting_hz"] = lines.splitting() / kTwoPi;
      break;
    }
    case Recipe::density_sweep:
    case Recipe::power_sweep:
    case Recipe::lf_tail:
    case Recipe::trace_dump: {
      TraceOptions opt;
      opt.mode = TraceMode::dynamic;
      opt.sampling.isotropic = pc.isotropic_angles;
      if (cfg.recipe == Recipe::trace_dump) {
        pr.traces.resize(pc.ensemble);
        BlockLiouvillian model(p);
        parallel_for(pc.ensemble, threads, [&](int i) {
          pr.traces[i] = simulate_trace(p, model, opt, derive_seed(pr.seed, i));
        });
        WelchAccumulator acc(pc.segment_len, p.dt);
        for (const auto& t : pr.traces) {
          acc.add(t.samples);
          pr.hygiene.merge(t.hygiene);
        }
        pr.spectrum = acc.result();
      } else {
        auto es = ensemble_spectrum(p, opt, pc.ensemble, pr.seed, pc.segment_len, threads);
        pr.spectrum = std::move(es.spectrum);
        pr.hygiene = es.hygiene;
      }
      pr.fit = fit_spectrum(pr.spectrum, pc.fit_model, fit_options(pc, fit_seed));
      peak_scalars(pr, pr.fit, pr.spectrum);
      if (cfg.recipe == Recipe::lf_tail) {
        // Experiment-style Lorentzian tail alongside the sinc^2 one.
        const FitModel other = pc.fit_model == FitModel::sinc_lf ? FitModel::peak_plus_lf : FitModel::sinc_lf;
        const auto alt = fit_spectrum(pr.spectrum, other, fit_options(pc, fit_seed));
        pr.splitting_fit = alt;
        const std::string tag = other == FitModel::sinc_lf ? "sinc" : "lorentzian";
        pr.scalars["lf_fraction_" + tag] = lf_fraction(pr.spectrum, alt);
      }
      break;
    }
    case Recipe::ou_check: {
      const double gamma = kTwoPi * pc.ou_gamma_hz;
      const double duration = pc.ou_duration_s > 0 ? pc.ou_duration_s : p.dt * pc.segment_len * 200.0 / pc.ensemble;
      std::vector<Spectrum> per(pc.ensemble);
      parallel_for(pc.ensemble, threads, [&](int i) {
        const auto tr = ou_reference_trace(gamma, p.larmor, 1.0, p.dt, duration, derive_seed(pr.seed, i));
        per[i] = psd(tr, pc.segment_len);
      });
      pr.spectrum = combine(per);
      pr.fit = fit_spectrum(pr.spectrum, FitModel::single_peak, fit_options(pc, fit_seed));
      peak_scalars(pr, pr.fit, pr.spectrum);
      if (!pr.fit.peaks.empty()) {
        pr.scalars["gamma_rel_error"] = pr.fit.peaks[0].gamma / gamma - 1.0;
        pr.scalars["larmor_rel_error"] = pr.fit.peaks[0].omega_l / p.larmor - 1.0;
      }
      break;
    }
    case Recipe::perturbation_check: {
      Conformation c{pc.r_m, pc.theta_rad, pc.phi_rad};
      if (cfg.sweep_key == "density_per_cm3" || !(c.r > 0)) c.r = mean_nn_distance(p.density_per_cm3);
      const auto t = coupling_tensors(c, p.k0, p.gamma0);
      const auto lines = ground_manifold_frequencies(p, t);
      pr.scalars["r_m"] = c.r;
      pr.scalars["xi"] = c.xi(p.k0);
      pr.scalars["exact_splitting_hz"] = lines.splitting() / kTwoPi;
      pr.scalars["gap_warning"] = lines.gap_warning ? 1.0 : 0.0;
      if (c.theta == 0.0 && c.phi == 0.0) {
        const auto cg = dd_shifts(t, cg_alpha(p), CgMode::with_cg, p.larmor);
        const auto printed = dd_shifts(t, alpha(p.rabi, p.detuning), CgMode::as_printed, p.larmor);
        pr.scalars["with_cg_splitting_hz"] = 2.0 * cg.delta / kTwoPi;
        pr.scalars["as_printed_splitting_hz"] = 2.0 * printed.delta / kTwoPi;
      }
      break;
    }
  }
}

}  // namespace

std::string code_version() { return std::string("spinnoise ") + SPINNOISE_VERSION; }

int default_thread_count() {
  if (const char* env = std::getenv("SPINNOISE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

EnsembleSpectrum ensemble_spectrum(const SimulationParams& p, const TraceOptions& opt, int n_traces,
                                   std::uint64_t seed, int segment_len, int threads) {
  if (n_traces < 1) throw std::invalid_argument("ensemble_spectrum: n_traces must be >= 1");
  if (threads <= 0) threads = default_thread_count();
  const BlockLiouvillian model(p);
  std::vector<Spectrum> per(n_traces);
  std::vector<HygieneReport> hyg(n_traces);
  parallel_for(n_traces, threads, [&](int i) {
    const auto tr = simulate_trace(p, model, opt, derive_seed(seed, static_cast<std::uint64_t>(i)));
    per[i] = psd(tr, static_cast<std::size_t>(segment_len));
    hyg[i] = tr.hygiene;
  });
  EnsembleSpectrum out;
  out.spectrum = combine(per);
  for (const auto& h : hyg) out.hygiene.merge(h);
  return out;
}

ResultSet run_experiment(const ExperimentConfig& cfg, int threads, bool write_partial) {
  cfg.validate();
  if (threads <= 0) threads = default_thread_count();
  const auto t0 = Clock::now();
  ResultSet rs;
  rs.recipe = to_string(cfg.recipe);
  rs.sweep_key = cfg.sweep_key;
  rs.config_hash = cfg.hash();
  rs.code_version = code_version();
  rs.master_seed = cfg.master_seed;
  {
    std::istringstream in(cfg.canonical());
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      rs.config[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  std::vector<double> values = cfg.sweep_values;
  const bool sweep = !values.empty() && !cfg.sweep_key.empty() && cfg.recipe != Recipe::trace_dump &&
                     cfg.recipe != Recipe::ou_check;
  if (!sweep) values = {0.0};

  for (std::size_t i = 0; i < values.size(); ++i) {
    ExperimentConfig pc = cfg;
    if (sweep) apply_override(pc, cfg.sweep_key + "=" + fmt(values[i]));
    PointResult pr;
    pr.sweep_value = values[i];
    pr.seed = derive_seed(cfg.master_seed, i);
    const auto tp = Clock::now();
    try {
      pc.validate();
      run_point(cfg, pc, pr, threads);
    } catch (const std::exception& e) {
      pr.error = e.what();
      pr.seconds = seconds_since(tp);
      rs.points.push_back(std::move(pr));
      rs.total_seconds = seconds_since(t0);
      if (write_partial) write_results(rs, cfg.output_dir);
      throw NumericalError("sweep point " + std::to_string(i) + " (" + cfg.sweep_key + "=" + fmt(values[i]) +
                           "): " + e.what());
    }
    pr.seconds = seconds_since(tp);
    rs.points.push_back(std::move(pr));
  }
  rs.total_seconds = seconds_since(t0);
  return rs;
}

}  // namespace spinnoise
