#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spinnoise/dynamics.hpp"

namespace spinnoise {

enum class Window { hann, rectangular };

struct Spectrum {
  std::vector<double> freqs;  // Hz
  std::vector<double> psd;    // one-sided, units^2 / Hz
  double resolution = 0.0;    // Hz
  std::size_t n_averages = 0;
  double sample_rate = 0.0;   // Hz; 0 for an unsampled (continuous) spectrum
};

// Welch estimator accumulating segments across any number of traces.
class WelchAccumulator {
 public:
  WelchAccumulator(std::size_t segment_len, double dt, Window w = Window::hann,
                   double overlap = 0.5);
  void add(std::span<const double> x);
  Spectrum result() const;
  std::size_t segments() const { return count_; }

 private:
  std::size_t n_;
  double dt_;
  std::size_t hop_;
  std::vector<double> window_;
  double window_power_;
  std::vector<double> sum_;
  std::size_t count_ = 0;
};

Spectrum psd(std::span<const double> x, double dt, std::size_t segment_len,
             Window w = Window::hann, double overlap = 0.5);
Spectrum psd(const TimeTrace& trace, std::size_t segment_len, Window w = Window::hann,
             double overlap = 0.5);

// Single-spin lineshape; omega in rad/s.
double czz_model(double omega, double amplitude, double gamma, double omega_l);
// Zero-centred Lorentzian, A / (gamma_c^2 + omega^2).
double lorentzian_lf(double omega, double amplitude, double gamma_c);
// sigma2 * sinc^2(pi nu tau_c); nu in Hz.
double sinc2_model(double nu, double sigma2, double tau_c);

// The same lineshapes for a process sampled at fs (Hz): the sum over all
// aliases, evaluated in closed form from the sampled autocorrelation.
// fs <= 0 falls back to the continuous model.
double czz_sampled(double omega, double amplitude, double gamma, double omega_l, double fs);
double lorentzian_lf_sampled(double omega, double amplitude, double gamma_c, double fs);
double sinc2_sampled(double nu, double sigma2, double tau_c, double fs);

// C(omega) = (R + i omega)^-1 G G^T (R^T - i omega)^-1
Eigen::Matrix2cd ou_spectrum_matrix(const Eigen::Matrix2d& r, const Eigen::Matrix2d& g,
                                    double omega);
Eigen::Matrix2d ou_drift(double gamma, double omega_l);
// Solves R S + S R^T + G G^T = 0.
Eigen::Matrix2d lyapunov_covariance(const Eigen::Matrix2d& r, const Eigen::Matrix2d& g);

enum class FitModel { single_peak, two_peak, peak_plus_lf, sinc_lf };

struct PeakParams {
  double amplitude = 0, gamma = 0, omega_l = 0;  // gamma, omega_l in rad/s
  double amplitude_err = 0, gamma_err = 0, omega_l_err = 0;
  double hwhm_hz() const { return gamma / kTwoPi; }
  double center_hz() const { return omega_l / kTwoPi; }
};

struct LowFrequencyParams {
  bool present = false;
  bool sinc = false;
  double amplitude = 0, amplitude_err = 0;
  double gamma_c = 0, gamma_c_err = 0;  // Lorentzian HWHM, rad/s
  double tau_c = 0, tau_c_err = 0;      // sinc model
};

struct FitResult {
  FitModel model = FitModel::single_peak;
  std::vector<PeakParams> peaks;
  LowFrequencyParams lf;
  double residual_norm = 0;
  double reduced_chi2 = 0;
  bool converged = false;
  std::string message;
  double sample_rate = 0;  // copied from the fitted spectrum

  double evaluate(double freq_hz) const;
  double evaluate_lf(double freq_hz) const;
};

struct FitOptions {
  double f_min_hz = 0;  // 0: first non-DC bin
  double f_max_hz = 0;  // 0: last bin
  int restarts = 5;
  std::uint64_t seed = 0x5eed;
};

FitResult fit_spectrum(const Spectrum& s, FitModel model, const FitOptions& opt = {});

struct SplittingEstimate {
  double splitting = 0;  // rad/s
  bool resolved = false;
  FitResult fit;
};

SplittingEstimate extract_splitting(const Spectrum& s, const FitOptions& opt = {});

double lf_fraction(const Spectrum& s, const FitResult& fit);

std::string to_string(FitModel m);
FitModel fit_model_from_string(const std::string& s);

}  // namespace spinnoise
