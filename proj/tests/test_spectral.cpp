#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "spinnoise/spectral.hpp"

using namespace spinnoise;

namespace {

const double kDt = 10e-9;

// Grid of a 2000-point segment at 10 ns: 50 kHz bins up to 25 MHz.
Spectrum grid(std::size_t n = 1001, double res = 50e3) {
  Spectrum s;
  s.resolution = res;
  s.n_averages = 100;
  for (std::size_t k = 0; k < n; ++k) {
    s.freqs.push_back(k * res);
    s.psd.push_back(0.0);
  }
  return s;
}

// Multiplicative scatter of a 100-segment average.
void add_scatter(Spectrum& s, std::uint64_t seed, double rel = 0.1) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, rel);
  for (double& v : s.psd) v *= std::max(0.05, 1.0 + n(rng));
}

void add_peak(Spectrum& s, double amp, double hwhm_hz, double center_hz) {
  for (std::size_t k = 0; k < s.freqs.size(); ++k)
    s.psd[k] += czz_model(kTwoPi * s.freqs[k], amp, kTwoPi * hwhm_hz, kTwoPi * center_hz);
}

void add_sinc(Spectrum& s, double sigma2, double tau) {
  for (std::size_t k = 0; k < s.freqs.size(); ++k) s.psd[k] += sinc2_model(s.freqs[k], sigma2, tau);
}

double peak_height(double amp, double hwhm_hz, double center_hz) {
  return czz_model(kTwoPi * center_hz, amp, kTwoPi * hwhm_hz, kTwoPi * center_hz);
}

}  // namespace

TEST_CASE("Welch estimator") {
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  SUBCASE("sinusoid lands in its bin") {
    std::vector<double> x(20000);
    const double f0 = 9e6 + 0.3 * 50e3;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(kTwoPi * f0 * i * kDt);
    const auto s = psd(x, kDt, 2000);
    const auto it = std::max_element(s.psd.begin(), s.psd.end());
    CHECK(std::abs(s.freqs[it - s.psd.begin()] - f0) <= 0.5 * s.resolution);
    CHECK(s.resolution == doctest::Approx(50e3));
    CHECK(s.n_averages == 19);
  }
  SUBCASE("white noise is flat at 2 sigma^2 dt") {
    WelchAccumulator acc(1000, kDt);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> x(20000);
      for (double& v : x) v = n(rng);
      acc.add(x);
    }
    const auto s = acc.result();
    double mean = 0;
    for (std::size_t k = 1; k + 1 < s.psd.size(); ++k) mean += s.psd[k] / (s.psd.size() - 2);
    CHECK(mean == doctest::Approx(2 * kDt).epsilon(0.01));
    // no slope between the lower and upper halves
    double lo = 0, hi = 0;
    const std::size_t h = s.psd.size() / 2;
    for (std::size_t k = 1; k < h; ++k) lo += s.psd[k] / (h - 1);
    for (std::size_t k = h; k + 1 < s.psd.size(); ++k) hi += s.psd[k] / (s.psd.size() - 1 - h);
    CHECK(lo / hi == doctest::Approx(1.0).epsilon(0.02));
  }
  SUBCASE("Parseval") {
    std::vector<double> x(40000);
    double z = 0;
    for (double& v : x) v = z = 0.9 * z + n(rng);
    // rectangular, no overlap: exact
    const auto r = psd(x, kDt, 4000, Window::rectangular, 0.0);
    double var = 0;
    for (std::size_t s0 = 0; s0 < x.size(); s0 += 4000) {
      const double m = std::accumulate(x.begin() + s0, x.begin() + s0 + 4000, 0.0) / 4000;
      for (std::size_t i = s0; i < s0 + 4000; ++i) var += (x[i] - m) * (x[i] - m) / x.size();
    }
    const double total = std::accumulate(r.psd.begin(), r.psd.end(), 0.0) * r.resolution;
    CHECK(total == doctest::Approx(var).epsilon(1e-10));
    // hann with overlap: power-normalized window, within 1% for a band-limited signal
    std::vector<double> y(400000);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = n(rng) + 3.0 * std::sin(kTwoPi * 9.01e6 * i * kDt);
    const auto h = psd(y, kDt, 2000);
    double vy = 0, my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    for (double v : y) vy += (v - my) * (v - my) / y.size();
    CHECK(std::accumulate(h.psd.begin(), h.psd.end(), 0.0) * h.resolution == doctest::Approx(vy).epsilon(0.01));
  }
  CHECK_THROWS(psd(std::vector<double>(100), kDt, 200));
  CHECK_THROWS(WelchAccumulator(2, kDt));
}

TEST_CASE("lineshape models") {
  const double g = kTwoPi * 270e3, wl = kTwoPi * 9e6;
  SUBCASE("czz equals the (z,z) element of the OU spectrum matrix") {
    const Eigen::Matrix2d r = -ou_drift(g, wl), gg = std::sqrt(3.7) * Eigen::Matrix2d::Identity();
    for (int i = 0; i < 100; ++i) {
      const double om = kTwoPi * 0.25e6 * i;
      const auto c = ou_spectrum_matrix(r, gg, om);
      const double a = czz_model(om, 3.7, g, wl);
      CHECK(std::abs(c(0, 0).real() - a) <= 1e-10 * a);
      CHECK(std::abs(c(0, 0).imag()) <= 1e-10 * a);
      // hermitian, positive semidefinite
      CHECK((c - c.adjoint()).cwiseAbs().maxCoeff() <= 1e-10 * a);
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2cd> es(c);
      CHECK(es.eigenvalues()(0) >= -1e-10 * a);
    }
  }
  SUBCASE("limits") {
    // omega_L = 0: zero-centred Lorentzian
    for (double om : {0.0, 0.3 * g, g, 7.0 * g})
      CHECK(czz_model(om, 2.0, g, 0.0) == doctest::Approx(lorentzian_lf(om, 2.0, g)).epsilon(1e-12));
    // omega_L >> gamma: Lorentzian of half-height A/2 around omega_L
    const double w0 = 1000 * g;
    for (double d : {0.0, 0.5 * g, g, 3.0 * g}) {
      const double lor = 0.5 / (d * d + g * g);
      CHECK(czz_model(w0 + d, 1.0, g, w0) == doctest::Approx(lor).epsilon(0.01));
    }
  }
  SUBCASE("integrated spectrum equals the Lyapunov covariance") {
    const double A = 2.5;
    const Eigen::Matrix2d s = lyapunov_covariance(ou_drift(g, wl), std::sqrt(A) * Eigen::Matrix2d::Identity());
    CHECK(s(0, 0) == doctest::Approx(A / (2 * g)).epsilon(1e-12));
    CHECK(std::abs(s(0, 1)) < 1e-12 * s(0, 0));
    // two-sided integral, dOmega / 2 pi, with the A / omega^2 tails added
    const double W = 200 * wl;
    const int n = 4000000;
    const double h = 2 * W / n;
    double sum = 0;
    for (int i = 0; i <= n; ++i) sum += (i == 0 || i == n ? 0.5 : 1.0) * czz_model(-W + i * h, A, g, wl);
    const double integral = (sum * h + 2 * A / W) / kTwoPi;
    CHECK(integral == doctest::Approx(s(0, 0)).epsilon(1e-4));
  }
  SUBCASE("sinc squared") {
    const double tau = 100e-9;
    CHECK(sinc2_model(0.0, 3.0, tau) == 3.0);
    for (int k = 1; k <= 3; ++k) CHECK(sinc2_model(k / tau, 1.0, tau) < 1e-28);
    CHECK(sinc2_model(0.5 / tau, 1.0, tau) == doctest::Approx(4 / (kPi * kPi)).epsilon(1e-12));
    CHECK_THROWS(sinc2_model(1e6, 1.0, 0.0));
    // Fourier transform of the triangle autocorrelation of a hold-and-resample process
    for (double nu : {0.0, 1.3e6, 4e6, 7.7e6, 12e6}) {
      const int n = 200000;
      const double h = tau / n;
      double ft = 0;
      for (int i = 0; i <= n; ++i) {
        const double t = i * h;
        ft += (i == 0 || i == n ? 0.5 : 1.0) * 2 * (1 - t / tau) * std::cos(kTwoPi * nu * t) * h;
      }
      CHECK(std::abs(ft - sinc2_model(nu, tau, tau)) < 1e-6 * tau);
    }
  }
}

TEST_CASE("sampled lineshapes") {
  const double fs = 100e6, g = kTwoPi * 270e3, wl = kTwoPi * 9e6, tau = 100e-9;
  // direct alias sums, truncated far out
  auto brute = [&](auto f, double nu) {
    double v = 0;
    for (int k = -20000; k <= 20000; ++k) v += f(nu + k * fs);
    return v;
  };
  for (double nu : {0.05e6, 3e6, 8.9e6, 9e6, 20e6, 37e6, 49.9e6}) {
    const double a = brute([&](double x) { return czz_model(kTwoPi * x, 1.0, g, wl); }, nu);
    CHECK(czz_sampled(kTwoPi * nu, 1.0, g, wl, fs) == doctest::Approx(a).epsilon(1e-5));
    const double b = brute([&](double x) { return sinc2_model(x, 1.0, tau); }, nu);
    CHECK(sinc2_sampled(nu, 1.0, tau, fs) == doctest::Approx(b).epsilon(1e-4));
    const double t2 = 137e-9;  // not a multiple of the sample period
    const double c = brute([&](double x) { return sinc2_model(x, 1.0, t2); }, nu);
    CHECK(sinc2_sampled(nu, 1.0, t2, fs) == doctest::Approx(c).epsilon(1e-4));
    const double d = brute([&](double x) { return lorentzian_lf(kTwoPi * x, 1.0, g); }, nu);
    CHECK(lorentzian_lf_sampled(kTwoPi * nu, 1.0, g, fs) == doctest::Approx(d).epsilon(1e-5));
  }
  // long windows
  for (double tl : {2.37e-6, 40.05e-6})
    for (double nu : {0.0, 0.01e6, 0.21e6, 3e6, 24.9e6, 50e6}) {
      const double b = brute([&](double x) { return sinc2_model(x, 1.0, tl); }, nu);
      CHECK(sinc2_sampled(nu, 1.0, tl, fs) == doctest::Approx(b).epsilon(1e-4).scale(1e-6 * tl));
    }
  CHECK(sinc2_sampled(1 / 2.37e-6, 1.0, 2.37e-6, fs) < 1e-10);
  // zeros survive aliasing when tau_c is a whole number of samples
  CHECK(sinc2_sampled(1 / tau, 1.0, tau, fs) < 1e-12);
  CHECK(sinc2_sampled(3 / tau, 1.0, tau, fs) < 1e-12);
  // fs -> 0 means continuous
  CHECK(czz_sampled(wl, 1.0, g, wl, 0.0) == czz_model(wl, 1.0, g, wl));
  CHECK(sinc2_sampled(1e6, 2.0, tau, 0.0) == sinc2_model(1e6, 2.0, tau));
  // far below Nyquist aliasing is a small correction
  CHECK(czz_sampled(wl, 1.0, g, wl, 1e12) == doctest::Approx(czz_model(wl, 1.0, g, wl)).epsilon(1e-6));
}

TEST_CASE("OU trace through Welch and fit") {
  const double g = kTwoPi * 270e3, wl = kTwoPi * 9e6;
  WelchAccumulator acc(2000, kDt);
  for (int t = 0; t < 10; ++t) acc.add(ou_reference_trace(g, wl, 1.0, kDt, 0.5e-3, derive_seed(3, t)).samples);
  const auto s = acc.result();
  // one-sided PSD is 2 C_zz
  double ratio = 0;
  int count = 0;
  for (std::size_t k = 0; k < s.freqs.size(); ++k)
    if (std::abs(s.freqs[k] - 9e6) < 270e3) {
      ratio += s.psd[k] / (2 * czz_sampled(kTwoPi * s.freqs[k], 1.0, g, wl, s.sample_rate));
      ++count;
    }
  CHECK(ratio / count == doctest::Approx(1.0).epsilon(0.1));
  CHECK(s.sample_rate == doctest::Approx(1 / kDt));
  const auto fit = fit_spectrum(s, FitModel::single_peak, {.f_min_hz = 1e6});
  REQUIRE(fit.converged);
  CHECK(fit.peaks[0].gamma == doctest::Approx(g).epsilon(0.05));
  CHECK(fit.peaks[0].omega_l == doctest::Approx(wl).epsilon(0.01));
}

TEST_CASE("fitting synthetic spectra") {
  SUBCASE("single peak") {
    auto s = grid();
    add_peak(s, 1.0, 300e3, 9e6);
    add_scatter(s, 5);
    const auto fit = fit_spectrum(s, FitModel::single_peak);
    REQUIRE(fit.converged);
    CHECK(fit.peaks[0].hwhm_hz() == doctest::Approx(300e3).epsilon(0.03));
    CHECK(fit.peaks[0].center_hz() == doctest::Approx(9e6).epsilon(0.005));
    CHECK(fit.peaks[0].gamma_err > 0);
    CHECK(fit.reduced_chi2 > 0);
    // rescaled copy
    auto s2 = s;
    for (double& v : s2.psd) v *= 1e7;
    const auto f2 = fit_spectrum(s2, FitModel::single_peak);
    CHECK(f2.peaks[0].gamma == doctest::Approx(fit.peaks[0].gamma).epsilon(1e-6));
    CHECK(f2.peaks[0].omega_l == doctest::Approx(fit.peaks[0].omega_l).epsilon(1e-6));
    CHECK(f2.peaks[0].amplitude == doctest::Approx(1e7 * fit.peaks[0].amplitude).epsilon(1e-6));
  }
  SUBCASE("peak plus sinc tail") {
    auto s = grid();
    add_peak(s, 1.0, 500e3, 9e6);
    add_sinc(s, 0.3 * peak_height(1.0, 500e3, 9e6), 100e-9);
    add_scatter(s, 6, 0.05);
    const auto fit = fit_spectrum(s, FitModel::sinc_lf);
    REQUIRE(fit.lf.present);
    CHECK(fit.lf.sinc);
    CHECK(fit.lf.tau_c == doctest::Approx(100e-9).epsilon(0.03));
    CHECK(fit.peaks[0].hwhm_hz() == doctest::Approx(500e3).epsilon(0.03));
  }
  SUBCASE("no tail fits to a negligible tail") {
    auto s = grid();
    add_peak(s, 1.0, 300e3, 9e6);
    add_scatter(s, 7, 0.05);
    const auto fit = fit_spectrum(s, FitModel::sinc_lf);
    CHECK(lf_fraction(s, fit) < 0.01);
    CHECK(lf_fraction(s, fit_spectrum(s, FitModel::single_peak)) == 0.0);
  }
  SUBCASE("peak plus Lorentzian tail") {
    auto s = grid();
    add_peak(s, 1.0, 400e3, 9e6);
    for (std::size_t k = 0; k < s.freqs.size(); ++k)
      s.psd[k] += lorentzian_lf(kTwoPi * s.freqs[k], 0.2 * peak_height(1.0, 400e3, 9e6) * std::pow(kTwoPi * 2e6, 2), kTwoPi * 2e6);
    add_scatter(s, 8, 0.05);
    const auto fit = fit_spectrum(s, FitModel::peak_plus_lf);
    REQUIRE(fit.lf.present);
    CHECK_FALSE(fit.lf.sinc);
    CHECK(fit.lf.gamma_c == doctest::Approx(kTwoPi * 2e6).epsilon(0.05));
  }
  CHECK_THROWS_AS(fit_model_from_string("three_peak"), ConfigError);
  CHECK(fit_model_from_string(to_string(FitModel::peak_plus_lf)) == FitModel::peak_plus_lf);
}

TEST_CASE("splitting extraction") {
  SUBCASE("doublet within one bin") {
    for (double split : {1.0e6, 2.0e6, 3.3e6}) {
      auto s = grid();
      add_peak(s, 1.0, 200e3, 9e6 - split / 2);
      add_peak(s, 1.0, 200e3, 9e6 + split / 2);
      add_scatter(s, 9);
      const auto e = extract_splitting(s);
      CHECK(e.resolved);
      CHECK(std::abs(e.splitting / kTwoPi - split) <= s.resolution);
    }
  }
  SUBCASE("single line is unresolved") {
    auto s = grid();
    add_peak(s, 1.0, 300e3, 9e6);
    add_scatter(s, 10);
    const auto e = extract_splitting(s);
    CHECK_FALSE(e.resolved);
    CHECK(e.splitting == 0.0);
  }
  SUBCASE("interfering modes, sampled") {
    // Two damped modes seen through two channels with opposite-sign
    // couplings; the cross terms deepen the dip between the lines.
    const double fs = 100e6, g = kTwoPi * 460e3;
    const double w1 = kTwoPi * 7.5e6, w2 = kTwoPi * 9.85e6;
    const std::complex<double> lam[4] = {{-g, w1}, {-g, -w1}, {-g, w2}, {-g, -w2}};
    const std::complex<double> c[2][4] = {{{1.0, 0.2}, {1.0, -0.2}, {-0.8, 0.1}, {-0.8, -0.1}},
                                          {{0.3, 0.0}, {0.3, 0.0}, {0.6, -0.3}, {0.6, 0.3}}};
    auto s = grid();
    s.sample_rate = fs;
    for (std::size_t k = 0; k < s.freqs.size(); ++k)
      for (int n = -400; n <= 400; ++n) {
        const double om = kTwoPi * (s.freqs[k] + n * fs);
        for (const auto& ch : c) {
          std::complex<double> a = 0;
          for (int q = 0; q < 4; ++q) a += ch[q] / (std::complex<double>(0, om) - lam[q]);
          s.psd[k] += std::norm(a);
        }
      }
    const auto e = extract_splitting(s);
    CHECK(e.resolved);
    CHECK(std::abs(e.splitting - (w2 - w1)) / (w2 - w1) < 2e-3);
    for (const auto& pk : e.fit.peaks) CHECK(std::abs(pk.gamma / g - 1.0) < 0.01);
    add_scatter(s, 11, 0.05);
    const auto en = extract_splitting(s);
    CHECK(en.resolved);
    CHECK(std::abs(en.splitting - (w2 - w1)) / (w2 - w1) < 0.02);
  }
  SUBCASE("offset invariance") {
    auto a = grid(), b = grid();
    const double off = 2e6;
    add_peak(a, 1.0, 200e3, 8e6);
    add_peak(a, 1.0, 200e3, 10e6);
    add_peak(b, 1.0, 200e3, 8e6 + off);
    add_peak(b, 1.0, 200e3, 10e6 + off);
    const auto ea = extract_splitting(a, {.f_min_hz = 4e6, .f_max_hz = 14e6});
    const auto eb = extract_splitting(b, {.f_min_hz = 4e6 + off, .f_max_hz = 14e6 + off});
    CHECK(ea.resolved);
    CHECK(eb.resolved);
    CHECK(std::abs(ea.splitting - eb.splitting) / kTwoPi < 0.2 * a.resolution);
  }
}

TEST_CASE("low-frequency power fraction") {
  FitResult f;
  f.peaks.push_back({1.0, kTwoPi * 300e3, kTwoPi * 9e6});
  const auto s = grid();
  CHECK(lf_fraction(s, f) == 0.0);
  f.lf.present = true;
  f.lf.sinc = true;
  f.lf.tau_c = 100e-9;
  double last = 0;
  for (double a : {1e-14, 1e-13, 1e-12, 1e-11}) {
    f.lf.amplitude = a;
    const double x = lf_fraction(s, f);
    CHECK(x > last);
    CHECK(x < 1.0);
    last = x;
  }
  // from fits of spectra with a growing tail
  last = -1;
  for (double rel : {0.0, 0.1, 0.3, 1.0}) {
    auto t = grid();
    add_peak(t, 1.0, 500e3, 9e6);
    add_sinc(t, rel * peak_height(1.0, 500e3, 9e6), 100e-9);
    const double x = lf_fraction(t, fit_spectrum(t, FitModel::sinc_lf));
    CHECK(x >= last);
    last = x;
  }
}
