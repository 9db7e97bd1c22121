#include "spinnoise/spectral.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include <unsupported/Eigen/FFT>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

namespace spinnoise {

// ---------------------------------------------------------------------------
// Welch

WelchAccumulator::WelchAccumulator(std::size_t segment_len, double dt, Window w, double overlap)
    : n_(segment_len), dt_(dt) {
  if (segment_len < 4) throw std::invalid_argument("psd: segment too short");
  if (!(overlap >= 0 && overlap < 1)) throw std::invalid_argument("psd: overlap in [0,1)");
  hop_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n_ * (1.0 - overlap))));
  window_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i)
    window_[i] = w == Window::hann ? 0.5 - 0.5 * std::cos(kTwoPi * i / static_cast<double>(n_)) : 1.0;
  window_power_ = std::inner_product(window_.begin(), window_.end(), window_.begin(), 0.0);
  sum_.assign(n_ / 2 + 1, 0.0);
}

void WelchAccumulator::add(std::span<const double> x) {
  if (x.size() < n_) throw std::invalid_argument("psd: segment_len exceeds trace length");
  Eigen::FFT<double> fft;
  std::vector<double> seg(n_);
  std::vector<std::complex<double>> spec;
  for (std::size_t start = 0; start + n_ <= x.size(); start += hop_) {
    const double mean = std::accumulate(x.begin() + start, x.begin() + start + n_, 0.0) / n_;
    for (std::size_t i = 0; i < n_; ++i) seg[i] = (x[start + i] - mean) * window_[i];
    fft.fwd(spec, seg);
    const double norm = dt_ / window_power_;
    for (std::size_t k = 0; k <= n_ / 2; ++k) {
      double v = std::norm(spec[k]) * norm;
      if (k != 0 && !(n_ % 2 == 0 && k == n_ / 2)) v *= 2.0;
      sum_[k] += v;
    }
    ++count_;
  }
}

Spectrum WelchAccumulator::result() const {
  Spectrum s;
  s.resolution = 1.0 / (n_ * dt_);
  s.n_averages = count_;
  s.sample_rate = 1.0 / dt_;
  s.freqs.resize(sum_.size());
  s.psd.resize(sum_.size());
  for (std::size_t k = 0; k < sum_.size(); ++k) {
    s.freqs[k] = k * s.resolution;
    s.psd[k] = count_ ? sum_[k] / count_ : 0.0;
  }
  return s;
}

Spectrum psd(std::span<const double> x, double dt, std::size_t segment_len, Window w,
             double overlap) {
  WelchAccumulator acc(segment_len, dt, w, overlap);
  acc.add(x);
  return acc.result();
}

Spectrum psd(const TimeTrace& trace, std::size_t segment_len, Window w, double overlap) {
  return psd(std::span<const double>(trace.samples), trace.dt, segment_len, w, overlap);
}

// ---------------------------------------------------------------------------
// Models

double czz_model(double omega, double amplitude, double gamma, double omega_l) {
  const double w2 = omega * omega, g2 = gamma * gamma, l2 = omega_l * omega_l;
  const double d = g2 + l2 - w2;
  return amplitude * (g2 + w2 + l2) / (d * d + 4.0 * g2 * w2);
}

double lorentzian_lf(double omega, double amplitude, double gamma_c) {
  return amplitude / (gamma_c * gamma_c + omega * omega);
}

double sinc2_model(double nu, double sigma2, double tau_c) {
  if (!(tau_c > 0)) throw std::invalid_argument("sinc2_model: tau_c must be > 0");
  const double x = kPi * nu * tau_c;
  if (std::abs(x) < 1e-8) return sigma2;
  const double s = std::sin(x) / x;
  return sigma2 * s * s;
}

double czz_sampled(double omega, double amplitude, double gamma, double omega_l, double fs) {
  if (!(fs > 0)) return czz_model(omega, amplitude, gamma, omega_l);
  // C(t) = A / (2 gamma) exp(-gamma |t|) cos(omega_l t), summed over t = n dt
  const double dt = 1.0 / fs, z = std::exp(-gamma * dt), num = -std::expm1(-2.0 * gamma * dt);
  auto p = [&](double u) { return num / (1.0 - 2.0 * z * std::cos(u * dt) + z * z); };
  return amplitude * dt / (4.0 * gamma) * (p(omega - omega_l) + p(omega + omega_l));
}

double lorentzian_lf_sampled(double omega, double amplitude, double gamma_c, double fs) {
  return czz_sampled(omega, amplitude, gamma_c, 0.0, fs);
}

double sinc2_sampled(double nu, double sigma2, double tau_c, double fs) {
  if (!(fs > 0)) return sinc2_model(nu, sigma2, tau_c);
  if (!(tau_c > 0)) throw std::invalid_argument("sinc2_sampled: tau_c must be > 0");
  // triangle autocorrelation (1 - |t| / tau_c) on the sampling grid
  const double dt = 1.0 / fs, m = tau_c / dt;
  const auto n_max = static_cast<long>(std::ceil(m)) - 1;
  const double th = kTwoPi * nu * dt;
  const cplx z = std::polar(1.0, th), one_z = 1.0 - z;
  double sum = 1.0;
  if (n_max > 64 && std::abs(one_z) > 1e-6) {
    // geometric sums for sum z^n and sum n z^n, n = 1..M
    const double M = static_cast<double>(n_max);
    const cplx zM = std::pow(z, n_max);
    const cplx s0 = z * (1.0 - zM) / one_z;
    const cplx s1 = z * (1.0 - (M + 1.0) * zM + M * zM * z) / (one_z * one_z);
    sum += 2.0 * (s0 - s1 / m).real();
  } else {
    const double c1 = std::cos(th);
    double c_prev = 1.0, c = c1;
    for (long n = 1; n <= n_max; ++n) {
      sum += 2.0 * (1.0 - n / m) * c;
      const double next = 2.0 * c1 * c - c_prev;
      c_prev = c;
      c = next;
    }
  }
  return sigma2 * sum / m;
}

Eigen::Matrix2cd ou_spectrum_matrix(const Eigen::Matrix2d& r, const Eigen::Matrix2d& g,
                                    double omega) {
  const cplx I(0, 1);
  const Eigen::Matrix2cd a = r.cast<cplx>() + I * omega * Eigen::Matrix2cd::Identity();
  const Eigen::Matrix2cd b = r.transpose().cast<cplx>() - I * omega * Eigen::Matrix2cd::Identity();
  Eigen::FullPivLU<Eigen::Matrix2cd> la(a), lb(b);
  if (!la.isInvertible() || !lb.isInvertible())
    throw std::domain_error("ou_spectrum_matrix: singular R + i omega");
  const Eigen::Matrix2cd q = (g * g.transpose()).cast<cplx>();
  return la.inverse() * q * lb.inverse();
}

Eigen::Matrix2d ou_drift(double gamma, double omega_l) {
  Eigen::Matrix2d r;
  r << -gamma, omega_l, -omega_l, -gamma;
  return r;
}

Eigen::Matrix2d lyapunov_covariance(const Eigen::Matrix2d& r, const Eigen::Matrix2d& g) {
  // vec(R S + S R^T) = (I (x) R + R (x) I) vec(S)
  Eigen::Matrix4d k = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int a = 0; a < 2; ++a) {
        k(i + 2 * j, a + 2 * j) += r(i, a);
        k(i + 2 * j, i + 2 * a) += r(j, a);
      }
  const Eigen::Matrix2d q = g * g.transpose();
  const Eigen::Vector4d rhs = -Eigen::Map<const Eigen::Vector4d>(q.data());
  const Eigen::Vector4d v = k.fullPivLu().solve(rhs);
  Eigen::Matrix2d s = Eigen::Map<const Eigen::Matrix2d>(v.data());
  return 0.5 * (s + s.transpose());
}

// ---------------------------------------------------------------------------
// Fitting

std::string to_string(FitModel m) {
  switch (m) {
    case FitModel::single_peak: return "single_peak";
    case FitModel::two_peak: return "two_peak";
    case FitModel::peak_plus_lf: return "peak_plus_lf";
    case FitModel::sinc_lf: return "sinc_lf";
  }
  return "?";
}

FitModel fit_model_from_string(const std::string& s) {
  for (auto m : {FitModel::single_peak, FitModel::two_peak, FitModel::peak_plus_lf, FitModel::sinc_lf})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown fit model: " + s);
}

double FitResult::evaluate_lf(double freq_hz) const {
  if (!lf.present) return 0.0;
  if (lf.sinc) return sinc2_sampled(freq_hz, lf.amplitude, lf.tau_c, sample_rate);
  return lorentzian_lf_sampled(kTwoPi * freq_hz, lf.amplitude, lf.gamma_c, sample_rate);
}

double FitResult::evaluate(double freq_hz) const {
  double v = evaluate_lf(freq_hz);
  for (const auto& pk : peaks) v += czz_sampled(kTwoPi * freq_hz, pk.amplitude, pk.gamma, pk.omega_l, sample_rate);
  return v;
}

namespace {

struct Layout {
  int n_peaks = 1;
  bool lf = false;
  bool sinc = false;
  int n_nonlinear() const { return 2 * n_peaks + (lf ? 1 : 0); }
  int n_linear() const { return n_peaks + (lf ? 1 : 0); }
};

Layout layout_for(FitModel m) {
  switch (m) {
    case FitModel::single_peak: return {1, false, false};
    case FitModel::two_peak: return {2, false, false};
    case FitModel::peak_plus_lf: return {1, true, false};
    case FitModel::sinc_lf: return {1, true, true};
  }
  return {};
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

// Nonlinear parameters in natural units: per peak (gamma, omega_l) in rad/s,
// then gamma_c (rad/s) or tau_c (s).
struct Problem {
  Layout lay;
  std::vector<double> f;   // Hz
  std::vector<double> y;
  std::vector<double> w;   // residual weights
  double w_lo, w_hi;       // center band, rad/s
  double fs = 0;           // sample rate, Hz

  Eigen::VectorXd to_natural(const Eigen::VectorXd& u) const {
    Eigen::VectorXd p(u.size());
    for (int i = 0; i < lay.n_peaks; ++i) {
      p(2 * i) = std::exp(u(2 * i));
      p(2 * i + 1) = w_lo + (w_hi - w_lo) * logistic(u(2 * i + 1));
    }
    if (lay.lf) p(2 * lay.n_peaks) = std::exp(u(2 * lay.n_peaks));
    return p;
  }

  Eigen::VectorXd to_internal(const Eigen::VectorXd& p) const {
    Eigen::VectorXd u(p.size());
    for (int i = 0; i < lay.n_peaks; ++i) {
      u(2 * i) = std::log(p(2 * i));
      const double q = std::clamp((p(2 * i + 1) - w_lo) / (w_hi - w_lo), 1e-6, 1.0 - 1e-6);
      u(2 * i + 1) = logit(q);
    }
    if (lay.lf) u(2 * lay.n_peaks) = std::log(p(2 * lay.n_peaks));
    return u;
  }

  // Unit-amplitude basis functions at natural parameters.
  Eigen::MatrixXd basis(const Eigen::VectorXd& p) const {
    const int m = static_cast<int>(f.size());
    Eigen::MatrixXd b(m, lay.n_linear());
    for (int k = 0; k < m; ++k) {
      const double om = kTwoPi * f[k];
      for (int i = 0; i < lay.n_peaks; ++i) b(k, i) = czz_sampled(om, 1.0, p(2 * i), p(2 * i + 1), fs);
      if (lay.lf) {
        const double q = p(2 * lay.n_peaks);
        b(k, lay.n_peaks) = lay.sinc ? sinc2_sampled(f[k], 1.0, q, fs) : lorentzian_lf_sampled(om, 1.0, q, fs);
      }
    }
    return b;
  }

  // Non-negative amplitudes minimizing the weighted residual (exhaustive
  // active-set search; at most three columns).
  Eigen::VectorXd amplitudes(const Eigen::MatrixXd& b) const {
    const int m = static_cast<int>(f.size()), nl = static_cast<int>(b.cols());
    Eigen::MatrixXd wb(m, nl);
    Eigen::VectorXd wy(m);
    for (int k = 0; k < m; ++k) {
      wb.row(k) = w[k] * b.row(k);
      wy(k) = w[k] * y[k];
    }
    Eigen::VectorXd scale(nl);
    for (int j = 0; j < nl; ++j) {
      scale(j) = wb.col(j).norm();
      if (scale(j) > 0) wb.col(j) /= scale(j);
    }
    Eigen::VectorXd best = Eigen::VectorXd::Zero(nl);
    double best_cost = wy.squaredNorm();
    for (int mask = 1; mask < (1 << nl); ++mask) {
      std::vector<int> cols;
      for (int j = 0; j < nl; ++j)
        if ((mask >> j) & 1 && scale(j) > 0) cols.push_back(j);
      if (cols.empty()) continue;
      Eigen::MatrixXd sub(m, cols.size());
      for (std::size_t c = 0; c < cols.size(); ++c) sub.col(c) = wb.col(cols[c]);
      const Eigen::VectorXd a = sub.colPivHouseholderQr().solve(wy);
      if ((a.array() < 0).any()) continue;
      const double cost = (sub * a - wy).squaredNorm();
      if (cost < best_cost) {
        best_cost = cost;
        best.setZero();
        for (std::size_t c = 0; c < cols.size(); ++c) best(cols[c]) = a(c) / scale(cols[c]);
      }
    }
    return best;
  }

  Eigen::VectorXd residual_natural(const Eigen::VectorXd& p) const {
    const Eigen::MatrixXd b = basis(p);
    const Eigen::VectorXd a = amplitudes(b);
    const Eigen::VectorXd model = b * a;
    Eigen::VectorXd r(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) r(k) = w[k] * (model(k) - y[k]);
    return r;
  }
};

struct Functor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  const Problem* prob;
  int n_in, n_out;
  int inputs() const { return n_in; }
  int values() const { return n_out; }
  int operator()(const Eigen::VectorXd& u, Eigen::VectorXd& r) const {
    r = prob->residual_natural(prob->to_natural(u));
    for (int k = 0; k < r.size(); ++k)
      if (!std::isfinite(r(k))) r(k) = 1e150;
    return 0;
  }
};

std::vector<double> smooth(const std::vector<double>& y, int half) {
  std::vector<double> out(y.size());
  const int n = static_cast<int>(y.size());
  for (int i = 0; i < n; ++i) {
    double s = 0;
    int c = 0;
    for (int j = std::max(0, i - half); j <= std::min(n - 1, i + half); ++j, ++c) s += y[j];
    out[i] = s / c;
  }
  return out;
}

// Half width at half maximum around index i of ys (in Hz), or 0.
double hwhm_at(const std::vector<double>& f, const std::vector<double>& ys, int i) {
  const double half = 0.5 * ys[i];
  int lo = i, hi = i;
  while (lo > 0 && ys[lo] > half) --lo;
  while (hi + 1 < static_cast<int>(ys.size()) && ys[hi] > half) ++hi;
  return 0.5 * (f[hi] - f[lo]);
}


// Two damped modes observed coherently. The spectrum is a Hermitian form in
// the pole responses 1/(i w - lam) over lam = -g_a +- i w_a, alias-summed at
// the sample rate. Nonlinear: (log g1, w1/W, log g2, w2/W).
struct Coherent {
  std::vector<double> f, y, w;
  double fs = 0, scale = 1;

  // sum_n 1/(i(w + n ws) - lam)
  cplx pole_sum(double om, cplx lam) const {
    const cplx iw(0.0, om);
    if (!(fs > 0)) return 1.0 / (iw - lam);
    const cplx iws(0.0, kTwoPi * fs);
    const cplx z = kPi * (iw - lam) / iws;
    return kPi / iws * std::cos(z) / std::sin(z);
  }

  Eigen::Vector4d natural(const Eigen::VectorXd& u) const {
    return {std::exp(u(0)), u(1) * scale, std::exp(u(2)), u(3) * scale};
  }

  Eigen::MatrixXd basis(const Eigen::Vector4d& p) const {
    const std::array<cplx, 4> lam{cplx(-p(0), p(1)), cplx(-p(0), -p(1)), cplx(-p(2), p(3)),
                                  cplx(-p(2), -p(3))};
    const int m = static_cast<int>(f.size());
    Eigen::MatrixXd b(m, 16);
    for (int k = 0; k < m; ++k) {
      const double om = kTwoPi * f[k];
      std::array<cplx, 4> a, ac;
      for (int q = 0; q < 4; ++q) {
        a[q] = pole_sum(om, lam[q]);
        ac[q] = pole_sum(om, -std::conj(lam[q]));
      }
      int c = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) {
          // sum_n L_i conj(L_j)
          const cplx pij = -(a[i] - ac[j]) / (lam[i] + std::conj(lam[j]));
          if (i == j) {
            b(k, c++) = pij.real();
          } else {
            b(k, c++) = 2.0 * pij.real();
            b(k, c++) = -2.0 * pij.imag();
          }
        }
    }
    return b;
  }

  Eigen::VectorXd residual(const Eigen::Vector4d& p) const {
    const Eigen::MatrixXd b = basis(p);
    const int m = static_cast<int>(f.size());
    Eigen::MatrixXd wb(m, b.cols());
    Eigen::VectorXd wy(m);
    for (int k = 0; k < m; ++k) {
      wb.row(k) = w[k] * b.row(k);
      wy(k) = w[k] * y[k];
    }
    for (int j = 0; j < wb.cols(); ++j) {
      const double n = wb.col(j).norm();
      if (n > 0) wb.col(j) /= n;
    }
    // The mirror-pole columns are nearly collinear; a small ridge keeps the
    // solution (and so the residual) smooth in the poles.
    const int nc = static_cast<int>(wb.cols());
    Eigen::MatrixXd aug(m + nc, nc);
    aug << wb, 1e-6 * Eigen::MatrixXd::Identity(nc, nc);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + nc);
    rhs.head(m) = wy;
    const Eigen::VectorXd c = aug.householderQr().solve(rhs);
    return wb * c - wy;
  }
};

struct CoherentFunctor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  const Coherent* prob;
  int inputs() const { return 4; }
  int values() const { return static_cast<int>(prob->f.size()); }
  int operator()(const Eigen::VectorXd& u, Eigen::VectorXd& r) const {
    r = prob->residual(prob->natural(u));
    for (int k = 0; k < r.size(); ++k)
      if (!std::isfinite(r(k))) r(k) = 1e150;
    return 0;
  }
};

}  // namespace

FitResult fit_spectrum(const Spectrum& s, FitModel model, const FitOptions& opt) {
  if (s.freqs.size() != s.psd.size() || s.freqs.size() < 8)
    throw std::invalid_argument("fit_spectrum: spectrum too small");
  Problem prob;
  prob.lay = layout_for(model);
  prob.fs = s.sample_rate;
  const double f_lo = opt.f_min_hz > 0 ? opt.f_min_hz : s.freqs[1];
  const double f_hi = opt.f_max_hz > 0 ? opt.f_max_hz : s.freqs.back();
  for (std::size_t k = 1; k < s.freqs.size(); ++k)
    if (s.freqs[k] >= f_lo && s.freqs[k] <= f_hi) {
      prob.f.push_back(s.freqs[k]);
      prob.y.push_back(s.psd[k]);
    }
  const int m = static_cast<int>(prob.f.size());
  const int n_params = prob.lay.n_nonlinear() + prob.lay.n_linear();
  if (m <= n_params + 2) throw std::invalid_argument("fit_spectrum: too few bins in band");
  prob.w_lo = kTwoPi * prob.f.front();
  prob.w_hi = kTwoPi * prob.f.back();

  const std::vector<double> ys = smooth(prob.y, 2);
  const double ymax = *std::max_element(ys.begin(), ys.end());
  prob.w.resize(m);
  for (int k = 0; k < m; ++k) prob.w[k] = 1.0 / std::max(ys[k], 1e-9 * ymax);

  // Initial guesses: peaks from local maxima of the smoothed spectrum.
  std::vector<double> sorted = ys;
  std::nth_element(sorted.begin(), sorted.begin() + m / 2, sorted.end());
  const double median = sorted[m / 2];
  const int skip = prob.lay.lf ? std::max(3, m / 50) : 1;
  std::vector<int> maxima;
  for (int k = skip; k + 1 < m; ++k)
    if (ys[k] > ys[k - 1] && ys[k] >= ys[k + 1] && ys[k] > 3.0 * median) maxima.push_back(k);
  std::sort(maxima.begin(), maxima.end(), [&](int a, int b) { return ys[a] > ys[b]; });
  if (maxima.empty()) {
    int best = skip;
    for (int k = skip; k < m; ++k)
      if (ys[k] > ys[best]) best = k;
    maxima.push_back(best);
  }
  const double res = s.resolution > 0 ? s.resolution : (prob.f[1] - prob.f[0]);
  Eigen::VectorXd p0(prob.lay.n_nonlinear());
  {
    const int i0 = maxima[0];
    const double hw = std::max(hwhm_at(prob.f, ys, i0), 1.5 * res);
    if (prob.lay.n_peaks == 1) {
      p0 << kTwoPi * hw, kTwoPi * prob.f[i0], Eigen::VectorXd::Zero(prob.lay.lf ? 1 : 0);
    } else if (auto it = std::find_if(maxima.begin() + 1, maxima.end(),
                                      [&](int k) { return std::abs(prob.f[k] - prob.f[i0]) > 2.0 * hw; });
               it != maxima.end()) {
      // strongest maximum clear of the first line
      const int i1 = *it;
      const double hw1 = std::max(hwhm_at(prob.f, ys, i1), 1.5 * res);
      const double sep = std::abs(prob.f[i1] - prob.f[i0]);
      p0 << kTwoPi * std::min(hw, sep), kTwoPi * prob.f[i0], kTwoPi * std::min(hw1, sep),
          kTwoPi * prob.f[i1];
    } else {
      p0 << kTwoPi * 0.6 * hw, kTwoPi * (prob.f[i0] - 0.5 * hw), kTwoPi * 0.6 * hw,
          kTwoPi * (prob.f[i0] + 0.5 * hw);
    }
    if (prob.lay.lf) {
      // Frequency where the low end has dropped to half its level.
      const double base = 0.5 * (ys[0] + ys[std::min(2, m - 1)]);
      int k = 0;
      while (k + 1 < m && ys[k] > 0.5 * base) ++k;
      const double f_half = std::max(prob.f[k], 2.0 * res);
      p0(2 * prob.lay.n_peaks) = prob.lay.sinc ? 0.443 / f_half : kTwoPi * f_half;
    }
  }

  Rng rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd best_u;
  double best_cost = std::numeric_limits<double>::infinity();
  bool any_converged = false;
  std::string last_status;
  // The sinc^2 cost is rippled in tau_c, so the LF parameter also gets a
  // deterministic log grid of starts.
  std::vector<double> lf_grid;
  if (prob.lay.lf) {
    const double lo = prob.lay.sinc ? 1.0 / f_hi : kTwoPi * 2.0 * res;
    const double hi = prob.lay.sinc ? 0.25 / res : kTwoPi * f_hi;
    const int n_grid = 12;
    for (int i = 0; i < n_grid; ++i) lf_grid.push_back(lo * std::pow(hi / lo, i / (n_grid - 1.0)));
  }
  const int random_attempts = std::max(1, opt.restarts);
  const int attempts = random_attempts + static_cast<int>(lf_grid.size());
  for (int attempt = 0; attempt < attempts; ++attempt) {
    Eigen::VectorXd start = prob.to_internal(p0);
    if (attempt >= random_attempts) {
      start(2 * prob.lay.n_peaks) = std::log(lf_grid[attempt - random_attempts]);
    } else if (attempt > 0) {
      for (int i = 0; i < prob.lay.n_peaks; ++i) {
        start(2 * i) += 0.5 * normal(rng);
        start(2 * i + 1) += 0.3 * normal(rng);
      }
      if (prob.lay.lf) start(2 * prob.lay.n_peaks) += 0.5 * normal(rng);
    }
    Functor fn{&prob, static_cast<int>(start.size()), m};
    Eigen::NumericalDiff<Functor> nd(fn);
    Eigen::LevenbergMarquardt<Eigen::NumericalDiff<Functor>> lm(nd);
    lm.parameters.maxfev = 4000;
    lm.parameters.xtol = 1e-12;
    lm.parameters.ftol = 1e-12;
    Eigen::VectorXd u = start;
    const auto status = lm.minimize(u);
    Eigen::VectorXd r;
    fn(u, r);
    const double cost = r.squaredNorm();
    const bool ok = status == Eigen::LevenbergMarquardtSpace::RelativeReductionTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::RelativeErrorTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::RelativeErrorAndReductionTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::CosinusTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::XtolTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::FtolTooSmall;
    last_status = "lm status " + std::to_string(static_cast<int>(status));
    if (std::isfinite(cost) && cost < best_cost) {
      best_cost = cost;
      best_u = u;
    }
    any_converged = any_converged || ok;
  }

  FitResult out;
  out.model = model;
  out.sample_rate = s.sample_rate;
  const Eigen::VectorXd p = prob.to_natural(best_u);
  const Eigen::MatrixXd b = prob.basis(p);
  const Eigen::VectorXd amp = prob.amplitudes(b);
  for (int i = 0; i < prob.lay.n_peaks; ++i) {
    PeakParams pk;
    pk.amplitude = amp(i);
    pk.gamma = p(2 * i);
    pk.omega_l = p(2 * i + 1);
    out.peaks.push_back(pk);
  }
  if (prob.lay.lf) {
    out.lf.present = true;
    out.lf.sinc = prob.lay.sinc;
    out.lf.amplitude = amp(prob.lay.n_peaks);
    if (prob.lay.sinc)
      out.lf.tau_c = p(2 * prob.lay.n_peaks);
    else
      out.lf.gamma_c = p(2 * prob.lay.n_peaks);
  }
  out.residual_norm = std::sqrt(best_cost);
  const int dof = std::max(1, m - n_params);
  out.reduced_chi2 = best_cost / dof;
  out.converged = any_converged;
  out.message = any_converged ? "ok" : "no restart converged (" + last_status + ")";

  // 1-sigma uncertainties from the weighted Jacobian in natural parameters:
  // per peak (A, gamma, omega_l), then (A_lf, width).
  {
    auto eval = [&](const Eigen::VectorXd& q) {
      Eigen::VectorXd r(m);
      for (int k = 0; k < m; ++k) {
        const double om = kTwoPi * prob.f[k];
        double v = 0;
        for (int i = 0; i < prob.lay.n_peaks; ++i)
          v += czz_sampled(om, q(3 * i), q(3 * i + 1), q(3 * i + 2), prob.fs);
        if (prob.lay.lf) {
          const int j = 3 * prob.lay.n_peaks;
          v += prob.lay.sinc ? sinc2_sampled(prob.f[k], q(j), q(j + 1), prob.fs)
                             : lorentzian_lf_sampled(om, q(j), q(j + 1), prob.fs);
        }
        r(k) = prob.w[k] * (v - prob.y[k]);
      }
      return r;
    };
    const int np = 3 * prob.lay.n_peaks + (prob.lay.lf ? 2 : 0);
    Eigen::VectorXd q(np);
    for (int i = 0; i < prob.lay.n_peaks; ++i) q.segment<3>(3 * i) << amp(i), p(2 * i), p(2 * i + 1);
    if (prob.lay.lf) q.tail<2>() << amp(prob.lay.n_peaks), p(2 * prob.lay.n_peaks);
    Eigen::MatrixXd jac(m, np);
    const Eigen::VectorXd r0 = eval(q);
    for (int j = 0; j < np; ++j) {
      Eigen::VectorXd qp = q;
      double h = 1e-6 * std::abs(q(j));
      if (h == 0) h = 1e-6 * std::max(1.0, q.cwiseAbs().maxCoeff() * 1e-6);
      if (j == 3 * prob.lay.n_peaks && prob.lay.lf && q(j) == 0) {
        // Zero LF amplitude: step relative to the LF basis scale.
        const double scale = b.col(prob.lay.n_peaks).cwiseAbs().maxCoeff();
        h = scale > 0 ? 1e-6 * ymax / scale : 1e-12;
      }
      qp(j) += h;
      jac.col(j) = (eval(qp) - r0) / h;
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::MatrixXd cov =
        out.reduced_chi2 * jtj.completeOrthogonalDecomposition().pseudoInverse();
    auto sd = [&](int j) { return std::sqrt(std::max(0.0, cov(j, j))); };
    for (int i = 0; i < prob.lay.n_peaks; ++i) {
      out.peaks[i].amplitude_err = sd(3 * i);
      out.peaks[i].gamma_err = sd(3 * i + 1);
      out.peaks[i].omega_l_err = sd(3 * i + 2);
    }
    if (prob.lay.lf) {
      const int j = 3 * prob.lay.n_peaks;
      out.lf.amplitude_err = sd(j);
      if (prob.lay.sinc)
        out.lf.tau_c_err = sd(j + 1);
      else
        out.lf.gamma_c_err = sd(j + 1);
    }
  }
  std::sort(out.peaks.begin(), out.peaks.end(),
            [](const PeakParams& a, const PeakParams& c) { return a.omega_l < c.omega_l; });
  return out;
}

SplittingEstimate extract_splitting(const Spectrum& s, const FitOptions& opt) {
  SplittingEstimate e;
  // Fit the doublet where the lines are: bins whose smoothed level is above
  // 10% of the maximum. The broad pedestal under the lines otherwise drags
  // the Lorentzians apart.
  FitOptions win = opt;
  {
    const double f_lo = opt.f_min_hz > 0 ? opt.f_min_hz : s.freqs.at(1);
    const double f_hi = opt.f_max_hz > 0 ? opt.f_max_hz : s.freqs.back();
    const std::vector<double> ys = smooth(s.psd, 2);
    double ymax = 0;
    for (std::size_t k = 1; k < s.freqs.size(); ++k)
      if (s.freqs[k] >= f_lo && s.freqs[k] <= f_hi) ymax = std::max(ymax, ys[k]);
    double a = f_hi, b = f_lo;
    for (std::size_t k = 1; k < s.freqs.size(); ++k)
      if (s.freqs[k] >= f_lo && s.freqs[k] <= f_hi && ys[k] > 0.1 * ymax) {
        a = std::min(a, s.freqs[k]);
        b = std::max(b, s.freqs[k]);
      }
    const double res = s.resolution > 0 ? s.resolution : s.freqs[1] - s.freqs[0];
    const double pad = 5.0 * res;
    if (b >= a) {
      win.f_min_hz = std::max(f_lo, a - pad);
      win.f_max_hz = std::min(f_hi, b + pad);
    }
  }
  e.fit = fit_spectrum(s, FitModel::two_peak, win);
  if (!e.fit.converged) throw NumericalError("extract_splitting: " + e.fit.message);
  const auto& a = e.fit.peaks[0];
  const auto& b = e.fit.peaks[1];
  const double sep = std::abs(b.omega_l - a.omega_l);
  const double height_a = czz_model(a.omega_l, a.amplitude, a.gamma, a.omega_l);
  const double height_b = czz_model(b.omega_l, b.amplitude, b.gamma, b.omega_l);
  const double weak = std::min(height_a, height_b), strong = std::max(height_a, height_b);
  if (sep < std::max(a.gamma, b.gamma) || !(strong > 0) || weak < 0.05 * strong) {
    e.splitting = 0.0;
    e.resolved = false;
    return e;
  }
  // Refine the centres with the coherent two-mode model over the full band.
  // Independent Lorentzians ignore the cross terms, which deepen the dip
  // between the lines and push the fitted centres apart.
  Coherent co;
  co.fs = s.sample_rate;
  const double f_lo = opt.f_min_hz > 0 ? opt.f_min_hz : s.freqs.at(1);
  const double f_hi = opt.f_max_hz > 0 ? opt.f_max_hz : s.freqs.back();
  for (std::size_t k = 1; k < s.freqs.size(); ++k)
    if (s.freqs[k] >= f_lo && s.freqs[k] <= f_hi) {
      co.f.push_back(s.freqs[k]);
      co.y.push_back(s.psd[k]);
    }
  const std::vector<double> ys = smooth(co.y, 2);
  const double ymax = *std::max_element(ys.begin(), ys.end());
  for (double v : ys) co.w.push_back(1.0 / std::max(v, 1e-9 * ymax));
  co.scale = kTwoPi * f_hi;
  Eigen::VectorXd u(4);
  u << std::log(a.gamma), a.omega_l / co.scale, std::log(b.gamma), b.omega_l / co.scale;
  CoherentFunctor fn{&co};
  Eigen::NumericalDiff<CoherentFunctor> nd(fn);
  Eigen::LevenbergMarquardt<Eigen::NumericalDiff<CoherentFunctor>> lm(nd);
  lm.parameters.maxfev = 2000;
  lm.minimize(u);
  const Eigen::Vector4d p = co.natural(u);
  const double sep_c = std::abs(p(3) - p(1));
  if (!u.allFinite() || sep_c < std::max(p(0), p(2))) {
    e.splitting = 0.0;
    e.resolved = false;
    return e;
  }
  e.fit.peaks[0].gamma = p(0);
  e.fit.peaks[0].omega_l = p(1);
  e.fit.peaks[1].gamma = p(2);
  e.fit.peaks[1].omega_l = p(3);
  e.splitting = sep_c;
  e.resolved = true;
  return e;
}

double lf_fraction(const Spectrum& s, const FitResult& fit) {
  if (!fit.lf.present) return 0.0;
  double lf = 0, total = 0;
  for (double f : s.freqs) {
    lf += fit.evaluate_lf(f);
    total += fit.evaluate(f);
  }
  return total > 0 ? lf / total : 0.0;
}

}  // namespace spinnoise
