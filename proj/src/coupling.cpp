#include "spinnoise/coupling.hpp"

#include <cmath>

namespace spinnoise {

namespace {

constexpr double kSeriesThreshold = 1e-3;

void require_positive_xi(double xi) {
  if (!(xi > 0) || !std::isfinite(xi))
    throw std::invalid_argument("coupling: xi must be positive and finite");
}

Mat3 tensor(double iso, double aniso, const Vec3& n) {
  return iso * Mat3::Identity() + aniso * (n * n.transpose());
}

}  // namespace

Vec3 Conformation::direction() const {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

CMat3 greens_dyadic(double xi, const Vec3& n) {
  require_positive_xi(xi);
  const cplx I(0, 1);
  const cplx pref = std::exp(I * xi) / xi;
  const cplx a = 1.0 + I / xi - 1.0 / (xi * xi);
  const cplx b = -1.0 - 3.0 * I / xi + 3.0 / (xi * xi);
  return pref * (a * CMat3::Identity() + b * (n * n.transpose()).cast<cplx>());
}

CMat3 greens_dyadic(const Conformation& c, double k0) {
  return greens_dyadic(c.xi(k0), c.direction());
}

Mat3 zeta_tensor(double xi, const Vec3& n, double gamma0) {
  require_positive_xi(xi);
  double iso, aniso;
  if (xi < kSeriesThreshold) {
    const double x3 = xi * xi * xi;
    iso = 1.0 / x3 - 0.5 / xi + 0.375 * xi;
    aniso = -3.0 / x3 - 0.5 / xi - 0.125 * xi;
  } else {
    const double c = std::cos(xi), s = std::sin(xi);
    const double x2 = xi * xi, x3 = x2 * xi;
    iso = c / x3 + s / x2 - c / xi;
    aniso = c / xi - 3.0 * c / x3 - 3.0 * s / x2;
  }
  return 0.75 * gamma0 * tensor(iso, aniso, n);
}

Mat3 zeta_tensor(const Conformation& c, double k0, double gamma0) {
  return zeta_tensor(c.xi(k0), c.direction(), gamma0);
}

Mat3 gamma_tensor(double xi, const Vec3& n, double gamma0) {
  require_positive_xi(xi);
  double iso, aniso;
  const double x2 = xi * xi;
  if (xi < kSeriesThreshold) {
    iso = 2.0 / 3.0 - 2.0 * x2 / 15.0 + x2 * x2 / 140.0;
    aniso = x2 / 15.0 - x2 * x2 / 210.0;
  } else {
    const double c = std::cos(xi), s = std::sin(xi);
    const double x3 = x2 * xi;
    iso = s / xi + c / x2 - s / x3;
    aniso = -s / xi - 3.0 * c / x2 + 3.0 * s / x3;
  }
  return 0.75 * gamma0 * tensor(iso, aniso, n);
}

Mat3 gamma_tensor(const Conformation& c, double k0, double gamma0) {
  return gamma_tensor(c.xi(k0), c.direction(), gamma0);
}

CouplingTensors coupling_tensors(const Conformation& c, double k0, double gamma0) {
  const double xi = c.xi(k0);
  const Vec3 n = c.direction();
  return {zeta_tensor(xi, n, gamma0), gamma_tensor(xi, n, gamma0)};
}

double nn_inverse_cdf(double u, double density_per_cm3) {
  const double n = density_per_cm3 * 1e6;  // m^-3
  return std::cbrt(3.0 * std::log(1.0 / (1.0 - u)) / (4.0 * kPi * n));
}

double nn_cdf(double r, double density_per_cm3) {
  const double n = density_per_cm3 * 1e6;
  return 1.0 - std::exp(-4.0 / 3.0 * kPi * n * r * r * r);
}

Conformation sample_conformation(double density_per_cm3, Rng& rng, const SamplingOptions& opt) {
  if (!(density_per_cm3 > 0)) throw std::invalid_argument("sample_conformation: density must be > 0");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Conformation c;
  c.r = std::max(nn_inverse_cdf(unit(rng), density_per_cm3), opt.r_min);
  if (opt.isotropic)
    c.theta = std::acos(1.0 - 2.0 * unit(rng));
  else
    c.theta = kPi * unit(rng);
  c.phi = kTwoPi * unit(rng);
  return c;
}

double mean_nn_distance(double density_per_cm3) {
  if (!(density_per_cm3 > 0)) throw std::invalid_argument("mean_nn_distance: density must be > 0");
  return 0.55 * std::cbrt(1.0 / (density_per_cm3 * 1e6));
}

}  // namespace spinnoise
