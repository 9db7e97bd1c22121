#pragma once

#include <cstdint>
#include <random>

#include "spinnoise/types.hpp"

namespace spinnoise {

using Rng = std::mt19937_64;

// Geometry of the pair. Polar axis is z (light propagation), x is the
// magnetic-field axis.
struct Conformation {
  double r = 0.0;      // m
  double theta = 0.0;  // [0, pi]
  double phi = 0.0;    // [0, 2 pi)

  double xi(double k0) const { return k0 * r; }
  Vec3 direction() const;
};

struct CouplingTensors {
  Mat3 zeta = Mat3::Zero();   // rad/s
  Mat3 gamma = Mat3::Zero();  // rad/s
};

struct SamplingOptions {
  bool isotropic = false;  // cos(theta) uniform instead of theta uniform
  double r_min = 1e-9;
};

CMat3 greens_dyadic(double xi, const Vec3& n);
CMat3 greens_dyadic(const Conformation& c, double k0);

Mat3 zeta_tensor(double xi, const Vec3& n, double gamma0);
Mat3 zeta_tensor(const Conformation& c, double k0, double gamma0);
Mat3 gamma_tensor(double xi, const Vec3& n, double gamma0);
Mat3 gamma_tensor(const Conformation& c, double k0, double gamma0);

CouplingTensors coupling_tensors(const Conformation& c, double k0, double gamma0);

// Nearest-neighbour distance r for quantile u of P(r) at density N (cm^-3).
double nn_inverse_cdf(double u, double density_per_cm3);
double nn_cdf(double r, double density_per_cm3);

Conformation sample_conformation(double density_per_cm3, Rng& rng,
                                 const SamplingOptions& opt = {});

// 0.55 N^{-1/3}, in m.
double mean_nn_distance(double density_per_cm3);

}  // namespace spinnoise
