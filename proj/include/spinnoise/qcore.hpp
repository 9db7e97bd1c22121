#pragma once

#include <array>

#include "spinnoise/coupling.hpp"
#include "spinnoise/types.hpp"

namespace spinnoise {

enum class Polarization { sigma, pi };

// Basis in which the ground-state fluctuation operator acts.
enum class NoiseBasis { bare, dressed };

// Spherical dipole components. Index into SingleAtomOps::d_plus / d_minus.
enum Component : int { kPiX = 0, kSigmaPlus = 1, kSigmaMinus = 2 };

// Single-atom basis order: g-, g+, e-, e+ (spin projections along x).
struct SingleAtomOps {
  Mat4 sx, sy, sz;
  std::array<Mat4, 3> d_plus;   // indexed by Component
  std::array<Mat4, 3> d_minus;  // d_minus[k] = d_plus[partner(k)]^dagger
  Mat4 ground_projector, excited_projector;

  // Cartesian raising component along lab axis a (0=x, 1=y, 2=z).
  Mat4 cartesian_plus(int a) const;
  Mat4 cartesian_minus(int a) const { return cartesian_plus(a).adjoint(); }
};

struct SimulationParams {
  double rabi = kTwoPi * 150e6;       // Omega, rad/s
  double detuning = kTwoPi * 300e6;   // Delta, rad/s
  double larmor = kTwoPi * 9e6;       // omega_L, rad/s
  double gamma0 = kTwoPi * 6.0666e6;  // population decay, rad/s
  double transit = kTwoPi * 170e3;    // gamma_t, rad/s
  Polarization polarization = Polarization::sigma;
  double noise_amplitude = 30.0;      // a_f, units of sqrt(rad/s)
  NoiseBasis noise_basis = NoiseBasis::dressed;
  double dt = 10e-9;                  // sampling step, s
  double trace_duration = 20e-6;      // s
  double tau_c = 100e-9;              // s
  double density_per_cm3 = 1e12;
  double k0 = kTwoPi / kDefaultWavelength;

  double max_rate() const;
  // Throws ConfigError on negative or non-finite entries.
  void validate() const;
};

const SingleAtomOps& single_atom_ops();
SingleAtomOps build_single_atom_ops();

Mat4 build_single_atom_hamiltonian(const SimulationParams& p);

// Rabi frequency of each driven transition, Omega times the dipole element
// of the driven component (Omega / sqrt(3) for both polarizations).
double effective_rabi(const SimulationParams& p);

// Unitary W with W e_k the single-atom eigenstate closest to bare state k.
Mat4 dressing_unitary(const SimulationParams& p);

// which is 1 or 2.
Mat16 embed_two_atom(const Mat4& op, int which);

Mat16 build_vdd(const CouplingTensors& t, const SingleAtomOps& ops);
// Contribution of one symmetric tensor component (a,b) with unit weight.
Mat16 vdd_component(int a, int b, const SingleAtomOps& ops);

Mat16 two_atom_hamiltonian(const SimulationParams& p, const CouplingTensors& t);
Mat16 total_sz();

}  // namespace spinnoise
