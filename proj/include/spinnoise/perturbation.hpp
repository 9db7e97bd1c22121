#pragma once

#include <array>
#include <vector>

#include "spinnoise/coupling.hpp"
#include "spinnoise/qcore.hpp"

namespace spinnoise {

struct DressedManifold {
  double psi = 0;
  Eigen::Vector4cd minus, plus;  // single-atom dressed states
  // |--> , |s>, |u>, |++>
  std::array<Vec16, 4> pair_states;
  std::array<double, 4> energies{};  // uncoupled, rad/s
};

enum class CgMode { as_printed, with_cg };

struct ShiftPrediction {
  double alpha = 0;
  std::array<double, 4> shifts{};  // |-->, |++>, |s>, |u>
  double delta = 0;
  double omega_minus = 0, omega_plus = 0;
  CgMode cg_mode = CgMode::as_printed;
};

struct SpectralLine {
  double frequency = 0;  // rad/s, positive
  double weight = 0;     // |<a|S_z|b>|^2
};

struct ManifoldLines {
  std::vector<SpectralLine> lines;  // sorted by frequency
  bool gap_warning = false;
  // Distance between the two strongest lines (0 if only one).
  double splitting() const;
};

double mixing_angle(double rabi, double detuning);
double alpha(double rabi, double detuning);

// Built with the effective (CG-weighted) Rabi frequency of the simulated
// Hamiltonian.
DressedManifold dressed_manifold(const SimulationParams& p);
// alpha evaluated at the effective Rabi frequency; pairs with CgMode::with_cg.
double cg_alpha(const SimulationParams& p);

ShiftPrediction dd_shifts(const CouplingTensors& t, double alpha, CgMode mode,
                          double omega_l = 0);

ManifoldLines ground_manifold_frequencies(const SimulationParams& p, const Conformation& c);
ManifoldLines ground_manifold_frequencies(const SimulationParams& p, const CouplingTensors& t);

Eigen::Matrix2d reduced_vdd(const CouplingTensors& t, double alpha);

}  // namespace spinnoise
