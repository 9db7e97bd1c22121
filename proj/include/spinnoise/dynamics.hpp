#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "spinnoise/coupling.hpp"
#include "spinnoise/qcore.hpp"
#include "spinnoise/types.hpp"

namespace spinnoise {

// Superoperator acting on column-stacked vec(rho), 256 x 256.
using SuperOp = Eigen::MatrixXcd;

SuperOp liouvillian(const SimulationParams& p, const CouplingTensors& t);
SuperOp liouvillian(const SimulationParams& p, const Conformation& c);

// L[rho] evaluated in matrix form, without building the superoperator.
Mat16 apply_liouvillian(const SimulationParams& p, const CouplingTensors& t, const Mat16& rho);

Eigen::VectorXcd vectorize(const Mat16& rho);
Mat16 unvectorize(const Eigen::VectorXcd& v);

// Null-space solve with the trace row appended. Throws NumericalError if
// the null space of L is not one-dimensional.
Mat16 steady_state(const SuperOp& L);
// Long-time propagation from rho0 until ||L rho|| <= tol * ||L||.
Mat16 steady_state_by_propagation(const SuperOp& L, const Mat16& rho0, double tol = 1e-13);

// Unpolarized ground state of a single atom, tensored for two atoms.
Mat16 thermal_state();

// Per-atom ground-manifold fluctuation operator for six standard normal
// draws (atom 1: xi[0..2], atom 2: xi[3..5]). With a dressing unitary w the
// same operator acts on the light-dressed ground sublevels.
Mat16 noise_operator(const std::array<double, 6>& xi, double a_f,
                     const Mat4& w = Mat4::Identity());
// f * sqrt(dt) with fresh draws.
Mat16 noise_increment(Rng& rng, double a_f, double dt, const Mat4& w = Mat4::Identity());
Mat4 noise_frame(const SimulationParams& p);

// Two-atom map for the fluctuation operator in the dressed basis, built from
// the current state rho. frame is the product of single-atom frames followed
// by the minimal rotation taking the product ground-ground subspace onto the
// four most populated eigenvectors of rho; the rotated operator is then
// weighted by 2 sqrt(rho) on that manifold and made traceless. For the bare
// basis only the (identity) frame is used.
struct NoiseMap {
  bool dressed = false;
  Eigen::Matrix<cplx, 16, 4> v;  // populated eigenvectors of rho
  Eigen::Vector4d lambda;        // their populations
  Eigen::Matrix4cd polar;        // ground-ground coordinates -> v coordinates
};
NoiseMap pair_noise_map(const SimulationParams& p, const Mat16& rho);
Mat16 noise_operator(const std::array<double, 6>& xi, double a_f, const NoiseMap& m);

enum class TraceMode { static_geometry, dynamic, ou_reference };
enum class Integrator { propagator, rk4 };

struct ConformationEvent {
  double time = 0.0;
  Conformation conformation;
};

struct HygieneReport {
  double max_trace_error = 0.0;          // post renormalization
  double max_hermiticity_defect = 0.0;   // pre symmetrization
  double min_eigenvalue = 1.0;
  std::size_t negative_eigenvalue_events = 0;  // eigenvalue < -1e-6
  std::size_t checks = 0;

  void merge(const HygieneReport& o);
  bool ok() const;
};

struct TimeTrace {
  double dt = 0.0;
  std::vector<double> samples;
  std::vector<ConformationEvent> conformation_log;
  std::uint64_t seed = 0;
  TraceMode mode = TraceMode::static_geometry;
  HygieneReport hygiene;
};

struct TraceOptions {
  TraceMode mode = TraceMode::static_geometry;
  Integrator integrator = Integrator::propagator;
  // Static mode: fixed geometry. When absent one conformation is drawn
  // from the density at the start of the trace.
  std::optional<Conformation> conformation;
  SamplingOptions sampling;
  bool monitor_eigenvalues = true;
  // RK4 substeps per sampling step; 0 picks the smallest count meeting
  // h * max_rate <= 0.1.
  int rk4_substeps = 0;
};

// Exchange-symmetry block representation of the Liouvillian in real
// Hermitian coordinates. Built once per parameter set; cheap to specialise
// per conformation.
class BlockLiouvillian {
 public:
  explicit BlockLiouvillian(const SimulationParams& p);

  static constexpr int kSym = 136;
  static constexpr int kAnti = 120;

  struct Propagator {
    Eigen::MatrixXd sym, anti;
  };

  Eigen::MatrixXd sym_block(const CouplingTensors& t) const;
  Eigen::MatrixXd anti_block(const CouplingTensors& t) const;
  Propagator propagator(const CouplingTensors& t, double h, bool with_anti = true) const;
  Eigen::VectorXd steady_state_sym(const CouplingTensors& t) const;

  // Coordinates <-> density matrix.
  Mat16 to_matrix(const Eigen::VectorXd& xs, const Eigen::VectorXd& xa) const;
  void from_matrix(const Mat16& rho, Eigen::VectorXd& xs, Eigen::VectorXd& xa) const;

  const Eigen::VectorXd& sz_sym() const { return sz_s_; }
  const Eigen::VectorXd& trace_sym() const { return tr_s_; }

 private:
  Eigen::MatrixXd l0_s_, l0_a_;
  std::array<Eigen::MatrixXd, 6> zs_, za_, cs_, ca_;
  Eigen::MatrixXd basis_to_s_, basis_to_a_;  // 256 x 136, 256 x 120
  Eigen::VectorXd sz_s_, tr_s_;
};

TimeTrace simulate_trace(const SimulationParams& p, const TraceOptions& opt, std::uint64_t seed);

// Same, reusing a prebuilt block model (must match p).
TimeTrace simulate_trace(const SimulationParams& p, const BlockLiouvillian& model,
                         const TraceOptions& opt, std::uint64_t seed);

// substeps = 0 chooses the Euler-Maruyama substep so that the damping bias
// (gamma^2 + omega^2) h / 2 stays below 1% of gamma.
TimeTrace ou_reference_trace(double gamma, double omega_l, double amplitude, double dt,
                             double duration, std::uint64_t seed, int substeps = 0);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace spinnoise
