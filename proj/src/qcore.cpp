#include "spinnoise/qcore.hpp"

#include <cmath>
#include <unsupported/Eigen/KroneckerProduct>

namespace spinnoise {

namespace {

Mat4 block_diag2(const Eigen::Matrix2cd& m) {
  Mat4 out = Mat4::Zero();
  out.block<2, 2>(0, 0) = m;
  out.block<2, 2>(2, 2) = m;
  return out;
}

}  // namespace

Mat4 SingleAtomOps::cartesian_plus(int a) const {
  const double s2 = std::sqrt(2.0);
  switch (a) {
    case 0: return d_plus[kPiX];
    case 1: return (d_plus[kSigmaPlus] + d_plus[kSigmaMinus]) / s2;
    case 2: return (d_plus[kSigmaPlus] - d_plus[kSigmaMinus]) / (s2 * cplx(0, 1));
    default: throw std::out_of_range("cartesian axis must be 0, 1 or 2");
  }
}

double SimulationParams::max_rate() const {
  return std::max({rabi, std::abs(detuning), larmor, gamma0});
}

void SimulationParams::validate() const {
  auto check = [](double v, const char* name, bool strictly_positive) {
    if (!std::isfinite(v) || v < 0 || (strictly_positive && v == 0))
      throw ConfigError(std::string("invalid parameter ") + name);
  };
  check(rabi, "rabi", false);
  if (!std::isfinite(detuning)) throw ConfigError("invalid parameter detuning");
  check(larmor, "larmor", false);
  check(gamma0, "gamma0", false);
  check(transit, "transit", false);
  check(noise_amplitude, "noise_amplitude", false);
  check(dt, "dt", true);
  check(trace_duration, "trace_duration", true);
  check(tau_c, "tau_c", true);
  check(density_per_cm3, "density_per_cm3", false);
  check(k0, "k0", true);
  if (trace_duration < dt) throw ConfigError("trace_duration shorter than dt");
}

SingleAtomOps build_single_atom_ops() {
  SingleAtomOps o;
  const cplx I(0, 1);
  Eigen::Matrix2cd sx, sy, sz;
  sx << -0.5, 0, 0, 0.5;
  sy << 0, -0.5, -0.5, 0;
  sz << 0, -0.5 * I, 0.5 * I, 0;
  o.sx = block_diag2(sx);
  o.sy = block_diag2(sy);
  o.sz = block_diag2(sz);

  const double pi_el = 1.0 / std::sqrt(3.0);
  const double sig_el = -std::sqrt(2.0 / 3.0);
  for (auto& m : o.d_plus) m.setZero();
  o.d_plus[kPiX](2, 0) = -pi_el;
  o.d_plus[kPiX](3, 1) = pi_el;
  o.d_plus[kSigmaPlus](3, 0) = sig_el;
  o.d_plus[kSigmaMinus](2, 1) = sig_el;
  o.d_minus[kPiX] = o.d_plus[kPiX].adjoint();
  o.d_minus[kSigmaPlus] = o.d_plus[kSigmaMinus].adjoint();
  o.d_minus[kSigmaMinus] = o.d_plus[kSigmaPlus].adjoint();

  o.ground_projector = Mat4::Zero();
  o.ground_projector(0, 0) = o.ground_projector(1, 1) = 1;
  o.excited_projector = Mat4::Identity() - o.ground_projector;
  return o;
}

const SingleAtomOps& single_atom_ops() {
  static const SingleAtomOps ops = build_single_atom_ops();
  return ops;
}

Mat4 build_single_atom_hamiltonian(const SimulationParams& p) {
  const auto& o = single_atom_ops();
  const int axis = p.polarization == Polarization::sigma ? 1 : 0;
  const Mat4 dp = o.cartesian_plus(axis);
  return p.larmor * o.sx - p.detuning * o.excited_projector - 0.5 * p.rabi * (dp + dp.adjoint());
}

double effective_rabi(const SimulationParams& p) {
  const int axis = p.polarization == Polarization::sigma ? 1 : 0;
  return p.rabi * single_atom_ops().cartesian_plus(axis).cwiseAbs().maxCoeff();
}

Mat4 dressing_unitary(const SimulationParams& p) {
  Eigen::SelfAdjointEigenSolver<Mat4> es(build_single_atom_hamiltonian(p));
  Mat4 w = Mat4::Zero();
  std::array<bool, 4> used{};
  for (int k = 0; k < 4; ++k) {
    int best = -1;
    double best_overlap = -1;
    for (int j = 0; j < 4; ++j)
      if (!used[j] && std::abs(es.eigenvectors()(k, j)) > best_overlap) {
        best_overlap = std::abs(es.eigenvectors()(k, j));
        best = j;
      }
    used[best] = true;
    const cplx ph = es.eigenvectors()(k, best) / std::abs(es.eigenvectors()(k, best));
    w.col(k) = es.eigenvectors().col(best) / ph;
  }
  return w;
}

Mat16 embed_two_atom(const Mat4& op, int which) {
  const Mat4 id = Mat4::Identity();
  if (which == 1) return Eigen::kroneckerProduct(op, id).eval();
  if (which == 2) return Eigen::kroneckerProduct(id, op).eval();
  throw std::invalid_argument("embed_two_atom: which must be 1 or 2");
}

Mat16 vdd_component(int a, int b, const SingleAtomOps& ops) {
  auto pair = [&](int u, int v) {
    const Mat4 pu = ops.cartesian_plus(u), mv = ops.cartesian_minus(v);
    return Mat16(embed_two_atom(pu, 1) * embed_two_atom(mv, 2) +
                 embed_two_atom(pu, 2) * embed_two_atom(mv, 1));
  };
  if (a == b) return pair(a, a);
  return pair(a, b) + pair(b, a);
}

Mat16 build_vdd(const CouplingTensors& t, const SingleAtomOps& ops) {
  Mat16 v = Mat16::Zero();
  for (int a = 0; a < 3; ++a)
    for (int b = a; b < 3; ++b)
      if (t.zeta(a, b) != 0.0) v += t.zeta(a, b) * vdd_component(a, b, ops);
  return v;
}

Mat16 two_atom_hamiltonian(const SimulationParams& p, const CouplingTensors& t) {
  const Mat4 h = build_single_atom_hamiltonian(p);
  return embed_two_atom(h, 1) + embed_two_atom(h, 2) + build_vdd(t, single_atom_ops());
}

Mat16 total_sz() {
  const auto& o = single_atom_ops();
  return embed_two_atom(o.sz, 1) + embed_two_atom(o.sz, 2);
}

}  // namespace spinnoise
