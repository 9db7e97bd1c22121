#include "spinnoise/perturbation.hpp"

#include <algorithm>
#include <cmath>

#include <unsupported/Eigen/KroneckerProduct>

namespace spinnoise {

double mixing_angle(double rabi, double detuning) {
  if (detuning == 0.0) throw std::invalid_argument("mixing_angle: detuning must be nonzero");
  return 2.0 * std::atan(rabi / (2.0 * detuning));
}

double alpha(double rabi, double detuning) {
  const double o2 = rabi * rabi, d2 = detuning * detuning;
  const double den = o2 / 4.0 + d2;
  if (!(den > 0)) throw std::invalid_argument("alpha: Omega and Delta both zero");
  return (o2 * d2 / 4.0) / (den * den);
}

double cg_alpha(const SimulationParams& p) { return alpha(effective_rabi(p), p.detuning); }

DressedManifold dressed_manifold(const SimulationParams& p) {
  DressedManifold m;
  const double rabi = effective_rabi(p);
  m.psi = mixing_angle(rabi, p.detuning);
  const double c = std::cos(m.psi / 2), s = std::sin(m.psi / 2);
  m.minus.setZero();
  m.plus.setZero();
  m.minus(0) = c;
  m.plus(1) = c;
  if (p.polarization == Polarization::sigma) {
    m.minus(3) = s;
    m.plus(2) = s;
  } else {
    m.minus(2) = s;
    m.plus(3) = -s;
  }
  const Vec16 mm = Eigen::kroneckerProduct(m.minus, m.minus).eval();
  const Vec16 pp = Eigen::kroneckerProduct(m.plus, m.plus).eval();
  const Vec16 pm = Eigen::kroneckerProduct(m.plus, m.minus).eval();
  const Vec16 mp = Eigen::kroneckerProduct(m.minus, m.plus).eval();
  const double r2 = 1.0 / std::sqrt(2.0);
  m.pair_states = {mm, r2 * (pm + mp), r2 * (pm - mp), pp};
  // Rotating frame with the excited manifold at -Delta.
  const double ls = 0.5 * (std::sqrt(p.detuning * p.detuning + rabi * rabi) - std::abs(p.detuning)) *
                    (p.detuning > 0 ? 1.0 : -1.0);
  m.energies = {-p.larmor + 2 * ls, 2 * ls, 2 * ls, p.larmor + 2 * ls};
  return m;
}

ShiftPrediction dd_shifts(const CouplingTensors& t, double a, CgMode mode, double omega_l) {
  const Mat3& z = t.zeta;
  const double scale = z.cwiseAbs().maxCoeff();
  const double off = std::max({std::abs(z(0, 1)), std::abs(z(0, 2)), std::abs(z(1, 2))});
  if (off > 1e-9 * scale) throw std::invalid_argument("dd_shifts: zeta must be diagonal");
  const double zxx = z(0, 0), zyy = z(1, 1), zzz = z(2, 2);
  ShiftPrediction s;
  s.alpha = a;
  s.cg_mode = mode;
  if (mode == CgMode::as_printed) {
    s.shifts = {a * (zyy + zzz), a * (zyy + zzz), a * (zyy - zzz + 2 * zxx),
                a * (zyy - zzz - 2 * zxx)};
  } else {
    // sigma-branch couplings carry 2/3, the x-branch exchange 1/3.
    const double sg = 2.0 / 3.0, px = 1.0 / 3.0;
    s.shifts = {a * sg * (zyy + zzz), a * sg * (zyy + zzz), a * (sg * (zyy - zzz) + px * 2 * zxx),
                a * (sg * (zyy - zzz) - px * 2 * zxx)};
  }
  s.delta = std::abs(s.shifts[2] - s.shifts[0]);
  s.omega_minus = omega_l - s.delta;
  s.omega_plus = omega_l + s.delta;
  return s;
}

double ManifoldLines::splitting() const {
  if (lines.size() < 2) return 0.0;
  std::vector<SpectralLine> byw = lines;
  std::sort(byw.begin(), byw.end(), [](const auto& a, const auto& b) { return a.weight > b.weight; });
  return std::abs(byw[0].frequency - byw[1].frequency);
}

ManifoldLines ground_manifold_frequencies(const SimulationParams& p, const CouplingTensors& t) {
  const Mat16 h = two_atom_hamiltonian(p, t);
  Eigen::SelfAdjointEigenSolver<Mat16> es(h);
  const auto& ops = single_atom_ops();
  const Mat16 pg = embed_two_atom(ops.ground_projector, 1) * embed_two_atom(ops.ground_projector, 2);
  std::array<int, 16> order;
  std::array<double, 16> weight;
  for (int k = 0; k < 16; ++k) {
    order[k] = k;
    weight[k] = (pg * es.eigenvectors().col(k)).squaredNorm();
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) { return weight[a] > weight[b]; });

  ManifoldLines out;
  const double wl = std::max(p.larmor, 1e-300);
  for (int i = 0; i < 4; ++i)
    for (int j = 4; j < 16; ++j)
      if (std::abs(es.eigenvalues()(order[i]) - es.eigenvalues()(order[j])) < 10.0 * wl)
        out.gap_warning = true;

  const Mat16 sz = total_sz();
  double wmax = 0;
  std::vector<SpectralLine> all;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      const auto va = es.eigenvectors().col(order[i]);
      const auto vb = es.eigenvectors().col(order[j]);
      const double w = std::norm(va.dot(sz * vb));
      const double f = std::abs(es.eigenvalues()(order[i]) - es.eigenvalues()(order[j]));
      all.push_back({f, w});
      wmax = std::max(wmax, w);
    }
  for (const auto& l : all)
    if (l.weight > 1e-8 * wmax) out.lines.push_back(l);
  std::sort(out.lines.begin(), out.lines.end(),
            [](const auto& a, const auto& b) { return a.frequency < b.frequency; });
  return out;
}

ManifoldLines ground_manifold_frequencies(const SimulationParams& p, const Conformation& c) {
  return ground_manifold_frequencies(p, coupling_tensors(c, p.k0, p.gamma0));
}

Eigen::Matrix2d reduced_vdd(const CouplingTensors& t, double a) {
  const Mat3& z = t.zeta;
  Eigen::Matrix2d m;
  m << z(1, 1) - z(2, 2), 2 * z(0, 0), 2 * z(0, 0), z(1, 1) - z(2, 2);
  return a * m;
}

}  // namespace spinnoise
