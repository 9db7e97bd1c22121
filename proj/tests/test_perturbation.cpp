#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "spinnoise/perturbation.hpp"

using namespace spinnoise;

namespace {

CouplingTensors diag_tensors(double xx, double yy, double zz) {
  CouplingTensors t;
  t.zeta.diagonal() << xx, yy, zz;
  return t;
}

CouplingTensors on_axis(const SimulationParams& p, double xi, double theta = 0) {
  return coupling_tensors(Conformation{xi / p.k0, theta, 0}, p.k0, p.gamma0);
}

double exact_splitting(const SimulationParams& p, double xi, double theta = 0) {
  return ground_manifold_frequencies(p, on_axis(p, xi, theta)).splitting();
}

// Two-atom swap of the tensor factors.
Mat16 swap_op() {
  Mat16 s = Mat16::Zero();
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) s(4 * b + a, 4 * a + b) = 1;
  return s;
}

}  // namespace

TEST_CASE("mixing angle and alpha") {
  const double d = kTwoPi * 300e6;
  CHECK(mixing_angle(0.0, d) == 0.0);
  CHECK(mixing_angle(2 * d, d) == doctest::Approx(kPi / 2).epsilon(1e-14));
  CHECK(mixing_angle(kTwoPi * 150e6, d) == doctest::Approx(0.4900).epsilon(1e-4));
  CHECK(mixing_angle(kTwoPi * 150e6, d) == doctest::Approx(2 * std::atan(0.25)).epsilon(1e-14));
  CHECK_THROWS(mixing_angle(1.0, 0.0));

  CHECK(alpha(0.0, d) == 0.0);
  CHECK(alpha(kTwoPi * 150e6, d) == doctest::Approx(0.05536).epsilon(1e-3));
  for (double r : {0.1, 0.03, 0.01}) {
    const double om = r * d, lim = om * om / (4 * d * d);
    CHECK(std::abs(alpha(om, d) / lim - 1) < r * r);
  }
  SimulationParams p;
  CHECK(cg_alpha(p) == doctest::Approx(alpha(effective_rabi(p), p.detuning)));
}

TEST_CASE("dressed manifold") {
  SimulationParams p;
  const auto m = dressed_manifold(p);
  CHECK(m.psi == doctest::Approx(mixing_angle(effective_rabi(p), p.detuning)));
  CHECK(std::abs(m.minus.squaredNorm() - 1) < 1e-12);
  CHECK(std::abs(m.plus.squaredNorm() - 1) < 1e-12);
  CHECK(std::abs(m.minus.dot(m.plus)) < 1e-12);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(std::abs(m.pair_states[i].dot(m.pair_states[j]) - (i == j ? 1.0 : 0.0)) < 1e-12);
  const Mat16 sw = swap_op();
  CHECK((sw * m.pair_states[1] - m.pair_states[1]).norm() < 1e-12);
  CHECK((sw * m.pair_states[2] + m.pair_states[2]).norm() < 1e-12);
  // |u> does not couple to the others through S_z
  const Mat16 sz = total_sz();
  for (int a = 0; a < 4; ++a) CHECK(std::norm(m.pair_states[2].dot(sz * m.pair_states[a])) < 1e-24);
  CHECK(std::norm(m.pair_states[0].dot(sz * m.pair_states[1])) > 0.1);
}

TEST_CASE("closed-form shifts") {
  const double a = 0.01;
  SUBCASE("invariants") {
    for (auto mode : {CgMode::as_printed, CgMode::with_cg}) {
      const auto s = dd_shifts(diag_tensors(3.0e7, -1.0e7, 4.0e7), a, mode, kTwoPi * 9e6);
      CHECK(s.shifts[0] == s.shifts[1]);
      CHECK(s.omega_plus - s.omega_minus == doctest::Approx(2 * s.delta));
      CHECK(s.omega_plus + s.omega_minus == doctest::Approx(2 * kTwoPi * 9e6));
      CHECK(s.cg_mode == mode);
    }
    // delta = 2 alpha |zeta_zz - zeta_xx| as printed
    const auto s = dd_shifts(diag_tensors(3.0e7, -1.0e7, 4.0e7), a, CgMode::as_printed);
    CHECK(s.delta == doctest::Approx(2 * a * 1.0e7));
    CHECK(s.shifts[2] == doctest::Approx(a * (-1.0e7 - 4.0e7 + 6.0e7)));
  }
  SUBCASE("zeta_zz = zeta_xx gives no splitting") {
    CHECK(dd_shifts(diag_tensors(2e7, 5e6, 2e7), a, CgMode::as_printed).delta == 0.0);
  }
  SUBCASE("non-diagonal zeta rejected") {
    SimulationParams p;
    CHECK_THROWS_AS(dd_shifts(on_axis(p, 0.7, 0.6), a, CgMode::with_cg), std::invalid_argument);
    CHECK_NOTHROW(dd_shifts(on_axis(p, 0.7, 0.0), a, CgMode::with_cg));
  }
  SUBCASE("density sweep reaches several MHz") {
    SimulationParams p;
    double last = 0;
    for (double n : {1e13, 3e13, 1e14, 2e14, 3e14, 5e14}) {
      const auto t = coupling_tensors(Conformation{mean_nn_distance(n), 0, 0}, p.k0, p.gamma0);
      const double split = 2 * dd_shifts(t, cg_alpha(p), CgMode::with_cg).delta / kTwoPi;
      CHECK(split > last);
      last = split;
    }
    CHECK(last > 2e6);
  }
}

TEST_CASE("reduced interaction matrix") {
  const auto t = diag_tensors(3.0e7, -1.0e7, 4.0e7);
  const Eigen::Matrix2d m = reduced_vdd(t, 0.02);
  CHECK(m(0, 1) == m(1, 0));
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(m);
  const auto s = dd_shifts(t, 0.02, CgMode::as_printed);
  CHECK(es.eigenvalues()(0) == doctest::Approx(std::min(s.shifts[2], s.shifts[3])));
  CHECK(es.eigenvalues()(1) == doctest::Approx(std::max(s.shifts[2], s.shifts[3])));
  for (int k = 0; k < 2; ++k) CHECK(std::abs(std::abs(es.eigenvectors()(0, k)) - std::sqrt(0.5)) < 1e-12);
  const Eigen::Matrix2d m0 = reduced_vdd(diag_tensors(0.0, 1e7, 2e7), 0.02);
  CHECK(m0(0, 1) == 0.0);
  CHECK(m0(0, 0) == m0(1, 1));
}

TEST_CASE("exact ground-manifold lines") {
  SimulationParams p;
  SUBCASE("no coupling: one line") {
    const auto lines = ground_manifold_frequencies(p, CouplingTensors{});
    REQUIRE_FALSE(lines.lines.empty());
    const double f0 = lines.lines.front().frequency;
    for (const auto& l : lines.lines)
      if (l.weight > 1e-6) CHECK(l.frequency == doctest::Approx(f0).epsilon(1e-9));
    CHECK(lines.splitting() < 1e-9 * f0);
    CHECK_FALSE(lines.gap_warning);
  }
  SUBCASE("theta = 0: symmetric doublet about the uncoupled line") {
    const double f0 = ground_manifold_frequencies(p, CouplingTensors{}).lines.front().frequency;
    const auto lines = ground_manifold_frequencies(p, on_axis(p, 0.7));
    std::vector<SpectralLine> strong = lines.lines;
    std::sort(strong.begin(), strong.end(), [](auto& a, auto& b) { return a.weight > b.weight; });
    const double mid = 0.5 * (strong[0].frequency + strong[1].frequency);
    CHECK(std::abs(mid - f0) < 0.02 * lines.splitting());
  }
  SUBCASE("|u> carries no weight") {
    const Mat16 h = two_atom_hamiltonian(p, on_axis(p, 0.7));
    Eigen::SelfAdjointEigenSolver<Mat16> es(h);
    const auto m = dressed_manifold(p);
    int iu = 0;
    for (int k = 0; k < 16; ++k)
      if (std::norm(m.pair_states[2].dot(es.eigenvectors().col(k))) >
          std::norm(m.pair_states[2].dot(es.eigenvectors().col(iu))))
        iu = k;
    CHECK(std::norm(m.pair_states[2].dot(es.eigenvectors().col(iu))) > 0.9);
    // ground manifold: the four eigenstates with the largest ground weight
    const auto& o = single_atom_ops();
    const Mat16 pg = embed_two_atom(o.ground_projector, 1) * embed_two_atom(o.ground_projector, 2);
    std::vector<std::pair<double, int>> gw;
    for (int k = 0; k < 16; ++k) gw.push_back({(pg * es.eigenvectors().col(k)).squaredNorm(), k});
    std::sort(gw.rbegin(), gw.rend());
    const Mat16 sz = total_sz();
    int found = 0;
    for (int i = 0; i < 4; ++i) {
      const int k = gw[i].second;
      if (k == iu) {
        ++found;
        continue;
      }
      CHECK(std::norm(es.eigenvectors().col(k).dot(sz * es.eigenvectors().col(iu))) < 1e-20);
    }
    CHECK(found == 1);
  }
}

TEST_CASE("exact diagonalization vs closed form, weak drive") {
  // Omega / Delta <= 0.1, xi in [0.5, 1], theta = 0
  for (double r : {0.01, 0.03, 0.1})
    for (double xi : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
      SimulationParams p;
      p.rabi = r * p.detuning;
      const double ex = exact_splitting(p, xi);
      const double cg = 2 * dd_shifts(on_axis(p, xi), cg_alpha(p), CgMode::with_cg).delta;
      CAPTURE(r);
      CAPTURE(xi);
      CHECK(std::abs(ex / cg - 1) < 0.05);
    }
}

TEST_CASE("closed form converges as zeta / Delta shrinks") {
  // the residual at small xi is first order in zeta / Delta
  double last = 1;
  for (double scale : {1.0, 3.0, 10.0, 30.0}) {
    SimulationParams p;
    p.detuning *= scale;
    p.rabi = 0.05 * p.detuning;
    const double ex = exact_splitting(p, 0.5);
    const double cg = 2 * dd_shifts(on_axis(p, 0.5), cg_alpha(p), CgMode::with_cg).delta;
    const double err = std::abs(ex / cg - 1);
    CHECK(err < last);
    last = err;
  }
  CHECK(last < 0.01);
}

TEST_CASE("density grid at the default drive") {
  SimulationParams p;
  for (double n : {1e13, 3e13, 1e14, 2e14, 3e14}) {
    const double xi = p.k0 * mean_nn_distance(n);
    const double ex = exact_splitting(p, xi);
    const double cg = 2 * dd_shifts(on_axis(p, xi), cg_alpha(p), CgMode::with_cg).delta;
    CAPTURE(n);
    CHECK(std::abs(ex / cg - 1) < 0.05);
  }
}

TEST_CASE("splitting scales as Omega squared") {
  for (double xi : {0.5, 0.7, 1.0}) {
    std::vector<double> x, y;
    for (int i = 0; i < 10; ++i) {
      SimulationParams p;
      const double r = 0.01 * std::pow(10.0, i / 9.0);
      p.rabi = r * p.detuning;
      x.push_back(std::log(r));
      y.push_back(std::log(exact_splitting(p, xi)));
    }
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
    }
    CAPTURE(xi);
    CHECK(sxy / sxx == doctest::Approx(2.0).epsilon(0.025));
  }
}

TEST_CASE("angular dependence") {
  SimulationParams p;
  for (double xi : {0.5, 0.7, 1.0}) {
    const double s0 = exact_splitting(p, xi), s45 = exact_splitting(p, xi, kPi / 4);
    CAPTURE(xi);
    CHECK(s45 < 0.1 * s0);
  }
}

TEST_CASE("pi drive splits less than sigma drive") {
  for (double xi : {0.5, 0.7, 1.0}) {
    SimulationParams s, q;
    q.polarization = Polarization::pi;
    CAPTURE(xi);
    CHECK(exact_splitting(q, xi) < exact_splitting(s, xi));
  }
}
