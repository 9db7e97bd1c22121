#include "spinnoise/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

namespace spinnoise {

namespace {

constexpr int kDim = 16;
constexpr int kVec = 256;
constexpr double kNegativeEigenvalueLimit = -1e-6;

// Symmetric tensor components in the order used throughout this file.
constexpr std::array<std::pair<int, int>, 6> kComponents{
    {{0, 0}, {1, 1}, {2, 2}, {0, 1}, {0, 2}, {1, 2}}};

const SuperOp& identity_superop() {
  static const SuperOp id = SuperOp::Identity(kVec, kVec);
  return id;
}

// Raising operator A_mu for mu = 3 * atom + axis.
Mat16 raising(int mu) {
  return embed_two_atom(single_atom_ops().cartesian_plus(mu % 3), mu / 3 + 1);
}

SuperOp kron(const Mat16& a, const Mat16& b) {
  return Eigen::kroneckerProduct(Eigen::MatrixXcd(a), Eigen::MatrixXcd(b)).eval();
}
SuperOp left(const Mat16& a) { return kron(Mat16::Identity(), a); }
SuperOp right(const Mat16& b) { return kron(b.transpose(), Mat16::Identity()); }

SuperOp commutator_superop(const Mat16& h) {
  return cplx(0, -1) * (left(h) - right(h));
}

// 2 A_nu^+ rho A_mu - A_mu A_nu^+ rho - rho A_mu A_nu^+
SuperOp dissipator_term(int mu, int nu) {
  const Mat16 am = raising(mu);
  const Mat16 an_dag = raising(nu).adjoint();
  const Mat16 prod = am * an_dag;
  return 2.0 * kron(am.transpose(), an_dag) - left(prod) - right(prod);
}

// gamma_t * sum_i (tau_i (x) Tr_i rho - rho)
SuperOp transit_superop(double rate) {
  SuperOp s = SuperOp::Zero(kVec, kVec);
  if (rate == 0.0) return s;
  auto idx = [](int a, int b, int a2, int b2) { return (4 * a + b) + kDim * (4 * a2 + b2); };
  for (int g = 0; g < 2; ++g) {
    for (int b = 0; b < 4; ++b)
      for (int b2 = 0; b2 < 4; ++b2)
        for (int k = 0; k < 4; ++k) {
          // atom 1 replaced by tau
          s(idx(g, b, g, b2), idx(k, b, k, b2)) += 0.5 * rate;
          // atom 2 replaced by tau
          s(idx(b, g, b2, g), idx(b, k, b2, k)) += 0.5 * rate;
        }
  }
  s -= 2.0 * rate * identity_superop();
  return s;
}

Mat16 transit_apply(double rate, const Mat16& rho) {
  Mat16 out = -2.0 * rate * rho;
  if (rate == 0.0) return out;
  Mat4 tr1 = Mat4::Zero(), tr2 = Mat4::Zero();
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int k = 0; k < 4; ++k) {
        tr1(a, b) += rho(4 * k + a, 4 * k + b);
        tr2(a, b) += rho(4 * a + k, 4 * b + k);
      }
  const Mat4 tau = 0.5 * single_atom_ops().ground_projector;
  out += rate * (embed_two_atom(tau, 1) * embed_two_atom(tr1, 2) +
                 embed_two_atom(tr2, 1) * embed_two_atom(tau, 2));
  return out;
}

struct SuperopPieces {
  std::array<SuperOp, 6> z;  // -i[V_ab, .]
  std::array<SuperOp, 6> c;  // collective dissipation for gamma_ab
};

const SuperopPieces& pieces() {
  static const SuperopPieces p = [] {
    SuperopPieces out;
    const auto& ops = single_atom_ops();
    for (int k = 0; k < 6; ++k) {
      const auto [a, b] = kComponents[k];
      out.z[k] = commutator_superop(vdd_component(a, b, ops));
      SuperOp c = dissipator_term(a, 3 + b) + dissipator_term(3 + b, a);
      if (a != b) c += dissipator_term(b, 3 + a) + dissipator_term(3 + a, b);
      out.c[k] = c;
    }
    return out;
  }();
  return p;
}

SuperOp static_liouvillian(const SimulationParams& p) {
  const Mat4 h1 = build_single_atom_hamiltonian(p);
  SuperOp l = commutator_superop(embed_two_atom(h1, 1) + embed_two_atom(h1, 2));
  for (int mu = 0; mu < 6; ++mu) l += 0.5 * p.gamma0 * dissipator_term(mu, mu);
  l += transit_superop(p.transit);
  return l;
}

// Lindblad form with diagonalized rate matrix, used for the matrix-form path.
struct MatrixLindblad {
  Mat16 h;
  std::vector<double> rates;
  std::vector<Mat16> jumps, jump_dag, jdj;
  double transit;

  MatrixLindblad(const SimulationParams& p, const CouplingTensors& t) : transit(p.transit) {
    h = two_atom_hamiltonian(p, t);
    Eigen::Matrix<double, 6, 6> g;
    g.setZero();
    g.topLeftCorner<3, 3>() = 0.5 * p.gamma0 * Mat3::Identity();
    g.bottomRightCorner<3, 3>() = 0.5 * p.gamma0 * Mat3::Identity();
    g.topRightCorner<3, 3>() = t.gamma;
    g.bottomLeftCorner<3, 3>() = t.gamma.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(g);
    std::array<Mat16, 6> a_dag;
    for (int mu = 0; mu < 6; ++mu) a_dag[mu] = raising(mu).adjoint();
    for (int k = 0; k < 6; ++k) {
      Mat16 lk = Mat16::Zero();
      for (int nu = 0; nu < 6; ++nu) lk += es.eigenvectors()(nu, k) * a_dag[nu];
      rates.push_back(es.eigenvalues()(k));
      jumps.push_back(lk);
      jump_dag.push_back(lk.adjoint());
      jdj.push_back(lk.adjoint() * lk);
    }
  }

  Mat16 apply(const Mat16& rho) const {
    const cplx mi(0, -1);
    Mat16 out = mi * (h * rho - rho * h);
    for (std::size_t k = 0; k < rates.size(); ++k)
      out += rates[k] * (2.0 * jumps[k] * rho * jump_dag[k] - jdj[k] * rho - rho * jdj[k]);
    out += transit_apply(transit, rho);
    return out;
  }
};

double max_abs_eigen(const Mat3& m) {
  return Eigen::SelfAdjointEigenSolver<Mat3>(m).eigenvalues().cwiseAbs().maxCoeff();
}

Mat4 ground_pauli(int axis) {
  const auto& o = single_atom_ops();
  const Mat4& s = axis == 0 ? o.sx : (axis == 1 ? o.sy : o.sz);
  return 2.0 * o.ground_projector * s * o.ground_projector;
}

}  // namespace

SuperOp liouvillian(const SimulationParams& p, const CouplingTensors& t) {
  SuperOp l = static_liouvillian(p);
  const auto& pc = pieces();
  for (int k = 0; k < 6; ++k) {
    const auto [a, b] = kComponents[k];
    if (t.zeta(a, b) != 0.0) l += t.zeta(a, b) * pc.z[k];
    if (t.gamma(a, b) != 0.0) l += t.gamma(a, b) * pc.c[k];
  }
  return l;
}

SuperOp liouvillian(const SimulationParams& p, const Conformation& c) {
  return liouvillian(p, coupling_tensors(c, p.k0, p.gamma0));
}

Mat16 apply_liouvillian(const SimulationParams& p, const CouplingTensors& t, const Mat16& rho) {
  return MatrixLindblad(p, t).apply(rho);
}

Eigen::VectorXcd vectorize(const Mat16& rho) {
  return Eigen::Map<const Eigen::VectorXcd>(rho.data(), kVec);
}

Mat16 unvectorize(const Eigen::VectorXcd& v) {
  if (v.size() != kVec) throw std::invalid_argument("unvectorize: expected 256 entries");
  return Eigen::Map<const Mat16>(v.data());
}

Mat16 thermal_state() {
  const Mat4 tau = 0.5 * single_atom_ops().ground_projector;
  return Eigen::kroneckerProduct(tau, tau).eval();
}

Mat16 steady_state(const SuperOp& L) {
  Eigen::BDCSVD<SuperOp> svd(L);
  const auto& sv = svd.singularValues();
  if (sv(kVec - 2) < 1e-10 * sv(0)) {
    std::ostringstream msg;
    msg << "steady_state: degenerate null space (second smallest singular value "
        << sv(kVec - 2) << ", largest " << sv(0) << ")";
    throw NumericalError(msg.str());
  }
  SuperOp a(kVec + 1, kVec);
  a.topRows(kVec) = L;
  a.row(kVec) = vectorize(Mat16::Identity()).transpose();
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(kVec + 1);
  rhs(kVec) = 1.0;
  Eigen::VectorXcd x = a.colPivHouseholderQr().solve(rhs);
  Mat16 rho = unvectorize(x);
  rho = 0.5 * (rho + rho.adjoint()).eval();
  return rho / rho.trace().real();
}

Mat16 steady_state_by_propagation(const SuperOp& L, const Mat16& rho0, double tol) {
  const double lnorm = L.cwiseAbs().rowwise().sum().maxCoeff();
  double h = 1.0 / lnorm;
  SuperOp e = (L * h).exp();
  Eigen::VectorXcd v = vectorize(rho0);
  for (int it = 0; it < 200; ++it) {
    v = e * v;
    v /= unvectorize(v).trace();
    if ((L * v).norm() <= tol * lnorm * v.norm()) {
      Mat16 rho = unvectorize(v);
      rho = 0.5 * (rho + rho.adjoint()).eval();
      return rho / rho.trace().real();
    }
    if (it < 60) e = (e * e).eval();
  }
  throw NumericalError("steady_state_by_propagation: no convergence");
}

Mat16 noise_operator(const std::array<double, 6>& xi, double a_f, const Mat4& w) {
  Mat4 f1 = Mat4::Zero(), f2 = Mat4::Zero();
  for (int m = 0; m < 3; ++m) {
    const Mat4 s = ground_pauli(m);
    f1 += xi[m] * s;
    f2 += xi[3 + m] * s;
  }
  f1 = w * f1 * w.adjoint();
  f2 = w * f2 * w.adjoint();
  const Mat4 pg = w * single_atom_ops().ground_projector * w.adjoint();
  return a_f * (embed_two_atom(f1, 1) * embed_two_atom(pg, 2) +
                embed_two_atom(pg, 1) * embed_two_atom(f2, 2));
}

Mat16 noise_increment(Rng& rng, double a_f, double dt, const Mat4& w) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<double, 6> xi;
  for (auto& x : xi) x = normal(rng);
  return std::sqrt(dt) * noise_operator(xi, a_f, w);
}

Mat4 noise_frame(const SimulationParams& p) {
  return p.noise_basis == NoiseBasis::dressed ? dressing_unitary(p) : Mat4::Identity();
}

NoiseMap pair_noise_map(const SimulationParams& p, const Mat16& rho) {
  NoiseMap m;
  m.dressed = p.noise_basis == NoiseBasis::dressed;
  if (!m.dressed) return m;
  const Mat4 w = noise_frame(p);
  Eigen::Matrix<cplx, 16, 4> src;
  const int gg[4] = {0, 1, 4, 5};
  for (int c = 0; c < 4; ++c) {
    const Eigen::Vector4cd ua = w.col(gg[c] / 4), ub = w.col(gg[c] % 4);
    src.col(c) = Eigen::kroneckerProduct(ua, ub).eval();
  }
  Eigen::SelfAdjointEigenSolver<Mat16> es(rho);
  // eigenvalues ascending; the top four span the populated manifold
  m.v = es.eigenvectors().rightCols<4>();
  m.lambda = es.eigenvalues().tail<4>().cwiseMax(0.0);
  // Minimal rotation of span(src) onto span(v): polar factor of v^dagger src.
  Eigen::JacobiSVD<Eigen::Matrix4cd> svd(m.v.adjoint() * src, Eigen::ComputeFullU | Eigen::ComputeFullV);
  m.polar = svd.matrixU() * svd.matrixV().adjoint();
  return m;
}

Mat16 noise_operator(const std::array<double, 6>& xi, double a_f, const NoiseMap& m) {
  if (!m.dressed) return noise_operator(xi, a_f);
  // Ground-ground block of the bare operator: f1 (x) 1 + 1 (x) f2.
  Eigen::Matrix2cd f1 = Eigen::Matrix2cd::Zero(), f2 = Eigen::Matrix2cd::Zero();
  for (int k = 0; k < 3; ++k) {
    const Eigen::Matrix2cd s = ground_pauli(k).topLeftCorner<2, 2>();
    f1 += xi[k] * s;
    f2 += xi[3 + k] * s;
  }
  const Eigen::Matrix2cd id2 = Eigen::Matrix2cd::Identity();
  const Eigen::Matrix4cd fgg = a_f * (Eigen::kroneckerProduct(f1, id2) + Eigen::kroneckerProduct(id2, f2)).eval();
  const Eigen::Matrix4cd x = m.polar * fgg * m.polar.adjoint();
  const Eigen::Vector4d sq = m.lambda.cwiseSqrt();
  // (2 sqrt(rho)) f (2 sqrt(rho)) on the manifold, with its trace removed.
  Eigen::Matrix4cd g = 4.0 * sq.asDiagonal() * x * sq.asDiagonal();
  const double total = m.lambda.sum();
  if (total > 0) g -= (g.trace().real() / total) * m.lambda.cast<cplx>().asDiagonal().toDenseMatrix();
  g = 0.5 * (g + g.adjoint()).eval();
  return m.v * g * m.v.adjoint();
}

void HygieneReport::merge(const HygieneReport& o) {
  max_trace_error = std::max(max_trace_error, o.max_trace_error);
  max_hermiticity_defect = std::max(max_hermiticity_defect, o.max_hermiticity_defect);
  min_eigenvalue = std::min(min_eigenvalue, o.min_eigenvalue);
  negative_eigenvalue_events += o.negative_eigenvalue_events;
  checks += o.checks;
}

bool HygieneReport::ok() const {
  return max_trace_error < 1e-9 && max_hermiticity_defect < 1e-8 &&
         min_eigenvalue >= kNegativeEigenvalueLimit;
}

// ---------------------------------------------------------------------------
// Real coordinates and exchange blocks.

namespace {

struct RealBasis {
  Eigen::MatrixXcd t;          // columns vec(B_k)
  Eigen::MatrixXd q_s, q_a;    // exchange-symmetric / antisymmetric
  std::vector<std::array<int, 3>> pairs;  // (i, j, first index) for i<j
  std::array<Eigen::MatrixXd, 6> zs, za, cs, ca;
  Eigen::VectorXd sz, tr;

  Eigen::MatrixXd real_form(const SuperOp& l) const { return (t.adjoint() * l * t).real(); }
};

const RealBasis& real_basis() {
  static const RealBasis rb = [] {
    RealBasis b;
    b.t = Eigen::MatrixXcd::Zero(kVec, kVec);
    const double r2 = 1.0 / std::sqrt(2.0);
    const cplx I(0, 1);
    int k = 0;
    for (int i = 0; i < kDim; ++i) b.t(i + kDim * i, k++) = 1.0;
    for (int i = 0; i < kDim; ++i)
      for (int j = i + 1; j < kDim; ++j) {
        b.pairs.push_back({i, j, k});
        b.t(i + kDim * j, k) = r2;
        b.t(j + kDim * i, k) = r2;
        ++k;
        b.t(i + kDim * j, k) = I * r2;
        b.t(j + kDim * i, k) = -I * r2;
        ++k;
      }

    Mat16 swap = Mat16::Zero();
    for (int a = 0; a < 4; ++a)
      for (int c = 0; c < 4; ++c) swap(4 * a + c, 4 * c + a) = 1.0;
    const SuperOp xsup = kron(swap.transpose(), swap);
    const Eigen::MatrixXd xr = b.real_form(xsup);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (xr + xr.transpose()));
    // eigenvalues ascending: -1 block first
    const int n_anti = static_cast<int>((es.eigenvalues().array() < 0).count());
    if (n_anti != BlockLiouvillian::kAnti) throw NumericalError("exchange block size mismatch");
    b.q_a = es.eigenvectors().leftCols(n_anti);
    b.q_s = es.eigenvectors().rightCols(kVec - n_anti);

    const auto& pc = pieces();
    for (int c = 0; c < 6; ++c) {
      const Eigen::MatrixXd z = b.real_form(pc.z[c]);
      const Eigen::MatrixXd cc = b.real_form(pc.c[c]);
      b.zs[c] = b.q_s.transpose() * z * b.q_s;
      b.za[c] = b.q_a.transpose() * z * b.q_a;
      b.cs[c] = b.q_s.transpose() * cc * b.q_s;
      b.ca[c] = b.q_a.transpose() * cc * b.q_a;
    }
    b.sz = (b.t.adjoint() * vectorize(total_sz().adjoint())).real();
    b.tr = (b.t.adjoint() * vectorize(Mat16::Identity())).real();
    return b;
  }();
  return rb;
}

}  // namespace

BlockLiouvillian::BlockLiouvillian(const SimulationParams& p) {
  const RealBasis& b = real_basis();
  const Eigen::MatrixXd l0 = b.real_form(static_liouvillian(p));
  l0_s_ = b.q_s.transpose() * l0 * b.q_s;
  l0_a_ = b.q_a.transpose() * l0 * b.q_a;
  zs_ = b.zs;
  za_ = b.za;
  cs_ = b.cs;
  ca_ = b.ca;
  basis_to_s_ = b.q_s;
  basis_to_a_ = b.q_a;
  sz_s_ = b.q_s.transpose() * b.sz;
  tr_s_ = b.q_s.transpose() * b.tr;
}

Eigen::MatrixXd BlockLiouvillian::sym_block(const CouplingTensors& t) const {
  Eigen::MatrixXd l = l0_s_;
  for (int k = 0; k < 6; ++k) {
    const auto [a, b] = kComponents[k];
    l += t.zeta(a, b) * zs_[k] + t.gamma(a, b) * cs_[k];
  }
  return l;
}

Eigen::MatrixXd BlockLiouvillian::anti_block(const CouplingTensors& t) const {
  Eigen::MatrixXd l = l0_a_;
  for (int k = 0; k < 6; ++k) {
    const auto [a, b] = kComponents[k];
    l += t.zeta(a, b) * za_[k] + t.gamma(a, b) * ca_[k];
  }
  return l;
}

BlockLiouvillian::Propagator BlockLiouvillian::propagator(const CouplingTensors& t, double h,
                                                          bool with_anti) const {
  Propagator p;
  p.sym = (sym_block(t) * h).exp();
  if (with_anti) p.anti = (anti_block(t) * h).exp();
  return p;
}

Eigen::VectorXd BlockLiouvillian::steady_state_sym(const CouplingTensors& t) const {
  Eigen::MatrixXd a(kSym + 1, kSym);
  a.topRows(kSym) = sym_block(t);
  a.row(kSym) = tr_s_.transpose();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(kSym + 1);
  rhs(kSym) = 1.0;
  Eigen::VectorXd x = a.colPivHouseholderQr().solve(rhs);
  return x / tr_s_.dot(x);
}

Mat16 BlockLiouvillian::to_matrix(const Eigen::VectorXd& xs, const Eigen::VectorXd& xa) const {
  Eigen::VectorXd x = basis_to_s_ * xs;
  if (xa.size() == kAnti) x += basis_to_a_ * xa;
  const double r2 = 1.0 / std::sqrt(2.0);
  Mat16 rho;
  for (int i = 0; i < kDim; ++i) rho(i, i) = x(i);
  for (const auto& [i, j, k] : real_basis().pairs) {
    rho(i, j) = cplx(x(k), x(k + 1)) * r2;
    rho(j, i) = cplx(x(k), -x(k + 1)) * r2;
  }
  return rho;
}

void BlockLiouvillian::from_matrix(const Mat16& rho, Eigen::VectorXd& xs,
                                   Eigen::VectorXd& xa) const {
  Eigen::VectorXd x(kVec);
  const double s2 = std::sqrt(2.0);
  for (int i = 0; i < kDim; ++i) x(i) = rho(i, i).real();
  for (const auto& [i, j, k] : real_basis().pairs) {
    x(k) = s2 * rho(i, j).real();
    x(k + 1) = s2 * rho(i, j).imag();
  }
  xs = basis_to_s_.transpose() * x;
  xa = basis_to_a_.transpose() * x;
}

// ---------------------------------------------------------------------------
// Trace simulation.

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

namespace {

void check_eigenvalues(const Mat16& rho, HygieneReport& h) {
  Eigen::SelfAdjointEigenSolver<Mat16> es(rho, Eigen::EigenvaluesOnly);
  const double m = es.eigenvalues()(0);
  h.min_eigenvalue = std::min(h.min_eigenvalue, m);
  if (m < kNegativeEigenvalueLimit) ++h.negative_eigenvalue_events;
}

void fail_unstable(std::size_t step, double trace) {
  std::ostringstream msg;
  msg << "integrator instability at step " << step << " (trace " << trace << ")";
  throw NumericalError(msg.str());
}

struct TraceSetup {
  std::size_t n_samples;
  std::size_t window;  // steps between resamplings (dynamic)
};

TraceSetup setup(const SimulationParams& p, const TraceOptions& opt) {
  p.validate();
  TraceSetup s;
  s.n_samples = static_cast<std::size_t>(std::llround(p.trace_duration / p.dt));
  s.window = s.n_samples;
  if (opt.mode == TraceMode::dynamic) {
    const double w = p.tau_c / p.dt;
    if (std::llround(w) < 1 || std::abs(w - std::llround(w)) > 1e-6 * w)
      throw ConfigError("tau_c must be a positive integer multiple of dt");
    s.window = static_cast<std::size_t>(std::llround(w));
    if (!(p.density_per_cm3 > 0)) throw ConfigError("dynamic mode needs a density");
  } else if (opt.mode == TraceMode::ou_reference) {
    throw ConfigError("ou_reference traces come from ou_reference_trace");
  }
  return s;
}

Conformation initial_conformation(const SimulationParams& p, const TraceOptions& opt, Rng& geo) {
  if (opt.mode == TraceMode::static_geometry && opt.conformation) return *opt.conformation;
  if (!(p.density_per_cm3 > 0)) throw ConfigError("no conformation and no density given");
  return sample_conformation(p.density_per_cm3, geo, opt.sampling);
}

TimeTrace simulate_propagator(const SimulationParams& p, const BlockLiouvillian& model,
                              const TraceOptions& opt, std::uint64_t seed) {
  const TraceSetup s = setup(p, opt);
  Rng geo(derive_seed(seed, 1)), noise_rng(derive_seed(seed, 2));
  std::normal_distribution<double> normal(0.0, 1.0);

  TimeTrace tr;
  tr.dt = p.dt;
  tr.seed = seed;
  tr.mode = opt.mode;
  tr.samples.resize(s.n_samples);

  Conformation c = initial_conformation(p, opt, geo);
  tr.conformation_log.push_back({0.0, c});
  CouplingTensors t = coupling_tensors(c, p.k0, p.gamma0);
  const bool noisy = p.noise_amplitude > 0;
  // The antisymmetric block only matters for the full density matrix.
  const bool anti = opt.monitor_eigenvalues || noisy;
  auto prop = model.propagator(t, p.dt, anti);
  Eigen::VectorXd xs = model.steady_state_sym(t);
  Eigen::VectorXd xa = Eigen::VectorXd::Zero(anti ? BlockLiouvillian::kAnti : 0);
  const double sq = std::sqrt(p.dt);
  std::array<double, 6> xi;
  Eigen::VectorXd tmp_s, tmp_a;

  for (std::size_t k = 0; k < s.n_samples; ++k) {
    if (opt.mode == TraceMode::dynamic && k > 0 && k % s.window == 0) {
      c = sample_conformation(p.density_per_cm3, geo, opt.sampling);
      tr.conformation_log.push_back({static_cast<double>(k) * p.dt, c});
      t = coupling_tensors(c, p.k0, p.gamma0);
      prop = model.propagator(t, p.dt, anti);
    }
    tr.samples[k] = model.sz_sym().dot(xs);

    tmp_s.noalias() = prop.sym * xs;
    xs.swap(tmp_s);
    if (anti) {
      tmp_a.noalias() = prop.anti * xa;
      xa.swap(tmp_a);
    }
    if (noisy) {
      Mat16 rho = model.to_matrix(xs, xa);
      for (auto& v : xi) v = normal(noise_rng);
      rho += sq * noise_operator(xi, p.noise_amplitude, pair_noise_map(p, rho));
      model.from_matrix(rho, xs, xa);
    }
    const double trace = model.trace_sym().dot(xs);
    if (!std::isfinite(trace) || std::abs(trace - 1.0) > 0.5) fail_unstable(k, trace);
    xs /= trace;
    if (anti) xa /= trace;
    tr.hygiene.max_trace_error =
        std::max(tr.hygiene.max_trace_error, std::abs(model.trace_sym().dot(xs) - 1.0));
    ++tr.hygiene.checks;
    if (opt.monitor_eigenvalues) check_eigenvalues(model.to_matrix(xs, xa), tr.hygiene);
  }
  return tr;
}

TimeTrace simulate_rk4(const SimulationParams& p, const TraceOptions& opt, std::uint64_t seed) {
  const TraceSetup s = setup(p, opt);
  Rng geo(derive_seed(seed, 1)), noise_rng(derive_seed(seed, 2));
  std::normal_distribution<double> normal(0.0, 1.0);

  TimeTrace tr;
  tr.dt = p.dt;
  tr.seed = seed;
  tr.mode = opt.mode;
  tr.samples.resize(s.n_samples);

  Conformation c = initial_conformation(p, opt, geo);
  tr.conformation_log.push_back({0.0, c});
  CouplingTensors t = coupling_tensors(c, p.k0, p.gamma0);
  auto lind = std::make_unique<MatrixLindblad>(p, t);
  auto substeps_for = [&](const CouplingTensors& ct) {
    if (opt.rk4_substeps > 0) return opt.rk4_substeps;
    const double rate = std::max({p.max_rate(), max_abs_eigen(ct.zeta), p.transit});
    return std::max(1, static_cast<int>(std::ceil(p.dt * rate / 0.1)));
  };
  int m = substeps_for(t);
  Mat16 rho = steady_state(liouvillian(p, t));
  const Mat16 sz = total_sz();
  const double sq = std::sqrt(p.dt);
  std::array<double, 6> xi;

  for (std::size_t k = 0; k < s.n_samples; ++k) {
    if (opt.mode == TraceMode::dynamic && k > 0 && k % s.window == 0) {
      c = sample_conformation(p.density_per_cm3, geo, opt.sampling);
      tr.conformation_log.push_back({static_cast<double>(k) * p.dt, c});
      t = coupling_tensors(c, p.k0, p.gamma0);
      lind = std::make_unique<MatrixLindblad>(p, t);
      m = substeps_for(t);
    }
    tr.samples[k] = (sz * rho).trace().real();

    const double h = p.dt / m;
    for (int j = 0; j < m; ++j) {
      const Mat16 k1 = lind->apply(rho);
      const Mat16 k2 = lind->apply(rho + 0.5 * h * k1);
      const Mat16 k3 = lind->apply(rho + 0.5 * h * k2);
      const Mat16 k4 = lind->apply(rho + h * k3);
      rho += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (p.noise_amplitude > 0) {
      for (auto& x : xi) x = normal(noise_rng);
      rho += sq * noise_operator(xi, p.noise_amplitude, pair_noise_map(p, rho));
    }
    tr.hygiene.max_hermiticity_defect =
        std::max(tr.hygiene.max_hermiticity_defect, (rho - rho.adjoint()).cwiseAbs().maxCoeff());
    rho = 0.5 * (rho + rho.adjoint()).eval();
    const double trace = rho.trace().real();
    if (!std::isfinite(trace) || std::abs(trace - 1.0) > 0.5) fail_unstable(k, trace);
    rho /= trace;
    tr.hygiene.max_trace_error =
        std::max(tr.hygiene.max_trace_error, std::abs(rho.trace().real() - 1.0));
    ++tr.hygiene.checks;
    if (opt.monitor_eigenvalues) check_eigenvalues(rho, tr.hygiene);
  }
  return tr;
}

}  // namespace

TimeTrace simulate_trace(const SimulationParams& p, const BlockLiouvillian& model,
                         const TraceOptions& opt, std::uint64_t seed) {
  if (opt.integrator == Integrator::rk4) return simulate_rk4(p, opt, seed);
  return simulate_propagator(p, model, opt, seed);
}

TimeTrace simulate_trace(const SimulationParams& p, const TraceOptions& opt, std::uint64_t seed) {
  if (opt.integrator == Integrator::rk4) return simulate_rk4(p, opt, seed);
  const BlockLiouvillian model(p);
  return simulate_propagator(p, model, opt, seed);
}

TimeTrace ou_reference_trace(double gamma, double omega_l, double amplitude, double dt,
                             double duration, std::uint64_t seed, int substeps) {
  if (!(gamma > 0)) throw std::invalid_argument("ou_reference_trace: gamma must be > 0");
  if (!(dt > 0) || !(duration >= dt)) throw std::invalid_argument("ou_reference_trace: bad dt");
  if (substeps <= 0) {
    const double h_max = 0.02 * gamma / (gamma * gamma + omega_l * omega_l);
    substeps = std::max(1, static_cast<int>(std::ceil(dt / h_max)));
  }
  const double h = dt / substeps;
  const double noise = std::sqrt(amplitude * h);
  Rng rng(derive_seed(seed, 3));
  std::normal_distribution<double> normal(0.0, 1.0);

  TimeTrace tr;
  tr.dt = dt;
  tr.seed = seed;
  tr.mode = TraceMode::ou_reference;
  const auto n = static_cast<std::size_t>(std::llround(duration / dt));
  tr.samples.resize(n);

  // Start from the stationary distribution, variance A / (2 gamma).
  const double sd = std::sqrt(amplitude / (2.0 * gamma));
  double z = sd * normal(rng), y = sd * normal(rng);
  const double a = 1.0 - gamma * h, b = omega_l * h;
  for (std::size_t k = 0; k < n; ++k) {
    tr.samples[k] = z;
    for (int j = 0; j < substeps; ++j) {
      const double nz = a * z + b * y + noise * normal(rng);
      const double ny = -b * z + a * y + noise * normal(rng);
      z = nz;
      y = ny;
    }
  }
  return tr;
}

}  // namespace spinnoise
