#include <random>

#include <Eigen/Eigenvalues>

#include "btt/dyn.hpp"
#include "doctest.h"

using namespace btt;
using namespace btt::dyn;
using namespace btt::netcase;

namespace {

std::string data(const std::string& f) { return std::string(BTT_DATA_DIR) + "/" + f; }

Mat random_stable(std::mt19937& rng, int n, double margin = 0.3) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = nd(rng);
  Eigen::EigenSolver<Mat> es(A, false);
  double shift = es.eigenvalues().real().maxCoeff() + margin;
  A -= shift * Mat::Identity(n, n);
  return A;
}

// Quadrature oracle for the observability Gramian using the eigendecomposition
// of A to evaluate exp(A t) exactly at Simpson nodes.
Mat gramian_by_quadrature(const Mat& A, const Mat& Ctil, double horizon, int steps) {
  Eigen::EigenSolver<Mat> es(A);
  Eigen::MatrixXcd V = es.eigenvectors();
  Eigen::MatrixXcd Vi = V.inverse();
  Eigen::VectorXcd lam = es.eigenvalues();
  auto integrand = [&](double t) {
    Eigen::MatrixXcd eAt = V * (lam.array() * t).exp().matrix().asDiagonal() * Vi;
    Mat E = eAt.real();
    return (E.transpose() * Ctil.transpose() * Ctil * E).eval();
  };
  const double h = horizon / steps;
  Mat acc = Mat::Zero(A.rows(), A.cols());
  for (int k = 0; k < steps; ++k) {
    double t0 = k * h;
    acc += h / 6.0 * (integrand(t0) + 4.0 * integrand(t0 + h / 2) + integrand(t0 + h));
  }
  return acc;
}

std::vector<OutputSpec> default_outputs() {
  OutputSpec v5;
  v5.kind = OutputSpec::Kind::BusVoltage;
  v5.bus = 3;
  OutputSpec om;
  om.kind = OutputSpec::Kind::RotorSpeed;
  om.device = "G2";
  return {v5, om};
}

}  // namespace

TEST_CASE("state count matches documented per-device sums") {
  auto cs = load_case(data("casedyn.json"));
  Model m(cs, topology_from_open(cs, {}), default_outputs());
  // ref SG 5 + CIG 3 + IM load 3
  CHECK(m.n_x() == 11);
  CHECK(m.n_xi() == 2 * 3 + 2 * 2);
}

TEST_CASE("acpf steady states are equilibria") {
  for (const char* f : {"casedyn.json", "case4.json", "casedvc.json", "case9.json"}) {
    auto cs = load_case(data(f));
    auto z = topology_from_open(cs, f == std::string("case9.json")
                                        ? std::vector<std::string>{"5-6", "5-7"}
                                        : std::vector<std::string>{});
    auto lay = acv_layout(cs);
    Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
    auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
    std::vector<OutputSpec> outs;
    OutputSpec o;
    o.kind = OutputSpec::Kind::BusVoltage;
    o.bus = cs.buses[1].id;
    outs.push_back(o);
    Model m(cs, z, outs);
    auto [x, xi] = m.from_acpf(sol);
    CHECK(m.f(x, xi, a_s, a_t).lpNorm<Eigen::Infinity>() < 1e-7);
    CHECK(m.g(x, xi, a_s, a_t).lpNorm<Eigen::Infinity>() < 1e-7);
  }
}

TEST_CASE("doubling damping leaves the equilibrium unchanged") {
  auto cs = load_case(data("casedyn.json"));
  auto z = topology_from_open(cs, {});
  auto lay = acv_layout(cs);
  Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
  auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
  Model m(cs, z, default_outputs());
  auto [x, xi] = m.from_acpf(sol);
  Vec a_t2 = a_t;
  a_t2(1) *= 2.0;  // d_cg of the single CIG
  CHECK(m.f(x, xi, a_s, a_t2).lpNorm<Eigen::Infinity>() < 1e-7);
}

TEST_CASE("analytic jacobians match finite differences") {
  auto cs = load_case(data("casedyn.json"));
  auto z = topology_from_open(cs, {});
  auto lay = acv_layout(cs);
  Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
  auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
  Model m(cs, z, default_outputs());
  auto [x, xi] = m.from_acpf(sol);
  // Perturb off the equilibrium so no derivative vanishes by symmetry.
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-0.03, 0.03);
  for (int i = 0; i < x.size(); ++i) x(i) += u(rng);
  for (int i = 0; i < xi.size(); ++i) xi(i) += u(rng);

  auto Ja = m.jacobians(x, xi, a_s, a_t);
  m.use_fd_jacobian = true;
  auto Jf = m.jacobians(x, xi, a_s, a_t);
  CHECK((Ja.fx - Jf.fx).lpNorm<Eigen::Infinity>() < 2e-5);
  CHECK((Ja.fxi - Jf.fxi).lpNorm<Eigen::Infinity>() < 2e-5);
  CHECK((Ja.gx - Jf.gx).lpNorm<Eigen::Infinity>() < 2e-5);
  CHECK((Ja.gxi - Jf.gxi).lpNorm<Eigen::Infinity>() < 2e-5);
}

TEST_CASE("reduced A matches implicit-function finite differences") {
  auto cs = load_case(data("casedyn.json"));
  auto z = topology_from_open(cs, {});
  auto lay = acv_layout(cs);
  Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
  auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
  Model m(cs, z, default_outputs());
  auto [x, xi] = m.from_acpf(sol);
  auto lin = m.linearize_at(x, xi, a_s, a_t);

  const double h = 1e-6;
  for (int c = 0; c < m.n_x(); ++c) {
    Vec xp = x, xm = x;
    xp(c) += h;
    xm(c) -= h;
    Vec xip = m.solve_algebraic(xp, a_s, a_t, &xi);
    Vec xim = m.solve_algebraic(xm, a_s, a_t, &xi);
    Vec col = (m.f(xp, xip, a_s, a_t) - m.f(xm, xim, a_s, a_t)) / (2 * h);
    CHECK((col - lin.A.col(c)).lpNorm<Eigen::Infinity>() < 1e-5);
  }

  // Hand-derived CIG swing entries.
  const auto& st = m.states();
  int gi = 1;  // G2 is the CIG
  CHECK(lin.A(st.cig[gi].thm, st.cig[gi].omega) == doctest::Approx(kOmegaBase).epsilon(1e-10));
  CHECK(lin.A(st.cig[gi].omega, st.cig[gi].omega) ==
        doctest::Approx(-a_t(1) / a_t(0)).epsilon(1e-10));
}

TEST_CASE("pure state outputs give unit C rows") {
  auto cs = load_case(data("casedyn.json"));
  auto z = topology_from_open(cs, {});
  auto lay = acv_layout(cs);
  Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
  auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
  Model m(cs, z, default_outputs());
  auto [x, xi] = m.from_acpf(sol);
  auto lin = m.linearize_at(x, xi, a_s, a_t);
  // Output 1 is the CIG speed, a pure state.
  Vec row = lin.C.row(1);
  CHECK(row(m.states().cig[1].omega) == doctest::Approx(1.0));
  row(m.states().cig[1].omega) = 0.0;
  CHECK(row.lpNorm<Eigen::Infinity>() == doctest::Approx(0.0));
}

TEST_CASE("bundled-case equilibria are asymptotically stable") {
  for (const char* f : {"casedyn.json", "case4.json", "case9.json"}) {
    auto cs = load_case(data(f));
    auto z = topology_from_open(cs, f == std::string("case9.json")
                                        ? std::vector<std::string>{"5-6", "5-7"}
                                        : std::vector<std::string>{});
    auto lay = acv_layout(cs);
    Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
    auto sol = acpf::solve_steady_state(cs, z, a_s, acpf::SsMode::PostAdjustment);
    std::vector<OutputSpec> outs;
    OutputSpec o;
    o.kind = OutputSpec::Kind::BusVoltage;
    o.bus = cs.buses[1].id;
    outs.push_back(o);
    Model m(cs, z, outs);
    auto [x, xi] = m.from_acpf(sol);
    auto lin = m.linearize_at(x, xi, a_s, a_t);
    INFO("case ", f);
    CHECK(is_asymptotically_stable(lin.A));
  }
}

TEST_CASE("lyapunov analytic cases") {
  Mat A1(1, 1), C1(1, 1);
  A1 << -1.0;
  C1 << 1.0;
  auto g1 = solve_lyapunov(A1, C1);
  CHECK(g1.stable);
  CHECK(g1.Q(0, 0) == doctest::Approx(0.5));

  Mat A2 = Mat::Zero(2, 2);
  A2(0, 0) = -1.0;
  A2(1, 1) = -2.0;
  auto g2 = solve_lyapunov(A2, Mat::Identity(2, 2));
  CHECK(g2.stable);
  CHECK(g2.Q(0, 0) == doctest::Approx(0.5));
  CHECK(g2.Q(1, 1) == doctest::Approx(0.25));
  CHECK(g2.Q(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("lyapunov random systems: residual and quadrature oracle") {
  std::mt19937 rng(17);
  for (int t = 0; t < 10; ++t) {
    Mat A = random_stable(rng, 8);
    Mat Ctil = Mat::Random(3, 8);
    auto g = solve_lyapunov(A, Ctil);
    REQUIRE(g.stable);
    Mat res = A.transpose() * g.Q + g.Q * A + Ctil.transpose() * Ctil;
    CHECK(res.norm() < 1e-8);

    Mat Qq = gramian_by_quadrature(A, Ctil, 60.0, 3000);
    CHECK((Qq - g.Q).lpNorm<Eigen::Infinity>() < 1e-5);
  }
}

TEST_CASE("unstable system reported through the flag") {
  Mat A(2, 2);
  A << 0.1, 0, 0, -1;
  auto g = solve_lyapunov(A, Mat::Identity(2, 2));
  CHECK_FALSE(g.stable);
  CHECK_THROWS_AS(h2_energy(g, Vec::Ones(2)), SolveError);
}

TEST_CASE("h2 energy analytic and quadrature") {
  Mat A1(1, 1), C1(1, 1);
  A1 << -1.0;
  C1 << 1.0;
  auto g1 = solve_lyapunov(A1, C1);
  Vec xd(1);
  xd << 2.0;
  CHECK(h2_energy(g1, xd) == doctest::Approx(2.0));
  CHECK(h2_energy(g1, Vec::Zero(1)) == doctest::Approx(0.0));

  std::mt19937 rng(23);
  for (int t = 0; t < 5; ++t) {
    Mat A = random_stable(rng, 6);
    Mat Ctil = Mat::Random(2, 6);
    Vec xdel = Vec::Random(6);
    auto g = solve_lyapunov(A, Ctil);
    REQUIRE(g.stable);
    // Energy of the free output response by quadrature.
    Mat Qq = gramian_by_quadrature(A, Ctil, 80.0, 4000);
    double e_quad = xdel.dot(Qq * xdel);
    double e_h2 = h2_energy(g, xdel);
    CHECK(std::abs(e_quad - e_h2) / std::max(1e-12, std::abs(e_quad)) < 1e-5);
  }
}

TEST_CASE("free response equals scaled impulse response") {
  std::mt19937 rng(31);
  for (int t = 0; t < 5; ++t) {
    Mat A = random_stable(rng, 7);
    Mat C = Mat::Random(2, 7);
    Vec xd = Vec::Random(7);
    CHECK(impulse_free_equivalence(A, C, xd, 5.0) < 1e-8);
    CHECK(impulse_free_equivalence(A, C, Vec::Zero(7), 5.0) == doctest::Approx(0.0));
  }
}

TEST_CASE("4-bus linearization after opening line 1-4 satisfies the identity") {
  auto cs = load_case(data("case4.json"));
  auto z0 = topology_from_open(cs, {});
  auto z1 = topology_from_open(cs, {"1-4"});
  auto lay = acv_layout(cs);
  Vec a_s = initial_a_s(cs, lay), a_t = initial_a_t(cs, lay);
  auto pre = acpf::solve_steady_state(cs, z0, a_s, acpf::SsMode::PostAdjustment);
  auto jump = acpf::jumping_state(cs, z1, a_s, pre.frozen(cs), {}, &pre);
  auto post = acpf::solve_steady_state(cs, z1, a_s, acpf::SsMode::PostSwitching, {}, &jump);

  std::vector<OutputSpec> outs = default_outputs();
  Model m(cs, z1, outs);
  auto [xs, xis] = m.from_acpf(post);
  auto lin = m.linearize_at(xs, xis, a_s, a_t);
  auto [xj, xij] = m.from_acpf(jump);
  Vec xdelta = xj - xs;
  CHECK(impulse_free_equivalence(lin.A, lin.C, xdelta, 10.0) < 1e-6);
}

TEST_CASE("stability classifier") {
  CHECK(is_asymptotically_stable(-Mat::Identity(3, 3)));
  Mat A = -Mat::Identity(3, 3);
  A(0, 0) = 0.1;
  CHECK_FALSE(is_asymptotically_stable(A));
  Mat S = Mat::Zero(2, 2);
  S(0, 1) = 1.0;
  S(1, 0) = -1.0;  // purely imaginary spectrum
  CHECK_FALSE(is_asymptotically_stable(S, 1e-6));
}
