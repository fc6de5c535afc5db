#include <random>

#include "btt/stage2.hpp"
#include "doctest.h"

using namespace btt;
using namespace btt::netcase;
using namespace btt::stage2;

namespace {
std::string data(const std::string& f) { return std::string(BTT_DATA_DIR) + "/" + f; }

// Build a one-switch tuning problem on the small SG+CIG+IM case.
struct Setup {
  NetworkCase cs;
  ScenarioSpec sc;
  TuningProblem tp;
};

Setup make_setup(const char* open_line = "1-2") {
  Setup s{load_case(data("casedyn.json")), {}, {}};
  auto& cs = s.cs;
  auto lay = acv_layout(cs);
  s.sc.z0 = topology_from_open(cs, {});
  s.sc.zT = topology_from_open(cs, {open_line});
  s.sc.a0_s = initial_a_s(cs, lay);
  s.sc.a0_t = initial_a_t(cs, lay);
  OutputSpec o1;
  o1.kind = OutputSpec::Kind::BusVoltage;
  o1.bus = 3;
  OutputSpec o2;
  o2.kind = OutputSpec::Kind::CigAngle;
  o2.device = "G2";
  s.sc.outputs = {o1, o2};
  s.sc.weights.w_ts = Vec::Ones(2);
  s.sc.seed = 3;

  stage1::TransitionPlan plan;
  stage1::Episode ep;
  ep.z = s.sc.zT;
  ep.a_s = s.sc.a0_s;
  ep.a_t = s.sc.a0_t;
  ep.flags.adjust = false;
  ep.flags.sw = true;
  ep.switched_branch = cs.branch_index(open_line);
  plan.episodes = {ep};

  recover::RecoveryResult by;
  auto minus = acpf::solve_steady_state(cs, s.sc.z0, s.sc.a0_s,
                                        acpf::SsMode::PostAdjustment);
  auto plus = acpf::jumping_state(cs, s.sc.zT, s.sc.a0_s, minus.frozen(cs), {}, &minus);
  auto star = acpf::solve_steady_state(cs, s.sc.zT, s.sc.a0_s,
                                       acpf::SsMode::PostSwitching, {}, &plus);
  by.minus = {minus};
  by.plus = {plus};
  by.star = {star};
  by.has_minus = {false};
  by.has_switch = {true};
  by.plan = plan;

  s.tp = assemble_states(cs, s.sc, plan, by);
  return s;
}
}  // namespace

TEST_CASE("assemble_states reconstructs the jump from byproducts") {
  auto s = make_setup();
  REQUIRE(s.tp.episodes.size() == 1);
  // Cross-module oracle: rebuild the jump state directly and compare.
  auto minus = acpf::solve_steady_state(s.cs, s.sc.z0, s.sc.a0_s,
                                        acpf::SsMode::PostAdjustment);
  auto plus = acpf::jumping_state(s.cs, s.sc.zT, s.sc.a0_s, minus.frozen(s.cs), {}, &minus);
  auto star = acpf::solve_steady_state(s.cs, s.sc.zT, s.sc.a0_s,
                                       acpf::SsMode::PostSwitching, {}, &plus);
  dyn::Model model(s.cs, s.sc.zT, s.sc.outputs);
  auto [xp, xip] = model.from_acpf(plus);
  auto [xs, xis] = model.from_acpf(star);
  CHECK((s.tp.x_delta[0] - (xp - xs)).lpNorm<Eigen::Infinity>() < 1e-7);
  CHECK(s.tp.x_delta[0].lpNorm<Eigen::Infinity>() > 1e-6);
}

TEST_CASE("dimension mismatch guard") {
  auto s = make_setup();
  auto bad = s.tp;
  // Tampering with the spec of the problem is caught at evaluation points by
  // Eigen size checks; here check the assembly guard path via a size-mangled
  // byproduct is impractical, so assert the documented invariant instead.
  CHECK(bad.x_delta[0].size() == bad.models[0].n_x());
}

TEST_CASE("adjoint gradient matches central differences") {
  auto s = make_setup();
  const auto& tp = s.tp;
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Vec a(tp.at_lo.size());
    for (int k = 0; k < a.size(); ++k)
      a(k) = tp.at_lo(k) + (0.2 + 0.6 * u(rng)) * (tp.at_hi(k) - tp.at_lo(k));
    Vec xd = tp.x_delta[0];
    for (int k = 0; k < xd.size(); ++k) xd(k) *= 0.5 + u(rng);
    auto ev = evaluate_episode(tp.models[0], tp.x_star[0], tp.xi_star[0], xd, tp.a_s[0],
                               a, tp.w_ts, true);
    if (!ev.stable) continue;
    ++checked;
    for (int k = 0; k < a.size(); ++k) {
      const double h = std::max(1e-5, 1e-5 * std::abs(a(k)));
      Vec ap = a, am = a;
      ap(k) += h;
      am(k) -= h;
      auto fp = evaluate_episode(tp.models[0], tp.x_star[0], tp.xi_star[0], xd, tp.a_s[0],
                                 ap, tp.w_ts, false);
      auto fm = evaluate_episode(tp.models[0], tp.x_star[0], tp.xi_star[0], xd, tp.a_s[0],
                                 am, tp.w_ts, false);
      REQUIRE(fp.stable);
      REQUIRE(fm.stable);
      const double fd = (fp.value - fm.value) / (2 * h);
      CHECK(std::abs(fd - ev.grad(k)) <=
            1e-4 * std::max({1.0, std::abs(fd), std::abs(ev.grad(k))}));
    }
  }
  CHECK(checked >= 15);
}

TEST_CASE("tuning never degrades the surrogate against the initial a_t") {
  auto s = make_setup();
  auto ev0 = evaluate_episode(s.tp.models[0], s.tp.x_star[0], s.tp.xi_star[0],
                              s.tp.x_delta[0], s.tp.a_s[0], s.sc.a0_t, s.tp.w_ts, false);
  REQUIRE(ev0.stable);
  auto res = tune(s.tp, s.sc);
  REQUIRE(res.all_stable);
  CHECK(res.h2[0] <= ev0.value + 1e-10);

  // Reported value equals an independent recomputation.
  auto ev1 = evaluate_episode(s.tp.models[0], s.tp.x_star[0], s.tp.xi_star[0],
                              s.tp.x_delta[0], s.tp.a_s[0], res.a_t[0], s.tp.w_ts, false);
  CHECK(std::abs(ev1.value - res.h2[0]) < 1e-8);
}

TEST_CASE("monotone damping benefit drives d_cg to its bound") {
  auto s = make_setup();
  auto& tp = s.tp;
  // 1-D sweep oracle over d_cg with m_cg held at its initial value: confirm
  // the surrogate decreases monotonically, then check the optimizer lands at
  // the bound when restricted to that axis.
  const int n_cig = 1;
  Vec a = s.sc.a0_t;
  double prev = std::numeric_limits<double>::infinity();
  bool monotone = true;
  std::vector<double> grid;
  for (double t = 0.0; t <= 1.0001; t += 0.125)
    grid.push_back(tp.at_lo(n_cig) + t * (tp.at_hi(n_cig) - tp.at_lo(n_cig)));
  for (double d : grid) {
    a(n_cig) = d;
    auto ev = evaluate_episode(tp.models[0], tp.x_star[0], tp.xi_star[0], tp.x_delta[0],
                               tp.a_s[0], a, tp.w_ts, false);
    REQUIRE(ev.stable);
    if (ev.value > prev + 1e-12) monotone = false;
    prev = ev.value;
  }
  if (!monotone) {
    WARN("damping sweep is not monotone on this case; bound-seek check skipped");
    return;
  }
  // Restrict the box to the d_cg axis and tune.
  auto tp2 = tp;
  tp2.at_lo(0) = s.sc.a0_t(0);
  tp2.at_hi(0) = s.sc.a0_t(0);
  auto res = tune(tp2, s.sc);
  REQUIRE(res.all_stable);
  CHECK(res.a_t[0](n_cig) == doctest::Approx(tp.at_hi(n_cig)).epsilon(1e-6));
}

TEST_CASE("no-jump episode returns the midpoint, collapsed box returns the point") {
  auto s = make_setup();
  auto tp = s.tp;
  tp.x_delta[0].setZero();
  auto res = tune(tp, s.sc);
  CHECK(res.h2[0] == doctest::Approx(0.0));
  CHECK((res.a_t[0] - 0.5 * (tp.at_lo + tp.at_hi)).lpNorm<Eigen::Infinity>() < 1e-12);

  auto tp2 = s.tp;
  Vec point = 0.3 * tp2.at_lo + 0.7 * tp2.at_hi;
  tp2.at_lo = point;
  tp2.at_hi = point;
  auto res2 = tune(tp2, s.sc);
  REQUIRE(res2.all_stable);
  CHECK((res2.a_t[0] - point).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("merge carries tuned values across non-switching episodes") {
  auto s = make_setup();
  stage1::TransitionPlan plan;
  stage1::Episode e1, e2;
  e1.z = s.sc.zT;
  e1.a_s = s.sc.a0_s;
  e1.flags.sw = true;
  e2.z = s.sc.zT;
  e2.a_s = s.sc.a0_s;
  e2.flags.adjust = true;
  plan.episodes = {e1, e2};
  TuneResult res;
  Vec tuned = 0.5 * (s.tp.at_lo + s.tp.at_hi);
  res.a_t = {tuned};
  TuningProblem tp = s.tp;
  tp.episodes = {0};
  auto merged = merge_tuned(plan, tp, res, s.sc.a0_t);
  CHECK((merged.episodes[0].a_t - tuned).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((merged.episodes[1].a_t - tuned).lpNorm<Eigen::Infinity>() < 1e-12);
}
