#include "btt/plancheck.hpp"
#include "btt/recover.hpp"
#include "doctest.h"

using namespace btt;
using namespace btt::netcase;
using namespace btt::recover;
using namespace btt::stage1;

namespace {
std::string data(const std::string& f) { return std::string(BTT_DATA_DIR) + "/" + f; }

Episode make_ep(const TopologyVector& z, const Vec& a_s, bool adj, bool sw, int br = -1) {
  Episode ep;
  ep.z = z;
  ep.a_s = a_s;
  ep.flags.adjust = adj;
  ep.flags.sw = sw;
  ep.switched_branch = br;
  return ep;
}
}  // namespace

TEST_CASE("pre-treatment partitions episodes by execution type") {
  // Types (as, as, s, a, as) from the worked example.
  TopologyVector z;
  z.z = IVec::Ones(3);
  Vec a = Vec::Zero(2);
  TransitionPlan plan;
  plan.episodes = {make_ep(z, a, true, true), make_ep(z, a, true, true),
                   make_ep(z, a, false, true), make_ep(z, a, true, false),
                   make_ep(z, a, true, true)};
  auto [plan2, part] = pre_treat(plan);
  CHECK(part.t_as == std::vector<int>{0, 1, 4});
  CHECK(part.t_a == std::vector<int>{3});
  CHECK(part.t_s == std::vector<int>{2});
  CHECK_FALSE(part.first_slot_added);
  CHECK(part.t_aa() == std::vector<int>{0, 1, 3, 4});
  CHECK(part.t_ss() == std::vector<int>{0, 1, 2, 4});
}

TEST_CASE("switch-only first episode gains an adjustment slot") {
  TopologyVector z;
  z.z = IVec::Ones(3);
  Vec a = Vec::Zero(2);
  TransitionPlan plan;
  plan.episodes = {make_ep(z, a, false, true), make_ep(z, a, true, false)};
  auto [plan2, part] = pre_treat(plan);
  CHECK(part.first_slot_added);
  CHECK(part.t_as == std::vector<int>{0});
  CHECK(part.t_a == std::vector<int>{1});
  CHECK(plan2.episodes[0].flags.adjust);
}

TEST_CASE("all-adjustment plan partitions to t_a") {
  TopologyVector z;
  z.z = IVec::Ones(3);
  Vec a = Vec::Zero(2);
  TransitionPlan plan;
  plan.episodes = {make_ep(z, a, true, false), make_ep(z, a, true, false)};
  auto [plan2, part] = pre_treat(plan);
  CHECK(part.t_a == std::vector<int>{0, 1});
  CHECK(part.t_s.empty());
  CHECK(part.t_as.empty());
}

TEST_CASE("feasible stage-1 plan is a fixed point of recovery") {
  auto cs = load_case(data("case4.json"));
  auto sc = load_scenario(data("scenario4.json"), cs);
  auto prog = build_program(cs, sc);
  SolveOptions opts;
  opts.mode = SolveMode::BranchAndBound;
  auto pool = stage1::solve(cs, sc, prog, opts);
  REQUIRE(!pool.plans.empty());

  auto res = solve_recovery(cs, sc, pool.plans[0]);
  REQUIRE(res.plan.T() == pool.plans[0].T());
  for (int i = 0; i < res.plan.T(); ++i)
    CHECK((res.plan.episodes[i].a_s - pool.plans[0].episodes[i].a_s)
              .lpNorm<Eigen::Infinity>() < 1e-4);

  // Byproduct jump states agree with a from-scratch computation.
  TopologyVector zprev = sc.z0;
  for (int i = 0; i < res.plan.T(); ++i) {
    const auto& ep = res.plan.episodes[i];
    if (res.has_switch[i]) {
      auto minus = acpf::solve_steady_state(cs, zprev, ep.a_s,
                                            acpf::SsMode::PostAdjustment);
      auto plus = acpf::jumping_state(cs, ep.z, ep.a_s, minus.frozen(cs), {}, &minus);
      CHECK((plus.v - res.plus[i].v).lpNorm<Eigen::Infinity>() < 1e-7);
      CHECK((plus.pg - res.plus[i].pg).lpNorm<Eigen::Infinity>() < 1e-7);
    }
    zprev = ep.z;
  }

  auto final_plan = recover::post_treat(cs, sc, res);
  auto audit = plancheck::operational_audit(cs, sc, final_plan);
  for (auto& m : audit) MESSAGE(m);
  CHECK(audit.empty());
}

TEST_CASE("recovery repairs an AC-infeasible voltage proposal") {
  auto cs = load_case(data("case4.json"));
  cs.limits.v_min = 0.96;
  auto sc = load_scenario(data("scenario4.json"), cs);

  // Stage-1-style proposal that drags the setpoints low enough to violate
  // the voltage floor at the exact operating points.
  Vec a_low(2);
  a_low << 0.985, 0.975;
  TopologyVector z1 = topology_from_open(cs, {"1-4"});
  TransitionPlan plan;
  plan.episodes = {make_ep(sc.z0, a_low, true, false),
                   make_ep(z1, sc.a0_s, true, true, cs.branch_index("1-4"))};

  // The proposal indeed violates the band.
  auto sol_low = acpf::solve_steady_state(cs, sc.z0, a_low, acpf::SsMode::PostAdjustment);
  REQUIRE(!plancheck::point_limit_violations(cs, sol_low, sc.z0, 1e-6).empty());

  auto res = solve_recovery(cs, sc, plan);
  // The recovered first-episode setpoints moved away from the proposal.
  CHECK((res.plan.episodes[0].a_s - a_low).lpNorm<Eigen::Infinity>() > 1e-4);
  auto final_plan = recover::post_treat(cs, sc, res);
  auto audit = plancheck::operational_audit(cs, sc, final_plan, 1e-6);
  for (auto& m : audit) MESSAGE(m);
  CHECK(audit.empty());
  CHECK(res.objective > 1e-4);
}

TEST_CASE("post-treatment appends the pull-back episode") {
  auto cs = load_case(data("case4.json"));
  auto sc = load_scenario(data("scenario4.json"), cs);
  RecoveryResult res;
  TopologyVector z1 = topology_from_open(cs, {"1-4"});
  Vec drift = sc.a0_s;
  drift(0) += 0.01;
  res.plan.episodes = {make_ep(z1, drift, true, true, cs.branch_index("1-4"))};
  res.minus.resize(1);
  res.plus.resize(1);
  res.star.resize(1);
  res.has_minus = {true};
  res.has_switch = {true};

  auto plan = recover::post_treat(cs, sc, res);
  REQUIRE(plan.T() == 2);
  CHECK(plan.episodes.back().flags.adjust);
  CHECK_FALSE(plan.episodes.back().flags.sw);
  CHECK((plan.episodes.back().a_s - sc.a0_s).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(netcase::topology_distance(plan.episodes.back().z, z1) == 0);

  // Below threshold: no append.
  RecoveryResult res2;
  res2.plan.episodes = {make_ep(z1, sc.a0_s, true, true, cs.branch_index("1-4"))};
  res2.minus.resize(1);
  res2.plus.resize(1);
  res2.star.resize(1);
  res2.has_minus = {true};
  res2.has_switch = {true};
  auto plan2 = recover::post_treat(cs, sc, res2);
  CHECK(plan2.T() == 1);
}
