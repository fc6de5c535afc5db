#include "btt/plancheck.hpp"

#include <cmath>

namespace btt::plancheck {

using netcase::GenKind;
using netcase::NetworkCase;
using netcase::ScenarioSpec;
using netcase::TopologyVector;

std::vector<std::string> structural_audit(const NetworkCase& cs, const ScenarioSpec& sc,
                                          const stage1::TransitionPlan& plan) {
  std::vector<std::string> bad;
  const auto lay = netcase::acv_layout(cs);
  const int TU = stage1::compute_TU(sc.z0, sc.zT, sc.budget);
  if (plan.T() > TU + 1)  // +1 covers the recovery pull-back episode
    bad.push_back(strf("plan has %d episodes, limit %d", plan.T(), TU + 1));

  TopologyVector zprev = sc.z0;
  Vec aprev = sc.a0_s;
  int n_ad = 0, n_sw = 0;
  for (int i = 0; i < plan.T(); ++i) {
    const auto& ep = plan.episodes[i];
    if (ep.z.size() != cs.n_branch()) {
      bad.push_back(strf("episode %d: topology length mismatch", i + 1));
      break;
    }
    const int flips = netcase::topology_distance(zprev, ep.z);
    if (flips > 1) bad.push_back(strf("episode %d: %d lines switched", i + 1, flips));
    if (!netcase::is_connected(cs, ep.z))
      bad.push_back(strf("episode %d: disconnected topology", i + 1));
    for (int e = 0; e < cs.n_branch(); ++e) {
      if (ep.z.z(e) != zprev.z(e) && !cs.branches[e].switchable)
        bad.push_back(strf("episode %d: non-switchable branch %s toggled", i + 1,
                           cs.branches[e].id.c_str()));
    }
    // ACV bounds and per-episode adjustment cap.
    for (int k = 0; k < lay.n_s(); ++k) {
      if (ep.a_s(k) < lay.s_entries[k].lo - 1e-7 ||
          ep.a_s(k) > lay.s_entries[k].hi + 1e-7)
        bad.push_back(strf("episode %d: %s out of bounds", i + 1,
                           lay.s_entries[k].name.c_str()));
    }
    const double adj = std::sqrt(
        (sc.weights.w_as.array() * (ep.a_s - aprev).array().square()).sum());
    if (adj > sc.sigma_as + 1e-6)
      bad.push_back(strf("episode %d: adjustment amount %.4f exceeds cap %.4f", i + 1,
                         adj, sc.sigma_as));
    if (adj > 1e-9 && !ep.flags.adjust)
      bad.push_back(strf("episode %d: ACVs moved without the adjust flag", i + 1));
    if (flips > 0 && !ep.flags.sw)
      bad.push_back(strf("episode %d: line switched without the switch flag", i + 1));
    if (ep.flags.adjust) ++n_ad;
    if (flips > 0) ++n_sw;
    zprev = ep.z;
    aprev = ep.a_s;
  }
  // Non-participating branches switch at most once, and only as mandated.
  for (int e = 0; e < cs.n_branch(); ++e) {
    if (!cs.branches[e].non_participating) continue;
    int count = 0;
    int prev = sc.z0.z(e);
    for (const auto& ep : plan.episodes) {
      if (ep.z.z(e) != prev) ++count;
      prev = ep.z.z(e);
    }
    if (count != std::abs(sc.z0.z(e) - sc.zT.z(e)))
      bad.push_back("non-participating branch " + cs.branches[e].id +
                    " switched beyond its mandate");
  }
  const int d = netcase::topology_distance(sc.z0, sc.zT);
  const double used = sc.budget.t_ad * n_ad + sc.budget.t_ls * (n_sw - d);
  if (used > sc.budget.t_max + 1e-9)
    bad.push_back(strf("budget exceeded: %.3f > %.3f", used, sc.budget.t_max));
  if (plan.T() > 0) {
    if (netcase::topology_distance(plan.episodes.back().z, sc.zT) != 0)
      bad.push_back("terminal topology differs from the target");
    if ((plan.episodes.back().a_s - sc.a0_s).lpNorm<Eigen::Infinity>() > 1e-4)
      bad.push_back("terminal ACVs differ from their initial values");
  } else if (netcase::topology_distance(sc.z0, sc.zT) != 0) {
    bad.push_back("empty plan cannot realize a topology change");
  }
  return bad;
}

std::vector<std::string> point_limit_violations(const NetworkCase& cs,
                                                const acpf::SteadyStateSolution& sol,
                                                const TopologyVector& z, double tol) {
  std::vector<std::string> bad;
  for (int i = 0; i < cs.n_bus(); ++i) {
    if (sol.v(i) < cs.limits.v_min - tol || sol.v(i) > cs.limits.v_max + tol)
      bad.push_back(strf("bus %d voltage %.4f outside band", cs.buses[i].id, sol.v(i)));
  }
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const auto& gen = cs.generators[g];
    if (gen.kind == GenKind::Sg) {
      if (sol.qg(g) < gen.q_min - tol || sol.qg(g) > gen.q_max + tol)
        bad.push_back(gen.id + strf(" reactive output %.4f outside limits", sol.qg(g)));
    } else {
      const double s = std::hypot(sol.pg(g), sol.qg(g));
      if (s > gen.s_max + tol)
        bad.push_back(gen.id + strf(" apparent power %.4f exceeds limit", s));
      if (gen.pf_min > 0 &&
          sol.qg(g) > std::tan(std::acos(gen.pf_min)) * sol.pg(g) + tol)
        bad.push_back(gen.id + " power factor below floor");
    }
  }
  for (int e = 0; e < cs.n_branch(); ++e) {
    if (z.z(e) == 0) continue;
    const auto& br = cs.branches[e];
    const double sf = std::hypot(sol.p_fb(e), sol.q_fb(e));
    const double st = std::hypot(sol.p_tb(e), sol.q_tb(e));
    if (sf > br.s_max + tol || st > br.s_max + tol)
      bad.push_back("branch " + br.id + " thermally overloaded");
    const double dth = sol.th(cs.bus_index(br.from)) - sol.th(cs.bus_index(br.to));
    if (std::abs(dth) > br.theta_max + tol)
      bad.push_back("branch " + br.id + " angle difference outside bound");
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    const auto& dvc = cs.dvcs[d];
    if (sol.qc(d) < dvc.q_min - tol || sol.qc(d) > dvc.q_max + tol)
      bad.push_back(dvc.id + " reactive output outside limits");
    if (dvc.kind == netcase::DvcKind::Svc &&
        (sol.bsvc(d) < dvc.b_min - tol || sol.bsvc(d) > dvc.b_max + tol))
      bad.push_back(dvc.id + " susceptance outside limits");
  }
  return bad;
}

std::vector<std::string> rsi_violations(const NetworkCase& cs,
                                        const acpf::SteadyStateSolution& pre,
                                        const acpf::SteadyStateSolution& jump,
                                        double tol) {
  std::vector<std::string> bad;
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    if (cs.generators[g].kind != GenKind::Sg) continue;
    const double dp = std::abs(jump.pg(g) - pre.pg(g));
    const double cap = cs.limits.eps_rsi_sg * cs.generators[g].p_rated;
    if (dp > cap + tol)
      bad.push_back(cs.generators[g].id +
                    strf(" rotor-shaft impact %.4f exceeds %.4f", dp, cap));
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    if (!cs.loads[l].has_im()) continue;
    const double de = std::abs(pre.epsp(l) - jump.epsp(l)) * cs.loads[l].p0;
    const double cap = cs.limits.eps_rsi_im * cs.loads[l].p_rated;
    if (de > cap + tol)
      bad.push_back(cs.loads[l].id + strf(" IM impact %.4f exceeds %.4f", de, cap));
  }
  return bad;
}

std::vector<std::string> operational_audit(const NetworkCase& cs, const ScenarioSpec& sc,
                                           const stage1::TransitionPlan& plan,
                                           double tol) {
  std::vector<std::string> bad;
  TopologyVector zprev = sc.z0;
  acpf::SteadyStateSolution prev;
  bool have_prev = false;
  for (int i = 0; i < plan.T(); ++i) {
    const auto& ep = plan.episodes[i];
    try {
      auto minus = acpf::solve_steady_state(cs, zprev, ep.a_s, acpf::SsMode::PostAdjustment,
                                            {}, have_prev ? &prev : nullptr);
      auto plus = acpf::jumping_state(cs, ep.z, ep.a_s, minus.frozen(cs), {}, &minus);
      auto star = acpf::solve_steady_state(cs, ep.z, ep.a_s, acpf::SsMode::PostSwitching,
                                           {}, &plus);
      for (auto& m : point_limit_violations(cs, minus, zprev, tol))
        bad.push_back(strf("episode %d post-adjustment: ", i + 1) + m);
      for (auto& m : point_limit_violations(cs, star, ep.z, tol))
        bad.push_back(strf("episode %d post-switching: ", i + 1) + m);
      for (auto& m : rsi_violations(cs, minus, plus, tol))
        bad.push_back(strf("episode %d switch: ", i + 1) + m);
      prev = star;
      have_prev = true;
    } catch (const SolveError& e) {
      bad.push_back(strf("episode %d: %s", i + 1, e.what()));
      return bad;
    }
    zprev = ep.z;
  }
  return bad;
}

}  // namespace btt::plancheck
