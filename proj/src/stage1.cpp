#include "btt/stage1.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>

#include "btt/bump.hpp"
#include "btt/plancheck.hpp"

namespace btt::stage1 {

using linpf::ConstraintSystem;
using linpf::LinTerm;
using linpf::PointVars;
using linpf::ZRef;
using netcase::GenKind;

int compute_TU(const TopologyVector& z0, const TopologyVector& zT,
               const netcase::BudgetSpec& budget) {
  const int d = netcase::topology_distance(z0, zT);
  const int by_ls = d + static_cast<int>(std::floor(budget.t_max / budget.t_ls));
  const int by_ad = d + static_cast<int>(std::floor(budget.t_max / budget.t_ad)) - 1;
  return std::max(by_ls, by_ad);
}

std::string TransitionPlan::sequence_key() const {
  std::string key;
  for (const auto& ep : episodes) {
    key += strf("%d", ep.switched_branch);
    key += ep.flags.adjust ? "A" : ".";
    key += "|";
  }
  return key;
}

namespace {

LinTerm output_expr(const NetworkCase& cs, const netcase::OutputSpec& o,
                    const PointVars& pv) {
  using K = netcase::OutputSpec::Kind;
  switch (o.kind) {
    case K::BusVoltage:
      return LinTerm::var(pv.v(cs.bus_index(o.bus)));
    case K::GenPower:
    case K::RotorAngle:
    case K::CigAngle: {
      for (size_t g = 0; g < cs.generators.size(); ++g) {
        if (cs.generators[g].id != o.device) continue;
        if (o.kind == K::GenPower) return LinTerm::var(pv.pg(g));
        if (o.kind == K::RotorAngle) return LinTerm::var(pv.de(g));
        return LinTerm::var(pv.thm(g));
      }
      throw std::out_of_range("unknown generator " + o.device);
    }
    case K::RotorSpeed:
      return LinTerm(0.0);  // zero at every steady or jumping state
  }
  return LinTerm(0.0);
}

// Operational constraint family for one steady-state point.
void add_operational_rows(ConstraintSystem& sys, const NetworkCase& cs,
                          const PointVars& pv, const std::vector<ZRef>& z,
                          const std::string& tag) {
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const auto& gen = cs.generators[g];
    if (gen.kind == GenKind::Sg) {
      LinTerm qv = LinTerm::var(pv.qg(g));
      sys.add_le(qv - LinTerm(gen.q_max), tag + "." + gen.id + ".qhi");
      sys.add_le(LinTerm(gen.q_min) - qv, tag + "." + gen.id + ".qlo");
    } else {
      sys.add_soc(LinTerm(gen.s_max),
                  {LinTerm::var(pv.pg(g)), LinTerm::var(pv.qg(g))},
                  tag + "." + gen.id + ".sgc");
      if (gen.pf_min > 0) {
        const double t = std::tan(std::acos(gen.pf_min));
        sys.add_le(LinTerm::var(pv.qg(g)) - t * LinTerm::var(pv.pg(g)),
                   tag + "." + gen.id + ".pf");
      }
    }
  }
  for (int e = 0; e < cs.n_branch(); ++e) {
    const auto& br = cs.branches[e];
    const int i = cs.bus_index(br.from), j = cs.bus_index(br.to);
    LinTerm dth = LinTerm::var(pv.th(i)) - LinTerm::var(pv.th(j));
    LinTerm relax = 2.0 * kPi * (LinTerm(1.0) - z[e].term());
    sys.add_le(dth - LinTerm(br.theta_max) - relax, tag + "." + br.id + ".ang_hi");
    sys.add_le(-1.0 * dth - LinTerm(br.theta_max) - relax, tag + "." + br.id + ".ang_lo");
    sys.add_soc(LinTerm(br.s_max), {LinTerm::var(pv.pfb(e)), LinTerm::var(pv.qfb(e))},
                tag + "." + br.id + ".sfb");
    sys.add_soc(LinTerm(br.s_max), {LinTerm::var(pv.ptb(e)), LinTerm::var(pv.qtb(e))},
                tag + "." + br.id + ".stb");
  }
}

// Maintain rows pinning the steady-state point to the episode's ACVs and the
// held dispatch/load weights, plus the rotor-angle reference.
void add_maintain_rows(ConstraintSystem& sys, const NetworkCase& cs,
                       const netcase::AcvLayout& lay, const PointVars& pv,
                       const std::vector<int>& a_s, const std::string& tag) {
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const int j = cs.bus_index(cs.generators[g].bus);
    sys.add_eq(LinTerm::var(pv.v(j)) - LinTerm::var(a_s[lay.vg_offset + g]),
               tag + "." + cs.generators[g].id + ".vset");
    if (cs.generators[g].slack) {
      sys.add_eq(LinTerm::var(pv.de(g)), tag + ".ref");
    } else if (cs.generators[g].has_ess) {
      int k = 0;
      for (; k < lay.pess_count; ++k)
        if (lay.ess_gen_indices[k] == static_cast<int>(g)) break;
      sys.add_eq(LinTerm::var(pv.pg(g)) - LinTerm::var(a_s[lay.pess_offset + k]),
                 tag + "." + cs.generators[g].id + ".pess");
    } else {
      sys.add_eq(LinTerm::var(pv.pg(g)) - LinTerm(cs.generators[g].p_set),
                 tag + "." + cs.generators[g].id + ".pgo");
    }
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    sys.add_eq(LinTerm::var(pv.epsp(l)) - LinTerm(cs.loads[l].eps_p),
               tag + "." + cs.loads[l].id + ".epsp");
    sys.add_eq(LinTerm::var(pv.epsq(l)) - LinTerm(cs.loads[l].eps_q),
               tag + "." + cs.loads[l].id + ".epsq");
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    const int j = cs.bus_index(cs.dvcs[d].bus);
    sys.add_eq(LinTerm::var(pv.v(j)) - LinTerm::var(a_s[lay.vdvc_offset + d]),
               tag + "." + cs.dvcs[d].id + ".vdvc");
  }
}

// Tie the episode's TCSC entries of a_s to the shared breakpoint encodings.
void tie_tcsc(ConstraintSystem& sys, const NetworkCase& cs,
              const netcase::AcvLayout& lay, const std::vector<int>& a_s,
              const std::vector<linpf::TcscEncoding>& encs, const std::string& tag) {
  for (int k = 0; k < lay.tcsc_count; ++k) {
    const auto& enc = encs[k];
    LinTerm bval(enc.b_lo);
    for (size_t m = 0; m < enc.eta.size(); ++m) bval.add(enc.eta[m], enc.tau(m));
    sys.add_eq(bval - LinTerm::var(a_s[lay.tcsc_offset + k]), tag + strf(".btcsc%d", k));
  }
}

// Squared-norm epigraph t >= sum_k w_k * expr_k^2 through a rotated-cone
// reformulation; returns the epigraph variable.
int quad_epigraph(ConstraintSystem& sys, const std::vector<LinTerm>& exprs,
                  const Vec& w, const std::string& tag) {
  int t = sys.add_var(tag + ".t", 0.0, 1e3);
  std::vector<LinTerm> tail;
  for (size_t k = 0; k < exprs.size(); ++k) {
    if (w(k) == 0.0) continue;
    tail.push_back(2.0 * std::sqrt(w(k)) * exprs[k]);
  }
  LinTerm tm1 = LinTerm::var(t);
  tm1.constant -= 1.0;
  tail.push_back(tm1);
  LinTerm tp1 = LinTerm::var(t);
  tp1.constant += 1.0;
  sys.add_soc(tp1, tail, tag + ".epi");
  return t;
}

// Norm epigraph t >= ||sqrt(w) o exprs||_2.
int norm_epigraph(ConstraintSystem& sys, const std::vector<LinTerm>& exprs,
                  const Vec& w, const std::string& tag) {
  int t = sys.add_var(tag + ".t", 0.0, 1e3);
  std::vector<LinTerm> tail;
  for (size_t k = 0; k < exprs.size(); ++k)
    if (w(k) != 0.0) tail.push_back(std::sqrt(w(k)) * exprs[k]);
  sys.add_soc(LinTerm::var(t), tail, tag + ".epi");
  return t;
}

double weighted_norm(const Vec& d, const Vec& w) {
  return std::sqrt((w.array() * d.array().square()).sum());
}

}  // namespace

Program build_program(const NetworkCase& cs, const ScenarioSpec& sc) {
  Program prog;
  const auto lay = netcase::acv_layout(cs);
  const int TU = compute_TU(sc.z0, sc.zT, sc.budget);
  prog.t_upper = TU;
  const int ne = cs.n_branch();
  const int ny = static_cast<int>(sc.outputs.size());
  const int d_mand = netcase::topology_distance(sc.z0, sc.zT);

  linpf::LinearizationConfig cfg;
  cfg.n_t = sc.lin.n_t;
  cfg.n_p = sc.lin.n_p;
  cfg.n_k = sc.lin.n_k;
  cfg.vhat = sc.lin.vhat;
  cfg.big_m = sc.lin.big_m;
  cfg.validate();

  // Endpoint steady states anchor the linearization and the optimal region.
  auto sol0 = acpf::solve_steady_state(cs, sc.z0, sc.a0_s, acpf::SsMode::PostAdjustment);
  auto solT = acpf::solve_steady_state(cs, sc.zT, sc.a0_s, acpf::SsMode::PostSwitching);
  prog.vprofile = linpf::VoltageProfile::from_solution(cs, sol0);
  prog.y_star0 = acpf::output_vector(cs, sc.outputs, sol0);
  prog.y_starT = acpf::output_vector(cs, sc.outputs, solT);
  prog.yL = prog.y_star0.cwiseMin(prog.y_starT);
  prog.yU = prog.y_star0.cwiseMax(prog.y_starT);

  // Terminal ACV repair: find the feasible setpoint vector closest to a0_s
  // under the linearized model at the final topology.
  {
    ConstraintSystem rsys;
    std::vector<ZRef> zT(ne);
    for (int e = 0; e < ne; ++e) zT[e].value = sc.zT.z(e);
    auto pv = linpf::register_point(rsys, cs, "rep", cfg);
    std::vector<int> avars(lay.n_s());
    for (int k = 0; k < lay.n_s(); ++k)
      avars[k] = rsys.add_var(strf("a.%d", k), lay.s_entries[k].lo, lay.s_entries[k].hi);
    std::vector<linpf::TcscEncoding> encs;
    for (int k = 0; k < lay.tcsc_count; ++k) {
      encs.push_back(linpf::encode_tcsc(rsys, cs, cs.tcsc_branches[k], cfg, "rep"));
      pv.b_tcsc(k) = avars[lay.tcsc_offset + k];
    }
    linpf::assemble_linear_pf(rsys, cs, cfg, "rep", pv, zT, encs, prog.vprofile);
    add_maintain_rows(rsys, cs, lay, pv, avars, "rep");
    tie_tcsc(rsys, cs, lay, avars, encs, "rep");
    add_operational_rows(rsys, cs, pv, zT, "rep");
    rsys.lower_sos2();
    std::vector<LinTerm> diffs;
    for (int k = 0; k < lay.n_s(); ++k) {
      LinTerm dk = LinTerm::var(avars[k]);
      dk.constant -= sc.a0_s(k);
      diffs.push_back(dk);
    }
    int t = norm_epigraph(rsys, diffs, sc.weights.w_as, "rep.dist");
    rsys.obj_add(LinTerm::var(t));
    auto rsol = socp::solve(rsys.compile());
    prog.ahat0 = sc.a0_s;
    if (rsol.status == socp::Status::Optimal && rsol.pobj > 1e-6) {
      for (int k = 0; k < lay.n_s(); ++k) prog.ahat0(k) = rsol.x(avars[k]);
    }
  }

  ConstraintSystem& sys = prog.sys;
  prog.eps.resize(TU);

  // Deterministic branching priority: episode-major topology binaries, then
  // adjustment flags, then whatever the linearizers introduce.
  std::vector<int> t_bd, t_vl, t_ts;
  LinTerm obj;

  for (int i = 0; i < TU; ++i) {
    auto& ev = prog.eps[i];
    const std::string et = strf("e%d", i + 1);
    ev.z.resize(ne);
    ev.sw.assign(ne, -1);
    for (int e = 0; e < ne; ++e) {
      if (!cs.branches[e].switchable) {
        ev.z[e].value = 1.0;
        continue;
      }
      ev.z[e].var = sys.add_binary(strf("z[%s].%s", et.c_str(), cs.branches[e].id.c_str()));
    }
    // Mandatory lines branch before interim candidates.
    for (int e = 0; e < ne; ++e)
      if (ev.z[e].is_var() && sc.z0.z(e) != sc.zT.z(e))
        prog.branch_priority.push_back(ev.z[e].var);
    for (int e = 0; e < ne; ++e)
      if (ev.z[e].is_var() && sc.z0.z(e) == sc.zT.z(e))
        prog.branch_priority.push_back(ev.z[e].var);
    ev.zeta = sys.add_binary(strf("zeta[%s]", et.c_str()));
    ev.ztil = sys.add_var(strf("ztil[%s]", et.c_str()), 0.0, 1.0);
    ev.zprime = sys.add_var(strf("zprime[%s]", et.c_str()), 0.0, 1.0);
    ev.a_s.resize(lay.n_s());
    for (int k = 0; k < lay.n_s(); ++k)
      ev.a_s[k] = sys.add_var(strf("a[%s].%s", et.c_str(), lay.s_entries[k].name.c_str()),
                              lay.s_entries[k].lo, lay.s_entries[k].hi);
    for (int k = 0; k < lay.tcsc_count; ++k)
      ev.tcsc.push_back(linpf::encode_tcsc(sys, cs, cs.tcsc_branches[k], cfg, et));
    tie_tcsc(sys, cs, lay, ev.a_s, ev.tcsc, et);

    // Operating points: post-adjustment at the previous topology, jumping and
    // post-switching at this episode's topology.
    const std::vector<ZRef>& z_now = ev.z;
    std::vector<ZRef> z_prev(ne);
    if (i == 0) {
      for (int e = 0; e < ne; ++e) z_prev[e].value = sc.z0.z(e);
    } else {
      z_prev = prog.eps[i - 1].z;
    }
    ev.minus = linpf::register_point(sys, cs, et + "-", cfg);
    ev.plus = linpf::register_point(sys, cs, et + "+", cfg);
    ev.star = linpf::register_point(sys, cs, et + "*", cfg);
    for (int k = 0; k < lay.tcsc_count; ++k) {
      ev.minus.b_tcsc(k) = ev.a_s[lay.tcsc_offset + k];
      ev.plus.b_tcsc(k) = ev.a_s[lay.tcsc_offset + k];
      ev.star.b_tcsc(k) = ev.a_s[lay.tcsc_offset + k];
    }
    linpf::assemble_linear_pf(sys, cs, cfg, et + "-", ev.minus, z_prev, ev.tcsc,
                              prog.vprofile);
    linpf::assemble_linear_pf(sys, cs, cfg, et + "+", ev.plus, z_now, ev.tcsc,
                              prog.vprofile);
    linpf::assemble_linear_pf(sys, cs, cfg, et + "*", ev.star, z_now, ev.tcsc,
                              prog.vprofile);
    add_maintain_rows(sys, cs, lay, ev.minus, ev.a_s, et + "-");
    add_maintain_rows(sys, cs, lay, ev.star, ev.a_s, et + "*");
    add_operational_rows(sys, cs, ev.minus, z_prev, et + "-");
    add_operational_rows(sys, cs, ev.star, z_now, et + "*");

    // Frozen jump: the x_c stack carries over from the pre-switching point.
    auto freeze = [&](int a, int b, const char* nm) {
      if (a < 0 || b < 0) return;
      sys.add_eq(LinTerm::var(a) - LinTerm::var(b), et + ".frz." + nm);
    };
    for (size_t g = 0; g < cs.generators.size(); ++g) {
      freeze(ev.plus.e(g), ev.minus.e(g), "e");
      freeze(ev.plus.de(g), ev.minus.de(g), "de");
      freeze(ev.plus.es(g), ev.minus.es(g), "es");
      freeze(ev.plus.des(g), ev.minus.des(g), "des");
      freeze(ev.plus.vm(g), ev.minus.vm(g), "vm");
      freeze(ev.plus.thm(g), ev.minus.thm(g), "thm");
    }
    for (size_t l = 0; l < cs.loads.size(); ++l) {
      freeze(ev.plus.em(l), ev.minus.em(l), "em");
      freeze(ev.plus.dem(l), ev.minus.dem(l), "dem");
    }
    for (size_t dv = 0; dv < cs.dvcs.size(); ++dv) {
      freeze(ev.plus.bsvc(dv), ev.minus.bsvc(dv), "bsvc");
      freeze(ev.plus.vs(dv), ev.minus.vs(dv), "vs");
      freeze(ev.plus.ths(dv), ev.minus.ths(dv), "ths");
    }

    // RSI bounds at the switching instant.
    for (size_t g = 0; g < cs.generators.size(); ++g) {
      if (cs.generators[g].kind != GenKind::Sg) continue;
      LinTerm dp = LinTerm::var(ev.plus.pg(g)) - LinTerm::var(ev.minus.pg(g));
      const double cap = cs.limits.eps_rsi_sg * cs.generators[g].p_rated;
      sys.add_le(dp - LinTerm(cap), et + "." + cs.generators[g].id + ".rsi_hi");
      sys.add_le(-1.0 * dp - LinTerm(cap), et + "." + cs.generators[g].id + ".rsi_lo");
    }
    for (size_t l = 0; l < cs.loads.size(); ++l) {
      if (!cs.loads[l].has_im()) continue;
      LinTerm de = LinTerm::var(ev.minus.epsp(l)) - LinTerm::var(ev.plus.epsp(l));
      const double cap = cs.limits.eps_rsi_im * cs.loads[l].p_rated;
      sys.add_le(cs.loads[l].p0 * de - LinTerm(cap), et + "." + cs.loads[l].id + ".rsi_hi");
      sys.add_le(-cs.loads[l].p0 * de - LinTerm(cap), et + "." + cs.loads[l].id + ".rsi_lo");
    }

    // Switch indicators: sw = |z_i - z_{i-1}| per branch, exactly at binaries.
    LinTerm swsum;
    for (int e = 0; e < ne; ++e) {
      if (!cs.branches[e].switchable) continue;
      int s = sys.add_var(strf("sw[%s].%s", et.c_str(), cs.branches[e].id.c_str()), 0.0, 1.0);
      ev.sw[e] = s;
      LinTerm zi = ev.z[e].term();
      LinTerm zp = z_prev[e].term();
      sys.add_le(zi - zp - LinTerm::var(s), et + "." + cs.branches[e].id + ".sw1");
      sys.add_le(zp - zi - LinTerm::var(s), et + "." + cs.branches[e].id + ".sw2");
      sys.add_le(LinTerm::var(s) - zi - zp, et + "." + cs.branches[e].id + ".sw3");
      sys.add_le(LinTerm::var(s) + zi + zp - LinTerm(2.0), et + "." + cs.branches[e].id + ".sw4");
      swsum.add(s, 1.0);
    }
    sys.add_eq(swsum - LinTerm::var(ev.ztil), et + ".ztil");
    sys.add_le(LinTerm::var(ev.ztil) - LinTerm(1.0), et + ".single_switch");

    // ACV carry / adjustment cap with the zeta link.
    {
      std::vector<LinTerm> diffs;
      for (int k = 0; k < lay.n_s(); ++k) {
        LinTerm dk = LinTerm::var(ev.a_s[k]);
        if (i == 0) dk.constant -= sc.a0_s(k);
        else dk.add(prog.eps[i - 1].a_s[k], -1.0);
        diffs.push_back(dk);
      }
      std::vector<LinTerm> tail;
      for (int k = 0; k < lay.n_s(); ++k)
        if (sc.weights.w_as(k) != 0.0)
          tail.push_back(std::sqrt(sc.weights.w_as(k)) * diffs[k]);
      sys.add_soc(sc.sigma_as * LinTerm::var(ev.zeta), tail, et + ".adjcap");
    }

    // Flag structure.
    sys.add_le(LinTerm::var(ev.zeta) - LinTerm::var(ev.zprime), et + ".zp1");
    sys.add_le(LinTerm::var(ev.ztil) - LinTerm::var(ev.zprime), et + ".zp2");
    sys.add_le(LinTerm::var(ev.zprime) - LinTerm::var(ev.zeta) - LinTerm::var(ev.ztil),
               et + ".zp3");

    // Connectivity (single-commodity flow) for interior episodes.
    if (i + 1 < TU) {
      const double mc = 2.0 * cs.n_bus();
      std::vector<int> o(cs.n_bus()), rho(ne);
      for (int b = 0; b < cs.n_bus(); ++b)
        o[b] = sys.add_var(strf("o[%s].%d", et.c_str(), b), -mc, mc);
      for (int e = 0; e < ne; ++e)
        rho[e] = sys.add_var(strf("rho[%s].%s", et.c_str(), cs.branches[e].id.c_str()),
                             -mc, mc);
      std::vector<LinTerm> bal(cs.n_bus());
      const int refb = cs.bus_index(cs.generators[cs.slack_gen()].bus);
      for (int e = 0; e < ne; ++e) {
        const int bi = cs.bus_index(cs.branches[e].from);
        const int bj = cs.bus_index(cs.branches[e].to);
        bal[bi].add(rho[e], 1.0);
        bal[bj].add(rho[e], -1.0);
        LinTerm pot = LinTerm::var(o[bi]) - LinTerm::var(o[bj]) - LinTerm::var(rho[e]);
        LinTerm relax = mc * (LinTerm(1.0) - ev.z[e].term());
        sys.add_le(pot - relax, et + "." + cs.branches[e].id + ".c1");
        sys.add_le(-1.0 * pot - relax, et + "." + cs.branches[e].id + ".c2");
        LinTerm cap = mc * ev.z[e].term();
        sys.add_le(LinTerm::var(rho[e]) - cap, et + "." + cs.branches[e].id + ".c3");
        sys.add_le(-1.0 * LinTerm::var(rho[e]) - cap, et + "." + cs.branches[e].id + ".c4");
      }
      for (int b = 0; b < cs.n_bus(); ++b) {
        const double inj = b == refb ? static_cast<double>(cs.n_bus() - 1) : -1.0;
        bal[b].constant -= inj;
        sys.add_eq(bal[b], strf("%s.conn.%d", et.c_str(), cs.buses[b].id));
      }
    }

    // Objective pieces.
    {
      const double m_bd = 10.0;
      // Post-adjustment boundedness (masked by zeta).
      std::vector<LinTerm> odev;
      for (int k = 0; k < ny; ++k) {
        LinTerm yk = output_expr(cs, sc.outputs[k], ev.minus);
        int olo = sys.add_var(strf("bdlo[%s-].%d", et.c_str(), k), 0.0, m_bd);
        int ohi = sys.add_var(strf("bdhi[%s-].%d", et.c_str(), k), 0.0, m_bd);
        LinTerm mask = m_bd * (LinTerm(1.0) - LinTerm::var(ev.zeta));
        sys.add_le(LinTerm(prog.yL(k)) - yk - LinTerm::var(olo) - mask,
                   strf("%s.bdlo%d", et.c_str(), k));
        sys.add_le(yk - LinTerm(prog.yU(k)) - LinTerm::var(ohi) - mask,
                   strf("%s.bdhi%d", et.c_str(), k));
        odev.push_back(LinTerm::var(olo));
        odev.push_back(LinTerm::var(ohi));
      }
      Vec wbd(2 * ny);
      for (int k = 0; k < ny; ++k) {
        wbd(2 * k) = sc.weights.w_bd_l(k);
        wbd(2 * k + 1) = sc.weights.w_bd_u(k);
      }
      int tb = quad_epigraph(sys, odev, wbd, strf("%s.bdm", et.c_str()));
      obj.add(tb, 1.0);
      t_bd.push_back(tb);
      // Post-switching boundedness counts for i = 1..T-1 (masked by ztil).
      if (i + 1 < TU) {
        std::vector<LinTerm> sdev;
        for (int k = 0; k < ny; ++k) {
          LinTerm yk = output_expr(cs, sc.outputs[k], ev.star);
          int olo = sys.add_var(strf("bdlo[%s*].%d", et.c_str(), k), 0.0, m_bd);
          int ohi = sys.add_var(strf("bdhi[%s*].%d", et.c_str(), k), 0.0, m_bd);
          LinTerm mask = m_bd * (LinTerm(1.0) - LinTerm::var(ev.ztil));
          sys.add_le(LinTerm(prog.yL(k)) - yk - LinTerm::var(olo) - mask,
                     strf("%s.sbdlo%d", et.c_str(), k));
          sys.add_le(yk - LinTerm(prog.yU(k)) - LinTerm::var(ohi) - mask,
                     strf("%s.sbdhi%d", et.c_str(), k));
          sdev.push_back(LinTerm::var(olo));
          sdev.push_back(LinTerm::var(ohi));
        }
        int tb2 = quad_epigraph(sys, sdev, wbd, strf("%s.bds", et.c_str()));
        obj.add(tb2, 1.0);
        t_bd.push_back(tb2);
      }
      // Volatility legs.
      std::vector<LinTerm> leg1, leg2;
      for (int k = 0; k < ny; ++k) {
        LinTerm ym = output_expr(cs, sc.outputs[k], ev.minus);
        LinTerm ys = output_expr(cs, sc.outputs[k], ev.star);
        LinTerm yprev = i == 0 ? LinTerm(prog.y_star0(k))
                               : output_expr(cs, sc.outputs[k], prog.eps[i - 1].star);
        leg1.push_back(yprev - ym);
        leg2.push_back(ym - ys);
      }
      int tv1 = norm_epigraph(sys, leg1, sc.weights.w_vl, strf("%s.vl1", et.c_str()));
      int tv2 = norm_epigraph(sys, leg2, sc.weights.w_vl, strf("%s.vl2", et.c_str()));
      obj.add(tv1, 1.0);
      obj.add(tv2, 1.0);
      t_vl.push_back(tv1);
      t_vl.push_back(tv2);
      // Jumping-state transient surrogate.
      std::vector<LinTerm> jdev;
      Vec wts(ny);
      for (int k = 0; k < ny; ++k) {
        jdev.push_back(output_expr(cs, sc.outputs[k], ev.plus) -
                       output_expr(cs, sc.outputs[k], ev.star));
        wts(k) = sc.weights.w_ts(k) * sc.weights.w_ts_scale(k);
      }
      int tt = quad_epigraph(sys, jdev, wts, strf("%s.ts", et.c_str()));
      obj.add(tt, 1.0);
      t_ts.push_back(tt);
      // Penalty on adjustment executions.
      obj.add(ev.zeta, sc.weights.delta_pen);
    }
  }
  for (int i = 0; i < TU; ++i) prog.branch_priority.push_back(prog.eps[i].zeta);

  // Sequence-structure rows: fictitious episodes trail.
  for (int i = 0; i + 1 < TU; ++i)
    sys.add_le(LinTerm::var(prog.eps[i + 1].zprime) - LinTerm::var(prog.eps[i].zprime),
               strf("seq.mono%d", i));
  for (int i = 0; i + 2 < TU; ++i) {
    const int a = prog.eps[i].zprime, b = prog.eps[i + 1].zprime, c = prog.eps[i + 2].zprime;
    auto row = [&](double ca, double cb, double cc, double rhs, const char* nm) {
      LinTerm t;
      t.add(a, -ca);
      t.add(b, -cb);
      t.add(c, -cc);
      t.constant += rhs;  // ca*a+cb*b+cc*c >= rhs  ->  rhs - (...) <= 0
      sys.add_le(t, strf("seq.pat%d.%s", i, nm));
    };
    row(1, 1, -1, 0, "r1");
    row(1, -1, 1, 0, "r2");
    row(1, -1, -1, -1, "r3");
    row(-1, 1, -1, -1, "r4");
  }
  // Combine adjacent adjustment-only + switching-only episodes.
  for (int i = 0; i + 1 < TU; ++i) {
    LinTerm t = LinTerm::var(prog.eps[i].zeta) + LinTerm::var(prog.eps[i + 1].ztil) -
                LinTerm::var(prog.eps[i].ztil) - LinTerm::var(prog.eps[i + 1].zeta);
    t.constant -= 1.0;
    sys.add_le(t, strf("seq.comb%d", i));
  }

  // Budget.
  {
    LinTerm t;
    for (int i = 0; i < TU; ++i) {
      t.add(prog.eps[i].zeta, sc.budget.t_ad);
      t.add(prog.eps[i].ztil, sc.budget.t_ls);
    }
    t.constant -= sc.budget.t_ls * d_mand + sc.budget.t_max;
    sys.add_le(t, "budget");
  }

  // Non-participating branches: only the mandatory switch.
  for (int e = 0; e < ne; ++e) {
    if (!cs.branches[e].non_participating || !cs.branches[e].switchable) continue;
    LinTerm t;
    for (int i = 0; i < TU; ++i)
      if (prog.eps[i].sw[e] >= 0) t.add(prog.eps[i].sw[e], 1.0);
    t.constant -= std::abs(sc.z0.z(e) - sc.zT.z(e));
    sys.add_eq(t, strf("np.%s", cs.branches[e].id.c_str()));
  }

  // Terminal conditions.
  for (int e = 0; e < ne; ++e) {
    if (!cs.branches[e].switchable) continue;
    LinTerm t = prog.eps[TU - 1].z[e].term();
    t.constant -= sc.zT.z(e);
    sys.add_eq(t, strf("term.z.%s", cs.branches[e].id.c_str()));
  }
  for (int k = 0; k < lay.n_s(); ++k) {
    LinTerm t = LinTerm::var(prog.eps[TU - 1].a_s[k]);
    t.constant -= prog.ahat0(k);
    sys.add_eq(t, strf("term.a.%d", k));
  }

  // Volatility reference-path constant.
  obj.constant -= weighted_norm(prog.y_star0 - prog.y_starT, sc.weights.w_vl);
  sys.obj_add(obj);
  sys.lower_sos2();

  // Stash the component epigraphs for breakdown extraction.
  prog.t_bd_vars = t_bd;
  prog.t_vl_vars = t_vl;
  prog.t_ts_vars = t_ts;
  prog.vl_offset = -weighted_norm(prog.y_star0 - prog.y_starT, sc.weights.w_vl);
  return prog;
}

TransitionPlan Program::extract_plan(const NetworkCase& cs, const ScenarioSpec& sc,
                                     const Vec& x) const {
  TransitionPlan plan;
  const auto lay = netcase::acv_layout(cs);
  TopologyVector zprev = sc.z0;
  for (const auto& ev : eps) {
    Episode ep;
    ep.z.z.resize(cs.n_branch());
    for (int e = 0; e < cs.n_branch(); ++e)
      ep.z.z(e) = ev.z[e].is_var() ? static_cast<int>(std::round(x(ev.z[e].var)))
                                   : static_cast<int>(ev.z[e].value);
    ep.a_s.resize(lay.n_s());
    for (int k = 0; k < lay.n_s(); ++k) ep.a_s(k) = x(ev.a_s[k]);
    ep.a_t = sc.a0_t;
    ep.flags.adjust = x(ev.zeta) > 0.5;
    ep.flags.sw = netcase::topology_distance(zprev, ep.z) > 0;
    for (int e = 0; e < cs.n_branch(); ++e)
      if (ep.z.z(e) != zprev.z(e)) ep.switched_branch = e;
    zprev = ep.z;
    plan.episodes.push_back(std::move(ep));
  }
  plan.provenance = Provenance::Stage1;
  double hbd = 0, hvl = vl_offset, hts = 0;
  for (int t : t_bd_vars) hbd += x(t);
  for (int t : t_vl_vars) hvl += x(t);
  for (int t : t_ts_vars) hts += x(t);
  plan.h_bd = hbd;
  plan.h_vl = hvl;
  plan.h_ts_sur = hts;
  double pen = 0;
  for (const auto& ev : eps) pen += sc.weights.delta_pen * x(ev.zeta);
  plan.objective = hbd + hvl + hts + pen;
  return plan;
}

TransitionPlan post_treat(TransitionPlan raw) {
  // Trailing fictitious episodes drop; interior ones violate the sequence
  // structure and mean the solver broke an invariant.
  int last_real = -1;
  for (int i = 0; i < raw.T(); ++i)
    if (raw.episodes[i].flags.real()) last_real = i;
  for (int i = 0; i <= last_real; ++i)
    if (!raw.episodes[i].flags.real())
      throw std::logic_error("interior fictitious episode in a stage-1 solution");
  raw.episodes.resize(last_real + 1);
  return raw;
}

std::optional<ExactEval> evaluate_frozen_sequence(const NetworkCase& cs,
                                                  const ScenarioSpec& sc,
                                                  const std::vector<Episode>& episodes,
                                                  const Vec& y_star0, const Vec& y_starT) {
  ExactEval ev;
  const Vec a0 = sc.a0_s;
  bump::SsTrajectory traj;
  traj.y_star_0 = y_star0;
  std::vector<Vec> yplus, ystar;
  acpf::SteadyStateSolution prev;
  bool have_prev = false;
  TopologyVector zprev = sc.z0;
  try {
    for (const auto& ep : episodes) {
      auto minus = acpf::solve_steady_state(cs, zprev, ep.a_s, acpf::SsMode::PostAdjustment,
                                            {}, have_prev ? &prev : nullptr);
      auto plus = acpf::jumping_state(cs, ep.z, ep.a_s, minus.frozen(cs), {}, &minus);
      auto star = acpf::solve_steady_state(cs, ep.z, ep.a_s, acpf::SsMode::PostSwitching,
                                           {}, &plus);
      // Operational audit per point.
      for (const auto* sol : {&minus, &star}) {
        auto v = plancheck::point_limit_violations(
            cs, *sol, sol == &minus ? zprev : ep.z, 1e-6);
        if (!v.empty()) return std::nullopt;
      }
      if (!plancheck::rsi_violations(cs, minus, plus, 1e-6).empty()) return std::nullopt;
      traj.y_minus.push_back(acpf::output_vector(cs, sc.outputs, minus));
      traj.y_star.push_back(acpf::output_vector(cs, sc.outputs, star));
      traj.real_adjust.push_back(ep.flags.adjust);
      traj.real_switch.push_back(ep.flags.sw);
      yplus.push_back(acpf::output_vector(cs, sc.outputs, plus));
      ystar.push_back(traj.y_star.back());
      ev.minus.push_back(minus);
      ev.plus.push_back(plus);
      ev.star.push_back(star);
      prev = star;
      have_prev = true;
      zprev = ep.z;
    }
  } catch (const SolveError&) {
    return std::nullopt;
  }
  auto region = bump::optimal_region(y_star0, y_starT);
  ev.h_bd = bump::h_bd(traj, region, sc.weights.w_bd_l, sc.weights.w_bd_u);
  ev.h_vl = bump::h_vl(traj, sc.weights.w_vl);
  ev.h_ts = bump::h_ts_jump(yplus, ystar, sc.weights.w_ts, sc.weights.w_ts_scale);
  double pen = 0;
  for (const auto& ep : episodes)
    if (ep.flags.adjust) pen += sc.weights.delta_pen;
  ev.objective = ev.h_bd + ev.h_vl + ev.h_ts + pen;
  return ev;
}


// ---------------------------------------------------------------------------
// Solving.

namespace {

struct PoolCollector {
  int n_s = 1;
  bool maximize = false;
  std::vector<TransitionPlan> plans;

  bool better(double a, double b) const { return maximize ? a > b : a < b; }

  void insert(TransitionPlan p) {
    const std::string key = p.sequence_key();
    for (auto& q : plans) {
      if (q.sequence_key() == key) {
        if (better(p.objective, q.objective)) q = std::move(p);
        sort_trim();
        return;
      }
    }
    plans.push_back(std::move(p));
    sort_trim();
  }

  void sort_trim() {
    std::stable_sort(plans.begin(), plans.end(),
                     [&](const TransitionPlan& a, const TransitionPlan& b) {
                       return better(a.objective, b.objective);
                     });
    if (static_cast<int>(plans.size()) > n_s) plans.resize(n_s);
  }

  double cutoff() const {
    if (static_cast<int>(plans.size()) < n_s)
      return std::numeric_limits<double>::infinity();
    return plans.back().objective;
  }
};

struct BnbNode {
  double bound = -std::numeric_limits<double>::infinity();
  long id = 0;
  std::map<int, int> fix;
};

struct BnbOrder {
  bool operator()(const BnbNode& a, const BnbNode& b) const {
    if (a.bound != b.bound) return a.bound > b.bound;  // min-heap on bound
    return a.id > b.id;
  }
};



// Exact surrogate scoring of a candidate plan through the nonlinear chain;
// infeasible or constraint-violating plans are rejected from the pool.
bool score_exact(const NetworkCase& cs, const ScenarioSpec& sc, const Program& prog,
                 TransitionPlan& plan) {
  auto ev = evaluate_frozen_sequence(cs, sc, plan.episodes, prog.y_star0, prog.y_starT);
  if (!ev) return false;
  plan.objective = ev->objective;
  plan.h_bd = ev->h_bd;
  plan.h_vl = ev->h_vl;
  plan.h_ts_sur = ev->h_ts;
  return true;
}

// Resolve the linearization binaries of a sequence-complete node by
// structure-aware rounding: TCSC codes snap to the breakpoint nearest the
// relaxed susceptance, SOS2 groups to the interval holding the relaxed
// interpolation point.
std::optional<TransitionPlan> group_dive(const NetworkCase& cs, const ScenarioSpec& sc,
                                         const Program& prog, std::map<int, int> fix,
                                         long& nodes_used) {
  for (int round = 0; round < 6; ++round) {
    auto sol = socp::solve(prog.sys.compile(fix));
    ++nodes_used;
    if (sol.status == socp::Status::PrimalInfeasible) return std::nullopt;
    if (sol.x.size() != prog.sys.n_vars()) return std::nullopt;
    if (sol.status != socp::Status::Optimal && (sol.pres > 1e-4 || sol.dres > 1e-4))
      return std::nullopt;
    bool fixed_any = false;
    // TCSC codes, one episode at a time.
    for (const auto& ev : prog.eps) {
      for (const auto& enc : ev.tcsc) {
        bool open_bits = false;
        for (int b : enc.eta)
          if (!fix.count(b)) open_bits = true;
        if (!open_bits) continue;
        double bbar = enc.b_lo;
        for (size_t k = 0; k < enc.eta.size(); ++k)
          bbar += sol.x(enc.eta[k]) * enc.tau(k);
        int best = 0;
        double bestd = 1e30;
        for (int i = 0; i < enc.n_bp(); ++i) {
          double bv = enc.b_lo;
          for (size_t k = 0; k < enc.eta.size(); ++k) bv += enc.codes[i](k) * enc.tau(k);
          if (std::abs(bv - bbar) < bestd) {
            bestd = std::abs(bv - bbar);
            best = i;
          }
        }
        for (size_t k = 0; k < enc.eta.size(); ++k)
          fix[enc.eta[k]] = enc.codes[best](k);
        fixed_any = true;
      }
    }
    // SOS2 groups via their interpolation position.
    for (const auto& grp : prog.sys.sos2()) {
      if (grp.ybits.empty()) continue;
      bool open_bits = false;
      for (int b : grp.ybits)
        if (!fix.count(b)) open_bits = true;
      if (!open_bits) continue;
      double pos = 0, tot = 0;
      for (size_t k = 0; k < grp.lambdas.size(); ++k) {
        pos += sol.x(grp.lambdas[k]) * static_cast<double>(k);
        tot += sol.x(grp.lambdas[k]);
      }
      if (tot > 1e-9) pos /= tot;
      const int ni = static_cast<int>(grp.lambdas.size()) - 1;
      int j = std::clamp(static_cast<int>(std::floor(pos)), 0, ni - 1);
      const unsigned code = static_cast<unsigned>(j ^ (j >> 1));
      for (size_t b = 0; b < grp.ybits.size(); ++b)
        fix[grp.ybits[b]] = (code >> b) & 1;
      fixed_any = true;
    }
    // Any stragglers (should not normally remain) round directly.
    if (!fixed_any) {
      bool all_done = true;
      for (int b : prog.sys.binaries()) {
        if (fix.count(b)) continue;
        fix[b] = sol.x(b) > 0.5 ? 1 : 0;
        all_done = false;
      }
      if (all_done) {
        try {
          auto plan = post_treat(prog.extract_plan(cs, sc, sol.x));
          if (!score_exact(cs, sc, prog, plan)) return std::nullopt;
          return plan;
        } catch (const std::logic_error&) {
          return std::nullopt;
        }
      }
    }
  }
  return std::nullopt;
}

// Best-first branch and bound over the program's binaries; integral leaves
// are polished with all binaries fixed and offered to the pool.
void bnb_core(const NetworkCase& cs, const ScenarioSpec& sc, const Program& prog,
              const std::map<int, int>& base_fix, PoolCollector& pool,
              const SolveOptions& opts, bool& complete,
              std::chrono::steady_clock::time_point deadline, long& nodes_used) {
  std::priority_queue<BnbNode, std::vector<BnbNode>, BnbOrder> pq;
  long next_id = 0;
  BnbNode root;
  root.fix = base_fix;
  root.id = next_id++;
  pq.push(root);

  std::map<int, int> prio_rank;
  for (size_t k = 0; k < prog.branch_priority.size(); ++k)
    prio_rank[prog.branch_priority[k]] = static_cast<int>(k);

  while (!pq.empty()) {
    if (std::chrono::steady_clock::now() > deadline || nodes_used > opts.node_limit) {
      complete = false;
      return;
    }
    BnbNode node = pq.top();
    pq.pop();
    if (node.bound >= pool.cutoff() - 1e-12) continue;
    ++nodes_used;

    auto prob = prog.sys.compile(node.fix);
    auto sol = socp::solve(prob);
    if (sol.status == socp::Status::PrimalInfeasible) continue;
    double bound;
    if (sol.status == socp::Status::Optimal) {
      bound = sol.pobj + prog.vl_offset;
    } else if (sol.pres < 1e-4 && sol.dres < 1e-4) {
      bound = sol.pobj + prog.vl_offset - 10.0 * (sol.gap + sol.pres + sol.dres);
    } else {
      bound = node.bound;  // keep exploring blind
    }
    if (bound >= pool.cutoff() - 1e-12) continue;

    // Fractional structural binaries (topology and adjustment flags), in
    // branching priority; linearization binaries resolve via the group dive.
    int pick = -1;
    double pick_frac = -1;
    int pick_rank = std::numeric_limits<int>::max();
    bool have_x = sol.x.size() == prog.sys.n_vars();
    if (have_x) {
      for (int b : prog.branch_priority) {
        if (node.fix.count(b)) continue;
        const double v = sol.x(b);
        const double frac = std::abs(v - std::round(v));
        if (frac < 1e-4) continue;
        auto it = prio_rank.find(b);
        const int rank = it->second;
        if (rank < pick_rank || (rank == pick_rank && frac > pick_frac)) {
          pick = b;
          pick_rank = rank;
          pick_frac = frac;
        }
      }
    }
    if (pick < 0 && have_x) {
      // Structure settled: pin the structural binaries at their integral
      // values and let the dive resolve the discretization binaries.
      std::map<int, int> leaf_fix = node.fix;
      for (int b : prog.branch_priority)
        if (!leaf_fix.count(b)) leaf_fix[b] = static_cast<int>(std::round(sol.x(b)));
      auto plan = group_dive(cs, sc, prog, leaf_fix, nodes_used);
      if (plan) pool.insert(std::move(*plan));
      continue;
    }
    if (pick < 0) continue;  // unsolved relaxation with nothing to branch on

    const double v = sol.x(pick);
    const int first = v > 0.5 ? 1 : 0;
    for (int side = 0; side < 2; ++side) {
      BnbNode child;
      child.fix = node.fix;
      child.fix[pick] = side == 0 ? first : 1 - first;
      child.bound = bound;
      child.id = next_id++;
      pq.push(child);
    }
  }
}

// Structural sequence enumeration shared by the enumerate mode.
struct SeqState {
  std::vector<int> switched;      // branch index per episode (-1 = none)
  std::vector<bool> adjusted;     // zeta per episode
  TopologyVector z;
  int n_ad = 0, n_sw = 0;
};

void enumerate_sequences(const NetworkCase& cs, const ScenarioSpec& sc,
                         const Program& prog, PoolCollector& pool,
                         const SolveOptions& opts, bool& complete,
                         std::chrono::steady_clock::time_point deadline) {
  const int TU = prog.t_upper;
  const int d = netcase::topology_distance(sc.z0, sc.zT);
  const bool frozen = sc.freeze_acv;
  long nodes_used = 0;

  std::vector<int> np_flips(cs.n_branch(), 0);

  std::function<void(SeqState&)> leaf = [&](SeqState& st) {
    if (netcase::topology_distance(st.z, sc.zT) != 0) return;
    const int L = static_cast<int>(st.switched.size());
    std::vector<Episode> eps;
    TopologyVector zcur = sc.z0;
    for (int i = 0; i < L; ++i) {
      Episode ep;
      if (st.switched[i] >= 0) zcur.z(st.switched[i]) = 1 - zcur.z(st.switched[i]);
      ep.z = zcur;
      ep.a_s = sc.a0_s;
      ep.a_t = sc.a0_t;
      ep.flags.adjust = st.adjusted[i];
      ep.flags.sw = st.switched[i] >= 0;
      ep.switched_branch = st.switched[i];
      eps.push_back(std::move(ep));
    }
    if (frozen) {
      auto ev = evaluate_frozen_sequence(cs, sc, eps, prog.y_star0, prog.y_starT);
      if (!ev) return;
      TransitionPlan plan;
      plan.episodes = std::move(eps);
      plan.objective = ev->objective;
      plan.h_bd = ev->h_bd;
      plan.h_vl = ev->h_vl;
      plan.h_ts_sur = ev->h_ts;
      pool.insert(std::move(plan));
    } else {
      // Fix the structural binaries and resolve the remaining discrete
      // choices with the branch-and-bound core.
      std::map<int, int> fix;
      TopologyVector zstep = sc.z0;
      for (int i = 0; i < TU; ++i) {
        if (i < L && st.switched[i] >= 0)
          zstep.z(st.switched[i]) = 1 - zstep.z(st.switched[i]);
        for (int e = 0; e < cs.n_branch(); ++e)
          if (prog.eps[i].z[e].is_var()) fix[prog.eps[i].z[e].var] = zstep.z(e);
        fix[prog.eps[i].zeta] = (i < L && st.adjusted[i]) ? 1 : 0;
      }
      bnb_core(cs, sc, prog, fix, pool, opts, complete, deadline, nodes_used);
    }
  };

  std::function<void(SeqState&, bool)> recurse = [&](SeqState& st, bool prev_adj_only) {
    const int i = static_cast<int>(st.switched.size());
    if (netcase::topology_distance(st.z, sc.zT) == 0) leaf(st);
    if (i >= TU) return;
    if (std::chrono::steady_clock::now() > deadline) {
      complete = false;
      return;
    }
    const int remaining = netcase::topology_distance(st.z, sc.zT);
    if (remaining > TU - i) return;  // cannot finish in time

    std::vector<bool> adj_opts;
    if (frozen) adj_opts = {false};
    else adj_opts = {false, true};

    for (int e = -1; e < cs.n_branch(); ++e) {
      if (e >= 0) {
        if (!cs.branches[e].switchable) continue;
        if (cs.branches[e].non_participating) {
          if (sc.z0.z(e) == sc.zT.z(e) || np_flips[e] > 0) continue;
          if (st.z.z(e) != sc.z0.z(e)) continue;
        }
        TopologyVector znew = st.z;
        znew.z(e) = 1 - znew.z(e);
        if (!netcase::is_connected(cs, znew)) continue;
        // Budget lower bound: interim switches performed so far plus the
        // cheapest completion.
        const int future_remaining = netcase::topology_distance(znew, sc.zT);
        const int interim = st.n_sw + 1 + future_remaining - d;
        if (sc.budget.t_ls * interim + sc.budget.t_ad * st.n_ad >
            sc.budget.t_max + 1e-9)
          continue;
      }
      for (bool adj : adj_opts) {
        if (e < 0 && !adj) continue;  // fully fictitious episodes only trail
        if (prev_adj_only && adj == false && e >= 0) continue;  // must combine
        if (adj && sc.budget.t_ad * (st.n_ad + 1) +
                       sc.budget.t_ls * std::max(0, st.n_sw + remaining - d) >
                   sc.budget.t_max + 1e-9)
          continue;
        SeqState next = st;
        next.switched.push_back(e);
        next.adjusted.push_back(adj);
        if (e >= 0) {
          next.z.z(e) = 1 - next.z.z(e);
          ++next.n_sw;
          if (cs.branches[e].non_participating) ++np_flips[e];
        }
        if (adj) ++next.n_ad;
        recurse(next, adj && e < 0);
        if (e >= 0 && cs.branches[e].non_participating) --np_flips[e];
      }
    }
  };

  SeqState st;
  st.z = sc.z0;
  recurse(st, false);
}

}  // namespace

SolutionPool solve(const NetworkCase& cs, const ScenarioSpec& sc, Program& prog,
                   const SolveOptions& opts) {
  SolutionPool out;
  PoolCollector pool;
  pool.n_s = sc.pool;
  pool.maximize = sc.maximize;
  if (sc.maximize && !(opts.mode == SolveMode::Enumerate && sc.freeze_acv))
    throw std::invalid_argument(
        "maximizing the surrogate requires enumerate mode with frozen ACVs");
  bool complete = true;
  auto deadline = std::chrono::steady_clock::now() +
                  std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                      std::chrono::duration<double>(opts.time_limit_s));

  switch (opts.mode) {
    case SolveMode::Enumerate:
      enumerate_sequences(cs, sc, prog, pool, opts, complete, deadline);
      break;
    case SolveMode::BranchAndBound: {
      long nodes_used = 0;
      // Seed the pool from exact frozen-ACV sequencing so best-first search
      // starts with meaningful cutoffs.
      if (!sc.freeze_acv) {
        ScenarioSpec frozen = sc;
        frozen.freeze_acv = true;
        frozen.maximize = false;
        PoolCollector seeds;
        seeds.n_s = sc.pool;
        bool seed_complete = true;
        auto seed_deadline = std::chrono::steady_clock::now() +
                             std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                 std::chrono::duration<double>(opts.time_limit_s / 4));
        enumerate_sequences(cs, frozen, prog, seeds, opts, seed_complete, seed_deadline);
        for (const auto& sp : seeds.plans) {
          // The frozen plan itself is a valid candidate (ACVs parked at their
          // initial values); dives below only add adjusted variants.
          pool.insert(sp);
          std::map<int, int> fix;
          TopologyVector zstep = sc.z0;
          for (int i = 0; i < prog.t_upper; ++i) {
            if (i < sp.T()) zstep = sp.episodes[i].z;
            for (int e = 0; e < cs.n_branch(); ++e)
              if (prog.eps[i].z[e].is_var()) fix[prog.eps[i].z[e].var] = zstep.z(e);
          }
          // Try the pure pattern and one with adjustments framing the
          // sequence, budget permitting.
          std::vector<std::vector<int>> zpats;
          zpats.push_back(std::vector<int>(prog.t_upper, 0));
          const int d = netcase::topology_distance(sc.z0, sc.zT);
          if (sc.budget.t_ad * 2 + sc.budget.t_ls * (sp.T() - d) <= sc.budget.t_max + 1e-9 &&
              sp.T() >= 1) {
            std::vector<int> pat(prog.t_upper, 0);
            pat[0] = 1;
            pat[std::min(prog.t_upper - 1, sp.T() - 1)] = 1;
            zpats.push_back(pat);
            if (sp.T() < prog.t_upper) {
              std::vector<int> pat2(prog.t_upper, 0);
              pat2[0] = 1;
              pat2[sp.T()] = 1;  // trailing adjustment-only episode
              zpats.push_back(pat2);
            }
          }
          for (const auto& pat : zpats) {
            std::map<int, int> f2 = fix;
            for (int i = 0; i < prog.t_upper; ++i) f2[prog.eps[i].zeta] = pat[i];
            auto plan = group_dive(cs, sc, prog, f2, nodes_used);
            if (plan) pool.insert(std::move(*plan));
          }
        }
      }
      bnb_core(cs, sc, prog, {}, pool, opts, complete, deadline, nodes_used);
      break;
    }
    case SolveMode::Export: {
      std::ofstream f(opts.export_path);
      if (!f) throw std::runtime_error("cannot write " + opts.export_path);
      f << prog.sys.export_lp();
      if (!opts.import_solution.empty()) {
        std::ifstream in(opts.import_solution);
        if (!in) throw std::runtime_error("cannot read " + opts.import_solution);
        Vec x = Vec::Zero(prog.sys.n_vars());
        std::string name;
        double val;
        while (in >> name >> val)
          if (prog.sys.has_var(name)) x(prog.sys.var(name)) = val;
        auto plan = post_treat(prog.extract_plan(cs, sc, x));
        pool.insert(std::move(plan));
      }
      break;
    }
  }

  // Honor the declared pool gap relative to the incumbent.
  out.plans = pool.plans;
  if (!sc.maximize && !out.plans.empty()) {
    const double best = out.plans.front().objective;
    std::vector<TransitionPlan> kept;
    for (auto& p : out.plans)
      if (p.objective <= best + sc.gap * std::max(1e-9, std::abs(best)) + 1e-12 ||
          &p == &out.plans.front())
        kept.push_back(p);
    out.plans = kept;
  }
  out.complete = complete;
  if (out.plans.empty() && complete)
    throw SolveError("first-stage program has no feasible transition plan");
  return out;
}
}  // namespace btt::stage1
