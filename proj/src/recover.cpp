#include "btt/recover.hpp"

#include <algorithm>
#include <cmath>

#include "btt/linpf.hpp"

namespace btt::recover {

using linpf::ConstraintSystem;
using linpf::LinTerm;
using netcase::GenKind;
using netcase::TopologyVector;
using stage1::TransitionPlan;

std::vector<int> EpisodePartition::t_aa() const {
  std::vector<int> v = t_as;
  v.insert(v.end(), t_a.begin(), t_a.end());
  std::sort(v.begin(), v.end());
  return v;
}
std::vector<int> EpisodePartition::t_ss() const {
  std::vector<int> v = t_as;
  v.insert(v.end(), t_s.begin(), t_s.end());
  std::sort(v.begin(), v.end());
  return v;
}

std::pair<TransitionPlan, EpisodePartition> pre_treat(const TransitionPlan& plan) {
  TransitionPlan out = plan;
  EpisodePartition part;
  for (int i = 0; i < out.T(); ++i) {
    auto& ep = out.episodes[i];
    if (i == 0 && ep.flags.sw && !ep.flags.adjust) {
      // A switch-only opening episode gains a potential adjustment slot.
      ep.flags.adjust = true;
      part.first_slot_added = true;
      part.t_as.push_back(i);
    } else if (ep.flags.sw && ep.flags.adjust) {
      part.t_as.push_back(i);
    } else if (ep.flags.adjust) {
      part.t_a.push_back(i);
    } else if (ep.flags.sw) {
      part.t_s.push_back(i);
    }
  }
  return {out, part};
}

namespace {

struct PointBlock {
  enum class Kind { Minus, Plus, Star };
  Kind kind = Kind::Minus;
  int episode = 0;
  int offset = 0;       // acpf unknown stack position inside the global vector
  int flow_offset = 0;  // stacked [p_fb; q_fb; p_tb; q_tb] position
  TopologyVector z;
  int pre_episode = -1;  // source of the frozen pre-switch state (Plus only)
  Kind pre_kind = Kind::Minus;
};

struct Stack {
  acpf::VarMap vm;
  int n_as = 0;
  int T = 0;
  int n_branch = 0;
  std::vector<PointBlock> points;
  int total = 0;
  int a_offset(int episode) const { return episode * n_as; }
};

int find_point(const std::vector<PointBlock>& pts, int episode, PointBlock::Kind k) {
  for (size_t i = 0; i < pts.size(); ++i)
    if (pts[i].episode == episode && pts[i].kind == k) return static_cast<int>(i);
  return -1;
}

}  // namespace

RecoveryResult solve_recovery(const NetworkCase& cs, const ScenarioSpec& sc,
                              const TransitionPlan& plan_in,
                              const RecoveryOptions& opts) {
  auto pre = pre_treat(plan_in);
  TransitionPlan& plan = pre.first;
  const EpisodePartition& part = pre.second;
  const auto lay = netcase::acv_layout(cs);
  const int T = plan.T();
  const int ne = cs.n_branch();
  const auto aa = part.t_aa();
  const auto ss = part.t_ss();
  auto in = [](const std::vector<int>& v, int i) {
    return std::count(v.begin(), v.end(), i) > 0;
  };

  Stack st;
  st.vm = acpf::var_map(cs);
  st.n_as = lay.n_s();
  st.T = T;
  st.n_branch = ne;
  int cursor = T * st.n_as;
  std::vector<TopologyVector> z_before(T);
  {
    TopologyVector zprev = sc.z0;
    for (int i = 0; i < T; ++i) {
      z_before[i] = zprev;
      zprev = plan.episodes[i].z;
    }
  }
  for (int i = 0; i < T; ++i) {
    if (in(aa, i)) {
      PointBlock pb;
      pb.kind = PointBlock::Kind::Minus;
      pb.episode = i;
      pb.offset = cursor;
      cursor += st.vm.n;
      pb.flow_offset = cursor;
      cursor += 4 * ne;
      pb.z = z_before[i];
      st.points.push_back(pb);
    }
    if (in(ss, i)) {
      PointBlock plus;
      plus.kind = PointBlock::Kind::Plus;
      plus.episode = i;
      plus.offset = cursor;
      cursor += st.vm.n;
      plus.flow_offset = cursor;
      cursor += 4 * ne;
      plus.z = plan.episodes[i].z;
      if (in(aa, i)) {
        plus.pre_episode = i;
        plus.pre_kind = PointBlock::Kind::Minus;
      } else {
        plus.pre_episode = i - 1;
        plus.pre_kind = in(ss, i - 1) ? PointBlock::Kind::Star : PointBlock::Kind::Minus;
      }
      if (plus.pre_episode < 0)
        throw std::logic_error("recovery: switch-only first episode after pre-treatment");
      st.points.push_back(plus);
      PointBlock star;
      star.kind = PointBlock::Kind::Star;
      star.episode = i;
      star.offset = cursor;
      cursor += st.vm.n;
      star.flow_offset = cursor;
      cursor += 4 * ne;
      star.z = plan.episodes[i].z;
      st.points.push_back(star);
    }
  }
  st.total = cursor;

  auto btcsc_of = [&](const Vec& xv, int episode) {
    Vec b(lay.tcsc_count);
    for (int k = 0; k < lay.tcsc_count; ++k)
      b(k) = xv(st.a_offset(episode) + lay.tcsc_offset + k);
    return b;
  };

  // Initial iterate: exact chain through the stage-1 ACV values.
  Vec x = Vec::Zero(st.total);
  for (int i = 0; i < T; ++i)
    x.segment(st.a_offset(i), st.n_as) = plan.episodes[i].a_s;
  {
    std::vector<acpf::SteadyStateSolution> cache(st.points.size());
    for (size_t p = 0; p < st.points.size(); ++p) {
      const auto& pb = st.points[p];
      const Vec a_i = x.segment(st.a_offset(pb.episode), st.n_as);
      acpf::SteadyStateSolution sol;
      if (pb.kind == PointBlock::Kind::Minus) {
        const acpf::SteadyStateSolution* warm = nullptr;
        for (int q = static_cast<int>(p) - 1; q >= 0; --q)
          if (st.points[q].kind != PointBlock::Kind::Plus) {
            warm = &cache[q];
            break;
          }
        sol = acpf::solve_steady_state(cs, pb.z, a_i, acpf::SsMode::PostAdjustment, {},
                                       warm);
      } else if (pb.kind == PointBlock::Kind::Plus) {
        const int prei = find_point(st.points, pb.pre_episode, pb.pre_kind);
        sol = acpf::jumping_state(cs, pb.z, a_i, cache[prei].frozen(cs), {}, &cache[prei]);
      } else {
        const int plusi = find_point(st.points, pb.episode, PointBlock::Kind::Plus);
        sol = acpf::solve_steady_state(cs, pb.z, a_i, acpf::SsMode::PostSwitching, {},
                                       plusi >= 0 ? &cache[plusi] : nullptr);
      }
      cache[p] = sol;
      x.segment(pb.offset, st.vm.n) = acpf::pack(cs, st.vm, sol);
      auto fl = acpf::detail::flow_rows(cs, pb.z, btcsc_of(x, pb.episode),
                                        x.segment(pb.offset, st.vm.n), st.vm);
      x.segment(pb.flow_offset, 4 * ne) = fl.val;
    }
  }

  auto residual = [&](const Vec& xv) {
    std::vector<double> r;
    for (const auto& pb : st.points) {
      const Vec b = btcsc_of(xv, pb.episode);
      const Vec xpt = xv.segment(pb.offset, st.vm.n);
      auto core = acpf::detail::core_rows(cs, pb.z, b, xpt, st.vm, 1.0, false);
      std::vector<char> drop(core.r.size(), 0);
      if (pb.kind == PointBlock::Kind::Plus)
        for (int ridx : core.steady_only) drop[ridx] = 1;
      for (int k = 0; k < core.r.size(); ++k)
        if (!drop[k]) r.push_back(core.r(k));
      auto fl = acpf::detail::flow_rows(cs, pb.z, b, xpt, st.vm);
      Vec fres = xv.segment(pb.flow_offset, 4 * ne) - fl.val;
      for (int k = 0; k < fres.size(); ++k) r.push_back(fres(k));
    }
    return Eigen::Map<Vec>(r.data(), static_cast<int>(r.size())).eval();
  };

  // Total violation of the convex constraint set at a stack point; folded
  // into the merit so infeasible proposals get repaired rather than kept.
  auto violation = [&](const Vec& xv) {
    double viol = 0;
    auto pos = [&](double v) { viol += std::max(0.0, v); };
    for (int i = 0; i < T; ++i)
      for (int k = 0; k < st.n_as; ++k) {
        const double a = xv(st.a_offset(i) + k);
        pos(lay.s_entries[k].lo - a);
        pos(a - lay.s_entries[k].hi);
      }
    for (const auto& pb : st.points) {
      const Vec xpt = xv.segment(pb.offset, st.vm.n);
      if (pb.kind == PointBlock::Kind::Plus) {
        const int prei = find_point(st.points, pb.pre_episode, pb.pre_kind);
        const auto& pre2 = st.points[prei];
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          if (cs.generators[g].kind != GenKind::Sg) continue;
          const double cap = cs.limits.eps_rsi_sg * cs.generators[g].p_rated;
          pos(std::abs(xv(pb.offset + st.vm.pg(g)) - xv(pre2.offset + st.vm.pg(g))) - cap);
        }
        for (size_t l = 0; l < cs.loads.size(); ++l) {
          if (!cs.loads[l].has_im()) continue;
          const double cap = cs.limits.eps_rsi_im * cs.loads[l].p_rated;
          pos(cs.loads[l].p0 *
                  std::abs(xv(pre2.offset + st.vm.epsp(l)) - xv(pb.offset + st.vm.epsp(l))) -
              cap);
        }
        continue;
      }
      for (int bidx = 0; bidx < cs.n_bus(); ++bidx) {
        const double v = xpt(st.vm.v(bidx));
        pos(cs.limits.v_min - v);
        pos(v - cs.limits.v_max);
      }
      for (size_t g = 0; g < cs.generators.size(); ++g) {
        const auto& gen = cs.generators[g];
        if (gen.kind == GenKind::Sg) {
          pos(xpt(st.vm.qg(g)) - gen.q_max);
          pos(gen.q_min - xpt(st.vm.qg(g)));
        } else {
          pos(std::hypot(xpt(st.vm.pg(g)), xpt(st.vm.qg(g))) - gen.s_max);
          if (gen.pf_min > 0)
            pos(xpt(st.vm.qg(g)) - std::tan(std::acos(gen.pf_min)) * xpt(st.vm.pg(g)));
        }
      }
      for (size_t d2 = 0; d2 < cs.dvcs.size(); ++d2) {
        pos(xpt(st.vm.qc(d2)) - cs.dvcs[d2].q_max);
        pos(cs.dvcs[d2].q_min - xpt(st.vm.qc(d2)));
        if (st.vm.bsvc(d2) >= 0) {
          pos(xpt(st.vm.bsvc(d2)) - cs.dvcs[d2].b_max);
          pos(cs.dvcs[d2].b_min - xpt(st.vm.bsvc(d2)));
        }
      }
      for (int e = 0; e < ne; ++e) {
        if (pb.z.z(e) == 0) continue;
        const auto& br = cs.branches[e];
        pos(std::hypot(xv(pb.flow_offset + e), xv(pb.flow_offset + ne + e)) - br.s_max);
        pos(std::hypot(xv(pb.flow_offset + 2 * ne + e), xv(pb.flow_offset + 3 * ne + e)) -
            br.s_max);
        const double dth = xpt(st.vm.th(cs.bus_index(br.from))) -
                           xpt(st.vm.th(cs.bus_index(br.to)));
        pos(std::abs(dth) - br.theta_max);
      }
    }
    for (int i : aa) {
      Vec dvec = xv.segment(st.a_offset(i), st.n_as) -
                 (i == 0 ? sc.a0_s : xv.segment(st.a_offset(i - 1), st.n_as));
      pos(std::sqrt((sc.weights.w_as.array() * dvec.array().square()).sum()) -
          sc.sigma_as);
    }
    return viol;
  };

  auto true_objective = [&](const Vec& xv) {
    double obj = 0;
    for (int i : aa) {
      const double w = (i == 0 && part.first_slot_added) ? opts.w_ac_heavy : 1.0;
      obj += w * (xv.segment(st.a_offset(i), st.n_as) - plan_in.episodes[i].a_s).norm();
    }
    obj += opts.w_ac_terminal *
           (xv.segment(st.a_offset(T - 1), st.n_as) - sc.a0_s).norm();
    return obj;
  };

  const double big = 50.0;
  const double nu = 1e4;
  double radius = opts.trust_radius;
  // A feasible start with zero distance is already optimal.
  if (residual(x).lpNorm<Eigen::Infinity>() < opts.kkt_tol && violation(x) < opts.kkt_tol &&
      true_objective(x) < 1e-10) {
    RecoveryResult res0;
    res0.iterations = 0;
    res0.plan = plan;
    res0.plan.provenance = stage1::Provenance::Recovered;
    res0.minus.resize(T);
    res0.plus.resize(T);
    res0.star.resize(T);
    res0.has_minus.assign(T, false);
    res0.has_switch.assign(T, false);
    for (const auto& pb : st.points) {
      auto sol = acpf::unpack(cs, st.vm, pb.z, btcsc_of(x, pb.episode),
                              x.segment(pb.offset, st.vm.n), 1.0);
      if (pb.kind == PointBlock::Kind::Minus) {
        res0.minus[pb.episode] = sol;
        res0.has_minus[pb.episode] = true;
      } else if (pb.kind == PointBlock::Kind::Plus) {
        res0.plus[pb.episode] = sol;
        res0.has_switch[pb.episode] = true;
      } else {
        res0.star[pb.episode] = sol;
      }
    }
    res0.objective = 0.0;
    return res0;
  }
  auto merit_of = [&](const Vec& xv) {
    return true_objective(xv) + nu * (residual(xv).lpNorm<1>() + violation(xv));
  };
  double merit = merit_of(x);
  double last_step = 1e9;
  int stall = 0;
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    const Vec r0 = residual(x);
    if (r0.lpNorm<Eigen::Infinity>() < opts.kkt_tol && violation(x) < opts.kkt_tol &&
        last_step < 1e-7)
      break;

    // --- Build the convex subproblem in the step d.
    ConstraintSystem sub;
    std::vector<int> dv(st.total, -1);
    for (int i = 0; i < T; ++i)
      for (int k = 0; k < st.n_as; ++k) {
        const int v = st.a_offset(i) + k;
        dv[v] = sub.add_var(strf("d%d", v), lay.s_entries[k].lo - x(v),
                            lay.s_entries[k].hi - x(v));
      }
    for (const auto& pb : st.points) {
      const bool is_ss_point = pb.kind != PointBlock::Kind::Plus;
      for (int k = 0; k < st.vm.n; ++k) {
        const int v = pb.offset + k;
        double lo = -big, hi = big;
        if (is_ss_point) {
          // Voltage band applies to steady-state points.
          for (int bidx = 0; bidx < cs.n_bus(); ++bidx)
            if (st.vm.v(bidx) == k) {
              lo = cs.limits.v_min - x(v);
              hi = cs.limits.v_max - x(v);
            }
        }
        for (size_t d2 = 0; d2 < cs.dvcs.size(); ++d2) {
          if (st.vm.bsvc(d2) == k) {
            lo = cs.dvcs[d2].b_min - x(v);
            hi = cs.dvcs[d2].b_max - x(v);
          }
          if (st.vm.qc(d2) == k && is_ss_point) {
            lo = cs.dvcs[d2].q_min - x(v);
            hi = cs.dvcs[d2].q_max - x(v);
          }
        }
        dv[v] = sub.add_var(strf("d%d", v), lo, hi);
      }
      for (int k = 0; k < 4 * ne; ++k)
        dv[pb.flow_offset + k] = sub.add_var(strf("d%d", pb.flow_offset + k), -big, big);
    }

    auto dterm = [&](int v) { return LinTerm::var(dv[v]); };

    // Linearized nonlinear rows with per-point elastic slacks.
    std::vector<int> slacks;
    for (size_t p = 0; p < st.points.size(); ++p) {
      const auto& pb = st.points[p];
      const Vec b = btcsc_of(x, pb.episode);
      const Vec xpt = x.segment(pb.offset, st.vm.n);
      auto core = acpf::detail::core_rows(cs, pb.z, b, xpt, st.vm, 1.0, true);
      auto fl = acpf::detail::flow_rows(cs, pb.z, b, xpt, st.vm);
      int sel = sub.add_var(strf("sel%zu", p), 0.0, big);
      slacks.push_back(sel);
      std::vector<char> drop(core.r.size(), 0);
      if (pb.kind == PointBlock::Kind::Plus)
        for (int ridx : core.steady_only) drop[ridx] = 1;
      auto add_lin = [&](double rval, const Vec& Jx, const Vec& Jb, int row_id) {
        LinTerm t(rval);
        for (int k = 0; k < st.vm.n; ++k)
          if (Jx(k) != 0.0) t.add(dv[pb.offset + k], Jx(k));
        for (int k = 0; k < lay.tcsc_count; ++k)
          if (Jb(k) != 0.0)
            t.add(dv[st.a_offset(pb.episode) + lay.tcsc_offset + k], Jb(k));
        LinTerm up = t;
        up.add(sel, -1.0);
        sub.add_le(up, strf("p%zu.r%d.hi", p, row_id));
        LinTerm dn = -1.0 * t;
        dn.add(sel, -1.0);
        sub.add_le(dn, strf("p%zu.r%d.lo", p, row_id));
      };
      for (int k = 0; k < core.r.size(); ++k) {
        if (drop[k]) continue;
        add_lin(core.r(k), core.J.row(k), core.J_btcsc.row(k), k);
      }
      for (int k = 0; k < 4 * ne; ++k) {
        // flow_var - flow(x) rows.
        Vec Jx = -fl.J.row(k);
        Vec Jb = -fl.J_btcsc.row(k);
        LinTerm t(x(pb.flow_offset + k) - fl.val(k));
        t.add(dv[pb.flow_offset + k], 1.0);
        for (int q = 0; q < st.vm.n; ++q)
          if (Jx(q) != 0.0) t.add(dv[pb.offset + q], Jx(q));
        for (int q = 0; q < lay.tcsc_count; ++q)
          if (Jb(q) != 0.0) t.add(dv[st.a_offset(pb.episode) + lay.tcsc_offset + q], Jb(q));
        LinTerm up = t;
        up.add(sel, -1.0);
        sub.add_le(up, strf("p%zu.f%d.hi", p, k));
        LinTerm dn = -1.0 * t;
        dn.add(sel, -1.0);
        sub.add_le(dn, strf("p%zu.f%d.lo", p, k));
      }
    }

    // Exact linear rows at x + d.
    auto val_row = [&](int v, double target, const std::string& nm) {
      LinTerm t = dterm(v);
      t.constant = x(v) - target;
      sub.add_eq(t, nm);
    };
    auto link_row = [&](int v1, int v2, const std::string& nm) {
      LinTerm t = dterm(v1) - dterm(v2);
      t.constant = x(v1) - x(v2);
      sub.add_eq(t, nm);
    };
    for (const auto& pb : st.points) {
      const std::string pt = strf("e%d%c", pb.episode + 1,
                                  pb.kind == PointBlock::Kind::Minus
                                      ? '-'
                                      : (pb.kind == PointBlock::Kind::Plus ? '+' : '*'));
      if (pb.kind != PointBlock::Kind::Plus) {
        // Maintain rows: setpoints, held dispatch, load weights, reference.
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          const int vb = pb.offset + st.vm.v(cs.bus_index(cs.generators[g].bus));
          link_row(vb, st.a_offset(pb.episode) + lay.vg_offset + static_cast<int>(g),
                   pt + ".vg");
          if (cs.generators[g].slack) {
            val_row(pb.offset + st.vm.de(g), 0.0, pt + ".ref");
          } else if (cs.generators[g].has_ess) {
            int k = 0;
            for (; k < lay.pess_count; ++k)
              if (lay.ess_gen_indices[k] == static_cast<int>(g)) break;
            link_row(pb.offset + st.vm.pg(g),
                     st.a_offset(pb.episode) + lay.pess_offset + k, pt + ".pess");
          } else {
            val_row(pb.offset + st.vm.pg(g), cs.generators[g].p_set, pt + ".pgo");
          }
        }
        for (size_t l = 0; l < cs.loads.size(); ++l) {
          val_row(pb.offset + st.vm.epsp(l), cs.loads[l].eps_p, pt + ".epsp");
          val_row(pb.offset + st.vm.epsq(l), cs.loads[l].eps_q, pt + ".epsq");
        }
        for (size_t dvc = 0; dvc < cs.dvcs.size(); ++dvc) {
          const int vb = pb.offset + st.vm.v(cs.bus_index(cs.dvcs[dvc].bus));
          link_row(vb, st.a_offset(pb.episode) + lay.vdvc_offset + static_cast<int>(dvc),
                   pt + ".vdvc");
        }
      } else {
        // Frozen jump state: the x_c stack equals the pre-switch point's.
        const int prei = find_point(st.points, pb.pre_episode, pb.pre_kind);
        const auto& pre2 = st.points[prei];
        auto frz = [&](int slot, const char* nm) {
          if (slot < 0) return;
          link_row(pb.offset + slot, pre2.offset + slot, pt + ".frz." + nm);
        };
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          frz(st.vm.e(g), "e");
          frz(st.vm.de(g), "de");
          frz(st.vm.es(g), "es");
          frz(st.vm.des(g), "des");
          frz(st.vm.vm(g), "vm");
          frz(st.vm.thm(g), "thm");
        }
        for (size_t l = 0; l < cs.loads.size(); ++l) {
          if (cs.loads[l].has_im()) {
            frz(st.vm.em(l), "em");
            frz(st.vm.dem(l), "dem");
          } else {
            val_row(pb.offset + st.vm.epsp(l), cs.loads[l].eps_p, pt + ".epsp0");
            val_row(pb.offset + st.vm.epsq(l), cs.loads[l].eps_q, pt + ".epsq0");
          }
        }
        for (size_t dvc = 0; dvc < cs.dvcs.size(); ++dvc) {
          frz(st.vm.bsvc(dvc), "bsvc");
          frz(st.vm.vs(dvc), "vs");
          frz(st.vm.ths(dvc), "ths");
        }
        // RSI at the switching instant.
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          if (cs.generators[g].kind != GenKind::Sg) continue;
          const double cap = cs.limits.eps_rsi_sg * cs.generators[g].p_rated;
          LinTerm dp = dterm(pb.offset + st.vm.pg(g)) - dterm(pre2.offset + st.vm.pg(g));
          dp.constant = x(pb.offset + st.vm.pg(g)) - x(pre2.offset + st.vm.pg(g));
          LinTerm hi = dp;
          hi.constant -= cap;
          sub.add_le(hi, pt + ".rsi_hi");
          LinTerm lo = -1.0 * dp;
          lo.constant -= cap;
          sub.add_le(lo, pt + ".rsi_lo");
        }
        for (size_t l = 0; l < cs.loads.size(); ++l) {
          if (!cs.loads[l].has_im()) continue;
          const double cap = cs.limits.eps_rsi_im * cs.loads[l].p_rated;
          LinTerm de = dterm(pre2.offset + st.vm.epsp(l)) - dterm(pb.offset + st.vm.epsp(l));
          de.constant = x(pre2.offset + st.vm.epsp(l)) - x(pb.offset + st.vm.epsp(l));
          LinTerm hi = cs.loads[l].p0 * de;
          hi.constant -= cap;
          sub.add_le(hi, pt + ".rsi_im_hi");
          LinTerm lo = -cs.loads[l].p0 * de;
          lo.constant -= cap;
          sub.add_le(lo, pt + ".rsi_im_lo");
        }
      }
      // Operational rows for steady points.
      if (pb.kind != PointBlock::Kind::Plus) {
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          const auto& gen = cs.generators[g];
          if (gen.kind == GenKind::Sg) {
            LinTerm q = dterm(pb.offset + st.vm.qg(g));
            q.constant = x(pb.offset + st.vm.qg(g));
            LinTerm hi = q;
            hi.constant -= gen.q_max;
            sub.add_le(hi, pt + ".qhi");
            LinTerm lo = -1.0 * q;
            lo.constant += gen.q_min;
            sub.add_le(lo, pt + ".qlo");
          } else {
            LinTerm pgt = dterm(pb.offset + st.vm.pg(g));
            pgt.constant = x(pb.offset + st.vm.pg(g));
            LinTerm qgt = dterm(pb.offset + st.vm.qg(g));
            qgt.constant = x(pb.offset + st.vm.qg(g));
            sub.add_soc(LinTerm(gen.s_max), {pgt, qgt}, pt + ".sgc");
            if (gen.pf_min > 0) {
              const double tn = std::tan(std::acos(gen.pf_min));
              sub.add_le(qgt - tn * pgt, pt + ".pf");
            }
          }
        }
        for (int e = 0; e < ne; ++e) {
          if (pb.z.z(e) == 0) continue;
          const auto& br = cs.branches[e];
          LinTerm pf = dterm(pb.flow_offset + e);
          pf.constant = x(pb.flow_offset + e);
          LinTerm qf = dterm(pb.flow_offset + ne + e);
          qf.constant = x(pb.flow_offset + ne + e);
          LinTerm ptb = dterm(pb.flow_offset + 2 * ne + e);
          ptb.constant = x(pb.flow_offset + 2 * ne + e);
          LinTerm qtb = dterm(pb.flow_offset + 3 * ne + e);
          qtb.constant = x(pb.flow_offset + 3 * ne + e);
          sub.add_soc(LinTerm(br.s_max), {pf, qf}, pt + "." + br.id + ".sfb");
          sub.add_soc(LinTerm(br.s_max), {ptb, qtb}, pt + "." + br.id + ".stb");
          const int bi = pb.offset + st.vm.th(cs.bus_index(br.from));
          const int bj = pb.offset + st.vm.th(cs.bus_index(br.to));
          LinTerm dth = dterm(bi) - dterm(bj);
          dth.constant = x(bi) - x(bj);
          LinTerm hi = dth;
          hi.constant -= br.theta_max;
          sub.add_le(hi, pt + "." + br.id + ".anghi");
          LinTerm lo = -1.0 * dth;
          lo.constant -= br.theta_max;
          sub.add_le(lo, pt + "." + br.id + ".anglo");
        }
      }
    }
    // ACV carry-over for switch-only episodes and per-episode caps.
    for (int i : part.t_s)
      for (int k = 0; k < st.n_as; ++k)
        link_row(st.a_offset(i) + k, st.a_offset(i - 1) + k, strf("carry%d.%d", i, k));
    for (int i : aa) {
      std::vector<LinTerm> diffs;
      for (int k = 0; k < st.n_as; ++k) {
        LinTerm t = dterm(st.a_offset(i) + k);
        t.constant = x(st.a_offset(i) + k);
        if (i == 0) {
          t.constant -= sc.a0_s(k);
        } else {
          t.add(dv[st.a_offset(i - 1) + k], -1.0);
          t.constant -= x(st.a_offset(i - 1) + k);
        }
        if (sc.weights.w_as(k) != 0.0)
          diffs.push_back(std::sqrt(sc.weights.w_as(k)) * t);
      }
      sub.add_soc(LinTerm(sc.sigma_as), diffs, strf("cap%d", i));
    }

    // Objective: weighted distances plus elastic penalty plus trust region.
    LinTerm obj;
    for (int i : aa) {
      const double w = (i == 0 && part.first_slot_added) ? opts.w_ac_heavy : 1.0;
      std::vector<LinTerm> diffs;
      for (int k = 0; k < st.n_as; ++k) {
        LinTerm t = dterm(st.a_offset(i) + k);
        t.constant = x(st.a_offset(i) + k) - plan_in.episodes[i].a_s(k);
        diffs.push_back(t);
      }
      int tv = sub.add_var(strf("t%d", i), 0.0, big);
      sub.add_soc(LinTerm::var(tv), diffs, strf("obj%d", i));
      obj.add(tv, w);
    }
    {
      std::vector<LinTerm> diffs;
      for (int k = 0; k < st.n_as; ++k) {
        LinTerm t = dterm(st.a_offset(T - 1) + k);
        t.constant = x(st.a_offset(T - 1) + k) - sc.a0_s(k);
        diffs.push_back(t);
      }
      int tv = sub.add_var("tterm", 0.0, big);
      sub.add_soc(LinTerm::var(tv), diffs, "objterm");
      obj.add(tv, opts.w_ac_terminal);
    }
    for (int sel : slacks) obj.add(sel, nu);
    {
      std::vector<LinTerm> all;
      for (int v = 0; v < st.total; ++v) all.push_back(dterm(v));
      int tr = sub.add_var("tr", 0.0, radius);
      sub.add_soc(LinTerm::var(tr), all, "trust");
    }
    sub.obj_add(obj);

    auto sol = socp::solve(sub.compile());
    if (sol.status != socp::Status::Optimal) {
      radius *= 0.4;
      if (radius < 1e-9) break;
      continue;
    }
    Vec d = Vec::Zero(st.total);
    for (int v = 0; v < st.total; ++v) d(v) = sol.x(dv[v]);
    const Vec xn = x + d;
    const double merit_new = merit_of(xn);
    if (merit_new < merit - 1e-12) {
      x = xn;
      last_step = d.lpNorm<Eigen::Infinity>();
      const double drop = merit - merit_new;
      merit = merit_new;
      if (drop > 0.1 * radius) radius = std::min(radius * 1.6, 2.0);
      // Feasible and barely improving: accept convergence.
      if (drop < 1e-9 && residual(x).lpNorm<Eigen::Infinity>() < opts.kkt_tol &&
          violation(x) < opts.kkt_tol && ++stall >= 2)
        break;
      if (drop >= 1e-9) stall = 0;
    } else {
      if (residual(x).lpNorm<Eigen::Infinity>() < opts.kkt_tol &&
          violation(x) < opts.kkt_tol)
        break;  // feasible; the subproblem found no profitable move
      radius *= 0.4;
      last_step = 1e9;
      if (radius < 1e-9) break;
    }
  }

  if (residual(x).lpNorm<Eigen::Infinity>() > 1e-6 || violation(x) > 1e-6)
    throw SolveError("AC-feasibility recovery did not converge");

  RecoveryResult res;
  res.iterations = it;
  res.plan = plan;
  res.plan.provenance = stage1::Provenance::Recovered;
  for (int i = 0; i < T; ++i)
    res.plan.episodes[i].a_s = x.segment(st.a_offset(i), st.n_as);
  res.minus.resize(T);
  res.plus.resize(T);
  res.star.resize(T);
  res.has_minus.assign(T, false);
  res.has_switch.assign(T, false);
  for (const auto& pb : st.points) {
    auto sol = acpf::unpack(cs, st.vm, pb.z, btcsc_of(x, pb.episode),
                            x.segment(pb.offset, st.vm.n), 1.0);
    if (pb.kind == PointBlock::Kind::Minus) {
      res.minus[pb.episode] = sol;
      res.has_minus[pb.episode] = true;
    } else if (pb.kind == PointBlock::Kind::Plus) {
      res.plus[pb.episode] = sol;
      res.has_switch[pb.episode] = true;
    } else {
      res.star[pb.episode] = sol;
    }
  }
  res.objective = true_objective(x);
  return res;
}

TransitionPlan post_treat(const NetworkCase& cs, const ScenarioSpec& sc,
                          RecoveryResult& result, double tol) {
  TransitionPlan plan = result.plan;
  if (plan.T() == 0) return plan;
  const Vec& last = plan.episodes.back().a_s;
  if ((last - sc.a0_s).norm() > tol) {
    stage1::Episode pull;
    pull.z = plan.episodes.back().z;
    pull.a_s = sc.a0_s;
    pull.a_t = plan.episodes.back().a_t;
    pull.flags.adjust = true;
    pull.flags.sw = false;
    pull.switched_branch = -1;
    const TopologyVector z_end = pull.z;
    plan.episodes.push_back(std::move(pull));
    result.plus.push_back({});
    result.star.push_back({});
    result.has_minus.push_back(true);
    result.has_switch.push_back(false);
    // The appended post-adjustment point is the terminal steady state.
    result.minus.push_back(
        acpf::solve_steady_state(cs, z_end, sc.a0_s, acpf::SsMode::PostAdjustment));
  }
  (void)cs;
  return plan;
}

}  // namespace btt::recover
