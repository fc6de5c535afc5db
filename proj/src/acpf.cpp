#include "btt/acpf.hpp"

#include <cmath>
#include <complex>

namespace btt::acpf {

using netcase::DvcKind;
using netcase::GenKind;

Injection device_injection(double v_m, double v_j, double th_m, double th_j,
                           double g, double b, double b_cc) {
  const double c = std::cos(th_m - th_j);
  const double s = std::sin(th_m - th_j);
  Injection f;
  f.p = v_m * v_j * (g * c + b * s) - g * v_j * v_j;
  f.q = v_m * v_j * (b * c + g * s) - b_cc * v_j * v_j;
  f.dp_dvm = v_j * (g * c + b * s);
  f.dp_dvj = v_m * (g * c + b * s) - 2.0 * g * v_j;
  f.dp_dthm = v_m * v_j * (-g * s + b * c);
  f.dp_dthj = -f.dp_dthm;
  f.dq_dvm = v_j * (b * c + g * s);
  f.dq_dvj = v_m * (b * c + g * s) - 2.0 * b_cc * v_j;
  f.dq_dthm = v_m * v_j * (-b * s + g * c);
  f.dq_dthj = -f.dq_dthm;
  return f;
}

BranchAdmittance branch_admittance(const netcase::Branch& br,
                                   std::optional<double> b_override) {
  BranchAdmittance a;
  if (!b_override) {
    a.g = br.g_b;
    a.b = br.b_b;
    return a;
  }
  const double b = *b_override;
  const double d0 = br.g_b * br.g_b + br.b_b * br.b_b;
  const double r = d0 > 0 ? br.g_b / d0 : 0.0;
  a.b = b;
  if (r == 0.0 || b == 0.0) {
    a.g = 0.0;
    a.dg_db = 0.0;
    return a;
  }
  const double disc = 1.0 - 4.0 * b * b * r * r;
  if (disc < 0.0)
    throw SolveError(strf("branch %s: TCSC susceptance %.3f incompatible with series resistance",
                          br.id.c_str(), b));
  const double u = std::sqrt(disc);
  const double x = -(1.0 + u) / (2.0 * b);
  const double den = r * r + x * x;
  a.g = r / den;
  const double dx_db = ((1.0 + u) + 4.0 * b * b * r * r / u) / (2.0 * b * b);
  a.dg_db = -r / (den * den) * 2.0 * x * dx_db;
  return a;
}

VarMap var_map(const NetworkCase& cs) {
  VarMap m;
  const int nn = cs.n_bus();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());
  auto neg = [](int n) { return IVec::Constant(n, -1); };
  m.v = neg(nn); m.th = neg(nn);
  m.e = neg(ng); m.de = neg(ng); m.es = neg(ng); m.des = neg(ng);
  m.vm = neg(ng); m.thm = neg(ng);
  m.em = neg(nl); m.dem = neg(nl); m.epsp = neg(nl); m.epsq = neg(nl);
  m.vs = neg(nd); m.ths = neg(nd);
  m.pg = neg(ng); m.qg = neg(ng);
  m.qc = neg(nd); m.bsvc = neg(nd);

  int k = 0;
  for (int i = 0; i < nn; ++i) m.v(i) = k++;
  for (int i = 0; i < nn; ++i) m.th(i) = k++;
  for (int g = 0; g < ng; ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      m.e(g) = k++; m.de(g) = k++; m.es(g) = k++; m.des(g) = k++;
    } else {
      m.vm(g) = k++; m.thm(g) = k++;
    }
  }
  for (int l = 0; l < nl; ++l)
    if (cs.loads[l].has_im()) { m.em(l) = k++; m.dem(l) = k++; }
  for (int l = 0; l < nl; ++l) { m.epsp(l) = k++; m.epsq(l) = k++; }
  for (int d = 0; d < nd; ++d)
    if (cs.dvcs[d].kind == DvcKind::Statcom) { m.vs(d) = k++; m.ths(d) = k++; }
  for (int g = 0; g < ng; ++g) { m.pg(g) = k++; m.qg(g) = k++; }
  for (int d = 0; d < nd; ++d) m.qc(d) = k++;
  for (int d = 0; d < nd; ++d)
    if (cs.dvcs[d].kind == DvcKind::Svc) m.bsvc(d) = k++;
  m.n = k;
  return m;
}

namespace detail {

namespace {

struct DeviceY {
  double g, b, b_cc;
};

DeviceY cig_y(const netcase::Generator& g) {
  const double d = g.r_c * g.r_c + g.x_cl * g.x_cl;
  return {g.r_c / d, g.x_cl / d, g.x_cl / d + 1.0 / g.x_cc};
}

DeviceY im_y(const netcase::ZipImLoad& l) {
  const double d = l.r_s * l.r_s + l.x_m * l.x_m;
  return {l.r_s / d, l.x_m / d, l.x_m / d};
}

}  // namespace

void flows_from_state(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                      const Vec& x, const VarMap& vm, Vec& p_fb, Vec& q_fb, Vec& p_tb,
                      Vec& q_tb) {
  const int ne = cs.n_branch();
  p_fb.setZero(ne); q_fb.setZero(ne); p_tb.setZero(ne); q_tb.setZero(ne);
  int tc = 0;
  for (int e = 0; e < ne; ++e) {
    std::optional<double> bo;
    if (cs.branches[e].tcsc) bo = b_tcsc(tc++);
    if (z.z(e) == 0) continue;
    const auto adm = branch_admittance(cs.branches[e], bo);
    const int i = cs.bus_index(cs.branches[e].from);
    const int j = cs.bus_index(cs.branches[e].to);
    const double vi = x(vm.v(i)), vj = x(vm.v(j));
    const double c = std::cos(x(vm.th(i)) - x(vm.th(j)));
    const double s = std::sin(x(vm.th(i)) - x(vm.th(j)));
    p_fb(e) = adm.g * vi * vi - (adm.g * c + adm.b * s) * vi * vj;
    p_tb(e) = adm.g * vj * vj - (adm.g * c - adm.b * s) * vi * vj;
    q_fb(e) = -adm.b * vi * vi - (-adm.b * c + adm.g * s) * vi * vj;
    q_tb(e) = -adm.b * vj * vj - (-adm.b * c - adm.g * s) * vi * vj;
  }
}

CoreRows core_rows(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                   const Vec& x, const VarMap& vm, double load_scale,
                   bool want_jacobian) {
  const int nn = cs.n_bus();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());

  int n_rows = 2 * nn;
  for (const auto& g : cs.generators) n_rows += g.kind == GenKind::Sg ? 4 : 2;
  for (const auto& l : cs.loads) n_rows += l.has_im() ? 2 : 0;
  for (const auto& d : cs.dvcs) n_rows += d.kind == DvcKind::Statcom ? 2 : 1;

  CoreRows out;
  out.r.setZero(n_rows);
  if (want_jacobian) {
    out.J.setZero(n_rows, vm.n);
    out.J_btcsc.setZero(n_rows, b_tcsc.size());
  }

  auto add = [&](int row, int col, double val) {
    if (want_jacobian && col >= 0) out.J(row, col) += val;
  };

  // Nodal balance rows: generation - demand - branch flows - shunts = 0.
  int tc = 0;
  for (int e = 0; e < cs.n_branch(); ++e) {
    std::optional<double> bo;
    int tcsc_col = -1;
    if (cs.branches[e].tcsc) {
      tcsc_col = tc;
      bo = b_tcsc(tc++);
    }
    const double ze = static_cast<double>(z.z(e));
    const int i = cs.bus_index(cs.branches[e].from);
    const int j = cs.bus_index(cs.branches[e].to);
    const int rp_i = i, rp_j = j, rq_i = nn + i, rq_j = nn + j;
    // Line-charging shunts act at both ends of a closed branch.
    const double vi = x(vm.v(i)), vj = x(vm.v(j));
    out.r(rp_i) -= ze * cs.branches[e].g_lc * vi * vi;
    out.r(rp_j) -= ze * cs.branches[e].g_lc * vj * vj;
    out.r(rq_i) += ze * cs.branches[e].b_lc * vi * vi;
    out.r(rq_j) += ze * cs.branches[e].b_lc * vj * vj;
    add(rp_i, vm.v(i), -2.0 * ze * cs.branches[e].g_lc * vi);
    add(rp_j, vm.v(j), -2.0 * ze * cs.branches[e].g_lc * vj);
    add(rq_i, vm.v(i), 2.0 * ze * cs.branches[e].b_lc * vi);
    add(rq_j, vm.v(j), 2.0 * ze * cs.branches[e].b_lc * vj);
    if (ze == 0.0) continue;

    const auto adm = branch_admittance(cs.branches[e], bo);
    const double g = adm.g, b = adm.b;
    const double c = std::cos(x(vm.th(i)) - x(vm.th(j)));
    const double s = std::sin(x(vm.th(i)) - x(vm.th(j)));
    const double pfb = g * vi * vi - (g * c + b * s) * vi * vj;
    const double ptb = g * vj * vj - (g * c - b * s) * vi * vj;
    const double qfb = -b * vi * vi - (-b * c + g * s) * vi * vj;
    const double qtb = -b * vj * vj - (-b * c - g * s) * vi * vj;
    out.r(rp_i) -= pfb;
    out.r(rp_j) -= ptb;
    out.r(rq_i) -= qfb;
    out.r(rq_j) -= qtb;
    if (want_jacobian) {
      const double dpfb_dvi = 2.0 * g * vi - (g * c + b * s) * vj;
      const double dpfb_dvj = -(g * c + b * s) * vi;
      const double dpfb_dthi = (g * s - b * c) * vi * vj;
      const double dptb_dvi = -(g * c - b * s) * vj;
      const double dptb_dvj = 2.0 * g * vj - (g * c - b * s) * vi;
      const double dptb_dthi = (g * s + b * c) * vi * vj;
      const double dqfb_dvi = -2.0 * b * vi - (-b * c + g * s) * vj;
      const double dqfb_dvj = -(-b * c + g * s) * vi;
      const double dqfb_dthi = -(b * s + g * c) * vi * vj;
      const double dqtb_dvi = -(-b * c - g * s) * vj;
      const double dqtb_dvj = -2.0 * b * vj - (-b * c - g * s) * vi;
      const double dqtb_dthi = (g * c - b * s) * vi * vj;
      add(rp_i, vm.v(i), -dpfb_dvi); add(rp_i, vm.v(j), -dpfb_dvj);
      add(rp_i, vm.th(i), -dpfb_dthi); add(rp_i, vm.th(j), dpfb_dthi);
      add(rp_j, vm.v(i), -dptb_dvi); add(rp_j, vm.v(j), -dptb_dvj);
      add(rp_j, vm.th(i), -dptb_dthi); add(rp_j, vm.th(j), dptb_dthi);
      add(rq_i, vm.v(i), -dqfb_dvi); add(rq_i, vm.v(j), -dqfb_dvj);
      add(rq_i, vm.th(i), -dqfb_dthi); add(rq_i, vm.th(j), dqfb_dthi);
      add(rq_j, vm.v(i), -dqtb_dvi); add(rq_j, vm.v(j), -dqtb_dvj);
      add(rq_j, vm.th(i), -dqtb_dthi); add(rq_j, vm.th(j), dqtb_dthi);
      if (tcsc_col >= 0) {
        // Flow sensitivity to the controlled susceptance, with the series
        // conductance following g(b).
        const double dpfb = -s * vi * vj + (vi * vi - c * vi * vj) * adm.dg_db;
        const double dptb = s * vi * vj + (vj * vj - c * vi * vj) * adm.dg_db;
        const double dqfb = (-vi * vi + c * vi * vj) + (-s * vi * vj) * adm.dg_db;
        const double dqtb = (-vj * vj + c * vi * vj) + (s * vi * vj) * adm.dg_db;
        out.J_btcsc(rp_i, tcsc_col) -= dpfb;
        out.J_btcsc(rp_j, tcsc_col) -= dptb;
        out.J_btcsc(rq_i, tcsc_col) -= dqfb;
        out.J_btcsc(rq_j, tcsc_col) -= dqtb;
      }
    }
  }

  // Bus shunts.
  for (int i = 0; i < nn; ++i) {
    const double vi = x(vm.v(i));
    out.r(i) -= cs.buses[i].g_s * vi * vi;
    out.r(nn + i) += cs.buses[i].b_s * vi * vi;
    add(i, vm.v(i), -2.0 * cs.buses[i].g_s * vi);
    add(nn + i, vm.v(i), 2.0 * cs.buses[i].b_s * vi);
  }

  // Generator injections into the bus balance.
  for (int gi = 0; gi < ng; ++gi) {
    const int j = cs.bus_index(cs.generators[gi].bus);
    out.r(j) += x(vm.pg(gi));
    out.r(nn + j) += x(vm.qg(gi));
    add(j, vm.pg(gi), 1.0);
    add(nn + j, vm.qg(gi), 1.0);
  }

  // ZIP-IM demand.
  for (int li = 0; li < nl; ++li) {
    const auto& l = cs.loads[li];
    const int j = cs.bus_index(l.bus);
    const double vj = x(vm.v(j));
    const double p0 = load_scale * l.p0, q0 = load_scale * l.q0;
    const double vr = vj / l.v0;
    const double pd = p0 * (l.alpha_p * vr * vr + l.beta_p * vr + l.gamma_p + x(vm.epsp(li)));
    const double qd = q0 * (l.alpha_q * vr * vr + l.beta_q * vr + l.gamma_q + x(vm.epsq(li)));
    out.r(j) -= pd;
    out.r(nn + j) -= qd;
    add(j, vm.v(j), -p0 * (2.0 * l.alpha_p * vr + l.beta_p) / l.v0);
    add(j, vm.epsp(li), -p0);
    add(nn + j, vm.v(j), -q0 * (2.0 * l.alpha_q * vr + l.beta_q) / l.v0);
    add(nn + j, vm.epsq(li), -q0);
  }

  // DVC reactive injections.
  for (int di = 0; di < nd; ++di) {
    const int j = cs.bus_index(cs.dvcs[di].bus);
    out.r(nn + j) += x(vm.qc(di));
    add(nn + j, vm.qc(di), 1.0);
  }

  // Device equations.
  int row = 2 * nn;
  auto put_pair = [&](int r0, const Injection& f, int iv_m, int iv_j, int ith_m,
                      int ith_j, int ipg, int iqg, double sign) {
    // sign*F - (pg, qg) = 0
    out.r(r0) = sign * f.p - (ipg >= 0 ? x(ipg) : 0.0);
    out.r(r0 + 1) = sign * f.q - (iqg >= 0 ? x(iqg) : 0.0);
    add(r0, iv_m, sign * f.dp_dvm); add(r0, iv_j, sign * f.dp_dvj);
    add(r0, ith_m, sign * f.dp_dthm); add(r0, ith_j, sign * f.dp_dthj);
    add(r0, ipg, -1.0);
    add(r0 + 1, iv_m, sign * f.dq_dvm); add(r0 + 1, iv_j, sign * f.dq_dvj);
    add(r0 + 1, ith_m, sign * f.dq_dthm); add(r0 + 1, ith_j, sign * f.dq_dthj);
    add(r0 + 1, iqg, -1.0);
  };

  for (int gi = 0; gi < ng; ++gi) {
    const auto& g = cs.generators[gi];
    const int j = cs.bus_index(g.bus);
    if (g.kind == GenKind::Sg) {
      const auto f1 = device_injection(x(vm.e(gi)), x(vm.v(j)), x(vm.de(gi)),
                                       x(vm.th(j)), 0.0, 1.0 / g.x_q, 1.0 / g.x_q);
      put_pair(row, f1, vm.e(gi), vm.v(j), vm.de(gi), vm.th(j), vm.pg(gi), vm.qg(gi), 1.0);
      out.steady_only.push_back(row);
      out.steady_only.push_back(row + 1);
      row += 2;
      const auto f2 = device_injection(x(vm.es(gi)), x(vm.v(j)), x(vm.des(gi)),
                                       x(vm.th(j)), 0.0, 1.0 / g.x_sub, 1.0 / g.x_sub);
      put_pair(row, f2, vm.es(gi), vm.v(j), vm.des(gi), vm.th(j), vm.pg(gi), vm.qg(gi), 1.0);
      row += 2;
    } else {
      const auto y = cig_y(g);
      const auto f = device_injection(x(vm.vm(gi)), x(vm.v(j)), x(vm.thm(gi)),
                                      x(vm.th(j)), y.g, y.b, y.b_cc);
      put_pair(row, f, vm.vm(gi), vm.v(j), vm.thm(gi), vm.th(j), vm.pg(gi), vm.qg(gi), 1.0);
      row += 2;
    }
  }

  for (int li = 0; li < nl; ++li) {
    const auto& l = cs.loads[li];
    if (!l.has_im()) continue;
    const int j = cs.bus_index(l.bus);
    const auto y = im_y(l);
    const auto f = device_injection(x(vm.em(li)), x(vm.v(j)), x(vm.dem(li)),
                                    x(vm.th(j)), y.g, y.b, y.b_cc);
    const double p0 = load_scale * l.p0, q0 = load_scale * l.q0;
    // eps_p * p0 + F_p = 0 (IM component power is -F). Degenerate scaled-out
    // loads fall back to pinning eps at its base value.
    if (p0 != 0.0) {
      out.r(row) = x(vm.epsp(li)) * p0 + f.p;
      add(row, vm.epsp(li), p0);
      add(row, vm.em(li), f.dp_dvm); add(row, vm.v(j), f.dp_dvj);
      add(row, vm.dem(li), f.dp_dthm); add(row, vm.th(j), f.dp_dthj);
    } else {
      out.r(row) = x(vm.epsp(li)) - l.eps_p;
      add(row, vm.epsp(li), 1.0);
    }
    if (q0 != 0.0) {
      out.r(row + 1) = x(vm.epsq(li)) * q0 + f.q;
      add(row + 1, vm.epsq(li), q0);
      add(row + 1, vm.em(li), f.dq_dvm); add(row + 1, vm.v(j), f.dq_dvj);
      add(row + 1, vm.dem(li), f.dq_dthm); add(row + 1, vm.th(j), f.dq_dthj);
    } else {
      out.r(row + 1) = x(vm.epsq(li)) - l.eps_q;
      add(row + 1, vm.epsq(li), 1.0);
    }
    row += 2;
  }

  for (int di = 0; di < nd; ++di) {
    const auto& d = cs.dvcs[di];
    const int j = cs.bus_index(d.bus);
    if (d.kind == DvcKind::Statcom) {
      const auto f = device_injection(x(vm.vs(di)), x(vm.v(j)), x(vm.ths(di)),
                                      x(vm.th(j)), 0.0, 1.0 / d.x_svg, 1.0 / d.x_svg);
      // Active-exchange row (steady only).
      out.r(row) = f.p;
      add(row, vm.vs(di), f.dp_dvm); add(row, vm.v(j), f.dp_dvj);
      add(row, vm.ths(di), f.dp_dthm); add(row, vm.th(j), f.dp_dthj);
      out.steady_only.push_back(row);
      ++row;
      out.r(row) = x(vm.qc(di)) - f.q;
      add(row, vm.qc(di), 1.0);
      add(row, vm.vs(di), -f.dq_dvm); add(row, vm.v(j), -f.dq_dvj);
      add(row, vm.ths(di), -f.dq_dthm); add(row, vm.th(j), -f.dq_dthj);
      ++row;
    } else {
      const double vj = x(vm.v(j));
      out.r(row) = x(vm.qc(di)) - x(vm.bsvc(di)) * vj * vj;
      add(row, vm.qc(di), 1.0);
      add(row, vm.bsvc(di), -vj * vj);
      add(row, vm.v(j), -2.0 * x(vm.bsvc(di)) * vj);
      ++row;
    }
  }
  return out;
}

}  // namespace detail

namespace {

struct PinRow {
  int col = -1;
  double value = 0.0;
};

// Closure rows are all of the simple form x[col] - value = 0.
std::vector<PinRow> closure_rows(const NetworkCase& cs, const VarMap& vm, const Vec& a_s,
                                 const netcase::AcvLayout& lay, SsMode /*mode*/,
                                 const FrozenVars* frozen) {
  std::vector<PinRow> rows;
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());

  if (frozen == nullptr) {
    // Steady-state closure: ACV setpoints, p_go pins, IM weight pins,
    // reference angle.
    for (int g = 0; g < ng; ++g) {
      const int j = cs.bus_index(cs.generators[g].bus);
      rows.push_back({vm.v(j), a_s(lay.vg_offset + g)});
      if (cs.generators[g].slack) {
        rows.push_back({vm.de(g), 0.0});
      } else if (cs.generators[g].has_ess) {
        int k = 0;
        for (; k < lay.pess_count; ++k)
          if (lay.ess_gen_indices[k] == g) break;
        rows.push_back({vm.pg(g), a_s(lay.pess_offset + k)});
      } else {
        rows.push_back({vm.pg(g), cs.generators[g].p_set});
      }
    }
    for (int l = 0; l < nl; ++l) {
      rows.push_back({vm.epsp(l), cs.loads[l].eps_p});
      rows.push_back({vm.epsq(l), cs.loads[l].eps_q});
    }
    for (int d = 0; d < nd; ++d) {
      const int j = cs.bus_index(cs.dvcs[d].bus);
      rows.push_back({vm.v(j), a_s(lay.vdvc_offset + d)});
    }
  } else {
    // Jump closure: the x_c stack keeps its pre-switching values.
    int si = 0, ci = 0, ii = 0, sv = 0, st = 0;
    for (int g = 0; g < ng; ++g) {
      if (cs.generators[g].kind == GenKind::Sg) {
        rows.push_back({vm.e(g), frozen->e(si)});
        rows.push_back({vm.de(g), frozen->de(si)});
        rows.push_back({vm.es(g), frozen->es(si)});
        rows.push_back({vm.des(g), frozen->des(si)});
        ++si;
      } else {
        rows.push_back({vm.vm(g), frozen->vm(ci)});
        rows.push_back({vm.thm(g), frozen->thm(ci)});
        ++ci;
      }
    }
    for (int l = 0; l < nl; ++l) {
      if (!cs.loads[l].has_im()) {
        rows.push_back({vm.epsp(l), cs.loads[l].eps_p});
        rows.push_back({vm.epsq(l), cs.loads[l].eps_q});
        continue;
      }
      rows.push_back({vm.em(l), frozen->em(ii)});
      rows.push_back({vm.dem(l), frozen->dem(ii)});
      ++ii;
    }
    for (int d = 0; d < nd; ++d) {
      if (cs.dvcs[d].kind == DvcKind::Svc) {
        rows.push_back({vm.bsvc(d), frozen->bsvc(sv)});
        ++sv;
      } else {
        rows.push_back({vm.vs(d), frozen->vs(st)});
        rows.push_back({vm.ths(d), frozen->ths(st)});
        ++st;
      }
    }
  }
  // Loads without an IM component keep their weight slots pinned in steady
  // mode already; nothing extra needed here.
  return rows;
}

// Pinned eps rows for loads without IM appear in both steady and jump mode;
// steady mode pins every load. Avoid duplicates by construction above.

Vec flat_start(const NetworkCase& cs, const VarMap& vm, const Vec& a_s,
               const netcase::AcvLayout& lay, double load_scale) {
  Vec x = Vec::Zero(vm.n);
  for (int i = 0; i < cs.n_bus(); ++i) x(vm.v(i)) = 1.0;
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const double vset = a_s(lay.vg_offset + static_cast<int>(g));
    x(vm.v(cs.bus_index(cs.generators[g].bus))) = vset;
    if (cs.generators[g].kind == GenKind::Sg) {
      x(vm.e(g)) = vset;
      x(vm.es(g)) = vset;
    } else {
      x(vm.vm(g)) = vset;
    }
    x(vm.pg(g)) = cs.generators[g].p_set;
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    x(vm.v(cs.bus_index(cs.dvcs[d].bus))) = a_s(lay.vdvc_offset + static_cast<int>(d));
    if (cs.dvcs[d].kind == DvcKind::Statcom) x(vm.vs(d)) = a_s(lay.vdvc_offset + static_cast<int>(d));
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    x(vm.epsp(l)) = cs.loads[l].eps_p;
    x(vm.epsq(l)) = cs.loads[l].eps_q;
    if (!cs.loads[l].has_im()) continue;
    // Closed-form internal emf at the flat voltage.
    const auto& ld = cs.loads[l];
    const double vj = x(vm.v(cs.bus_index(ld.bus)));
    const std::complex<double> V(vj, 0.0);
    const std::complex<double> S(load_scale * ld.eps_p * ld.p0, load_scale * ld.eps_q * ld.q0);
    const std::complex<double> I = std::conj(S / V);
    const std::complex<double> E = V - I * std::complex<double>(ld.r_s, ld.x_m);
    x(vm.em(l)) = std::abs(E);
    x(vm.dem(l)) = std::arg(E);
  }
  return x;
}

Vec pack_state(const NetworkCase& cs, const VarMap& vm, const SteadyStateSolution& s) {
  Vec x = Vec::Zero(vm.n);
  for (int i = 0; i < cs.n_bus(); ++i) {
    x(vm.v(i)) = s.v(i);
    x(vm.th(i)) = s.th(i);
  }
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      x(vm.e(g)) = s.e(g); x(vm.de(g)) = s.de(g);
      x(vm.es(g)) = s.es(g); x(vm.des(g)) = s.des(g);
    } else {
      x(vm.vm(g)) = s.vm(g); x(vm.thm(g)) = s.thm(g);
    }
    x(vm.pg(g)) = s.pg(g); x(vm.qg(g)) = s.qg(g);
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    if (cs.loads[l].has_im()) {
      x(vm.em(l)) = s.em(l);
      x(vm.dem(l)) = s.dem(l);
    }
    x(vm.epsp(l)) = s.epsp(l);
    x(vm.epsq(l)) = s.epsq(l);
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    if (cs.dvcs[d].kind == DvcKind::Statcom) {
      x(vm.vs(d)) = s.vs(d); x(vm.ths(d)) = s.ths(d);
    } else {
      x(vm.bsvc(d)) = s.bsvc(d);
    }
    x(vm.qc(d)) = s.qc(d);
  }
  return x;
}

SteadyStateSolution unpack_state(const NetworkCase& cs, const VarMap& vm,
                                 const TopologyVector& z, const Vec& b_tcsc,
                                 const Vec& x, double load_scale) {
  SteadyStateSolution s;
  const int nn = cs.n_bus();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());
  s.v.setZero(nn); s.th.setZero(nn);
  s.e.setZero(ng); s.de.setZero(ng); s.es.setZero(ng); s.des.setZero(ng);
  s.vm.setZero(ng); s.thm.setZero(ng);
  s.em.setZero(nl); s.dem.setZero(nl);
  s.pg.setZero(ng); s.qg.setZero(ng);
  s.epsp.setZero(nl); s.epsq.setZero(nl);
  s.vs.setZero(nd); s.ths.setZero(nd);
  s.qc.setZero(nd); s.bsvc.setZero(nd);
  s.load_p.setZero(nl); s.load_q.setZero(nl);
  for (int i = 0; i < nn; ++i) { s.v(i) = x(vm.v(i)); s.th(i) = x(vm.th(i)); }
  for (int g = 0; g < ng; ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      s.e(g) = x(vm.e(g)); s.de(g) = x(vm.de(g));
      s.es(g) = x(vm.es(g)); s.des(g) = x(vm.des(g));
    } else {
      s.vm(g) = x(vm.vm(g)); s.thm(g) = x(vm.thm(g));
    }
    s.pg(g) = x(vm.pg(g)); s.qg(g) = x(vm.qg(g));
  }
  for (int l = 0; l < nl; ++l) {
    if (cs.loads[l].has_im()) { s.em(l) = x(vm.em(l)); s.dem(l) = x(vm.dem(l)); }
    s.epsp(l) = x(vm.epsp(l)); s.epsq(l) = x(vm.epsq(l));
    const auto& ld = cs.loads[l];
    const double vr = s.v(cs.bus_index(ld.bus)) / ld.v0;
    s.load_p(l) = load_scale * ld.p0 *
                  (ld.alpha_p * vr * vr + ld.beta_p * vr + ld.gamma_p + s.epsp(l));
    s.load_q(l) = load_scale * ld.q0 *
                  (ld.alpha_q * vr * vr + ld.beta_q * vr + ld.gamma_q + s.epsq(l));
  }
  for (int d = 0; d < nd; ++d) {
    if (cs.dvcs[d].kind == DvcKind::Statcom) { s.vs(d) = x(vm.vs(d)); s.ths(d) = x(vm.ths(d)); }
    else s.bsvc(d) = x(vm.bsvc(d));
    s.qc(d) = x(vm.qc(d));
  }
  s.b_tcsc = b_tcsc;
  detail::flows_from_state(cs, z, b_tcsc, x, vm, s.p_fb, s.q_fb, s.p_tb, s.q_tb);
  s.low_voltage_suspect = nn > 0 && s.v.minCoeff() < 0.8;
  return s;
}

Vec tcsc_values(const NetworkCase&, const Vec& a_s, const netcase::AcvLayout& lay) {
  Vec b(lay.tcsc_count);
  for (int k = 0; k < lay.tcsc_count; ++k) b(k) = a_s(lay.tcsc_offset + k);
  return b;
}

SteadyStateSolution newton_solve(const NetworkCase& cs, const TopologyVector& z,
                                 const Vec& a_s, SsMode mode, const FrozenVars* frozen,
                                 const AcpfOptions& opts, const SteadyStateSolution* warm) {
  if (z.size() != cs.n_branch())
    throw std::invalid_argument("topology vector length mismatch");
  const auto lay = netcase::acv_layout(cs);
  const auto vm = var_map(cs);
  const Vec b_tcsc = frozen ? frozen->b_tcsc : tcsc_values(cs, a_s, lay);
  const auto pins = closure_rows(cs, vm, a_s, lay, mode, frozen);

  auto run = [&](Vec x, int max_iter) -> std::optional<std::pair<Vec, int>> {
    double rnorm_prev = 1e30;
    int stall = 0;
    for (int it = 0; it < max_iter; ++it) {
      auto core = detail::core_rows(cs, z, b_tcsc, x, vm, opts.load_scale, true);
      // Select active rows and append pins.
      std::vector<char> drop(core.r.size(), 0);
      if (frozen)
        for (int ridx : core.steady_only) drop[ridx] = 1;
      int n_core = 0;
      for (size_t i = 0; i < drop.size(); ++i)
        if (!drop[i]) ++n_core;
      const int n_rows = n_core + static_cast<int>(pins.size());
      if (n_rows != vm.n)
        throw std::logic_error(strf("acpf system not square: %d rows, %d unknowns",
                                    n_rows, vm.n));
      Vec r(n_rows);
      Mat J(n_rows, vm.n);
      int k = 0;
      for (int i = 0; i < core.r.size(); ++i) {
        if (drop[i]) continue;
        r(k) = core.r(i);
        J.row(k) = core.J.row(i);
        ++k;
      }
      for (const auto& p : pins) {
        r(k) = x(p.col) - p.value;
        J.row(k).setZero();
        J(k, p.col) = 1.0;
        ++k;
      }
      const double rnorm = r.lpNorm<Eigen::Infinity>();
      if (rnorm < opts.tol) return std::make_pair(x, it);
      if (!std::isfinite(rnorm)) return std::nullopt;

      Eigen::PartialPivLU<Mat> lu(J);
      const Vec dx = lu.solve(-r);
      if (!dx.allFinite()) return std::nullopt;

      // Backtracking on the residual norm.
      double alpha = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 12; ++ls) {
        Vec xn = x + alpha * dx;
        auto cn = detail::core_rows(cs, z, b_tcsc, xn, vm, opts.load_scale, false);
        double rn = 0;
        for (int i = 0; i < cn.r.size(); ++i)
          if (!drop[i]) rn = std::max(rn, std::abs(cn.r(i)));
        for (const auto& p : pins) rn = std::max(rn, std::abs(xn(p.col) - p.value));
        if (std::isfinite(rn) && rn < rnorm * (1.0 - 1e-4 * alpha)) {
          x = xn;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        x += dx;  // full step as a last resort
        if (++stall > 3) return std::nullopt;
      } else {
        stall = 0;
      }
      if (rnorm > rnorm_prev * 1e4) return std::nullopt;
      rnorm_prev = rnorm;
    }
    return std::nullopt;
  };

  std::optional<std::pair<Vec, int>> sol;
  if (warm) sol = run(pack_state(cs, vm, *warm), opts.max_iter);
  if (!sol) sol = run(flat_start(cs, vm, a_s, lay, opts.load_scale), opts.max_iter);
  if (!sol)
    throw SolveError(frozen ? "jumping-state solve did not converge"
                            : "power-flow solve did not converge (possible AC infeasibility)");

  auto out = unpack_state(cs, vm, z, b_tcsc, sol->first, opts.load_scale);
  out.iterations = sol->second;
  {
    auto core = detail::core_rows(cs, z, b_tcsc, sol->first, vm, opts.load_scale, false);
    double rn = 0;
    std::vector<char> drop(core.r.size(), 0);
    if (frozen)
      for (int ridx : core.steady_only) drop[ridx] = 1;
    for (int i = 0; i < core.r.size(); ++i)
      if (!drop[i]) rn = std::max(rn, std::abs(core.r(i)));
    out.residual_norm = rn;
  }
  return out;
}

}  // namespace

SteadyStateSolution solve_steady_state(const NetworkCase& cs, const TopologyVector& z,
                                       const Vec& a_s, SsMode mode,
                                       const AcpfOptions& opts,
                                       const SteadyStateSolution* warm) {
  return newton_solve(cs, z, a_s, mode, nullptr, opts, warm);
}

SteadyStateSolution jumping_state(const NetworkCase& cs, const TopologyVector& z_new,
                                  const Vec& a_s, const FrozenVars& frozen,
                                  const AcpfOptions& opts,
                                  const SteadyStateSolution* warm) {
  return newton_solve(cs, z_new, a_s, SsMode::PostSwitching, &frozen, opts, warm);
}

FrozenVars SteadyStateSolution::frozen(const NetworkCase& cs) const {
  FrozenVars f;
  std::vector<double> e_, de_, es_, des_, vm_, thm_, em_, dem_, bs_, vs_, ths_;
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      e_.push_back(e(g)); de_.push_back(de(g));
      es_.push_back(es(g)); des_.push_back(des(g));
    } else {
      vm_.push_back(vm(g)); thm_.push_back(thm(g));
    }
  }
  for (size_t l = 0; l < cs.loads.size(); ++l)
    if (cs.loads[l].has_im()) { em_.push_back(em(l)); dem_.push_back(dem(l)); }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    if (cs.dvcs[d].kind == DvcKind::Svc) bs_.push_back(bsvc(d));
    else { vs_.push_back(vs(d)); ths_.push_back(ths(d)); }
  }
  auto tov = [](const std::vector<double>& v) {
    return Eigen::Map<const Vec>(v.data(), static_cast<int>(v.size())).eval();
  };
  f.e = tov(e_); f.de = tov(de_); f.es = tov(es_); f.des = tov(des_);
  f.vm = tov(vm_); f.thm = tov(thm_);
  f.em = tov(em_); f.dem = tov(dem_);
  f.bsvc = tov(bs_); f.vs = tov(vs_); f.ths = tov(ths_);
  f.b_tcsc = b_tcsc;
  return f;
}

Vec output_vector(const NetworkCase& cs, const std::vector<netcase::OutputSpec>& outs,
                  const SteadyStateSolution& sol) {
  using K = netcase::OutputSpec::Kind;
  Vec y(static_cast<int>(outs.size()));
  const int ref = cs.slack_gen();
  const double ref_angle = cs.generators[ref].kind == GenKind::Sg ? sol.de(ref) : sol.thm(ref);
  for (size_t k = 0; k < outs.size(); ++k) {
    const auto& o = outs[k];
    switch (o.kind) {
      case K::BusVoltage:
        y(k) = sol.v(cs.bus_index(o.bus));
        break;
      case K::GenPower: {
        bool found = false;
        for (size_t g = 0; g < cs.generators.size(); ++g)
          if (cs.generators[g].id == o.device) { y(k) = sol.pg(g); found = true; }
        if (!found) throw std::out_of_range("unknown generator " + o.device);
        break;
      }
      case K::RotorAngle: {
        bool found = false;
        for (size_t g = 0; g < cs.generators.size(); ++g)
          if (cs.generators[g].id == o.device) { y(k) = sol.de(g) - ref_angle; found = true; }
        if (!found) throw std::out_of_range("unknown generator " + o.device);
        break;
      }
      case K::CigAngle: {
        bool found = false;
        for (size_t g = 0; g < cs.generators.size(); ++g)
          if (cs.generators[g].id == o.device) { y(k) = sol.thm(g) - ref_angle; found = true; }
        if (!found) throw std::out_of_range("unknown generator " + o.device);
        break;
      }
      case K::RotorSpeed:
        y(k) = 0.0;
        break;
    }
  }
  return y;
}

std::string dump_solution(const NetworkCase& cs, const SteadyStateSolution& sol) {
  std::string out = "bus        v         theta\n";
  for (int i = 0; i < cs.n_bus(); ++i)
    out += strf("%-6d %9.5f %9.5f\n", cs.buses[i].id, sol.v(i), sol.th(i));
  out += "generator     p         q\n";
  for (size_t g = 0; g < cs.generators.size(); ++g)
    out += strf("%-10s %9.5f %9.5f\n", cs.generators[g].id.c_str(), sol.pg(g), sol.qg(g));
  out += "load          p         q      eps_p    eps_q\n";
  for (size_t l = 0; l < cs.loads.size(); ++l)
    out += strf("%-10s %9.5f %9.5f %8.4f %8.4f\n", cs.loads[l].id.c_str(), sol.load_p(l),
                sol.load_q(l), sol.epsp(l), sol.epsq(l));
  if (!cs.dvcs.empty()) {
    out += "dvc          qc       bsvc\n";
    for (size_t d = 0; d < cs.dvcs.size(); ++d)
      out += strf("%-10s %9.5f %9.5f\n", cs.dvcs[d].id.c_str(), sol.qc(d), sol.bsvc(d));
  }
  out += "branch       pfb       qfb       ptb       qtb\n";
  for (int e = 0; e < cs.n_branch(); ++e)
    out += strf("%-10s %9.5f %9.5f %9.5f %9.5f\n", cs.branches[e].id.c_str(), sol.p_fb(e),
                sol.q_fb(e), sol.p_tb(e), sol.q_tb(e));
  return out;
}

Vec pack(const NetworkCase& cs, const VarMap& vm, const SteadyStateSolution& sol) {
  return pack_state(cs, vm, sol);
}

SteadyStateSolution unpack(const NetworkCase& cs, const VarMap& vm,
                           const TopologyVector& z, const Vec& b_tcsc, const Vec& x,
                           double load_scale) {
  return unpack_state(cs, vm, z, b_tcsc, x, load_scale);
}

namespace detail {

FlowRows flow_rows(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                   const Vec& x, const VarMap& vm) {
  const int ne = cs.n_branch();
  FlowRows out;
  out.val.setZero(4 * ne);
  out.J.setZero(4 * ne, vm.n);
  out.J_btcsc.setZero(4 * ne, b_tcsc.size());
  int tc = 0;
  for (int e = 0; e < ne; ++e) {
    std::optional<double> bo;
    int col = -1;
    if (cs.branches[e].tcsc) {
      col = tc;
      bo = b_tcsc(tc++);
    }
    if (z.z(e) == 0) continue;
    const auto adm = branch_admittance(cs.branches[e], bo);
    const double g = adm.g, b = adm.b;
    const int i = cs.bus_index(cs.branches[e].from);
    const int j = cs.bus_index(cs.branches[e].to);
    const double vi = x(vm.v(i)), vj = x(vm.v(j));
    const double c = std::cos(x(vm.th(i)) - x(vm.th(j)));
    const double s = std::sin(x(vm.th(i)) - x(vm.th(j)));
    const int rp = e, rq = ne + e, rtp = 2 * ne + e, rtq = 3 * ne + e;
    out.val(rp) = g * vi * vi - (g * c + b * s) * vi * vj;
    out.val(rq) = -b * vi * vi - (-b * c + g * s) * vi * vj;
    out.val(rtp) = g * vj * vj - (g * c - b * s) * vi * vj;
    out.val(rtq) = -b * vj * vj - (-b * c - g * s) * vi * vj;
    auto set = [&](int r, double dvi, double dvj, double dthi) {
      out.J(r, vm.v(i)) = dvi;
      out.J(r, vm.v(j)) = dvj;
      out.J(r, vm.th(i)) = dthi;
      out.J(r, vm.th(j)) = -dthi;
    };
    set(rp, 2 * g * vi - (g * c + b * s) * vj, -(g * c + b * s) * vi,
        (g * s - b * c) * vi * vj);
    set(rq, -2 * b * vi - (-b * c + g * s) * vj, -(-b * c + g * s) * vi,
        -(b * s + g * c) * vi * vj);
    set(rtp, -(g * c - b * s) * vj, 2 * g * vj - (g * c - b * s) * vi,
        (g * s + b * c) * vi * vj);
    set(rtq, -(-b * c - g * s) * vj, -2 * b * vj - (-b * c - g * s) * vi,
        (g * c - b * s) * vi * vj);
    if (col >= 0) {
      out.J_btcsc(rp, col) = -s * vi * vj + (vi * vi - c * vi * vj) * adm.dg_db;
      out.J_btcsc(rq, col) = (-vi * vi + c * vi * vj) + (-s * vi * vj) * adm.dg_db;
      out.J_btcsc(rtp, col) = s * vi * vj + (vj * vj - c * vi * vj) * adm.dg_db;
      out.J_btcsc(rtq, col) = (-vj * vj + c * vi * vj) + (s * vi * vj) * adm.dg_db;
    }
  }
  return out;
}

}  // namespace detail

Vec residual_at(const NetworkCase& cs, const TopologyVector& z, const Vec& a_s,
                SsMode mode, const SteadyStateSolution& sol, const AcpfOptions& opts) {
  const auto vm = var_map(cs);
  const auto lay = netcase::acv_layout(cs);
  const Vec x = pack_state(cs, vm, sol);
  auto core = detail::core_rows(cs, z, sol.b_tcsc, x, vm, opts.load_scale, false);
  const auto pins = closure_rows(cs, vm, a_s, lay, mode, nullptr);
  Vec r(core.r.size() + static_cast<int>(pins.size()));
  r.head(core.r.size()) = core.r;
  for (size_t i = 0; i < pins.size(); ++i)
    r(core.r.size() + static_cast<int>(i)) = x(pins[i].col) - pins[i].value;
  return r;
}

}  // namespace btt::acpf
