#include "btt/dyn.hpp"

#include <cmath>
#include <complex>
#include <fstream>

#include <Eigen/Eigenvalues>

namespace btt::dyn {

using netcase::DvcKind;
using netcase::GenKind;

Model::Model(const NetworkCase& cs, TopologyVector z,
             std::vector<netcase::OutputSpec> outputs, double load_scale)
    : cs_(&cs), z_(std::move(z)), outputs_(std::move(outputs)), load_scale_(load_scale) {
  if (z_.size() != cs.n_branch())
    throw std::invalid_argument("topology vector length mismatch");
  acv_ = netcase::acv_layout(cs);
  sl_.ref_gen = cs.slack_gen();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());
  sl_.sg.resize(ng);
  sl_.cig.resize(ng);
  sl_.im.resize(nl);
  sl_.dvc.resize(nd);
  int k = 0;
  for (int g = 0; g < ng; ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      if (g != sl_.ref_gen) sl_.sg[g].delta = k++;
      sl_.sg[g].omega = k++;
      sl_.sg[g].es = k++;
      sl_.sg[g].des = k++;
      sl_.sg[g].efd = k++;
      if (g == sl_.ref_gen) sl_.sg[g].pgov = k++;
    } else {
      sl_.cig[g].thm = k++;
      sl_.cig[g].omega = k++;
      sl_.cig[g].vm = k++;
    }
  }
  for (int l = 0; l < nl; ++l)
    if (cs.loads[l].has_im()) {
      sl_.im[l].ex = k++;
      sl_.im[l].ey = k++;
      sl_.im[l].slip = k++;
    }
  for (int d = 0; d < nd; ++d) {
    if (cs.dvcs[d].kind == DvcKind::Svc) sl_.dvc[d].b = k++;
    else { sl_.dvc[d].vs = k++; sl_.dvc[d].ths = k++; }
  }
  sl_.n_x = k;

  const int nn = cs.n_bus();
  al_.v0 = 0;
  al_.th0 = nn;
  al_.pg0 = 2 * nn;
  al_.qg0 = 2 * nn + ng;
  al_.n_xi = 2 * nn + 2 * ng;

  // Output selectors.
  const int ny = n_y();
  hx_ = Mat::Zero(ny, sl_.n_x);
  hxi_ = Mat::Zero(ny, al_.n_xi);
  using K = netcase::OutputSpec::Kind;
  for (int o = 0; o < ny; ++o) {
    const auto& spec = outputs_[static_cast<size_t>(o)];
    switch (spec.kind) {
      case K::BusVoltage:
        hxi_(o, al_.v0 + cs.bus_index(spec.bus)) = 1.0;
        break;
      case K::GenPower: {
        int gi = -1;
        for (int g = 0; g < ng; ++g)
          if (cs.generators[g].id == spec.device) gi = g;
        if (gi < 0) throw std::out_of_range("unknown generator " + spec.device);
        hxi_(o, al_.pg0 + gi) = 1.0;
        break;
      }
      case K::RotorAngle:
      case K::CigAngle:
      case K::RotorSpeed: {
        int gi = -1;
        for (int g = 0; g < ng; ++g)
          if (cs.generators[g].id == spec.device) gi = g;
        if (gi < 0) throw std::out_of_range("unknown generator " + spec.device);
        const bool is_sg = cs.generators[gi].kind == GenKind::Sg;
        if (spec.kind == K::RotorAngle) {
          if (gi != sl_.ref_gen) hx_(o, sl_.sg[gi].delta) = 1.0;
        } else if (spec.kind == K::CigAngle) {
          hx_(o, sl_.cig[gi].thm) = 1.0;
        } else {
          hx_(o, is_sg ? sl_.sg[gi].omega : sl_.cig[gi].omega) = 1.0;
        }
        break;
      }
    }
  }
}

namespace {

struct Eval {
  Vec f, g;
  Mat fx, fxi, gx, gxi;
  bool want_jac = false;
};

}  // namespace

// Single assembly routine for f, g and their Jacobians; keeping values and
// derivatives together avoids drift between the two.
static void assemble(const NetworkCase& cs, const TopologyVector& z,
                     const StateLayout& sl, const AlgLayout& al,
                     const netcase::AcvLayout& acv, double load_scale, const Vec& x,
                     const Vec& xi, const Vec& a_s, const Vec& a_t, Eval& ev) {
  const int nn = cs.n_bus();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());
  const int nxi = al.n_xi;
  const int nx = sl.n_x;

  ev.f.setZero(nx);
  ev.g.setZero(2 * nn + 2 * ng);
  if (ev.want_jac) {
    ev.fx.setZero(nx, nx);
    ev.fxi.setZero(nx, nxi);
    ev.gx.setZero(2 * nn + 2 * ng, nx);
    ev.gxi.setZero(2 * nn + 2 * ng, nxi);
  }

  auto V = [&](int bus) { return xi(al.v0 + bus); };
  auto TH = [&](int bus) { return xi(al.th0 + bus); };
  auto fx = [&](int r, int c, double v) { if (ev.want_jac && c >= 0) ev.fx(r, c) += v; };
  auto fxi = [&](int r, int c, double v) { if (ev.want_jac) ev.fxi(r, c) += v; };
  auto gx = [&](int r, int c, double v) { if (ev.want_jac && c >= 0) ev.gx(r, c) += v; };
  auto gxi = [&](int r, int c, double v) { if (ev.want_jac) ev.gxi(r, c) += v; };

  const int ref = sl.ref_gen;
  const int iw_ref = sl.sg[ref].omega;
  const double w_ref = x(iw_ref);

  // --- Nodal balance (g rows 0..2nn-1): injections - flows - shunts.
  int tc = 0;
  for (int e = 0; e < cs.n_branch(); ++e) {
    std::optional<double> bo;
    if (cs.branches[e].tcsc) bo = a_s(acv.tcsc_offset + tc++);
    const double ze = static_cast<double>(z.z(e));
    const int i = cs.bus_index(cs.branches[e].from);
    const int j = cs.bus_index(cs.branches[e].to);
    const double vi = V(i), vj = V(j);
    ev.g(i) -= ze * cs.branches[e].g_lc * vi * vi;
    ev.g(j) -= ze * cs.branches[e].g_lc * vj * vj;
    ev.g(nn + i) += ze * cs.branches[e].b_lc * vi * vi;
    ev.g(nn + j) += ze * cs.branches[e].b_lc * vj * vj;
    gxi(i, al.v0 + i, -2 * ze * cs.branches[e].g_lc * vi);
    gxi(j, al.v0 + j, -2 * ze * cs.branches[e].g_lc * vj);
    gxi(nn + i, al.v0 + i, 2 * ze * cs.branches[e].b_lc * vi);
    gxi(nn + j, al.v0 + j, 2 * ze * cs.branches[e].b_lc * vj);
    if (ze == 0.0) continue;
    const auto adm = acpf::branch_admittance(cs.branches[e], bo);
    const double g = adm.g, b = adm.b;
    const double c = std::cos(TH(i) - TH(j)), s = std::sin(TH(i) - TH(j));
    const double pfb = g * vi * vi - (g * c + b * s) * vi * vj;
    const double ptb = g * vj * vj - (g * c - b * s) * vi * vj;
    const double qfb = -b * vi * vi - (-b * c + g * s) * vi * vj;
    const double qtb = -b * vj * vj - (-b * c - g * s) * vi * vj;
    ev.g(i) -= pfb;
    ev.g(j) -= ptb;
    ev.g(nn + i) -= qfb;
    ev.g(nn + j) -= qtb;
    if (ev.want_jac) {
      const double dpfb_dvi = 2 * g * vi - (g * c + b * s) * vj;
      const double dpfb_dvj = -(g * c + b * s) * vi;
      const double dpfb_dthi = (g * s - b * c) * vi * vj;
      const double dptb_dvi = -(g * c - b * s) * vj;
      const double dptb_dvj = 2 * g * vj - (g * c - b * s) * vi;
      const double dptb_dthi = (g * s + b * c) * vi * vj;
      const double dqfb_dvi = -2 * b * vi - (-b * c + g * s) * vj;
      const double dqfb_dvj = -(-b * c + g * s) * vi;
      const double dqfb_dthi = -(b * s + g * c) * vi * vj;
      const double dqtb_dvi = -(-b * c - g * s) * vj;
      const double dqtb_dvj = -2 * b * vj - (-b * c - g * s) * vi;
      const double dqtb_dthi = (g * c - b * s) * vi * vj;
      gxi(i, al.v0 + i, -dpfb_dvi); gxi(i, al.v0 + j, -dpfb_dvj);
      gxi(i, al.th0 + i, -dpfb_dthi); gxi(i, al.th0 + j, dpfb_dthi);
      gxi(j, al.v0 + i, -dptb_dvi); gxi(j, al.v0 + j, -dptb_dvj);
      gxi(j, al.th0 + i, -dptb_dthi); gxi(j, al.th0 + j, dptb_dthi);
      gxi(nn + i, al.v0 + i, -dqfb_dvi); gxi(nn + i, al.v0 + j, -dqfb_dvj);
      gxi(nn + i, al.th0 + i, -dqfb_dthi); gxi(nn + i, al.th0 + j, dqfb_dthi);
      gxi(nn + j, al.v0 + i, -dqtb_dvi); gxi(nn + j, al.v0 + j, -dqtb_dvj);
      gxi(nn + j, al.th0 + i, -dqtb_dthi); gxi(nn + j, al.th0 + j, dqtb_dthi);
    }
  }
  for (int i = 0; i < nn; ++i) {
    const double vi = V(i);
    ev.g(i) -= cs.buses[i].g_s * vi * vi;
    ev.g(nn + i) += cs.buses[i].b_s * vi * vi;
    gxi(i, al.v0 + i, -2 * cs.buses[i].g_s * vi);
    gxi(nn + i, al.v0 + i, 2 * cs.buses[i].b_s * vi);
  }
  for (int g = 0; g < ng; ++g) {
    const int j = cs.bus_index(cs.generators[g].bus);
    ev.g(j) += xi(al.pg0 + g);
    ev.g(nn + j) += xi(al.qg0 + g);
    gxi(j, al.pg0 + g, 1.0);
    gxi(nn + j, al.qg0 + g, 1.0);
  }

  // --- Loads: static ZIP parts plus dynamic IM injection.
  for (int l = 0; l < nl; ++l) {
    const auto& ld = cs.loads[l];
    const int j = cs.bus_index(ld.bus);
    const double vj = V(j), thj = TH(j);
    const double p0 = load_scale * ld.p0, q0 = load_scale * ld.q0;
    const double vr = vj / ld.v0;
    const double pz = p0 * (ld.alpha_p * vr * vr + ld.beta_p * vr + ld.gamma_p);
    const double qz = q0 * (ld.alpha_q * vr * vr + ld.beta_q * vr + ld.gamma_q);
    ev.g(j) -= pz;
    ev.g(nn + j) -= qz;
    gxi(j, al.v0 + j, -p0 * (2 * ld.alpha_p * vr + ld.beta_p) / ld.v0);
    gxi(nn + j, al.v0 + j, -q0 * (2 * ld.alpha_q * vr + ld.beta_q) / ld.v0);
    if (!ld.has_im()) continue;

    const double den = ld.r_s * ld.r_s + ld.x_m * ld.x_m;
    const double gm = ld.r_s / den, bm = ld.x_m / den;
    const double ex = x(sl.im[l].ex), ey = x(sl.im[l].ey), slip = x(sl.im[l].slip);
    const double em = std::hypot(ex, ey);
    const double dem = std::atan2(ey, ex);
    // Power drawn by the IM component is -F(e_m, v_j, ...) per the load model.
    const auto inj = acpf::device_injection(em, vj, dem, thj, gm, bm, bm);
    const double Pin = -inj.p, Qin = -inj.q;
    ev.g(j) -= Pin;
    ev.g(nn + j) -= Qin;
    // Chain rule from polar (e_m, delta_m) to rectangular states.
    const double dem_dex = ex / em, dem_dey = ey / em;
    const double ddm_dex = -ey / (em * em), ddm_dey = ex / (em * em);
    if (ev.want_jac) {
      gxi(j, al.v0 + j, inj.dp_dvj);
      gxi(j, al.th0 + j, inj.dp_dthj);
      gx(j, sl.im[l].ex, inj.dp_dvm * dem_dex + inj.dp_dthm * ddm_dex);
      gx(j, sl.im[l].ey, inj.dp_dvm * dem_dey + inj.dp_dthm * ddm_dey);
      gxi(nn + j, al.v0 + j, inj.dq_dvj);
      gxi(nn + j, al.th0 + j, inj.dq_dthj);
      gx(nn + j, sl.im[l].ex, inj.dq_dvm * dem_dex + inj.dq_dthm * ddm_dex);
      gx(nn + j, sl.im[l].ey, inj.dq_dvm * dem_dey + inj.dq_dthm * ddm_dey);
    }

    // Internal emf relaxes toward the value consistent with the nominal IM
    // weights at the present bus voltage, rotated by slip; first-order slip
    // dynamics close the loop.
    const double P0 = load_scale * ld.eps_p * ld.p0;
    const double Q0 = load_scale * ld.eps_q * ld.q0;
    const double al0 = (gm * vj * vj - P0) / vj;
    const double be0 = (bm * vj * vj - Q0) / vj;
    const double det = gm * gm - bm * bm;
    const double uu = (gm * al0 - bm * be0) / det;
    const double ww = (gm * be0 - bm * al0) / det;
    const double ct = std::cos(thj), st = std::sin(thj);
    const double Essx = uu * ct - ww * st;
    const double Essy = uu * st + ww * ct;
    const double a = kOmegaBase * (slip + w_ref);
    const int rx = sl.im[l].ex, ry = sl.im[l].ey, rs = sl.im[l].slip;
    ev.f(rx) = (Essx - ex) / ld.t_m0 + a * ey;
    ev.f(ry) = (Essy - ey) / ld.t_m0 - a * ex;
    ev.f(rs) = (P0 - Pin) / (2.0 * ld.inertia_h);
    if (ev.want_jac) {
      const double dal_dv = gm + P0 / (vj * vj);
      const double dbe_dv = bm + Q0 / (vj * vj);
      const double du_dv = (gm * dal_dv - bm * dbe_dv) / det;
      const double dw_dv = (gm * dbe_dv - bm * dal_dv) / det;
      fx(rx, rx, -1.0 / ld.t_m0);
      fx(rx, ry, a);
      fx(rx, rs, kOmegaBase * ey);
      fx(rx, iw_ref, kOmegaBase * ey);
      fxi(rx, al.v0 + j, (du_dv * ct - dw_dv * st) / ld.t_m0);
      fxi(rx, al.th0 + j, -Essy / ld.t_m0);
      fx(ry, ry, -1.0 / ld.t_m0);
      fx(ry, rx, -a);
      fx(ry, rs, -kOmegaBase * ex);
      fx(ry, iw_ref, -kOmegaBase * ex);
      fxi(ry, al.v0 + j, (du_dv * st + dw_dv * ct) / ld.t_m0);
      fxi(ry, al.th0 + j, Essx / ld.t_m0);
      const double s2h = 1.0 / (2.0 * ld.inertia_h);
      fxi(rs, al.v0 + j, s2h * inj.dp_dvj);
      fxi(rs, al.th0 + j, s2h * inj.dp_dthj);
      fx(rs, sl.im[l].ex, s2h * (inj.dp_dvm * dem_dex + inj.dp_dthm * ddm_dex));
      fx(rs, sl.im[l].ey, s2h * (inj.dp_dvm * dem_dey + inj.dp_dthm * ddm_dey));
    }
  }

  // --- Generators.
  int n_cig = 0;
  for (int g = 0; g < ng; ++g)
    if (cs.generators[g].kind == GenKind::Cig) ++n_cig;
  int cig_pos = 0, ess_pos = 0;
  for (int g = 0; g < ng; ++g) {
    const auto& gen = cs.generators[g];
    const int j = cs.bus_index(gen.bus);
    const double vj = V(j), thj = TH(j);
    const int rp = 2 * nn + 2 * g, rq = rp + 1;
    if (gen.kind == GenKind::Sg) {
      const auto& ix = sl.sg[g];
      const double delta = g == ref ? 0.0 : x(ix.delta);
      const double omega = x(ix.omega);
      const double es = x(ix.es), des = x(ix.des), efd = x(ix.efd);
      const auto inj = acpf::device_injection(es, vj, des, thj, 0.0, 1.0 / gen.x_sub,
                                              1.0 / gen.x_sub);
      // g rows: generator output equals the subtransient-emf injection.
      ev.g(rp) = xi(al.pg0 + g) - inj.p;
      ev.g(rq) = xi(al.qg0 + g) - inj.q;
      gxi(rp, al.pg0 + g, 1.0);
      gx(rp, ix.es, -inj.dp_dvm); gx(rp, ix.des, -inj.dp_dthm);
      gxi(rp, al.v0 + j, -inj.dp_dvj); gxi(rp, al.th0 + j, -inj.dp_dthj);
      gxi(rq, al.qg0 + g, 1.0);
      gx(rq, ix.es, -inj.dq_dvm); gx(rq, ix.des, -inj.dq_dthm);
      gxi(rq, al.v0 + j, -inj.dq_dvj); gxi(rq, al.th0 + j, -inj.dq_dthj);

      // Swing.
      const double pm = gen.p_set + (g == ref ? x(ix.pgov) : 0.0);
      const double twoH = 2.0 * gen.inertia_h;
      ev.f(ix.omega) = (pm - inj.p - gen.damping * omega) / twoH;
      fx(ix.omega, ix.omega, -gen.damping / twoH);
      fx(ix.omega, ix.es, -inj.dp_dvm / twoH);
      fx(ix.omega, ix.des, -inj.dp_dthm / twoH);
      fxi(ix.omega, al.v0 + j, -inj.dp_dvj / twoH);
      fxi(ix.omega, al.th0 + j, -inj.dp_dthj / twoH);
      if (g == ref) {
        fx(ix.omega, ix.pgov, 1.0 / twoH);
        ev.f(ix.pgov) = -omega / gen.t_gov;
        fx(ix.pgov, ix.omega, -1.0 / gen.t_gov);
      } else {
        ev.f(ix.delta) = kOmegaBase * (omega - w_ref);
        fx(ix.delta, ix.omega, kOmegaBase);
        fx(ix.delta, iw_ref, -kOmegaBase);
      }

      // Subtransient emf tracks the value consistent with the excitation emf
      // behind x_q.
      const double rho = gen.x_sub / gen.x_q;
      const double cd = std::cos(delta), sd = std::sin(delta);
      const double ct = std::cos(thj), st = std::sin(thj);
      const double ax = (1 - rho) * vj * ct + rho * efd * cd;
      const double ay = (1 - rho) * vj * st + rho * efd * sd;
      const double mag = std::hypot(ax, ay);
      const double arg = std::atan2(ay, ax);
      ev.f(ix.es) = (mag - es) / gen.t_sub;
      ev.f(ix.des) = (arg - des) / gen.t_sub - kOmegaBase * w_ref;
      ev.f(ix.efd) = gen.k_avr * (a_s(acv.vg_offset + g) - vj);
      if (ev.want_jac) {
        const double m2 = mag * mag;
        auto dmag = [&](double dax, double day) { return (ax * dax + ay * day) / mag; };
        auto darg = [&](double dax, double day) { return (ax * day - ay * dax) / m2; };
        const double dax_dv = (1 - rho) * ct, day_dv = (1 - rho) * st;
        const double dax_dth = -(1 - rho) * vj * st, day_dth = (1 - rho) * vj * ct;
        const double dax_de = rho * cd, day_de = rho * sd;
        const double dax_dd = -rho * efd * sd, day_dd = rho * efd * cd;
        fx(ix.es, ix.es, -1.0 / gen.t_sub);
        fxi(ix.es, al.v0 + j, dmag(dax_dv, day_dv) / gen.t_sub);
        fxi(ix.es, al.th0 + j, dmag(dax_dth, day_dth) / gen.t_sub);
        fx(ix.es, ix.efd, dmag(dax_de, day_de) / gen.t_sub);
        if (g != ref) fx(ix.es, ix.delta, dmag(dax_dd, day_dd) / gen.t_sub);
        fx(ix.des, ix.des, -1.0 / gen.t_sub);
        fxi(ix.des, al.v0 + j, darg(dax_dv, day_dv) / gen.t_sub);
        fxi(ix.des, al.th0 + j, darg(dax_dth, day_dth) / gen.t_sub);
        fx(ix.des, ix.efd, darg(dax_de, day_de) / gen.t_sub);
        if (g != ref) fx(ix.des, ix.delta, darg(dax_dd, day_dd) / gen.t_sub);
        fx(ix.des, iw_ref, -kOmegaBase);
        fxi(ix.efd, al.v0 + j, -gen.k_avr);
      }
    } else {
      const auto& ix = sl.cig[g];
      const double thm = x(ix.thm), omega = x(ix.omega), vms = x(ix.vm);
      const double dcl = gen.r_c * gen.r_c + gen.x_cl * gen.x_cl;
      const double gc = gen.r_c / dcl, bc = gen.x_cl / dcl;
      const double bcc = bc + 1.0 / gen.x_cc;
      const auto inj = acpf::device_injection(vms, vj, thm, thj, gc, bc, bcc);
      ev.g(rp) = xi(al.pg0 + g) - inj.p;
      ev.g(rq) = xi(al.qg0 + g) - inj.q;
      gxi(rp, al.pg0 + g, 1.0);
      gx(rp, ix.vm, -inj.dp_dvm); gx(rp, ix.thm, -inj.dp_dthm);
      gxi(rp, al.v0 + j, -inj.dp_dvj); gxi(rp, al.th0 + j, -inj.dp_dthj);
      gxi(rq, al.qg0 + g, 1.0);
      gx(rq, ix.vm, -inj.dq_dvm); gx(rq, ix.thm, -inj.dq_dthm);
      gxi(rq, al.v0 + j, -inj.dq_dvj); gxi(rq, al.th0 + j, -inj.dq_dthj);

      // Virtual synchronous swing in (m_cg, d_cg).
      const double m = a_t(cig_pos);
      const double d = a_t(n_cig + cig_pos);
      double p_ref = gen.p_set;
      if (gen.has_ess) {
        p_ref = a_s(acv.pess_offset + ess_pos);
        ++ess_pos;
      }
      ev.f(ix.thm) = kOmegaBase * (omega - w_ref);
      fx(ix.thm, ix.omega, kOmegaBase);
      fx(ix.thm, iw_ref, -kOmegaBase);
      ev.f(ix.omega) = (p_ref - inj.p - d * omega) / m;
      fx(ix.omega, ix.omega, -d / m);
      fx(ix.omega, ix.vm, -inj.dp_dvm / m);
      fx(ix.omega, ix.thm, -inj.dp_dthm / m);
      fxi(ix.omega, al.v0 + j, -inj.dp_dvj / m);
      fxi(ix.omega, al.th0 + j, -inj.dp_dthj / m);
      ev.f(ix.vm) = gen.k_vreg * (a_s(acv.vg_offset + g) - vj);
      fxi(ix.vm, al.v0 + j, -gen.k_vreg);
      ++cig_pos;
    }
  }

  // --- DVCs.
  for (int d = 0; d < nd; ++d) {
    const auto& dvc = cs.dvcs[d];
    const int j = cs.bus_index(dvc.bus);
    const double vj = V(j), thj = TH(j);
    const double vset = a_s(acv.vdvc_offset + d);
    if (dvc.kind == DvcKind::Svc) {
      const double b = x(sl.dvc[d].b);
      ev.g(nn + j) += b * vj * vj;
      gx(nn + j, sl.dvc[d].b, vj * vj);
      gxi(nn + j, al.v0 + j, 2 * b * vj);
      ev.f(sl.dvc[d].b) = dvc.k_reg * (vset - vj) / dvc.t_reg;
      fxi(sl.dvc[d].b, al.v0 + j, -dvc.k_reg / dvc.t_reg);
    } else {
      const double vs = x(sl.dvc[d].vs), ths = x(sl.dvc[d].ths);
      const auto inj = acpf::device_injection(vs, vj, ths, thj, 0.0, 1.0 / dvc.x_svg,
                                              1.0 / dvc.x_svg);
      // Reactive injection only; the transient active exchange is absorbed
      // by the converter DC link.
      ev.g(nn + j) += inj.q;
      gx(nn + j, sl.dvc[d].vs, inj.dq_dvm);
      gx(nn + j, sl.dvc[d].ths, inj.dq_dthm);
      gxi(nn + j, al.v0 + j, inj.dq_dvj);
      gxi(nn + j, al.th0 + j, inj.dq_dthj);
      ev.f(sl.dvc[d].vs) = dvc.k_reg * (vset - vj) / dvc.t_reg;
      fxi(sl.dvc[d].vs, al.v0 + j, -dvc.k_reg / dvc.t_reg);
      ev.f(sl.dvc[d].ths) = -dvc.k_reg * inj.p / dvc.t_reg - kOmegaBase * w_ref;
      fx(sl.dvc[d].ths, sl.dvc[d].vs, -dvc.k_reg * inj.dp_dvm / dvc.t_reg);
      fx(sl.dvc[d].ths, sl.dvc[d].ths, -dvc.k_reg * inj.dp_dthm / dvc.t_reg);
      fxi(sl.dvc[d].ths, al.v0 + j, -dvc.k_reg * inj.dp_dvj / dvc.t_reg);
      fxi(sl.dvc[d].ths, al.th0 + j, -dvc.k_reg * inj.dp_dthj / dvc.t_reg);
      fx(sl.dvc[d].ths, iw_ref, -kOmegaBase);
    }
  }
}

Vec Model::f(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const {
  Eval ev;
  ev.want_jac = false;
  assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xi, a_s, a_t, ev);
  return ev.f;
}

Vec Model::g(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const {
  Eval ev;
  ev.want_jac = false;
  assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xi, a_s, a_t, ev);
  return ev.g;
}

Jacobians Model::jacobians(const Vec& x, const Vec& xi, const Vec& a_s,
                           const Vec& a_t) const {
  if (use_fd_jacobian) return fd_jacobians(x, xi, a_s, a_t);
  Eval ev;
  ev.want_jac = true;
  assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xi, a_s, a_t, ev);
  return {ev.fx, ev.fxi, ev.gx, ev.gxi};
}

Jacobians Model::fd_jacobians(const Vec& x, const Vec& xi, const Vec& a_s,
                              const Vec& a_t) const {
  const double h = 1e-7;
  Jacobians J;
  J.fx.setZero(n_x(), n_x());
  J.fxi.setZero(n_x(), n_xi());
  J.gx.setZero(n_xi(), n_x());
  J.gxi.setZero(n_xi(), n_xi());
  for (int c = 0; c < n_x(); ++c) {
    Vec xp = x, xm = x;
    xp(c) += h;
    xm(c) -= h;
    J.fx.col(c) = (f(xp, xi, a_s, a_t) - f(xm, xi, a_s, a_t)) / (2 * h);
    J.gx.col(c) = (g(xp, xi, a_s, a_t) - g(xm, xi, a_s, a_t)) / (2 * h);
  }
  for (int c = 0; c < n_xi(); ++c) {
    Vec xp = xi, xm = xi;
    xp(c) += h;
    xm(c) -= h;
    J.fxi.col(c) = (f(x, xp, a_s, a_t) - f(x, xm, a_s, a_t)) / (2 * h);
    J.gxi.col(c) = (g(x, xp, a_s, a_t) - g(x, xm, a_s, a_t)) / (2 * h);
  }
  return J;
}

Vec Model::h(const Vec& x, const Vec& xi) const { return hx_ * x + hxi_ * xi; }

std::pair<Vec, Vec> Model::from_acpf(const acpf::SteadyStateSolution& sol) const {
  Vec x = Vec::Zero(n_x());
  Vec xi = Vec::Zero(n_xi());
  const auto& cs = *cs_;
  for (int i = 0; i < cs.n_bus(); ++i) {
    xi(al_.v0 + i) = sol.v(i);
    xi(al_.th0 + i) = sol.th(i);
  }
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    xi(al_.pg0 + static_cast<int>(g)) = sol.pg(g);
    xi(al_.qg0 + static_cast<int>(g)) = sol.qg(g);
    if (cs.generators[g].kind == GenKind::Sg) {
      const auto& ix = sl_.sg[g];
      if (static_cast<int>(g) != sl_.ref_gen) x(ix.delta) = sol.de(g);
      x(ix.es) = sol.es(g);
      x(ix.des) = sol.des(g);
      x(ix.efd) = sol.e(g);
      if (static_cast<int>(g) == sl_.ref_gen)
        x(ix.pgov) = sol.pg(g) - cs.generators[g].p_set;
    } else {
      const auto& ix = sl_.cig[g];
      x(ix.thm) = sol.thm(g);
      x(ix.vm) = sol.vm(g);
    }
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    if (!cs.loads[l].has_im()) continue;
    x(sl_.im[l].ex) = sol.em(l) * std::cos(sol.dem(l));
    x(sl_.im[l].ey) = sol.em(l) * std::sin(sol.dem(l));
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    if (cs.dvcs[d].kind == DvcKind::Svc) x(sl_.dvc[d].b) = sol.bsvc(d);
    else {
      x(sl_.dvc[d].vs) = sol.vs(d);
      x(sl_.dvc[d].ths) = sol.ths(d);
    }
  }
  return {x, xi};
}

LinearizedSystem Model::linearize_at(const Vec& x_star, const Vec& xi_star,
                                     const Vec& a_s, const Vec& a_t) const {
  auto J = jacobians(x_star, xi_star, a_s, a_t);
  Eigen::FullPivLU<Mat> lu(J.gxi);
  if (!lu.isInvertible())
    throw SolveError("singular algebraic Jacobian at the linearization point");
  const Mat ginv_gx = lu.solve(J.gx);
  LinearizedSystem out;
  out.A = J.fx - J.fxi * ginv_gx;
  out.C = hx_ - hxi_ * ginv_gx;
  out.x_star = x_star;
  out.xi_star = xi_star;
  return out;
}

Mat Model::dA_dat(const LinearizedSystem& lin, const Vec& a_s, const Vec& a_t,
                  int at_index) const {
  const auto& cs = *cs_;
  int n_cig = 0;
  for (const auto& g : cs.generators)
    if (g.kind == GenKind::Cig) ++n_cig;
  const bool is_m = at_index < n_cig;
  const int cig_pos = is_m ? at_index : at_index - n_cig;
  int gi = -1, seen = 0;
  for (size_t g = 0; g < cs.generators.size(); ++g)
    if (cs.generators[g].kind == GenKind::Cig && seen++ == cig_pos) gi = static_cast<int>(g);
  if (gi < 0) throw std::out_of_range("a_t index out of range");
  const int row = sl_.cig[gi].omega;
  Mat dA = Mat::Zero(lin.A.rows(), lin.A.cols());
  const double m = a_t(cig_pos);
  if (is_m) {
    // The whole swing row scales as 1/m.
    dA.row(row) = -lin.A.row(row) / m;
  } else {
    dA(row, sl_.cig[gi].omega) = -1.0 / m;
  }
  (void)a_s;
  return dA;
}

Vec Model::solve_algebraic(const Vec& x, const Vec& a_s, const Vec& a_t,
                           const Vec* xi_guess) const {
  Vec xi;
  if (xi_guess) {
    xi = *xi_guess;
  } else {
    xi = Vec::Zero(n_xi());
    for (int i = 0; i < cs_->n_bus(); ++i) xi(al_.v0 + i) = 1.0;
    for (size_t g = 0; g < cs_->generators.size(); ++g)
      xi(al_.pg0 + static_cast<int>(g)) = cs_->generators[g].p_set;
  }
  for (int it = 0; it < 60; ++it) {
    Eval ev;
    ev.want_jac = true;
    assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xi, a_s, a_t, ev);
    const double rn = ev.g.lpNorm<Eigen::Infinity>();
    if (rn < 1e-10) return xi;
    Eigen::PartialPivLU<Mat> lu(ev.gxi);
    Vec dxi = lu.solve(-ev.g);
    if (!dxi.allFinite()) break;
    double alpha = 1.0;
    for (int ls = 0; ls < 10; ++ls) {
      Vec xin = xi + alpha * dxi;
      Eval evn;
      evn.want_jac = false;
      assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xin, a_s, a_t, evn);
      if (evn.g.lpNorm<Eigen::Infinity>() < rn) {
        xi = xin;
        break;
      }
      alpha *= 0.5;
      if (ls == 9) xi = xi + dxi;
    }
  }
  Eval ev;
  ev.want_jac = false;
  assemble(*cs_, z_, sl_, al_, acv_, load_scale_, x, xi, a_s, a_t, ev);
  if (ev.g.lpNorm<Eigen::Infinity>() > 1e-8)
    throw SolveError("algebraic re-solve did not converge");
  return xi;
}

GramianResult solve_lyapunov(const Mat& A, const Mat& Ctil, double margin) {
  GramianResult out;
  if (!is_asymptotically_stable(A, margin)) {
    out.stable = false;
    return out;
  }
  const int n = static_cast<int>(A.rows());
  Eigen::RealSchur<Mat> schur(A);
  const Mat U = schur.matrixU();
  const Mat S = schur.matrixT();
  const Mat F = U.transpose() * (Ctil.transpose() * Ctil) * U;  // S^T X + X S = -F

  // Block partition along the quasi-triangular diagonal.
  std::vector<int> starts, sizes;
  for (int i = 0; i < n;) {
    if (i + 1 < n && std::abs(S(i + 1, i)) > 1e-14 * (1.0 + S.norm())) {
      starts.push_back(i);
      sizes.push_back(2);
      i += 2;
    } else {
      starts.push_back(i);
      sizes.push_back(1);
      ++i;
    }
  }
  const int nb = static_cast<int>(starts.size());
  Mat X = Mat::Zero(n, n);
  for (int bi = 0; bi < nb; ++bi) {
    for (int bj = bi; bj < nb; ++bj) {
      const int i0 = starts[bi], isz = sizes[bi];
      const int j0 = starts[bj], jsz = sizes[bj];
      Mat rhs = -F.block(i0, j0, isz, jsz);
      for (int k = 0; k < bi; ++k)
        rhs -= S.block(starts[k], i0, sizes[k], isz).transpose() *
               X.block(starts[k], j0, sizes[k], jsz);
      for (int k = 0; k < bj; ++k)
        rhs -= X.block(i0, starts[k], isz, sizes[k]) *
               S.block(starts[k], j0, sizes[k], jsz);
      // Solve Sii^T Y + Y Sjj = rhs via vectorization (at most 4x4).
      const Mat Sii = S.block(i0, i0, isz, isz);
      const Mat Sjj = S.block(j0, j0, jsz, jsz);
      Mat K = Mat::Zero(isz * jsz, isz * jsz);
      for (int c = 0; c < jsz; ++c)
        K.block(c * isz, c * isz, isz, isz) += Sii.transpose();
      for (int c = 0; c < jsz; ++c)
        for (int r = 0; r < jsz; ++r)
          K.block(c * isz, r * isz, isz, isz) +=
              Sjj(r, c) * Mat::Identity(isz, isz);
      Vec rv(isz * jsz);
      for (int c = 0; c < jsz; ++c) rv.segment(c * isz, isz) = rhs.col(c);
      Vec yv = K.partialPivLu().solve(rv);
      for (int c = 0; c < jsz; ++c) X.block(i0, j0 + c, isz, 1) = yv.segment(c * isz, isz);
      if (bj != bi)
        X.block(j0, i0, jsz, isz) = X.block(i0, j0, isz, jsz).transpose();
    }
  }
  out.Q = U * X * U.transpose();
  out.Q = 0.5 * (out.Q + out.Q.transpose()).eval();
  out.stable = true;
  return out;
}

double h2_energy(const GramianResult& gram, const Vec& x_delta) {
  if (!gram.stable) throw SolveError("h2_energy requires a stable system");
  return x_delta.dot(gram.Q * x_delta);
}

double impulse_free_equivalence(const Mat& A, const Mat& C, const Vec& x_delta,
                                double horizon) {
  const int n = static_cast<int>(A.rows());
  // Free response via the eigendecomposition, impulse response via RK4 on
  // the state equation started at B*1 = x_delta.
  Eigen::EigenSolver<Mat> es(A);
  const Eigen::MatrixXcd V = es.eigenvectors();
  const Eigen::VectorXcd lam = es.eigenvalues();
  const Eigen::VectorXcd c0 = V.partialPivLu().solve(x_delta.cast<std::complex<double>>());

  // Step count adapts to the fastest dynamics so the RK4 path stays accurate.
  const double anorm = A.cwiseAbs().rowwise().sum().maxCoeff();
  const int steps = std::min(400000, std::max(2000, static_cast<int>(horizon * anorm * 20.0)));
  const double dt = horizon / steps;
  Vec x_im = x_delta;
  double worst = 0.0;
  for (int k = 0; k <= steps; ++k) {
    const double t = k * dt;
    Eigen::VectorXcd xc = V * (lam.array() * t).exp().matrix().asDiagonal() * c0;
    Vec x_fr = xc.real();
    worst = std::max(worst, (C * (x_fr - x_im)).lpNorm<Eigen::Infinity>());
    if (k == steps) break;
    // Classic RK4 step.
    Vec k1 = A * x_im;
    Vec k2 = A * (x_im + 0.5 * dt * k1);
    Vec k3 = A * (x_im + 0.5 * dt * k2);
    Vec k4 = A * (x_im + dt * k3);
    x_im += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  (void)n;
  return worst;
}

bool is_asymptotically_stable(const Mat& A, double margin) {
  Eigen::EigenSolver<Mat> es(A, false);
  if (es.info() != Eigen::Success) throw SolveError("eigensolver failed");
  return es.eigenvalues().real().maxCoeff() < -margin;
}

Mat weighted_output(const Mat& C, const Vec& w_ts) {
  return w_ts.array().sqrt().matrix().asDiagonal() * C;
}

void dump_matrix(const Mat& m, const std::string& path) {
  std::ofstream f(path);
  f.precision(17);
  f << m.rows() << " " << m.cols() << "\n" << m << "\n";
}

}  // namespace btt::dyn
