#include "btt/simeval.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "btt/acpf.hpp"
#include "btt/plancheck.hpp"

namespace btt::simeval {

namespace {

// Implicit trapezoidal step on the semi-explicit DAE with a simultaneous
// algebraic solve. Returns false when the Newton iteration fails.
bool trap_step(const dyn::Model& model, double h, Vec& x, Vec& xi, const Vec& a_s0,
               const Vec& a_t0, const Vec& a_s1, const Vec& a_t1) {
  const int nx = model.n_x(), nxi = model.n_xi();
  const Vec f0 = model.f(x, xi, a_s0, a_t0);
  Vec xn = x + h * f0;  // explicit predictor
  Vec xin = xi;
  for (int it = 0; it < 12; ++it) {
    const Vec f1 = model.f(xn, xin, a_s1, a_t1);
    const Vec g1 = model.g(xn, xin, a_s1, a_t1);
    Vec rx = xn - x - 0.5 * h * (f0 + f1);
    const double rn = std::max(rx.lpNorm<Eigen::Infinity>(), g1.lpNorm<Eigen::Infinity>());
    if (rn < 1e-10) {
      x = xn;
      xi = xin;
      return true;
    }
    auto J = model.jacobians(xn, xin, a_s1, a_t1);
    Mat K(nx + nxi, nx + nxi);
    K.topLeftCorner(nx, nx) = Mat::Identity(nx, nx) - 0.5 * h * J.fx;
    K.topRightCorner(nx, nxi) = -0.5 * h * J.fxi;
    K.bottomLeftCorner(nxi, nx) = J.gx;
    K.bottomRightCorner(nxi, nxi) = J.gxi;
    Vec rhs(nx + nxi);
    rhs.head(nx) = -rx;
    rhs.tail(nxi) = -g1;
    Eigen::PartialPivLU<Mat> lu(K);
    Vec d = lu.solve(rhs);
    if (!d.allFinite()) return false;
    xn += d.head(nx);
    xin += d.tail(nxi);
    if (xn.lpNorm<Eigen::Infinity>() > 1e4) return false;
  }
  const Vec g1 = model.g(xn, xin, a_s1, a_t1);
  if (g1.lpNorm<Eigen::Infinity>() > 1e-8) return false;
  x = xn;
  xi = xin;
  return true;
}

struct Recorder {
  SimTrace& tr;
  const dyn::Model* model = nullptr;
  int ny;

  void push(double t, const Vec& x, const Vec& xi) {
    tr.t.push_back(t);
    const Vec yv = model->h(x, xi);
    tr.y.conservativeResize(static_cast<int>(tr.t.size()), ny);
    tr.y.row(static_cast<int>(tr.t.size()) - 1) = yv.transpose();
  }
};

}  // namespace

int detect_settling(const Mat& y, const std::vector<double>& t, size_t from, double eps,
                    double dwell) {
  const int n = static_cast<int>(t.size());
  for (int s = static_cast<int>(from); s < n; ++s) {
    // Find the window end covering the dwell.
    int e = s;
    while (e < n && t[e] - t[s] < dwell) ++e;
    if (e >= n) return -1;  // not enough trace left to certify
    Vec mean = Vec::Zero(y.cols());
    for (int k = s; k <= e; ++k) mean += y.row(k).transpose();
    mean /= static_cast<double>(e - s + 1);
    bool ok = true;
    for (int k = s; k <= e && ok; ++k)
      if (((y.row(k).transpose() - mean).cwiseAbs().maxCoeff()) > eps) ok = false;
    if (ok) return s;
  }
  return -1;
}

SimTrace simulate_transition(const NetworkCase& cs, const ScenarioSpec& sc,
                             const stage1::TransitionPlan& plan,
                             const SimConfigSpec& cfg) {
  SimTrace tr;
  const int ny = static_cast<int>(sc.outputs.size());
  tr.y.resize(0, ny);

  // Initial steady state.
  auto sol0 = acpf::solve_steady_state(cs, sc.z0, sc.a0_s, acpf::SsMode::PostAdjustment);
  tr.y_star0 = acpf::output_vector(cs, sc.outputs, sol0);

  dyn::Model model(cs, sc.z0, sc.outputs);
  auto [x, xi] = model.from_acpf(sol0);
  Vec a_s = sc.a0_s, a_t = sc.a0_t;
  double tnow = 0.0;
  Recorder rec{tr, &model, ny};
  rec.push(tnow, x, xi);

  auto track_balance = [&](const Vec& xv, const Vec& xiv, const Vec& as, const Vec& at) {
    const Vec g = model.g(xv, xiv, as, at);
    tr.max_balance_residual =
        std::max(tr.max_balance_residual, g.lpNorm<Eigen::Infinity>());
  };

  auto integrate_until_settled = [&](double horizon, const Vec& as_target,
                                     const Vec& at_target, double ramp_dur) -> bool {
    const Vec as_from = a_s, at_from = a_t;
    const double t_start = tnow;
    size_t seg_start = tr.t.size() - 1;
    double t_end = tnow + horizon;
    int check_counter = 0;
    while (tnow < t_end - 1e-12) {
      const double h = std::min(cfg.h, t_end - tnow);
      auto interp = [&](double tt) -> std::pair<Vec, Vec> {
        if (ramp_dur <= 0 || tt >= t_start + ramp_dur) return {as_target, at_target};
        const double w = (tt - t_start) / ramp_dur;
        return {(1 - w) * as_from + w * as_target, (1 - w) * at_from + w * at_target};
      };
      auto [as0, at0] = interp(tnow);
      auto [as1, at1] = interp(tnow + h);
      if (!trap_step(model, h, x, xi, as0, at0, as1, at1)) {
        tr.diverged = true;
        tr.failure = strf("integration failed at t=%.3f", tnow);
        return false;
      }
      tnow += h;
      rec.push(tnow, x, xi);
      if (++check_counter % 20 == 0) track_balance(x, xi, as1, at1);
      // Settle check only after the ramp completed and a dwell has elapsed.
      if (tnow > t_start + ramp_dur + cfg.dwell_s && check_counter % 10 == 0) {
        const size_t dwell_samps = static_cast<size_t>(cfg.dwell_s / cfg.h) + 2;
        const size_t from =
            tr.t.size() > dwell_samps ? std::max(seg_start, tr.t.size() - dwell_samps)
                                      : seg_start;
        if (detect_settling(tr.y, tr.t, from, cfg.eps_settle, cfg.dwell_s) >= 0)
          return true;
      }
    }
    // Horizon exhausted: settled only if the tail qualifies.
    const size_t dwell_samps = static_cast<size_t>(cfg.dwell_s / cfg.h) + 2;
    const size_t from =
        tr.t.size() > dwell_samps ? std::max(seg_start, tr.t.size() - dwell_samps)
                                  : seg_start;
    return detect_settling(tr.y, tr.t, from, cfg.eps_settle, cfg.dwell_s) >= 0;
  };

  auto window_mean = [&](size_t upto) {
    const size_t span = std::min<size_t>(static_cast<size_t>(cfg.dwell_s / cfg.h), upto);
    Vec m = Vec::Zero(ny);
    for (size_t k = upto - span; k <= upto; ++k) m += tr.y.row(static_cast<int>(k)).transpose();
    return (m / static_cast<double>(span + 1)).eval();
  };

  netcase::TopologyVector zcur = sc.z0;
  for (int i = 0; i < plan.T(); ++i) {
    const auto& ep = plan.episodes[i];
    SimTrace::Window win;
    win.episode = i;

    // Adjustment phase: smooth ramp to the episode's ACVs, then settle.
    const bool adjusting =
        (ep.a_s - a_s).lpNorm<Eigen::Infinity>() > 1e-12 ||
        (ep.a_t - a_t).lpNorm<Eigen::Infinity>() > 1e-12;
    tr.markers.push_back({EventMarker::Kind::RampStart, tnow, i});
    if (adjusting) {
      const bool settled =
          integrate_until_settled(cfg.ramp_s + cfg.horizon_s, ep.a_s, ep.a_t, cfg.ramp_s);
      a_s = ep.a_s;
      a_t = ep.a_t;
      if (tr.diverged) {
        tr.windows.push_back(win);
        return tr;
      }
      if (!settled) tr.failure = strf("episode %d: adjustment never settled", i + 1);
    }
    tr.markers.push_back({EventMarker::Kind::RampEnd, tnow, i});
    tr.y_minus.push_back(window_mean(tr.t.size() - 1));

    const bool switching = netcase::topology_distance(zcur, ep.z) > 0;
    win.has_switch = switching;
    if (switching) {
      // Switching instant: rebuild the model at the new topology and re-solve
      // the algebra with the dynamic states held.
      dyn::Model next(cs, ep.z, sc.outputs);
      Vec xi_guess = xi;
      Vec xi_new;
      try {
        xi_new = next.solve_algebraic(x, a_s, a_t, &xi_guess);
      } catch (const SolveError& e) {
        tr.diverged = true;
        tr.failure = strf("episode %d: jumping state does not exist (%s)", i + 1, e.what());
        tr.windows.push_back(win);
        return tr;
      }
      model = std::move(next);
      rec.model = &model;
      xi = xi_new;
      zcur = ep.z;
      tr.markers.push_back({EventMarker::Kind::Switch, tnow, i});
      win.i_jump = tr.t.size();
      rec.push(tnow, x, xi);
      tr.y_jump.push_back(model.h(x, xi));

      // Cross-check: the algebraic re-solve must agree with the power-flow
      // jumping state computed from the same frozen values.
      try {
        acpf::FrozenVars frz;
        const auto& sl = model.states();
        std::vector<double> e_, de_, es_, des_, vm_, thm_, em_, dem_, bs_, vs_, ths_;
        for (size_t g = 0; g < cs.generators.size(); ++g) {
          if (cs.generators[g].kind == netcase::GenKind::Sg) {
            e_.push_back(x(sl.sg[g].efd));
            de_.push_back(static_cast<int>(g) == sl.ref_gen ? 0.0 : x(sl.sg[g].delta));
            es_.push_back(x(sl.sg[g].es));
            des_.push_back(x(sl.sg[g].des));
          } else {
            vm_.push_back(x(sl.cig[g].vm));
            thm_.push_back(x(sl.cig[g].thm));
          }
        }
        for (size_t l = 0; l < cs.loads.size(); ++l) {
          if (!cs.loads[l].has_im()) continue;
          em_.push_back(std::hypot(x(sl.im[l].ex), x(sl.im[l].ey)));
          dem_.push_back(std::atan2(x(sl.im[l].ey), x(sl.im[l].ex)));
        }
        for (size_t d = 0; d < cs.dvcs.size(); ++d) {
          if (cs.dvcs[d].kind == netcase::DvcKind::Svc) bs_.push_back(x(sl.dvc[d].b));
          else {
            vs_.push_back(x(sl.dvc[d].vs));
            ths_.push_back(x(sl.dvc[d].ths));
          }
        }
        auto tov = [](const std::vector<double>& v) {
          return Eigen::Map<const Vec>(v.data(), static_cast<int>(v.size())).eval();
        };
        frz.e = tov(e_); frz.de = tov(de_); frz.es = tov(es_); frz.des = tov(des_);
        frz.vm = tov(vm_); frz.thm = tov(thm_);
        frz.em = tov(em_); frz.dem = tov(dem_);
        frz.bsvc = tov(bs_); frz.vs = tov(vs_); frz.ths = tov(ths_);
        const auto lay = netcase::acv_layout(cs);
        frz.b_tcsc.resize(lay.tcsc_count);
        for (int k = 0; k < lay.tcsc_count; ++k)
          frz.b_tcsc(k) = a_s(lay.tcsc_offset + k);
        auto jpf = acpf::jumping_state(cs, ep.z, a_s, frz);
        double mism = 0;
        const auto& al = model.alg();
        for (int b = 0; b < cs.n_bus(); ++b) {
          mism = std::max(mism, std::abs(xi(al.v0 + b) - jpf.v(b)));
          mism = std::max(mism, std::abs(xi(al.th0 + b) - jpf.th(b)));
        }
        for (size_t g = 0; g < cs.generators.size(); ++g)
          mism = std::max(mism, std::abs(xi(al.pg0 + static_cast<int>(g)) - jpf.pg(g)));
        tr.max_jump_mismatch = std::max(tr.max_jump_mismatch, mism);
      } catch (const SolveError&) {
        tr.max_jump_mismatch = std::max(tr.max_jump_mismatch, 1.0);
      }

      const bool settled = integrate_until_settled(cfg.horizon_s, a_s, a_t, 0.0);
      if (tr.diverged) {
        tr.windows.push_back(win);
        return tr;
      }
      win.settled = settled;
      win.i_settle = tr.t.size() - 1;
      if (settled) tr.markers.push_back({EventMarker::Kind::Settle, tnow, i});
      else if (tr.failure.empty())
        tr.failure = strf("episode %d: post-switching window never settled", i + 1);
    } else {
      tr.y_jump.push_back(tr.y_minus.back());
      win.i_jump = tr.t.size() - 1;
      win.i_settle = tr.t.size() - 1;
      win.settled = true;
    }
    tr.y_star.push_back(window_mean(tr.t.size() - 1));
    tr.windows.push_back(win);
  }
  return tr;
}

EvaluationReport evaluate_plan(const NetworkCase& cs, const ScenarioSpec& sc,
                               const stage1::TransitionPlan& plan,
                               const SimConfigSpec& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  EvaluationReport rep;
  rep.trace = simulate_transition(cs, sc, plan, cfg);
  const auto& tr = rep.trace;
  rep.diverged = tr.diverged;

  if (!tr.diverged && plan.T() > 0) {
    // Exact transient component per switching window.
    std::vector<bump::EpisodeTrace> etr;
    std::vector<Vec> ystars;
    std::vector<double> ts_per_ep(plan.T(), 0.0);
    for (const auto& win : tr.windows) {
      if (!win.has_switch) continue;
      bump::EpisodeTrace e;
      const int n = static_cast<int>(win.i_settle - win.i_jump + 1);
      e.t.resize(n);
      e.y.resize(n, tr.y.cols());
      for (int k = 0; k < n; ++k) {
        e.t(k) = tr.t[win.i_jump + k];
        e.y.row(k) = tr.y.row(static_cast<int>(win.i_jump) + k);
      }
      etr.push_back(std::move(e));
      ystars.push_back(tr.y_star[win.episode]);
      if (!win.settled) rep.all_settled = false;
    }
    std::vector<double> per_win;
    const double hts = bump::h_ts_exact(etr, ystars, sc.weights.w_ts, &per_win);
    size_t wi = 0;
    for (const auto& win : tr.windows)
      if (win.has_switch) ts_per_ep[win.episode] = per_win[wi++];

    bump::SsTrajectory traj;
    traj.y_star_0 = tr.y_star0;
    traj.y_minus = tr.y_minus;
    traj.y_star = tr.y_star;
    for (const auto& ep : plan.episodes) {
      traj.real_adjust.push_back(ep.flags.adjust);
      traj.real_switch.push_back(ep.flags.sw);
    }
    auto region = bump::optimal_region(tr.y_star0, tr.y_star.back());
    rep.report = bump::assemble_report(traj, region, sc.weights.w_bd_l, sc.weights.w_bd_u,
                                       sc.weights.w_vl, hts, bump::TsSource::Exact,
                                       ts_per_ep);
  }

  // Constraint audit on exact operating points plus per-episode spectra.
  rep.violations = plancheck::operational_audit(cs, sc, plan, 1e-6);
  bool hurwitz = true;
  try {
    for (int i = 0; i < plan.T(); ++i) {
      const auto& ep = plan.episodes[i];
      auto ss = acpf::solve_steady_state(cs, ep.z, ep.a_s, acpf::SsMode::PostSwitching);
      dyn::Model m(cs, ep.z, sc.outputs);
      auto [xs, xis] = m.from_acpf(ss);
      auto lin = m.linearize_at(xs, xis, ep.a_s, ep.a_t);
      if (!dyn::is_asymptotically_stable(lin.A)) {
        hurwitz = false;
        rep.violations.push_back(strf("episode %d: linearization is not Hurwitz", i + 1));
      }
    }
  } catch (const SolveError& e) {
    hurwitz = false;
    rep.violations.push_back(e.what());
  }
  rep.stable = !tr.diverged && rep.all_settled && hurwitz;
  if (!tr.failure.empty()) rep.violations.push_back(tr.failure);
  rep.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

int select_best(const std::vector<EvaluationReport>& reports) {
  int best = -1;
  for (size_t j = 0; j < reports.size(); ++j) {
    const auto& r = reports[j];
    if (!r.stable || !r.violations.empty()) continue;
    if (best < 0 || r.report.H < reports[best].report.H) best = static_cast<int>(j);
  }
  if (best < 0)
    throw SolveError(
        "no stable, constraint-clean plan in the pool; rerun with a larger pool (n_s)");
  return best;
}

void export_csv(const SimTrace& trace, const std::vector<std::string>& labels,
                const std::string& path) {
  std::ofstream f(path);
  f << "t";
  for (const auto& l : labels) f << "," << l;
  f << "\n";
  f.precision(10);
  for (size_t k = 0; k < trace.t.size(); ++k) {
    f << trace.t[k];
    for (int c = 0; c < trace.y.cols(); ++c) f << "," << trace.y(static_cast<int>(k), c);
    f << "\n";
  }
  std::ofstream m(path + ".events");
  for (const auto& ev : trace.markers) {
    const char* k = ev.kind == EventMarker::Kind::RampStart
                        ? "ramp_start"
                        : ev.kind == EventMarker::Kind::RampEnd
                              ? "ramp_end"
                              : ev.kind == EventMarker::Kind::Switch ? "switch" : "settle";
    m << ev.t << "," << k << "," << (ev.episode + 1) << "\n";
  }
}

}  // namespace btt::simeval
