#include "btt/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace btt::stage2 {

TuningProblem assemble_states(const NetworkCase& cs, const ScenarioSpec& sc,
                              const stage1::TransitionPlan& plan,
                              const recover::RecoveryResult& byproducts) {
  TuningProblem tp;
  const auto lay = netcase::acv_layout(cs);
  tp.at_lo = lay.lower_t();
  tp.at_hi = lay.upper_t();
  tp.at0 = sc.a0_t;
  tp.w_ts = sc.weights.w_ts;
  for (int i = 0; i < plan.T(); ++i) {
    if (i >= static_cast<int>(byproducts.has_switch.size()) || !byproducts.has_switch[i])
      continue;
    dyn::Model model(cs, plan.episodes[i].z, sc.outputs);
    auto [xs, xis] = model.from_acpf(byproducts.star[i]);
    auto [xp, xip] = model.from_acpf(byproducts.plus[i]);
    if (xs.size() != xp.size())
      throw std::invalid_argument("stage2: jump/anchor state dimensions differ");
    tp.episodes.push_back(i);
    tp.models.push_back(std::move(model));
    tp.x_star.push_back(xs);
    tp.xi_star.push_back(xis);
    tp.x_delta.push_back(xp - xs);
    tp.a_s.push_back(plan.episodes[i].a_s);
  }
  return tp;
}

EpisodeEval evaluate_episode(const dyn::Model& model, const Vec& x_star,
                             const Vec& xi_star, const Vec& x_delta, const Vec& a_s,
                             const Vec& a_t, const Vec& w_ts, bool want_grad,
                             double margin) {
  EpisodeEval out;
  auto lin = model.linearize_at(x_star, xi_star, a_s, a_t);
  const Mat ctil = dyn::weighted_output(lin.C, w_ts);
  auto gram = dyn::solve_lyapunov(lin.A, ctil, margin);
  out.stable = gram.stable;
  if (!gram.stable) return out;
  out.value = dyn::h2_energy(gram, x_delta);
  if (!want_grad) return out;
  // Adjoint: A P + P A' = -x_delta x_delta', i.e. the Lyapunov solve on A'.
  Mat d_row = x_delta.transpose();
  auto adj = dyn::solve_lyapunov(lin.A.transpose(), d_row, margin);
  const Mat QP = gram.Q * adj.Q;
  out.grad.setZero(a_t.size());
  for (int k = 0; k < a_t.size(); ++k) {
    Mat dA = model.dA_dat(lin, a_s, a_t, k);
    out.grad(k) = 2.0 * (dA.array() * QP.array()).sum();
  }
  return out;
}

namespace {

Vec project(const Vec& v, const Vec& lo, const Vec& hi) {
  return v.cwiseMax(lo).cwiseMin(hi);
}

// Projected gradient descent with backtracking; small dimension makes a
// quasi-Newton update unnecessary in practice, but we accelerate with a
// Barzilai-Borwein step length.
struct LocalResult {
  Vec a;
  double value = std::numeric_limits<double>::infinity();
  bool stable = false;
};

LocalResult minimize_episode(const dyn::Model& model, const Vec& x_star,
                             const Vec& xi_star, const Vec& x_delta, const Vec& a_s,
                             const Vec& w_ts, Vec a, const Vec& lo, const Vec& hi,
                             const TuneOptions& opts) {
  LocalResult res;
  a = project(a, lo, hi);
  auto ev = evaluate_episode(model, x_star, xi_star, x_delta, a_s, a, w_ts, true,
                             opts.stability_margin);
  if (!ev.stable) return res;
  double f = ev.value;
  Vec g = ev.grad;
  double step = 0.1;
  Vec a_prev = a, g_prev = g;
  for (int it = 0; it < opts.max_iter; ++it) {
    const Vec pg = a - project(a - g, lo, hi);
    if (pg.lpNorm<Eigen::Infinity>() < opts.grad_tol * (1.0 + std::abs(f))) break;
    bool moved = false;
    for (int ls = 0; ls < 20; ++ls) {
      Vec cand = project(a - step * g, lo, hi);
      if ((cand - a).lpNorm<Eigen::Infinity>() < 1e-14) break;
      auto ec = evaluate_episode(model, x_star, xi_star, x_delta, a_s, cand, w_ts, true,
                                 opts.stability_margin);
      if (ec.stable && ec.value < f - 1e-14) {
        a_prev = a;
        g_prev = g;
        a = cand;
        f = ec.value;
        g = ec.grad;
        moved = true;
        // Barzilai-Borwein step for the next round.
        const Vec sv = a - a_prev;
        const Vec yv = g - g_prev;
        const double sy = sv.dot(yv);
        step = sy > 1e-14 ? sv.squaredNorm() / sy : step * 2.0;
        step = std::clamp(step, 1e-6, 1e3);
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
  }
  res.a = a;
  res.value = f;
  res.stable = true;
  return res;
}

}  // namespace

TuneResult tune(const TuningProblem& tp, const ScenarioSpec& sc, const TuneOptions& opts) {
  TuneResult out;
  const int n_ep = static_cast<int>(tp.episodes.size());
  out.a_t.resize(n_ep);
  out.h2.assign(n_ep, 0.0);
  out.stable.assign(n_ep, false);
  std::mt19937 rng(sc.seed + 77);

  for (int e = 0; e < n_ep; ++e) {
    const auto& model = tp.models[e];
    // No jump means any stable setting works; take the box midpoint.
    if (tp.x_delta[e].lpNorm<Eigen::Infinity>() < 1e-12) {
      out.a_t[e] = 0.5 * (tp.at_lo + tp.at_hi);
      auto ev = evaluate_episode(model, tp.x_star[e], tp.xi_star[e], tp.x_delta[e],
                                 tp.a_s[e], out.a_t[e], tp.w_ts, false,
                                 opts.stability_margin);
      out.h2[e] = ev.stable ? ev.value : 0.0;
      out.stable[e] = ev.stable;
      if (!ev.stable) out.all_stable = false;
      continue;
    }
    std::vector<Vec> starts;
    starts.push_back(0.5 * (tp.at_lo + tp.at_hi));
    starts.push_back(project(tp.at0, tp.at_lo, tp.at_hi));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int r = 0; r < opts.random_starts; ++r) {
      Vec s(tp.at_lo.size());
      for (int k = 0; k < s.size(); ++k)
        s(k) = tp.at_lo(k) + u(rng) * (tp.at_hi(k) - tp.at_lo(k));
      starts.push_back(s);
    }
    LocalResult best;
    for (const auto& s0 : starts) {
      auto res = minimize_episode(model, tp.x_star[e], tp.xi_star[e], tp.x_delta[e],
                                  tp.a_s[e], tp.w_ts, s0, tp.at_lo, tp.at_hi, opts);
      if (res.stable && res.value < best.value) best = res;
    }
    if (!best.stable) {
      out.stable[e] = false;
      out.all_stable = false;
      out.a_t[e] = project(tp.at0, tp.at_lo, tp.at_hi);
      continue;
    }
    out.a_t[e] = best.a;
    out.h2[e] = best.value;
    out.stable[e] = true;
    out.objective += best.value;
  }
  return out;
}

stage1::TransitionPlan merge_tuned(const stage1::TransitionPlan& plan,
                                   const TuningProblem& tp, const TuneResult& result,
                                   const Vec& at0) {
  stage1::TransitionPlan out = plan;
  Vec current = at0;
  size_t pos = 0;
  for (int i = 0; i < out.T(); ++i) {
    if (pos < tp.episodes.size() && tp.episodes[pos] == i) {
      current = result.a_t[pos];
      ++pos;
    }
    out.episodes[i].a_t = current;
  }
  out.provenance = stage1::Provenance::Tuned;
  return out;
}

}  // namespace btt::stage2
