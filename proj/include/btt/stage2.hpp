#pragma once

#include "btt/dyn.hpp"
#include "btt/recover.hpp"

namespace btt::stage2 {

using netcase::NetworkCase;
using netcase::ScenarioSpec;

/// Per-switching-episode anchors and jump perturbations for the transient
/// tuning program. Episodes without a switch carry their predecessor's a_t.
struct TuningProblem {
  std::vector<int> episodes;       // plan indices with a switching execution
  std::vector<dyn::Model> models;  // one per switching episode
  std::vector<Vec> x_star, xi_star, x_delta;
  std::vector<Vec> a_s;            // recovered ACVs per switching episode
  Vec at_lo, at_hi, at0;
  Vec w_ts;                        // output weights for the surrogate
};

/// Reconstruct the dynamic jump and anchor states from the recovery
/// byproducts (shared power-flow variables pinned, speeds at their
/// steady-state values).
TuningProblem assemble_states(const NetworkCase& cs, const ScenarioSpec& sc,
                              const stage1::TransitionPlan& plan,
                              const recover::RecoveryResult& byproducts);

struct TuneOptions {
  int max_iter = 60;
  double grad_tol = 1e-6;
  double stability_margin = 1e-6;
  int random_starts = 3;
};

struct TuneResult {
  std::vector<Vec> a_t;        // per switching episode
  std::vector<double> h2;      // per switching episode at the returned a_t
  std::vector<bool> stable;    // per switching episode
  double objective = 0;
  bool all_stable = true;
};

TuneResult tune(const TuningProblem& problem, const ScenarioSpec& sc,
                const TuneOptions& opts = {});

/// Surrogate value and adjoint gradient for one episode at a_t; gradient via
/// the adjoint Lyapunov equation paired with the analytic A-sensitivities.
struct EpisodeEval {
  double value = 0;
  Vec grad;
  bool stable = false;
};
EpisodeEval evaluate_episode(const dyn::Model& model, const Vec& x_star,
                             const Vec& xi_star, const Vec& x_delta, const Vec& a_s,
                             const Vec& a_t, const Vec& w_ts, bool want_grad,
                             double margin = 1e-6);

/// Merge the tuned a_t trajectory into the plan (carry-over on non-switching
/// episodes).
stage1::TransitionPlan merge_tuned(const stage1::TransitionPlan& plan,
                                   const TuningProblem& problem, const TuneResult& result,
                                   const Vec& at0);

}  // namespace btt::stage2
