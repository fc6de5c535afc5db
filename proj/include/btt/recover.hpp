#pragma once

#include "btt/stage1.hpp"

namespace btt::recover {

using netcase::NetworkCase;
using netcase::ScenarioSpec;

/// Episode partition by execution type (0-based episode indices).
struct EpisodePartition {
  std::vector<int> t_as;  // adjustment and switch
  std::vector<int> t_a;   // adjustment only
  std::vector<int> t_s;   // switch only
  std::vector<int> t_aa() const;  // t_as union t_a
  std::vector<int> t_ss() const;  // t_as union t_s
  bool first_slot_added = false;  // episode 1 gained a potential adjustment
};

struct RecoveryOptions {
  double w_ac_heavy = 1e3;  // weight for the inserted first-episode slot
  double w_ac_terminal = 1e3;
  int max_iter = 200;
  double kkt_tol = 1e-7;
  double trust_radius = 0.5;
};

/// Pre-treatment: add an adjustment slot to a switch-only first episode and
/// classify every episode.
std::pair<stage1::TransitionPlan, EpisodePartition> pre_treat(
    const stage1::TransitionPlan& plan);

struct RecoveryResult {
  stage1::TransitionPlan plan;  // provenance Recovered
  // Byproduct exact states per episode (empty entries for episodes without
  // the corresponding point).
  std::vector<acpf::SteadyStateSolution> minus, plus, star;
  std::vector<bool> has_minus, has_switch;
  double objective = 0;
  int iterations = 0;
};

/// Solve the AC-feasibility recovery program for one stage-1 plan. Throws
/// SolveError when the NLP fails to converge (plan rejected from the pool).
RecoveryResult solve_recovery(const NetworkCase& cs, const ScenarioSpec& sc,
                              const stage1::TransitionPlan& plan,
                              const RecoveryOptions& opts = {});

/// Post-treatment: append the terminal pull-back episode when the recovered
/// ACVs end away from their initial values.
stage1::TransitionPlan post_treat(const NetworkCase& cs, const ScenarioSpec& sc,
                                  RecoveryResult& result, double tol = 1e-8);

}  // namespace btt::recover
