#pragma once

#include "btt/stage1.hpp"

namespace btt::plancheck {

/// Independent structural audit of a transition plan: connectedness at every
/// episode, single-switch, non-participation, budget, terminal conditions,
/// ACV bounds and per-episode adjustment caps. Deliberately avoids the
/// optimizer's own machinery.
std::vector<std::string> structural_audit(const netcase::NetworkCase& cs,
                                          const netcase::ScenarioSpec& sc,
                                          const stage1::TransitionPlan& plan);

/// Operational audit on exact power-flow solutions: voltage band, reactive
/// and apparent-power limits, branch thermal and angle limits, and RSI bounds
/// at every switching instant.
std::vector<std::string> operational_audit(const netcase::NetworkCase& cs,
                                           const netcase::ScenarioSpec& sc,
                                           const stage1::TransitionPlan& plan,
                                           double tol = 1e-6);

/// Steady-state limit violations for one solved operating point.
std::vector<std::string> point_limit_violations(const netcase::NetworkCase& cs,
                                                const acpf::SteadyStateSolution& sol,
                                                const netcase::TopologyVector& z,
                                                double tol);

/// RSI violations across one switching instant.
std::vector<std::string> rsi_violations(const netcase::NetworkCase& cs,
                                        const acpf::SteadyStateSolution& pre,
                                        const acpf::SteadyStateSolution& jump,
                                        double tol);

}  // namespace btt::plancheck
