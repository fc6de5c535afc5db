#pragma once

#include <functional>
#include <optional>

#include "btt/acpf.hpp"
#include "btt/linpf.hpp"
#include "btt/netcase.hpp"

namespace btt::stage1 {

using netcase::NetworkCase;
using netcase::ScenarioSpec;
using netcase::TopologyVector;

struct EpisodeFlags {
  bool adjust = false;  // zeta: ACVs adjusted
  bool sw = false;      // zeta-tilde: a line switched
  bool real() const { return adjust || sw; }
};

struct Episode {
  TopologyVector z;
  Vec a_s;
  Vec a_t;  // filled by the second stage
  EpisodeFlags flags;
  int switched_branch = -1;  // convenience: which line changed (-1 none)
};

enum class Provenance { Stage1, Recovered, Tuned };

struct TransitionPlan {
  std::vector<Episode> episodes;
  Provenance provenance = Provenance::Stage1;
  double objective = 0;  // H' + delta_pen * sum(zeta)
  double h_bd = 0, h_vl = 0, h_ts_sur = 0;

  int T() const { return static_cast<int>(episodes.size()); }
  std::string sequence_key() const;  // distinctness key: z-sequence + flags
};

struct SolutionPool {
  std::vector<TransitionPlan> plans;  // sorted by objective
  bool complete = true;               // false when a node/time limit tripped
};

int compute_TU(const TopologyVector& z0, const TopologyVector& zT,
               const netcase::BudgetSpec& budget);

/// Variable handles for one episode of the built program.
struct EpisodeVars {
  std::vector<linpf::ZRef> z;
  int zeta = -1, ztil = -1, zprime = -1;
  std::vector<int> a_s;
  std::vector<int> sw;  // per-branch switch indicators (-1 for non-switchable)
  linpf::PointVars minus, plus, star;
  std::vector<linpf::TcscEncoding> tcsc;
};

struct Program {
  linpf::ConstraintSystem sys;
  std::vector<EpisodeVars> eps;
  int t_upper = 0;
  Vec ahat0;             // repaired terminal ACV target
  Vec y_star0, y_starT;  // endpoint outputs from exact solves
  Vec yL, yU;            // optimal region
  linpf::VoltageProfile vprofile;
  std::vector<int> branch_priority;  // deterministic branching order
  std::vector<int> t_bd_vars, t_vl_vars, t_ts_vars;  // objective epigraphs
  double vl_offset = 0.0;

  /// Read a plan out of a solved relaxation point (binaries near-integral).
  TransitionPlan extract_plan(const NetworkCase& cs, const ScenarioSpec& sc,
                              const Vec& x) const;
};

/// Full first-stage MISOCP per the composite formulation.
Program build_program(const NetworkCase& cs, const ScenarioSpec& sc);

enum class SolveMode { Enumerate, BranchAndBound, Export };

struct SolveOptions {
  SolveMode mode = SolveMode::BranchAndBound;
  int node_limit = 50000;
  double time_limit_s = 600.0;
  std::string export_path;       // Export mode: LP file destination
  std::string import_solution;   // Export mode: externally produced values
};

SolutionPool solve(const NetworkCase& cs, const ScenarioSpec& sc, Program& prog,
                   const SolveOptions& opts);

/// Remove trailing fictitious episodes; interior ones indicate a solver bug.
TransitionPlan post_treat(TransitionPlan raw);

/// Exact surrogate evaluation of a frozen-ACV plan through the nonlinear
/// power flow; returns nullopt when some operating point is infeasible.
struct ExactEval {
  double objective = 0, h_bd = 0, h_vl = 0, h_ts = 0;
  std::vector<acpf::SteadyStateSolution> minus, plus, star;
};
std::optional<ExactEval> evaluate_frozen_sequence(const NetworkCase& cs,
                                                  const ScenarioSpec& sc,
                                                  const std::vector<Episode>& episodes,
                                                  const Vec& y_star0, const Vec& y_starT);

}  // namespace btt::stage1
