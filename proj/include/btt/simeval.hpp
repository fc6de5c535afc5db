#pragma once

#include "btt/bump.hpp"
#include "btt/dyn.hpp"
#include "btt/stage1.hpp"

namespace btt::simeval {

using netcase::NetworkCase;
using netcase::ScenarioSpec;
using netcase::SimConfigSpec;

struct EventMarker {
  enum class Kind { RampStart, RampEnd, Switch, Settle };
  Kind kind;
  double t = 0;
  int episode = 0;
};

struct SimTrace {
  std::vector<double> t;
  Mat y;  // one row per sample
  std::vector<EventMarker> markers;
  bool diverged = false;

  struct Window {
    int episode = 0;
    size_t i_jump = 0;    // first sample at the jumping state
    size_t i_settle = 0;  // first settled sample (or last sample)
    bool settled = false;
    bool has_switch = false;
  };
  std::vector<Window> windows;  // one per episode

  // Steady-state components read off the trace.
  Vec y_star0;
  std::vector<Vec> y_minus, y_star, y_jump;
  double max_balance_residual = 0;
  double max_jump_mismatch = 0;  // trace vs. algebraic jumping state
  std::string failure;
};

SimTrace simulate_transition(const NetworkCase& cs, const ScenarioSpec& sc,
                             const stage1::TransitionPlan& plan,
                             const SimConfigSpec& cfg);

/// Earliest sample index after `from` such that every output stays within
/// eps of the trailing-window mean for the dwell duration; -1 when the trace
/// never settles.
int detect_settling(const Mat& y, const std::vector<double>& t, size_t from,
                    double eps, double dwell);

struct EvaluationReport {
  bump::BumpinessReport report;
  bool stable = false;
  std::vector<std::string> violations;
  bool all_settled = true;
  bool diverged = false;
  double runtime_s = 0;
  SimTrace trace;
};

EvaluationReport evaluate_plan(const NetworkCase& cs, const ScenarioSpec& sc,
                               const stage1::TransitionPlan& plan,
                               const SimConfigSpec& cfg);

/// Index of the minimum-H stable, violation-free report; throws SolveError
/// (suggesting a larger pool) when none qualifies.
int select_best(const std::vector<EvaluationReport>& reports);

/// CSV export of a trace (time and outputs) plus an event-marker sidecar.
void export_csv(const SimTrace& trace, const std::vector<std::string>& labels,
                const std::string& path);

}  // namespace btt::simeval
