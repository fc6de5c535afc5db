#pragma once

#include "btt/recover.hpp"
#include "btt/simeval.hpp"
#include "btt/stage2.hpp"

namespace btt::pipeline {

using netcase::NetworkCase;
using netcase::ScenarioSpec;

struct StageTiming {
  double stage1 = 0, recover = 0, stage2 = 0, simeval = 0, total = 0;
};

struct PlanOutcome {
  stage1::TransitionPlan stage1_plan;
  stage1::TransitionPlan recovered_plan;
  stage1::TransitionPlan tuned_plan;
  simeval::EvaluationReport report;
  bool viable = false;      // survived recovery and tuning
  std::string failure;
};

struct PipelineRun {
  stage1::SolutionPool pool;
  std::vector<PlanOutcome> outcomes;
  int selected = -1;  // index into outcomes
  StageTiming timing;
  bool stage1_complete = true;
};

struct PipelineOptions {
  stage1::SolveMode mode = stage1::SolveMode::BranchAndBound;
  int node_limit = 2000;
  double stage1_time_s = 120.0;
  int workers = 2;
  bool emit_plots = false;
  std::string out_dir;
};

PipelineRun run_pipeline(const NetworkCase& cs, const ScenarioSpec& sc,
                         const PipelineOptions& opts);

/// Validate and score an externally authored plan (the scheme-comparison
/// workflow); throws on plan-invariant violations.
simeval::EvaluationReport evaluate_only(const NetworkCase& cs, const ScenarioSpec& sc,
                                        const stage1::TransitionPlan& plan);

void save_plan(const std::string& path, const NetworkCase& cs,
               const stage1::TransitionPlan& plan);
stage1::TransitionPlan load_plan(const std::string& path, const NetworkCase& cs);

/// Versioned run-directory layout with stage artifacts and a manifest.
void write_run_directory(const NetworkCase& cs, const ScenarioSpec& sc,
                         const PipelineRun& run, const std::string& dir,
                         bool emit_plots);

/// Fixed-layout summary (per-scheme metric components and stage timings).
std::string summary_table(const PipelineRun& run);

}  // namespace btt::pipeline
