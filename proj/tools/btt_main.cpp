#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "btt/pipeline.hpp"
#include "btt/plancheck.hpp"

using namespace btt;

namespace {

int run_cmd(const std::string& case_path, const std::string& scenario_path,
            const std::string& mode, int pool, double gap, unsigned seed,
            const std::string& out_dir, bool emit_plots, bool freeze_acv, bool maximize,
            int node_limit, double time_limit, const std::string& lp_out,
            const std::string& lp_sol) {
  auto cs = netcase::load_case(case_path);
  auto sc = netcase::load_scenario(scenario_path, cs);
  if (pool > 0) sc.pool = pool;
  if (gap >= 0) sc.gap = gap;
  sc.seed = seed;
  if (freeze_acv) sc.freeze_acv = true;
  if (maximize) sc.maximize = true;

  if (mode == "export") {
    auto prog = stage1::build_program(cs, sc);
    stage1::SolveOptions sopts;
    sopts.mode = stage1::SolveMode::Export;
    sopts.export_path = lp_out.empty() ? "program.lp" : lp_out;
    sopts.import_solution = lp_sol;
    auto pool_out = stage1::solve(cs, sc, prog, sopts);
    std::printf("wrote %s\n", sopts.export_path.c_str());
    if (lp_sol.empty()) {
      std::printf(
          "solve it externally, then rerun with --import <file> holding lines of\n"
          "\"<variable name> <value>\" to ingest the solution.\n");
    } else if (!pool_out.plans.empty()) {
      std::printf("imported plan with %d episodes, objective %.6f\n",
                  pool_out.plans[0].T(), pool_out.plans[0].objective);
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        pipeline::save_plan(out_dir + "/imported.json", cs, pool_out.plans[0]);
      }
    }
    return 0;
  }

  pipeline::PipelineOptions popts;
  popts.mode = mode == "enumerate" ? stage1::SolveMode::Enumerate
                                   : stage1::SolveMode::BranchAndBound;
  popts.node_limit = node_limit;
  popts.stage1_time_s = time_limit;
  popts.emit_plots = emit_plots;
  auto run = pipeline::run_pipeline(cs, sc, popts);
  std::cout << pipeline::summary_table(run);
  if (!out_dir.empty()) {
    pipeline::write_run_directory(cs, sc, run, out_dir, emit_plots);
    std::printf("artifacts in %s\n", out_dir.c_str());
  }
  if (run.selected < 0) return 3;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bumpless topology transition planner"};
  app.require_subcommand(1);

  std::string case_path, scenario_path, plan_path, out_dir, lp_out, lp_sol;
  std::string mode = "bnb";
  int pool = -1;
  double gap = -1;
  unsigned seed = 1;
  bool emit_plots = false, freeze_acv = false, maximize = false;
  int node_limit = 2000;
  double time_limit = 120.0;

  auto* runc = app.add_subcommand("run", "run the full planning pipeline");
  runc->add_option("--case", case_path, "network case file")->required();
  runc->add_option("--scenario", scenario_path, "transition scenario file")->required();
  runc->add_option("--mode", mode, "enumerate | bnb | export")->default_val("bnb");
  runc->add_option("--pool", pool, "number of pool plans (n_s)");
  runc->add_option("--gap", gap, "pool objective gap");
  runc->add_option("--seed", seed, "deterministic seed")->default_val(1);
  runc->add_option("--out", out_dir, "run directory for artifacts");
  runc->add_flag("--emit-plots", emit_plots, "write trace CSVs");
  runc->add_flag("--freeze-acv", freeze_acv, "disable ACV adjustment (scheme S2/S4)");
  runc->add_flag("--maximize", maximize, "select the bumpiest feasible scheme (S4)");
  runc->add_option("--node-limit", node_limit, "search node budget")->default_val(2000);
  runc->add_option("--time-limit", time_limit, "stage-1 time budget in seconds")
      ->default_val(120.0);
  runc->add_option("--lp-out", lp_out, "LP export destination (mode=export)");
  runc->add_option("--import", lp_sol, "external solution file (mode=export)");

  auto* evalc = app.add_subcommand("evaluate", "simulate and score a plan file");
  evalc->add_option("--case", case_path, "network case file")->required();
  evalc->add_option("--scenario", scenario_path, "transition scenario file")->required();
  evalc->add_option("--plan", plan_path, "plan file to evaluate")->required();
  evalc->add_option("--out", out_dir, "directory for the report and trace");
  evalc->add_flag("--emit-plots", emit_plots, "write trace CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (runc->parsed()) {
      return run_cmd(case_path, scenario_path, mode, pool, gap, seed, out_dir, emit_plots,
                     freeze_acv, maximize, node_limit, time_limit, lp_out, lp_sol);
    }
    if (evalc->parsed()) {
      auto cs = netcase::load_case(case_path);
      auto sc = netcase::load_scenario(scenario_path, cs);
      auto plan = pipeline::load_plan(plan_path, cs);
      auto rep = pipeline::evaluate_only(cs, sc, plan);
      std::printf("H      %.6f\nH_bd   %.6f\nH_vl   %.6f\nH_ts   %.6f\nstable %s\n",
                  rep.report.H, rep.report.H_bd, rep.report.H_vl, rep.report.H_ts,
                  rep.stable ? "yes" : "no");
      for (const auto& v : rep.violations) std::printf("violation: %s\n", v.c_str());
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/evaluation.txt");
        f << strf("H %.9f\nH_bd %.9f\nH_vl %.9f\nH_ts %.9f\nstable %d\n", rep.report.H,
                  rep.report.H_bd, rep.report.H_vl, rep.report.H_ts, rep.stable ? 1 : 0);
        if (emit_plots) {
          std::vector<std::string> labels;
          for (const auto& o : sc.outputs) labels.push_back(o.label());
          simeval::export_csv(rep.trace, labels, out_dir + "/trace.csv");
        }
      }
      return rep.stable && rep.violations.empty() ? 0 : 3;
    }
  } catch (const ParseError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 4;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 4;
  } catch (const SolveError& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    const std::string what = e.what();
    return what.find("stable") != std::string::npos ? 3 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
