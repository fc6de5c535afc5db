#include "btt/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "btt/plancheck.hpp"
#include "json.hpp"

namespace btt::pipeline {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

PipelineRun run_pipeline(const NetworkCase& cs, const ScenarioSpec& sc,
                         const PipelineOptions& opts) {
  PipelineRun run;
  const auto t_total = std::chrono::steady_clock::now();

  // Stage 1: sequencing and steady-state ACVs.
  auto t0 = std::chrono::steady_clock::now();
  auto prog = stage1::build_program(cs, sc);
  stage1::SolveOptions sopts;
  sopts.mode = opts.mode;
  sopts.node_limit = opts.node_limit;
  sopts.time_limit_s = opts.stage1_time_s;
  run.pool = stage1::solve(cs, sc, prog, sopts);
  run.stage1_complete = run.pool.complete;
  run.timing.stage1 = seconds_since(t0);

  const int n_plans = static_cast<int>(run.pool.plans.size());
  run.outcomes.resize(n_plans);

  // Recovery, tuning, and simulation fan out across the pool; results land
  // by index so the merge stays deterministic.
  t0 = std::chrono::steady_clock::now();
  auto process = [&](int j) {
    auto& out = run.outcomes[j];
    out.stage1_plan = run.pool.plans[j];
    try {
      auto rec = recover::solve_recovery(cs, sc, out.stage1_plan);
      out.recovered_plan = recover::post_treat(cs, sc, rec);
      if (sc.freeze_acv) {
        // Frozen-ACV schemes keep the initial inertia/damping untouched.
        out.tuned_plan = out.recovered_plan;
        for (auto& ep : out.tuned_plan.episodes) ep.a_t = sc.a0_t;
      } else {
        auto tp = stage2::assemble_states(cs, sc, out.recovered_plan, rec);
        auto tuned = stage2::tune(tp, sc);
        if (!tuned.all_stable) {
          out.failure = "no stabilizing virtual inertia/damping found in bounds";
          return;
        }
        out.tuned_plan = stage2::merge_tuned(out.recovered_plan, tp, tuned, sc.a0_t);
      }
      out.viable = true;
    } catch (const std::exception& e) {
      out.failure = e.what();
    }
  };
  {
    const int workers = std::max(1, std::min<int>(opts.workers, n_plans));
    std::vector<std::thread> ts;
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w)
      ts.emplace_back([&]() {
        for (int j = next.fetch_add(1); j < n_plans; j = next.fetch_add(1)) process(j);
      });
    for (auto& th : ts) th.join();
  }
  run.timing.recover = seconds_since(t0);  // recovery and tuning amortized

  // Simulation-based evaluation.
  t0 = std::chrono::steady_clock::now();
  for (int j = 0; j < n_plans; ++j) {
    auto& out = run.outcomes[j];
    if (!out.viable) continue;
    out.report = simeval::evaluate_plan(cs, sc, out.tuned_plan, sc.sim);
  }
  run.timing.simeval = seconds_since(t0);

  // Selection among viable outcomes.
  std::vector<simeval::EvaluationReport> reports;
  std::vector<int> idx;
  for (int j = 0; j < n_plans; ++j)
    if (run.outcomes[j].viable) {
      reports.push_back(run.outcomes[j].report);
      idx.push_back(j);
    }
  if (reports.empty())
    throw SolveError("every pool plan failed recovery or tuning; increase the pool (n_s)");
  run.selected = idx[static_cast<size_t>(simeval::select_best(reports))];
  run.timing.total = seconds_since(t_total);
  return run;
}

simeval::EvaluationReport evaluate_only(const NetworkCase& cs, const ScenarioSpec& sc,
                                        const stage1::TransitionPlan& plan) {
  auto bad = plancheck::structural_audit(cs, sc, plan);
  if (!bad.empty()) throw ValidationError(bad);
  return simeval::evaluate_plan(cs, sc, plan, sc.sim);
}

void save_plan(const std::string& path, const NetworkCase& cs,
               const stage1::TransitionPlan& plan) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["case"] = cs.name;
  j["provenance"] = plan.provenance == stage1::Provenance::Stage1
                        ? "stage1"
                        : (plan.provenance == stage1::Provenance::Recovered ? "recovered"
                                                                            : "tuned");
  const auto lay = netcase::acv_layout(cs);
  auto arr = nlohmann::ordered_json::array();
  for (const auto& ep : plan.episodes) {
    nlohmann::ordered_json je;
    auto open = nlohmann::ordered_json::array();
    for (int e = 0; e < cs.n_branch(); ++e)
      if (ep.z.z(e) == 0) open.push_back(cs.branches[e].id);
    je["open"] = open;
    nlohmann::ordered_json jas;
    for (int k = 0; k < lay.n_s(); ++k)
      jas[lay.s_entries[k].name] = strf("%.17g", ep.a_s(k));
    je["a_s"] = jas;
    nlohmann::ordered_json jat;
    for (int k = 0; k < lay.n_t(); ++k)
      jat[lay.t_entries[k].name] = strf("%.17g", ep.a_t.size() > k ? ep.a_t(k) : 0.0);
    je["a_t"] = jat;
    je["adjust"] = ep.flags.adjust;
    je["switch"] = ep.flags.sw;
    arr.push_back(je);
  }
  j["episodes"] = arr;
  std::ofstream f(path);
  f << j.dump(2) << "\n";
}

stage1::TransitionPlan load_plan(const std::string& path, const NetworkCase& cs) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open plan file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("plan file: ") + e.what());
  }
  const auto lay = netcase::acv_layout(cs);
  stage1::TransitionPlan plan;
  netcase::TopologyVector zprev;
  zprev.z = IVec::Ones(cs.n_branch());
  bool first = true;
  for (const auto& je : j.at("episodes")) {
    stage1::Episode ep;
    std::vector<std::string> open = je.value("open", std::vector<std::string>{});
    ep.z = netcase::topology_from_open(cs, open);
    ep.a_s.resize(lay.n_s());
    for (int k = 0; k < lay.n_s(); ++k) {
      const auto& nm = lay.s_entries[k].name;
      if (je.contains("a_s") && je["a_s"].contains(nm)) {
        const auto& v = je["a_s"][nm];
        ep.a_s(k) = v.is_string() ? std::stod(v.get<std::string>()) : v.get<double>();
      } else {
        ep.a_s(k) = 0.0;
      }
    }
    ep.a_t.resize(lay.n_t());
    for (int k = 0; k < lay.n_t(); ++k) {
      const auto& nm = lay.t_entries[k].name;
      if (je.contains("a_t") && je["a_t"].contains(nm)) {
        const auto& v = je["a_t"][nm];
        ep.a_t(k) = v.is_string() ? std::stod(v.get<std::string>()) : v.get<double>();
      } else {
        ep.a_t(k) = 0.0;
      }
    }
    ep.flags.adjust = je.value("adjust", false);
    ep.flags.sw = je.value("switch", false);
    if (!first || true) {
      for (int e = 0; e < cs.n_branch(); ++e)
        if (ep.z.z(e) != zprev.z(e)) ep.switched_branch = e;
    }
    zprev = ep.z;
    first = false;
    plan.episodes.push_back(std::move(ep));
  }
  return plan;
}

void write_run_directory(const NetworkCase& cs, const ScenarioSpec& sc,
                         const PipelineRun& run, const std::string& dir,
                         bool emit_plots) {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/pool");
  fs::create_directories(dir + "/recovered");
  fs::create_directories(dir + "/tuned");
  fs::create_directories(dir + "/reports");
  if (emit_plots) fs::create_directories(dir + "/traces");

  for (size_t j = 0; j < run.outcomes.size(); ++j) {
    const auto& out = run.outcomes[j];
    save_plan(strf("%s/pool/plan%02zu.json", dir.c_str(), j + 1), cs, out.stage1_plan);
    if (!out.viable) continue;
    save_plan(strf("%s/recovered/plan%02zu.json", dir.c_str(), j + 1), cs,
              out.recovered_plan);
    save_plan(strf("%s/tuned/plan%02zu.json", dir.c_str(), j + 1), cs, out.tuned_plan);
    {
      std::ofstream f(strf("%s/reports/plan%02zu.txt", dir.c_str(), j + 1));
      const auto& rep = out.report;
      f << strf("H      %.9f\n", rep.report.H);
      f << strf("H_bd   %.9f\n", rep.report.H_bd);
      f << strf("H_vl   %.9f\n", rep.report.H_vl);
      f << strf("H_ts   %.9f (%s)\n", rep.report.H_ts, rep.report.source_label().c_str());
      f << strf("stable %s\n", rep.stable ? "yes" : "no");
      for (const auto& v : rep.violations) f << "violation: " << v << "\n";
      f << "per-episode H_ts:";
      for (double v : rep.report.ts_per_episode) f << strf(" %.9f", v);
      f << "\n";
    }
    if (emit_plots) {
      std::vector<std::string> labels;
      for (const auto& o : sc.outputs) labels.push_back(o.label());
      simeval::export_csv(out.report.trace,
                          labels, strf("%s/traces/plan%02zu.csv", dir.c_str(), j + 1));
    }
  }
  if (run.selected >= 0) {
    const auto& sel = run.outcomes[run.selected];
    save_plan(dir + "/selected.json", cs, sel.tuned_plan);
    // Steady-state component path for plotting, endpoint dumps, and the
    // selected plan's linearization matrices.
    {
      std::ofstream f(dir + "/reports/selected_ss_points.csv");
      f << "point";
      for (const auto& o : sc.outputs) f << "," << o.label();
      f << "\n";
      const auto& tr = sel.report.trace;
      auto row = [&](const std::string& nm, const Vec& y) {
        f << nm;
        for (int k = 0; k < y.size(); ++k) f << "," << strf("%.10g", y(k));
        f << "\n";
      };
      row("star0", tr.y_star0);
      for (size_t i = 0; i < tr.y_minus.size(); ++i) {
        row(strf("minus%zu", i + 1), tr.y_minus[i]);
        row(strf("star%zu", i + 1), tr.y_star[i]);
      }
    }
    try {
      auto s0 = acpf::solve_steady_state(cs, sc.z0, sc.a0_s, acpf::SsMode::PostAdjustment);
      std::ofstream f0(dir + "/reports/endpoint_initial.txt");
      f0 << acpf::dump_solution(cs, s0);
      auto sT = acpf::solve_steady_state(cs, sc.zT, sc.a0_s, acpf::SsMode::PostSwitching);
      std::ofstream fT(dir + "/reports/endpoint_final.txt");
      fT << acpf::dump_solution(cs, sT);
      if (!sel.tuned_plan.episodes.empty()) {
        const auto& ep = sel.tuned_plan.episodes.back();
        dyn::Model m(cs, ep.z, sc.outputs);
        auto ss = acpf::solve_steady_state(cs, ep.z, ep.a_s, acpf::SsMode::PostSwitching);
        auto [xs, xis] = m.from_acpf(ss);
        auto lin = m.linearize_at(xs, xis, ep.a_s, ep.a_t);
        dyn::dump_matrix(lin.A, dir + "/reports/selected_A.txt");
        dyn::dump_matrix(lin.C, dir + "/reports/selected_C.txt");
        auto gram = dyn::solve_lyapunov(lin.A, dyn::weighted_output(lin.C, sc.weights.w_ts));
        if (gram.stable) dyn::dump_matrix(gram.Q, dir + "/reports/selected_Q.txt");
      }
    } catch (const std::exception&) {
      // Dumps are best-effort diagnostics.
    }
  }
  {
    nlohmann::ordered_json m;
    m["format_version"] = 1;
    m["case"] = cs.name;
    m["scenario"] = sc.name;
    m["pool_size"] = run.outcomes.size();
    m["selected"] = run.selected + 1;
    m["stage1_complete"] = run.stage1_complete;
    m["timing"] = {{"stage1", run.timing.stage1},
                   {"recover_tune", run.timing.recover},
                   {"simeval", run.timing.simeval},
                   {"total", run.timing.total}};
    std::ofstream f(dir + "/manifest.json");
    f << m.dump(2) << "\n";
  }
  {
    std::ofstream f(dir + "/summary.txt");
    f << summary_table(run);
  }
}

std::string summary_table(const PipelineRun& run) {
  std::ostringstream os;
  os << "plan       H        H_bd     H_vl     H_ts     stable  note\n";
  for (size_t j = 0; j < run.outcomes.size(); ++j) {
    const auto& out = run.outcomes[j];
    if (!out.viable) {
      os << strf("%-4zu %8s %8s %8s %8s  %-6s  %s\n", j + 1, "-", "-", "-", "-", "-",
                 out.failure.c_str());
      continue;
    }
    const auto& r = out.report;
    os << strf("%-4zu %8.4f %8.5f %8.5f %8.4f  %-6s  %s\n", j + 1, r.report.H,
               r.report.H_bd, r.report.H_vl, r.report.H_ts, r.stable ? "yes" : "no",
               static_cast<int>(j) == run.selected ? "selected" : "");
  }
  os << strf("timing[s]: stage1 %.2f | recover+tune %.2f | simulate %.2f | total %.2f\n",
             run.timing.stage1, run.timing.recover, run.timing.simeval, run.timing.total);
  return os.str();
}

}  // namespace btt::pipeline
