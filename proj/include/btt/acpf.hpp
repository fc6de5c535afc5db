#pragma once

#include <optional>

#include "btt/netcase.hpp"

namespace btt::acpf {

using netcase::NetworkCase;
using netcase::TopologyVector;

/// Two-port power injection template shared by CIG, SG, IM and STATCOM
/// equations: full form and its partial derivatives.
struct Injection {
  double p = 0, q = 0;
  double dp_dvm = 0, dp_dvj = 0, dp_dthm = 0, dp_dthj = 0;
  double dq_dvm = 0, dq_dvj = 0, dq_dthm = 0, dq_dthj = 0;
};

Injection device_injection(double v_m, double v_j, double th_m, double th_j,
                           double g, double b, double b_cc);

/// Position of every solver unknown inside the stacked vector. An index of -1
/// marks a slot that does not exist for the device in question.
struct VarMap {
  int n = 0;
  IVec v, th;                    // per bus
  IVec e, de, es, des;           // per generator (SGs only)
  IVec vm, thm;                  // per generator (CIGs only)
  IVec em, dem, epsp, epsq;      // per load (IM component only for em/dem)
  IVec vs, ths;                  // per DVC (STATCOMs only)
  IVec pg, qg;                   // per generator
  IVec qc;                       // per DVC
  IVec bsvc;                     // per DVC (SVCs only)
};

VarMap var_map(const NetworkCase& cs);

enum class SsMode { PostAdjustment, PostSwitching };

/// Values frozen across a switching instant, in the order
/// [e, delta, e_s, delta_s, v_m, theta_m, e_m, delta_m, b_svc, v_svg,
///  theta_svg, b_tcsc].
struct FrozenVars {
  Vec e, de, es, des;      // per SG
  Vec vm, thm;             // per CIG
  Vec em, dem;             // per IM load
  Vec bsvc;                // per SVC
  Vec vs, ths;             // per STATCOM
  Vec b_tcsc;              // per TCSC branch
};

struct SteadyStateSolution {
  // x_p
  Vec v, th;               // per bus
  Vec e, de, es, des;      // per generator (zero for CIG slots)
  Vec vm, thm;             // per generator (zero for SG slots)
  Vec em, dem;             // per load
  Vec vs, ths;             // per DVC
  // y_p
  Vec p_fb, q_fb, p_tb, q_tb;  // per branch
  Vec pg, qg;                  // per generator
  Vec epsp, epsq;              // per load
  Vec qc;                      // per DVC
  Vec bsvc;                    // per DVC
  Vec b_tcsc;                  // per TCSC branch
  // diagnostics
  double residual_norm = 0;
  int iterations = 0;
  bool low_voltage_suspect = false;  // any v < 0.8 p.u.

  FrozenVars frozen(const NetworkCase& cs) const;
  Vec load_p, load_q;  // realized ZIP-IM demand per load
};

struct AcpfOptions {
  double tol = 1e-8;
  int max_iter = 50;
  double load_scale = 1.0;
};

SteadyStateSolution solve_steady_state(const NetworkCase& cs, const TopologyVector& z,
                                       const Vec& a_s, SsMode mode,
                                       const AcpfOptions& opts = {},
                                       const SteadyStateSolution* warm = nullptr);

SteadyStateSolution jumping_state(const NetworkCase& cs, const TopologyVector& z_new,
                                  const Vec& a_s, const FrozenVars& frozen,
                                  const AcpfOptions& opts = {},
                                  const SteadyStateSolution* warm = nullptr);

/// Effective series admittance of a branch, honoring a TCSC susceptance
/// override. g follows the physical series resistance: g(b) = r / (r^2 + x(b)^2).
struct BranchAdmittance {
  double g = 0, b = 0;
  double dg_db = 0;  // derivative of g along the TCSC control
};
BranchAdmittance branch_admittance(const netcase::Branch& br,
                                   std::optional<double> b_override);

/// Map scenario performance outputs to a concrete value vector. Speed outputs
/// are identically zero at steady states and jumps.
Vec output_vector(const NetworkCase& cs, const std::vector<netcase::OutputSpec>& outs,
                  const SteadyStateSolution& sol);

/// Residual of the full nonlinear system (core rows + the mode's closure
/// rows) at a given solution; used by audits and tests.
Vec residual_at(const NetworkCase& cs, const TopologyVector& z, const Vec& a_s,
                SsMode mode, const SteadyStateSolution& sol,
                const AcpfOptions& opts = {});

/// Per-bus and per-device table of a solved operating point.
std::string dump_solution(const NetworkCase& cs, const SteadyStateSolution& sol);

/// Pack/unpack between the solver's unknown stack and a solution record.
Vec pack(const NetworkCase& cs, const VarMap& vm, const SteadyStateSolution& sol);
SteadyStateSolution unpack(const NetworkCase& cs, const VarMap& vm,
                           const TopologyVector& z, const Vec& b_tcsc, const Vec& x,
                           double load_scale = 1.0);

namespace detail {

/// Core equation rows (nodal balance + device equations, no closure pins),
/// with analytic Jacobian w.r.t. the unknown stack. Row layout:
///   [P balance (n_n), Q balance (n_n), per-SG {F_emf_p, F_emf_q, F_sub_p,
///    F_sub_q}, per-CIG {F_p, F_q}, per-IM {im_p, im_q}, per-STATCOM
///    {st_p, st_q}, per-SVC {svc_q}].
struct CoreRows {
  Vec r;
  Mat J;
  Mat J_btcsc;  // derivative w.r.t. the TCSC susceptance overrides
  std::vector<int> steady_only;  // rows dropped in jump mode (SG x_q links, STATCOM p)
};

CoreRows core_rows(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                   const Vec& x, const VarMap& vm, double load_scale,
                   bool want_jacobian);

/// Branch-flow values stacked [p_fb; q_fb; p_tb; q_tb] with Jacobians w.r.t.
/// the unknown stack and the TCSC susceptance overrides.
struct FlowRows {
  Vec val;
  Mat J;
  Mat J_btcsc;
};
FlowRows flow_rows(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                   const Vec& x, const VarMap& vm);

void flows_from_state(const NetworkCase& cs, const TopologyVector& z, const Vec& b_tcsc,
                      const Vec& x, const VarMap& vm, Vec& p_fb, Vec& q_fb, Vec& p_tb,
                      Vec& q_tb);

}  // namespace detail

}  // namespace btt::acpf
