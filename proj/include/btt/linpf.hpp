#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "btt/acpf.hpp"
#include "btt/netcase.hpp"
#include "btt/socp.hpp"

namespace btt::linpf {

using netcase::NetworkCase;

struct LinearizationConfig {
  double big_m = 0.0;  // 0: derive per-row from variable bounds
  int n_t = 3;         // TCSC discretization depth
  int n_p = 8;         // cosine segments
  int n_k = 8;         // SOS2 grid intervals
  double vhat = 1.0;   // flat estimated voltage profile
  double theta_hat = 0.0;

  void validate() const;
};

/// Estimated voltage magnitudes used as linearization anchors; per-entity so
/// internal emfs (often well above 1 p.u.) get sensible expansion points.
struct VoltageProfile {
  Vec bus;              // per bus
  Vec sg_e, sg_es;      // per generator (SG slots)
  Vec cig_vm;           // per generator (CIG slots)
  Vec im_em;            // per load
  Vec st_vs;            // per DVC (STATCOM slots)

  static VoltageProfile flat(const NetworkCase& cs, double vhat);
  static VoltageProfile from_solution(const NetworkCase& cs,
                                      const acpf::SteadyStateSolution& sol);
};

/// Affine expression over registered variables.
struct LinTerm {
  std::vector<std::pair<int, double>> terms;
  double constant = 0.0;

  LinTerm() = default;
  explicit LinTerm(double c) : constant(c) {}
  static LinTerm var(int idx, double coeff = 1.0) {
    LinTerm t;
    t.terms.push_back({idx, coeff});
    return t;
  }
  LinTerm& add(int idx, double coeff) {
    if (idx >= 0 && coeff != 0.0) terms.push_back({idx, coeff});
    return *this;
  }
  LinTerm& operator+=(const LinTerm& o);
  LinTerm& operator-=(const LinTerm& o);
  LinTerm& operator*=(double s);
  friend LinTerm operator+(LinTerm a, const LinTerm& b) { return a += b; }
  friend LinTerm operator-(LinTerm a, const LinTerm& b) { return a -= b; }
  friend LinTerm operator*(double s, LinTerm a) { return a *= s; }
};

struct SocRow {
  LinTerm head;               // upper bound on the norm
  std::vector<LinTerm> tail;  // vector inside the norm
  std::string name;
};

struct Sos2Group {
  std::vector<int> lambdas;  // contiguous interpolation weights
  std::string name;
  std::vector<int> ybits;    // binaries of the logarithmic encoding
};

/// Mixed-integer conic constraint system with a stable name registry.
/// Assembly order is deterministic: identical build sequences produce
/// identical systems.
class ConstraintSystem {
 public:
  int add_var(const std::string& name, double lo, double hi);
  int add_binary(const std::string& name);
  int var(const std::string& name) const;
  bool has_var(const std::string& name) const;
  int n_vars() const { return static_cast<int>(names_.size()); }
  const std::string& name(int idx) const { return names_[idx]; }
  double lower(int idx) const { return lo_[idx]; }
  double upper(int idx) const { return hi_[idx]; }
  bool is_binary(int idx) const { return binary_[idx]; }
  const std::vector<int>& binaries() const { return binary_list_; }

  void add_eq(LinTerm t, const std::string& name);   // t == 0
  void add_le(LinTerm t, const std::string& name);   // t <= 0
  void add_soc(LinTerm head, std::vector<LinTerm> tail, const std::string& name);
  void add_sos2(std::vector<int> lambdas, const std::string& name);

  void obj_add(LinTerm t);
  const LinTerm& objective() const { return obj_; }

  int n_eq() const { return static_cast<int>(eqs_.size()); }
  int n_le() const { return static_cast<int>(les_.size()); }
  int n_soc() const { return static_cast<int>(socs_.size()); }
  const std::vector<std::pair<LinTerm, std::string>>& eqs() const { return eqs_; }
  const std::vector<std::pair<LinTerm, std::string>>& les() const { return les_; }
  const std::vector<SocRow>& socs() const { return socs_; }
  const std::vector<Sos2Group>& sos2() const { return sos2_; }

  /// Lower every SOS2 group to its logarithmic binary encoding. Idempotent.
  void lower_sos2();

  /// Compile to conic form; `fixed` pins binaries (others relaxed to [0,1]).
  socp::Problem compile(const std::map<int, int>& fixed = {}) const;

  /// Compile with every eq/le row relaxed by a fresh slack t >= 0 and the
  /// objective replaced by t; the slack is the last variable. Measures how
  /// far a partially pinned point is from satisfying the rows.
  socp::Problem compile_elastic(const std::map<int, int>& fixed = {}) const;

  /// Clamp a variable to a single value.
  void pin(int var, double value) {
    lo_[var] = value;
    hi_[var] = value;
  }

  double eval(const LinTerm& t, const Vec& x) const;
  /// Worst violation over all rows, bounds, and cones at a point.
  double max_violation(const Vec& x) const;

  /// LP-format text export (documented subset: binaries, quadratic rows for
  /// cones).
  std::string export_lp(const std::map<int, int>& fixed = {}) const;

 private:
  std::vector<std::string> names_;
  std::vector<double> lo_, hi_;
  std::vector<bool> binary_;
  std::vector<int> binary_list_;
  std::map<std::string, int> index_;
  std::vector<std::pair<LinTerm, std::string>> eqs_, les_;
  std::vector<SocRow> socs_;
  std::vector<Sos2Group> sos2_;
  LinTerm obj_;
  bool sos2_lowered_ = false;
};

/// Either a per-episode binary variable or a fixed 0/1 value.
struct ZRef {
  int var = -1;
  double value = 1.0;
  bool is_var() const { return var >= 0; }
  LinTerm term() const { return is_var() ? LinTerm::var(var) : LinTerm(value); }
  double fixed() const { return value; }
};

/// Variable indices for one linearized operating point.
struct PointVars {
  IVec v, th;                    // per bus
  IVec pfb, qfb, ptb, qtb;       // per branch
  IVec pg, qg;                   // per generator
  IVec epsp, epsq;               // per load
  IVec qc, bsvc;                 // per DVC
  IVec e, de, es, des;           // per SG
  IVec vm, thm;                  // per CIG
  IVec em, dem;                  // per IM load
  IVec vs, ths;                  // per STATCOM
  IVec b_tcsc;                   // per TCSC branch (episode-shared value)
};

/// Shared TCSC discretization state for one episode.
struct TcscEncoding {
  std::vector<int> eta;      // binaries
  Vec tau;                   // breakpoint weights
  std::vector<IVec> codes;   // eta code per breakpoint
  Vec ghat;                  // conductance at each breakpoint
  double b_lo = 0, b_hi = 0;
  int n_bp() const { return static_cast<int>(codes.size()); }
};

/// Register all x_p/y_p variables of one operating point under `tag`.
PointVars register_point(ConstraintSystem& sys, const NetworkCase& cs,
                         const std::string& tag, const LinearizationConfig& cfg);

/// DLPF network rows with Big-M switching for one point. TCSC branches take
/// their discretized product expressions from `tcsc` (episode-shared).
void build_dlpf(ConstraintSystem& sys, const NetworkCase& cs,
                const LinearizationConfig& cfg, const std::string& tag,
                const PointVars& pv, const std::vector<ZRef>& z,
                const std::vector<TcscEncoding>& tcsc, const VoltageProfile& vp,
                double load_scale = 1.0);

/// Episode-level TCSC susceptance encoding (binaries shared across the
/// episode's operating points and all four bilinear products).
TcscEncoding encode_tcsc(ConstraintSystem& sys, const NetworkCase& cs, int branch,
                         const LinearizationConfig& cfg, const std::string& tag);

/// Discretized bilinear products (b*diff, g*diff) for one TCSC branch at one
/// operating point, built on the episode-shared eta code.
std::pair<LinTerm, LinTerm> tcsc_products(ConstraintSystem& sys, const TcscEncoding& enc,
                                          const LinTerm& diff, double d_lo, double d_hi,
                                          const std::string& tag);

/// Polyhedral outer approximation of cos(angle_m - angle_j); returns the
/// cosine variable.
int cosine_polytope(ConstraintSystem& sys, const LinTerm& th_m, const LinTerm& th_j,
                    double theta_u, int n_p, const std::string& tag);

/// LPAC rows for one F-template instance: ties (p_var, q_var) to the
/// linearized injection of (v_m, th_m) against bus (v_j, th_j).
struct FInstance {
  LinTerm vm, thm, vj, thj;
  double vhat_m = 1.0, vhat_j = 1.0;
  double g = 0, b = 0, b_cc = 0;
  double theta_u = 0.5;
};
void linearize_injection(ConstraintSystem& sys, const LinearizationConfig& cfg,
                         const FInstance& fi, const LinTerm& p_target,
                         const LinTerm& q_target, const std::string& tag);

/// SVC separable linearization with SOS2 grids.
void linearize_svc(ConstraintSystem& sys, const NetworkCase& cs, int dvc,
                   const LinearizationConfig& cfg, const std::string& tag,
                   const PointVars& pv, const VoltageProfile& vp);

/// Complete linear power-flow fragment for one operating point: DLPF plus all
/// device injections and the nodal couplers. `jump_point` drops the SG x_q
/// links and STATCOM active-exchange rows and frees the IM weights.
void assemble_linear_pf(ConstraintSystem& sys, const NetworkCase& cs,
                        const LinearizationConfig& cfg, const std::string& tag,
                        const PointVars& pv, const std::vector<ZRef>& z,
                        const std::vector<TcscEncoding>& tcsc,
                        const VoltageProfile& vp, double load_scale = 1.0);

}  // namespace btt::linpf
