#pragma once

#include "btt/acpf.hpp"
#include "btt/netcase.hpp"

namespace btt::dyn {

using netcase::NetworkCase;
using netcase::TopologyVector;

/// State layout. Angles are expressed relative to the reference machine's
/// rotor (the gauge in which acpf pins the slack rotor angle to zero), which
/// removes the rigid-rotation mode from the state space.
///
/// Per device:
///   reference SG:  [omega, e_s, delta_s, e_fd, p_gov]
///   other SG:      [delta, omega, e_s, delta_s, e_fd]
///   CIG:           [theta_m, omega_m, v_m]
///   IM load:       [e_mx, e_my, slip]
///   SVC:           [b_svc]
///   STATCOM:       [v_svg, theta_svg]
struct StateLayout {
  struct SgIdx { int delta = -1, omega = -1, es = -1, des = -1, efd = -1, pgov = -1; };
  struct CigIdx { int thm = -1, omega = -1, vm = -1; };
  struct ImIdx { int ex = -1, ey = -1, slip = -1; };
  struct DvcIdx { int b = -1, vs = -1, ths = -1; };
  std::vector<SgIdx> sg;    // per generator (unused slots for CIGs)
  std::vector<CigIdx> cig;  // per generator (unused slots for SGs)
  std::vector<ImIdx> im;    // per load
  std::vector<DvcIdx> dvc;  // per DVC
  int n_x = 0;
  int ref_gen = -1;
};

/// Algebraic layout: [v (n_bus), theta (n_bus), p_g, q_g (per generator)].
struct AlgLayout {
  int v0 = 0, th0 = 0, pg0 = 0, qg0 = 0;
  int n_xi = 0;
};

struct Jacobians {
  Mat fx, fxi, gx, gxi;
};

struct LinearizedSystem {
  Mat A;        // n_x x n_x, algebraic block eliminated
  Mat C;        // n_y x n_x
  Vec x_star, xi_star;
};

struct GramianResult {
  Mat Q;
  bool stable = false;
};

class Model {
 public:
  Model(const NetworkCase& cs, TopologyVector z,
        std::vector<netcase::OutputSpec> outputs, double load_scale = 1.0);

  const StateLayout& states() const { return sl_; }
  const AlgLayout& alg() const { return al_; }
  int n_x() const { return sl_.n_x; }
  int n_xi() const { return al_.n_xi; }
  int n_y() const { return static_cast<int>(outputs_.size()); }
  const NetworkCase& network() const { return *cs_; }
  const TopologyVector& topology() const { return z_; }

  Vec f(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const;
  Vec g(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const;
  Jacobians jacobians(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const;

  /// Output rows are linear selectors into (x, xi).
  Vec h(const Vec& x, const Vec& xi) const;
  const Mat& hx() const { return hx_; }
  const Mat& hxi() const { return hxi_; }

  /// Map a converged power-flow solution onto (x, xi); speeds and slip zero.
  std::pair<Vec, Vec> from_acpf(const acpf::SteadyStateSolution& sol) const;

  LinearizedSystem linearize_at(const Vec& x_star, const Vec& xi_star, const Vec& a_s,
                                const Vec& a_t) const;

  /// Partial of the eliminated A matrix w.r.t. one a_t entry; only the
  /// owning CIG's swing row depends on (m, d).
  Mat dA_dat(const LinearizedSystem& lin, const Vec& a_s, const Vec& a_t,
             int at_index) const;

  /// Re-solve the algebraic block for given states (used at switching
  /// instants and by the integrator).
  Vec solve_algebraic(const Vec& x, const Vec& a_s, const Vec& a_t,
                      const Vec* xi_guess = nullptr) const;

  bool use_fd_jacobian = false;  // numeric fallback for validation

 private:
  const NetworkCase* cs_;
  TopologyVector z_;
  std::vector<netcase::OutputSpec> outputs_;
  double load_scale_;
  StateLayout sl_;
  AlgLayout al_;
  Mat hx_, hxi_;
  netcase::AcvLayout acv_;

  Jacobians fd_jacobians(const Vec& x, const Vec& xi, const Vec& a_s, const Vec& a_t) const;
};

/// Q solving A^T Q + Q A = -Ctil^T Ctil via Schur reduction; stable flag
/// false when A is not Hurwitz within the margin.
GramianResult solve_lyapunov(const Mat& A, const Mat& Ctil, double margin = 1e-6);

/// Output energy of the free response from initial deviation x_delta,
/// integral of ||Ctil exp(A t) x_delta||^2: x_delta^T Q x_delta.
double h2_energy(const GramianResult& gram, const Vec& x_delta);

/// Max deviation over the horizon between the free response from x_delta and
/// the response to a unit impulse through B = diag(x_delta).
double impulse_free_equivalence(const Mat& A, const Mat& C, const Vec& x_delta,
                                double horizon);

bool is_asymptotically_stable(const Mat& A, double margin = 1e-6);

/// Weighted output matrix (w_ts^diag)^(1/2) C.
Mat weighted_output(const Mat& C, const Vec& w_ts);

/// Dense text dump of a matrix for external cross-checks.
void dump_matrix(const Mat& m, const std::string& path);

}  // namespace btt::dyn
