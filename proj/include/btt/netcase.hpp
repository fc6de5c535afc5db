#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "btt/common.hpp"

namespace btt::netcase {

enum class BusKind { Generator, Load, Junction };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::Junction;
  double g_s = 0.0;  // shunt conductance (p.u.)
  double b_s = 0.0;  // shunt susceptance (p.u.)
};

struct TcscRange {
  double b_min = 0.0;  // lower bound of controllable series susceptance
  double b_max = 0.0;
  double b0 = 0.0;     // susceptance value reachable for every discretization depth
};

struct Branch {
  std::string id;
  int from = 0;
  int to = 0;
  double g_b = 0.0;   // series conductance (p.u.)
  double b_b = 0.0;   // series susceptance (p.u.)
  double g_lc = 0.0;  // half line-charging conductance
  double b_lc = 0.0;  // half line-charging susceptance
  double s_max = 1.0;            // thermal apparent-power limit (p.u.)
  double theta_max = 0.5;        // angle-difference bound (rad)
  bool switchable = true;
  bool non_participating = false;
  std::optional<TcscRange> tcsc;
};

enum class GenKind { Sg, Cig };

struct Generator {
  std::string id;
  int bus = 0;
  GenKind kind = GenKind::Sg;
  bool slack = false;
  bool has_ess = false;

  // SG electrical parameters.
  double x_q = 1.0;    // q-axis synchronous reactance
  double x_sub = 0.2;  // subtransient reactance (d = q approximation)

  // CIG filter parameters.
  double r_c = 0.01;
  double x_cl = 0.1;
  double x_cc = 10.0;

  // Swing parameters: (inertia_h, damping) for SGs, (m_cg, d_cg) for CIGs.
  double inertia_h = 3.0;
  double damping = 2.0;
  // Dynamic-completion parameters.
  double t_sub = 0.02;   // subtransient emf lag (s)
  double k_avr = 5.0;    // integral excitation gain toward the voltage setpoint
  double t_gov = 0.1;    // isochronous governor time constant (slack SG only)
  double k_vreg = 5.0;   // CIG modulation-voltage regulator gain
  double m_cg = 3.0;
  double d_cg = 10.0;
  double m_min = 0.1, m_max = 30.0;
  double d_min = 1.0, d_max = 30.0;

  // Setpoints and operating limits.
  double p_set = 0.0;
  double v_set = 1.0;
  double v_min = 0.95, v_max = 1.1;   // ACV range for the terminal-voltage setpoint
  double p_min = 0.0, p_max = 0.0;    // ACV range for ESS active power
  double q_min = -1e3, q_max = 1e3;   // reactive capability (SGs)
  double s_max = 1e3;                 // apparent-power limit (CIGs)
  double pf_min = 0.0;                // power-factor floor (CIGs)
  double p_rated = 1.0;               // rated power for RSI bounds
};

struct ZipImLoad {
  std::string id;
  int bus = 0;
  double p0 = 0.0;  // active demand at v = v0 (p.u.)
  double q0 = 0.0;
  double v0 = 1.0;
  double alpha_p = 0.0, beta_p = 0.0, gamma_p = 1.0, eps_p = 0.0;
  double alpha_q = 0.0, beta_q = 0.0, gamma_q = 1.0, eps_q = 0.0;
  // IM component: stator resistance and subtransient reactance.
  double r_s = 0.02;
  double x_m = 0.15;
  double inertia_h = 0.6;  // motor inertia constant (s)
  double t_m0 = 0.3;       // internal-emf relaxation time constant (s)
  double p_rated = 1.0;    // rated power for RSI bounds

  bool has_im() const { return eps_p > 0.0 || eps_q > 0.0; }
};

enum class DvcKind { Svc, Statcom };

struct Dvc {
  std::string id;
  int bus = 0;
  DvcKind kind = DvcKind::Svc;
  double v_set = 1.0;
  double v_min = 0.95, v_max = 1.1;  // ACV range for the voltage setpoint
  double q_min = -1.0, q_max = 1.0;
  double b_min = -1.0, b_max = 1.0;  // SVC susceptance range
  double x_svg = 0.1;                // STATCOM coupling reactance
  double t_reg = 0.03;               // regulator time constant (s)
  double k_reg = 20.0;               // regulator gain
};

struct OperationalLimits {
  double v_min = 0.9;
  double v_max = 1.1;
  double eps_rsi_sg = 0.3;  // RSI proportion of rated power, SGs
  double eps_rsi_im = 0.3;  // RSI proportion of rated power, IM loads
};

struct Bases {
  double s_mva = 100.0;
  double v_kv = 230.0;
};

/// Immutable network description. All mutation happens during load_case;
/// afterwards instances are safe to share across worker threads.
struct NetworkCase {
  std::string name;
  Bases bases;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  std::vector<ZipImLoad> loads;
  std::vector<Dvc> dvcs;
  std::vector<int> tcsc_branches;  // indices into branches
  OperationalLimits limits;

  int n_bus() const { return static_cast<int>(buses.size()); }
  int n_branch() const { return static_cast<int>(branches.size()); }

  int bus_index(int bus_id) const;        // throws on unknown id
  int branch_index(const std::string& id) const;
  int slack_gen() const;                  // index of the slack SG

  std::map<int, int> bus_index_map;       // bus id -> position
  std::map<std::string, int> branch_index_map;
};

struct Incidence {
  Mat E;     // oriented incidence, +1 at from bus, -1 at to bus
  Mat Etil;  // entry-wise |E|
  Mat Ef;    // positive part of E
  Mat Et;    // negative part of E (signed), so E = Ef + Et, Etil = Ef - Et
  Mat Eg;    // generator-to-bus adjacency (n_bus x n_gen)
  Mat Ed;    // load-to-bus adjacency
  Mat Ec;    // DVC-to-bus adjacency
  Mat Enp;   // non-participating-branch selector (n_np x n_branch)
};

struct TopologyVector {
  IVec z;  // 1 = closed, 0 = open

  int size() const { return static_cast<int>(z.size()); }
  bool operator==(const TopologyVector& o) const { return z == o.z; }
};

/// Layout of the steady-state ACV stack a_s = [v_g, p_g_ess, v_dvc, b_b_tcsc]
/// and the transient stack a_t = [m_cg, d_cg].
struct AcvLayout {
  struct Entry {
    std::string name;
    double lo = 0.0, hi = 0.0;
  };
  std::vector<Entry> s_entries;
  std::vector<Entry> t_entries;
  // Positions of the blocks inside a_s.
  int vg_offset = 0, vg_count = 0;
  int pess_offset = 0, pess_count = 0;
  int vdvc_offset = 0, vdvc_count = 0;
  int tcsc_offset = 0, tcsc_count = 0;
  std::vector<int> ess_gen_indices;   // generator index per p_g_ess entry
  std::vector<int> cig_gen_indices;   // generator index per (m,d) pair

  int n_s() const { return static_cast<int>(s_entries.size()); }
  int n_t() const { return static_cast<int>(t_entries.size()); }
  Vec lower_s() const;
  Vec upper_s() const;
  Vec lower_t() const;
  Vec upper_t() const;
};

AcvLayout acv_layout(const NetworkCase& cs);

/// Initial ACV values taken from the device setpoints in the case file.
Vec initial_a_s(const NetworkCase& cs, const AcvLayout& lay);
Vec initial_a_t(const NetworkCase& cs, const AcvLayout& lay);

/// One performance output of the transition process.
struct OutputSpec {
  enum class Kind {
    BusVoltage,    // v at a bus
    GenPower,      // p_g of a generator
    RotorAngle,    // SG rotor angle relative to the reference machine
    CigAngle,      // CIG modulation angle relative to the reference machine
    RotorSpeed,    // SG or CIG speed deviation (zero at any steady state)
  };
  Kind kind = Kind::BusVoltage;
  int bus = 0;          // for BusVoltage
  std::string device;   // for the generator-based kinds
  std::string label() const;
};

struct BudgetSpec {
  double t_ad = 1.0;
  double t_ls = 1.0;
  double t_max = 1.0;
};

struct WeightSpec {
  Vec w_bd_l, w_bd_u, w_vl, w_ts;  // sized per output
  Vec w_ts_scale;                  // estimated jump-to-integral scale factors
  Vec w_as;                        // sized per a_s entry
  double delta_pen = 1e-8;
};

struct LinConfigSpec {
  int n_t = 3;
  int n_p = 8;
  int n_k = 8;
  double vhat = 1.0;
  double big_m = 0.0;  // 0 = derive per-row from bounds
};

struct SimConfigSpec {
  double h = 0.005;
  double ramp_s = 2.0;
  double eps_settle = 1e-4;
  double dwell_s = 1.0;
  double horizon_s = 30.0;
};

struct ScenarioSpec {
  std::string name;
  std::string case_path;
  TopologyVector z0, zT;
  Vec a0_s, a0_t;
  BudgetSpec budget;
  double sigma_as = 1.0;
  WeightSpec weights;
  std::vector<OutputSpec> outputs;
  LinConfigSpec lin;
  SimConfigSpec sim;
  int pool = 1;
  double gap = 0.005;
  bool freeze_acv = false;
  bool maximize = false;  // select the bumpiest feasible scheme instead
  unsigned seed = 1;
};

NetworkCase load_case(const std::string& path);
ScenarioSpec load_scenario(const std::string& path, const NetworkCase& cs);

Incidence incidence(const NetworkCase& cs);

int topology_distance(const TopologyVector& z0, const TopologyVector& zT);

bool is_connected(const NetworkCase& cs, const TopologyVector& z);

/// Topology with the given branch ids open and everything else closed.
TopologyVector topology_from_open(const NetworkCase& cs,
                                  const std::vector<std::string>& open_ids);

}  // namespace btt::netcase
