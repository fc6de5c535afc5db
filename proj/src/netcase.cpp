#include "btt/netcase.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

namespace btt::netcase {

using nlohmann::json;

int NetworkCase::bus_index(int bus_id) const {
  auto it = bus_index_map.find(bus_id);
  if (it == bus_index_map.end())
    throw std::out_of_range(strf("unknown bus id %d", bus_id));
  return it->second;
}

int NetworkCase::branch_index(const std::string& id) const {
  auto it = branch_index_map.find(id);
  if (it == branch_index_map.end())
    throw std::out_of_range("unknown branch id " + id);
  return it->second;
}

int NetworkCase::slack_gen() const {
  for (size_t i = 0; i < generators.size(); ++i)
    if (generators[i].slack) return static_cast<int>(i);
  throw std::logic_error("case has no slack generator");
}

namespace {

double get_num(const json& j, const char* key, double dflt) {
  return j.contains(key) ? j.at(key).get<double>() : dflt;
}

// Branch admittance either given directly (g_b, b_b) or derived from (r, x).
void read_admittance(const json& j, Branch& br) {
  if (j.contains("g_b") || j.contains("b_b")) {
    br.g_b = get_num(j, "g_b", 0.0);
    br.b_b = get_num(j, "b_b", 0.0);
  } else {
    double r = get_num(j, "r", 0.0);
    double x = j.at("x").get<double>();
    double d = r * r + x * x;
    br.g_b = r / d;
    br.b_b = -x / d;
  }
}

void validate(const NetworkCase& cs, std::vector<std::string>& bad) {
  if (cs.buses.empty()) bad.push_back("bus list is empty");
  if (cs.bases.s_mva <= 0) bad.push_back("per-unit power base must be positive");
  if (cs.bases.v_kv <= 0) bad.push_back("per-unit voltage base must be positive");

  std::set<int> ids;
  for (const auto& b : cs.buses) {
    if (!ids.insert(b.id).second)
      bad.push_back(strf("duplicate bus id %d", b.id));
    if (b.g_s < 0) bad.push_back(strf("bus %d: shunt conductance g_s < 0", b.id));
  }
  auto known = [&](int id) { return ids.count(id) > 0; };

  std::set<std::string> brids;
  for (const auto& br : cs.branches) {
    if (!brids.insert(br.id).second)
      bad.push_back("duplicate branch id " + br.id);
    if (!known(br.from))
      bad.push_back(strf("branch %s references missing bus %d", br.id.c_str(), br.from));
    if (!known(br.to))
      bad.push_back(strf("branch %s references missing bus %d", br.id.c_str(), br.to));
    if (br.from == br.to)
      bad.push_back("branch " + br.id + " endpoints coincide");
    if (br.g_b < 0) bad.push_back("branch " + br.id + ": series conductance g_b < 0");
    if (br.g_lc < 0) bad.push_back("branch " + br.id + ": line-charging conductance < 0");
    if (br.s_max <= 0) bad.push_back("branch " + br.id + ": thermal limit must be > 0");
    if (br.theta_max <= 0) bad.push_back("branch " + br.id + ": angle bound must be > 0");
    if (br.tcsc) {
      const auto& t = *br.tcsc;
      if (!(t.b_min <= t.b0 && t.b0 <= t.b_max))
        bad.push_back("branch " + br.id + ": TCSC susceptance bounds must satisfy b_min <= b0 <= b_max");
    }
  }

  int n_slack = 0;
  for (const auto& g : cs.generators) {
    if (!known(g.bus))
      bad.push_back("generator " + g.id + strf(" references missing bus %d", g.bus));
    if (g.slack) {
      ++n_slack;
      if (g.kind != GenKind::Sg) bad.push_back("slack generator " + g.id + " must be an SG");
    }
    if (g.kind == GenKind::Sg && (g.x_q <= 0 || g.x_sub <= 0))
      bad.push_back("generator " + g.id + ": SG reactances must be positive");
    if (g.kind == GenKind::Cig && (g.x_cl <= 0 || g.x_cc <= 0))
      bad.push_back("generator " + g.id + ": CIG filter reactances must be positive");
    if (g.has_ess && g.kind != GenKind::Cig)
      bad.push_back("generator " + g.id + ": only CIGs may carry an ESS");
    if (g.v_min > g.v_max || g.q_min > g.q_max || g.p_min > g.p_max ||
        g.m_min > g.m_max || g.d_min > g.d_max)
      bad.push_back("generator " + g.id + ": a lower bound exceeds its upper bound");
    if (g.kind == GenKind::Cig && (g.m_cg <= 0 || g.d_cg <= 0))
      bad.push_back("generator " + g.id + ": virtual inertia and damping must be positive");
  }
  if (!cs.generators.empty() && n_slack != 1)
    bad.push_back(strf("exactly one slack generator required, found %d", n_slack));

  for (const auto& l : cs.loads) {
    if (!known(l.bus)) bad.push_back("load " + l.id + strf(" references missing bus %d", l.bus));
    double sp = l.alpha_p + l.beta_p + l.gamma_p + l.eps_p;
    double sq = l.alpha_q + l.beta_q + l.gamma_q + l.eps_q;
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
      bad.push_back("load " + l.id + ": ZIP-IM weights must sum to 1");
    if (l.v0 <= 0) bad.push_back("load " + l.id + ": reference voltage must be positive");
    if (l.has_im() && (l.r_s <= 0 || l.x_m <= 0))
      bad.push_back("load " + l.id + ": IM impedance parameters must be positive");
  }

  for (const auto& d : cs.dvcs) {
    if (!known(d.bus)) bad.push_back("dvc " + d.id + strf(" references missing bus %d", d.bus));
    if (d.v_min > d.v_max || d.q_min > d.q_max || d.b_min > d.b_max)
      bad.push_back("dvc " + d.id + ": a lower bound exceeds its upper bound");
    if (d.kind == DvcKind::Statcom && d.x_svg <= 0)
      bad.push_back("dvc " + d.id + ": STATCOM coupling reactance must be positive");
  }

  // Generators and DVCs both regulate their bus voltage; two regulators on
  // one bus would over-determine the steady-state system.
  std::map<int, int> pinners;
  for (const auto& g : cs.generators) pinners[g.bus]++;
  for (const auto& d : cs.dvcs) pinners[d.bus]++;
  for (const auto& [bus, n] : pinners)
    if (n > 1)
      bad.push_back(strf("bus %d hosts %d voltage-regulating devices; at most one allowed", bus, n));

  if (cs.limits.v_min > cs.limits.v_max)
    bad.push_back("voltage band lower bound exceeds upper bound");
  for (double e : {cs.limits.eps_rsi_sg, cs.limits.eps_rsi_im})
    if (e <= 0 || e > 1) bad.push_back("RSI fractions must lie in (0, 1]");

  std::set<int> tset;
  for (int t : cs.tcsc_branches) {
    if (t < 0 || t >= cs.n_branch())
      bad.push_back(strf("TCSC branch index %d out of range", t));
    else if (!cs.branches[t].tcsc)
      bad.push_back("branch " + cs.branches[t].id + " listed as TCSC but has no susceptance range");
    if (!tset.insert(t).second) bad.push_back("at most one TCSC per branch");
  }
}

}  // namespace

NetworkCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open case file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("case file " + path + ": " + e.what());
  }

  NetworkCase cs;
  try {
    if (j.value("format_version", 1) != 1)
      throw ParseError("unsupported case format_version");
    cs.name = j.value("name", "unnamed");
    if (j.contains("bases")) {
      cs.bases.s_mva = get_num(j["bases"], "s_mva", 100.0);
      cs.bases.v_kv = get_num(j["bases"], "v_kv", 230.0);
    }
    for (const auto& jb : j.value("buses", json::array())) {
      Bus b;
      b.id = jb.at("id").get<int>();
      std::string k = jb.value("type", "junction");
      b.kind = k == "generator" ? BusKind::Generator
                                : (k == "load" ? BusKind::Load : BusKind::Junction);
      b.g_s = get_num(jb, "g_s", 0.0);
      b.b_s = get_num(jb, "b_s", 0.0);
      cs.buses.push_back(b);
    }
    for (const auto& jb : j.value("branches", json::array())) {
      Branch br;
      br.id = jb.at("id").get<std::string>();
      br.from = jb.at("from").get<int>();
      br.to = jb.at("to").get<int>();
      read_admittance(jb, br);
      br.g_lc = get_num(jb, "g_lc", 0.0);
      br.b_lc = get_num(jb, "b_lc", 0.0);
      br.s_max = get_num(jb, "s_max", 10.0);
      br.theta_max = jb.contains("theta_max_deg")
                         ? deg2rad(jb["theta_max_deg"].get<double>())
                         : get_num(jb, "theta_max", 0.5);
      br.switchable = jb.value("switchable", true);
      br.non_participating = jb.value("non_participating", false);
      if (jb.contains("tcsc")) {
        TcscRange t;
        t.b_min = jb["tcsc"].at("b_min").get<double>();
        t.b_max = jb["tcsc"].at("b_max").get<double>();
        t.b0 = jb["tcsc"].value("b0", br.b_b);
        br.tcsc = t;
      }
      cs.branches.push_back(br);
    }
    for (const auto& jg : j.value("generators", json::array())) {
      Generator g;
      g.id = jg.at("id").get<std::string>();
      g.bus = jg.at("bus").get<int>();
      g.kind = jg.value("kind", "sg") == std::string("cig") ? GenKind::Cig : GenKind::Sg;
      g.slack = jg.value("slack", false);
      g.has_ess = jg.value("has_ess", false);
      g.x_q = get_num(jg, "x_q", 1.0);
      g.x_sub = get_num(jg, "x_sub", 0.2);
      g.r_c = get_num(jg, "r_c", 0.01);
      g.x_cl = get_num(jg, "x_cl", 0.1);
      g.x_cc = get_num(jg, "x_cc", 10.0);
      g.inertia_h = get_num(jg, "inertia_h", 3.0);
      g.damping = get_num(jg, "damping", 2.0);
      g.t_sub = get_num(jg, "t_sub", 0.02);
      g.k_avr = get_num(jg, "k_avr", 5.0);
      g.t_gov = get_num(jg, "t_gov", 0.1);
      g.k_vreg = get_num(jg, "k_vreg", 5.0);
      g.m_cg = get_num(jg, "m_cg", 3.0);
      g.d_cg = get_num(jg, "d_cg", 10.0);
      g.m_min = get_num(jg, "m_min", 0.1);
      g.m_max = get_num(jg, "m_max", 30.0);
      g.d_min = get_num(jg, "d_min", 1.0);
      g.d_max = get_num(jg, "d_max", 30.0);
      g.p_set = get_num(jg, "p_set", 0.0);
      g.v_set = get_num(jg, "v_set", 1.0);
      g.v_min = get_num(jg, "v_min", 0.95);
      g.v_max = get_num(jg, "v_max", 1.1);
      g.p_min = get_num(jg, "p_min", g.p_set);
      g.p_max = get_num(jg, "p_max", g.p_set);
      g.q_min = get_num(jg, "q_min", -1e3);
      g.q_max = get_num(jg, "q_max", 1e3);
      g.s_max = get_num(jg, "s_max", 1e3);
      g.pf_min = get_num(jg, "pf_min", 0.0);
      g.p_rated = get_num(jg, "p_rated", std::max(1.0, std::abs(g.p_set)));
      cs.generators.push_back(g);
    }
    for (const auto& jl : j.value("loads", json::array())) {
      ZipImLoad l;
      l.id = jl.at("id").get<std::string>();
      l.bus = jl.at("bus").get<int>();
      l.p0 = jl.at("p0").get<double>();
      l.q0 = get_num(jl, "q0", 0.0);
      l.v0 = get_num(jl, "v0", 1.0);
      auto read_zip = [&](const char* key, double& a, double& b, double& g, double& e) {
        if (jl.contains(key)) {
          auto arr = jl[key];
          a = arr.at(0).get<double>();
          b = arr.at(1).get<double>();
          g = arr.at(2).get<double>();
          e = arr.size() > 3 ? arr.at(3).get<double>() : 0.0;
        }
      };
      read_zip("zip_p", l.alpha_p, l.beta_p, l.gamma_p, l.eps_p);
      read_zip("zip_q", l.alpha_q, l.beta_q, l.gamma_q, l.eps_q);
      l.r_s = get_num(jl, "r_s", 0.02);
      l.x_m = get_num(jl, "x_m", 0.15);
      l.inertia_h = get_num(jl, "inertia_h", 0.6);
      l.t_m0 = get_num(jl, "t_m0", 0.3);
      l.p_rated = get_num(jl, "p_rated", std::max(1.0, std::abs(l.p0)));
      cs.loads.push_back(l);
    }
    for (const auto& jd : j.value("dvcs", json::array())) {
      Dvc d;
      d.id = jd.at("id").get<std::string>();
      d.bus = jd.at("bus").get<int>();
      d.kind = jd.value("kind", "svc") == std::string("statcom") ? DvcKind::Statcom : DvcKind::Svc;
      d.v_set = get_num(jd, "v_set", 1.0);
      d.v_min = get_num(jd, "v_min", 0.95);
      d.v_max = get_num(jd, "v_max", 1.1);
      d.q_min = get_num(jd, "q_min", -1.0);
      d.q_max = get_num(jd, "q_max", 1.0);
      d.b_min = get_num(jd, "b_min", -1.0);
      d.b_max = get_num(jd, "b_max", 1.0);
      d.x_svg = get_num(jd, "x_svg", 0.1);
      d.t_reg = get_num(jd, "t_reg", d.kind == DvcKind::Svc ? 0.03 : 0.005);
      d.k_reg = get_num(jd, "k_reg", 20.0);
      cs.dvcs.push_back(d);
    }
    if (j.contains("limits")) {
      const auto& jl = j["limits"];
      cs.limits.v_min = get_num(jl, "v_min", 0.9);
      cs.limits.v_max = get_num(jl, "v_max", 1.1);
      cs.limits.eps_rsi_sg = get_num(jl, "eps_rsi_sg", 0.3);
      cs.limits.eps_rsi_im = get_num(jl, "eps_rsi_im", 0.3);
    }
  } catch (const json::exception& e) {
    throw ParseError("case file " + path + ": " + e.what());
  }

  for (int e = 0; e < cs.n_branch(); ++e)
    if (cs.branches[e].tcsc) cs.tcsc_branches.push_back(e);

  std::vector<std::string> bad;
  validate(cs, bad);
  if (!bad.empty()) throw ValidationError(bad);

  for (int i = 0; i < cs.n_bus(); ++i) cs.bus_index_map[cs.buses[i].id] = i;
  for (int e = 0; e < cs.n_branch(); ++e) cs.branch_index_map[cs.branches[e].id] = e;
  return cs;
}

Incidence incidence(const NetworkCase& cs) {
  const int nn = cs.n_bus(), ne = cs.n_branch();
  Incidence inc;
  inc.E = Mat::Zero(nn, ne);
  inc.Ef = Mat::Zero(nn, ne);
  inc.Et = Mat::Zero(nn, ne);
  for (int e = 0; e < ne; ++e) {
    int i = cs.bus_index(cs.branches[e].from);
    int j = cs.bus_index(cs.branches[e].to);
    inc.E(i, e) = 1.0;
    inc.E(j, e) = -1.0;
    inc.Ef(i, e) = 1.0;
    inc.Et(j, e) = -1.0;
  }
  inc.Etil = inc.E.cwiseAbs();

  inc.Eg = Mat::Zero(nn, static_cast<int>(cs.generators.size()));
  for (size_t g = 0; g < cs.generators.size(); ++g)
    inc.Eg(cs.bus_index(cs.generators[g].bus), static_cast<int>(g)) = 1.0;
  inc.Ed = Mat::Zero(nn, static_cast<int>(cs.loads.size()));
  for (size_t l = 0; l < cs.loads.size(); ++l)
    inc.Ed(cs.bus_index(cs.loads[l].bus), static_cast<int>(l)) = 1.0;
  inc.Ec = Mat::Zero(nn, static_cast<int>(cs.dvcs.size()));
  for (size_t d = 0; d < cs.dvcs.size(); ++d)
    inc.Ec(cs.bus_index(cs.dvcs[d].bus), static_cast<int>(d)) = 1.0;

  std::vector<int> np;
  for (int e = 0; e < ne; ++e)
    if (cs.branches[e].non_participating) np.push_back(e);
  inc.Enp = Mat::Zero(static_cast<int>(np.size()), ne);
  for (size_t r = 0; r < np.size(); ++r) inc.Enp(static_cast<int>(r), np[r]) = 1.0;
  return inc;
}

int topology_distance(const TopologyVector& z0, const TopologyVector& zT) {
  if (z0.size() != zT.size())
    throw std::invalid_argument("topology vectors differ in length");
  return (z0.z - zT.z).cwiseAbs().sum();
}

bool is_connected(const NetworkCase& cs, const TopologyVector& z) {
  const int nn = cs.n_bus();
  if (nn == 0) return true;
  if (z.size() != cs.n_branch())
    throw std::invalid_argument("topology vector length mismatch");
  std::vector<std::vector<int>> adj(nn);
  for (int e = 0; e < cs.n_branch(); ++e) {
    if (z.z(e) == 0) continue;
    int i = cs.bus_index(cs.branches[e].from);
    int j = cs.bus_index(cs.branches[e].to);
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  std::vector<char> seen(nn, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int v : adj[u])
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        stack.push_back(v);
      }
  }
  return count == nn;
}

TopologyVector topology_from_open(const NetworkCase& cs,
                                  const std::vector<std::string>& open_ids) {
  TopologyVector t;
  t.z = IVec::Ones(cs.n_branch());
  for (const auto& id : open_ids) t.z(cs.branch_index(id)) = 0;
  return t;
}

Vec AcvLayout::lower_s() const {
  Vec v(n_s());
  for (int i = 0; i < n_s(); ++i) v(i) = s_entries[i].lo;
  return v;
}
Vec AcvLayout::upper_s() const {
  Vec v(n_s());
  for (int i = 0; i < n_s(); ++i) v(i) = s_entries[i].hi;
  return v;
}
Vec AcvLayout::lower_t() const {
  Vec v(n_t());
  for (int i = 0; i < n_t(); ++i) v(i) = t_entries[i].lo;
  return v;
}
Vec AcvLayout::upper_t() const {
  Vec v(n_t());
  for (int i = 0; i < n_t(); ++i) v(i) = t_entries[i].hi;
  return v;
}

AcvLayout acv_layout(const NetworkCase& cs) {
  AcvLayout lay;
  lay.vg_offset = 0;
  for (const auto& g : cs.generators)
    lay.s_entries.push_back({"v_g." + g.id, g.v_min, g.v_max});
  lay.vg_count = static_cast<int>(cs.generators.size());

  lay.pess_offset = lay.n_s();
  for (size_t g = 0; g < cs.generators.size(); ++g)
    if (cs.generators[g].has_ess) {
      lay.s_entries.push_back(
          {"p_ess." + cs.generators[g].id, cs.generators[g].p_min, cs.generators[g].p_max});
      lay.ess_gen_indices.push_back(static_cast<int>(g));
    }
  lay.pess_count = lay.n_s() - lay.pess_offset;

  lay.vdvc_offset = lay.n_s();
  for (const auto& d : cs.dvcs)
    lay.s_entries.push_back({"v_dvc." + d.id, d.v_min, d.v_max});
  lay.vdvc_count = lay.n_s() - lay.vdvc_offset;

  lay.tcsc_offset = lay.n_s();
  for (int e : cs.tcsc_branches) {
    const auto& t = *cs.branches[e].tcsc;
    lay.s_entries.push_back({"b_tcsc." + cs.branches[e].id, t.b_min, t.b_max});
  }
  lay.tcsc_count = lay.n_s() - lay.tcsc_offset;

  for (size_t g = 0; g < cs.generators.size(); ++g)
    if (cs.generators[g].kind == GenKind::Cig) {
      lay.t_entries.push_back(
          {"m_cg." + cs.generators[g].id, cs.generators[g].m_min, cs.generators[g].m_max});
      lay.cig_gen_indices.push_back(static_cast<int>(g));
    }
  size_t n_cig = lay.cig_gen_indices.size();
  for (size_t k = 0; k < n_cig; ++k) {
    const auto& g = cs.generators[lay.cig_gen_indices[k]];
    lay.t_entries.push_back({"d_cg." + g.id, g.d_min, g.d_max});
  }
  return lay;
}

Vec initial_a_s(const NetworkCase& cs, const AcvLayout& lay) {
  Vec a(lay.n_s());
  int k = 0;
  for (const auto& g : cs.generators) a(k++) = g.v_set;
  for (int gi : lay.ess_gen_indices) a(k++) = cs.generators[gi].p_set;
  for (const auto& d : cs.dvcs) a(k++) = d.v_set;
  for (int e : cs.tcsc_branches) a(k++) = cs.branches[e].b_b;
  return a;
}

Vec initial_a_t(const NetworkCase& cs, const AcvLayout& lay) {
  Vec a(lay.n_t());
  size_t n_cig = lay.cig_gen_indices.size();
  for (size_t i = 0; i < n_cig; ++i) {
    a(static_cast<int>(i)) = cs.generators[lay.cig_gen_indices[i]].m_cg;
    a(static_cast<int>(n_cig + i)) = cs.generators[lay.cig_gen_indices[i]].d_cg;
  }
  return a;
}

std::string OutputSpec::label() const {
  switch (kind) {
    case Kind::BusVoltage: return strf("v.%d", bus);
    case Kind::GenPower: return "p_g." + device;
    case Kind::RotorAngle: return "delta." + device;
    case Kind::CigAngle: return "theta_m." + device;
    case Kind::RotorSpeed: return "omega." + device;
  }
  return "?";
}

namespace {

Vec read_weight(const json& j, const char* key, int n, double dflt) {
  if (!j.contains(key)) return Vec::Constant(n, dflt);
  const auto& v = j.at(key);
  if (v.is_number()) return Vec::Constant(n, v.get<double>());
  if (static_cast<int>(v.size()) != n)
    throw ParseError(strf("weight %s must be scalar or have %d entries", key, n));
  Vec out(n);
  for (int i = 0; i < n; ++i) out(i) = v.at(i).get<double>();
  return out;
}

}  // namespace

ScenarioSpec load_scenario(const std::string& path, const NetworkCase& cs) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open scenario file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("scenario file " + path + ": " + e.what());
  }

  ScenarioSpec sc;
  std::vector<std::string> bad;
  try {
    sc.name = j.value("name", "scenario");
    sc.case_path = j.value("case", "");
    sc.z0 = topology_from_open(cs, j.value("z0_open", std::vector<std::string>{}));
    sc.zT = topology_from_open(cs, j.value("zT_open", std::vector<std::string>{}));
    const auto lay = acv_layout(cs);
    sc.a0_s = initial_a_s(cs, lay);
    sc.a0_t = initial_a_t(cs, lay);
    if (j.contains("a0")) {
      for (auto it = j["a0"].begin(); it != j["a0"].end(); ++it) {
        bool hit = false;
        for (int k = 0; k < lay.n_s(); ++k)
          if (lay.s_entries[k].name == it.key()) {
            sc.a0_s(k) = it.value().get<double>();
            hit = true;
          }
        for (int k = 0; k < lay.n_t(); ++k)
          if (lay.t_entries[k].name == it.key()) {
            sc.a0_t(k) = it.value().get<double>();
            hit = true;
          }
        if (!hit) throw ParseError("a0 override names unknown ACV " + it.key());
      }
    }
    if (j.contains("budget")) {
      sc.budget.t_ad = get_num(j["budget"], "t_ad", 1.0);
      sc.budget.t_ls = get_num(j["budget"], "t_ls", 1.0);
      sc.budget.t_max = get_num(j["budget"], "t_max", 1.0);
    }
    sc.sigma_as = get_num(j, "sigma_as", 1.0);
    for (const auto& jo : j.value("outputs", json::array())) {
      OutputSpec o;
      std::string t = jo.at("type").get<std::string>();
      if (t == "bus_v") {
        o.kind = OutputSpec::Kind::BusVoltage;
        o.bus = jo.at("id").get<int>();
      } else {
        o.device = jo.at("id").get<std::string>();
        if (t == "gen_p") o.kind = OutputSpec::Kind::GenPower;
        else if (t == "rotor_angle") o.kind = OutputSpec::Kind::RotorAngle;
        else if (t == "cig_angle") o.kind = OutputSpec::Kind::CigAngle;
        else if (t == "speed") o.kind = OutputSpec::Kind::RotorSpeed;
        else throw ParseError("unknown output type " + t);
      }
      sc.outputs.push_back(o);
    }
    const int ny = static_cast<int>(sc.outputs.size());
    const json jw = j.value("weights", json::object());
    sc.weights.w_bd_l = read_weight(jw, "w_bd_l", ny, 1.0);
    sc.weights.w_bd_u = read_weight(jw, "w_bd_u", ny, 1.0);
    sc.weights.w_vl = read_weight(jw, "w_vl", ny, 1.0);
    sc.weights.w_ts = read_weight(jw, "w_ts", ny, 1.0);
    sc.weights.w_ts_scale = read_weight(jw, "w_ts_scale", ny, 1.0);
    sc.weights.w_as = read_weight(jw, "w_as", lay.n_s(), 1.0);
    sc.weights.delta_pen = get_num(jw, "delta_pen", 1e-8);
    if (j.contains("lin")) {
      const auto& jl = j["lin"];
      sc.lin.n_t = static_cast<int>(get_num(jl, "n_t", 3));
      sc.lin.n_p = static_cast<int>(get_num(jl, "n_p", 8));
      sc.lin.n_k = static_cast<int>(get_num(jl, "n_k", 8));
      sc.lin.vhat = get_num(jl, "vhat", 1.0);
      sc.lin.big_m = get_num(jl, "big_m", 0.0);
    }
    if (j.contains("sim")) {
      const auto& js = j["sim"];
      sc.sim.h = get_num(js, "h", 0.005);
      sc.sim.ramp_s = get_num(js, "ramp_s", 2.0);
      sc.sim.eps_settle = get_num(js, "eps_settle", 1e-4);
      sc.sim.dwell_s = get_num(js, "dwell_s", 1.0);
      sc.sim.horizon_s = get_num(js, "horizon_s", 30.0);
    }
    sc.pool = static_cast<int>(get_num(j, "pool", 1));
    sc.gap = get_num(j, "gap", 0.005);
    sc.freeze_acv = j.value("freeze_acv", false);
    sc.maximize = j.value("maximize", false);
    sc.seed = static_cast<unsigned>(get_num(j, "seed", 1));
  } catch (const json::exception& e) {
    throw ParseError("scenario file " + path + ": " + e.what());
  }

  if (sc.budget.t_ad <= 0 || sc.budget.t_ls <= 0 || sc.budget.t_max <= 0)
    bad.push_back("budget durations must be positive");
  if (sc.sigma_as <= 0) bad.push_back("sigma_as must be positive");
  if (sc.pool < 1) bad.push_back("pool size must be >= 1");
  if (sc.outputs.empty()) bad.push_back("at least one performance output required");
  if (sc.weights.delta_pen < 0) bad.push_back("delta_pen must be nonnegative");
  for (const Vec* w : {&sc.weights.w_bd_l, &sc.weights.w_bd_u, &sc.weights.w_vl,
                       &sc.weights.w_ts, &sc.weights.w_ts_scale, &sc.weights.w_as})
    if (w->size() > 0 && w->minCoeff() < 0) bad.push_back("weights must be nonnegative");
  if (!is_connected(cs, sc.z0)) bad.push_back("initial topology is disconnected");
  if (!is_connected(cs, sc.zT)) bad.push_back("final topology is disconnected");
  for (int e = 0; e < cs.n_branch(); ++e)
    if (!cs.branches[e].switchable &&
        (sc.z0.z(e) == 0 || sc.zT.z(e) == 0))
      bad.push_back("branch " + cs.branches[e].id + " is not switchable but open in z0/zT");
  if (!bad.empty()) throw ValidationError(bad);
  return sc;
}

}  // namespace btt::netcase
