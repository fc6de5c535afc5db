#include "btt/linpf.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "btt/acpf.hpp"

namespace btt::linpf {

using netcase::DvcKind;
using netcase::GenKind;

void LinearizationConfig::validate() const {
  std::vector<std::string> bad;
  if (big_m < 0) bad.push_back("bigM must be positive (or 0 for per-row derivation)");
  if (n_t < 1) bad.push_back("n_t must be >= 1");
  if (n_p < 2) bad.push_back("n_p must be >= 2");
  if (n_k < 2) bad.push_back("n_k must be >= 2");
  if (vhat <= 0) bad.push_back("vhat must be positive");
  if (!bad.empty()) throw ValidationError(bad);
}

LinTerm& LinTerm::operator+=(const LinTerm& o) {
  constant += o.constant;
  for (auto& [i, c] : o.terms)
    if (c != 0.0) terms.push_back({i, c});
  return *this;
}
LinTerm& LinTerm::operator-=(const LinTerm& o) {
  constant -= o.constant;
  for (auto& [i, c] : o.terms)
    if (c != 0.0) terms.push_back({i, -c});
  return *this;
}
LinTerm& LinTerm::operator*=(double s) {
  constant *= s;
  if (s == 0.0) {
    terms.clear();
    return *this;
  }
  for (auto& [i, c] : terms) c *= s;
  return *this;
}

VoltageProfile VoltageProfile::flat(const NetworkCase& cs, double vhat) {
  VoltageProfile vp;
  vp.bus = Vec::Constant(cs.n_bus(), vhat);
  vp.sg_e = Vec::Constant(cs.generators.size(), vhat);
  vp.sg_es = Vec::Constant(cs.generators.size(), vhat);
  vp.cig_vm = Vec::Constant(cs.generators.size(), vhat);
  vp.im_em = Vec::Constant(cs.loads.size(), vhat);
  vp.st_vs = Vec::Constant(cs.dvcs.size(), vhat);
  return vp;
}

VoltageProfile VoltageProfile::from_solution(const NetworkCase& cs,
                                             const acpf::SteadyStateSolution& sol) {
  VoltageProfile vp = flat(cs, 1.0);
  vp.bus = sol.v;
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    if (cs.generators[g].kind == GenKind::Sg) {
      vp.sg_e(g) = sol.e(g);
      vp.sg_es(g) = sol.es(g);
    } else {
      vp.cig_vm(g) = sol.vm(g);
    }
  }
  for (size_t l = 0; l < cs.loads.size(); ++l)
    if (cs.loads[l].has_im()) vp.im_em(l) = sol.em(l);
  for (size_t d = 0; d < cs.dvcs.size(); ++d)
    if (cs.dvcs[d].kind == DvcKind::Statcom) vp.st_vs(d) = sol.vs(d);
  return vp;
}

int ConstraintSystem::add_var(const std::string& name, double lo, double hi) {
  if (index_.count(name)) throw std::logic_error("duplicate variable " + name);
  int idx = n_vars();
  names_.push_back(name);
  lo_.push_back(lo);
  hi_.push_back(hi);
  binary_.push_back(false);
  index_[name] = idx;
  return idx;
}

int ConstraintSystem::add_binary(const std::string& name) {
  int idx = add_var(name, 0.0, 1.0);
  binary_[idx] = true;
  binary_list_.push_back(idx);
  return idx;
}

int ConstraintSystem::var(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown variable " + name);
  return it->second;
}

bool ConstraintSystem::has_var(const std::string& name) const {
  return index_.count(name) > 0;
}

void ConstraintSystem::add_eq(LinTerm t, const std::string& name) {
  eqs_.push_back({std::move(t), name});
}
void ConstraintSystem::add_le(LinTerm t, const std::string& name) {
  les_.push_back({std::move(t), name});
}
void ConstraintSystem::add_soc(LinTerm head, std::vector<LinTerm> tail,
                               const std::string& name) {
  socs_.push_back({std::move(head), std::move(tail), name});
}
void ConstraintSystem::add_sos2(std::vector<int> lambdas, const std::string& name) {
  sos2_.push_back({std::move(lambdas), name});
}
void ConstraintSystem::obj_add(LinTerm t) { obj_ += t; }

void ConstraintSystem::lower_sos2() {
  if (sos2_lowered_) return;
  sos2_lowered_ = true;
  for (auto& grp : sos2_) {
    const int np = static_cast<int>(grp.lambdas.size());  // grid points
    const int ni = np - 1;                                // intervals
    const int nb = ni <= 1 ? 0 : static_cast<int>(std::ceil(std::log2(ni)));
    if (nb == 0) continue;
    // Gray codes keep adjacent intervals one bit apart, which makes the
    // two-sided membership rows valid for SOS2.
    std::vector<unsigned> code(ni);
    for (int j = 0; j < ni; ++j) code[j] = static_cast<unsigned>(j ^ (j >> 1));
    std::vector<int> ybits(nb);
    for (int b = 0; b < nb; ++b)
      ybits[b] = add_binary(grp.name + strf(".y%d", b));
    grp.ybits = ybits;
    for (int b = 0; b < nb; ++b) {
      // lambda_v may be nonzero only if some incident interval has bit b set
      // (resp. cleared).
      LinTerm up, dn;
      for (int v = 0; v < np; ++v) {
        bool any_set = false, any_clear = false;
        for (int j : {v - 1, v}) {
          if (j < 0 || j >= ni) continue;
          if (code[j] & (1u << b)) any_set = true;
          else any_clear = true;
        }
        if (!any_set) up.add(grp.lambdas[v], 1.0);    // sum <= 1 - y_b
        if (!any_clear) dn.add(grp.lambdas[v], 1.0);  // sum <= y_b
      }
      up.add(ybits[b], 1.0);
      up.constant -= 1.0;
      add_le(up, grp.name + strf(".up%d", b));
      dn.add(ybits[b], -1.0);
      add_le(dn, grp.name + strf(".dn%d", b));
    }
  }
}

double ConstraintSystem::eval(const LinTerm& t, const Vec& x) const {
  double v = t.constant;
  for (auto& [i, c] : t.terms) v += c * x(i);
  return v;
}

double ConstraintSystem::max_violation(const Vec& x) const {
  double worst = 0.0;
  for (const auto& [t, nm] : eqs_) worst = std::max(worst, std::abs(eval(t, x)));
  for (const auto& [t, nm] : les_) worst = std::max(worst, eval(t, x));
  for (const auto& s : socs_) {
    double nrm = 0;
    for (const auto& t : s.tail) {
      double v = eval(t, x);
      nrm += v * v;
    }
    worst = std::max(worst, std::sqrt(nrm) - eval(s.head, x));
  }
  for (int i = 0; i < n_vars(); ++i) {
    if (std::isfinite(lo_[i])) worst = std::max(worst, lo_[i] - x(i));
    if (std::isfinite(hi_[i])) worst = std::max(worst, x(i) - hi_[i]);
  }
  return worst;
}

socp::Problem ConstraintSystem::compile(const std::map<int, int>& fixed) const {
  socp::Problem p;
  const int n = n_vars();
  std::vector<double> lo(lo_), hi(hi_);
  bool bad = false;
  for (const auto& [bi, val] : fixed) {
    lo[bi] = static_cast<double>(val);
    hi[bi] = static_cast<double>(val);
  }

  // Bound-tightening presolve: absorb rows that reduce to a single free
  // variable once pinned values are substituted. Fixed binaries cascade
  // through the big-M envelopes this way, keeping the cone interior clean.
  auto pinned = [&](int i) { return lo[i] == hi[i] && std::isfinite(lo[i]); };
  std::vector<char> eq_done(eqs_.size(), 0), le_done(les_.size(), 0);
  for (int pass = 0; pass < 12; ++pass) {
    bool changed = false;
    auto reduce = [&](const LinTerm& t, int& var, double& coef, double& cons) {
      var = -1;
      coef = 0;
      cons = t.constant;
      for (auto& [i, c] : t.terms) {
        if (c == 0.0) continue;
        if (pinned(i)) {
          cons += c * lo[i];
        } else if (var == -1 || var == i) {
          var = i;
          coef += c;
        } else {
          return 2;  // two or more distinct free variables
        }
      }
      if (var == -1 || coef == 0.0) return 0;
      return 1;
    };
    for (size_t r = 0; r < eqs_.size(); ++r) {
      if (eq_done[r]) continue;
      int var;
      double coef, cons;
      int nf = reduce(eqs_[r].first, var, coef, cons);
      if (nf == 0) {
        if (std::abs(cons) > 1e-9) bad = true;
        eq_done[r] = 1;
        changed = true;
      } else if (nf == 1) {
        const double val = -cons / coef;
        if (val < lo[var] - 1e-9 || val > hi[var] + 1e-9) bad = true;
        lo[var] = val;
        hi[var] = val;
        eq_done[r] = 1;
        changed = true;
      }
    }
    for (size_t r = 0; r < les_.size(); ++r) {
      if (le_done[r]) continue;
      int var;
      double coef, cons;
      int nf = reduce(les_[r].first, var, coef, cons);
      if (nf == 0) {
        if (cons > 1e-9) bad = true;
        le_done[r] = 1;
        changed = true;
      } else if (nf == 1) {
        // coef*var + cons <= 0
        if (coef > 0) hi[var] = std::min(hi[var], -cons / coef);
        else lo[var] = std::max(lo[var], -cons / coef);
        if (lo[var] > hi[var] + 1e-9) bad = true;
        if (lo[var] > hi[var]) {  // collapse tiny inversions
          const double m = 0.5 * (lo[var] + hi[var]);
          lo[var] = m;
          hi[var] = m;
        }
        le_done[r] = 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
  p.infeasible_presolve = bad;

  std::vector<Triplet> ta, tg;
  std::vector<double> bvals, hvals;
  int arow = 0;

  auto push_eq_subst = [&](const LinTerm& t) {
    double rhs = -t.constant;
    for (auto& [i, c] : t.terms) {
      if (pinned(i)) rhs -= c * lo[i];
      else ta.emplace_back(arow, i, c);
    }
    bvals.push_back(rhs);
    ++arow;
  };
  for (size_t r = 0; r < eqs_.size(); ++r)
    if (!eq_done[r]) push_eq_subst(eqs_[r].first);
  for (int i = 0; i < n; ++i)
    if (pinned(i)) {
      LinTerm t = LinTerm::var(i);
      t.constant = -lo[i];
      ta.emplace_back(arow, i, 1.0);
      bvals.push_back(lo[i]);
      ++arow;
      (void)t;
    }

  int grow = 0;
  auto push_le_subst = [&](const LinTerm& t) {
    double rhs = -t.constant;
    for (auto& [i, c] : t.terms) {
      if (pinned(i)) rhs -= c * lo[i];
      else tg.emplace_back(grow, i, c);
    }
    hvals.push_back(rhs);
    ++grow;
  };
  for (size_t r = 0; r < les_.size(); ++r)
    if (!le_done[r]) push_le_subst(les_[r].first);
  for (int i = 0; i < n; ++i) {
    if (pinned(i)) continue;
    if (std::isfinite(lo[i])) {
      LinTerm t;
      t.add(i, -1.0);
      t.constant = lo[i];
      push_le_subst(t);
    }
    if (std::isfinite(hi[i])) {
      LinTerm t;
      t.add(i, 1.0);
      t.constant = -hi[i];
      push_le_subst(t);
    }
  }
  if (grow == 0 && socs_.empty()) {
    // Degenerate fully pinned system: keep one vacuous row so the conic
    // solver always has a cone to work with.
    hvals.push_back(1.0);
    ++grow;
  }
  p.cone.l = grow;
  for (const auto& s : socs_) {
    double rhs = s.head.constant;
    for (auto& [i, c] : s.head.terms) {
      if (pinned(i)) rhs += c * lo[i];
      else tg.emplace_back(grow, i, -c);
    }
    hvals.push_back(rhs);
    ++grow;
    for (const auto& t : s.tail) {
      double trhs = t.constant;
      for (auto& [i, c] : t.terms) {
        if (pinned(i)) trhs += c * lo[i];
        else tg.emplace_back(grow, i, -c);
      }
      hvals.push_back(trhs);
      ++grow;
    }
    p.cone.q.push_back(static_cast<int>(s.tail.size()) + 1);
  }

  p.A.resize(arow, n);
  p.A.setFromTriplets(ta.begin(), ta.end());
  p.A.makeCompressed();
  p.G.resize(grow, n);
  p.G.setFromTriplets(tg.begin(), tg.end());
  p.G.makeCompressed();
  p.b = Eigen::Map<Vec>(bvals.data(), arow);
  p.h = Eigen::Map<Vec>(hvals.data(), grow);
  p.c.setZero(n);
  for (auto& [i, c] : obj_.terms) p.c(i) += c;
  return p;
}

socp::Problem ConstraintSystem::compile_elastic(const std::map<int, int>& fixed) const {
  socp::Problem p;
  const int n = n_vars();
  const int tvar = n;  // appended slack
  std::vector<Triplet> ta, tg;
  std::vector<double> bvals, hvals;
  int arow = 0, grow = 0;

  for (const auto& [bi, val] : fixed) {
    ta.emplace_back(arow, bi, 1.0);
    bvals.push_back(static_cast<double>(val));
    ++arow;
  }
  for (int i = 0; i < n; ++i)
    if (std::isfinite(lo_[i]) && lo_[i] == hi_[i]) {
      ta.emplace_back(arow, i, 1.0);
      bvals.push_back(lo_[i]);
      ++arow;
    }
  auto push_le = [&](const LinTerm& t, bool elastic) {
    for (auto& [i, c] : t.terms) tg.emplace_back(grow, i, c);
    if (elastic) tg.emplace_back(grow, tvar, -1.0);
    hvals.push_back(-t.constant);
    ++grow;
  };
  for (const auto& [t, nm] : eqs_) {
    push_le(t, true);
    LinTerm neg = -1.0 * LinTerm(t);
    push_le(neg, true);
  }
  for (const auto& [t, nm] : les_) push_le(t, true);
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(lo_[i]) && lo_[i] == hi_[i]) continue;
    if (std::isfinite(lo_[i])) {
      LinTerm t;
      t.add(i, -1.0);
      t.constant = lo_[i];
      push_le(t, false);
    }
    if (std::isfinite(hi_[i])) {
      LinTerm t;
      t.add(i, 1.0);
      t.constant = -hi_[i];
      push_le(t, false);
    }
  }
  {
    LinTerm t;  // t >= 0
    t.add(tvar, -1.0);
    push_le(t, false);
  }
  p.cone.l = grow;
  for (const auto& s : socs_) {
    for (auto& [i, c] : s.head.terms) tg.emplace_back(grow, i, -c);
    hvals.push_back(s.head.constant);
    ++grow;
    for (const auto& t : s.tail) {
      for (auto& [i, c] : t.terms) tg.emplace_back(grow, i, -c);
      hvals.push_back(t.constant);
      ++grow;
    }
    p.cone.q.push_back(static_cast<int>(s.tail.size()) + 1);
  }

  p.A.resize(arow, n + 1);
  p.A.setFromTriplets(ta.begin(), ta.end());
  p.A.makeCompressed();
  p.G.resize(grow, n + 1);
  p.G.setFromTriplets(tg.begin(), tg.end());
  p.G.makeCompressed();
  p.b = Eigen::Map<Vec>(bvals.data(), arow);
  p.h = Eigen::Map<Vec>(hvals.data(), grow);
  p.c = Vec::Zero(n + 1);
  p.c(tvar) = 1.0;
  return p;
}

namespace {

std::string lp_name(const std::string& n) {
  std::string o = n;
  for (char& c : o)
    if (c == '[' || c == ']' || c == ' ' || c == '-') c = '_';
  return o;
}

void lp_expr(std::ostream& os, const ConstraintSystem& sys, const LinTerm& t) {
  bool first = true;
  for (auto& [i, c] : t.terms) {
    if (c == 0) continue;
    os << (c < 0 ? " - " : (first ? " " : " + ")) << std::abs(c) << " "
       << lp_name(sys.name(i));
    first = false;
  }
  if (first) os << " 0 " << lp_name(sys.name(0));
}

}  // namespace

std::string ConstraintSystem::export_lp(const std::map<int, int>& fixed) const {
  std::ostringstream os;
  os.precision(17);
  os << "\\ generated constraint system\n";
  os << "Minimize\n obj:";
  lp_expr(os, *this, obj_);
  os << "\nSubject To\n";
  int k = 0;
  for (const auto& [t, nm] : eqs_) {
    os << " e" << k++ << "_" << lp_name(nm) << ":";
    lp_expr(os, *this, t);
    os << " = " << -t.constant << "\n";
  }
  k = 0;
  for (const auto& [t, nm] : les_) {
    os << " l" << k++ << "_" << lp_name(nm) << ":";
    lp_expr(os, *this, t);
    os << " <= " << -t.constant << "\n";
  }
  k = 0;
  for (const auto& s : socs_) {
    // ||tail||^2 <= head^2 with head >= 0, written as a quadratic row over
    // auxiliary equalities.
    os << "\\ cone row " << lp_name(s.name) << " handled via aux variables\n";
    std::string hn = strf("soch%d", k), base = strf("soct%d_", k);
    os << " qh" << k << ":";
    lp_expr(os, *this, s.head);
    os << " - " << hn << " = " << -s.head.constant << "\n";
    for (size_t j = 0; j < s.tail.size(); ++j) {
      os << " qt" << k << "_" << j << ":";
      lp_expr(os, *this, s.tail[j]);
      os << " - " << base << j << " = " << -s.tail[j].constant << "\n";
    }
    os << " qc" << k << ": [";
    for (size_t j = 0; j < s.tail.size(); ++j)
      os << (j ? " + " : " ") << base << j << " ^2";
    os << " - " << hn << " ^2 ] <= 0\n";
    ++k;
  }
  for (const auto& [bi, val] : fixed)
    os << " fix_" << lp_name(name(bi)) << ": " << lp_name(name(bi)) << " = " << val
       << "\n";
  os << "Bounds\n";
  for (int i = 0; i < n_vars(); ++i) {
    if (binary_[i]) continue;
    os << " ";
    if (std::isfinite(lo_[i])) os << lo_[i] << " <= ";
    else os << "-inf <= ";
    os << lp_name(names_[i]);
    if (std::isfinite(hi_[i])) os << " <= " << hi_[i];
    os << "\n";
  }
  k = 0;
  for (const auto& s : socs_) {
    os << " soch" << k << " >= 0\n";
    os << " -inf <= soct" << k << "_0\n";
    ++k;
  }
  if (!binary_list_.empty()) {
    os << "Binary\n";
    for (int i : binary_list_) os << " " << lp_name(names_[i]) << "\n";
  }
  os << "End\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Builders.

PointVars register_point(ConstraintSystem& sys, const NetworkCase& cs,
                         const std::string& tag, const LinearizationConfig& cfg) {
  (void)cfg;
  PointVars pv;
  const int nn = cs.n_bus(), ne = cs.n_branch();
  const int ng = static_cast<int>(cs.generators.size());
  const int nl = static_cast<int>(cs.loads.size());
  const int nd = static_cast<int>(cs.dvcs.size());
  auto neg = [](int n) { return IVec::Constant(n, -1); };
  pv.v = neg(nn); pv.th = neg(nn);
  pv.pfb = neg(ne); pv.qfb = neg(ne); pv.ptb = neg(ne); pv.qtb = neg(ne);
  pv.pg = neg(ng); pv.qg = neg(ng);
  pv.epsp = neg(nl); pv.epsq = neg(nl);
  pv.qc = neg(nd); pv.bsvc = neg(nd);
  pv.e = neg(ng); pv.de = neg(ng); pv.es = neg(ng); pv.des = neg(ng);
  pv.vm = neg(ng); pv.thm = neg(ng);
  pv.em = neg(nl); pv.dem = neg(nl);
  pv.vs = neg(nd); pv.ths = neg(nd);
  pv.b_tcsc = neg(static_cast<int>(cs.tcsc_branches.size()));

  const double vlo = cs.limits.v_min, vhi = cs.limits.v_max;
  const double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < nn; ++i) {
    pv.v(i) = sys.add_var(strf("v[%s].%d", tag.c_str(), cs.buses[i].id), vlo, vhi);
    pv.th(i) = sys.add_var(strf("th[%s].%d", tag.c_str(), cs.buses[i].id), -kPi, kPi);
  }
  for (int e = 0; e < ne; ++e) {
    const double sb = cs.branches[e].s_max;
    pv.pfb(e) = sys.add_var(strf("pfb[%s].%s", tag.c_str(), cs.branches[e].id.c_str()),
                            -1.5 * sb, 1.5 * sb);
    pv.qfb(e) = sys.add_var(strf("qfb[%s].%s", tag.c_str(), cs.branches[e].id.c_str()),
                            -1.5 * sb, 1.5 * sb);
    pv.ptb(e) = sys.add_var(strf("ptb[%s].%s", tag.c_str(), cs.branches[e].id.c_str()),
                            -1.5 * sb, 1.5 * sb);
    pv.qtb(e) = sys.add_var(strf("qtb[%s].%s", tag.c_str(), cs.branches[e].id.c_str()),
                            -1.5 * sb, 1.5 * sb);
  }
  for (int g = 0; g < ng; ++g) {
    const auto& gen = cs.generators[g];
    pv.pg(g) = sys.add_var(strf("pg[%s].%s", tag.c_str(), gen.id.c_str()), -inf, inf);
    pv.qg(g) = sys.add_var(strf("qg[%s].%s", tag.c_str(), gen.id.c_str()), -inf, inf);
    if (gen.kind == GenKind::Sg) {
      pv.e(g) = sys.add_var(strf("e[%s].%s", tag.c_str(), gen.id.c_str()), 0.2, 3.0);
      pv.de(g) = sys.add_var(strf("de[%s].%s", tag.c_str(), gen.id.c_str()), -kPi, kPi);
      pv.es(g) = sys.add_var(strf("es[%s].%s", tag.c_str(), gen.id.c_str()), 0.2, 3.0);
      pv.des(g) = sys.add_var(strf("des[%s].%s", tag.c_str(), gen.id.c_str()), -kPi, kPi);
    } else {
      pv.vm(g) = sys.add_var(strf("vmod[%s].%s", tag.c_str(), gen.id.c_str()), 0.5, 1.5);
      pv.thm(g) = sys.add_var(strf("thm[%s].%s", tag.c_str(), gen.id.c_str()), -kPi, kPi);
    }
  }
  for (int l = 0; l < nl; ++l) {
    const auto& ld = cs.loads[l];
    pv.epsp(l) = sys.add_var(strf("epsp[%s].%s", tag.c_str(), ld.id.c_str()), -1.0, 2.0);
    pv.epsq(l) = sys.add_var(strf("epsq[%s].%s", tag.c_str(), ld.id.c_str()), -1.0, 2.0);
    if (ld.has_im()) {
      pv.em(l) = sys.add_var(strf("em[%s].%s", tag.c_str(), ld.id.c_str()), 0.2, 2.0);
      pv.dem(l) = sys.add_var(strf("dem[%s].%s", tag.c_str(), ld.id.c_str()), -kPi, kPi);
    }
  }
  for (int d = 0; d < nd; ++d) {
    const auto& dvc = cs.dvcs[d];
    pv.qc(d) = sys.add_var(strf("qc[%s].%s", tag.c_str(), dvc.id.c_str()), dvc.q_min,
                           dvc.q_max);
    if (dvc.kind == DvcKind::Svc) {
      pv.bsvc(d) = sys.add_var(strf("bsvc[%s].%s", tag.c_str(), dvc.id.c_str()),
                               dvc.b_min, dvc.b_max);
    } else {
      pv.vs(d) = sys.add_var(strf("vsvg[%s].%s", tag.c_str(), dvc.id.c_str()), 0.5, 1.5);
      pv.ths(d) = sys.add_var(strf("thsvg[%s].%s", tag.c_str(), dvc.id.c_str()), -kPi, kPi);
    }
  }
  return pv;
}

TcscEncoding encode_tcsc(ConstraintSystem& sys, const NetworkCase& cs, int branch,
                         const LinearizationConfig& cfg, const std::string& tag) {
  const auto& br = cs.branches[branch];
  if (!br.tcsc) throw std::invalid_argument("branch has no TCSC range");
  TcscEncoding enc;
  enc.b_lo = br.tcsc->b_min;
  enc.b_hi = br.tcsc->b_max;
  const int nt = cfg.n_t;
  const double step = (enc.b_hi - enc.b_lo) / std::pow(2.0, nt);
  const double off0 = br.tcsc->b0 - enc.b_lo;

  // The b0 offset entry is redundant when it coincides with the binary grid
  // (and is not the full range): drop it.
  const double ratio = off0 / step;
  const bool drop_first = std::abs(ratio - std::round(ratio)) < 1e-12 &&
                          std::abs(off0 - (enc.b_hi - enc.b_lo)) > 1e-12;

  std::vector<double> tau;
  if (!drop_first) tau.push_back(off0);
  for (int k = 1; k <= nt; ++k) tau.push_back(std::pow(2.0, k - 1) * step);
  const int m = static_cast<int>(tau.size());
  enc.tau = Eigen::Map<Vec>(tau.data(), m);
  for (int k = 0; k < m; ++k)
    enc.eta.push_back(
        sys.add_binary(strf("eta[%s].%s.%d", tag.c_str(), br.id.c_str(), k)));

  // Enumerate feasible breakpoints.
  for (unsigned mask = 0; mask < (1u << m); ++mask) {
    double b = enc.b_lo;
    IVec code(m);
    for (int k = 0; k < m; ++k) {
      code(k) = (mask >> k) & 1;
      b += code(k) * enc.tau(k);
    }
    if (b > enc.b_hi + 1e-12) continue;
    enc.codes.push_back(code);
  }
  {
    LinTerm row(enc.b_lo - enc.b_hi);
    for (int k = 0; k < m; ++k) row.add(enc.eta[k], enc.tau(k));
    sys.add_le(row, strf("%s.%s.bfeas", tag.c_str(), br.id.c_str()));
  }
  enc.ghat.resize(enc.n_bp());
  for (int i = 0; i < enc.n_bp(); ++i) {
    double b = enc.b_lo;
    for (int k = 0; k < m; ++k) b += enc.codes[i](k) * enc.tau(k);
    enc.ghat(i) = acpf::branch_admittance(br, b).g;
  }
  return enc;
}

std::pair<LinTerm, LinTerm> tcsc_products(ConstraintSystem& sys, const TcscEncoding& enc,
                                          const LinTerm& diff, double d_lo, double d_hi,
                                          const std::string& tag) {
  const int m = static_cast<int>(enc.eta.size());
  // mu_k = diff * eta_k via big-M style envelope rows (exact for binary eta).
  LinTerm bprod = enc.b_lo * diff;
  for (int k = 0; k < m; ++k) {
    int mu = sys.add_var(strf("mu[%s].%d", tag.c_str(), k),
                         std::min(0.0, d_lo), std::max(0.0, d_hi));
    LinTerm mt = LinTerm::var(mu);
    sys.add_le(d_lo * LinTerm::var(enc.eta[k]) - mt, tag + strf(".mu_lo%d", k));
    sys.add_le(mt - d_hi * LinTerm::var(enc.eta[k]), tag + strf(".mu_hi%d", k));
    LinTerm rest = diff - mt;  // diff*(1 - eta)
    LinTerm one_m(1.0);
    one_m.add(enc.eta[k], -1.0);
    sys.add_le(d_lo * one_m - rest, tag + strf(".mr_lo%d", k));
    sys.add_le(rest - d_hi * one_m, tag + strf(".mr_hi%d", k));
    bprod += enc.tau(k) * mt;
  }
  // g-product through per-breakpoint rows: rho_i pinched to diff*ghat_i when
  // eta equals the i-th code.
  const double glo = enc.ghat.minCoeff(), ghi = enc.ghat.maxCoeff();
  const double lo = std::min(d_lo * glo, std::min(d_lo * ghi, std::min(d_hi * glo, d_hi * ghi)));
  const double hi = std::max(d_lo * glo, std::max(d_lo * ghi, std::max(d_hi * glo, d_hi * ghi)));
  const double range = hi - lo;
  LinTerm gprod;
  const double dabs = std::max(std::abs(d_lo), std::abs(d_hi));
  for (int i = 0; i < enc.n_bp(); ++i) {
    // Unconditional box |rho_i| <= dabs * ghat_i tightens the coupling
    // envelope without cutting any breakpoint-consistent point.
    int rho = sys.add_var(strf("rho[%s].%d", tag.c_str(), i),
                          -dabs * enc.ghat(i), dabs * enc.ghat(i));
    gprod.add(rho, 1.0);
    // Hamming distance between code i and eta.
    LinTerm dist;
    for (int k = 0; k < m; ++k) {
      if (enc.codes[i](k)) {
        dist.constant += 1.0;
        dist.add(enc.eta[k], -1.0);
      } else {
        dist.add(enc.eta[k], 1.0);
      }
    }
    LinTerm target = enc.ghat(i) * diff;
    LinTerm rt = LinTerm::var(rho) - target;
    sys.add_le(-1.0 * rt - range * dist, tag + strf(".rho_lo%d", i));
    sys.add_le(rt - range * dist, tag + strf(".rho_hi%d", i));
  }
  return {bprod, gprod};
}

int cosine_polytope(ConstraintSystem& sys, const LinTerm& th_m, const LinTerm& th_j,
                    double theta_u, int n_p, const std::string& tag) {
  if (!(theta_u > 0 && theta_u < kPi / 2))
    throw std::invalid_argument("cosine polytope requires theta_u in (0, pi/2)");
  if (n_p < 2) throw std::invalid_argument("cosine polytope requires n_p >= 2");
  int phi = sys.add_var("phi[" + tag + "]", 0.0, 1.0);
  const double tp = 2.0 * theta_u / (1.0 + n_p);
  for (int k = 1; k <= n_p; ++k) {
    const double a = k * tp - theta_u;  // tangency angle
    // phi <= cos(a) - sin(a) * ((dm - dj + theta_u) - k*tp)
    LinTerm row = LinTerm::var(phi);
    row.constant -= std::cos(a);
    LinTerm diff = th_m - th_j;
    diff.constant += theta_u - k * tp;
    row += std::sin(a) * diff;
    sys.add_le(row, tag + strf(".cos%d", k));
  }
  return phi;
}

void linearize_injection(ConstraintSystem& sys, const LinearizationConfig& cfg,
                         const FInstance& fi, const LinTerm& p_target,
                         const LinTerm& q_target, const std::string& tag) {
  int phi = cosine_polytope(sys, fi.thm, fi.thj, fi.theta_u, cfg.n_p, tag);
  const double vm = fi.vhat_m, vj = fi.vhat_j;
  LinTerm dth = fi.thm - fi.thj;
  // p = vm*vj*(g*phi + b*dth) - g*vj*(2 v_j - vj)
  LinTerm p = vm * vj * (fi.g * LinTerm::var(phi) + fi.b * dth);
  p -= fi.g * vj * (2.0 * fi.vj - LinTerm(vj));
  sys.add_eq(p - p_target, tag + ".p");
  // q = vm*vj*(b*phi + g*dth) - b_cc*vj*(2 v_j - vj) + qdelta
  LinTerm q = vm * vj * (fi.b * LinTerm::var(phi) + fi.g * dth);
  q -= fi.b_cc * vj * (2.0 * fi.vj - LinTerm(vj));
  LinTerm qdelta = fi.b * (vm * fi.vj + vj * fi.vm - LinTerm(2.0 * vj * vm));
  q += qdelta;
  sys.add_eq(q - q_target, tag + ".q");
}

void linearize_svc(ConstraintSystem& sys, const NetworkCase& cs, int dvc,
                   const LinearizationConfig& cfg, const std::string& tag,
                   const PointVars& pv, const VoltageProfile& vp) {
  const auto& d = cs.dvcs[dvc];
  const int j = cs.bus_index(d.bus);
  const double vhat = vp.bus(j);
  const double vlo = cs.limits.v_min, vhi = cs.limits.v_max;
  // l_a = (b + v)/2, l_b = (b - v)/2 so that b*v = l_a^2 - l_b^2.
  const double la_lo = (d.b_min + vlo) / 2, la_hi = (d.b_max + vhi) / 2;
  const double lb_lo = (d.b_min - vhi) / 2, lb_hi = (d.b_max - vlo) / 2;

  auto grid = [&](const char* which, double lo, double hi, LinTerm value,
                  LinTerm& hat_out) {
    const int npts = cfg.n_k + 1;
    std::vector<int> lam(npts);
    LinTerm sum, interp, hat;
    for (int k = 0; k < npts; ++k) {
      const double tk = lo + k * (hi - lo) / cfg.n_k;
      lam[k] = sys.add_var(strf("lam%s[%s].%d", which, tag.c_str(), k), 0.0, 1.0);
      sum.add(lam[k], 1.0);
      interp.add(lam[k], tk);
      hat.add(lam[k], tk * tk);
    }
    sum.constant -= 1.0;
    sys.add_eq(sum, tag + strf(".lam%s_sum", which));
    sys.add_eq(interp - value, tag + strf(".lam%s_interp", which));
    sys.add_sos2(lam, tag + strf(".sos%s", which));
    hat_out = hat;
  };

  LinTerm la = 0.5 * (LinTerm::var(pv.bsvc(dvc)) + LinTerm::var(pv.v(j)));
  LinTerm lb = 0.5 * (LinTerm::var(pv.bsvc(dvc)) - LinTerm::var(pv.v(j)));
  LinTerm la_hat, lb_hat;
  grid("a", la_lo, la_hi, la, la_hat);
  grid("b", lb_lo, lb_hi, lb, lb_hat);

  // q_c = 2 vhat (l_a_hat - l_b_hat) - vhat^2 b
  LinTerm q = 2.0 * vhat * (la_hat - lb_hat);
  q.add(pv.bsvc(dvc), -vhat * vhat);
  q.add(pv.qc(dvc), -1.0);
  sys.add_eq(q, tag + ".qc");
}

void build_dlpf(ConstraintSystem& sys, const NetworkCase& cs,
                const LinearizationConfig& cfg, const std::string& tag,
                const PointVars& pv, const std::vector<ZRef>& z,
                const std::vector<TcscEncoding>& tcsc, const VoltageProfile& vp,
                double load_scale) {
  const int nn = cs.n_bus(), ne = cs.n_branch();
  const double vlo = cs.limits.v_min, vhi = cs.limits.v_max;
  const double mu_big = cfg.big_m > 0 ? cfg.big_m : 1.5 * vhi;

  // Per-bus accumulated charging/shunt terms and flow sums for the nodal rows.
  std::vector<LinTerm> nodal_p(nn), nodal_q(nn);

  int tci = 0;
  for (int e = 0; e < ne; ++e) {
    const auto& br = cs.branches[e];
    const int i = cs.bus_index(br.from);
    const int j = cs.bus_index(br.to);
    LinTerm dth = LinTerm::var(pv.th(i)) - LinTerm::var(pv.th(j));
    LinTerm dv = LinTerm::var(pv.v(i)) - LinTerm::var(pv.v(j));

    // p_z rows: the decoupled branch-flow expressions.
    LinTerm pz_p, pz_q;
    if (br.tcsc) {
      const auto& enc = tcsc[tci];
      const double dth_bound = br.theta_max;
      const double dv_bound = vhi - vlo;
      auto [bth, gth] = tcsc_products(sys, enc, dth, -dth_bound, dth_bound,
                                      strf("%s.%s.th", tag.c_str(), br.id.c_str()));
      auto [bv, gv] = tcsc_products(sys, enc, dv, -dv_bound, dv_bound,
                                    strf("%s.%s.v", tag.c_str(), br.id.c_str()));
      // Tie the episode susceptance variable to the encoding.
      LinTerm bval(enc.b_lo);
      for (size_t k = 0; k < enc.eta.size(); ++k) bval.add(enc.eta[k], enc.tau(k));
      if (pv.b_tcsc(tci) >= 0)
        sys.add_eq(bval - LinTerm::var(pv.b_tcsc(tci)),
                   tag + "." + br.id + ".bdef");
      pz_p = -1.0 * bth + gv;
      pz_q = -1.0 * (gth + bv);
      ++tci;
    } else {
      pz_p = -br.b_b * dth + br.g_b * dv;
      pz_q = -1.0 * (br.g_b * dth + br.b_b * dv);
    }

    double b_abs = std::abs(br.b_b), g_abs = std::abs(br.g_b);
    if (br.tcsc) {
      b_abs = std::max(std::abs(br.tcsc->b_min), std::abs(br.tcsc->b_max));
      g_abs = std::max(g_abs, 4.0);  // conductance grows with compensation
    }
    const double m_flow = cfg.big_m > 0 ? cfg.big_m
        : 1.5 * br.s_max + b_abs * br.theta_max + g_abs * (vhi - vlo) + 1.0;
    LinTerm zc = z[e].term();
    LinTerm one_minus_z = LinTerm(1.0) - zc;
    LinTerm pfb = LinTerm::var(pv.pfb(e)), qfb = LinTerm::var(pv.qfb(e));
    sys.add_le(pfb - pz_p - m_flow * one_minus_z, tag + "." + br.id + ".pf_hi");
    sys.add_le(pz_p - pfb - m_flow * one_minus_z, tag + "." + br.id + ".pf_lo");
    sys.add_le(qfb - pz_q - m_flow * one_minus_z, tag + "." + br.id + ".qf_hi");
    sys.add_le(pz_q - qfb - m_flow * one_minus_z, tag + "." + br.id + ".qf_lo");
    sys.add_le(pfb - m_flow * zc, tag + "." + br.id + ".pz_hi");
    sys.add_le(-1.0 * pfb - m_flow * zc, tag + "." + br.id + ".pz_lo");
    sys.add_le(qfb - m_flow * zc, tag + "." + br.id + ".qz_hi");
    sys.add_le(-1.0 * qfb - m_flow * zc, tag + "." + br.id + ".qz_lo");
    sys.add_eq(LinTerm::var(pv.ptb(e)) + pfb, tag + "." + br.id + ".ptb");
    sys.add_eq(LinTerm::var(pv.qtb(e)) + qfb, tag + "." + br.id + ".qtb");

    // Line-charging coupling U ~ v * z at both ends.
    for (int end = 0; end < 2; ++end) {
      if (br.g_lc == 0.0 && br.b_lc == 0.0) break;
      const int n = end == 0 ? i : j;
      int u = sys.add_var(strf("U[%s].%s.%d", tag.c_str(), br.id.c_str(), end), 0.0,
                          mu_big);
      LinTerm ut = LinTerm::var(u);
      LinTerm vt = LinTerm::var(pv.v(n));
      sys.add_le(vt - mu_big * one_minus_z - ut, tag + "." + br.id + strf(".u1%d", end));
      sys.add_le(ut - mu_big * zc, tag + "." + br.id + strf(".u2%d", end));
      sys.add_le(ut - vt - mu_big * one_minus_z, tag + "." + br.id + strf(".u3%d", end));
      nodal_p[n] -= br.g_lc * ut;
      nodal_q[n] += br.b_lc * ut;
    }

    nodal_p[i] -= LinTerm::var(pv.pfb(e));
    nodal_p[j] -= LinTerm::var(pv.ptb(e));
    nodal_q[i] -= LinTerm::var(pv.qfb(e));
    nodal_q[j] -= LinTerm::var(pv.qtb(e));
  }

  // Bus shunts (DLPF keeps them linear in v).
  for (int n = 0; n < nn; ++n) {
    nodal_p[n] -= cs.buses[n].g_s * LinTerm::var(pv.v(n));
    nodal_q[n] += cs.buses[n].b_s * LinTerm::var(pv.v(n));
  }

  // Device injections and ZIP demand.
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const int n = cs.bus_index(cs.generators[g].bus);
    nodal_p[n].add(pv.pg(static_cast<int>(g)), 1.0);
    nodal_q[n].add(pv.qg(static_cast<int>(g)), 1.0);
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    const auto& ld = cs.loads[l];
    const int n = cs.bus_index(ld.bus);
    const double p0 = load_scale * ld.p0, q0 = load_scale * ld.q0;
    const double vh = vp.bus(n);
    // ZIP with v^2 ~ vhat(2v - vhat).
    LinTerm pd(p0 * (ld.gamma_p - ld.alpha_p * vh * vh / (ld.v0 * ld.v0)));
    pd.add(pv.v(static_cast<int>(n)),
           p0 * (2.0 * ld.alpha_p * vh / (ld.v0 * ld.v0) + ld.beta_p / ld.v0));
    pd.add(pv.epsp(static_cast<int>(l)), p0);
    LinTerm qd(q0 * (ld.gamma_q - ld.alpha_q * vh * vh / (ld.v0 * ld.v0)));
    qd.add(pv.v(static_cast<int>(n)),
           q0 * (2.0 * ld.alpha_q * vh / (ld.v0 * ld.v0) + ld.beta_q / ld.v0));
    qd.add(pv.epsq(static_cast<int>(l)), q0);
    nodal_p[n] -= pd;
    nodal_q[n] -= qd;
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    const int n = cs.bus_index(cs.dvcs[d].bus);
    nodal_q[n].add(pv.qc(static_cast<int>(d)), 1.0);
  }

  for (int n = 0; n < nn; ++n) {
    sys.add_eq(nodal_p[n], strf("%s.balp.%d", tag.c_str(), cs.buses[n].id));
    sys.add_eq(nodal_q[n], strf("%s.balq.%d", tag.c_str(), cs.buses[n].id));
  }
}

void assemble_linear_pf(ConstraintSystem& sys, const NetworkCase& cs,
                        const LinearizationConfig& cfg, const std::string& tag,
                        const PointVars& pv, const std::vector<ZRef>& z,
                        const std::vector<TcscEncoding>& tcsc,
                        const VoltageProfile& vp, double load_scale) {
  build_dlpf(sys, cs, cfg, tag, pv, z, tcsc, vp, load_scale);

  // Device injections through the LPAC template.
  for (size_t g = 0; g < cs.generators.size(); ++g) {
    const auto& gen = cs.generators[g];
    const int j = cs.bus_index(gen.bus);
    const double thu = 0.9 * kPi / 2.0;
    if (gen.kind == GenKind::Sg) {
      FInstance f1{LinTerm::var(pv.e(g)), LinTerm::var(pv.de(g)), LinTerm::var(pv.v(j)),
                   LinTerm::var(pv.th(j)), vp.sg_e(g), vp.bus(j),
                   0.0, 1.0 / gen.x_q, 1.0 / gen.x_q, thu};
      linearize_injection(sys, cfg, f1, LinTerm::var(pv.pg(g)), LinTerm::var(pv.qg(g)),
                          strf("%s.%s.emf", tag.c_str(), gen.id.c_str()));
      FInstance f2{LinTerm::var(pv.es(g)), LinTerm::var(pv.des(g)), LinTerm::var(pv.v(j)),
                   LinTerm::var(pv.th(j)), vp.sg_es(g), vp.bus(j),
                   0.0, 1.0 / gen.x_sub, 1.0 / gen.x_sub, thu};
      linearize_injection(sys, cfg, f2, LinTerm::var(pv.pg(g)), LinTerm::var(pv.qg(g)),
                          strf("%s.%s.sub", tag.c_str(), gen.id.c_str()));
    } else {
      const double dcl = gen.r_c * gen.r_c + gen.x_cl * gen.x_cl;
      FInstance f{LinTerm::var(pv.vm(g)), LinTerm::var(pv.thm(g)), LinTerm::var(pv.v(j)),
                  LinTerm::var(pv.th(j)), vp.cig_vm(g), vp.bus(j),
                  gen.r_c / dcl, gen.x_cl / dcl, gen.x_cl / dcl + 1.0 / gen.x_cc, thu};
      linearize_injection(sys, cfg, f, LinTerm::var(pv.pg(g)), LinTerm::var(pv.qg(g)),
                          strf("%s.%s.cig", tag.c_str(), gen.id.c_str()));
    }
  }
  for (size_t l = 0; l < cs.loads.size(); ++l) {
    const auto& ld = cs.loads[l];
    if (!ld.has_im()) {
      sys.add_eq(LinTerm::var(pv.epsp(l)) - LinTerm(ld.eps_p), tag + "." + ld.id + ".ep0");
      sys.add_eq(LinTerm::var(pv.epsq(l)) - LinTerm(ld.eps_q), tag + "." + ld.id + ".eq0");
      continue;
    }
    const int j = cs.bus_index(ld.bus);
    const double den = ld.r_s * ld.r_s + ld.x_m * ld.x_m;
    FInstance f{LinTerm::var(pv.em(l)), LinTerm::var(pv.dem(l)), LinTerm::var(pv.v(j)),
                LinTerm::var(pv.th(j)), vp.im_em(l), vp.bus(j),
                ld.r_s / den, ld.x_m / den, ld.x_m / den, 0.9 * kPi / 2.0};
    // eps_p * p0 = -F_p, eps_q * q0 = -F_q.
    const double p0 = load_scale * ld.p0, q0 = load_scale * ld.q0;
    LinTerm pt, qt;
    if (p0 != 0.0) pt.add(pv.epsp(l), -p0);
    if (q0 != 0.0) qt.add(pv.epsq(l), -q0);
    linearize_injection(sys, cfg, f, pt, qt, strf("%s.%s.im", tag.c_str(), ld.id.c_str()));
    if (p0 == 0.0)
      sys.add_eq(LinTerm::var(pv.epsp(l)) - LinTerm(ld.eps_p), tag + "." + ld.id + ".ep0");
    if (q0 == 0.0)
      sys.add_eq(LinTerm::var(pv.epsq(l)) - LinTerm(ld.eps_q), tag + "." + ld.id + ".eq0");
  }
  for (size_t d = 0; d < cs.dvcs.size(); ++d) {
    const auto& dvc = cs.dvcs[d];
    const int j = cs.bus_index(dvc.bus);
    if (dvc.kind == DvcKind::Svc) {
      linearize_svc(sys, cs, static_cast<int>(d), cfg,
                    strf("%s.%s", tag.c_str(), dvc.id.c_str()), pv, vp);
    } else {
      FInstance f{LinTerm::var(pv.vs(d)), LinTerm::var(pv.ths(d)), LinTerm::var(pv.v(j)),
                  LinTerm::var(pv.th(j)), vp.st_vs(d), vp.bus(j),
                  0.0, 1.0 / dvc.x_svg, 1.0 / dvc.x_svg, 0.9 * kPi / 2.0};
      linearize_injection(sys, cfg, f, LinTerm(0.0), LinTerm::var(pv.qc(d)),
                          strf("%s.%s.st", tag.c_str(), dvc.id.c_str()));
    }
  }
}

}  // namespace btt::linpf
