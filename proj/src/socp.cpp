#include "btt/socp.hpp"

#include <cmath>
#include <limits>

#include <Eigen/SparseCholesky>

namespace btt::socp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDelta = 1e-8;  // static KKT regularization

// Composite-cone helper working on stacked slack vectors.
class ConeOps {
 public:
  explicit ConeOps(const Cone& cone) : cone_(cone) {
    dim_ = cone.dim();
    degree_ = cone.l + static_cast<int>(cone.q.size());
    // Identity scaling until the first update.
    wl_.setOnes(cone.l);
    for (int m : cone.q) {
      Vec wb = Vec::Zero(m);
      wb(0) = 1.0;
      blocks_.push_back({wb, 1.0});
    }
    lambda_.setOnes(dim_);
  }

  int dim() const { return dim_; }
  int degree() const { return degree_; }

  Vec identity() const {
    Vec e = Vec::Zero(dim_);
    for (int i = 0; i < cone_.l; ++i) e(i) = 1.0;
    int off = cone_.l;
    for (int m : cone_.q) {
      e(off) = 1.0;
      off += m;
    }
    return e;
  }

  // True when u lies in the cone interior (with slack eps).
  bool in_interior(const Vec& u, double eps = 0.0) const {
    for (int i = 0; i < cone_.l; ++i)
      if (u(i) <= eps) return false;
    int off = cone_.l;
    for (int m : cone_.q) {
      if (u(off) <= eps) return false;
      if (u(off) - u.segment(off + 1, m - 1).norm() <= eps) return false;
      off += m;
    }
    return true;
  }

  // Shift needed along the identity to bring u strictly inside.
  double shift_to_interior(const Vec& u) const {
    double t = 0.0;
    for (int i = 0; i < cone_.l; ++i) t = std::max(t, -u(i));
    int off = cone_.l;
    for (int m : cone_.q) {
      t = std::max(t, u.segment(off + 1, m - 1).norm() - u(off));
      off += m;
    }
    return t;
  }

  // Update the Nesterov-Todd scaling from a strictly feasible (s, z) pair.
  bool update_scaling(const Vec& s, const Vec& z) {
    for (int i = 0; i < cone_.l; ++i) {
      if (s(i) <= 0 || z(i) <= 0) return false;
      wl_(i) = std::sqrt(s(i) / z(i));
      lambda_(i) = std::sqrt(s(i) * z(i));
    }
    int off = cone_.l;
    for (size_t k = 0; k < blocks_.size(); ++k) {
      const int m = cone_.q[k];
      const auto sb = s.segment(off, m);
      const auto zb = z.segment(off, m);
      const double ress = sb(0) * sb(0) - sb.tail(m - 1).squaredNorm();
      const double resz = zb(0) * zb(0) - zb.tail(m - 1).squaredNorm();
      if (ress <= 0 || resz <= 0 || sb(0) <= 0 || zb(0) <= 0) return false;
      const Vec sbar = sb / std::sqrt(ress);
      const Vec zbar = zb / std::sqrt(resz);
      double gamma2 = (1.0 + sbar(0) * zbar(0) + sbar.tail(m - 1).dot(zbar.tail(m - 1))) / 2.0;
      if (gamma2 <= 0) return false;
      const double gamma = std::sqrt(gamma2);
      Vec wbar(m);
      wbar(0) = (sbar(0) + zbar(0)) / (2.0 * gamma);
      wbar.tail(m - 1) = (sbar.tail(m - 1) - zbar.tail(m - 1)) / (2.0 * gamma);
      blocks_[k].wbar = wbar;
      blocks_[k].eta = std::pow(ress / resz, 0.25);
      off += m;
    }
    // Scaled point.
    lambda_ = scale(z);
    return true;
  }

  // W v.
  Vec scale(const Vec& v) const {
    Vec out(dim_);
    for (int i = 0; i < cone_.l; ++i) out(i) = wl_(i) * v(i);
    int off = cone_.l;
    for (size_t k = 0; k < blocks_.size(); ++k) {
      const int m = cone_.q[k];
      const auto& wb = blocks_[k].wbar;
      const auto vb = v.segment(off, m);
      const double w1v = wb.tail(m - 1).dot(vb.tail(m - 1));
      out(off) = blocks_[k].eta * (wb(0) * vb(0) + w1v);
      out.segment(off + 1, m - 1) =
          blocks_[k].eta *
          (vb(0) * wb.tail(m - 1) + vb.tail(m - 1) + (w1v / (1.0 + wb(0))) * wb.tail(m - 1));
      off += m;
    }
    return out;
  }

  // W^{-1} v.
  Vec unscale(const Vec& v) const {
    Vec out(dim_);
    for (int i = 0; i < cone_.l; ++i) out(i) = v(i) / wl_(i);
    int off = cone_.l;
    for (size_t k = 0; k < blocks_.size(); ++k) {
      const int m = cone_.q[k];
      const auto& wb = blocks_[k].wbar;
      const auto vb = v.segment(off, m);
      const double w1v = wb.tail(m - 1).dot(vb.tail(m - 1));
      out(off) = (wb(0) * vb(0) - w1v) / blocks_[k].eta;
      out.segment(off + 1, m - 1) =
          (-vb(0) * wb.tail(m - 1) + vb.tail(m - 1) +
           (w1v / (1.0 + wb(0))) * wb.tail(m - 1)) /
          blocks_[k].eta;
      off += m;
    }
    return out;
  }

  // Dense W^T W block for one SOC cone (used in the KKT matrix).
  Mat wtw_block(size_t k) const {
    const int m = cone_.q[k];
    const auto& wb = blocks_[k].wbar;
    // Wbar^2 = [norm; ...]: Wbar symmetric, so W^T W = eta^2 Wbar^2.
    Mat Wb(m, m);
    const Vec& w1 = wb;
    // Build Wbar explicitly then square; m is small.
    Mat W(m, m);
    W(0, 0) = w1(0);
    for (int i = 1; i < m; ++i) {
      W(0, i) = w1(i);
      W(i, 0) = w1(i);
    }
    W.block(1, 1, m - 1, m - 1) =
        Mat::Identity(m - 1, m - 1) +
        w1.tail(m - 1) * w1.tail(m - 1).transpose() / (1.0 + w1(0));
    Wb = blocks_[k].eta * blocks_[k].eta * (W * W);
    return Wb;
  }

  double wl(int i) const { return wl_(i); }
  const Vec& lambda() const { return lambda_; }

  // Jordan product u o v.
  Vec prod(const Vec& u, const Vec& v) const {
    Vec out(dim_);
    for (int i = 0; i < cone_.l; ++i) out(i) = u(i) * v(i);
    int off = cone_.l;
    for (int m : cone_.q) {
      const auto ub = u.segment(off, m);
      const auto vb = v.segment(off, m);
      out(off) = ub.dot(vb);
      out.segment(off + 1, m - 1) = ub(0) * vb.tail(m - 1) + vb(0) * ub.tail(m - 1);
      off += m;
    }
    return out;
  }

  // Solve lambda o x = v.
  Vec lam_div(const Vec& v) const {
    Vec out(dim_);
    for (int i = 0; i < cone_.l; ++i) out(i) = v(i) / lambda_(i);
    int off = cone_.l;
    for (int m : cone_.q) {
      const auto lb = lambda_.segment(off, m);
      const auto vb = v.segment(off, m);
      const double det = lb(0) * lb(0) - lb.tail(m - 1).squaredNorm();
      const double x0 = (lb(0) * vb(0) - lb.tail(m - 1).dot(vb.tail(m - 1))) / det;
      out(off) = x0;
      out.segment(off + 1, m - 1) = (vb.tail(m - 1) - x0 * lb.tail(m - 1)) / lb(0);
      off += m;
    }
    return out;
  }

  // Largest step alpha with u + alpha du staying in the cone (u interior).
  double max_step(const Vec& u, const Vec& du) const {
    double alpha = kInf;
    for (int i = 0; i < cone_.l; ++i)
      if (du(i) < 0) alpha = std::min(alpha, -u(i) / du(i));
    int off = cone_.l;
    for (int m : cone_.q) {
      const auto ub = u.segment(off, m);
      const auto db = du.segment(off, m);
      // J(u + a du) = 0 boundary: quadratic in a.
      const double a = db(0) * db(0) - db.tail(m - 1).squaredNorm();
      const double b = ub(0) * db(0) - ub.tail(m - 1).dot(db.tail(m - 1));
      const double c = ub(0) * ub(0) - ub.tail(m - 1).squaredNorm();
      double bound = kInf;
      const double disc = b * b - a * c;
      if (std::abs(a) < 1e-14) {
        if (b < 0) bound = -c / (2.0 * b);
      } else if (disc >= 0) {
        const double sq = std::sqrt(disc);
        const double r1 = (-b - sq) / a, r2 = (-b + sq) / a;
        for (double r : {r1, r2})
          if (r > 0) bound = std::min(bound, r);
        if (a < 0 && bound == kInf) bound = kInf;
      }
      // Also the head must stay positive.
      if (db(0) < 0) bound = std::min(bound, -ub(0) / db(0));
      alpha = std::min(alpha, bound);
      off += m;
    }
    return alpha;
  }

 private:
  struct SocScaling {
    Vec wbar;
    double eta = 1.0;
  };
  Cone cone_;
  int dim_ = 0, degree_ = 0;
  Vec wl_;
  std::vector<SocScaling> blocks_;
  Vec lambda_;
};

struct Kkt {
  // K = [dI A' G'; A -dI 0; G 0 -W'W - dI], lower triangle stored.
  int n, p, md;
  SpMat K;
  Eigen::SimplicialLDLT<SpMat> ldlt;
  const Problem* prob = nullptr;

  void build(const Problem& pr, const ConeOps& co) {
    prob = &pr;
    n = pr.n();
    p = static_cast<int>(pr.A.rows());
    md = co.dim();
    std::vector<Triplet> t;
    t.reserve(static_cast<size_t>(pr.A.nonZeros() + pr.G.nonZeros() + n + p + md * 4));
    for (int i = 0; i < n; ++i) t.emplace_back(i, i, kDelta);
    delta = kDelta;
    for (int k = 0; k < pr.A.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.A, k); it; ++it)
        t.emplace_back(n + static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    for (int i = 0; i < p; ++i) t.emplace_back(n + i, n + i, -kDelta);
    for (int k = 0; k < pr.G.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.G, k); it; ++it)
        t.emplace_back(n + p + static_cast<int>(it.row()), static_cast<int>(it.col()),
                       it.value());
    // Scaling block placeholder: identity pattern for LP part, dense blocks
    // for SOC parts.
    const auto& cone = pr.cone;
    for (int i = 0; i < cone.l; ++i)
      t.emplace_back(n + p + i, n + p + i, -1.0 - kDelta);
    int off = cone.l;
    for (int m : cone.q) {
      for (int r = 0; r < m; ++r)
        for (int c = 0; c <= r; ++c)
          t.emplace_back(n + p + off + r, n + p + off + c,
                         r == c ? -1.0 - kDelta : 0.0);
      off += m;
    }
    K.resize(n + p + md, n + p + md);
    K.setFromTriplets(t.begin(), t.end());
    K.makeCompressed();
    ldlt.analyzePattern(K.selfadjointView<Eigen::Lower>());
  }

  double delta = kDelta;

  bool refactor_with(const ConeOps& co, double dlt) {
    const auto& cone = prob->cone;
    for (int i = 0; i < n; ++i) K.coeffRef(i, i) = dlt;
    for (int i = 0; i < p; ++i) K.coeffRef(n + i, n + i) = -dlt;
    for (int i = 0; i < cone.l; ++i) {
      const double w = co.wl(i);
      K.coeffRef(n + p + i, n + p + i) = -w * w - dlt;
    }
    int off = cone.l;
    for (size_t k = 0; k < cone.q.size(); ++k) {
      const int m = cone.q[k];
      Mat blk = co.wtw_block(k);
      for (int r = 0; r < m; ++r)
        for (int c = 0; c <= r; ++c)
          K.coeffRef(n + p + off + r, n + p + off + c) =
              -blk(r, c) - (r == c ? dlt : 0.0);
      off += m;
    }
    ldlt.factorize(K.selfadjointView<Eigen::Lower>());
    return ldlt.info() == Eigen::Success;
  }

  // Dynamic regularization ladder: bump delta when the factorization breaks.
  bool refactor(const ConeOps& co) {
    for (double dlt : {kDelta, 1e2 * kDelta, 1e4 * kDelta, 1e6 * kDelta}) {
      delta = dlt;
      if (refactor_with(co, dlt)) return true;
    }
    return false;
  }

  // Solve with two rounds of iterative refinement.
  Vec solve(const Vec& rhs) const {
    Vec u = ldlt.solve(rhs);
    for (int it = 0; it < 2; ++it) {
      Vec r = rhs - K.selfadjointView<Eigen::Lower>() * u;
      u += ldlt.solve(r);
    }
    return u;
  }
};

}  // namespace

const char* status_name(Status s) {
  switch (s) {
    case Status::Optimal: return "optimal";
    case Status::PrimalInfeasible: return "primal-infeasible";
    case Status::DualInfeasible: return "dual-infeasible";
    case Status::MaxIter: return "max-iterations";
    case Status::Numerical: return "numerical-problem";
  }
  return "?";
}

namespace {

// Accept a near-converged iterate at reduced accuracy instead of reporting a
// numerical failure outright.
void degrade_gracefully(Solution& sol) {
  const double relgap = sol.gap / std::max(1.0, std::abs(sol.pobj));
  if (sol.pres < 1e-5 && sol.dres < 1e-5 && (sol.gap < 1e-5 || relgap < 1e-4))
    sol.status = Status::Optimal;
}

}  // namespace

namespace {

// Ruiz-style equilibration. Row scaling is uniform within each SOC block so
// the cone geometry is preserved; column scaling is undone on exit.
struct Scaling {
  Vec col, row_a, row_g;
  double cost = 1.0;
};

Scaling equilibrate(Problem& pr) {
  const int n = pr.n();
  const int p = static_cast<int>(pr.A.rows());
  const int m = static_cast<int>(pr.G.rows());
  Scaling sc;
  sc.col = Vec::Ones(n);
  sc.row_a = Vec::Ones(p);
  sc.row_g = Vec::Ones(m);
  for (int round = 0; round < 3; ++round) {
    Vec cmax = Vec::Zero(n), ra = Vec::Zero(p), rg = Vec::Zero(m);
    for (int k = 0; k < pr.A.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.A, k); it; ++it) {
        cmax(it.col()) = std::max(cmax(it.col()), std::abs(it.value()));
        ra(it.row()) = std::max(ra(it.row()), std::abs(it.value()));
      }
    for (int k = 0; k < pr.G.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.G, k); it; ++it) {
        cmax(it.col()) = std::max(cmax(it.col()), std::abs(it.value()));
        rg(it.row()) = std::max(rg(it.row()), std::abs(it.value()));
      }
    // Uniform scale inside each SOC block.
    int off = pr.cone.l;
    for (int q : pr.cone.q) {
      double mx = 0;
      for (int r = 0; r < q; ++r) mx = std::max(mx, rg(off + r));
      for (int r = 0; r < q; ++r) rg(off + r) = mx;
      off += q;
    }
    auto scale_of = [](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0; };
    Vec dc(n), da(p), dg(m);
    for (int j = 0; j < n; ++j) dc(j) = scale_of(cmax(j));
    for (int i = 0; i < p; ++i) da(i) = scale_of(ra(i));
    for (int i = 0; i < m; ++i) dg(i) = scale_of(rg(i));
    for (int k = 0; k < pr.A.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.A, k); it; ++it)
        it.valueRef() *= da(it.row()) * dc(it.col());
    for (int k = 0; k < pr.G.outerSize(); ++k)
      for (SpMat::InnerIterator it(pr.G, k); it; ++it)
        it.valueRef() *= dg(it.row()) * dc(it.col());
    sc.col.array() *= dc.array();
    sc.row_a.array() *= da.array();
    sc.row_g.array() *= dg.array();
  }
  pr.b.array() *= sc.row_a.array();
  pr.h.array() *= sc.row_g.array();
  pr.c.array() *= sc.col.array();
  const double cn = pr.c.lpNorm<Eigen::Infinity>();
  if (cn > 1e-9) {
    sc.cost = 1.0 / std::max(1.0, cn);
    pr.c *= sc.cost;
  }
  return sc;
}

}  // namespace

Solution solve_scaled(const Problem& prob_in, const Options& opts);

Solution solve(const Problem& prob, const Options& opts) {
  Problem scaled = prob;
  Scaling scal = equilibrate(scaled);
  Solution sol = solve_scaled(scaled, opts);
  // Map back to the original coordinates.
  if (sol.x.size() == scaled.n()) sol.x.array() *= scal.col.array();
  if (sol.y.size() == scaled.A.rows()) sol.y.array() *= scal.row_a.array() / scal.cost;
  if (sol.z.size() == scaled.G.rows()) sol.z.array() *= scal.row_g.array() / scal.cost;
  if (sol.s.size() == scaled.G.rows()) sol.s.array() /= scal.row_g.array();
  sol.pobj /= scal.cost;
  sol.dobj /= scal.cost;
  sol.gap /= scal.cost;
  return sol;
}

Solution solve_scaled(const Problem& prob_in, const Options& opts) {
  const Problem& prob = prob_in;
  const int n = prob.n();
  if (prob.infeasible_presolve) {
    Solution sol;
    sol.status = Status::PrimalInfeasible;
    sol.x.setZero(n);
    return sol;
  }
  const int p = static_cast<int>(prob.A.rows());
  const int md = prob.cone.dim();
  if (static_cast<int>(prob.G.rows()) != md)
    throw std::invalid_argument("socp: G row count does not match cone dimension");
  if (md == 0) throw std::invalid_argument("socp: empty cone unsupported");

  ConeOps co(prob.cone);
  Kkt kkt;
  kkt.build(prob, co);

  Solution sol;
  sol.x.setZero(n);
  sol.y.setZero(p);
  sol.z.setZero(md);
  sol.s.setZero(md);

  // Initialization: least-squares-ish primal/dual points shifted into the cone.
  if (!kkt.refactor(co)) return sol;
  Vec x0, s0, y0, z0;
  {
    Vec rhs = Vec::Zero(n + p + md);
    rhs.segment(n, p) = prob.b;
    rhs.segment(n + p, md) = prob.h;
    Vec u = kkt.solve(rhs);
    x0 = u.head(n);
    Vec stilde = -u.tail(md);
    double t = co.shift_to_interior(stilde);
    s0 = stilde;
    if (t > 0 || !co.in_interior(stilde, 1e-12)) s0 += (t + 1.0) * co.identity();

    Vec rhs2 = Vec::Zero(n + p + md);
    rhs2.head(n) = -prob.c;
    Vec u2 = kkt.solve(rhs2);
    y0 = u2.segment(n, p);
    Vec ztilde = u2.tail(md);
    double t2 = co.shift_to_interior(ztilde);
    z0 = ztilde;
    if (t2 > 0 || !co.in_interior(ztilde, 1e-12)) z0 += (t2 + 1.0) * co.identity();
  }
  Vec x = x0, y = y0, z = z0, s = s0;
  double tau = 1.0, kappa = 1.0;
  const int nu = co.degree() + 1;
  double best_score = kInf;

  const double bnorm = std::max(1.0, prob.b.size() ? prob.b.lpNorm<Eigen::Infinity>() : 0.0);
  const double hnorm = std::max(1.0, prob.h.lpNorm<Eigen::Infinity>());
  const double cnorm = std::max(1.0, prob.c.lpNorm<Eigen::Infinity>());

  for (int it = 0; it < opts.max_iter; ++it) {
    // Residuals.
    Vec rx = -prob.A.transpose() * y - prob.G.transpose() * z - prob.c * tau;
    Vec ry = prob.A * x - prob.b * tau;
    Vec rz = s + prob.G * x - prob.h * tau;
    double rtau = kappa + prob.c.dot(x) + (p ? prob.b.dot(y) : 0.0) + prob.h.dot(z);
    double mu = (s.dot(z) + tau * kappa) / nu;

    const double pobj = prob.c.dot(x) / tau;
    const double dobj = -((p ? prob.b.dot(y) : 0.0) + prob.h.dot(z)) / tau;
    const double gap = s.dot(z) / (tau * tau);
    const double pres =
        std::max(p ? ry.lpNorm<Eigen::Infinity>() / bnorm : 0.0,
                 rz.lpNorm<Eigen::Infinity>() / hnorm) / tau;
    const double dres = rx.lpNorm<Eigen::Infinity>() / cnorm / tau;
    const double relgap = gap / std::max(1.0, std::abs(pobj));

    // Keep the best iterate so a late numerical failure still returns the
    // most converged point.
    const double score = std::max({pres, dres, gap});
    if (score < best_score) {
      best_score = score;
      sol.x = x / tau;
      sol.y = y / tau;
      sol.z = z / tau;
      sol.s = s / tau;
      sol.pobj = pobj;
      sol.dobj = dobj;
      sol.gap = gap;
      sol.pres = pres;
      sol.dres = dres;
    }
    sol.iters = it;

    if (pres < opts.feastol && dres < opts.feastol &&
        (gap < opts.abstol || relgap < opts.reltol)) {
      sol.status = Status::Optimal;
      return sol;
    }
    // Infeasibility certificates.
    const double by_hz = (p ? prob.b.dot(y) : 0.0) + prob.h.dot(z);
    if (by_hz < -1e-12) {
      const double cert = (prob.A.transpose() * y + prob.G.transpose() * z)
                              .lpNorm<Eigen::Infinity>();
      if (cert / cnorm < opts.infeastol * (-by_hz) && tau < 1e-6 * std::max(1.0, kappa)) {
        sol.status = Status::PrimalInfeasible;
        sol.y = y / (-by_hz);
        sol.z = z / (-by_hz);
        return sol;
      }
    }
    const double cx = prob.c.dot(x);
    if (cx < -1e-12) {
      const double cert = std::max((prob.A * x).lpNorm<Eigen::Infinity>(),
                                   (prob.G * x + s).lpNorm<Eigen::Infinity>());
      if (cert < opts.infeastol * (-cx) && tau < 1e-6 * std::max(1.0, kappa)) {
        sol.status = Status::DualInfeasible;
        sol.x = x / (-cx);
        return sol;
      }
    }

    if (!co.update_scaling(s, z) ) {
      sol.status = Status::Numerical;
      degrade_gracefully(sol);
      return sol;
    }
    if (!kkt.refactor(co)) {
      sol.status = Status::Numerical;
      degrade_gracefully(sol);
      return sol;
    }

    // Constant-RHS solve shared by both directions this iteration.
    Vec rhs1 = Vec::Zero(n + p + md);
    rhs1.head(n) = -prob.c;
    rhs1.segment(n, p) = prob.b;
    rhs1.tail(md) = prob.h;
    Vec u1 = kkt.solve(rhs1);
    const Vec x1 = u1.head(n), y1 = u1.segment(n, p), z1 = u1.tail(md);
    const double denom =
        prob.c.dot(x1) + (p ? prob.b.dot(y1) : 0.0) + prob.h.dot(z1) - kappa / tau;

    const Vec lam = co.lambda();

    auto direction = [&](const Vec& bx, const Vec& by, const Vec& bz, double btau,
                         const Vec& bs, double bkappa, Vec& dx, Vec& dy, Vec& dz,
                         Vec& ds, double& dtau, double& dkappa) -> bool {
      Vec rhs2 = Vec::Zero(n + p + md);
      rhs2.head(n) = bx;
      rhs2.segment(n, p) = by;
      rhs2.tail(md) = bz - co.scale(co.lam_div(bs));  // W^T = W (symmetric scaling)
      Vec u2 = kkt.solve(rhs2);
      const Vec x2 = u2.head(n), y2 = u2.segment(n, p), z2 = u2.tail(md);
      if (std::abs(denom) < 1e-14) return false;
      dtau = (btau - bkappa / tau -
              (prob.c.dot(x2) + (p ? prob.b.dot(y2) : 0.0) + prob.h.dot(z2))) /
             denom;
      dx = x2 + dtau * x1;
      dy = y2 + dtau * y1;
      dz = z2 + dtau * z1;
      ds = co.scale(co.lam_div(bs)) - co.scale(co.scale(dz));
      dkappa = (bkappa - kappa * dtau) / tau;
      return true;
    };

    // Affine direction.
    Vec dxa, dya, dza, dsa;
    double dtaua, dkappaa;
    Vec bs_aff = -co.prod(lam, lam);
    if (!direction(rx, -ry, -rz, -rtau, bs_aff, -tau * kappa, dxa, dya, dza, dsa,
                   dtaua, dkappaa)) {
      sol.status = Status::Numerical;
      degrade_gracefully(sol);
      return sol;
    }
    double alpha_aff = std::min({co.max_step(s, dsa), co.max_step(z, dza),
                                 dtaua < 0 ? -tau / dtaua : kInf,
                                 dkappaa < 0 ? -kappa / dkappaa : kInf, 1.0});
    const double sigma =
        std::pow(std::clamp(1.0 - alpha_aff, 0.0, 1.0), 3.0);

    // Combined direction with Mehrotra correction.
    Vec bs_cmb = -co.prod(lam, lam) + sigma * mu * co.identity() -
                 co.prod(co.unscale(dsa), co.scale(dza));
    const double bk_cmb = -tau * kappa + sigma * mu - dtaua * dkappaa;
    Vec dx, dy, dz, ds;
    double dtau, dkappa;
    const double om = 1.0 - sigma;
    if (!direction(om * rx, -om * ry, -om * rz, -om * rtau, bs_cmb, bk_cmb, dx, dy,
                   dz, ds, dtau, dkappa)) {
      sol.status = Status::Numerical;
      degrade_gracefully(sol);
      return sol;
    }
    double alpha = std::min({co.max_step(s, ds), co.max_step(z, dz),
                             dtau < 0 ? -tau / dtau : kInf,
                             dkappa < 0 ? -kappa / dkappa : kInf});
    alpha = std::min(0.99 * alpha, 1.0);
    if (!(alpha > 1e-6)) {
      // Pure centering rescue: head for the central path without attacking
      // the residuals.
      Vec bs_c = -co.prod(lam, lam) + mu * co.identity();
      if (!direction(Vec::Zero(n), Vec::Zero(p), Vec::Zero(md), 0.0, bs_c,
                     -tau * kappa + mu, dx, dy, dz, ds, dtau, dkappa)) {
        sol.status = Status::Numerical;
        degrade_gracefully(sol);
        return sol;
      }
      alpha = std::min({co.max_step(s, ds), co.max_step(z, dz),
                        dtau < 0 ? -tau / dtau : kInf,
                        dkappa < 0 ? -kappa / dkappa : kInf});
      alpha = std::min(0.8 * alpha, 1.0);
      if (!(alpha > 1e-10)) {
        sol.status = Status::Numerical;
        degrade_gracefully(sol);
        return sol;
      }
    }

    x += alpha * dx;
    y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;
    tau += alpha * dtau;
    kappa += alpha * dkappa;
    if (tau <= 0 || kappa <= 0) {
      sol.status = Status::Numerical;
      degrade_gracefully(sol);
      return sol;
    }
  }
  sol.status = Status::MaxIter;
  degrade_gracefully(sol);
  return sol;
}

}  // namespace btt::socp
