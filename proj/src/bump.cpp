#include "btt/bump.hpp"

#include <cmath>

namespace btt::bump {

namespace {

double wnorm(const Vec& x, const Vec& w) {
  return std::sqrt((w.array() * x.array().square()).sum());
}

double wnorm2_pos(const Vec& x, const Vec& w) {
  return (w.array() * x.array().max(0.0).square()).sum();
}

}  // namespace

OptimalRegion optimal_region(const Vec& y_star_0, const Vec& y_star_T) {
  return {y_star_0.cwiseMin(y_star_T), y_star_0.cwiseMax(y_star_T)};
}

std::string BumpinessReport::source_label() const {
  switch (ts_source) {
    case TsSource::Exact: return "exact";
    case TsSource::JumpSurrogate: return "jump-surrogate";
    case TsSource::H2Surrogate: return "h2-surrogate";
  }
  return "?";
}

double h_bd(const SsTrajectory& traj, const OptimalRegion& region, const Vec& w_bd_l,
            const Vec& w_bd_u, std::vector<double>* per_episode) {
  const int T = traj.episodes();
  if (per_episode) per_episode->assign(T, 0.0);
  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    double c = 0.0;
    // Post-switching points count for i = 1..T-1 only.
    if (i + 1 < T && traj.real_switch[i])
      c += wnorm2_pos(region.lo - traj.y_star[i], w_bd_l) +
           wnorm2_pos(traj.y_star[i] - region.hi, w_bd_u);
    if (traj.real_adjust[i])
      c += wnorm2_pos(region.lo - traj.y_minus[i], w_bd_l) +
           wnorm2_pos(traj.y_minus[i] - region.hi, w_bd_u);
    total += c;
    if (per_episode) (*per_episode)[i] = c;
  }
  return total;
}

double h_vl(const SsTrajectory& traj, const Vec& w_vl, std::vector<double>* per_episode) {
  const int T = traj.episodes();
  if (per_episode) per_episode->assign(T, 0.0);
  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    const Vec& prev = i == 0 ? traj.y_star_0 : traj.y_star[i - 1];
    double c = wnorm(prev - traj.y_minus[i], w_vl) +
               wnorm(traj.y_minus[i] - traj.y_star[i], w_vl);
    total += c;
    if (per_episode) (*per_episode)[i] = c;
  }
  const Vec& last = T > 0 ? traj.y_star[T - 1] : traj.y_star_0;
  total -= wnorm(traj.y_star_0 - last, w_vl);
  return total;
}

double h_ts_exact(const std::vector<EpisodeTrace>& traces, const std::vector<Vec>& y_star,
                  const Vec& w_ts, std::vector<double>* per_episode, Mat* per_output) {
  const int T = static_cast<int>(traces.size());
  const int ny = static_cast<int>(w_ts.size());
  if (per_episode) per_episode->assign(T, 0.0);
  if (per_output) per_output->setZero(T, ny);
  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    const auto& tr = traces[i];
    const int ns = static_cast<int>(tr.t.size());
    Vec acc = Vec::Zero(ny);
    for (int k = 0; k + 1 < ns; ++k) {
      const double dt = tr.t(k + 1) - tr.t(k);
      Vec d0 = tr.y.row(k).transpose() - y_star[i];
      Vec d1 = tr.y.row(k + 1).transpose() - y_star[i];
      acc += 0.5 * dt * (d0.array().square() + d1.array().square()).matrix();
    }
    const double c = (w_ts.array() * acc.array()).sum();
    total += c;
    if (per_episode) (*per_episode)[i] = c;
    if (per_output) per_output->row(i) = acc.transpose();
  }
  return total;
}

double h_ts_jump(const std::vector<Vec>& y_plus, const std::vector<Vec>& y_star,
                 const Vec& w_ts, const Vec& w_ts_scale,
                 std::vector<double>* per_episode) {
  const int T = static_cast<int>(y_plus.size());
  if (per_episode) per_episode->assign(T, 0.0);
  const Vec w = (w_ts.array() * w_ts_scale.array()).matrix();
  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    const double c = (w.array() * (y_plus[i] - y_star[i]).array().square()).sum();
    total += c;
    if (per_episode) (*per_episode)[i] = c;
  }
  return total;
}

BumpinessReport assemble_report(const SsTrajectory& traj, const OptimalRegion& region,
                                const Vec& w_bd_l, const Vec& w_bd_u, const Vec& w_vl,
                                double h_ts_value, TsSource source,
                                std::vector<double> ts_per_episode) {
  BumpinessReport rep;
  rep.H_bd = h_bd(traj, region, w_bd_l, w_bd_u, &rep.bd_per_episode);
  rep.H_vl = h_vl(traj, w_vl, &rep.vl_per_episode);
  rep.H_ts = h_ts_value;
  rep.ts_source = source;
  rep.ts_per_episode = std::move(ts_per_episode);
  rep.H = rep.H_bd + rep.H_vl + rep.H_ts;
  return rep;
}

}  // namespace btt::bump
