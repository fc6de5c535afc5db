#pragma once

#include <string>
#include <vector>

#include "btt/common.hpp"

namespace btt::bump {

/// Axis-aligned box spanned by the endpoint steady-state outputs.
struct OptimalRegion {
  Vec lo, hi;
};

OptimalRegion optimal_region(const Vec& y_star_0, const Vec& y_star_T);

/// Steady-state component of a transition: y^{*,0} plus per-episode
/// (y^{-,i}, y^{*,i}) with flags marking which executions are real.
struct SsTrajectory {
  Vec y_star_0;
  std::vector<Vec> y_minus;  // post-adjustment SS per episode
  std::vector<Vec> y_star;   // post-switching SS per episode
  std::vector<bool> real_adjust;  // zeta
  std::vector<bool> real_switch;  // zeta-tilde

  int episodes() const { return static_cast<int>(y_star.size()); }
};

enum class TsSource { Exact, JumpSurrogate, H2Surrogate };

struct BumpinessReport {
  double H = 0, H_bd = 0, H_vl = 0, H_ts = 0;
  TsSource ts_source = TsSource::Exact;
  std::vector<double> bd_per_episode;
  std::vector<double> vl_per_episode;  // path-length contribution per episode
  std::vector<double> ts_per_episode;
  std::string source_label() const;
};

double h_bd(const SsTrajectory& traj, const OptimalRegion& region, const Vec& w_bd_l,
            const Vec& w_bd_u, std::vector<double>* per_episode = nullptr);

double h_vl(const SsTrajectory& traj, const Vec& w_vl,
            std::vector<double>* per_episode = nullptr);

/// One simulated post-switching window: samples of y(t) on [t_i^+, t_i^*].
struct EpisodeTrace {
  Vec t;
  Mat y;  // one row per sample, one column per output
};

/// Trapezoidal integral of the weighted squared deviation from y^{*,i};
/// optional per-output split for surrogate-fidelity studies.
double h_ts_exact(const std::vector<EpisodeTrace>& traces, const std::vector<Vec>& y_star,
                  const Vec& w_ts, std::vector<double>* per_episode = nullptr,
                  Mat* per_output = nullptr);

double h_ts_jump(const std::vector<Vec>& y_plus, const std::vector<Vec>& y_star,
                 const Vec& w_ts, const Vec& w_ts_scale,
                 std::vector<double>* per_episode = nullptr);

BumpinessReport assemble_report(const SsTrajectory& traj, const OptimalRegion& region,
                                const Vec& w_bd_l, const Vec& w_bd_u, const Vec& w_vl,
                                double h_ts_value, TsSource source,
                                std::vector<double> ts_per_episode);

}  // namespace btt::bump
