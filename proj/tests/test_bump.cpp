#include <random>

#include "btt/bump.hpp"
#include "doctest.h"

using namespace btt;
using namespace btt::bump;

namespace {

SsTrajectory make_traj(const Vec& y0, std::vector<Vec> yminus, std::vector<Vec> ystar) {
  SsTrajectory t;
  t.y_star_0 = y0;
  t.y_minus = std::move(yminus);
  t.y_star = std::move(ystar);
  t.real_adjust.assign(t.y_star.size(), true);
  t.real_switch.assign(t.y_star.size(), true);
  return t;
}

}  // namespace

TEST_CASE("boundedness vanishes inside the region") {
  Vec y0 = Vec::Zero(2), yT = Vec::Ones(2);
  auto region = optimal_region(y0, yT);
  Vec mid = Vec::Constant(2, 0.5);
  auto traj = make_traj(y0, {mid, yT}, {mid, yT});
  Vec w = Vec::Ones(2);
  CHECK(h_bd(traj, region, w, w) == doctest::Approx(0.0));
}

TEST_CASE("single overshoot of 0.1 with unit weight scores 0.01") {
  Vec y0 = Vec::Zero(1), yT = Vec::Ones(1);
  auto region = optimal_region(y0, yT);
  Vec over = Vec::Constant(1, 1.1);
  // Two episodes so the post-switching point of episode 1 counts.
  auto traj = make_traj(y0, {Vec::Constant(1, 0.5), yT}, {over, yT});
  Vec w = Vec::Ones(1);
  CHECK(h_bd(traj, region, w, w) == doctest::Approx(0.01));
}

TEST_CASE("fictitious executions contribute nothing to boundedness") {
  Vec y0 = Vec::Zero(1), yT = Vec::Ones(1);
  auto region = optimal_region(y0, yT);
  Vec over = Vec::Constant(1, 1.5);
  auto traj = make_traj(y0, {over, yT}, {over, yT});
  traj.real_adjust = {false, false};
  traj.real_switch = {false, false};
  Vec w = Vec::Ones(1);
  CHECK(h_bd(traj, region, w, w) == doctest::Approx(0.0));
}

TEST_CASE("volatility: collinear single episode scores zero") {
  Vec y0 = Vec::Zero(2), yT = Vec::Ones(2);
  Vec mid = Vec::Constant(2, 0.4);
  auto traj = make_traj(y0, {mid}, {yT});
  Vec w = Vec::Ones(2);
  CHECK(h_vl(traj, w) == doctest::Approx(0.0));
}

TEST_CASE("volatility: out-and-back excursion scores twice the leg") {
  Vec y0 = Vec::Zero(1);
  Vec far = Vec::Constant(1, 0.7);
  // Move out to 0.7 and return, ending where we started.
  auto traj = make_traj(y0, {far}, {y0});
  Vec w = Vec::Ones(1);
  CHECK(h_vl(traj, w) == doctest::Approx(1.4));
}

TEST_CASE("volatility is nonnegative on random trajectories") {
  std::mt19937 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int t = 0; t < 300; ++t) {
    const int T = 1 + t % 4, ny = 3;
    Vec y0(ny);
    for (int k = 0; k < ny; ++k) y0(k) = nd(rng);
    std::vector<Vec> ym(T), ys(T);
    for (int i = 0; i < T; ++i) {
      ym[i].resize(ny);
      ys[i].resize(ny);
      for (int k = 0; k < ny; ++k) {
        ym[i](k) = nd(rng);
        ys[i](k) = nd(rng);
      }
    }
    auto traj = make_traj(y0, ym, ys);
    Vec w = Vec::Ones(ny);
    CHECK(h_vl(traj, w) >= -1e-12);
  }
}

TEST_CASE("exact transient term: constant trace scores zero") {
  EpisodeTrace tr;
  tr.t = Vec::LinSpaced(50, 0.0, 5.0);
  tr.y = Mat::Ones(50, 1);
  std::vector<Vec> ystar{Vec::Ones(1)};
  Vec w = Vec::Ones(1);
  CHECK(h_ts_exact({tr}, ystar, w) == doctest::Approx(0.0));
}

TEST_CASE("exact transient term matches the analytic exponential integral") {
  const int n = 40001;
  EpisodeTrace tr;
  tr.t = Vec::LinSpaced(n, 0.0, 20.0);
  tr.y.resize(n, 1);
  for (int k = 0; k < n; ++k) tr.y(k, 0) = std::exp(-tr.t(k));
  std::vector<Vec> ystar{Vec::Zero(1)};
  Vec w = Vec::Ones(1);
  CHECK(h_ts_exact({tr}, ystar, w) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("quadrature error drops as O(h^2)") {
  auto integral_with = [](int n) {
    EpisodeTrace tr;
    tr.t = Vec::LinSpaced(n, 0.0, 8.0);
    tr.y.resize(n, 1);
    for (int k = 0; k < n; ++k) tr.y(k, 0) = std::exp(-tr.t(k));
    std::vector<Vec> ystar{Vec::Zero(1)};
    Vec w = Vec::Ones(1);
    return h_ts_exact({tr}, ystar, w);
  };
  const double exact = 0.5 * (1.0 - std::exp(-16.0));
  double e1 = std::abs(integral_with(801) - exact);
  double e2 = std::abs(integral_with(1601) - exact);
  CHECK(e2 < e1 / 3.2);  // halving h should shrink the error ~4x
}

TEST_CASE("jump surrogate basics") {
  Vec w = Vec::Ones(3), ws = Vec::Ones(3);
  std::vector<Vec> yp{Vec::Ones(3)}, ys{Vec::Ones(3)};
  CHECK(h_ts_jump(yp, ys, w, ws) == doctest::Approx(0.0));

  std::vector<Vec> yp2, ys2;
  for (int i = 0; i < 4; ++i) {
    yp2.push_back(Vec::Ones(3));
    ys2.push_back(Vec::Zero(3));
  }
  CHECK(h_ts_jump(yp2, ys2, w, ws) == doctest::Approx(12.0));
}

TEST_CASE("jump surrogate is invariant to consistent output permutation") {
  std::mt19937 rng(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec w(3), ws(3), d(3);
  for (int k = 0; k < 3; ++k) {
    w(k) = std::abs(nd(rng));
    ws(k) = std::abs(nd(rng));
    d(k) = nd(rng);
  }
  std::vector<Vec> yp{d}, ys{Vec::Zero(3)};
  double base = h_ts_jump(yp, ys, w, ws);
  // Permute outputs and weights identically.
  Vec wp(3), wsp(3), dp(3);
  int perm[3] = {2, 0, 1};
  for (int k = 0; k < 3; ++k) {
    wp(k) = w(perm[k]);
    wsp(k) = ws(perm[k]);
    dp(k) = d(perm[k]);
  }
  std::vector<Vec> yp2{dp}, ys2{Vec::Zero(3)};
  CHECK(h_ts_jump(yp2, ys2, wp, wsp) == doctest::Approx(base));
}

TEST_CASE("report reconciles and identity transition scores zero") {
  Vec y0 = Vec::Constant(2, 0.3);
  auto traj = make_traj(y0, {y0, y0}, {y0, y0});
  traj.real_adjust = {false, false};
  traj.real_switch = {false, false};
  auto region = optimal_region(y0, y0);
  Vec w = Vec::Ones(2);
  auto rep = assemble_report(traj, region, w, w, w, 0.0, TsSource::Exact, {0.0, 0.0});
  CHECK(rep.H == doctest::Approx(0.0));
  CHECK(rep.H == doctest::Approx(rep.H_bd + rep.H_vl + rep.H_ts));
}
