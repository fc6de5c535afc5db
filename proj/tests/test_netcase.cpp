#include <cstdio>
#include <fstream>
#include <random>

#include "btt/netcase.hpp"
#include "doctest.h"

using namespace btt;
using namespace btt::netcase;

namespace {

std::string data(const std::string& f) { return std::string(BTT_DATA_DIR) + "/" + f; }

std::string write_tmp(const std::string& name, const std::string& body) {
  std::string path = std::string("/tmp/btt_test_") + name;
  std::ofstream out(path);
  out << body;
  return path;
}

// Union-find connectivity oracle, independent of the graph-search path.
bool uf_connected(const NetworkCase& cs, const TopologyVector& z) {
  std::vector<int> parent(cs.n_bus());
  for (int i = 0; i < cs.n_bus(); ++i) parent[i] = i;
  std::function<int(int)> find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (int e = 0; e < cs.n_branch(); ++e) {
    if (z.z(e) == 0) continue;
    int a = find(cs.bus_index(cs.branches[e].from));
    int b = find(cs.bus_index(cs.branches[e].to));
    parent[a] = b;
  }
  for (int i = 1; i < cs.n_bus(); ++i)
    if (find(i) != find(0)) return false;
  return true;
}

}  // namespace

TEST_CASE("load bundled cases") {
  auto c4 = load_case(data("case4.json"));
  CHECK(c4.n_bus() == 4);
  CHECK(c4.n_branch() == 5);
  CHECK(c4.generators.size() == 2);
  CHECK(c4.loads.size() == 2);

  auto c9 = load_case(data("case9.json"));
  CHECK(c9.n_bus() == 9);
  CHECK(c9.tcsc_branches.size() == 1);
  CHECK(c9.branches[c9.tcsc_branches[0]].id == "5-9");
}

TEST_CASE("empty bus list rejected") {
  auto p = write_tmp("empty.json", R"({"format_version":1,"buses":[],"branches":[]})");
  CHECK_THROWS_AS(load_case(p), ValidationError);
}

TEST_CASE("missing bus reference named in error") {
  auto p = write_tmp("missing.json", R"({
    "format_version": 1,
    "buses": [{"id": 1}, {"id": 2}],
    "branches": [{"id": "b", "from": 1, "to": 99, "x": 0.1}]
  })");
  try {
    load_case(p);
    FAIL("expected validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("99") != std::string::npos);
  }
}

TEST_CASE("malformed json is a parse error") {
  auto p = write_tmp("broken.json", "{ not json");
  CHECK_THROWS_AS(load_case(p), ParseError);
}

TEST_CASE("incidence structure") {
  auto c2 = load_case(data("case2.json"));
  auto inc2 = incidence(c2);
  CHECK(inc2.E.rows() == 2);
  CHECK(inc2.E.cols() == 1);
  CHECK(inc2.E(0, 0) == 1.0);
  CHECK(inc2.E(1, 0) == -1.0);
  CHECK(inc2.Etil(0, 0) == 1.0);
  CHECK(inc2.Etil(1, 0) == 1.0);

  auto c4 = load_case(data("case4.json"));
  auto inc = incidence(c4);
  CHECK(inc.E.rows() == 4);
  CHECK(inc.E.cols() == 5);
  // Column sums vanish for an oriented incidence matrix.
  for (int e = 0; e < 5; ++e) CHECK(inc.E.col(e).sum() == doctest::Approx(0.0));
  CHECK((inc.E - (inc.Ef + inc.Et)).norm() == doctest::Approx(0.0));
  CHECK((inc.Etil - (inc.Ef - inc.Et)).norm() == doctest::Approx(0.0));
}

TEST_CASE("topology distance") {
  auto c9 = load_case(data("case9.json"));
  auto z0 = topology_from_open(c9, {"5-6", "5-7"});
  auto zT = topology_from_open(c9, {"8-9", "7-9"});
  CHECK(topology_distance(z0, z0) == 0);
  CHECK(topology_distance(z0, zT) == 4);
  auto z1 = z0;
  z1.z(0) = 1 - z1.z(0);
  CHECK(topology_distance(z0, z1) == 1);

  TopologyVector bad;
  bad.z = IVec::Ones(3);
  CHECK_THROWS(topology_distance(z0, bad));
}

TEST_CASE("topology distance is a metric") {
  std::mt19937 rng(7);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 8;
    TopologyVector a, b, c;
    a.z.resize(n); b.z.resize(n); c.z.resize(n);
    for (int i = 0; i < n; ++i) {
      a.z(i) = coin(rng); b.z(i) = coin(rng); c.z(i) = coin(rng);
    }
    CHECK(topology_distance(a, b) == topology_distance(b, a));
    CHECK(topology_distance(a, c) <= topology_distance(a, b) + topology_distance(b, c));
    CHECK((topology_distance(a, b) == 0) == (a.z == b.z));
  }
}

TEST_CASE("connectivity basics") {
  // Triangle with one edge open stays connected.
  auto tri = load_case(data("casedyn.json"));
  CHECK(tri.n_branch() == 3);
  auto z = topology_from_open(tri, {"1-2"});
  CHECK(is_connected(tri, z));

  // Star topology loses a leaf when a spoke opens.
  auto p = write_tmp("star.json", R"({
    "format_version": 1,
    "buses": [{"id": 1}, {"id": 2}, {"id": 3}, {"id": 4}],
    "branches": [
      {"id": "1-2", "from": 1, "to": 2, "x": 0.1},
      {"id": "1-3", "from": 1, "to": 3, "x": 0.1},
      {"id": "1-4", "from": 1, "to": 4, "x": 0.1}
    ]
  })");
  auto star = load_case(p);
  CHECK(is_connected(star, topology_from_open(star, {})));
  CHECK_FALSE(is_connected(star, topology_from_open(star, {"1-3"})));
}

TEST_CASE("9-bus scheme topologies are connected") {
  auto c9 = load_case(data("case9.json"));
  auto z = topology_from_open(c9, {"8-9", "7-9"});
  CHECK(is_connected(c9, z));
}

TEST_CASE("connectivity agrees with union-find over all topologies") {
  for (const char* f : {"case4.json", "case2p.json", "casedvc.json"}) {
    auto cs = load_case(data(f));
    const int ne = cs.n_branch();
    REQUIRE(ne <= 10);
    for (int mask = 0; mask < (1 << ne); ++mask) {
      TopologyVector z;
      z.z.resize(ne);
      for (int e = 0; e < ne; ++e) z.z(e) = (mask >> e) & 1;
      CHECK(is_connected(cs, z) == uf_connected(cs, z));
    }
  }
}

TEST_CASE("acv layout and initial values") {
  auto c9 = load_case(data("case9.json"));
  auto lay = acv_layout(c9);
  // v_g (3) + p_ess (2) + v_dvc (1) + b_tcsc (1)
  CHECK(lay.n_s() == 7);
  // (m, d) per CIG
  CHECK(lay.n_t() == 4);
  Vec a0 = initial_a_s(c9, lay);
  CHECK(a0(0) == doctest::Approx(1.04));
  CHECK(a0(lay.pess_offset) == doctest::Approx(1.63));
  CHECK(a0(lay.tcsc_offset) == doctest::Approx(-9.05));
  Vec t0 = initial_a_t(c9, lay);
  CHECK(t0(0) == doctest::Approx(3.0));
  CHECK(t0(2) == doctest::Approx(10.0));
  CHECK((lay.lower_s().array() <= a0.array()).all());
  CHECK((a0.array() <= lay.upper_s().array()).all());
}

TEST_CASE("scenario loading") {
  auto c9 = load_case(data("case9.json"));
  auto sc = load_scenario(data("scenario9.json"), c9);
  CHECK(topology_distance(sc.z0, sc.zT) == 4);
  CHECK(sc.pool == 4);
  CHECK(sc.outputs.size() >= 2);
  CHECK(sc.budget.t_max > 0);
}
