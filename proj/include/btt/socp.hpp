#pragma once

#include "btt/common.hpp"

namespace btt::socp {

/// Cone layout for the slack vector s: first `l` nonnegative entries, then
/// one second-order block per entry of `q` (dimension includes the head).
struct Cone {
  int l = 0;
  std::vector<int> q;
  int dim() const {
    int d = l;
    for (int k : q) d += k;
    return d;
  }
};

/// min c'x  s.t.  A x = b,  G x + s = h,  s in K.
struct Problem {
  SpMat A, G;
  Vec b, h, c;
  Cone cone;
  bool infeasible_presolve = false;  // contradiction found while compiling
  int n() const { return static_cast<int>(c.size()); }
};

enum class Status {
  Optimal,
  PrimalInfeasible,
  DualInfeasible,
  MaxIter,
  Numerical,
};

struct Solution {
  Status status = Status::Numerical;
  Vec x, y, z, s;
  double pobj = 0, dobj = 0, gap = 0;
  double pres = 0, dres = 0;
  int iters = 0;
};

struct Options {
  int max_iter = 100;
  double feastol = 1e-7;
  double abstol = 1e-7;
  double reltol = 1e-7;
  double infeastol = 1e-8;
};

Solution solve(const Problem& prob, const Options& opts = {});

const char* status_name(Status s);

}  // namespace btt::socp
