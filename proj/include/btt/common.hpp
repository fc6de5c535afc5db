#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace btt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

constexpr double kPi = 3.14159265358979323846;

/// Nominal angular frequency used to scale rotor-angle dynamics (rad/s).
constexpr double kOmegaBase = 2.0 * kPi * 50.0;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Malformed input file (syntax or schema).
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

/// Structurally valid input violating one or more model invariants.
/// Collects every violation instead of stopping at the first.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "validation failed:";
    for (const auto& m : v) s += "\n  - " + m;
    return s;
  }
  std::vector<std::string> violations_;
};

/// Numerical failure of an iterative solver (non-convergence, singularity).
class SolveError : public std::runtime_error {
 public:
  explicit SolveError(const std::string& what) : std::runtime_error(what) {}
};

/// printf-style formatting into std::string.
template <typename... Args>
std::string strf(const char* fmt, Args... args) {
  int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string s(static_cast<size_t>(n), '\0');
  std::snprintf(s.data(), s.size() + 1, fmt, args...);
  return s;
}

}  // namespace btt
