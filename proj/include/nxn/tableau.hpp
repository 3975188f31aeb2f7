#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nxn {

using Vec = std::vector<double>;

// Butcher tableau (A, b, c) of an m-stage Runge-Kutta method.
struct RKTableau {
  std::string name;
  std::size_t stages = 0;
  std::vector<double> a;  // m x m, row-major
  std::vector<double> b;
  std::vector<double> c;
  std::optional<double> radius;  // cached circle-contractivity radius

  double coeff(std::size_t i, std::size_t j) const { return a[i * stages + j]; }
  bool is_explicit() const;

  // Checks sizes, finiteness, sum(b) = 1 and c_i = sum_j A_ij (both to 1e-12).
  void validate() const;
};

enum class TableauName { euler, heun, rk4 };

TableauName parse_tableau_name(const std::string& name);
std::string to_string(TableauName name);

// Builtin tableau with its contractivity radius cached.
RKTableau builtin_tableau(TableauName name);
RKTableau builtin_tableau(const std::string& name);

// The generalized disk D(r): |z + r| <= r for r >= 0, Re z <= 0 for r = inf,
// |z + r| >= -r for r < 0.
struct GeneralizedDisk {
  double r = 0.0;
  bool infinite = false;

  bool contains(std::complex<double> z) const;
};

struct ContractivityAnalysis {
  std::vector<double> q;            // diag(b) A + A^T diag(b) - b b^T, row-major
  std::vector<double> eigenvalues;  // of Q v = lambda diag(b) v, ascending
  double rho = 0.0;                 // smallest generalized eigenvalue
  GeneralizedDisk disk;
  std::string warning;
};

// Optimal circle-contractivity radius r = -1/rho. Requires b_i > 0 (throws
// UnsupportedTableau otherwise). rho = 0 (within 1e-12) gives the infinite disk.
ContractivityAnalysis analyze_contractivity(const RKTableau& t);
// Radius only; +infinity when the disk is the half plane.
double contractivity_radius(const RKTableau& t);

// K(zeta) = 1 + b^T diag(zeta) (I - A diag(zeta))^{-1} 1.
// Explicit tableaus use forward substitution; implicit ones use pivoted
// elimination and throw NumericalSingularity on a singular system.
std::complex<double> stability_K(const RKTableau& t, std::span<const std::complex<double>> zeta);

struct ContractivitySample {
  double max_abs_k = 0.0;
  std::size_t violations = 0;  // |K| > 1 + 1e-12
  std::size_t samples = 0;
};

// Monte-Carlo check of |K| <= 1 on D(r)^m with area-uniform disk samples.
ContractivitySample verify_contractive(const RKTableau& t, double r, std::size_t samples,
                                       std::uint64_t seed);

// Autonomous vector field: writes f(y) into out.
using VectorField = std::function<void(std::span<const double> y, std::span<double> out)>;

// One explicit RK step y + h sum_i b_i f(Y_i). Stage combinations are applied
// in index order, skipping zero coefficients. Throws UnsupportedTableau for
// implicit tableaus and DivergenceError naming the stage on non-finite values.
Vec rk_step(const RKTableau& t, double h, std::span<const double> y, const VectorField& field);

}  // namespace nxn
