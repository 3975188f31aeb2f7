#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace nxn {

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
bool all_finite(std::span<const double> a);

struct SymmetricEigenResult {
  std::vector<double> values;  // ascending
  int sweeps = 0;
  double off_diagonal = 0.0;   // final off-diagonal Frobenius norm
};

// Cyclic Jacobi eigenvalue iteration for a symmetric n x n matrix (row-major).
// Sweeps until the off-diagonal Frobenius norm drops below
// tol * max(1, ||A||_F). Throws InvalidInput on non-finite or non-square input.
SymmetricEigenResult jacobi_eigenvalues(std::vector<double> matrix, std::size_t n,
                                        double tol = 1e-14, int max_sweeps = 100);

}  // namespace nxn
