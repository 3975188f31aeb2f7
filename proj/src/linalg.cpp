#include "nxn/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "nxn/errors.hpp"

namespace nxn {

double dot(std::span<const double> a, std::span<const double> b) {
  require_size(b.size(), a.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

namespace {

double off_norm(const std::vector<double>& a, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += a[i * n + j] * a[i * n + j];
  return std::sqrt(s);
}

}  // namespace

SymmetricEigenResult jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol,
                                        int max_sweeps) {
  require_size(a.size(), n * n, "jacobi_eigenvalues");
  if (!all_finite(a)) throw InvalidInput("jacobi_eigenvalues: non-finite entry");

  double frob = 0.0;
  for (double v : a) frob += v * v;
  frob = std::sqrt(frob);
  const double threshold = tol * std::max(1.0, frob);

  SymmetricEigenResult result;
  result.off_diagonal = off_norm(a, n);
  while (result.off_diagonal >= threshold && result.sweeps < max_sweeps) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p];
        const double aqq = a[q * n + q];
        // Rotation angle annihilating a(p,q) (Golub & Van Loan, sym.schur2).
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p];
          const double akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k];
          const double aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
      }
    }
    ++result.sweeps;
    result.off_diagonal = off_norm(a, n);
  }

  result.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) result.values[i] = a[i * n + i];
  std::sort(result.values.begin(), result.values.end());
  return result;
}

}  // namespace nxn
