#include "nxn/tableau.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/random.hpp"

namespace nxn {

bool RKTableau::is_explicit() const {
  for (std::size_t i = 0; i < stages; ++i)
    for (std::size_t j = i; j < stages; ++j)
      if (coeff(i, j) != 0.0) return false;
  return true;
}

void RKTableau::validate() const {
  if (stages == 0) throw InvalidInput("tableau '" + name + "': no stages");
  require_size(a.size(), stages * stages, "tableau A");
  require_size(b.size(), stages, "tableau b");
  require_size(c.size(), stages, "tableau c");
  if (!all_finite(a) || !all_finite(b) || !all_finite(c))
    throw InvalidInput("tableau '" + name + "': non-finite coefficient");
  double sum_b = 0.0;
  for (double v : b) sum_b += v;
  if (std::abs(sum_b - 1.0) > 1e-12)
    throw InvalidInput("tableau '" + name + "': weights must sum to 1");
  for (std::size_t i = 0; i < stages; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < stages; ++j) row += coeff(i, j);
    if (std::abs(row - c[i]) > 1e-12)
      throw InvalidInput("tableau '" + name + "': c must equal the row sums of A");
  }
}

TableauName parse_tableau_name(const std::string& name) {
  if (name == "euler") return TableauName::euler;
  if (name == "heun") return TableauName::heun;
  if (name == "rk4") return TableauName::rk4;
  throw InvalidInput("unknown tableau '" + name + "'");
}

std::string to_string(TableauName name) {
  switch (name) {
    case TableauName::euler: return "euler";
    case TableauName::heun: return "heun";
    case TableauName::rk4: return "rk4";
  }
  return "unknown";
}

RKTableau builtin_tableau(TableauName name) {
  RKTableau t;
  t.name = to_string(name);
  switch (name) {
    case TableauName::euler:
      t.stages = 1;
      t.a = {0.0};
      t.b = {1.0};
      t.c = {0.0};
      break;
    case TableauName::heun:
      t.stages = 2;
      t.a = {0.0, 0.0,
             1.0, 0.0};
      t.b = {0.5, 0.5};
      t.c = {0.0, 1.0};
      break;
    case TableauName::rk4:
      t.stages = 4;
      t.a = {0.0, 0.0, 0.0, 0.0,
             0.5, 0.0, 0.0, 0.0,
             0.0, 0.5, 0.0, 0.0,
             0.0, 0.0, 1.0, 0.0};
      t.b = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};
      t.c = {0.0, 0.5, 0.5, 1.0};
      break;
  }
  t.validate();
  t.radius = contractivity_radius(t);
  return t;
}

RKTableau builtin_tableau(const std::string& name) {
  return builtin_tableau(parse_tableau_name(name));
}

bool GeneralizedDisk::contains(std::complex<double> z) const {
  if (infinite) return z.real() <= 0.0;
  if (r >= 0.0) return std::abs(z + r) <= r;
  return std::abs(z + r) >= -r;
}

ContractivityAnalysis analyze_contractivity(const RKTableau& t) {
  t.validate();
  const std::size_t m = t.stages;
  for (double bi : t.b) {
    if (!(bi > 0.0))
      throw UnsupportedTableau("tableau '" + t.name + "': contractivity radius needs b_i > 0");
  }

  ContractivityAnalysis out;
  out.q.assign(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out.q[i * m + j] = t.b[i] * t.coeff(i, j) + t.coeff(j, i) * t.b[j] - t.b[i] * t.b[j];

  // Q v = lambda diag(b) v  <=>  (D^{-1/2} Q D^{-1/2}) w = lambda w.
  std::vector<double> sym(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      sym[i * m + j] = out.q[i * m + j] / std::sqrt(t.b[i] * t.b[j]);
  out.eigenvalues = jacobi_eigenvalues(std::move(sym), m).values;
  out.rho = out.eigenvalues.front();

  if (std::abs(out.rho) <= 1e-12) {
    out.disk = {std::numeric_limits<double>::infinity(), true};
    out.warning = "rho = 0: half-plane disk, which no explicit method attains";
  } else {
    out.disk = {-1.0 / out.rho, false};
  }
  return out;
}

double contractivity_radius(const RKTableau& t) { return analyze_contractivity(t).disk.r; }

std::complex<double> stability_K(const RKTableau& t,
                                 std::span<const std::complex<double>> zeta) {
  using cd = std::complex<double>;
  const std::size_t m = t.stages;
  require_size(zeta.size(), m, "stability_K zeta");

  // Solve (I - A diag(zeta)) w = 1.
  std::vector<cd> w(m, cd(1.0, 0.0));
  if (t.is_explicit()) {
    for (std::size_t i = 0; i < m; ++i) {
      cd s(1.0, 0.0);
      for (std::size_t j = 0; j < i; ++j) s += t.coeff(i, j) * zeta[j] * w[j];
      w[i] = s;
    }
  } else {
    std::vector<cd> mat(m * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        mat[i * m + j] = (i == j ? cd(1.0, 0.0) : cd(0.0, 0.0)) - t.coeff(i, j) * zeta[j];
    for (std::size_t col = 0; col < m; ++col) {
      std::size_t pivot = col;
      for (std::size_t r = col + 1; r < m; ++r)
        if (std::abs(mat[r * m + col]) > std::abs(mat[pivot * m + col])) pivot = r;
      if (std::abs(mat[pivot * m + col]) < 1e-14)
        throw NumericalSingularity("stability_K: I - A diag(zeta) is singular");
      if (pivot != col) {
        for (std::size_t j = 0; j < m; ++j) std::swap(mat[col * m + j], mat[pivot * m + j]);
        std::swap(w[col], w[pivot]);
      }
      for (std::size_t r = col + 1; r < m; ++r) {
        const cd f = mat[r * m + col] / mat[col * m + col];
        for (std::size_t j = col; j < m; ++j) mat[r * m + j] -= f * mat[col * m + j];
        w[r] -= f * w[col];
      }
    }
    for (std::size_t i = m; i-- > 0;) {
      cd s = w[i];
      for (std::size_t j = i + 1; j < m; ++j) s -= mat[i * m + j] * w[j];
      w[i] = s / mat[i * m + i];
    }
  }

  cd k(1.0, 0.0);
  for (std::size_t i = 0; i < m; ++i) k += t.b[i] * zeta[i] * w[i];
  return k;
}

ContractivitySample verify_contractive(const RKTableau& t, double r, std::size_t samples,
                                       std::uint64_t seed) {
  if (!(r > 0.0) || !std::isfinite(r))
    throw InvalidInput("verify_contractive: r must be finite and positive");
  if (samples == 0) throw InvalidInput("verify_contractive: samples must be >= 1");
  Rng rng(seed);
  ContractivitySample rep;
  rep.samples = samples;
  std::vector<std::complex<double>> zeta(t.stages);
  for (std::size_t s = 0; s < samples; ++s) {
    for (auto& z : zeta) {
      // Area-uniform point of the disk centred at -r with radius r.
      const double rad = r * std::sqrt(rng.uniform());
      const double ang = 2.0 * std::numbers::pi * rng.uniform();
      z = std::complex<double>(-r + rad * std::cos(ang), rad * std::sin(ang));
    }
    const double mag = std::abs(stability_K(t, zeta));
    rep.max_abs_k = std::max(rep.max_abs_k, mag);
    if (mag > 1.0 + 1e-12) ++rep.violations;
  }
  return rep;
}

Vec rk_step(const RKTableau& t, double h, std::span<const double> y, const VectorField& field) {
  if (!t.is_explicit()) throw UnsupportedTableau("rk_step: tableau '" + t.name + "' is implicit");
  if (!(h > 0.0)) throw InvalidInput("rk_step: step size must be positive");
  const std::size_t m = t.stages;
  const std::size_t n = y.size();

  std::vector<Vec> k(m, Vec(n));
  Vec stage(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(y.begin(), y.end(), stage.begin());
    for (std::size_t j = 0; j < i; ++j) {
      const double aij = t.coeff(i, j);
      if (aij == 0.0) continue;
      const double c = h * aij;
      for (std::size_t e = 0; e < n; ++e) stage[e] = stage[e] + c * k[j][e];
    }
    field(stage, k[i]);
    if (!all_finite(k[i]))
      throw DivergenceError("rk_step: non-finite value in stage " + std::to_string(i + 1));
  }
  Vec out(y.begin(), y.end());
  for (std::size_t i = 0; i < m; ++i) {
    if (t.b[i] == 0.0) continue;
    const double c = h * t.b[i];
    for (std::size_t e = 0; e < n; ++e) out[e] = out[e] + c * k[i][e];
  }
  if (!all_finite(out)) throw DivergenceError("rk_step: non-finite output");
  return out;
}

}  // namespace nxn
