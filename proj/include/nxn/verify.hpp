#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nxn/grad.hpp"
#include "nxn/net.hpp"

namespace nxn {

// Empirical checks can only falsify: a violation proves a property false, a
// pass is evidence.

using Map = std::function<Vec(std::span<const double>)>;
// A map written with tape primitives, for gradient-based searches.
using TapeMap = std::function<Var(Tape&, Var)>;

Map as_map(const Model& model);
TapeMap as_tape_map(const Model& model);

enum class PairDistribution { gaussian, uniform_box, data_perturbation };
PairDistribution parse_pair_distribution(const std::string& name);
std::string to_string(PairDistribution d);

// Deterministic stream of distinct point pairs in R^dim.
struct PairSampler {
  std::uint64_t seed = 0;
  PairDistribution distribution = PairDistribution::gaussian;
  std::size_t count = 10000;
  std::size_t dim = 0;
  double scale = 1.0;                   // std (gaussian) or half-width (uniform_box)
  double radius = 0.1;                  // perturbation std for data_perturbation
  std::vector<Vec> data;                // anchors for data_perturbation

  // Pair i; resampled while the points are closer than 1e-12.
  std::pair<Vec, Vec> pair(std::size_t i) const;
};

struct StabilityReport {
  double max_ratio = 0.0;
  std::size_t argmax_index = 0;
  std::uint64_t argmax_fingerprint = 0;  // hash of the worst pair's bytes
  std::size_t violations = 0;            // ratio > 1 + tol
  std::size_t samples = 0;
  double tol = 0.0;
};

StabilityReport check_nonexpansive(const Map& map, const PairSampler& sampler, double tol = 1e-9);
// Non-expansiveness of T = (map - id) / alpha + id.
StabilityReport check_averaged(const Map& map, double alpha, const PairSampler& sampler,
                               double tol = 1e-9);

struct SpectrumInterval {
  double lo = 0.0;
  double hi = 0.0;
  double bound_lo = 0.0;  // 1 - h |A|^2 L with the exact dense norm
  bool contained = false; // [lo, hi] within [bound_lo - 1e-10, 1 + 1e-10]
  bool nudged = false;    // x was moved off an activation kink
  Vec x;                  // point actually used
};

// Eigenvalues of I - h A^T diag(act'(Ax + b)) A for one Euler layer. A is
// materialized densely (at most 256 x 256).
SpectrumInterval jacobian_spectrum_layer(const GradFlowField& field, double h,
                                         std::span<const double> x);

struct FixedPointSummary {
  std::size_t iters = 0;  // map applications performed
  double final_residual = 0.0;
  bool converged = false;
  bool diverged = false;
  std::string verdict;  // converged | diverged | max_iter
  Vec residuals;
  Vec x;
};

// x_{k+1} = map(x_k) until |x_{k+1} - x_k| < tol or max_iter applications.
FixedPointSummary fixed_point_iterate(const Map& map, std::span<const double> x0,
                                      std::size_t max_iter, double tol);

// Best ratio |F(x) - F(y)| / |x - y| found by backtracking gradient ascent on
// its logarithm from `restarts` perturbed starts around x0.
double lipschitz_lower_bound(const TapeMap& map, std::span<const double> x0,
                             std::size_t ascent_steps, double step_size, std::uint64_t seed = 0,
                             std::size_t restarts = 4);

}  // namespace nxn
