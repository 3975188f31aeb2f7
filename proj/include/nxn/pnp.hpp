#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nxn/linop.hpp"

namespace nxn {

// Single-channel circular blur with an exactly known operator norm.
class BlurOperator {
 public:
  // kernel is kh x kw (odd sizes), row-major.
  BlurOperator(std::vector<double> kernel, std::size_t kh, std::size_t kw, std::size_t height,
               std::size_t width);
  // Horizontal line of `length` equal taps summing to 1.
  static BlurOperator motion(std::size_t length, std::size_t height, std::size_t width);

  const Conv2dOp& op() const { return conv_; }
  // max |K^(omega)| over the discrete frequency grid.
  double norm() const { return norm_; }
  Vec apply(std::span<const double> x) const { return conv_.apply(x); }
  Vec apply_adjoint(std::span<const double> y) const { return conv_.apply_adjoint(y); }

 private:
  Conv2dOp conv_;
  double norm_;
};

// max over the height x width DFT grid of the kernel's frequency response.
double circular_response_max(std::span<const double> kernel, std::size_t kh, std::size_t kw,
                             std::size_t height, std::size_t width);

// K^T (K x - y).
Vec data_gradient(const LinearOperator& k, std::span<const double> x, std::span<const double> y);
double data_energy(const LinearOperator& k, std::span<const double> x, std::span<const double> y);

enum class X0Policy { measurements, zeros, adjoint_applied };
X0Policy parse_x0_policy(const std::string& name);
std::string to_string(X0Policy p);

struct PnpConfig {
  double tau = 0.0;  // must be > 0 when calling pnp_pgm; see default_tau
  std::size_t n_iter = 2000;
  double tol = 1e-6;
  X0Policy x0 = X0Policy::adjoint_applied;
};

double default_tau(const BlurOperator& k);

struct PnpResult {
  Vec x;
  Vec residuals;  // |x_{k+1} - x_k|
  std::size_t iters = 0;
  bool converged = false;
  bool diverged = false;
  std::string message;
};

using Denoiser = std::function<Vec(std::span<const double>)>;

// x <- D(x - tau K^T (K x - y)) until the step is below tol or n_iter steps.
PnpResult pnp_pgm(std::span<const double> y, const PnpConfig& cfg, const LinearOperator& k,
                  const Denoiser& denoiser);

// K x + noise_sigma * N(0, I), keyed by seed.
Vec simulate_measurements(std::span<const double> x_true, const LinearOperator& k,
                          double noise_sigma, std::uint64_t seed);

}  // namespace nxn
