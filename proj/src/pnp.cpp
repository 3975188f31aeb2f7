#include "nxn/pnp.hpp"

#include <cmath>
#include <complex>
#include <numbers>

#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/random.hpp"

namespace nxn {

double circular_response_max(std::span<const double> kernel, std::size_t kh, std::size_t kw,
                             std::size_t height, std::size_t width) {
  require_size(kernel.size(), kh * kw, "circular_response_max kernel");
  const auto cy = static_cast<long>(kh / 2), cx = static_cast<long>(kw / 2);
  double best = 0.0;
  for (std::size_t fy = 0; fy < height; ++fy)
    for (std::size_t fx = 0; fx < width; ++fx) {
      std::complex<double> s(0.0, 0.0);
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          const double ang =
              -2.0 * std::numbers::pi *
              (static_cast<double>(fy) * static_cast<double>(static_cast<long>(i) - cy) /
                   static_cast<double>(height) +
               static_cast<double>(fx) * static_cast<double>(static_cast<long>(j) - cx) /
                   static_cast<double>(width));
          s += kernel[i * kw + j] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      best = std::max(best, std::abs(s));
    }
  return best;
}

BlurOperator::BlurOperator(std::vector<double> kernel, std::size_t kh, std::size_t kw,
                           std::size_t height, std::size_t width)
    : conv_(1, 1, kh, kw, height, width, Padding::circular, kernel),
      norm_(circular_response_max(kernel, kh, kw, height, width)) {
  if (kh > height || kw > width)
    throw InvalidInput("BlurOperator: kernel larger than the image");
}

BlurOperator BlurOperator::motion(std::size_t length, std::size_t height, std::size_t width) {
  if (length == 0 || length % 2 == 0) throw InvalidInput("BlurOperator: length must be odd");
  return BlurOperator(std::vector<double>(length, 1.0 / static_cast<double>(length)), 1, length,
                      height, width);
}

Vec data_gradient(const LinearOperator& k, std::span<const double> x, std::span<const double> y) {
  require_size(y.size(), k.codomain_dim(), "data_gradient y");
  Vec r = k.apply(x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
  return k.apply_adjoint(r);
}

double data_energy(const LinearOperator& k, std::span<const double> x, std::span<const double> y) {
  require_size(y.size(), k.codomain_dim(), "data_energy y");
  const Vec r = k.apply(x);
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += (r[i] - y[i]) * (r[i] - y[i]);
  return 0.5 * s;
}

X0Policy parse_x0_policy(const std::string& name) {
  if (name == "measurements") return X0Policy::measurements;
  if (name == "zeros") return X0Policy::zeros;
  if (name == "adjoint_applied") return X0Policy::adjoint_applied;
  throw InvalidInput("unknown x0 policy '" + name + "'");
}

std::string to_string(X0Policy p) {
  switch (p) {
    case X0Policy::measurements: return "measurements";
    case X0Policy::zeros: return "zeros";
    case X0Policy::adjoint_applied: return "adjoint_applied";
  }
  return "unknown";
}

double default_tau(const BlurOperator& k) {
  if (!(k.norm() > 0.0)) throw InvalidInput("default_tau: zero operator");
  return 1.0 / (k.norm() * k.norm());
}

PnpResult pnp_pgm(std::span<const double> y, const PnpConfig& cfg, const LinearOperator& k,
                  const Denoiser& denoiser) {
  if (!(cfg.tau > 0.0) || !std::isfinite(cfg.tau)) throw InvalidInput("pnp_pgm: tau must be > 0");
  require_size(y.size(), k.codomain_dim(), "pnp_pgm y");
  PnpResult res;
  switch (cfg.x0) {
    case X0Policy::measurements:
      require_size(k.domain_dim(), y.size(), "pnp_pgm x0 = y");
      res.x.assign(y.begin(), y.end());
      break;
    case X0Policy::zeros: res.x.assign(k.domain_dim(), 0.0); break;
    case X0Policy::adjoint_applied: res.x = k.apply_adjoint(y); break;
  }
  Vec v(res.x.size());
  for (std::size_t it = 0; it < cfg.n_iter; ++it) {
    const Vec g = data_gradient(k, res.x, y);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = res.x[i] - cfg.tau * g[i];
    Vec next;
    try {
      next = denoiser(v);
    } catch (const DivergenceError& e) {
      res.diverged = true;
      res.iters = it + 1;
      res.message = e.what();
      return res;
    }
    require_size(next.size(), res.x.size(), "pnp_pgm denoiser output");
    double r = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) r += (next[i] - res.x[i]) * (next[i] - res.x[i]);
    r = std::sqrt(r);
    res.iters = it + 1;
    res.residuals.push_back(r);
    if (!all_finite(next) || !std::isfinite(r)) {
      res.diverged = true;
      res.message = "non-finite iterate at iteration " + std::to_string(it + 1);
      return res;
    }
    res.x = std::move(next);
    if (r < cfg.tol) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

Vec simulate_measurements(std::span<const double> x_true, const LinearOperator& k,
                          double noise_sigma, std::uint64_t seed) {
  if (!(noise_sigma >= 0.0)) throw InvalidInput("simulate_measurements: noise_sigma must be >= 0");
  Vec y = k.apply(x_true);
  if (noise_sigma == 0.0) return y;
  Rng rng(seed);
  for (auto& e : y) e += noise_sigma * rng.normal();
  return y;
}

}  // namespace nxn
