#include "nxn/verify.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "nxn/errors.hpp"
#include "nxn/kernels.hpp"
#include "nxn/linalg.hpp"
#include "nxn/parallel.hpp"

namespace nxn {

Map as_map(const Model& model) {
  return [&model](std::span<const double> x) { return model.forward(x); };
}

TapeMap as_tape_map(const Model& model) {
  return [&model](Tape& t, Var x) { return model.record(t, x, nullptr); };
}

PairDistribution parse_pair_distribution(const std::string& name) {
  if (name == "gaussian") return PairDistribution::gaussian;
  if (name == "uniform_box") return PairDistribution::uniform_box;
  if (name == "data_perturbation") return PairDistribution::data_perturbation;
  throw InvalidInput("unknown pair distribution '" + name + "'");
}

std::string to_string(PairDistribution d) {
  switch (d) {
    case PairDistribution::gaussian: return "gaussian";
    case PairDistribution::uniform_box: return "uniform_box";
    case PairDistribution::data_perturbation: return "data_perturbation";
  }
  return "unknown";
}

std::pair<Vec, Vec> PairSampler::pair(std::size_t i) const {
  if (dim == 0) throw InvalidInput("PairSampler: dim must be >= 1");
  if (distribution == PairDistribution::data_perturbation && data.empty())
    throw InvalidInput("PairSampler: data_perturbation needs anchor data");
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng = Rng::from_counters(seed, i, attempt);
    Vec x(dim), y(dim);
    switch (distribution) {
      case PairDistribution::gaussian:
        for (auto& e : x) e = scale * rng.normal();
        for (auto& e : y) e = scale * rng.normal();
        break;
      case PairDistribution::uniform_box:
        for (auto& e : x) e = rng.uniform(-scale, scale);
        for (auto& e : y) e = rng.uniform(-scale, scale);
        break;
      case PairDistribution::data_perturbation: {
        const Vec& d = data[i % data.size()];
        require_size(d.size(), dim, "PairSampler anchor");
        for (std::size_t k = 0; k < dim; ++k) x[k] = d[k] + radius * rng.normal();
        for (std::size_t k = 0; k < dim; ++k) y[k] = d[k] + radius * rng.normal();
        break;
      }
    }
    double sep = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sep += (x[k] - y[k]) * (x[k] - y[k]);
    if (std::sqrt(sep) >= 1e-12) return {std::move(x), std::move(y)};
    if (attempt > 1000) throw InvalidInput("PairSampler: cannot draw distinct points");
  }
}

namespace {

std::uint64_t fingerprint(const Vec& x, const Vec& y) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const Vec& v) {
    for (double d : v) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &d, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  };
  mix(x);
  mix(y);
  return h;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

StabilityReport check_nonexpansive(const Map& map, const PairSampler& sampler, double tol) {
  StabilityReport rep;
  rep.samples = sampler.count;
  rep.tol = tol;
  std::vector<double> ratios(sampler.count, 0.0);
  parallel_for(sampler.count, [&](std::size_t i) {
    const auto [x, y] = sampler.pair(i);
    const Vec fx = map(x);
    const Vec fy = map(y);
    ratios[i] = distance(fx, fy) / distance(x, y);
  });
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double r = ratios[i];
    if (!(r <= 1.0 + tol)) ++rep.violations;
    if (r > rep.max_ratio || std::isnan(r)) {
      rep.max_ratio = std::isnan(r) ? std::numeric_limits<double>::infinity() : r;
      rep.argmax_index = i;
    }
  }
  if (rep.samples > 0) {
    const auto [x, y] = sampler.pair(rep.argmax_index);
    rep.argmax_fingerprint = fingerprint(x, y);
  }
  return rep;
}

StabilityReport check_averaged(const Map& map, double alpha, const PairSampler& sampler,
                               double tol) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidInput("check_averaged: alpha must lie in (0,1)");
  const Map unfolded = [&map, alpha](std::span<const double> z) {
    const Vec m = map(z);
    Vec t(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) t[i] = (m[i] - z[i]) / alpha + z[i];
    return t;
  };
  return check_nonexpansive(unfolded, sampler, tol);
}

SpectrumInterval jacobian_spectrum_layer(const GradFlowField& field, double h,
                                         std::span<const double> x) {
  if (!(h >= 0.0)) throw InvalidInput("jacobian_spectrum_layer: h must be >= 0");
  require_size(x.size(), field.dim(), "jacobian_spectrum_layer x");
  const DenseOp a = to_dense(field.op());
  const std::size_t m = a.rows(), n = a.cols();
  const Activation& act = field.activation();

  SpectrumInterval out;
  out.x.assign(x.begin(), x.end());
  Vec z(m);
  Rng rng(0x6b696e6bULL);
  for (int attempt = 0;; ++attempt) {
    a.apply_into(out.x, z);
    kernels::add_bias(z, field.bias(), z);
    bool kink = false;
    if (act.kind != ActivationKind::identity)
      for (double e : z) kink = kink || std::abs(e) < 1e-9;
    if (!kink) break;
    if (attempt >= 100) throw InvalidInput("jacobian_spectrum_layer: cannot leave the kink set");
    out.nudged = true;
    for (auto& e : out.x) e += 1e-6 * rng.normal();
  }

  std::vector<double> j(n * n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const double d = act.derivative(z[r]);
    for (std::size_t p = 0; p < n; ++p) {
      const double arp = a.at(r, p) * d;
      if (arp == 0.0) continue;
      for (std::size_t q = 0; q < n; ++q) j[p * n + q] += arp * a.at(r, q);
    }
  }
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) j[p * n + q] = (p == q ? 1.0 : 0.0) - h * j[p * n + q];
  const auto eig = jacobi_eigenvalues(std::move(j), n);
  out.lo = eig.values.front();
  out.hi = eig.values.back();
  const double s = spectral_norm_exact(a);
  out.bound_lo = 1.0 - h * s * s * act.lipschitz;
  out.contained = out.lo >= out.bound_lo - 1e-10 && out.hi <= 1.0 + 1e-10;
  return out;
}

FixedPointSummary fixed_point_iterate(const Map& map, std::span<const double> x0,
                                      std::size_t max_iter, double tol) {
  FixedPointSummary s;
  s.x.assign(x0.begin(), x0.end());
  s.verdict = "max_iter";
  for (std::size_t k = 0; k < max_iter; ++k) {
    Vec next;
    try {
      next = map(s.x);
    } catch (const DivergenceError&) {
      s.iters = k + 1;
      s.diverged = true;
      s.verdict = "diverged";
      s.final_residual = std::numeric_limits<double>::infinity();
      return s;
    }
    const double r = distance(next, s.x);
    s.iters = k + 1;
    s.final_residual = r;
    s.residuals.push_back(r);
    if (!all_finite(next) || !std::isfinite(r)) {
      s.diverged = true;
      s.verdict = "diverged";
      return s;
    }
    s.x = std::move(next);
    if (r < tol) {
      s.converged = true;
      s.verdict = "converged";
      return s;
    }
  }
  return s;
}

namespace {

struct RatioEval {
  double log_ratio = -std::numeric_limits<double>::infinity();
  double ratio = 0.0;
  Vec gx, gy;
};

RatioEval eval_ratio(const TapeMap& map, const Vec& x, const Vec& y, bool with_grad) {
  RatioEval r;
  Tape t;
  const Var xv = t.leaf(x, with_grad);
  const Var yv = t.leaf(y, with_grad);
  const Var fx = map(t, xv);
  const Var fy = map(t, yv);
  const Var d = t.axpy(fx, -1.0, fy);
  const Var num = t.dot(d, d);
  double den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) den += (x[i] - y[i]) * (x[i] - y[i]);
  const double nv = t.scalar(num);
  if (!(nv > 0.0) || !(den > 0.0) || !std::isfinite(nv)) return r;
  r.ratio = std::sqrt(nv / den);
  r.log_ratio = std::log(nv) - std::log(den);
  if (!with_grad) return r;
  t.backward(num);
  r.gx = t.grad(xv);
  r.gy = t.grad(yv);
  if (r.gx.empty()) r.gx.assign(x.size(), 0.0);
  if (r.gy.empty()) r.gy.assign(y.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = 2.0 * (x[i] - y[i]) / den;
    r.gx[i] = r.gx[i] / nv - e;
    r.gy[i] = r.gy[i] / nv + e;
  }
  return r;
}

}  // namespace

double lipschitz_lower_bound(const TapeMap& map, std::span<const double> x0,
                             std::size_t ascent_steps, double step_size, std::uint64_t seed,
                             std::size_t restarts) {
  if (!(step_size > 0.0)) throw InvalidInput("lipschitz_lower_bound: step_size must be positive");
  const std::size_t n = x0.size();
  double best = 0.0;
  for (std::size_t rs = 0; rs < std::max<std::size_t>(restarts, 1); ++rs) {
    Rng rng = Rng::from_counters(seed, 0x11b5, rs);
    Vec x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = x0[i] + 0.1 * rng.normal();
    for (std::size_t i = 0; i < n; ++i) y[i] = x0[i] + 0.1 * rng.normal();
    RatioEval cur = eval_ratio(map, x, y, true);
    best = std::max(best, cur.ratio);
    double step = step_size * distance(x, y);
    for (std::size_t k = 0; k < ascent_steps && step > 1e-14; ++k) {
      if (cur.gx.empty()) break;
      double gn = 0.0;
      for (std::size_t i = 0; i < n; ++i) gn += cur.gx[i] * cur.gx[i] + cur.gy[i] * cur.gy[i];
      gn = std::sqrt(gn);
      if (!(gn > 1e-30)) break;
      Vec xn(n), yn(n);
      for (std::size_t i = 0; i < n; ++i) {
        xn[i] = x[i] + step * cur.gx[i] / gn;
        yn[i] = y[i] + step * cur.gy[i] / gn;
      }
      const RatioEval cand = eval_ratio(map, xn, yn, false);
      if (cand.log_ratio > cur.log_ratio) {
        x = std::move(xn);
        y = std::move(yn);
        cur = eval_ratio(map, x, y, true);
        best = std::max(best, cur.ratio);
        step *= 1.5;
      } else {
        step *= 0.5;
      }
    }
  }
  return best;
}

}  // namespace nxn
