#include "nxn/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/parallel.hpp"
#include "nxn/train.hpp"

namespace nxn {

AttackLoss parse_attack_loss(const std::string& name) {
  if (name == "cross_entropy") return AttackLoss::cross_entropy;
  if (name == "hinge") return AttackLoss::hinge;
  throw InvalidInput("unknown attack loss '" + name + "'");
}

std::string to_string(AttackLoss l) {
  return l == AttackLoss::cross_entropy ? "cross_entropy" : "hinge";
}

double attack_step(const AttackConfig& cfg) {
  if (cfg.step > 0.0) return cfg.step;
  if (cfg.n_iter == 0) return 0.0;
  return 2.5 * cfg.eps / static_cast<double>(cfg.n_iter);
}

Vec project_l2_ball(std::span<const double> delta, double eps) {
  if (!(eps >= 0.0)) throw InvalidInput("project_l2_ball: eps must be >= 0");
  Vec out(delta.begin(), delta.end());
  const double n = norm2(delta);
  if (n <= eps) return out;
  const double c = eps / n;
  for (auto& e : out) e *= c;
  // Rounding can leave the result a hair outside the ball.
  while (norm2(out) > eps) {
    for (auto& e : out) e = std::nextafter(e, 0.0);
  }
  return out;
}

double cross_entropy(std::span<const double> scores, std::size_t label) {
  if (label >= scores.size()) throw InvalidInput("cross_entropy: label out of range");
  const double m = *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double e : scores) s += std::exp(e - m);
  const double lse = m + std::log(s);
  return lse + -1.0 * scores[label];
}

Var record_cross_entropy(Tape& t, Var scores, std::size_t label) {
  const Var lse = t.log_sum_exp(scores);
  const Var sy = t.pick(scores, label);
  return t.axpy(lse, -1.0, sy);
}

Vec l2_pgd(const Model& model, std::span<const double> x, std::size_t label,
           const AttackConfig& cfg, Rng& rng) {
  if (!(cfg.eps >= 0.0)) throw InvalidInput("l2_pgd: eps must be >= 0");
  const std::size_t n = x.size();
  require_size(n, model.input_size(), "l2_pgd input");
  Vec delta(n, 0.0);
  if (cfg.eps == 0.0) return delta;

  // Uniform in the ball: uniform direction, radius eps * U^(1/n).
  const Vec dir = rng.unit_vector(n);
  const double rad = cfg.eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) delta[i] = rad * dir[i];
  delta = project_l2_ball(delta, cfg.eps);

  const double tau = attack_step(cfg);
  Vec xd(n);
  for (std::size_t it = 0; it < cfg.n_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) xd[i] = x[i] + delta[i];
    Tape t;
    const Var xv = t.leaf(xd, true);
    const Var s = model.record(t, xv, nullptr);
    const Var l = cfg.loss == AttackLoss::cross_entropy ? record_cross_entropy(t, s, label)
                                                        : record_hinge(t, s, label, cfg.mu);
    t.backward(l);
    const Vec& g = t.grad(xv);
    const double gn = g.empty() ? 0.0 : norm2(g);
    if (!(gn >= 1e-30)) continue;
    const double c = tau / gn;
    for (std::size_t i = 0; i < n; ++i) delta[i] += c * g[i];
    delta = project_l2_ball(delta, cfg.eps);
  }
  return delta;
}

Vec l2_pgd(const Model& model, std::span<const double> x, std::size_t label,
           const AttackConfig& cfg, std::uint64_t a, std::uint64_t b) {
  Rng rng = Rng::from_counters(cfg.seed, a, b);
  return l2_pgd(model, x, label, cfg, rng);
}

double curve_auc(std::span<const double> eps, std::span<const double> accuracy) {
  require_size(accuracy.size(), eps.size(), "curve_auc");
  if (eps.empty()) throw InvalidInput("curve_auc: empty grid");
  if (eps.size() == 1) return accuracy[0];
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < eps.size(); ++i)
    area += (eps[i + 1] - eps[i]) * (accuracy[i] + accuracy[i + 1]) / 2.0;
  const double width = eps.back() - eps.front();
  if (!(width > 0.0)) throw InvalidInput("curve_auc: grid must span a positive range");
  return area / width;
}

RobustCurve robust_accuracy_curve(const Model& model, const std::vector<Vec>& inputs,
                                  std::span<const std::size_t> labels,
                                  std::span<const double> eps_grid, const AttackConfig& cfg) {
  require_size(labels.size(), inputs.size(), "robust_accuracy_curve labels");
  if (inputs.empty()) throw InvalidInput("robust_accuracy_curve: empty dataset");
  if (eps_grid.empty()) throw InvalidInput("robust_accuracy_curve: empty grid");
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] >= 0.0)) throw InvalidInput("robust_accuracy_curve: negative eps");
    if (i > 0 && !(eps_grid[i] > eps_grid[i - 1]))
      throw InvalidInput("robust_accuracy_curve: grid must be strictly ascending");
  }
  RobustCurve curve;
  curve.eps.assign(eps_grid.begin(), eps_grid.end());
  const std::size_t n = inputs.size();
  for (std::size_t e = 0; e < eps_grid.size(); ++e) {
    AttackConfig c = cfg;
    c.eps = eps_grid[e];
    std::vector<double> ok(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
      const Vec d = l2_pgd(model, inputs[i], labels[i], c, e, i);
      Vec xa(inputs[i].size());
      for (std::size_t k = 0; k < xa.size(); ++k) xa[k] = inputs[i][k] + d[k];
      ok[i] = argmax(model.forward(xa)) == labels[i] ? 1.0 : 0.0;
    });
    double acc = 0.0;
    for (double v : ok) acc += v;
    curve.accuracy.push_back(acc / static_cast<double>(n));
  }
  curve.auc = curve_auc(curve.eps, curve.accuracy);
  return curve;
}

double certified_radius(double lipschitz, std::span<const double> scores, std::size_t label) {
  if (!(lipschitz > 0.0)) throw InvalidInput("certified_radius: Lipschitz bound must be positive");
  const double m = margin(scores, label);
  if (!(m > 0.0) || !std::isfinite(lipschitz)) return 0.0;
  return m / (std::numbers::sqrt2 * lipschitz);
}

}  // namespace nxn
