#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nxn/grad.hpp"
#include "nxn/net.hpp"

namespace nxn {

enum class AttackLoss { cross_entropy, hinge };
AttackLoss parse_attack_loss(const std::string& name);
std::string to_string(AttackLoss l);

struct AttackConfig {
  double eps = 0.5;
  std::size_t n_iter = 100;
  double step = 0.0;  // 0 means 2.5 eps / n_iter
  AttackLoss loss = AttackLoss::cross_entropy;
  double mu = 0.1;  // hinge margin when loss = hinge
  std::uint64_t seed = 0;
};

double attack_step(const AttackConfig& cfg);

// delta if |delta| <= eps, else eps delta / |delta|.
Vec project_l2_ball(std::span<const double> delta, double eps);

// Softmax cross entropy, stabilized by max subtraction.
double cross_entropy(std::span<const double> scores, std::size_t label);
Var record_cross_entropy(Tape& t, Var scores, std::size_t label);

// Untargeted l2-PGD: uniform start in the eps-ball from `rng`, then n_iter
// normalized ascent steps on the loss, each followed by projection. Returns
// the final perturbation.
Vec l2_pgd(const Model& model, std::span<const double> x, std::size_t label,
           const AttackConfig& cfg, Rng& rng);
// Same with the stream keyed by (cfg.seed, a, b).
Vec l2_pgd(const Model& model, std::span<const double> x, std::size_t label,
           const AttackConfig& cfg, std::uint64_t a, std::uint64_t b);

struct RobustCurve {
  std::vector<double> eps;
  std::vector<double> accuracy;
  double auc = 0.0;
};

// Trapezoid area over the grid divided by its width; a single point gives
// that point's accuracy.
double curve_auc(std::span<const double> eps, std::span<const double> accuracy);

RobustCurve robust_accuracy_curve(const Model& model, const std::vector<Vec>& inputs,
                                  std::span<const std::size_t> labels,
                                  std::span<const double> eps_grid, const AttackConfig& cfg);

// max(0, margin / (sqrt(2) L)).
double certified_radius(double lipschitz, std::span<const double> scores, std::size_t label);

}  // namespace nxn
