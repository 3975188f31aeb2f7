#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nxn/grad.hpp"
#include "nxn/net.hpp"

namespace nxn {

// ---------------------------------------------------------------- losses

// Mean over the batch of squared Euclidean distances.
double mse_loss(const std::vector<Vec>& pred, const std::vector<Vec>& target);
double squared_distance(std::span<const double> a, std::span<const double> b);
// sum_{k != y} max(0, mu - (s_y - s_k)).
double hinge_loss(std::span<const double> scores, std::size_t label, double mu);
double hinge_loss(const std::vector<Vec>& scores, std::span<const std::size_t> labels, double mu);
// s_y - max_{k != y} s_k.
double margin(std::span<const double> scores, std::size_t label);
// 10 log10(max|ref|^2 / MSE); +inf when the estimate is exact.
double psnr(std::span<const double> estimate, std::span<const double> reference);

// Tape versions evaluating bit-identically to the functions above (per sample).
Var record_squared_distance(Tape& t, Var pred, std::span<const double> target);
Var record_hinge(Tape& t, Var scores, std::size_t label, double mu);

// ---------------------------------------------------------------- optimizer

struct SgdConfig {
  std::size_t iters = 1000;
  double lr_min = 1e-3;
  double lr_max = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
};

void validate(const SgdConfig& c);

// Triangular schedule: lr_min -> lr_max over the first half, lr_max -> 0 over
// the second.
double lr_at(const SgdConfig& cfg, std::size_t iter);

struct SgdState {
  std::vector<Vec> velocity;
};

// v <- momentum v + g + 2 lambda theta; theta <- theta - lr v.
void sgd_update(std::span<const TensorRef> params, const std::vector<Vec>& grads, SgdState& state,
                double momentum, double weight_decay, double lr);
// sgd_update at lr_at(iter), then one warm-started power iteration per
// constrained operator.
void sgd_step(Model& model, const std::vector<Vec>& grads, SgdState& state, const SgdConfig& cfg,
              std::size_t iter);

// ---------------------------------------------------------------- datasets

enum class Split { train, val, test };

struct DenoiseDataConfig {
  std::size_t size = 16;
  double noise_sigma = 0.15;
  std::size_t n_train = 256;
  std::size_t n_val = 32;
  std::size_t n_test = 32;
  std::uint64_t seed = 0;
};

// Smooth gradient background plus 2-5 random rectangles, clamped to [0, 1].
Vec synth_image(std::size_t height, std::size_t width, Rng& rng);

class SynthDenoiseSet {
 public:
  explicit SynthDenoiseSet(DenoiseDataConfig cfg);
  const DenoiseDataConfig& config() const { return cfg_; }
  ImageShape shape() const { return {1, cfg_.size, cfg_.size}; }
  std::size_t count(Split s) const;
  const Vec& clean(Split s, std::size_t i) const;
  // Fresh noise per (seed, epoch, split, index). Validation and test sets use
  // epoch 0 throughout.
  Vec noisy(Split s, std::size_t i, std::uint64_t epoch = 0) const;

 private:
  DenoiseDataConfig cfg_;
  std::vector<Vec> train_, val_, test_;
};

struct ClassifyDataConfig {
  std::size_t size = 8;
  std::size_t classes = 4;
  double noise_sigma = 0.1;
  std::size_t n_train = 512;
  std::size_t n_val = 128;
  std::size_t n_test = 128;
  std::uint64_t seed = 0;
};

// Oriented sinusoidal gratings with jittered phase and random contrast plus Gaussian
// noise; class c has orientation pi c / classes. Labels cycle through the
// classes so every split is balanced.
class ToyClassifySet {
 public:
  explicit ToyClassifySet(ClassifyDataConfig cfg);
  const ClassifyDataConfig& config() const { return cfg_; }
  ImageShape shape() const { return {1, cfg_.size, cfg_.size}; }
  std::size_t count(Split s) const;
  const Vec& image(Split s, std::size_t i) const;
  std::size_t label(Split s, std::size_t i) const;

 private:
  ClassifyDataConfig cfg_;
  std::vector<Vec> images_[3];
  std::vector<std::size_t> labels_[3];
};

// ---------------------------------------------------------------- training

struct MetricsRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;  // mean PSNR (denoiser) or accuracy (classifier)
  double max_block_product = 0.0;
  std::size_t total_substeps = 0;
  double wall_ms = 0.0;
  double param_norm = 0.0;
};

struct TrainResult {
  std::unique_ptr<Model> best;
  std::size_t best_iter = 0;
  double best_val_loss = 0.0;
  std::vector<MetricsRow> metrics;
  // From a clone of `best` after the final 1000-iteration power runs.
  std::vector<BlockCertificate> certificates;
  std::size_t iters_done = 0;
  double train_ms = 0.0;
  bool diverged = false;
  std::string error;
};

// Gradient of the batch-mean loss. `loss` maps (tape, model output, sample
// index) to the per-sample scalar. Returns the batch-mean loss.
using SampleLoss = std::function<Var(Tape&, Var, std::size_t)>;
double batch_gradient(const Model& model, const std::vector<Vec>& inputs, const SampleLoss& loss,
                      std::vector<Vec>& grads);

TrainResult train_denoiser(Model& model, const SgdConfig& cfg, const SynthDenoiseSet& data);

struct ClassifierTrainOptions {
  double mu = 0.1;
  bool adversarial = false;
  double eps = 0.5;
  std::size_t pgd_iters = 7;
};

TrainResult train_classifier(Model& model, const SgdConfig& cfg, const ToyClassifySet& data,
                             const ClassifierTrainOptions& opt);

struct DenoiseEval {
  double loss = 0.0;
  double psnr = 0.0;        // mean over images
  double noisy_psnr = 0.0;  // mean PSNR of the noisy inputs
};
DenoiseEval evaluate_denoiser(const Model& model, const SynthDenoiseSet& data, Split split);

struct ClassifyEval {
  double loss = 0.0;
  double accuracy = 0.0;
};
ClassifyEval evaluate_classifier(const Model& model, const ToyClassifySet& data, Split split,
                                 double mu);

double parameter_norm(Model& model);

}  // namespace nxn
