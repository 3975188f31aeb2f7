#include "nxn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>

#include "nxn/attack.hpp"
#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/parallel.hpp"

namespace nxn {

// ---------------------------------------------------------------- losses

double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_size(b.size(), a.size(), "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] + -1.0 * b[i];
    s += d * d;
  }
  return s;
}

double mse_loss(const std::vector<Vec>& pred, const std::vector<Vec>& target) {
  require_size(target.size(), pred.size(), "mse_loss batch");
  if (pred.empty()) throw InvalidInput("mse_loss: empty batch");
  double s = 0.0;
  for (std::size_t b = 0; b < pred.size(); ++b) s += squared_distance(pred[b], target[b]);
  return s / static_cast<double>(pred.size());
}

Var record_squared_distance(Tape& t, Var pred, std::span<const double> target) {
  const Var tgt = t.leaf(target, false);
  const Var d = t.axpy(pred, -1.0, tgt);
  return t.dot(d, d);
}

double hinge_loss(std::span<const double> scores, std::size_t label, double mu) {
  if (label >= scores.size()) throw InvalidInput("hinge_loss: label out of range");
  if (!(mu > 0.0)) throw InvalidInput("hinge_loss: mu must be positive");
  const double sy = scores[label];
  double s = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (k == label) continue;
    const double v = (scores[k] + -1.0 * sy) + mu;
    s += v >= 0.0 ? v : 0.0;
  }
  return s;
}

double hinge_loss(const std::vector<Vec>& scores, std::span<const std::size_t> labels, double mu) {
  require_size(labels.size(), scores.size(), "hinge_loss batch");
  if (scores.empty()) throw InvalidInput("hinge_loss: empty batch");
  double s = 0.0;
  for (std::size_t b = 0; b < scores.size(); ++b) s += hinge_loss(scores[b], labels[b], mu);
  return s / static_cast<double>(scores.size());
}

Var record_hinge(Tape& t, Var scores, std::size_t label, double mu) {
  if (!(mu > 0.0)) throw InvalidInput("hinge_loss: mu must be positive");
  const Var sy = t.pick(scores, label);
  Var v = t.shift(scores, -1.0, sy);
  v = t.add_const(v, mu);
  v = t.max_const(v, 0.0);
  return t.sum_except(v, label);
}

double margin(std::span<const double> scores, std::size_t label) {
  if (scores.size() < 2) throw InvalidInput("margin: needs at least two classes");
  if (label >= scores.size()) throw InvalidInput("margin: label out of range");
  double rival = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (k != label) rival = std::max(rival, scores[k]);
  return scores[label] - rival;
}

double psnr(std::span<const double> estimate, std::span<const double> reference) {
  require_size(estimate.size(), reference.size(), "psnr");
  double peak = 0.0;
  for (double r : reference) peak = std::max(peak, std::abs(r));
  if (peak == 0.0) throw InvalidInput("psnr: reference is identically zero");
  const double mse = squared_distance(estimate, reference) / static_cast<double>(reference.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

// ---------------------------------------------------------------- optimizer

void validate(const SgdConfig& c) {
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("optimizer.momentum must lie in [0,1)");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(c.lr_min >= 0.0) || !(c.lr_min <= c.lr_max) || !std::isfinite(c.lr_max))
    throw ConfigError("optimizer: need 0 <= lr_min <= lr_max");
  if (c.batch_size == 0) throw ConfigError("optimizer.batch_size must be >= 1");
  if (c.eval_every == 0) throw ConfigError("optimizer.eval_every must be >= 1");
}

double lr_at(const SgdConfig& cfg, std::size_t iter) {
  if (iter >= cfg.iters) throw InvalidInput("lr_at: iteration out of range");
  const double half = static_cast<double>(cfg.iters) / 2.0;
  const double i = static_cast<double>(iter);
  if (i < half) return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (i / half);
  return cfg.lr_max * ((static_cast<double>(cfg.iters) - i) / half);
}

void sgd_update(std::span<const TensorRef> params, const std::vector<Vec>& grads, SgdState& state,
                double momentum, double weight_decay, double lr) {
  require_size(grads.size(), params.size(), "sgd_update gradients");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.data.size(), 0.0);
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_size(grads[p].size(), params[p].data.size(), "sgd_update gradient size");
    if (!all_finite(grads[p]))
      throw DivergenceError("sgd_step: non-finite gradient for " + params[p].name);
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].data;
    Vec& v = state.velocity[p];
    const Vec& g = grads[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + 2.0 * weight_decay * theta[i];
      theta[i] = theta[i] - lr * v[i];
    }
    if (!all_finite(theta))
      throw DivergenceError("sgd_step: non-finite parameter " + params[p].name);
  }
}

void sgd_step(Model& model, const std::vector<Vec>& grads, SgdState& state, const SgdConfig& cfg,
              std::size_t iter) {
  const auto params = model.parameters();
  sgd_update(params, grads, state, cfg.momentum, cfg.weight_decay, lr_at(cfg, iter));
  model.after_update(1);
}

// ---------------------------------------------------------------- datasets

Vec synth_image(std::size_t height, std::size_t width, Rng& rng) {
  Vec img(height * width);
  const double g0 = rng.uniform(0.2, 0.8);
  const double gx = rng.uniform(-0.2, 0.2);
  const double gy = rng.uniform(-0.2, 0.2);
  const double sx = width > 1 ? 1.0 / static_cast<double>(width - 1) : 0.0;
  const double sy = height > 1 ? 1.0 / static_cast<double>(height - 1) : 0.0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      img[y * width + x] = g0 + gx * (static_cast<double>(x) * sx - 0.5) +
                           gy * (static_cast<double>(y) * sy - 0.5);
  const std::size_t rects = 2 + rng.index(4);
  for (std::size_t r = 0; r < rects; ++r) {
    std::size_t x0 = rng.index(width), x1 = rng.index(width);
    std::size_t y0 = rng.index(height), y1 = rng.index(height);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    const double v = rng.uniform();
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) img[y * width + x] = v;
  }
  for (auto& p : img) p = std::clamp(p, 0.0, 1.0);
  return img;
}

namespace {

constexpr std::uint64_t kCleanStream = 0xc1ea0;
constexpr std::uint64_t kNoiseStream = 0x9015e;
constexpr std::uint64_t kToyStream = 0x70e;
constexpr double kToyPhaseJitter = 0.5;
constexpr std::uint64_t kBatchStream = 0xba7c4;
constexpr std::uint64_t kAttackStream = 0xa77ac;

std::uint64_t split_id(Split s) { return static_cast<std::uint64_t>(s); }

}  // namespace

SynthDenoiseSet::SynthDenoiseSet(DenoiseDataConfig cfg) : cfg_(cfg) {
  if (cfg_.size == 0) throw ConfigError("data.size must be >= 1");
  if (!(cfg_.noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma must be >= 0");
  auto fill = [&](std::vector<Vec>& out, Split s, std::size_t n) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng = Rng::from_counters(cfg_.seed, kCleanStream, split_id(s), i);
      out[i] = synth_image(cfg_.size, cfg_.size, rng);
    }
  };
  fill(train_, Split::train, cfg_.n_train);
  fill(val_, Split::val, cfg_.n_val);
  fill(test_, Split::test, cfg_.n_test);
}

std::size_t SynthDenoiseSet::count(Split s) const {
  switch (s) {
    case Split::train: return train_.size();
    case Split::val: return val_.size();
    case Split::test: return test_.size();
  }
  return 0;
}

const Vec& SynthDenoiseSet::clean(Split s, std::size_t i) const {
  switch (s) {
    case Split::train: return train_.at(i);
    case Split::val: return val_.at(i);
    case Split::test: return test_.at(i);
  }
  throw InvalidInput("unknown split");
}

Vec SynthDenoiseSet::noisy(Split s, std::size_t i, std::uint64_t epoch) const {
  const Vec& c = clean(s, i);
  if (s != Split::train) epoch = 0;
  Rng rng = Rng::from_counters(cfg_.seed ^ kNoiseStream, epoch, split_id(s), i);
  Vec out(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) out[k] = c[k] + cfg_.noise_sigma * rng.normal();
  return out;
}

ToyClassifySet::ToyClassifySet(ClassifyDataConfig cfg) : cfg_(cfg) {
  if (cfg_.size == 0) throw ConfigError("data.size must be >= 1");
  if (cfg_.classes < 2) throw ConfigError("data.classes must be >= 2");
  const std::size_t n[3] = {cfg_.n_train, cfg_.n_val, cfg_.n_test};
  const double freq = 2.0 * std::numbers::pi / static_cast<double>(cfg_.size);
  for (int s = 0; s < 3; ++s) {
    images_[s].resize(n[s]);
    labels_[s].resize(n[s]);
    for (std::size_t i = 0; i < n[s]; ++i) {
      Rng rng = Rng::from_counters(cfg_.seed, kToyStream, static_cast<std::uint64_t>(s), i);
      const std::size_t label = i % cfg_.classes;
      const double theta = std::numbers::pi * static_cast<double>(label) /
                           static_cast<double>(cfg_.classes);
      const double phase = rng.uniform(-kToyPhaseJitter, kToyPhaseJitter);
      const double contrast = rng.uniform(0.2, 0.4);
      const double c = std::cos(theta), sn = std::sin(theta);
      Vec img(cfg_.size * cfg_.size);
      for (std::size_t y = 0; y < cfg_.size; ++y)
        for (std::size_t x = 0; x < cfg_.size; ++x) {
          const double t = freq * (static_cast<double>(x) * c + static_cast<double>(y) * sn);
          img[y * cfg_.size + x] =
              0.5 + contrast * std::cos(t + phase) + cfg_.noise_sigma * rng.normal();
        }
      images_[s][i] = std::move(img);
      labels_[s][i] = label;
    }
  }
}

std::size_t ToyClassifySet::count(Split s) const { return images_[split_id(s)].size(); }

const Vec& ToyClassifySet::image(Split s, std::size_t i) const {
  return images_[split_id(s)].at(i);
}

std::size_t ToyClassifySet::label(Split s, std::size_t i) const {
  return labels_[split_id(s)].at(i);
}

// ---------------------------------------------------------------- training

double batch_gradient(const Model& model, const std::vector<Vec>& inputs, const SampleLoss& loss,
                      std::vector<Vec>& grads) {
  const std::size_t batch = inputs.size();
  if (batch == 0) throw InvalidInput("batch_gradient: empty batch");
  const double inv = 1.0 / static_cast<double>(batch);
  std::vector<std::vector<Vec>> slot_grads(batch);
  std::vector<double> slot_loss(batch, 0.0);
  parallel_for(batch, [&](std::size_t b) {
    Tape t;
    std::vector<Var> params;
    const Var x = t.leaf(inputs[b], false);
    const Var out = model.record(t, x, &params);
    const Var l = loss(t, out, b);
    slot_loss[b] = t.scalar(l);
    if (!std::isfinite(slot_loss[b])) return;
    t.backward(l, inv);
    auto& g = slot_grads[b];
    g.reserve(params.size());
    for (const Var p : params) {
      const Vec& gp = t.grad(p);
      g.push_back(gp.empty() ? Vec(t.value(p).size(), 0.0) : gp);
    }
  });
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (!std::isfinite(slot_loss[b]))
      throw DivergenceError("training: non-finite loss for batch sample " + std::to_string(b));
    total += slot_loss[b];
  }
  grads = std::move(slot_grads[0]);
  for (std::size_t b = 1; b < batch; ++b)
    for (std::size_t p = 0; p < grads.size(); ++p)
      for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += slot_grads[b][p][i];
  return total * inv;
}

double parameter_norm(Model& model) {
  double s = 0.0;
  for (const auto& p : model.parameters())
    for (double v : p.data) s += v * v;
  return std::sqrt(s);
}

DenoiseEval evaluate_denoiser(const Model& model, const SynthDenoiseSet& data, Split split) {
  const std::size_t n = data.count(split);
  if (n == 0) throw InvalidInput("evaluate_denoiser: empty split");
  std::vector<double> loss(n), quality(n), noisy_quality(n);
  parallel_for(n, [&](std::size_t i) {
    const Vec y = data.noisy(split, i);
    const Vec& x = data.clean(split, i);
    const Vec est = model.forward(y);
    loss[i] = squared_distance(est, x);
    quality[i] = psnr(est, x);
    noisy_quality[i] = psnr(y, x);
  });
  DenoiseEval e;
  for (std::size_t i = 0; i < n; ++i) {
    e.loss += loss[i];
    e.psnr += quality[i];
    e.noisy_psnr += noisy_quality[i];
  }
  const double dn = static_cast<double>(n);
  e.loss /= dn;
  e.psnr /= dn;
  e.noisy_psnr /= dn;
  return e;
}

ClassifyEval evaluate_classifier(const Model& model, const ToyClassifySet& data, Split split,
                                 double mu) {
  const std::size_t n = data.count(split);
  if (n == 0) throw InvalidInput("evaluate_classifier: empty split");
  std::vector<double> loss(n), correct(n);
  parallel_for(n, [&](std::size_t i) {
    const Vec s = model.forward(data.image(split, i));
    loss[i] = hinge_loss(s, data.label(split, i), mu);
    correct[i] = argmax(s) == data.label(split, i) ? 1.0 : 0.0;
  });
  ClassifyEval e;
  for (std::size_t i = 0; i < n; ++i) {
    e.loss += loss[i];
    e.accuracy += correct[i];
  }
  e.loss /= static_cast<double>(n);
  e.accuracy /= static_cast<double>(n);
  return e;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Shared loop. `batch` fills the inputs for one iteration and returns the
// per-sample loss; `evaluate` returns (train, val loss, val metric).
struct LoopHooks {
  std::function<SampleLoss(std::size_t iter, std::vector<Vec>& inputs)> batch;
  std::function<void(const Model&, double& train, double& val, double& metric)> evaluate;
};

TrainResult run_loop(Model& model, const SgdConfig& cfg, const LoopHooks& hooks) {
  validate(cfg);
  TrainResult res;
  const auto t0 = Clock::now();
  SgdState state;
  res.best = model.clone();
  res.best_val_loss = std::numeric_limits<double>::infinity();

  auto log_row = [&](std::size_t iter) {
    MetricsRow row;
    row.iter = iter;
    row.lr = iter < cfg.iters ? lr_at(cfg, iter) : 0.0;
    hooks.evaluate(model, row.train_loss, row.val_loss, row.val_metric);
    const ConstraintStats cs = model.constraint_stats();
    row.max_block_product = cs.max_block_product;
    row.total_substeps = cs.total_substeps;
    row.param_norm = parameter_norm(model);
    row.wall_ms = ms_since(t0);
    res.metrics.push_back(row);
    if (row.val_loss < res.best_val_loss) {
      res.best_val_loss = row.val_loss;
      res.best_iter = iter;
      res.best = model.clone();
    }
  };

  try {
    log_row(0);
    for (std::size_t it = 0; it < cfg.iters; ++it) {
      std::vector<Vec> inputs;
      const SampleLoss loss = hooks.batch(it, inputs);
      std::vector<Vec> grads;
      batch_gradient(model, inputs, loss, grads);
      sgd_step(model, grads, state, cfg, it);
      res.iters_done = it + 1;
      if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iters) log_row(it + 1);
    }
  } catch (const DivergenceError& e) {
    res.diverged = true;
    res.error = e.what();
  }
  res.train_ms = ms_since(t0);

  auto audit = res.best->clone();
  res.certificates = audit->recertify(1000);
  return res;
}

std::vector<std::size_t> draw_batch(const SgdConfig& cfg, std::size_t iter, std::size_t n) {
  Rng rng = Rng::from_counters(cfg.seed, kBatchStream, iter);
  std::vector<std::size_t> idx(cfg.batch_size);
  for (auto& i : idx) i = rng.index(n);
  return idx;
}

}  // namespace

TrainResult train_denoiser(Model& model, const SgdConfig& cfg, const SynthDenoiseSet& data) {
  const std::size_t n = data.count(Split::train);
  if (n == 0) throw ConfigError("train_denoiser: empty training split");
  require_size(model.input_size(), data.shape().size(), "train_denoiser model input");
  const std::size_t monitor = std::min<std::size_t>(n, 16);

  LoopHooks hooks;
  hooks.batch = [&](std::size_t iter, std::vector<Vec>& inputs) -> SampleLoss {
    const auto idx = draw_batch(cfg, iter, n);
    auto targets = std::make_shared<std::vector<const Vec*>>();
    for (std::size_t i : idx) {
      inputs.push_back(data.noisy(Split::train, i, iter + 1));
      targets->push_back(&data.clean(Split::train, i));
    }
    return [targets](Tape& t, Var out, std::size_t b) {
      return record_squared_distance(t, out, *(*targets)[b]);
    };
  };
  hooks.evaluate = [&](const Model& m, double& train, double& val, double& metric) {
    double s = 0.0;
    for (std::size_t i = 0; i < monitor; ++i)
      s += squared_distance(m.forward(data.noisy(Split::train, i, 0)), data.clean(Split::train, i));
    train = s / static_cast<double>(monitor);
    const DenoiseEval e = evaluate_denoiser(m, data, Split::val);
    val = e.loss;
    metric = e.psnr;
  };
  return run_loop(model, cfg, hooks);
}

TrainResult train_classifier(Model& model, const SgdConfig& cfg, const ToyClassifySet& data,
                             const ClassifierTrainOptions& opt) {
  const std::size_t n = data.count(Split::train);
  if (n == 0) throw ConfigError("train_classifier: empty training split");
  require_size(model.input_size(), data.shape().size(), "train_classifier model input");
  if (!(opt.mu > 0.0)) throw ConfigError("train_classifier: mu must be positive");
  const std::size_t monitor = std::min<std::size_t>(n, 64);

  LoopHooks hooks;
  hooks.batch = [&](std::size_t iter, std::vector<Vec>& inputs) -> SampleLoss {
    const auto idx = draw_batch(cfg, iter, n);
    auto labels = std::make_shared<std::vector<std::size_t>>();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Vec& x = data.image(Split::train, idx[b]);
      const std::size_t y = data.label(Split::train, idx[b]);
      labels->push_back(y);
      if (opt.adversarial) {
        AttackConfig atk;
        atk.eps = opt.eps;
        atk.n_iter = opt.pgd_iters;
        atk.seed = cfg.seed ^ kAttackStream;
        const Vec d = l2_pgd(model, x, y, atk, iter, b);
        Vec xa(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) xa[i] = x[i] + d[i];
        inputs.push_back(std::move(xa));
      } else {
        inputs.push_back(x);
      }
    }
    const double mu = opt.mu;
    return [labels, mu](Tape& t, Var out, std::size_t b) {
      return record_hinge(t, out, (*labels)[b], mu);
    };
  };
  hooks.evaluate = [&](const Model& m, double& train, double& val, double& metric) {
    double s = 0.0;
    for (std::size_t i = 0; i < monitor; ++i)
      s += hinge_loss(m.forward(data.image(Split::train, i)), data.label(Split::train, i), opt.mu);
    train = s / static_cast<double>(monitor);
    const ClassifyEval e = evaluate_classifier(m, data, Split::val, opt.mu);
    val = e.loss;
    metric = e.accuracy;
  };
  return run_loop(model, cfg, hooks);
}

}  // namespace nxn
