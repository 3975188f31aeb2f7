#include "nxn/runner.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nxn/attack.hpp"
#include "nxn/checkpoint.hpp"
#include "nxn/csv.hpp"
#include "nxn/errors.hpp"
#include "nxn/pnp.hpp"
#include "nxn/tableau.hpp"
#include "nxn/verify.hpp"

namespace fs = std::filesystem;

namespace nxn {

namespace {

constexpr std::uint64_t kCertStream = 0xce27ULL;

std::string join(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) s += ' ';
    s += fmt(v[i]);
  }
  return s;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidInput("cannot open '" + path.string() + "' for writing");
  f << j.dump(2) << '\n';
}

void write_radii(const fs::path& path) {
  CsvWriter csv(path.string(), {"tableau", "stages", "q", "eigenvalues", "r"});
  for (auto name : {TableauName::euler, TableauName::heun, TableauName::rk4}) {
    const RKTableau t = builtin_tableau(name);
    const ContractivityAnalysis a = analyze_contractivity(t);
    const double r = a.disk.infinite ? INFINITY : a.disk.r;
    csv.row({t.name, fmt(t.stages), join(a.q), join(a.eigenvalues), fmt(r)});
  }
}

json task_radius(const ExperimentConfig&, const fs::path& dir) {
  write_radii(dir / "radii.csv");
  json radii = json::object();
  for (auto name : {TableauName::euler, TableauName::heun, TableauName::rk4})
    radii[to_string(name)] = contractivity_radius(builtin_tableau(name));
  return {{"radii", radii}};
}

json task_verify(const ExperimentConfig& c, const fs::path& dir) {
  json out = task_radius(c, dir);
  const auto& v = c.verify;

  bool contractive = true;
  {
    CsvWriter csv((dir / "contractivity.csv").string(),
                  {"tableau", "r", "samples", "max_abs_k", "violations"});
    for (auto name : {TableauName::euler, TableauName::heun, TableauName::rk4}) {
      const RKTableau t = builtin_tableau(name);
      for (double r : {1.0, 1.5}) {
        const auto s = verify_contractive(t, r, v.contractivity_samples, c.seed);
        csv.row({t.name, fmt(r), fmt(s.samples), fmt(s.max_abs_k), fmt(s.violations)});
        if (r == 1.0 && s.violations > 0) contractive = false;
      }
    }
  }

  std::size_t stability_violations = 0;
  {
    CsvWriter csv((dir / "stability.csv").string(),
                  {"check", "map", "seed", "samples", "max_ratio", "violations", "tol",
                   "argmax_index"});
    std::uint64_t net_id = 0;
    for (const char* tab : {"euler", "heun", "rk4"}) {
      for (const char* op : {"dense", "conv"}) {
        ArchitectureConfig a = c.architecture;
        a.family = "nonexp";
        a.alpha = 0.0;
        a.tableau = tab;
        a.op = op;
        a.n_blocks = v.n_blocks;
        ImageShape shape;
        if (a.op == "dense") {
          shape = {v.dim, 1, 1};
          a.channels = v.dim;
        } else {
          shape = {1, 6, 6};
          a.channels = 4;
        }
        a.hidden = 0;
        Rng rng = Rng::from_counters(c.seed, kVerifyStream, net_id++);
        auto model = build_denoiser(a, shape, rng);
        PairSampler sampler;
        sampler.seed = c.seed ^ kVerifyStream;
        sampler.count = v.pairs;
        sampler.dim = model->input_size();
        const auto rep = check_nonexpansive(as_map(*model), sampler, v.tol);
        stability_violations += rep.violations;
        csv.row({"nonexpansive", std::string(tab) + "-" + op, std::to_string(c.seed),
                 fmt(rep.samples), fmt(rep.max_ratio), fmt(rep.violations), fmt(rep.tol),
                 fmt(rep.argmax_index)});
      }
    }
  }
  out["contractive_at_r1"] = contractive;
  out["stability_violations"] = stability_violations;
  return out;
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows,
                   const char* metric_name) {
  CsvWriter csv(path.string(), {"iter", "lr", "train_loss", "val_loss", metric_name,
                                "max_block_product", "total_substeps", "param_norm", "wall_ms"});
  for (const auto& r : rows)
    csv.row({fmt(r.iter), fmt(r.lr), fmt(r.train_loss), fmt(r.val_loss), fmt(r.val_metric),
             fmt(r.max_block_product), fmt(r.total_substeps), fmt(r.param_norm),
             fmt(r.wall_ms)});
}

bool write_certificates(const fs::path& path, const std::vector<BlockCertificate>& certs) {
  CsvWriter csv(path.string(), {"block", "h", "substeps", "substeps_recertified", "sigma_estimate",
                                "sigma_recertified", "product_in_force", "radius_bound", "product",
                                "budget", "pass"});
  bool all = true;
  for (const auto& b : certs) {
    csv.row({fmt(b.block), fmt(b.h), fmt(b.substeps), fmt(b.substeps_recertified),
             fmt(b.sigma_estimate), fmt(b.sigma_recertified), fmt(b.product_in_force),
             fmt(b.radius_bound), fmt(b.product), fmt(b.budget), b.pass ? "1" : "0"});
    all = all && b.pass;
  }
  return all;
}

json finish_training(const TrainResult& r, const fs::path& dir, const json& resolved,
                     const char* metric_name) {
  write_metrics(dir / "metrics.csv", r.metrics, metric_name);
  const bool certified = write_certificates(dir / "certificates.csv", r.certificates);
  checkpoint_save(*r.best, (dir / "checkpoint.nxn").string(), resolved);
  write_json(dir / "timing.json", {{"train_ms", r.train_ms}});
  json s = {{"iters_done", r.iters_done},
            {"best_iter", r.best_iter},
            {"best_val_loss", r.best_val_loss},
            {"recertified", certified},
            {"lipschitz_bound", r.best->lipschitz_bound()}};
  if (r.diverged) throw DivergenceError(r.error);
  return s;
}

json task_train_denoiser(const ExperimentConfig& c, const fs::path& dir, const json& resolved) {
  if (c.data.kind != "synth_denoise") throw ConfigError("train-denoiser needs data.kind = synth_denoise");
  const SynthDenoiseSet data(denoise_data(c));
  Rng rng = Rng::from_counters(c.seed, kModelStream);
  auto model = build_denoiser(c.architecture, data.shape(), rng);
  TrainResult r = train_denoiser(*model, c.optimizer, data);
  json s = finish_training(r, dir, resolved, "val_psnr");
  const auto test = evaluate_denoiser(*r.best, data, Split::test);
  s["test_loss"] = test.loss;
  s["test_psnr"] = test.psnr;
  s["test_noisy_psnr"] = test.noisy_psnr;
  return s;
}

json task_train_classifier(const ExperimentConfig& c, const fs::path& dir, const json& resolved) {
  if (c.data.kind != "toy_classify") throw ConfigError("train-classifier needs data.kind = toy_classify");
  if (c.architecture.classes != c.data.classes)
    throw ConfigError("architecture.classes must equal data.classes");
  const ToyClassifySet data(classify_data(c));
  Rng rng = Rng::from_counters(c.seed, kModelStream);
  auto model = build_classifier(c.architecture, data.shape(), rng);
  TrainResult r = train_classifier(*model, c.optimizer, data, c.classifier);
  json s = finish_training(r, dir, resolved, "val_acc");
  const auto train = evaluate_classifier(*r.best, data, Split::train, c.classifier.mu);
  const auto test = evaluate_classifier(*r.best, data, Split::test, c.classifier.mu);
  s["train_accuracy"] = train.accuracy;
  s["test_loss"] = test.loss;
  s["test_accuracy"] = test.accuracy;
  return s;
}

std::unique_ptr<Model> load_model(const std::string& path, const char* kind) {
  if (path.empty()) throw ConfigError(std::string("a checkpoint path is required for ") + kind);
  auto ck = checkpoint_load(path);
  return std::move(ck.model);
}

json task_attack(const ExperimentConfig& c, const fs::path& dir) {
  auto model = load_model(c.attack.checkpoint, "attack-eval");
  if (model->architecture().value("kind", "") != "classifier")
    throw ConfigError("attack-eval needs a classifier checkpoint");
  const ToyClassifySet data(classify_data(c));
  if (model->input_size() != data.shape().size() || model->output_size() != c.data.classes)
    throw ConfigError("checkpoint does not match the configured toy dataset");

  std::size_t n = data.count(Split::test);
  if (c.attack.n_points > 0) n = std::min(n, c.attack.n_points);
  std::vector<Vec> inputs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    inputs.push_back(data.image(Split::test, i));
    labels.push_back(data.label(Split::test, i));
  }

  AttackConfig atk;
  atk.n_iter = c.attack.pgd_iters;
  atk.step = c.attack.step;
  atk.loss = parse_attack_loss(c.attack.loss);
  atk.mu = c.classifier.mu;
  atk.seed = c.seed;
  const RobustCurve curve = robust_accuracy_curve(*model, inputs, labels, c.attack.eps_grid, atk);
  {
    CsvWriter csv((dir / "curve.csv").string(), {"eps", "accuracy"});
    for (std::size_t i = 0; i < curve.eps.size(); ++i)
      csv.row({fmt(curve.eps[i]), fmt(curve.accuracy[i])});
    csv.row({"auc", fmt(curve.auc)});
  }

  // Attack every certified point just inside its radius.
  const double lip = model->lipschitz_bound();
  std::size_t certified = 0, broken = 0;
  double radius_sum = 0.0;
  {
    CsvWriter csv((dir / "certified.csv").string(),
                  {"index", "label", "margin", "certified_radius", "attack_eps", "attack_success"});
    AttackConfig cert = atk;
    cert.seed = c.seed ^ kCertStream;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec s = model->forward(inputs[i]);
      const double m = margin(s, labels[i]);
      const double rad = certified_radius(lip, s, labels[i]);
      radius_sum += rad;
      double eps = 0.0;
      bool success = false;
      if (rad > 0.0) {
        ++certified;
        cert.eps = rad * (1.0 - 1e-9);
        eps = cert.eps;
        const Vec d = l2_pgd(*model, inputs[i], labels[i], cert, 0, i);
        Vec x = inputs[i];
        for (std::size_t k = 0; k < x.size(); ++k) x[k] += d[k];
        success = argmax(model->forward(x)) != labels[i];
        if (success) ++broken;
      }
      csv.row({fmt(i), fmt(labels[i]), fmt(m), fmt(rad), fmt(eps), success ? "1" : "0"});
    }
  }
  return {{"auc", curve.auc},
          {"clean_accuracy", curve.accuracy.empty() ? 0.0 : curve.accuracy.front()},
          {"accuracy", curve.accuracy},
          {"eps_grid", curve.eps},
          {"points", n},
          {"lipschitz_bound", lip},
          {"certified_points", certified},
          {"mean_certified_radius", n > 0 ? radius_sum / static_cast<double>(n) : 0.0},
          {"certified_violations", broken}};
}

json task_pnp(const ExperimentConfig& c, const fs::path& dir) {
  const auto& p = c.pnp;
  auto loaded = load_model(p.checkpoint, "pnp-deblur");
  const ImageShape shape{1, p.size, p.size};
  std::unique_ptr<Model> model;
  if (loaded->input_size() == shape.size()) {
    model = std::move(loaded);
  } else {
    model = rebind_denoiser(*loaded, shape);
  }

  Rng rng = Rng::from_counters(c.seed, kPnpStream);
  const Vec truth = synth_image(p.size, p.size, rng);
  const BlurOperator k = BlurOperator::motion(p.kernel, p.size, p.size);
  const Vec y = simulate_measurements(truth, k.op(), p.noise_sigma, c.seed ^ kPnpStream);
  const Vec adj = k.apply_adjoint(y);

  PnpConfig cfg;
  cfg.tau = p.tau > 0.0 ? p.tau : default_tau(k);
  cfg.n_iter = p.iters;
  cfg.tol = p.tol;
  cfg.x0 = parse_x0_policy(p.x0);
  const Model& m = *model;
  const PnpResult r = pnp_pgm(y, cfg, k.op(), [&m](std::span<const double> x) { return m.forward(x); });

  {
    CsvWriter csv((dir / "residuals.csv").string(), {"iter", "residual"});
    for (std::size_t i = 0; i < r.residuals.size(); ++i)
      csv.row({fmt(i + 1), fmt(r.residuals[i])});
  }
  write_pgm((dir / "truth.pgm").string(), truth, p.size, p.size);
  write_pgm((dir / "blurred.pgm").string(), y, p.size, p.size);
  write_pgm((dir / "adjoint.pgm").string(), adj, p.size, p.size);
  write_pgm((dir / "restored.pgm").string(), r.x, p.size, p.size);

  json s = {{"tau", cfg.tau},
            {"operator_norm", k.norm()},
            {"iters", r.iters},
            {"converged", r.converged},
            {"diverged", r.diverged},
            {"message", r.message},
            {"final_residual", r.residuals.empty() ? 0.0 : r.residuals.back()},
            {"psnr_blurred", psnr(y, truth)},
            {"psnr_adjoint", psnr(adj, truth)},
            {"psnr_restored", psnr(r.x, truth)}};
  if (r.diverged) throw DivergenceError("pnp-deblur diverged: " + r.message);
  return s;
}

int exit_code_for(const std::exception_ptr& e, std::string& kind, std::string& message) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError& x) {
    kind = "config";
    message = x.what();
    return kExitConfig;
  } catch (const DivergenceError& x) {
    kind = "divergence";
    message = x.what();
    return kExitDivergence;
  } catch (const CheckpointError& x) {
    kind = "checkpoint";
    message = x.what();
    return kExitCheckpoint;
  } catch (const std::exception& x) {
    kind = "failure";
    message = x.what();
    return kExitFailure;
  }
}

}  // namespace

std::string run_directory_name(const ExperimentConfig& c) {
  return c.task + "-" + config_hash(to_json(c)) + "-s" + std::to_string(c.seed);
}

RunOutcome run_experiment(const json& raw, const std::string& out_root) {
  RunOutcome out;
  ExperimentConfig c;
  try {
    c = parse_config(raw);
  } catch (...) {
    std::string kind;
    out.exit_code = exit_code_for(std::current_exception(), kind, out.error);
    out.summary = {{"status", "error"}, {"kind", kind}, {"message", out.error}};
    return out;
  }

  const json resolved = to_json(c);
  const fs::path dir = fs::path(out_root) / run_directory_name(c);
  try {
    fs::create_directories(dir);
    out.run_dir = dir.string();
    fs::remove(dir / "error.json");
    write_json(dir / "config.json", resolved);

    json s;
    if (c.task == "radius") s = task_radius(c, dir);
    else if (c.task == "verify") s = task_verify(c, dir);
    else if (c.task == "train-denoiser") s = task_train_denoiser(c, dir, resolved);
    else if (c.task == "train-classifier") s = task_train_classifier(c, dir, resolved);
    else if (c.task == "attack-eval") s = task_attack(c, dir);
    else if (c.task == "pnp-deblur") s = task_pnp(c, dir);
    s["task"] = c.task;
    s["status"] = "ok";
    out.summary = s;
    write_json(dir / "summary.json", s);
  } catch (...) {
    std::string kind;
    out.exit_code = exit_code_for(std::current_exception(), kind, out.error);
    out.summary = {{"status", "error"}, {"task", c.task}, {"kind", kind}, {"message", out.error}};
    if (!out.run_dir.empty()) {
      try {
        write_json(dir / "error.json", out.summary);
      } catch (...) {
      }
    }
  }
  return out;
}

RunOutcome run_config_file(const std::string& path, const std::string& out_root) {
  std::ifstream f(path);
  if (!f) {
    RunOutcome out;
    out.exit_code = kExitConfig;
    out.error = "cannot open config '" + path + "'";
    out.summary = {{"status", "error"}, {"kind", "config"}, {"message", out.error}};
    return out;
  }
  json raw;
  try {
    raw = json::parse(f);
  } catch (const json::exception& e) {
    RunOutcome out;
    out.exit_code = kExitConfig;
    out.error = "config '" + path + "': " + e.what();
    out.summary = {{"status", "error"}, {"kind", "config"}, {"message", out.error}};
    return out;
  }
  return run_experiment(raw, out_root);
}

}  // namespace nxn
