// Command-line front end: every subcommand builds a config document and hands
// it to the experiment runner.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "nxn/errors.hpp"
#include "nxn/runner.hpp"

namespace {

using nxn::json;

struct Common {
  std::string config_path;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config providing defaults");
  app->add_option("--out", c.out, "Root directory for run outputs")->capture_default_str();
  app->add_option("--seed", c.seed, "Seed");
}

json base_config(const Common& c, const std::string& task) {
  json j = json::object();
  if (!c.config_path.empty()) {
    std::ifstream f(c.config_path);
    if (!f) throw nxn::ConfigError("cannot open config '" + c.config_path + "'");
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw nxn::ConfigError("config '" + c.config_path + "': " + e.what());
    }
  }
  j["task"] = task;
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw nxn::ConfigError("--eps-grid: cannot parse '" + item + "'");
    }
  }
  return out;
}

int report(const nxn::RunOutcome& r) {
  json rec = r.summary;
  if (!r.run_dir.empty()) rec["run_dir"] = r.run_dir;
  if (r.exit_code == 0) {
    std::cout << rec.dump(2) << '\n';
  } else {
    rec["exit_code"] = r.exit_code;
    std::cerr << rec.dump(2) << '\n';
  }
  return r.exit_code;
}

void print_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::cout << f.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-expansive residual networks: training, verification and evaluation"};
  app.require_subcommand(1);

  std::string run_path, run_out = "runs";
  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
  run->add_option("config", run_path, "Config file")->required();
  run->add_option("--out", run_out, "Root directory for run outputs")->capture_default_str();

  Common radius_c, verify_c, tden_c, tcls_c, atk_c, pnp_c;
  auto* radius = app.add_subcommand("radius", "Circle-contractivity radii of the builtin tableaus");
  add_common(radius, radius_c);

  auto* verify = app.add_subcommand("verify", "Contractivity and non-expansiveness checks");
  add_common(verify, verify_c);
  std::optional<std::size_t> v_samples, v_pairs;
  verify->add_option("--samples", v_samples, "Monte-Carlo samples per tableau");
  verify->add_option("--pairs", v_pairs, "Point pairs per network");

  std::optional<std::size_t> d_iters, c_iters;
  auto* tden = app.add_subcommand("train-denoiser", "Train a denoiser on synthetic images");
  add_common(tden, tden_c);
  tden->add_option("--iters", d_iters, "Training iterations");
  auto* tcls = app.add_subcommand("train-classifier", "Train a classifier on the toy task");
  add_common(tcls, tcls_c);
  tcls->add_option("--iters", c_iters, "Training iterations");
  bool adversarial = false;
  tcls->add_flag("--adversarial", adversarial, "Adversarial training with l2-PGD batches");

  auto* atk = app.add_subcommand("attack-eval", "Robust accuracy curve and certified radii");
  add_common(atk, atk_c);
  std::optional<std::string> a_ckpt, a_grid;
  std::optional<std::size_t> a_iters;
  atk->add_option("--checkpoint", a_ckpt, "Classifier checkpoint");
  atk->add_option("--eps-grid", a_grid, "Comma-separated ascending eps values");
  atk->add_option("--pgd-iters", a_iters, "PGD iterations");

  auto* pnp = app.add_subcommand("pnp-deblur", "Plug-and-play deblurring with a trained denoiser");
  add_common(pnp, pnp_c);
  std::optional<std::string> p_ckpt;
  std::optional<std::size_t> p_kernel, p_iters;
  std::optional<double> p_tau, p_tol;
  pnp->add_option("--checkpoint", p_ckpt, "Denoiser checkpoint");
  pnp->add_option("--kernel", p_kernel, "Motion blur length (odd)");
  pnp->add_option("--tau", p_tau, "Step size (default 1/|K|^2)");
  pnp->add_option("--iters", p_iters, "Maximum iterations");
  pnp->add_option("--tol", p_tol, "Stopping tolerance on |x_{k+1} - x_k|");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return report(nxn::run_config_file(run_path, run_out));

    if (*radius) {
      const auto r = nxn::run_experiment(base_config(radius_c, "radius"), radius_c.out);
      if (r.exit_code == 0) {
        print_file(r.run_dir + "/radii.csv");
        return 0;
      }
      return report(r);
    }
    if (*verify) {
      json j = base_config(verify_c, "verify");
      if (v_samples) j["verify"]["contractivity_samples"] = *v_samples;
      if (v_pairs) j["verify"]["pairs"] = *v_pairs;
      return report(nxn::run_experiment(j, verify_c.out));
    }
    if (*tden) {
      json j = base_config(tden_c, "train-denoiser");
      if (d_iters) j["optimizer"]["iters"] = *d_iters;
      return report(nxn::run_experiment(j, tden_c.out));
    }
    if (*tcls) {
      json j = base_config(tcls_c, "train-classifier");
      if (c_iters) j["optimizer"]["iters"] = *c_iters;
      if (adversarial) j["classifier"]["adversarial"] = true;
      return report(nxn::run_experiment(j, tcls_c.out));
    }
    if (*atk) {
      json j = base_config(atk_c, "attack-eval");
      if (a_ckpt) j["attack"]["checkpoint"] = *a_ckpt;
      if (a_grid) j["attack"]["eps_grid"] = parse_grid(*a_grid);
      if (a_iters) j["attack"]["pgd_iters"] = *a_iters;
      return report(nxn::run_experiment(j, atk_c.out));
    }
    if (*pnp) {
      json j = base_config(pnp_c, "pnp-deblur");
      if (p_ckpt) j["pnp"]["checkpoint"] = *p_ckpt;
      if (p_kernel) j["pnp"]["kernel"] = *p_kernel;
      if (p_tau) j["pnp"]["tau"] = *p_tau;
      if (p_iters) j["pnp"]["iters"] = *p_iters;
      if (p_tol) j["pnp"]["tol"] = *p_tol;
      return report(nxn::run_experiment(j, pnp_c.out));
    }
  } catch (const nxn::ConfigError& e) {
    std::cerr << json{{"status", "error"}, {"kind", "config"}, {"message", e.what()},
                      {"exit_code", nxn::kExitConfig}}.dump(2)
              << '\n';
    return nxn::kExitConfig;
  }
  return nxn::kExitFailure;
}
