#include "nxn/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <initializer_list>

#include "nxn/attack.hpp"
#include "nxn/errors.hpp"
#include "nxn/pnp.hpp"

namespace nxn {

namespace {

using Keys = std::initializer_list<const char*>;

const Keys kTop = {"task", "seed", "architecture", "optimizer", "data",
                   "classifier", "attack", "pnp", "verify"};
const Keys kArch = {"family", "op", "tableau", "n_blocks", "channels", "hidden", "kernel",
                    "padding", "h", "contraction_budget", "activation", "alpha", "baseline_init",
                    "stage_channels", "blocks_per_stage", "classes", "init_power_iters"};
const Keys kOpt = {"iters", "lr_min", "lr_max", "momentum", "weight_decay", "batch_size",
                   "eval_every"};
const Keys kData = {"kind", "size", "noise_sigma", "n_train", "n_val", "n_test", "classes"};
const Keys kCls = {"mu", "adversarial", "eps", "pgd_iters"};
const Keys kAtk = {"checkpoint", "eps_grid", "pgd_iters", "step", "loss", "n_points"};
const Keys kPnp = {"checkpoint", "kernel", "tau", "iters", "tol", "noise_sigma", "size", "x0"};
const Keys kVer = {"contractivity_samples", "pairs", "tol", "dim", "n_blocks"};

void collect_unknown(const json& j, Keys known, const std::string& prefix,
                     std::vector<std::string>& out) {
  if (!j.is_object()) {
    out.push_back(prefix.empty() ? "<root is not an object>" : prefix + " (not an object)");
    return;
  }
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      out.push_back(prefix.empty() ? key : prefix + "." + key);
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  std::vector<std::string> unknown;
  collect_unknown(j, kTop, "", unknown);
  if (j.is_object()) {
    const std::pair<const char*, Keys> sections[] = {
        {"architecture", kArch}, {"optimizer", kOpt}, {"data", kData},  {"classifier", kCls},
        {"attack", kAtk},        {"pnp", kPnp},       {"verify", kVer}};
    for (const auto& [name, keys] : sections)
      if (j.contains(name)) collect_unknown(j.at(name), keys, name, unknown);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

  ExperimentConfig c;
  try {
    if (!j.contains("task")) throw ConfigError("config: missing required key 'task'");
    c.task = j.at("task").get<std::string>();
    read(j, "seed", c.seed);
    if (j.contains("architecture")) c.architecture = j.at("architecture").get<ArchitectureConfig>();

    const json& o = section(j, "optimizer");
    read(o, "iters", c.optimizer.iters);
    read(o, "lr_min", c.optimizer.lr_min);
    read(o, "lr_max", c.optimizer.lr_max);
    read(o, "momentum", c.optimizer.momentum);
    read(o, "weight_decay", c.optimizer.weight_decay);
    read(o, "batch_size", c.optimizer.batch_size);
    read(o, "eval_every", c.optimizer.eval_every);
    c.optimizer.seed = c.seed;

    const json& d = section(j, "data");
    read(d, "kind", c.data.kind);
    read(d, "size", c.data.size);
    read(d, "noise_sigma", c.data.noise_sigma);
    read(d, "n_train", c.data.n_train);
    read(d, "n_val", c.data.n_val);
    read(d, "n_test", c.data.n_test);
    read(d, "classes", c.data.classes);

    const json& k = section(j, "classifier");
    read(k, "mu", c.classifier.mu);
    read(k, "adversarial", c.classifier.adversarial);
    read(k, "eps", c.classifier.eps);
    read(k, "pgd_iters", c.classifier.pgd_iters);

    const json& a = section(j, "attack");
    read(a, "checkpoint", c.attack.checkpoint);
    read(a, "eps_grid", c.attack.eps_grid);
    read(a, "pgd_iters", c.attack.pgd_iters);
    read(a, "step", c.attack.step);
    read(a, "loss", c.attack.loss);
    read(a, "n_points", c.attack.n_points);

    const json& p = section(j, "pnp");
    read(p, "checkpoint", c.pnp.checkpoint);
    read(p, "kernel", c.pnp.kernel);
    read(p, "tau", c.pnp.tau);
    read(p, "iters", c.pnp.iters);
    read(p, "tol", c.pnp.tol);
    read(p, "noise_sigma", c.pnp.noise_sigma);
    read(p, "size", c.pnp.size);
    read(p, "x0", c.pnp.x0);

    const json& v = section(j, "verify");
    read(v, "contractivity_samples", c.verify.contractivity_samples);
    read(v, "pairs", c.verify.pairs);
    read(v, "tol", c.verify.tol);
    read(v, "dim", c.verify.dim);
    read(v, "n_blocks", c.verify.n_blocks);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  static const char* const tasks[] = {"train-denoiser", "train-classifier", "attack-eval",
                                      "pnp-deblur",     "verify",           "radius"};
  if (std::find(std::begin(tasks), std::end(tasks), c.task) == std::end(tasks))
    throw ConfigError("config: unknown task '" + c.task + "'");

  // Resolve data defaults from the task.
  if (c.data.kind.empty())
    c.data.kind = c.task == "train-classifier" || c.task == "attack-eval" ? "toy_classify"
                                                                           : "synth_denoise";
  if (c.data.kind != "synth_denoise" && c.data.kind != "toy_classify")
    throw ConfigError("data.kind must be synth_denoise or toy_classify");
  const bool toy = c.data.kind == "toy_classify";
  if (c.data.size == 0) c.data.size = toy ? 8 : 16;
  if (c.data.noise_sigma < 0.0) c.data.noise_sigma = toy ? 0.1 : 0.15;

  validate(c.architecture);
  validate(c.optimizer);
  try {
    parse_attack_loss(c.attack.loss);
    parse_x0_policy(c.pnp.x0);
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (c.attack.eps_grid.empty()) throw ConfigError("attack.eps_grid must not be empty");
  if (c.pnp.kernel == 0 || c.pnp.kernel % 2 == 0) throw ConfigError("pnp.kernel must be odd");
  if (!(c.pnp.tau >= 0.0)) throw ConfigError("pnp.tau must be >= 0 (0 selects 1/|K|^2)");
  if (!(c.classifier.eps >= 0.0)) throw ConfigError("classifier.eps must be >= 0");
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& o = c.optimizer;
  return json{
      {"task", c.task},
      {"seed", c.seed},
      {"architecture", c.architecture},
      {"optimizer",
       {{"iters", o.iters}, {"lr_min", o.lr_min}, {"lr_max", o.lr_max}, {"momentum", o.momentum},
        {"weight_decay", o.weight_decay}, {"batch_size", o.batch_size},
        {"eval_every", o.eval_every}}},
      {"data",
       {{"kind", c.data.kind}, {"size", c.data.size}, {"noise_sigma", c.data.noise_sigma},
        {"n_train", c.data.n_train}, {"n_val", c.data.n_val}, {"n_test", c.data.n_test},
        {"classes", c.data.classes}}},
      {"classifier",
       {{"mu", c.classifier.mu}, {"adversarial", c.classifier.adversarial},
        {"eps", c.classifier.eps}, {"pgd_iters", c.classifier.pgd_iters}}},
      {"attack",
       {{"checkpoint", c.attack.checkpoint}, {"eps_grid", c.attack.eps_grid},
        {"pgd_iters", c.attack.pgd_iters}, {"step", c.attack.step}, {"loss", c.attack.loss},
        {"n_points", c.attack.n_points}}},
      {"pnp",
       {{"checkpoint", c.pnp.checkpoint}, {"kernel", c.pnp.kernel}, {"tau", c.pnp.tau},
        {"iters", c.pnp.iters}, {"tol", c.pnp.tol}, {"noise_sigma", c.pnp.noise_sigma},
        {"size", c.pnp.size}, {"x0", c.pnp.x0}}},
      {"verify",
       {{"contractivity_samples", c.verify.contractivity_samples}, {"pairs", c.verify.pairs},
        {"tol", c.verify.tol}, {"dim", c.verify.dim}, {"n_blocks", c.verify.n_blocks}}}};
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

DenoiseDataConfig denoise_data(const ExperimentConfig& c) {
  DenoiseDataConfig d;
  d.size = c.data.size;
  d.noise_sigma = c.data.noise_sigma;
  d.n_train = c.data.n_train;
  d.n_val = c.data.n_val;
  d.n_test = c.data.n_test;
  d.seed = c.seed;
  return d;
}

ClassifyDataConfig classify_data(const ExperimentConfig& c) {
  ClassifyDataConfig d;
  d.size = c.data.size;
  d.classes = c.data.classes;
  d.noise_sigma = c.data.noise_sigma;
  d.n_train = c.data.n_train;
  d.n_val = c.data.n_val;
  d.n_test = c.data.n_test;
  d.seed = c.seed;
  return d;
}

std::string config_hash(const json& resolved) {
  const std::string text = resolved.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace nxn
