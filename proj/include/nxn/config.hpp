#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nxn/net.hpp"
#include "nxn/train.hpp"

namespace nxn {

struct DataSection {
  std::string kind;  // synth_denoise | toy_classify; empty resolves from the task
  std::size_t size = 0;          // 0 resolves per kind (16 / 8)
  double noise_sigma = -1.0;     // < 0 resolves per kind (0.15 / 0.1)
  std::size_t n_train = 256;
  std::size_t n_val = 32;
  std::size_t n_test = 32;
  std::size_t classes = 4;
};

struct AttackSection {
  std::string checkpoint;
  std::vector<double> eps_grid = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45};
  std::size_t pgd_iters = 100;
  double step = 0.0;  // 0 means 2.5 eps / pgd_iters
  std::string loss = "cross_entropy";
  std::size_t n_points = 0;  // 0 means the whole test split
};

struct PnpSection {
  std::string checkpoint;
  std::size_t kernel = 9;
  double tau = 0.0;  // 0 means 1 / |K|^2
  std::size_t iters = 2000;
  double tol = 1e-6;
  double noise_sigma = 0.01;
  std::size_t size = 32;
  std::string x0 = "adjoint_applied";
};

struct VerifySection {
  std::size_t contractivity_samples = 100000;
  std::size_t pairs = 10000;
  double tol = 1e-9;
  std::size_t dim = 8;
  std::size_t n_blocks = 5;
};

struct ExperimentConfig {
  std::string task;  // train-denoiser | train-classifier | attack-eval | pnp-deblur | verify | radius
  std::uint64_t seed = 0;
  ArchitectureConfig architecture;
  SgdConfig optimizer;
  DataSection data;
  ClassifierTrainOptions classifier;
  AttackSection attack;
  PnpSection pnp;
  VerifySection verify;
};

// Parses and resolves defaults. Unknown keys anywhere raise ConfigError
// listing all of them.
ExperimentConfig parse_config(const json& j);
json to_json(const ExperimentConfig& c);
ExperimentConfig load_config_file(const std::string& path);

// Dataset configs implied by an experiment.
DenoiseDataConfig denoise_data(const ExperimentConfig& c);
ClassifyDataConfig classify_data(const ExperimentConfig& c);

// 16 hex digits of FNV-1a over the canonical dump of the resolved config.
std::string config_hash(const json& resolved);

}  // namespace nxn
