#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nxn/activation.hpp"
#include "nxn/grad.hpp"
#include "nxn/linop.hpp"
#include "nxn/random.hpp"
#include "nxn/tableau.hpp"

namespace nxn {

using json = nlohmann::json;

// Named view of model storage, used for training and checkpoints.
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> data;
};

// The field x -> -A^T act(A x + b), with b per codomain channel.
class GradFlowField {
 public:
  GradFlowField(std::unique_ptr<LinearOperator> a, Vec bias, Activation act);
  GradFlowField(const GradFlowField& other);
  GradFlowField& operator=(const GradFlowField& other);
  GradFlowField(GradFlowField&&) noexcept = default;
  GradFlowField& operator=(GradFlowField&&) noexcept = default;

  LinearOperator& op() { return *a_; }
  const LinearOperator& op() const { return *a_; }
  Vec& bias() { return bias_; }
  const Vec& bias() const { return bias_; }
  const Activation& activation() const { return act_; }
  SpectralState& spectral() { return spectral_; }
  const SpectralState& spectral() const { return spectral_; }
  std::size_t dim() const { return a_->domain_dim(); }

  void eval_into(std::span<const double> x, std::span<double> out) const;
  Vec eval(std::span<const double> x) const;
  Var record(Tape& t, Var x, Var weights, Var bias) const;
  // sum_i psi((Ax + b)_i), psi the activation antiderivative.
  double potential(std::span<const double> x) const;

 private:
  std::unique_ptr<LinearOperator> a_;
  Vec bias_;
  Activation act_;
  SpectralState spectral_;
};

Vec field_eval(const GradFlowField& f, std::span<const double> x);
// 1 / (sigma^2 L) from the current spectral estimate; +inf when sigma = 0.
double monotonicity_nu(const GradFlowField& f);
// max(1, ceil(h sigma^2 L / budget)).
std::size_t substep_count(double h, double sigma, double lipschitz, double budget);

struct BlockStats {
  double product = 0.0;  // (h/N) sigma^2 L with the current estimate; 0 if unconstrained
  std::size_t substeps = 1;
  bool constrained = false;
};

// Audit of one block against a refined spectral estimate. The N in force
// (from the training-time estimate) must satisfy the contractivity bound 2r;
// the N recomputed from the refined estimate must meet the configured budget.
struct BlockCertificate {
  std::size_t block = 0;
  double h = 0.0;
  std::size_t substeps = 0;  // N in force before recertification
  std::size_t substeps_recertified = 0;
  double sigma_estimate = 0.0;
  double sigma_recertified = 0.0;
  double product_in_force = 0.0;  // (h/N_in_force) sigma_recertified^2 L
  double product = 0.0;           // (h/N_recertified) sigma_recertified^2 L
  double radius_bound = 0.0;      // 2r
  double budget = 0.0;
  bool pass = false;
};

// A shape-preserving residual block.
class Block {
 public:
  virtual ~Block() = default;
  virtual std::size_t dim() const = 0;
  virtual Vec forward(std::span<const double> x) const = 0;
  // params points at num_params() consecutive param leaves, in parameters() order.
  virtual Var record(Tape& t, Var x, const Var* params) const = 0;
  virtual void parameters(const std::string& prefix, std::vector<TensorRef>& out) = 0;
  virtual void state(const std::string& prefix, std::vector<TensorRef>& out) = 0;
  virtual std::size_t num_params() const = 0;
  virtual void refresh_spectral(int iters) = 0;
  virtual BlockStats stats() const = 0;
  // Certified Lipschitz upper bound, or +inf if none is available.
  virtual double lipschitz_bound() const = 0;
  virtual std::unique_ptr<Block> clone() const = 0;
};

// Constrained network block: N equal explicit RK substeps of the gradient-flow
// field over a total time h, with N chosen so (h/N) sigma^2 L <= budget.
class OdeBlock final : public Block {
 public:
  OdeBlock(GradFlowField field, double h, RKTableau tableau, double budget);

  GradFlowField& field() { return field_; }
  const GradFlowField& field() const { return field_; }
  double h() const { return h_; }
  const RKTableau& tableau() const { return tableau_; }
  double radius() const { return r_; }
  double budget() const { return budget_; }
  // With substepping off, N = 1 regardless of the weights (for falsification tests).
  void set_substepping(bool on) { substepping_ = on; }
  bool substepping() const { return substepping_; }

  std::size_t substeps() const;
  BlockCertificate recertify(int iters);

  std::size_t dim() const override { return field_.dim(); }
  Vec forward(std::span<const double> x) const override;
  Var record(Tape& t, Var x, const Var* params) const override;
  void parameters(const std::string& prefix, std::vector<TensorRef>& out) override;
  void state(const std::string& prefix, std::vector<TensorRef>& out) override;
  std::size_t num_params() const override { return 2; }
  void refresh_spectral(int iters) override;
  BlockStats stats() const override;
  double lipschitz_bound() const override;
  std::unique_ptr<Block> clone() const override { return std::make_unique<OdeBlock>(*this); }

 private:
  GradFlowField field_;
  double h_;
  RKTableau tableau_;
  double r_;
  double budget_;
  bool substepping_ = true;
};

std::size_t substep_count(const OdeBlock& block);
Vec block_forward(const OdeBlock& block, std::span<const double> x);

// Unconstrained block z + B act(A z + b). B is stored transposed (same shape
// as A) and applied through the adjoint, so B = -h A^T is the tie bt = -h A.
class BaselineBlock final : public Block {
 public:
  BaselineBlock(std::unique_ptr<LinearOperator> a, Vec bias, std::unique_ptr<LinearOperator> bt,
                Activation act);
  BaselineBlock(const BaselineBlock& other);

  LinearOperator& a() { return *a_; }
  LinearOperator& bt() { return *bt_; }
  const LinearOperator& a() const { return *a_; }
  const LinearOperator& bt() const { return *bt_; }
  Vec& bias() { return bias_; }

  std::size_t dim() const override { return a_->domain_dim(); }
  Vec forward(std::span<const double> x) const override;
  Var record(Tape& t, Var x, const Var* params) const override;
  void parameters(const std::string& prefix, std::vector<TensorRef>& out) override;
  void state(const std::string& prefix, std::vector<TensorRef>& out) override;
  std::size_t num_params() const override { return 3; }
  void refresh_spectral(int) override {}
  BlockStats stats() const override { return {}; }
  double lipschitz_bound() const override;
  std::unique_ptr<Block> clone() const override { return std::make_unique<BaselineBlock>(*this); }

 private:
  std::unique_ptr<LinearOperator> a_;
  Vec bias_;
  std::unique_ptr<LinearOperator> bt_;
  Activation act_;
};

struct ConstraintStats {
  double max_block_product = 0.0;
  std::size_t total_substeps = 0;
};

// A trainable map R^input_size -> R^output_size.
class Model {
 public:
  virtual ~Model() = default;
  virtual std::size_t input_size() const = 0;
  virtual std::size_t output_size() const = 0;
  virtual Vec forward(std::span<const double> x) const = 0;
  // Records the forward pass. The model creates its own param leaves, appended
  // to *param_vars in parameters() order; with param_vars null they do not
  // require gradients.
  virtual Var record(Tape& t, Var x, std::vector<Var>* param_vars) const = 0;
  virtual std::vector<TensorRef> parameters() = 0;
  // Parameters plus spectral states; the checkpoint payload.
  virtual std::vector<TensorRef> state() = 0;
  // Warm-started power iterations on every constrained operator.
  virtual void after_update(int power_iters) = 0;
  virtual ConstraintStats constraint_stats() const = 0;
  // Power iterations from the current state, then audit and adopt the result.
  virtual std::vector<BlockCertificate> recertify(int power_iters) = 0;
  // Certified Lipschitz upper bound (+inf if unavailable).
  virtual double lipschitz_bound() const = 0;
  virtual json architecture() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
};

// lift (zero channel padding) -> blocks -> project (channel dropping).
// With ODE blocks this is the non-expansive network; with baseline blocks the
// unconstrained residual network of the same topology.
class ResidualNet final : public Model {
 public:
  ResidualNet(ImageShape input, std::size_t channels, std::vector<std::unique_ptr<Block>> blocks);
  ResidualNet(const ResidualNet& other);

  ImageShape input_shape() const { return input_; }
  std::size_t channels() const { return channels_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  Block& block(std::size_t i) { return *blocks_.at(i); }
  const Block& block(std::size_t i) const { return *blocks_.at(i); }
  void set_architecture(json arch) { arch_ = std::move(arch); }

  std::size_t input_size() const override { return input_.size(); }
  std::size_t output_size() const override { return input_.size(); }
  Vec forward(std::span<const double> x) const override;
  Var record(Tape& t, Var x, std::vector<Var>* param_vars) const override;
  std::vector<TensorRef> parameters() override;
  std::vector<TensorRef> state() override;
  void after_update(int power_iters) override;
  ConstraintStats constraint_stats() const override;
  std::vector<BlockCertificate> recertify(int power_iters) override;
  double lipschitz_bound() const override;
  json architecture() const override { return arch_; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<ResidualNet>(*this); }

  // Runs the lifted block stack (no lift/project), for block-level tests.
  Vec forward_lifted(std::span<const double> z) const;

 private:
  ImageShape input_;
  std::size_t channels_;
  std::vector<std::unique_ptr<Block>> blocks_;
  json arch_;
};

// (1 - alpha) x + alpha inner(x).
class AveragedWrapper final : public Model {
 public:
  AveragedWrapper(double alpha, std::unique_ptr<Model> inner);
  AveragedWrapper(const AveragedWrapper& other);

  double alpha() const { return alpha_; }
  Model& inner() { return *inner_; }
  const Model& inner() const { return *inner_; }

  std::size_t input_size() const override { return inner_->input_size(); }
  std::size_t output_size() const override { return inner_->output_size(); }
  Vec forward(std::span<const double> x) const override;
  Var record(Tape& t, Var x, std::vector<Var>* param_vars) const override;
  std::vector<TensorRef> parameters() override { return inner_->parameters(); }
  std::vector<TensorRef> state() override { return inner_->state(); }
  void after_update(int power_iters) override { inner_->after_update(power_iters); }
  ConstraintStats constraint_stats() const override { return inner_->constraint_stats(); }
  std::vector<BlockCertificate> recertify(int power_iters) override {
    return inner_->recertify(power_iters);
  }
  double lipschitz_bound() const override;
  json architecture() const override;
  std::unique_ptr<Model> clone() const override {
    return std::make_unique<AveragedWrapper>(*this);
  }

 private:
  double alpha_;
  std::unique_ptr<Model> inner_;
};

Vec averaged_forward(const AveragedWrapper& w, std::span<const double> x);

// alpha / (m (1 - alpha) + alpha): per-layer target so m layers compose to alpha.
double per_layer_alpha(double target_alpha, std::size_t m);
// m / (m - 1 + min 1/alpha_i): averagedness constant of a composition.
double compose_alpha(std::span<const double> alphas);

// Image classifier: per stage a bias-free 1x1 lift conv, 2x2 average pooling
// and a block group; then global average pooling and a dense layer with bias.
class ClassifierNet final : public Model {
 public:
  struct Stage {
    std::unique_ptr<Conv2dOp> lift;  // 1x1, acting at the pre-pool resolution
    bool pool = true;
    std::vector<std::unique_ptr<Block>> blocks;
    ImageShape in;   // lift input
    ImageShape out;  // block resolution
  };

  ClassifierNet(ImageShape input, std::vector<Stage> stages, DenseOp final_linear, Vec final_bias);
  ClassifierNet(const ClassifierNet& other);

  std::size_t classes() const { return final_.rows(); }
  std::size_t num_stages() const { return stages_.size(); }
  Stage& stage(std::size_t i) { return stages_.at(i); }
  DenseOp& final_linear() { return final_; }
  Vec& final_bias() { return final_bias_; }
  void set_architecture(json arch) { arch_ = std::move(arch); }

  std::size_t input_size() const override { return input_.size(); }
  std::size_t output_size() const override { return final_.rows(); }
  Vec forward(std::span<const double> x) const override;
  Var record(Tape& t, Var x, std::vector<Var>* param_vars) const override;
  std::vector<TensorRef> parameters() override;
  std::vector<TensorRef> state() override;
  void after_update(int power_iters) override;
  ConstraintStats constraint_stats() const override;
  std::vector<BlockCertificate> recertify(int power_iters) override;
  // |A_lin| * prod |pool| * prod |A_lift| * prod block bounds, with exact norms.
  double lipschitz_bound() const override;
  json architecture() const override { return arch_; }
  std::unique_ptr<Model> clone() const override { return std::make_unique<ClassifierNet>(*this); }

 private:
  ImageShape input_;
  std::vector<Stage> stages_;
  DenseOp final_;
  Vec final_bias_;
  json arch_;
};

// Smallest index among the maximal scores.
std::size_t argmax(std::span<const double> scores);

struct ArchitectureConfig {
  std::string family = "nonexp";  // nonexp | baseline
  std::string op = "conv";        // conv | dense
  std::string tableau = "euler";
  std::size_t n_blocks = 5;
  std::size_t channels = 16;
  std::size_t hidden = 0;  // codomain channels of A; 0 means `channels`
  std::size_t kernel = 3;
  std::string padding = "zero";
  double h = 0.0;  // 0 means the tableau's contractivity radius
  double contraction_budget = 1.0;
  std::string activation = "leaky_relu";
  double alpha = 0.0;  // > 0 wraps the denoiser in an averaged wrapper
  std::string baseline_init = "tied";  // tied | random
  std::vector<std::size_t> stage_channels = {8, 16};
  std::size_t blocks_per_stage = 2;
  std::size_t classes = 4;
  int init_power_iters = 1000;
};

void to_json(json& j, const ArchitectureConfig& c);
// Rejects unknown keys.
void from_json(const json& j, ArchitectureConfig& c);
void validate(const ArchitectureConfig& c);

// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); constrained operators are then
// normalized to operator norm 1 after init_power_iters power iterations.
std::unique_ptr<Model> build_denoiser(const ArchitectureConfig& c, ImageShape input, Rng& rng);
std::unique_ptr<Model> build_classifier(const ArchitectureConfig& c, ImageShape input, Rng& rng);
// Rebuilds a model from architecture() output (weights are placeholders).
std::unique_ptr<Model> build_from_architecture(const json& arch);
// Same conv denoiser on a different image size: parameters are copied and the
// spectral states re-estimated with `power_iters` iterations on the new grid.
std::unique_ptr<Model> rebind_denoiser(Model& model, ImageShape input, int power_iters = 1000);

// Relative margin below operator norm 1 used by the initial normalization.
constexpr double kInitNormMargin = 1e-6;

// A constrained ODE block with freshly initialized weights.
OdeBlock make_ode_block(std::unique_ptr<LinearOperator> a, const RKTableau& tableau, double h,
                        double budget, Activation act, Rng& rng, int init_power_iters);

}  // namespace nxn
