#include "nxn/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nxn/errors.hpp"
#include "nxn/kernels.hpp"
#include "nxn/linalg.hpp"

namespace nxn {

Activation Activation::parse(const std::string& name) {
  if (name == "leaky_relu") return leaky_relu();
  if (name == "relu") return relu();
  if (name == "identity") return identity();
  throw InvalidInput("unknown activation '" + name + "'");
}

std::string Activation::name() const {
  switch (kind) {
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::relu: return "relu";
    case ActivationKind::identity: return "identity";
  }
  return "unknown";
}

// ---------------------------------------------------------------- field

GradFlowField::GradFlowField(std::unique_ptr<LinearOperator> a, Vec bias, Activation act)
    : a_(std::move(a)), bias_(std::move(bias)), act_(act) {
  if (!a_) throw InvalidInput("GradFlowField: null operator");
  require_size(bias_.size(), a_->codomain_channels(), "GradFlowField bias");
  Rng rng(0x9e3779b97f4a7c15ULL);
  spectral_ = SpectralState::random(*a_, rng);
}

GradFlowField::GradFlowField(const GradFlowField& o)
    : a_(o.a_->clone()), bias_(o.bias_), act_(o.act_), spectral_(o.spectral_) {}

GradFlowField& GradFlowField::operator=(const GradFlowField& o) {
  if (this != &o) {
    a_ = o.a_->clone();
    bias_ = o.bias_;
    act_ = o.act_;
    spectral_ = o.spectral_;
  }
  return *this;
}

void GradFlowField::eval_into(std::span<const double> x, std::span<double> out) const {
  Vec z(a_->codomain_dim());
  a_->apply_into(x, z);
  kernels::add_bias(z, bias_, z);
  kernels::activate(act_, z, z);
  Vec w(a_->domain_dim());
  a_->apply_adjoint_into(z, w);
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = -1.0 * w[i];
}

Vec GradFlowField::eval(std::span<const double> x) const {
  require_size(x.size(), dim(), "field_eval");
  Vec out(dim());
  eval_into(x, out);
  return out;
}

Var GradFlowField::record(Tape& t, Var x, Var weights, Var bias) const {
  Var z = t.apply(*a_, x, weights);
  z = t.add_bias(z, bias);
  z = t.activate(z, act_);
  const Var w = t.apply_adjoint(*a_, z, weights);
  return t.scale(w, -1.0);
}

double GradFlowField::potential(std::span<const double> x) const {
  Vec z = a_->apply(x);
  kernels::add_bias(z, bias_, z);
  double s = 0.0;
  for (double e : z) s += act_.antiderivative(e);
  return s;
}

Vec field_eval(const GradFlowField& f, std::span<const double> x) { return f.eval(x); }

double monotonicity_nu(const GradFlowField& f) {
  const double s = f.spectral().sigma;
  if (s == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / (s * s * f.activation().lipschitz);
}

std::size_t substep_count(double h, double sigma, double lipschitz, double budget) {
  if (!(budget > 0.0)) throw InvalidInput("substep_count: budget must be positive");
  const double q = h * sigma * sigma * lipschitz / budget;
  if (!std::isfinite(q)) throw DivergenceError("substep_count: non-finite step product");
  if (q <= 1.0) return 1;
  return static_cast<std::size_t>(std::ceil(q));
}

// ---------------------------------------------------------------- ODE block

OdeBlock::OdeBlock(GradFlowField field, double h, RKTableau tableau, double budget)
    : field_(std::move(field)), h_(h), tableau_(std::move(tableau)), budget_(budget) {
  if (!(h_ > 0.0) || !std::isfinite(h_)) throw InvalidInput("OdeBlock: h must be positive");
  if (!tableau_.is_explicit()) throw UnsupportedTableau("OdeBlock: tableau must be explicit");
  if (field_.op().domain_dim() == 0) throw InvalidInput("OdeBlock: empty operator");
  r_ = tableau_.radius ? *tableau_.radius : contractivity_radius(tableau_);
  if (!(budget_ > 0.0) || (std::isfinite(r_) && budget_ > 2.0 * r_ * (1.0 + 1e-15)))
    throw ConfigError("OdeBlock: contraction_budget must lie in (0, 2r]");
}

std::size_t OdeBlock::substeps() const {
  if (!substepping_) return 1;
  return substep_count(h_, field_.spectral().sigma, field_.activation().lipschitz, budget_);
}

std::size_t substep_count(const OdeBlock& block) { return block.substeps(); }

Vec OdeBlock::forward(std::span<const double> x) const {
  require_size(x.size(), dim(), "block_forward");
  const std::size_t n = substeps();
  const double hs = h_ / static_cast<double>(n);
  const VectorField f = [this](std::span<const double> y, std::span<double> out) {
    field_.eval_into(y, out);
  };
  Vec y(x.begin(), x.end());
  for (std::size_t s = 0; s < n; ++s) y = rk_step(tableau_, hs, y, f);
  return y;
}

Vec block_forward(const OdeBlock& block, std::span<const double> x) { return block.forward(x); }

Var OdeBlock::record(Tape& t, Var x, const Var* params) const {
  const std::size_t n = substeps();
  const double hs = h_ / static_cast<double>(n);
  const std::size_t m = tableau_.stages;
  std::vector<Var> k(m);
  Var y = x;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      Var stage = y;
      for (std::size_t j = 0; j < i; ++j) {
        const double aij = tableau_.coeff(i, j);
        if (aij == 0.0) continue;
        stage = t.axpy(stage, hs * aij, k[j]);
      }
      k[i] = field_.record(t, stage, params[0], params[1]);
    }
    Var out = y;
    for (std::size_t i = 0; i < m; ++i) {
      if (tableau_.b[i] == 0.0) continue;
      out = t.axpy(out, hs * tableau_.b[i], k[i]);
    }
    y = out;
  }
  return y;
}

void OdeBlock::parameters(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + "A", field_.op().weight_shape(), field_.op().weights()});
  out.push_back({prefix + "b", {field_.bias().size()}, field_.bias()});
}

void OdeBlock::state(const std::string& prefix, std::vector<TensorRef>& out) {
  parameters(prefix, out);
  SpectralState& s = field_.spectral();
  out.push_back({prefix + "spectral.u", {s.u.size()}, s.u});
  out.push_back({prefix + "spectral.v", {s.v.size()}, s.v});
  out.push_back({prefix + "spectral.sigma", {1}, std::span<double>(&s.sigma, 1)});
}

void OdeBlock::refresh_spectral(int iters) {
  field_.spectral() = power_iterate(field_.op(), field_.spectral(), iters);
}

BlockStats OdeBlock::stats() const {
  BlockStats s;
  s.constrained = true;
  s.substeps = substeps();
  const double sigma = field_.spectral().sigma;
  s.product = (h_ / static_cast<double>(s.substeps)) * sigma * sigma * field_.activation().lipschitz;
  return s;
}

double OdeBlock::lipschitz_bound() const {
  if (!std::isfinite(r_)) return std::numeric_limits<double>::infinity();
  return stats().product <= 2.0 * r_ ? 1.0 : std::numeric_limits<double>::infinity();
}

BlockCertificate OdeBlock::recertify(int iters) {
  BlockCertificate c;
  c.h = h_;
  c.substeps = substeps();
  c.sigma_estimate = field_.spectral().sigma;
  refresh_spectral(iters);
  c.substeps_recertified = substeps();
  const double s = field_.spectral().sigma;
  c.sigma_recertified = s;
  const double l = field_.activation().lipschitz;
  c.product_in_force = (h_ / static_cast<double>(c.substeps)) * s * s * l;
  c.product = (h_ / static_cast<double>(c.substeps_recertified)) * s * s * l;
  c.radius_bound = 2.0 * r_;
  c.budget = budget_;
  c.pass = c.product <= budget_ && c.product_in_force <= c.radius_bound;
  return c;
}

OdeBlock make_ode_block(std::unique_ptr<LinearOperator> a, const RKTableau& tableau, double h,
                        double budget, Activation act, Rng& rng, int init_power_iters) {
  const std::size_t channels = a->codomain_channels();
  const double bound = 1.0 / std::sqrt(static_cast<double>(a->weights().size() / channels));
  for (auto& w : a->weights()) w = rng.uniform(-bound, bound);
  Vec bias(channels);
  for (auto& b : bias) b = rng.uniform(-bound, bound);
  GradFlowField f(std::move(a), std::move(bias), act);
  f.spectral() = SpectralState::random(f.op(), rng);
  if (init_power_iters > 0) {
    f.spectral() = power_iterate(f.op(), f.spectral(), init_power_iters);
    const double sigma = f.spectral().sigma;
    // Slightly under 1 so that N = 1 at h sigma^2 L = budget survives recertification.
    if (sigma > 0.0) {
      const double target = sigma * (1.0 + kInitNormMargin);
      for (auto& w : f.op().weights()) w = w / target;
      f.spectral() = power_iterate(f.op(), f.spectral(), 1);
    }
  }
  return OdeBlock(std::move(f), h, tableau, budget);
}

// ---------------------------------------------------------------- baseline block

BaselineBlock::BaselineBlock(std::unique_ptr<LinearOperator> a, Vec bias,
                             std::unique_ptr<LinearOperator> bt, Activation act)
    : a_(std::move(a)), bias_(std::move(bias)), bt_(std::move(bt)), act_(act) {
  if (!a_ || !bt_) throw InvalidInput("BaselineBlock: null operator");
  require_size(bias_.size(), a_->codomain_channels(), "BaselineBlock bias");
  require_size(bt_->domain_dim(), a_->domain_dim(), "BaselineBlock B domain");
  require_size(bt_->codomain_dim(), a_->codomain_dim(), "BaselineBlock B codomain");
}

BaselineBlock::BaselineBlock(const BaselineBlock& o)
    : a_(o.a_->clone()), bias_(o.bias_), bt_(o.bt_->clone()), act_(o.act_) {}

Vec BaselineBlock::forward(std::span<const double> x) const {
  require_size(x.size(), dim(), "baseline_forward");
  Vec z(a_->codomain_dim());
  a_->apply_into(x, z);
  kernels::add_bias(z, bias_, z);
  kernels::activate(act_, z, z);
  Vec w(a_->domain_dim());
  bt_->apply_adjoint_into(z, w);
  Vec out(x.size());
  kernels::axpy(x, 1.0, w, out);
  if (!all_finite(out)) throw DivergenceError("baseline block: non-finite output");
  return out;
}

Var BaselineBlock::record(Tape& t, Var x, const Var* params) const {
  Var z = t.apply(*a_, x, params[0]);
  z = t.add_bias(z, params[1]);
  z = t.activate(z, act_);
  const Var w = t.apply_adjoint(*bt_, z, params[2]);
  return t.axpy(x, 1.0, w);
}

void BaselineBlock::parameters(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + "A", a_->weight_shape(), a_->weights()});
  out.push_back({prefix + "b", {bias_.size()}, bias_});
  out.push_back({prefix + "Bt", bt_->weight_shape(), bt_->weights()});
}

void BaselineBlock::state(const std::string& prefix, std::vector<TensorRef>& out) {
  parameters(prefix, out);
}

double BaselineBlock::lipschitz_bound() const { return std::numeric_limits<double>::infinity(); }

// ---------------------------------------------------------------- residual net

namespace {

std::vector<Var> make_param_vars(Tape& t, std::vector<TensorRef> refs,
                                 std::vector<Var>* param_vars) {
  std::vector<Var> vars;
  vars.reserve(refs.size());
  for (const auto& r : refs) vars.push_back(t.param(r.data, param_vars != nullptr));
  if (param_vars) param_vars->insert(param_vars->end(), vars.begin(), vars.end());
  return vars;
}

}  // namespace

ResidualNet::ResidualNet(ImageShape input, std::size_t channels,
                         std::vector<std::unique_ptr<Block>> blocks)
    : input_(input), channels_(channels), blocks_(std::move(blocks)) {
  if (channels_ < input_.channels) throw InvalidInput("ResidualNet: fewer channels than input");
  const std::size_t lifted = channels_ * input_.pixels();
  for (const auto& b : blocks_) require_size(b->dim(), lifted, "ResidualNet block dimension");
}

ResidualNet::ResidualNet(const ResidualNet& o)
    : input_(o.input_), channels_(o.channels_), arch_(o.arch_) {
  for (const auto& b : o.blocks_) blocks_.push_back(b->clone());
}

Vec ResidualNet::forward_lifted(std::span<const double> z) const {
  Vec y(z.begin(), z.end());
  for (const auto& b : blocks_) y = b->forward(y);
  return y;
}

Vec ResidualNet::forward(std::span<const double> x) const {
  require_size(x.size(), input_.size(), "net_forward input");
  Vec z(channels_ * input_.pixels(), 0.0);
  std::copy(x.begin(), x.end(), z.begin());
  z = forward_lifted(z);
  z.resize(input_.size());
  return z;
}

Var ResidualNet::record(Tape& t, Var x, std::vector<Var>* param_vars) const {
  const auto vars =
      make_param_vars(t, const_cast<ResidualNet*>(this)->parameters(), param_vars);
  Var z = t.pad_channels(x, input_, channels_);
  std::size_t next = 0;
  for (const auto& b : blocks_) {
    z = b->record(t, z, vars.data() + next);
    next += b->num_params();
  }
  const ImageShape lifted{channels_, input_.height, input_.width};
  return t.drop_channels(z, lifted, input_.channels);
}

std::vector<TensorRef> ResidualNet::parameters() {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i]->parameters("block" + std::to_string(i) + ".", out);
  return out;
}

std::vector<TensorRef> ResidualNet::state() {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i]->state("block" + std::to_string(i) + ".", out);
  return out;
}

void ResidualNet::after_update(int power_iters) {
  for (auto& b : blocks_) b->refresh_spectral(power_iters);
}

ConstraintStats ResidualNet::constraint_stats() const {
  ConstraintStats s;
  for (const auto& b : blocks_) {
    const BlockStats bs = b->stats();
    s.max_block_product = std::max(s.max_block_product, bs.product);
    s.total_substeps += bs.substeps;
  }
  return s;
}

std::vector<BlockCertificate> ResidualNet::recertify(int power_iters) {
  std::vector<BlockCertificate> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (auto* ode = dynamic_cast<OdeBlock*>(blocks_[i].get())) {
      out.push_back(ode->recertify(power_iters));
      out.back().block = i;
    }
  }
  return out;
}

double ResidualNet::lipschitz_bound() const {
  double l = 1.0;
  for (const auto& b : blocks_) l *= b->lipschitz_bound();
  return l;
}

// ---------------------------------------------------------------- averaged wrapper

AveragedWrapper::AveragedWrapper(double alpha, std::unique_ptr<Model> inner)
    : alpha_(alpha), inner_(std::move(inner)) {
  if (!(alpha_ > 0.0 && alpha_ < 1.0)) throw ConfigError("AveragedWrapper: alpha must lie in (0,1)");
  if (!inner_ || inner_->input_size() != inner_->output_size())
    throw InvalidInput("AveragedWrapper: inner map must be shape-preserving");
}

AveragedWrapper::AveragedWrapper(const AveragedWrapper& o)
    : alpha_(o.alpha_), inner_(o.inner_->clone()) {}

Vec AveragedWrapper::forward(std::span<const double> x) const {
  const Vec y = inner_->forward(x);
  const double keep = 1.0 - alpha_;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = keep * x[i];
    out[i] = a + alpha_ * y[i];
  }
  return out;
}

Vec averaged_forward(const AveragedWrapper& w, std::span<const double> x) { return w.forward(x); }

Var AveragedWrapper::record(Tape& t, Var x, std::vector<Var>* param_vars) const {
  const Var y = inner_->record(t, x, param_vars);
  const Var a = t.scale(x, 1.0 - alpha_);
  return t.axpy(a, alpha_, y);
}

double AveragedWrapper::lipschitz_bound() const {
  return (1.0 - alpha_) + alpha_ * inner_->lipschitz_bound();
}

json AveragedWrapper::architecture() const { return inner_->architecture(); }

double per_layer_alpha(double target_alpha, std::size_t m) {
  if (!(target_alpha > 0.0 && target_alpha < 1.0))
    throw InvalidInput("per_layer_alpha: alpha must lie in (0,1)");
  if (m == 0) throw InvalidInput("per_layer_alpha: m must be >= 1");
  const double md = static_cast<double>(m);
  return target_alpha / (md * (1.0 - target_alpha) + target_alpha);
}

double compose_alpha(std::span<const double> alphas) {
  if (alphas.empty()) throw InvalidInput("compose_alpha: empty list");
  double min_inv = std::numeric_limits<double>::infinity();
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw InvalidInput("compose_alpha: every alpha must lie in (0,1)");
    min_inv = std::min(min_inv, 1.0 / a);
  }
  const double m = static_cast<double>(alphas.size());
  return m / (m - 1.0 + min_inv);
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw InvalidInput("argmax: empty scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

// ---------------------------------------------------------------- config

namespace {

template <class T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

Padding padding_of(const ArchitectureConfig& c) { return parse_padding(c.padding); }

std::unique_ptr<LinearOperator> make_block_operator(const ArchitectureConfig& c, ImageShape lifted,
                                                    std::size_t channels) {
  const std::size_t hidden = c.hidden == 0 ? channels : c.hidden;
  if (c.op == "dense") {
    const std::size_t n = lifted.size();
    const std::size_t rows = c.hidden == 0 ? n : c.hidden;
    return std::make_unique<DenseOp>(DenseOp::zeros(rows, n));
  }
  return std::make_unique<Conv2dOp>(channels, hidden, c.kernel, c.kernel, lifted.height,
                                    lifted.width, padding_of(c),
                                    std::vector<double>(hidden * channels * c.kernel * c.kernel));
}

std::unique_ptr<Block> make_block(const ArchitectureConfig& c, ImageShape lifted,
                                  std::size_t channels, const RKTableau& tableau, double h,
                                  Rng& rng) {
  const Activation act = Activation::parse(c.activation);
  OdeBlock ode = make_ode_block(make_block_operator(c, lifted, channels), tableau, h,
                                c.contraction_budget, act, rng, c.init_power_iters);
  if (c.family == "nonexp") return std::make_unique<OdeBlock>(std::move(ode));

  const LinearOperator& a = ode.field().op();
  std::unique_ptr<LinearOperator> bt;
  if (c.baseline_init == "tied") {
    bt = scale(a, -h);
  } else {
    bt = a.clone();
    const double bound =
        1.0 / std::sqrt(static_cast<double>(bt->weights().size() / bt->codomain_channels()));
    for (auto& w : bt->weights()) w = rng.uniform(-bound, bound);
  }
  return std::make_unique<BaselineBlock>(a.clone(), ode.field().bias(), std::move(bt), act);
}

json shape_json(ImageShape s) { return json::array({s.channels, s.height, s.width}); }

}  // namespace

void to_json(json& j, const ArchitectureConfig& c) {
  j = json{{"family", c.family},
           {"op", c.op},
           {"tableau", c.tableau},
           {"n_blocks", c.n_blocks},
           {"channels", c.channels},
           {"hidden", c.hidden},
           {"kernel", c.kernel},
           {"padding", c.padding},
           {"h", c.h},
           {"contraction_budget", c.contraction_budget},
           {"activation", c.activation},
           {"alpha", c.alpha},
           {"baseline_init", c.baseline_init},
           {"stage_channels", c.stage_channels},
           {"blocks_per_stage", c.blocks_per_stage},
           {"classes", c.classes},
           {"init_power_iters", c.init_power_iters}};
}

void from_json(const json& j, ArchitectureConfig& c) {
  if (!j.is_object()) throw ConfigError("architecture: expected an object");
  static const char* const known[] = {
      "family", "op", "tableau", "n_blocks", "channels", "hidden", "kernel", "padding", "h",
      "contraction_budget", "activation", "alpha", "baseline_init", "stage_channels",
      "blocks_per_stage", "classes", "init_power_iters"};
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      unknown.push_back("architecture." + key);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  try {
    read_key(j, "family", c.family);
    read_key(j, "op", c.op);
    read_key(j, "tableau", c.tableau);
    read_key(j, "n_blocks", c.n_blocks);
    read_key(j, "channels", c.channels);
    read_key(j, "hidden", c.hidden);
    read_key(j, "kernel", c.kernel);
    read_key(j, "padding", c.padding);
    read_key(j, "h", c.h);
    read_key(j, "contraction_budget", c.contraction_budget);
    read_key(j, "activation", c.activation);
    read_key(j, "alpha", c.alpha);
    read_key(j, "baseline_init", c.baseline_init);
    read_key(j, "stage_channels", c.stage_channels);
    read_key(j, "blocks_per_stage", c.blocks_per_stage);
    read_key(j, "classes", c.classes);
    read_key(j, "init_power_iters", c.init_power_iters);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
}

void validate(const ArchitectureConfig& c) {
  if (c.family != "nonexp" && c.family != "baseline")
    throw ConfigError("architecture.family must be nonexp or baseline");
  if (c.op != "conv" && c.op != "dense") throw ConfigError("architecture.op must be conv or dense");
  RKTableau t;
  Activation act;
  try {
    t = builtin_tableau(c.tableau);
    act = Activation::parse(c.activation);
    parse_padding(c.padding);
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
  (void)act;
  if (c.channels == 0) throw ConfigError("architecture.channels must be >= 1");
  if (c.kernel == 0 || c.kernel % 2 == 0) throw ConfigError("architecture.kernel must be odd");
  if (!(c.h >= 0.0) || !std::isfinite(c.h)) throw ConfigError("architecture.h must be >= 0");
  const double r = *t.radius;
  if (!(c.contraction_budget > 0.0) || (std::isfinite(r) && c.contraction_budget > 2.0 * r))
    throw ConfigError("architecture.contraction_budget must lie in (0, 2r]");
  if (!(c.alpha >= 0.0 && c.alpha < 1.0)) throw ConfigError("architecture.alpha must lie in [0,1)");
  if (c.baseline_init != "tied" && c.baseline_init != "random")
    throw ConfigError("architecture.baseline_init must be tied or random");
  if (c.classes < 2) throw ConfigError("architecture.classes must be >= 2");
  for (std::size_t ch : c.stage_channels)
    if (ch == 0) throw ConfigError("architecture.stage_channels entries must be >= 1");
  if (c.init_power_iters < 0) throw ConfigError("architecture.init_power_iters must be >= 0");
}

std::unique_ptr<Model> build_denoiser(const ArchitectureConfig& c, ImageShape input, Rng& rng) {
  validate(c);
  if (c.op == "dense" && input.pixels() != 1)
    throw ConfigError("dense operators need a flat input (height = width = 1)");
  const RKTableau tableau = builtin_tableau(c.tableau);
  const double h = c.h > 0.0 ? c.h : *tableau.radius;
  const std::size_t channels = std::max(c.channels, input.channels);
  const ImageShape lifted{channels, input.height, input.width};
  std::vector<std::unique_ptr<Block>> blocks;
  for (std::size_t i = 0; i < c.n_blocks; ++i)
    blocks.push_back(make_block(c, lifted, channels, tableau, h, rng));
  auto net = std::make_unique<ResidualNet>(input, channels, std::move(blocks));
  net->set_architecture({{"kind", "denoiser"}, {"input", shape_json(input)}, {"config", c}});
  if (c.alpha > 0.0) return std::make_unique<AveragedWrapper>(c.alpha, std::move(net));
  return net;
}

std::unique_ptr<Model> build_classifier(const ArchitectureConfig& c, ImageShape input, Rng& rng) {
  validate(c);
  if (c.op != "conv") throw ConfigError("classifier blocks must use conv operators");
  const RKTableau tableau = builtin_tableau(c.tableau);
  const double h = c.h > 0.0 ? c.h : *tableau.radius;
  std::vector<ClassifierNet::Stage> stages;
  ImageShape cur = input;
  for (std::size_t ch : c.stage_channels) {
    if (cur.height % 2 != 0 || cur.width % 2 != 0)
      throw ConfigError("classifier: spatial size must stay even for pooling");
    ClassifierNet::Stage s;
    s.in = cur;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cur.channels));
    std::vector<double> k(ch * cur.channels);
    for (auto& w : k) w = rng.uniform(-bound, bound);
    s.lift = std::make_unique<Conv2dOp>(cur.channels, ch, 1, 1, cur.height, cur.width,
                                        Padding::zero, std::move(k));
    s.pool = true;
    s.out = {ch, cur.height / 2, cur.width / 2};
    for (std::size_t b = 0; b < c.blocks_per_stage; ++b)
      s.blocks.push_back(make_block(c, s.out, ch, tableau, h, rng));
    cur = s.out;
    stages.push_back(std::move(s));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(cur.channels));
  std::vector<double> w(c.classes * cur.channels);
  for (auto& e : w) e = rng.uniform(-bound, bound);
  Vec bias(c.classes);
  for (auto& e : bias) e = rng.uniform(-bound, bound);
  auto net = std::make_unique<ClassifierNet>(input, std::move(stages),
                                             DenseOp(c.classes, cur.channels, std::move(w)),
                                             std::move(bias));
  net->set_architecture({{"kind", "classifier"}, {"input", shape_json(input)}, {"config", c}});
  return net;
}

std::unique_ptr<Model> build_from_architecture(const json& arch) {
  try {
    const std::string kind = arch.at("kind").get<std::string>();
    const auto in = arch.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw ConfigError("architecture.input must have three entries");
    ArchitectureConfig c = arch.at("config").get<ArchitectureConfig>();
    c.init_power_iters = 0;
    Rng rng(0);
    std::unique_ptr<Model> m;
    if (kind == "denoiser") {
      m = build_denoiser(c, {in[0], in[1], in[2]}, rng);
    } else if (kind == "classifier") {
      m = build_classifier(c, {in[0], in[1], in[2]}, rng);
    } else {
      throw ConfigError("unknown model kind '" + kind + "'");
    }
    // Keep the stored description identical to the one that was saved.
    Model* base = m.get();
    if (auto* w = dynamic_cast<AveragedWrapper*>(base)) base = &w->inner();
    if (auto* r = dynamic_cast<ResidualNet*>(base)) r->set_architecture(arch);
    if (auto* k = dynamic_cast<ClassifierNet*>(base)) k->set_architecture(arch);
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
}

std::unique_ptr<Model> rebind_denoiser(Model& model, ImageShape input, int power_iters) {
  json arch = model.architecture();
  if (arch.value("kind", "") != "denoiser") throw ConfigError("rebind_denoiser: not a denoiser");
  if (arch.at("config").value("op", "conv") != "conv")
    throw ConfigError("rebind_denoiser: dense operators have a fixed input size");
  arch["input"] = {input.channels, input.height, input.width};
  auto out = build_from_architecture(arch);
  auto src = model.parameters();
  auto dst = out->parameters();
  if (src.size() != dst.size()) throw ConfigError("rebind_denoiser: parameter layout mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].data.size() != dst[i].data.size())
      throw ConfigError("rebind_denoiser: parameter mismatch at " + src[i].name);
    std::copy(src[i].data.begin(), src[i].data.end(), dst[i].data.begin());
  }
  out->after_update(power_iters);
  return out;
}

}  // namespace nxn
