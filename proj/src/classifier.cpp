#include <cmath>
#include <limits>

#include "nxn/errors.hpp"
#include "nxn/kernels.hpp"
#include "nxn/net.hpp"

namespace nxn {

namespace {

DenseOp channel_matrix(const Conv2dOp& lift) {
  const auto k = lift.kernel();
  return DenseOp(lift.out_channels(), lift.in_channels(), std::vector<double>(k.begin(), k.end()));
}

}  // namespace

ClassifierNet::ClassifierNet(ImageShape input, std::vector<Stage> stages, DenseOp final_linear,
                             Vec final_bias)
    : input_(input),
      stages_(std::move(stages)),
      final_(std::move(final_linear)),
      final_bias_(std::move(final_bias)) {
  ImageShape cur = input_;
  for (const auto& s : stages_) {
    if (!s.lift || s.lift->kernel_height() != 1 || s.lift->kernel_width() != 1)
      throw InvalidInput("ClassifierNet: lifts must be 1x1 convolutions");
    if (!(s.in == cur)) throw InvalidInput("ClassifierNet: stage input shape mismatch");
    require_size(s.lift->domain_dim(), cur.size(), "ClassifierNet lift domain");
    const ImageShape lifted{s.lift->out_channels(), cur.height, cur.width};
    const ImageShape pooled =
        s.pool ? ImageShape{lifted.channels, lifted.height / 2, lifted.width / 2} : lifted;
    if (s.pool && (lifted.height % 2 != 0 || lifted.width % 2 != 0))
      throw InvalidInput("ClassifierNet: pooling needs even spatial size");
    if (!(s.out == pooled)) throw InvalidInput("ClassifierNet: stage output shape mismatch");
    for (const auto& b : s.blocks) require_size(b->dim(), pooled.size(), "ClassifierNet block");
    cur = pooled;
  }
  require_size(final_.cols(), cur.channels, "ClassifierNet final layer");
  require_size(final_bias_.size(), final_.rows(), "ClassifierNet final bias");
}

ClassifierNet::ClassifierNet(const ClassifierNet& o)
    : input_(o.input_), final_(o.final_), final_bias_(o.final_bias_), arch_(o.arch_) {
  for (const auto& s : o.stages_) {
    Stage c;
    c.lift = std::make_unique<Conv2dOp>(*s.lift);
    c.pool = s.pool;
    c.in = s.in;
    c.out = s.out;
    for (const auto& b : s.blocks) c.blocks.push_back(b->clone());
    stages_.push_back(std::move(c));
  }
}

Vec ClassifierNet::forward(std::span<const double> x) const {
  require_size(x.size(), input_.size(), "classifier_forward input");
  Vec cur(x.begin(), x.end());
  ImageShape shape = input_;
  for (const auto& s : stages_) {
    Vec z(s.lift->codomain_dim());
    s.lift->apply_into(cur, z);
    const ImageShape lifted{s.lift->out_channels(), shape.height, shape.width};
    if (s.pool) {
      cur.assign(s.out.size(), 0.0);
      kernels::avg_pool2(z, lifted, cur);
    } else {
      cur = std::move(z);
    }
    for (const auto& b : s.blocks) cur = b->forward(cur);
    shape = s.out;
  }
  Vec pooled(shape.channels);
  kernels::global_pool(cur, shape, pooled);
  Vec scores(final_.rows());
  final_.apply_into(pooled, scores);
  kernels::add_bias(scores, final_bias_, scores);
  return scores;
}

Var ClassifierNet::record(Tape& t, Var x, std::vector<Var>* param_vars) const {
  const auto refs = const_cast<ClassifierNet*>(this)->parameters();
  std::vector<Var> vars;
  for (const auto& r : refs) vars.push_back(t.param(r.data, param_vars != nullptr));
  if (param_vars) param_vars->insert(param_vars->end(), vars.begin(), vars.end());

  std::size_t next = 0;
  Var cur = x;
  ImageShape shape = input_;
  for (const auto& s : stages_) {
    cur = t.apply(*s.lift, cur, vars[next++]);
    if (s.pool) cur = t.avg_pool2(cur, {s.lift->out_channels(), shape.height, shape.width});
    for (const auto& b : s.blocks) {
      cur = b->record(t, cur, vars.data() + next);
      next += b->num_params();
    }
    shape = s.out;
  }
  cur = t.global_pool(cur, shape);
  cur = t.apply(final_, cur, vars[next]);
  return t.add_bias(cur, vars[next + 1]);
}

std::vector<TensorRef> ClassifierNet::parameters() {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    Stage& s = stages_[i];
    const std::string p = "stage" + std::to_string(i) + ".";
    out.push_back({p + "lift", s.lift->weight_shape(), s.lift->weights()});
    for (std::size_t j = 0; j < s.blocks.size(); ++j)
      s.blocks[j]->parameters(p + "block" + std::to_string(j) + ".", out);
  }
  out.push_back({"final.W", final_.weight_shape(), final_.weights()});
  out.push_back({"final.b", {final_bias_.size()}, final_bias_});
  return out;
}

std::vector<TensorRef> ClassifierNet::state() {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    Stage& s = stages_[i];
    const std::string p = "stage" + std::to_string(i) + ".";
    out.push_back({p + "lift", s.lift->weight_shape(), s.lift->weights()});
    for (std::size_t j = 0; j < s.blocks.size(); ++j)
      s.blocks[j]->state(p + "block" + std::to_string(j) + ".", out);
  }
  out.push_back({"final.W", final_.weight_shape(), final_.weights()});
  out.push_back({"final.b", {final_bias_.size()}, final_bias_});
  return out;
}

void ClassifierNet::after_update(int power_iters) {
  for (auto& s : stages_)
    for (auto& b : s.blocks) b->refresh_spectral(power_iters);
}

ConstraintStats ClassifierNet::constraint_stats() const {
  ConstraintStats st;
  for (const auto& s : stages_)
    for (const auto& b : s.blocks) {
      const BlockStats bs = b->stats();
      st.max_block_product = std::max(st.max_block_product, bs.product);
      st.total_substeps += bs.substeps;
    }
  return st;
}

std::vector<BlockCertificate> ClassifierNet::recertify(int power_iters) {
  std::vector<BlockCertificate> out;
  std::size_t index = 0;
  for (auto& s : stages_)
    for (auto& b : s.blocks) {
      if (auto* ode = dynamic_cast<OdeBlock*>(b.get())) {
        out.push_back(ode->recertify(power_iters));
        out.back().block = index;
      }
      ++index;
    }
  return out;
}

double ClassifierNet::lipschitz_bound() const {
  double l = spectral_norm_exact(final_);
  ImageShape shape = input_;
  for (const auto& s : stages_) {
    l *= spectral_norm_exact(channel_matrix(*s.lift));
    // The mean over a 2x2 window has norm 1/2.
    if (s.pool) l *= 0.5;
    for (const auto& b : s.blocks) l *= b->lipschitz_bound();
    shape = s.out;
  }
  // The per-channel mean over P pixels has norm 1/sqrt(P).
  return l / std::sqrt(static_cast<double>(shape.pixels()));
}

}  // namespace nxn
