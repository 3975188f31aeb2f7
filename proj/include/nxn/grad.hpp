#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nxn/activation.hpp"
#include "nxn/linop.hpp"

namespace nxn {

// Handle to a node of a Tape.
struct Var {
  std::uint32_t index = kNone;
  static constexpr std::uint32_t kNone = 0xffffffffu;
  bool valid() const { return index != kNone; }
};

// Reverse-mode gradient record over a fixed vocabulary of array operations.
//
// Nodes are appended in evaluation order and each node's value is computed the
// moment it is recorded, with the same kernels the un-taped forward passes use,
// so recorded outputs are bit-identical to direct evaluation. Operators and
// external parameter storage referenced by the tape must outlive it.
class Tape {
 public:
  // Leaf owning a copy of `value`.
  Var leaf(std::span<const double> value, bool requires_grad = true);
  // Leaf viewing external storage (no copy). Values are read through the span
  // on every (re)computation.
  Var param(std::span<const double> values, bool requires_grad = true);

  // op(x). `weights` (optional) is the param leaf viewing op.weights(); it
  // receives the weight gradient.
  Var apply(const LinearOperator& op, Var x, Var weights = {});
  // op^T(y).
  Var apply_adjoint(const LinearOperator& op, Var y, Var weights = {});

  Var add(Var a, Var b);
  // a + c * b
  Var axpy(Var a, double c, Var b);
  Var scale(Var a, double c);
  // elementwise a + c
  Var add_const(Var a, double c);
  // Adds a per-channel bias; x has bias.size() contiguous channels.
  Var add_bias(Var x, Var bias);
  Var activate(Var x, Activation act);
  // elementwise max(a, c)
  Var max_const(Var a, double c);
  // a + c * s with scalar s broadcast
  Var shift(Var a, double c, Var s);

  Var dot(Var a, Var b);
  Var sum(Var a);
  Var sum_except(Var a, std::size_t skip);
  Var pick(Var a, std::size_t index);
  Var log_sum_exp(Var a);

  // 2x2 average pooling with stride 2 (entries weighted 1/4).
  Var avg_pool2(Var x, ImageShape shape);
  // Mean over all pixels of each channel.
  Var global_pool(Var x, ImageShape shape);
  // Appends zero channels: shape.channels -> channels.
  Var pad_channels(Var x, ImageShape shape, std::size_t channels);
  // Keeps the first `channels` channels.
  Var drop_channels(Var x, ImageShape shape, std::size_t channels);

  const Vec& value(Var v) const { return nodes_.at(v.index).value; }
  double scalar(Var v) const;
  // Adjoint after backward(); zeros for nodes the seed does not reach.
  const Vec& grad(Var v) const;

  // Reverse sweep. Clears earlier adjoints first.
  void backward(Var output, double seed = 1.0);
  void backward(Var output, std::span<const double> seed);

  // Recomputes every node from the current leaf and param values and returns
  // the value of `output`.
  Vec replay(Var output);

  std::size_t size() const { return nodes_.size(); }
  // Hash of which branch every activation / max_const element took. Two
  // evaluations with equal signatures lie on the same smooth piece.
  std::uint64_t branch_signature() const;

 private:
  enum class Op : std::uint8_t {
    leaf, param, apply, apply_adjoint, add, axpy, scale, add_const, add_bias, activate,
    max_const, shift, dot, sum, sum_except, pick, log_sum_exp, avg_pool2, global_pool,
    pad_channels, drop_channels
  };

  struct Node {
    Op op = Op::leaf;
    Var in0, in1;
    double c = 0.0;
    std::size_t index = 0;
    const LinearOperator* linop = nullptr;
    Activation act;
    ImageShape shape;
    std::span<const double> external;
    bool needs_grad = false;
    Vec value;
    Vec adjoint;
  };

  Var push(Node node);
  void compute(Node& node);
  void propagate(Node& node);
  Node& at(Var v);
  bool needs(Var v) const { return v.valid() && nodes_[v.index].needs_grad; }
  Vec& adjoint_of(Var v);

  std::vector<Node> nodes_;
  Vec empty_;
};

struct Recorded {
  Tape tape;
  Var output;
};

// Records a program built from Tape primitives.
Recorded forward_record(const std::function<Var(Tape&)>& program);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

// A scalar program over mutable coordinate blocks. It must create one Var per
// block, in order, reading that block's storage (leaf-by-copy is fine since the
// program is re-run for every perturbation).
using ScalarProgram = std::function<Var(Tape&, std::vector<Var>& block_vars)>;

// Compares backward() against central differences on up to `coordinates`
// randomly chosen coordinates (default 50). Coordinates whose perturbations
// change the branch signature are skipped and replaced. The error of one
// coordinate is |g - fd| / max(|g|, |fd|, abs_floor).
GradCheckReport grad_check(const ScalarProgram& program, std::span<const std::span<double>> blocks,
                           double fd_step, std::size_t coordinates = 50,
                           std::uint64_t seed = 0, double abs_floor = 1e-6);

}  // namespace nxn
