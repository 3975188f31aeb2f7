#include "nxn/grad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "nxn/errors.hpp"
#include "nxn/kernels.hpp"
#include "nxn/random.hpp"

namespace nxn {

namespace {

void accumulate(Vec& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tape::Node& Tape::at(Var v) {
  if (!v.valid() || v.index >= nodes_.size()) throw InvalidInput("Tape: invalid variable");
  return nodes_[v.index];
}

Var Tape::push(Node node) {
  if (node.op != Op::leaf && node.op != Op::param) {
    node.needs_grad = needs(node.in0) || needs(node.in1);
    compute(node);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(std::span<const double> value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value.assign(value.begin(), value.end());
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::param(std::span<const double> values, bool requires_grad) {
  Node n;
  n.op = Op::param;
  n.external = values;
  n.value.assign(values.begin(), values.end());
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::apply(const LinearOperator& op, Var x, Var weights) {
  Node n;
  n.op = Op::apply;
  n.linop = &op;
  n.in0 = x;
  n.in1 = weights;
  require_size(at(x).value.size(), op.domain_dim(), "Tape::apply");
  if (weights.valid()) require_size(at(weights).value.size(), op.weights().size(), "Tape::apply weights");
  return push(std::move(n));
}

Var Tape::apply_adjoint(const LinearOperator& op, Var y, Var weights) {
  Node n;
  n.op = Op::apply_adjoint;
  n.linop = &op;
  n.in0 = y;
  n.in1 = weights;
  require_size(at(y).value.size(), op.codomain_dim(), "Tape::apply_adjoint");
  if (weights.valid())
    require_size(at(weights).value.size(), op.weights().size(), "Tape::apply_adjoint weights");
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  require_size(at(b).value.size(), at(a).value.size(), "Tape::add");
  Node n;
  n.op = Op::add;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

Var Tape::axpy(Var a, double c, Var b) {
  require_size(at(b).value.size(), at(a).value.size(), "Tape::axpy");
  Node n;
  n.op = Op::axpy;
  n.in0 = a;
  n.in1 = b;
  n.c = c;
  return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
  at(a);
  Node n;
  n.op = Op::scale;
  n.in0 = a;
  n.c = c;
  return push(std::move(n));
}

Var Tape::add_const(Var a, double c) {
  at(a);
  Node n;
  n.op = Op::add_const;
  n.in0 = a;
  n.c = c;
  return push(std::move(n));
}

Var Tape::add_bias(Var x, Var bias) {
  const std::size_t channels = at(bias).value.size();
  if (channels == 0 || at(x).value.size() % channels != 0)
    throw InvalidInput("Tape::add_bias: bias does not divide the input into channels");
  Node n;
  n.op = Op::add_bias;
  n.in0 = x;
  n.in1 = bias;
  return push(std::move(n));
}

Var Tape::activate(Var x, Activation act) {
  at(x);
  Node n;
  n.op = Op::activate;
  n.in0 = x;
  n.act = act;
  return push(std::move(n));
}

Var Tape::max_const(Var a, double c) {
  at(a);
  Node n;
  n.op = Op::max_const;
  n.in0 = a;
  n.c = c;
  return push(std::move(n));
}

Var Tape::shift(Var a, double c, Var s) {
  at(a);
  require_size(at(s).value.size(), 1, "Tape::shift scalar");
  Node n;
  n.op = Op::shift;
  n.in0 = a;
  n.in1 = s;
  n.c = c;
  return push(std::move(n));
}

Var Tape::dot(Var a, Var b) {
  require_size(at(b).value.size(), at(a).value.size(), "Tape::dot");
  Node n;
  n.op = Op::dot;
  n.in0 = a;
  n.in1 = b;
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  at(a);
  Node n;
  n.op = Op::sum;
  n.in0 = a;
  return push(std::move(n));
}

Var Tape::sum_except(Var a, std::size_t skip) {
  if (skip >= at(a).value.size()) throw InvalidInput("Tape::sum_except: index out of range");
  Node n;
  n.op = Op::sum_except;
  n.in0 = a;
  n.index = skip;
  return push(std::move(n));
}

Var Tape::pick(Var a, std::size_t index) {
  if (index >= at(a).value.size()) throw InvalidInput("Tape::pick: index out of range");
  Node n;
  n.op = Op::pick;
  n.in0 = a;
  n.index = index;
  return push(std::move(n));
}

Var Tape::log_sum_exp(Var a) {
  if (at(a).value.empty()) throw InvalidInput("Tape::log_sum_exp: empty input");
  Node n;
  n.op = Op::log_sum_exp;
  n.in0 = a;
  return push(std::move(n));
}

Var Tape::avg_pool2(Var x, ImageShape shape) {
  require_size(at(x).value.size(), shape.size(), "Tape::avg_pool2");
  if (shape.height % 2 != 0 || shape.width % 2 != 0)
    throw InvalidInput("Tape::avg_pool2: spatial size must be even");
  Node n;
  n.op = Op::avg_pool2;
  n.in0 = x;
  n.shape = shape;
  return push(std::move(n));
}

Var Tape::global_pool(Var x, ImageShape shape) {
  require_size(at(x).value.size(), shape.size(), "Tape::global_pool");
  Node n;
  n.op = Op::global_pool;
  n.in0 = x;
  n.shape = shape;
  return push(std::move(n));
}

Var Tape::pad_channels(Var x, ImageShape shape, std::size_t channels) {
  require_size(at(x).value.size(), shape.size(), "Tape::pad_channels");
  if (channels < shape.channels) throw InvalidInput("Tape::pad_channels: cannot shrink");
  Node n;
  n.op = Op::pad_channels;
  n.in0 = x;
  n.shape = shape;
  n.index = channels;
  return push(std::move(n));
}

Var Tape::drop_channels(Var x, ImageShape shape, std::size_t channels) {
  require_size(at(x).value.size(), shape.size(), "Tape::drop_channels");
  if (channels > shape.channels) throw InvalidInput("Tape::drop_channels: cannot grow");
  Node n;
  n.op = Op::drop_channels;
  n.in0 = x;
  n.shape = shape;
  n.index = channels;
  return push(std::move(n));
}

double Tape::scalar(Var v) const {
  const Vec& val = nodes_.at(v.index).value;
  if (val.size() != 1) throw InvalidInput("Tape::scalar: variable is not a scalar");
  return val[0];
}

const Vec& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.index);
  return n.adjoint.empty() ? empty_ : n.adjoint;
}

void Tape::compute(Node& n) {
  auto val = [this](Var v) -> const Vec& { return nodes_[v.index].value; };
  switch (n.op) {
    case Op::leaf:
      break;
    case Op::param:
      n.value.assign(n.external.begin(), n.external.end());
      break;
    case Op::apply:
      n.value.resize(n.linop->codomain_dim());
      n.linop->apply_into(val(n.in0), n.value);
      break;
    case Op::apply_adjoint:
      n.value.resize(n.linop->domain_dim());
      n.linop->apply_adjoint_into(val(n.in0), n.value);
      break;
    case Op::add: {
      const Vec& a = val(n.in0);
      const Vec& b = val(n.in1);
      n.value.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + b[i];
      break;
    }
    case Op::axpy:
      n.value.resize(val(n.in0).size());
      kernels::axpy(val(n.in0), n.c, val(n.in1), n.value);
      break;
    case Op::scale: {
      const Vec& a = val(n.in0);
      n.value.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = n.c * a[i];
      break;
    }
    case Op::add_const: {
      const Vec& a = val(n.in0);
      n.value.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + n.c;
      break;
    }
    case Op::add_bias:
      n.value.resize(val(n.in0).size());
      kernels::add_bias(val(n.in0), val(n.in1), n.value);
      break;
    case Op::activate:
      n.value.resize(val(n.in0).size());
      kernels::activate(n.act, val(n.in0), n.value);
      break;
    case Op::max_const: {
      const Vec& a = val(n.in0);
      n.value.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] >= n.c ? a[i] : n.c;
      break;
    }
    case Op::shift: {
      const Vec& a = val(n.in0);
      const double s = val(n.in1)[0];
      n.value.resize(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] + n.c * s;
      break;
    }
    case Op::dot: {
      const Vec& a = val(n.in0);
      const Vec& b = val(n.in1);
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      n.value.assign(1, s);
      break;
    }
    case Op::sum: {
      double s = 0.0;
      for (double e : val(n.in0)) s += e;
      n.value.assign(1, s);
      break;
    }
    case Op::sum_except: {
      const Vec& a = val(n.in0);
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (i != n.index) s += a[i];
      n.value.assign(1, s);
      break;
    }
    case Op::pick:
      n.value.assign(1, val(n.in0)[n.index]);
      break;
    case Op::log_sum_exp: {
      const Vec& a = val(n.in0);
      const double m = *std::max_element(a.begin(), a.end());
      double s = 0.0;
      for (double e : a) s += std::exp(e - m);
      n.value.assign(1, m + std::log(s));
      break;
    }
    case Op::avg_pool2:
      n.value.resize(n.shape.channels * (n.shape.height / 2) * (n.shape.width / 2));
      kernels::avg_pool2(val(n.in0), n.shape, n.value);
      break;
    case Op::global_pool:
      n.value.resize(n.shape.channels);
      kernels::global_pool(val(n.in0), n.shape, n.value);
      break;
    case Op::pad_channels: {
      const Vec& a = val(n.in0);
      n.value.assign(n.index * n.shape.pixels(), 0.0);
      std::copy(a.begin(), a.end(), n.value.begin());
      break;
    }
    case Op::drop_channels: {
      const Vec& a = val(n.in0);
      const std::size_t keep = n.index * n.shape.pixels();
      n.value.assign(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(keep));
      break;
    }
  }
}

Vec& Tape::adjoint_of(Var v) {
  Node& n = nodes_[v.index];
  if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
  return n.adjoint;
}

void Tape::propagate(Node& n) {
  const Vec& g = n.adjoint;
  auto val = [this](Var v) -> const Vec& { return nodes_[v.index].value; };
  switch (n.op) {
    case Op::leaf:
    case Op::param:
      break;
    case Op::apply:
      if (needs(n.in0)) {
        Vec tmp(n.linop->domain_dim());
        n.linop->apply_adjoint_into(g, tmp);
        accumulate(adjoint_of(n.in0), tmp);
      }
      if (needs(n.in1)) n.linop->accumulate_weight_gradient(val(n.in0), g, adjoint_of(n.in1));
      break;
    case Op::apply_adjoint:
      if (needs(n.in0)) {
        Vec tmp(n.linop->codomain_dim());
        n.linop->apply_into(g, tmp);
        accumulate(adjoint_of(n.in0), tmp);
      }
      // <g, A^T y> = <A g, y>
      if (needs(n.in1)) n.linop->accumulate_weight_gradient(g, val(n.in0), adjoint_of(n.in1));
      break;
    case Op::add:
      if (needs(n.in0)) accumulate(adjoint_of(n.in0), g);
      if (needs(n.in1)) accumulate(adjoint_of(n.in1), g);
      break;
    case Op::axpy:
      if (needs(n.in0)) accumulate(adjoint_of(n.in0), g);
      if (needs(n.in1)) {
        Vec& b = adjoint_of(n.in1);
        for (std::size_t i = 0; i < g.size(); ++i) b[i] += n.c * g[i];
      }
      break;
    case Op::scale:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) a[i] += n.c * g[i];
      }
      break;
    case Op::add_const:
      if (needs(n.in0)) accumulate(adjoint_of(n.in0), g);
      break;
    case Op::add_bias:
      if (needs(n.in0)) accumulate(adjoint_of(n.in0), g);
      if (needs(n.in1)) {
        Vec& b = adjoint_of(n.in1);
        const std::size_t per = g.size() / b.size();
        for (std::size_t ch = 0; ch < b.size(); ++ch) {
          double s = 0.0;
          for (std::size_t p = 0; p < per; ++p) s += g[ch * per + p];
          b[ch] += s;
        }
      }
      break;
    case Op::activate:
      if (needs(n.in0)) {
        const Vec& x = val(n.in0);
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i] * n.act.derivative(x[i]);
      }
      break;
    case Op::max_const:
      if (needs(n.in0)) {
        const Vec& x = val(n.in0);
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] >= n.c) a[i] += g[i];
      }
      break;
    case Op::shift:
      if (needs(n.in0)) accumulate(adjoint_of(n.in0), g);
      if (needs(n.in1)) {
        double s = 0.0;
        for (double e : g) s += e;
        adjoint_of(n.in1)[0] += n.c * s;
      }
      break;
    case Op::dot: {
      const double s = g[0];
      if (needs(n.in0)) {
        const Vec& b = val(n.in1);
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < b.size(); ++i) a[i] += s * b[i];
      }
      if (needs(n.in1)) {
        const Vec& a = val(n.in0);
        Vec& b = adjoint_of(n.in1);
        for (std::size_t i = 0; i < a.size(); ++i) b[i] += s * a[i];
      }
      break;
    }
    case Op::sum:
      if (needs(n.in0)) {
        for (auto& e : adjoint_of(n.in0)) e += g[0];
      }
      break;
    case Op::sum_except:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < a.size(); ++i)
          if (i != n.index) a[i] += g[0];
      }
      break;
    case Op::pick:
      if (needs(n.in0)) adjoint_of(n.in0)[n.index] += g[0];
      break;
    case Op::log_sum_exp:
      if (needs(n.in0)) {
        const Vec& x = val(n.in0);
        const double lse = n.value[0];
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < x.size(); ++i) a[i] += g[0] * std::exp(x[i] - lse);
      }
      break;
    case Op::avg_pool2:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        const ImageShape& s = n.shape;
        const std::size_t oh = s.height / 2, ow = s.width / 2;
        for (std::size_t c = 0; c < s.channels; ++c)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
              const double q = 0.25 * g[c * oh * ow + y * ow + x];
              const std::size_t base = c * s.pixels() + 2 * y * s.width + 2 * x;
              a[base] += q;
              a[base + 1] += q;
              a[base + s.width] += q;
              a[base + s.width + 1] += q;
            }
      }
      break;
    case Op::global_pool:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        const std::size_t pix = n.shape.pixels();
        for (std::size_t c = 0; c < n.shape.channels; ++c) {
          const double q = g[c] / static_cast<double>(pix);
          for (std::size_t p = 0; p < pix; ++p) a[c * pix + p] += q;
        }
      }
      break;
    case Op::pad_channels:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
      }
      break;
    case Op::drop_channels:
      if (needs(n.in0)) {
        Vec& a = adjoint_of(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i];
      }
      break;
  }
}

void Tape::backward(Var output, double seed) {
  const double s[1] = {seed};
  if (at(output).value.size() == 1) {
    backward(output, std::span<const double>(s, 1));
  } else {
    throw InvalidInput("Tape::backward: scalar seed for a non-scalar output");
  }
}

void Tape::backward(Var output, std::span<const double> seed) {
  require_size(seed.size(), at(output).value.size(), "Tape::backward seed");
  for (auto& n : nodes_) n.adjoint.clear();
  adjoint_of(output).assign(seed.begin(), seed.end());
  for (std::size_t i = output.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.adjoint.empty() || !n.needs_grad) continue;
    propagate(n);
  }
}

Vec Tape::replay(Var output) {
  at(output);
  for (auto& n : nodes_) compute(n);
  return nodes_[output.index].value;
}

std::uint64_t Tape::branch_signature() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t bit) {
    h ^= bit;
    h *= 0x100000001b3ULL;
  };
  for (const auto& n : nodes_) {
    if (n.op == Op::activate) {
      for (double x : nodes_[n.in0.index].value) mix(x >= 0.0 ? 1 : 2);
    } else if (n.op == Op::max_const) {
      for (double x : nodes_[n.in0.index].value) mix(x >= n.c ? 3 : 4);
    } else if (n.op == Op::log_sum_exp) {
      // The max-subtraction is smooth; nothing to record.
    }
  }
  return h;
}

Recorded forward_record(const std::function<Var(Tape&)>& program) {
  Recorded r;
  r.output = program(r.tape);
  return r;
}

GradCheckReport grad_check(const ScalarProgram& program, std::span<const std::span<double>> blocks,
                           double fd_step, std::size_t coordinates, std::uint64_t seed,
                           double abs_floor) {
  if (!(fd_step > 0.0)) throw InvalidInput("grad_check: fd_step must be positive");

  Tape base;
  std::vector<Var> vars;
  const Var out = program(base, vars);
  require_size(vars.size(), blocks.size(), "grad_check block variables");
  const std::uint64_t base_signature = base.branch_signature();
  base.backward(out);
  std::vector<Vec> grads;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Vec g = base.grad(vars[b]);
    if (g.empty()) g.assign(blocks[b].size(), 0.0);
    require_size(g.size(), blocks[b].size(), "grad_check block size");
    grads.push_back(std::move(g));
  }

  auto evaluate = [&](std::uint64_t& signature) {
    Tape t;
    std::vector<Var> v;
    const Var o = program(t, v);
    signature = t.branch_signature();
    return t.scalar(o);
  };

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (std::size_t i = 0; i < blocks[b].size(); ++i) candidates.emplace_back(b, i);
  Rng rng(seed);
  for (std::size_t i = candidates.size(); i > 1; --i)
    std::swap(candidates[i - 1], candidates[rng.index(i)]);

  GradCheckReport rep;
  for (const auto& [b, i] : candidates) {
    if (rep.checked >= coordinates) break;
    double& coord = blocks[b][i];
    const double saved = coord;
    std::uint64_t sig_plus = 0, sig_minus = 0;
    coord = saved + fd_step;
    const double f_plus = evaluate(sig_plus);
    coord = saved - fd_step;
    const double f_minus = evaluate(sig_minus);
    coord = saved;
    if (sig_plus != base_signature || sig_minus != base_signature) {
      ++rep.skipped_kinks;
      continue;
    }
    const double fd = (f_plus - f_minus) / (2.0 * fd_step);
    const double g = grads[b][i];
    const double denom = std::max({std::abs(g), std::abs(fd), abs_floor});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(g - fd) / denom);
    ++rep.checked;
  }
  return rep;
}

}  // namespace nxn
