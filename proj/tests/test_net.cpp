#include <doctest.h>

#include <cmath>

#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/net.hpp"
#include "nxn/random.hpp"
#include "nxn/verify.hpp"

using namespace nxn;

namespace {

GradFlowField scalar_field(double a, double b = 0.0) {
  return GradFlowField(std::make_unique<DenseOp>(1, 1, Vec{a}), Vec{b}, Activation::leaky_relu());
}

OdeBlock scalar_block(double a, double h, double budget) {
  OdeBlock blk(scalar_field(a), h, builtin_tableau("euler"), budget);
  blk.refresh_spectral(5);
  return blk;
}

double dist(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// x -> M x as a Model, for wrapper tests.
class LinearModel final : public Model {
 public:
  explicit LinearModel(DenseOp m) : m_(std::move(m)) {}
  std::size_t input_size() const override { return m_.cols(); }
  std::size_t output_size() const override { return m_.rows(); }
  Vec forward(std::span<const double> x) const override { return m_.apply(x); }
  Var record(Tape& t, Var x, std::vector<Var>*) const override { return t.apply(m_, x); }
  std::vector<TensorRef> parameters() override { return {}; }
  std::vector<TensorRef> state() override { return {}; }
  void after_update(int) override {}
  ConstraintStats constraint_stats() const override { return {}; }
  std::vector<BlockCertificate> recertify(int) override { return {}; }
  double lipschitz_bound() const override { return spectral_norm_exact(m_); }
  json architecture() const override { return json::object(); }
  std::unique_ptr<Model> clone() const override { return std::make_unique<LinearModel>(*this); }

 private:
  DenseOp m_;
};

ArchitectureConfig dense_config(const char* tableau, std::size_t blocks, std::size_t dim) {
  ArchitectureConfig c;
  c.op = "dense";
  c.tableau = tableau;
  c.n_blocks = blocks;
  c.channels = dim;
  c.init_power_iters = 200;
  return c;
}

}  // namespace

TEST_CASE("activation parsing and properties") {
  CHECK(Activation::parse("leaky_relu").kind == ActivationKind::leaky_relu);
  CHECK(Activation::parse("relu").kind == ActivationKind::relu);
  CHECK(Activation::parse("identity").kind == ActivationKind::identity);
  CHECK_THROWS_AS(Activation::parse("tanh"), InvalidInput);
  const Activation a = Activation::leaky_relu();
  CHECK(a(2.0) == 2.0);
  CHECK(a(-2.0) == -0.02);
  CHECK(a.derivative(0.0) == 1.0);
  Rng rng(1);
  for (const Activation& act : {Activation::leaky_relu(), Activation::relu(), Activation::identity()}) {
    for (int i = 0; i < 200; ++i) {
      const double x = rng.normal(), y = rng.normal();
      // Non-decreasing and L-Lipschitz.
      CHECK((act(x) - act(y)) * (x - y) >= 0.0);
      CHECK(std::abs(act(x) - act(y)) <= act.lipschitz * std::abs(x - y) + 1e-15);
    }
  }
}

TEST_CASE("field_eval examples") {
  const auto f = scalar_field(1.0);
  CHECK(field_eval(f, Vec{1.0})[0] == -1.0);
  CHECK(field_eval(f, Vec{-1.0})[0] == doctest::Approx(0.01).epsilon(1e-15));
  CHECK_THROWS_AS(field_eval(f, Vec{1.0, 2.0}), InvalidInput);
}

TEST_CASE("field_eval is the negative gradient of the potential") {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    GradFlowField f(std::make_unique<DenseOp>(DenseOp::random_gaussian(4, 4, rng)),
                    rng.normal_vector(4), Activation::leaky_relu());
    Vec x = rng.normal_vector(4);
    const Vec g = field_eval(f, x);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 4; ++i) {
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = -(f.potential(xp) - f.potential(xm)) / (2 * h);
      CHECK(std::abs(fd - g[i]) <= 1e-6 * std::max(1.0, std::abs(g[i])));
    }
  }
}

TEST_CASE("monotonicity_nu") {
  auto f = scalar_field(1.0);
  f.spectral().sigma = 1.0;
  CHECK(monotonicity_nu(f) == 1.0);
  f.spectral().sigma = 2.0;
  CHECK(monotonicity_nu(f) == 0.25);
  f.spectral().sigma = 0.0;
  CHECK(std::isinf(monotonicity_nu(f)));

  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    auto a = std::make_unique<DenseOp>(DenseOp::random_gaussian(5, 5, rng));
    const double s = spectral_norm_exact(*a);
    GradFlowField g(std::move(a), rng.normal_vector(5), Activation::leaky_relu());
    const double nu = 1.0 / (s * s);
    for (int i = 0; i < 200; ++i) {
      const Vec x = rng.normal_vector(5), y = rng.normal_vector(5);
      const Vec fx = g.eval(x), fy = g.eval(y);
      double inner = 0, sq = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        inner += (fx[k] - fy[k]) * (x[k] - y[k]);
        sq += (fx[k] - fy[k]) * (fx[k] - fy[k]);
      }
      CHECK(inner <= -nu * sq + 1e-10);
    }
  }
}

TEST_CASE("substep_count examples") {
  CHECK(substep_count(1.0, 2.0, 1.0, 2.0) == 2);
  CHECK(substep_count(1.0, 1.0, 1.0, 2.0) == 1);
  CHECK(substep_count(0.5, 3.0, 1.0, 2.0) == 3);
  CHECK(substep_count(1.0, 0.0, 1.0, 1.0) == 1);
  CHECK(substep_count(1.0, 1.0, 1.0, 1.0) == 1);
  CHECK(substep_count(1.0, 1.5, 1.0, 1.0) == 3);
  CHECK(substep_count(scalar_block(2.0, 1.0, 2.0)) == 2);
}

TEST_CASE("block_forward examples") {
  CHECK(block_forward(scalar_block(1.0, 1.0, 2.0), Vec{1.0})[0] == 0.0);
  const auto b2 = scalar_block(2.0, 1.0, 2.0);
  CHECK(b2.substeps() == 2);
  CHECK(block_forward(b2, Vec{1.0})[0] == doctest::Approx(-0.98).epsilon(1e-15));
  Rng rng(4);
  OdeBlock b = make_ode_block(std::make_unique<DenseOp>(DenseOp::random_gaussian(6, 6, rng)),
                              builtin_tableau("rk4"), 1.0, 1.0, Activation::leaky_relu(), rng, 100);
  const Vec x = rng.normal_vector(6);
  CHECK(block_forward(b, x) == block_forward(b, Vec(x)));
}

TEST_CASE("OdeBlock rejects invalid configurations") {
  CHECK_THROWS_AS(OdeBlock(scalar_field(1.0), 0.0, builtin_tableau("euler"), 1.0), InvalidInput);
  CHECK_THROWS_AS(OdeBlock(scalar_field(1.0), 1.0, builtin_tableau("euler"), 2.5), ConfigError);
  CHECK_THROWS_AS(OdeBlock(scalar_field(1.0), 1.0, builtin_tableau("euler"), 0.0), ConfigError);
  RKTableau mid;
  mid.name = "midpoint";
  mid.stages = 1;
  mid.a = {0.5};
  mid.b = {1.0};
  mid.c = {0.5};
  CHECK_THROWS_AS(OdeBlock(scalar_field(1.0), 1.0, mid, 1.0), UnsupportedTableau);
}

TEST_CASE("expansion witness on scalar weights") {
  // Boundary: h a^2 L = 2 gives exactly the factor -1 on the positive branch.
  const auto edge = scalar_block(2.0, 0.5, 2.0);
  CHECK(edge.substeps() == 1);
  CHECK(block_forward(edge, Vec{1.0})[0] == -1.0);
  CHECK(block_forward(edge, Vec{2.0})[0] == -2.0);
  // h a^2 = 4 with substepping off: one-step factor |1 - 4| = 3.
  auto over = scalar_block(2.0, 1.0, 2.0);
  over.set_substepping(false);
  const Vec y1 = block_forward(over, Vec{1.0}), y2 = block_forward(over, Vec{2.0});
  CHECK(std::abs(y1[0] - y2[0]) == 3.0);
  over.set_substepping(true);
  const Vec z1 = block_forward(over, Vec{1.0}), z2 = block_forward(over, Vec{2.0});
  CHECK(std::abs(z1[0] - z2[0]) <= 1.0);
}

TEST_CASE("net_forward identities") {
  Rng rng(5);
  ResidualNet empty({2, 3, 3}, 4, {});
  const Vec x = rng.normal_vector(18);
  CHECK(empty.forward(x) == x);

  ArchitectureConfig c;
  c.n_blocks = 3;
  c.channels = 4;
  c.init_power_iters = 10;
  auto m = build_denoiser(c, {2, 3, 3}, rng);
  for (auto& p : m->parameters()) std::fill(p.data.begin(), p.data.end(), 0.0);
  m->after_update(1);
  CHECK(m->forward(x) == x);
  CHECK_THROWS_AS(m->forward(Vec(17)), InvalidInput);
}

TEST_CASE("ResidualNet lift and project") {
  Rng rng(6);
  ArchitectureConfig c;
  c.n_blocks = 2;
  c.channels = 5;
  c.init_power_iters = 50;
  auto m = build_denoiser(c, {2, 3, 3}, rng);
  auto* net = dynamic_cast<ResidualNet*>(m.get());
  REQUIRE(net != nullptr);
  const Vec x = rng.normal_vector(18);
  Vec lifted(45, 0.0);
  std::copy(x.begin(), x.end(), lifted.begin());
  const Vec z = net->forward_lifted(lifted);
  const Vec y = net->forward(x);
  CHECK(Vec(z.begin(), z.begin() + 18) == y);
}

TEST_CASE("random constrained nets are non-expansive") {
  Rng rng(7);
  for (const char* tab : {"euler", "heun", "rk4"}) {
    auto dense = build_denoiser(dense_config(tab, 6, 6), {6, 1, 1}, rng);
    ArchitectureConfig cc;
    cc.tableau = tab;
    cc.n_blocks = 5;
    cc.channels = 3;
    cc.init_power_iters = 200;
    auto conv = build_denoiser(cc, {1, 4, 4}, rng);
    for (Model* m : {dense.get(), conv.get()}) {
      PairSampler s;
      s.seed = 11;
      s.count = 10000;
      s.dim = m->input_size();
      const auto rep = check_nonexpansive(as_map(*m), s, 1e-9);
      CHECK(rep.violations == 0);
      CHECK(rep.max_ratio <= 1.0 + 1e-9);
      CHECK(m->lipschitz_bound() == 1.0);
    }
  }
}

TEST_CASE("averaged wrapper") {
  Rng rng(8);
  const Vec x = rng.normal_vector(4);
  AveragedWrapper id(0.3, std::make_unique<LinearModel>(DenseOp::identity(4)));
  const Vec y = averaged_forward(id, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-15));
  AveragedWrapper neg(0.5, std::make_unique<LinearModel>(DenseOp(2, 2, {-1, 0, 0, -1})));
  for (double v : averaged_forward(neg, Vec{3.0, -7.0})) CHECK(v == 0.0);
  CHECK_THROWS_AS(AveragedWrapper(0.0, std::make_unique<LinearModel>(DenseOp::identity(2))), ConfigError);
  CHECK_THROWS_AS(AveragedWrapper(1.0, std::make_unique<LinearModel>(DenseOp::identity(2))), ConfigError);

  ArchitectureConfig c = dense_config("euler", 5, 5);
  c.alpha = 0.5;
  auto m = build_denoiser(c, {5, 1, 1}, rng);
  REQUIRE(dynamic_cast<AveragedWrapper*>(m.get()) != nullptr);
  PairSampler s;
  s.count = 10000;
  s.dim = 5;
  const auto rep = check_averaged(as_map(*m), 0.5, s, 1e-9);
  CHECK(rep.violations == 0);
  // Tape and direct forward agree.
  Tape t;
  const Vec in = rng.normal_vector(5);
  CHECK(t.value(m->record(t, t.leaf(in), nullptr)) == m->forward(in));
}

TEST_CASE("per_layer_alpha and compose_alpha") {
  CHECK(per_layer_alpha(0.5, 10) == doctest::Approx(1.0 / 11).epsilon(1e-15));
  CHECK(per_layer_alpha(0.5, 1) == 0.5);
  for (double a : {0.1, 0.5, 0.9}) {
    for (std::size_t m : {1u, 2u, 5u, 17u}) {
      const std::vector<double> alphas(m, per_layer_alpha(a, m));
      CHECK(compose_alpha(alphas) <= a + 1e-12);
    }
  }
  const double half[] = {0.5, 0.5};
  CHECK(compose_alpha(half) == doctest::Approx(2.0 / 3).epsilon(1e-15));
  const double single[] = {0.37};
  CHECK(compose_alpha(single) == doctest::Approx(0.37).epsilon(1e-15));
  // min 1/alpha_i = 2, so 3 / (2 + 2).
  const double three[] = {1.0 / 3, 0.5, 0.25};
  CHECK(compose_alpha(three) == doctest::Approx(0.75).epsilon(1e-15));
  const double bad[] = {0.5, 1.0};
  CHECK_THROWS_AS(compose_alpha(bad), InvalidInput);
  CHECK_THROWS_AS(compose_alpha(std::span<const double>()), InvalidInput);
}

TEST_CASE("classifier examples") {
  Rng rng(9);
  ArchitectureConfig c;
  c.stage_channels = {4, 6};
  c.blocks_per_stage = 2;
  c.classes = 5;
  c.init_power_iters = 50;
  auto m = build_classifier(c, {1, 8, 8}, rng);
  for (auto& p : m->parameters()) std::fill(p.data.begin(), p.data.end(), 0.0);
  m->after_update(1);
  const Vec s = m->forward(rng.normal_vector(64));
  for (double v : s) CHECK(v == s[0]);
  CHECK(argmax(s) == 0);
  CHECK_THROWS_AS(m->forward(Vec(63)), InvalidInput);

  // Single pixel, identity lift, no pooling, no blocks: scores are the final layer.
  std::vector<ClassifierNet::Stage> stages(1);
  stages[0].lift = std::make_unique<Conv2dOp>(1, 1, 1, 1, 1, 1, Padding::zero, Vec{1.0});
  stages[0].pool = false;
  stages[0].in = {1, 1, 1};
  stages[0].out = {1, 1, 1};
  const DenseOp fin = DenseOp::random_gaussian(3, 1, rng);
  const Vec fb = rng.normal_vector(3);
  ClassifierNet single({1, 1, 1}, std::move(stages), fin, fb);
  const Vec x = {0.7};
  const Vec got = single.forward(x);
  const Vec lin = fin.apply(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(got[i] == lin[i] + fb[i]);
}

TEST_CASE("argmax ties go to the smallest index") {
  CHECK(argmax(Vec{1, 3, 3, 2}) == 1);
  CHECK(argmax(Vec{0, 0}) == 0);
}

TEST_CASE("pooling operators have norm at most 1") {
  const ImageShape shape{1, 4, 4};
  auto pool_matrix = [&](bool global) {
    const std::size_t rows = global ? 1 : 4;
    Vec m(rows * 16);
    for (std::size_t j = 0; j < 16; ++j) {
      Vec e(16, 0.0);
      e[j] = 1.0;
      Tape t;
      const Var x = t.leaf(e);
      const Var y = global ? t.global_pool(x, shape) : t.avg_pool2(x, shape);
      for (std::size_t i = 0; i < rows; ++i) m[i * 16 + j] = t.value(y)[i];
    }
    return DenseOp(rows, 16, m);
  };
  CHECK(spectral_norm_exact(pool_matrix(false)) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(spectral_norm_exact(pool_matrix(true)) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("classifier Lipschitz bound dominates the sampled lower bound") {
  Rng rng(10);
  ArchitectureConfig c;
  c.stage_channels = {3, 4};
  c.blocks_per_stage = 1;
  c.classes = 3;
  c.init_power_iters = 200;
  auto m = build_classifier(c, {1, 8, 8}, rng);
  const double bound = m->lipschitz_bound();
  CHECK(std::isfinite(bound));
  const double lower = lipschitz_lower_bound(as_tape_map(*m), rng.normal_vector(64), 30, 0.5, 1);
  CHECK(lower > 0.0);
  CHECK(lower <= bound);
}

TEST_CASE("baseline blocks") {
  Rng rng(11);
  const std::size_t n = 5;
  const DenseOp a = DenseOp::random_gaussian(n, n, rng);
  const Vec bias = rng.normal_vector(n);
  const Vec x = rng.normal_vector(n);

  BaselineBlock zero(a.clone(), bias, std::make_unique<DenseOp>(DenseOp::zeros(n, n)),
                     Activation::leaky_relu());
  CHECK(zero.forward(x) == x);
  CHECK(std::isinf(zero.lipschitz_bound()));

  // Tied weights with h a power of two reproduce the Euler step exactly.
  const double norm = spectral_norm_exact(a);
  auto an = scale(a, 1.0 / norm);
  for (double h : {1.0, 0.5}) {
    GradFlowField f(an->clone(), bias, Activation::leaky_relu());
    OdeBlock ode(f, h, builtin_tableau("euler"), 2.0);
    ode.refresh_spectral(200);
    REQUIRE(ode.substeps() == 1);
    BaselineBlock tied(an->clone(), bias, scale(*an, -h), Activation::leaky_relu());
    for (int i = 0; i < 20; ++i) {
      const Vec z = rng.normal_vector(n);
      CHECK(tied.forward(z) == ode.forward(z));
    }
  }

  // Large unconstrained weights expand some pair.
  auto big = scale(a, 3.0);
  BaselineBlock wild(big->clone(), bias, scale(*big, 3.0), Activation::leaky_relu());
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const Vec p = rng.normal_vector(n), q = rng.normal_vector(n);
    worst = std::max(worst, dist(wild.forward(p), wild.forward(q)) / dist(p, q));
  }
  CHECK(worst > 1.0);
}

TEST_CASE("baseline denoiser with tied init equals the Euler denoiser") {
  ArchitectureConfig c;
  c.n_blocks = 4;
  c.channels = 3;
  Rng r1(12), r2(12);
  auto ne = build_denoiser(c, {1, 4, 4}, r1);
  c.family = "baseline";
  auto bl = build_denoiser(c, {1, 4, 4}, r2);
  // The tie holds whenever every ODE block runs a single substep.
  CHECK(ne->constraint_stats().total_substeps == c.n_blocks);
  Rng rng(13);
  for (int i = 0; i < 10; ++i) {
    const Vec x = rng.normal_vector(16);
    CHECK(bl->forward(x) == ne->forward(x));
  }
  CHECK(std::isinf(bl->lipschitz_bound()));
}

TEST_CASE("records agree with forward for every model kind") {
  Rng rng(14);
  std::vector<std::unique_ptr<Model>> models;
  for (const char* fam : {"nonexp", "baseline"}) {
    ArchitectureConfig c;
    c.family = fam;
    c.n_blocks = 2;
    c.channels = 3;
    c.tableau = "heun";
    c.init_power_iters = 20;
    models.push_back(build_denoiser(c, {1, 4, 4}, rng));
    c.alpha = 0.25;
    models.push_back(build_denoiser(c, {1, 4, 4}, rng));
    c.alpha = 0.0;
    c.stage_channels = {2, 3};
    c.blocks_per_stage = 1;
    models.push_back(build_classifier(c, {1, 4, 4}, rng));
  }
  for (auto& m : models) {
    const Vec x = rng.normal_vector(16);
    Tape t;
    std::vector<Var> pv;
    const Var out = m->record(t, t.leaf(x), &pv);
    CHECK(t.value(out) == m->forward(x));
    CHECK(pv.size() == m->parameters().size());
    auto copy = m->clone();
    CHECK(copy->forward(x) == m->forward(x));
  }
}

TEST_CASE("architecture config validation") {
  ArchitectureConfig c;
  c.contraction_budget = 2.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.tableau = "nope";
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.family = "resnet";
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.alpha = 1.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  json j = ArchitectureConfig{};
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<ArchitectureConfig>(), ConfigError);
  const json back = json(ArchitectureConfig{});
  CHECK(back.get<ArchitectureConfig>().channels == 16);
}
