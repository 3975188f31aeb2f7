#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nxn/attack.hpp"
#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"
#include "nxn/net.hpp"
#include "nxn/random.hpp"
#include "nxn/train.hpp"

using namespace nxn;

namespace {

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

// Binary scores (w.x, -w.x).
LinearModel binary_linear(const Vec& w) {
  Vec m(2 * w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = w[i];
    m[w.size() + i] = -w[i];
  }
  return LinearModel(DenseOp(2, w.size(), m));
}

Vec plus(std::span<const double> a, std::span<const double> b) {
  Vec o(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = a[i] + b[i];
  return o;
}

// Toy classifier shared by the evaluation tests; trained once.
struct Trained {
  ToyClassifySet data;
  std::unique_ptr<Model> model;
};

const Trained& trained() {
  static const Trained t = [] {
    ClassifyDataConfig d;
    d.n_train = 512;
    d.n_val = 64;
    d.n_test = 64;
    d.seed = 11;
    Trained out{ToyClassifySet(d), nullptr};
    ArchitectureConfig c;
    c.stage_channels = {8, 16};
    c.blocks_per_stage = 1;
    c.classes = 4;
    Rng rng = Rng::from_counters(3, 0);
    auto m = build_classifier(c, out.data.shape(), rng);
    SgdConfig s;
    s.iters = 300;
    s.lr_min = 3e-3;
    s.lr_max = 3e-2;
    s.batch_size = 8;
    s.seed = 3;
    s.eval_every = 300;
    auto r = train_classifier(*m, s, out.data, {});
    out.model = std::move(r.best);
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("project_l2_ball examples") {
  const Vec in = {0.3, 0.4};
  CHECK(project_l2_ball(in, 1.0) == in);
  const Vec p = project_l2_ball(Vec{3.0, 4.0}, 1.0);
  CHECK(p[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.8).epsilon(1e-15));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    Vec d = rng.normal_vector(7);
    for (auto& v : d) v *= 3.0;
    const double eps = rng.uniform(0.0, 5.0);
    const Vec once = project_l2_ball(d, eps);
    CHECK(norm2(once) <= eps + 1e-12);
    CHECK(project_l2_ball(once, eps) == once);
  }
  for (double v : project_l2_ball(Vec{1.0, -2.0}, 0.0)) CHECK(v == 0.0);
}

TEST_CASE("cross_entropy examples") {
  for (std::size_t c : {2, 4, 10}) CHECK(cross_entropy(Vec(c, 0.7), 1) == doctest::Approx(std::log(c)).epsilon(1e-14));
  CHECK(cross_entropy(Vec{50.0, 0.0, 0.0}, 0) < 1e-20);
  CHECK(cross_entropy(Vec{1.0, 0.0}, 0) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(std::abs(cross_entropy(Vec{1.0, 0.0}, 0) - 0.3133) < 1e-4);
  // Max subtraction keeps huge scores finite.
  CHECK(cross_entropy(Vec{1000.0, 1001.0}, 0) == doctest::Approx(std::log1p(std::exp(-1.0)) + 1.0).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(Vec{1.0, 0.0}, 2), InvalidInput);
  Rng rng(2);
  const Vec s = rng.normal_vector(5);
  Tape t;
  const Var sv = t.leaf(s);
  const Var l = record_cross_entropy(t, sv, 3);
  CHECK(t.scalar(l) == cross_entropy(s, 3));
  // Gradient: softmax minus one-hot.
  t.backward(l);
  double z = 0.0;
  for (double v : s) z += std::exp(v);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(t.grad(sv)[i] == doctest::Approx(std::exp(s[i]) / z - (i == 3 ? 1.0 : 0.0)).epsilon(1e-12));
  CHECK(parse_attack_loss(to_string(AttackLoss::hinge)) == AttackLoss::hinge);
  CHECK_THROWS_AS(parse_attack_loss("cw"), InvalidInput);
}

TEST_CASE("attack step default") {
  AttackConfig c;
  c.eps = 0.4;
  c.n_iter = 100;
  CHECK(attack_step(c) == doctest::Approx(0.01).epsilon(1e-15));
  c.step = 0.3;
  CHECK(attack_step(c) == 0.3);
}

TEST_CASE("l2_pgd with eps = 0 is a no-op") {
  const auto m = binary_linear(Vec{1.0, -2.0, 0.5});
  AttackConfig c;
  c.eps = 0.0;
  for (double v : l2_pgd(m, Vec{0.1, 0.2, 0.3}, 0, c, 0, 0)) CHECK(v == 0.0);
  c.eps = -1.0;
  CHECK_THROWS_AS(l2_pgd(m, Vec{0.1, 0.2, 0.3}, 0, c, 0, 0), InvalidInput);
}

TEST_CASE("l2_pgd attains the closed-form worst case of a linear model") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Vec w = rng.normal_vector(6);
    const double wn = norm2(w);
    const auto m = binary_linear(w);
    const Vec x = rng.normal_vector(6);
    for (AttackLoss loss : {AttackLoss::cross_entropy, AttackLoss::hinge}) {
      AttackConfig c;
      c.eps = 0.3;
      c.n_iter = 100;
      // A full-radius step makes the angular error halve per iteration; the
      // 2.5 eps / n default only contracts it by about e^-2.5 overall.
      c.step = c.eps;
      c.loss = loss;
      c.mu = 10.0;  // keeps the hinge active
      c.seed = trial;
      const Vec d = l2_pgd(m, x, 0, c, 1, 2);
      CHECK(norm2(d) <= c.eps + 1e-12);
      const double gap = 2.0 * dot(w, x);
      const Vec s = m.forward(plus(x, d));
      double got, want;
      if (loss == AttackLoss::cross_entropy) {
        got = cross_entropy(s, 0);
        want = std::log1p(std::exp(-(gap - 2.0 * c.eps * wn)));
      } else {
        got = hinge_loss(s, 0, c.mu);
        want = c.mu - gap + 2.0 * c.eps * wn;
      }
      CHECK(std::abs(got - want) < 1e-6);
      // The optimum is -eps w / |w|.
      for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(d[i] + c.eps * w[i] / wn) < 1e-6);
    }
  }
}

TEST_CASE("l2_pgd keeps delta feasible and is deterministic per stream") {
  const auto& t = trained();
  AttackConfig c;
  c.eps = 0.5;
  c.n_iter = 20;
  c.seed = 9;
  for (std::size_t i = 0; i < 8; ++i) {
    const Vec& x = t.data.image(Split::test, i);
    const Vec d = l2_pgd(*t.model, x, t.data.label(Split::test, i), c, 0, i);
    CHECK(norm2(d) <= c.eps + 1e-12);
    CHECK(d == l2_pgd(*t.model, x, t.data.label(Split::test, i), c, 0, i));
    CHECK(d != l2_pgd(*t.model, x, t.data.label(Split::test, i), c, 1, i));
  }
}

TEST_CASE("l2_pgd keeps delta at a stationary point") {
  // Zero scores everywhere: the gradient vanishes and the start is returned.
  const LinearModel zero(DenseOp::zeros(3, 4));
  AttackConfig c;
  c.eps = 0.7;
  c.n_iter = 50;
  AttackConfig start = c;
  start.n_iter = 0;
  const Vec x = {1, 2, 3, 4};
  const Vec d = l2_pgd(zero, x, 1, c, 4, 5);
  CHECK(d == l2_pgd(zero, x, 1, start, 4, 5));
  CHECK(norm2(d) > 0.0);
  CHECK(norm2(d) <= c.eps + 1e-12);
}

TEST_CASE("curve_auc examples") {
  const Vec eps = {0.0, 0.1, 0.2, 0.4};
  CHECK(curve_auc(eps, Vec(4, 0.5)) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(curve_auc(Vec{0.0}, Vec{0.83}) == 0.83);
  // Trapezoids: 0.1 (1 + 0.8)/2 + 0.1 (0.8 + 0.6)/2 + 0.2 (0.6 + 0.2)/2 over 0.4.
  CHECK(curve_auc(eps, Vec{1.0, 0.8, 0.6, 0.2}) == doctest::Approx((0.09 + 0.07 + 0.08) / 0.4).epsilon(1e-14));
  CHECK_THROWS_AS(curve_auc(Vec{0.0, 0.0}, Vec{1.0, 0.5}), InvalidInput);
}

TEST_CASE("robust accuracy curve on the toy classifier") {
  const auto& t = trained();
  std::vector<Vec> xs;
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < t.data.count(Split::test); ++i) {
    xs.push_back(t.data.image(Split::test, i));
    ys.push_back(t.data.label(Split::test, i));
  }
  const Vec grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  AttackConfig c;
  c.n_iter = 100;
  const auto curve = robust_accuracy_curve(*t.model, xs, ys, grid, c);
  double clean = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) clean += argmax(t.model->forward(xs[i])) == ys[i];
  clean /= static_cast<double>(xs.size());
  CHECK(curve.accuracy[0] == clean);
  std::string line;
  for (double a : curve.accuracy) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    line += std::to_string(a) + " ";
  }
  MESSAGE("curve " << line << " auc " << curve.auc);
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(curve.accuracy[i] <= curve.accuracy[i - 1] + 0.01);
  CHECK(curve.accuracy.back() < curve.accuracy.front());
  CHECK(curve.auc == doctest::Approx(curve_auc(grid, curve.accuracy)).epsilon(1e-15));
  CHECK_THROWS_AS(robust_accuracy_curve(*t.model, xs, ys, Vec{0.0, 0.2, 0.1}, c), InvalidInput);
  CHECK_THROWS_AS(robust_accuracy_curve(*t.model, xs, ys, Vec{}, c), InvalidInput);
}

TEST_CASE("certified_radius examples") {
  CHECK(certified_radius(1.0, Vec{1.0, 1.0}, 0) == 0.0);
  CHECK(certified_radius(1.0, Vec{1.0, 0.0}, 0) == doctest::Approx(1.0 / std::numbers::sqrt2).epsilon(1e-15));
  CHECK(certified_radius(2.0, Vec{0.0, 1.0}, 0) == 0.0);
  CHECK_THROWS_AS(certified_radius(0.0, Vec{1.0, 0.0}, 0), InvalidInput);
}

TEST_CASE("certified radius of a binary linear model is the distance to the boundary") {
  Rng rng(5);
  const Vec w = rng.normal_vector(5);
  const auto m = binary_linear(w);
  const double l = m.lipschitz_bound();
  CHECK(l == doctest::Approx(std::numbers::sqrt2 * norm2(w)).epsilon(1e-12));
  for (int i = 0; i < 10; ++i) {
    Vec x = rng.normal_vector(5);
    const std::size_t y = dot(w, x) > 0 ? 0 : 1;
    const double rad = certified_radius(l, m.forward(x), y);
    CHECK(rad == doctest::Approx(std::abs(dot(w, x)) / norm2(w)).epsilon(1e-12));
    AttackConfig c;
    c.n_iter = 100;
    c.step = rad;
    c.eps = rad * (1 - 1e-6);
    CHECK(argmax(m.forward(plus(x, l2_pgd(m, x, y, c, 0, i)))) == y);
    c.eps = rad * 1.01;
    c.step = c.eps;
    CHECK(argmax(m.forward(plus(x, l2_pgd(m, x, y, c, 0, i)))) != y);
  }
}

TEST_CASE("no PGD success below the certified radius on the toy classifier") {
  const auto& t = trained();
  const double l = t.model->lipschitz_bound();
  REQUIRE(std::isfinite(l));
  std::size_t certified = 0, violations = 0;
  for (std::size_t i = 0; i < t.data.count(Split::test); ++i) {
    const Vec& x = t.data.image(Split::test, i);
    const std::size_t y = t.data.label(Split::test, i);
    const double rad = certified_radius(l, t.model->forward(x), y);
    if (rad <= 0.0) continue;
    ++certified;
    AttackConfig c;
    c.eps = rad * (1 - 1e-9);
    c.n_iter = 100;
    c.seed = 12;
    const Vec d = l2_pgd(*t.model, x, y, c, 0, i);
    if (argmax(t.model->forward(plus(x, d))) != y) ++violations;
  }
  MESSAGE("certified " << certified << " of " << t.data.count(Split::test));
  CHECK(certified > 0);
  CHECK(violations == 0);
}
