#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mlbseg/model.hpp"
#include "mlbseg/rng.hpp"
#include "mlbseg/teacher.hpp"

using namespace mlbseg;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
  Tensor t = Tensor::zeros({1, h, w});
  for (auto& e : t.v) e = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("teacher: ema matches its closed form", "[teacher]") {
  Rng rng(51);
  ParamVector q(40), p(40);
  for (auto& e : q) e = rng.normal(0.0, 1.0);
  for (auto& e : p) e = rng.normal(0.0, 1.0);

  double d = 0.99;
  int k = 10;
  ParamVector t = q;
  for (int i = 0; i < k; ++i) ema_update(t, p, d);
  double dk = std::pow(d, k);
  for (size_t i = 0; i < t.size(); ++i) REQUIRE(std::abs(t[i] - (dk * q[i] + (1 - dk) * p[i])) <= 1e-12);

  // one step shrinks the gap by exactly the decay factor
  ParamVector one = q;
  ema_update(one, p, d);
  for (size_t i = 0; i < one.size(); ++i) REQUIRE(std::abs(one[i] - p[i] - d * (q[i] - p[i])) <= 1e-15);

  REQUIRE_THROWS_AS(ema_update(t, p, 1.0), Error);
  REQUIRE_THROWS_AS(ema_update(t, p, -0.1), Error);
  ParamVector shorter(39);
  REQUIRE_THROWS_AS(ema_update(t, shorter, d), Error);
}

TEST_CASE("teacher: TeacherState tracks the student", "[teacher]") {
  Rng rng(52);
  SegModel student = SegModel::init({1, 2}, rng);
  SegModel drifted = SegModel::init({1, 2}, rng);
  auto ts = TeacherState<SegModel>::init(drifted, 0.9);
  ts.update(student);
  ParamVector q = drifted.flatten(), p = student.flatten(), t = ts.model.flatten();
  for (size_t i = 0; i < t.size(); ++i) REQUIRE(std::abs(t[i] - (0.9 * q[i] + 0.1 * p[i])) <= 1e-15);
  REQUIRE_THROWS_AS(TeacherState<SegModel>::init(student, 1.0), Error);
}

TEST_CASE("teacher: zero-strength perturbation is the identity and draws nothing", "[teacher]") {
  Rng rng(53);
  Tensor x = random_image(6, 6, rng);
  std::string before = rng.save_state();
  Tensor out = perturb_input(x, 0.0, 3.0, 2.0, rng);
  REQUIRE(out.v == x.v);
  REQUIRE(rng.save_state() == before);
  REQUIRE_THROWS_AS(perturb_input(x, -0.1, 0.0, 1.0, rng), Error);
  REQUIRE_THROWS_AS(perturb_input(x, 0.1, 0.0, -1.0, rng), Error);
}

TEST_CASE("teacher: zero-spread perturbation shifts by gamma times mu", "[teacher]") {
  Rng rng(58);
  Tensor x = random_image(4, 4, rng);
  double gamma = 0.3, mu = 0.7;
  Tensor out = perturb_input(x, gamma, mu, 0.0, rng);
  for (size_t i = 0; i < x.v.size(); ++i) REQUIRE(out.v[i] == x.v[i] + gamma * mu);
}

TEST_CASE("teacher: matching models and clean input give zero loss and zero gradient", "[teacher]") {
  Rng rng(59);
  SegModel student = SegModel::init({1, 2}, rng);
  SegModel teacher = student;
  Tensor x = random_image(8, 8, rng);

  Rng noise(81);
  TapeD t;
  SegModel::Bound b = student.bind(t);
  ValueId loss = st_consistency_loss(t, student, b, teacher, t.constant(x), 0.0, 0.0, 1.0, noise);
  REQUIRE(t.val(loss).v[0] == 0.0);
  for (double g : t.reverse_grad(loss)) REQUIRE(g == 0.0);
}

TEST_CASE("teacher: updating with an identical student is a fixed point", "[teacher]") {
  Rng rng(60);
  SegModel m = SegModel::init({1, 2}, rng);
  auto ts = TeacherState<SegModel>::init(m, 0.99);
  ts.update(m);
  ParamVector before = m.flatten(), after = ts.model.flatten();
  for (size_t i = 0; i < before.size(); ++i)
    REQUIRE(std::abs(after[i] - before[i]) <= 1e-15 * (1.0 + std::abs(before[i])));
}

TEST_CASE("teacher: perturbation statistics match gamma, mu, sigma", "[teacher]") {
  Rng rng(54);
  double gamma = 0.25, mu = 0.5, sigma = 2.0;
  Tensor x = Tensor::zeros({1000, 1000});
  Tensor out = perturb_input(x, gamma, mu, sigma, rng);
  double n = static_cast<double>(out.numel());
  double mean = 0;
  for (double e : out.v) mean += e;
  mean /= n;
  double var = 0;
  for (double e : out.v) var += (e - mean) * (e - mean);
  var /= n - 1;
  REQUIRE(std::abs(mean - gamma * mu) <= 2e-3);
  REQUIRE(std::abs(var - gamma * gamma * sigma * sigma) <= 2e-3);
}

TEST_CASE("teacher: consistency loss matches a replayed-noise oracle", "[teacher]") {
  Rng init_rng(55);
  SegModel student = SegModel::init({2, 2}, init_rng);
  SegModel teacher = SegModel::init({2, 2}, init_rng);
  Tensor x = random_image(8, 8, init_rng);
  double gamma = 0.1, mu = 0.0, sigma = 1.0;

  Rng noise(77);
  TapeD t;
  SegModel::Bound b = student.bind(t);
  double got = t.val(st_consistency_loss(t, student, b, teacher, t.constant(x), gamma, mu, sigma, noise)).v[0];

  Rng replay(77);
  Tensor xt = perturb_input(x, gamma, mu, sigma, replay);
  Tensor pt = softmax_chw(teacher.logits(xt));
  Tensor ps = softmax_chw(student.logits(x));
  double want = 0;
  for (int i = 0; i < ps.numel(); ++i) {
    double d = ps.v[static_cast<size_t>(i)] - pt.v[static_cast<size_t>(i)];
    want += d * d;
  }
  want /= 64.0;
  REQUIRE(got >= 0.0);
  REQUIRE(std::abs(got - want) <= 1e-10 * (1.0 + std::abs(want)));
}

TEST_CASE("teacher: constant-field loss has a closed form", "[teacher]") {
  Rng rng(56);
  SegModel student = SegModel::init({1, 2}, rng);
  for (Tensor& p : student.params) std::fill(p.v.begin(), p.v.end(), 0.0);
  SegModel teacher = student;
  double c = 0.8;
  teacher.params[15].v = {c, -c};

  Rng noise(78);
  TapeD t;
  SegModel::Bound b = student.bind(t);
  Tensor x = random_image(8, 8, rng);
  double got = t.val(st_consistency_loss(t, student, b, teacher, t.constant(x), 0.5, 0.0, 1.0, noise)).v[0];

  // student probs are (1/2, 1/2); teacher probs are (sig(2c), 1 - sig(2c))
  // at every pixel no matter what noise hit the input.
  double sig = 1.0 / (1.0 + std::exp(-2.0 * c));
  double want = 2.0 * (sig - 0.5) * (sig - 0.5);
  REQUIRE(std::abs(got - want) <= 1e-12);
}

TEST_CASE("teacher: gradients reach only the student", "[teacher]") {
  Rng rng(57);
  SegModel student = SegModel::init({1, 2}, rng);
  SegModel teacher = SegModel::init({1, 2}, rng);
  Tensor x = random_image(8, 8, rng);

  auto eval = [&](const ParamVector& flat) {
    SegModel m = student;
    m.unflatten(flat);
    Rng noise(79);
    TapeD t;
    SegModel::Bound b = m.bind(t);
    return t.val(st_consistency_loss(t, m, b, teacher, t.constant(x), 0.2, 0.0, 1.0, noise)).v[0];
  };

  Rng noise(79);
  TapeD t;
  SegModel::Bound b = student.bind(t);
  ParamVector g = t.reverse_grad(st_consistency_loss(t, student, b, teacher, t.constant(x), 0.2, 0.0, 1.0, noise));
  REQUIRE(static_cast<int>(g.size()) == student.param_count());

  double norm = 0;
  for (double e : g) norm += e * e;
  REQUIRE(norm > 0.0);

  ParamVector x0 = student.flatten();
  double f0 = eval(x0);
  int checked = 0;
  for (size_t i = 0; i < x0.size(); i += 13) {
    double h = 1e-6 * std::max(1.0, std::abs(x0[i]));
    ParamVector xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    double fp = eval(xp), fm = eval(xm);
    double fd = (fp - fm) / (2 * h);
    // a relu kink inside the stencil shows up as a forward/backward slope gap
    if (std::abs((fp - f0) / h - (f0 - fm) / h) > 1e-4 * (1.0 + std::abs(fd))) continue;
    ++checked;
    INFO("param " << i);
    REQUIRE(std::abs(fd - g[i]) <= 1e-5 * (1.0 + std::abs(g[i])));
  }
  REQUIRE(checked >= 8);

  TapeD t2;
  SegModel::Bound b2 = student.bind(t2);
  Rng noise2(80);
  ValueId bad = t2.constant(Tensor::zeros({8}));
  REQUIRE_THROWS_AS(st_consistency_loss(t2, student, b2, teacher, bad, 0.1, 0.0, 1.0, noise2), Error);
}
