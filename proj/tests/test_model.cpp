#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mlbseg/augment.hpp"
#include "mlbseg/model.hpp"
#include "mlbseg/rng.hpp"

using namespace mlbseg;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
  Tensor t = Tensor::zeros({1, h, w});
  for (auto& e : t.v) e = rng.uniform();
  return t;
}

// Makes every 3x3 kernel equal to its horizontal mirror.
void symmetrize_h(SegModel& m) {
  for (Tensor& t : m.params) {
    if (t.ndim() != 4 || t.dim(3) != 3) continue;
    for (int i = 0; i < t.dim(0) * t.dim(1) * t.dim(2); ++i) {
      double a = t.v[static_cast<size_t>(i * 3)];
      double c = t.v[static_cast<size_t>(i * 3 + 2)];
      double avg = 0.5 * (a + c);
      t.v[static_cast<size_t>(i * 3)] = avg;
      t.v[static_cast<size_t>(i * 3 + 2)] = avg;
    }
  }
}

}  // namespace

TEST_CASE("model: parameter layout and round trip", "[model]") {
  Rng rng(3);
  SegModel m = SegModel::init({1, 2}, rng);
  REQUIRE(m.param_count() == 158);

  SegModel m8 = SegModel::init({8, 2}, rng);
  ParamVector flat = m8.flatten();
  REQUIRE(static_cast<int>(flat.size()) == m8.param_count());
  SegModel copy = m8;
  copy.unflatten(flat);
  REQUIRE(copy.flatten() == flat);

  ParamVector wrong(flat.size() + 1, 0.0);
  REQUIRE_THROWS_AS(copy.unflatten(wrong), Error);
  REQUIRE_THROWS_AS(SegModel::init({0, 2}, rng), Error);
  REQUIRE_THROWS_AS(SegModel::init({4, 1}, rng), Error);
}

TEST_CASE("model: forward shape and odd-size rejection", "[model]") {
  Rng rng(4);
  SegModel m = SegModel::init({2, 2}, rng);
  Tensor img = random_image(16, 16, rng);
  Tensor z = m.logits(img);
  REQUIRE(z.dims == std::vector<int>{2, 16, 16});
  for (double e : z.v) REQUIRE(std::isfinite(e));

  Tensor odd = random_image(15, 16, rng);
  REQUIRE_THROWS_AS(m.logits(odd), Error);
}

TEST_CASE("model: zero parameters give all-zero logits", "[model]") {
  Rng rng(5);
  SegModel m = SegModel::init({2, 2}, rng);
  for (Tensor& t : m.params) std::fill(t.v.begin(), t.v.end(), 0.0);
  Tensor z = m.logits(random_image(8, 8, rng));
  for (double e : z.v) REQUIRE(e == 0.0);
}

TEST_CASE("model: horizontally symmetric params and input give symmetric logits", "[model]") {
  Rng rng(6);
  SegModel m = SegModel::init({2, 2}, rng);
  symmetrize_h(m);
  Tensor img = random_image(8, 8, rng);
  RemapPlan flip = make_plan(AugSpec{AugSpec::Kind::kFlipH, 0}, 8, 8);
  Tensor sym = Tensor::zeros({1, 8, 8});
  Tensor mirrored = apply_plan(img, flip);
  for (size_t i = 0; i < sym.v.size(); ++i) sym.v[i] = 0.5 * (img.v[i] + mirrored.v[i]);

  Tensor z = m.logits(sym);
  Tensor zf = apply_plan(z, flip);
  for (size_t i = 0; i < z.v.size(); ++i)
    REQUIRE(std::abs(z.v[i] - zf.v[i]) <= 1e-12 * (1.0 + std::abs(z.v[i])));
}

TEST_CASE("model: pseudo_label argmax and tie rule", "[model]") {
  Tensor up({2, 1, 2}, {0.0, 0.0, 1.0, 2.0});  // class1 larger everywhere
  Mask m1 = pseudo_label(up);
  REQUIRE(m1.v == std::vector<uint8_t>{1, 1});

  Tensor tie = Tensor::full({3, 2, 2}, 0.25);
  Mask m2 = pseudo_label(tie);
  for (uint8_t v : m2.v) REQUIRE(v == 0);

  Rng rng(7);
  Tensor z = Tensor::zeros({4, 3, 3});
  for (auto& e : z.v) e = rng.uniform() * 4 - 2;
  Mask m3 = pseudo_label(z);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (z.at(c, y, x) > z.at(best, y, x)) best = c;
      REQUIRE(m3.at(y, x) == best);
    }
}

TEST_CASE("model: per_pixel_ce values", "[model]") {
  Tensor zero = Tensor::zeros({2, 2, 2});
  Mask t(2, 2);
  t.v = {0, 1, 0, 1};
  Tensor ce = per_pixel_ce(zero, t);
  for (double e : ce.v) REQUIRE(e == Catch::Approx(std::log(2.0)).margin(1e-15));

  // Strongly confident toward the target: loss ~ 0.
  Tensor conf = Tensor::zeros({2, 1, 1});
  conf.v = {30.0, 0.0};
  Mask t0(1, 1);
  Tensor ce0 = per_pixel_ce(conf, t0);
  REQUIRE(ce0.v[0] >= 0.0);
  REQUIRE(ce0.v[0] < 1e-12);

  // Independent recomputation through explicit softmax probabilities.
  Rng rng(8);
  Tensor z = Tensor::zeros({3, 4, 4});
  for (auto& e : z.v) e = rng.uniform() * 6 - 3;
  Mask tgt(4, 4);
  for (auto& e : tgt.v) e = static_cast<uint8_t>(rng.uniform_int(3));
  Tensor got = per_pixel_ce(z, tgt);
  Tensor p = softmax_chw(z);
  for (int i = 0; i < 16; ++i) {
    double expect = -std::log(p.v[static_cast<size_t>(tgt.v[static_cast<size_t>(i)] * 16 + i)]);
    REQUIRE(std::abs(got.v[static_cast<size_t>(i)] - expect) <= 1e-10);
    REQUIRE(got.v[static_cast<size_t>(i)] >= 0.0);
  }

  Mask bad(4, 4);
  bad.v[5] = 3;
  REQUIRE_THROWS_AS(per_pixel_ce(z, bad), Error);
}

TEST_CASE("model: taped forward equals plain inference", "[model]") {
  Rng rng(9);
  SegModel m = SegModel::init({3, 2}, rng);
  Tensor img = random_image(8, 8, rng);
  Tensor direct = m.logits(img);

  TapeD tape;
  SegModel::Bound b = m.bind(tape);
  ValueId z = m.forward(tape, b, tape.constant(img));
  REQUIRE(tape.val(z).v == direct.v);
}

TEST_CASE("model: argmax labels ignore per-pixel logit offsets", "[model]") {
  Rng rng(10);
  Tensor z = Tensor::zeros({3, 6, 5});
  for (auto& e : z.v) e = rng.uniform() * 4 - 2;
  Mask base = pseudo_label(z);
  for (double c : {0.25, -1.5}) {
    // each pixel gets its own offset, identical across classes
    Tensor shifted = z;
    for (int i = 0; i < 30; ++i) {
      double off = c * (1.0 + 0.07 * i);
      for (int k = 0; k < 3; ++k) shifted.v[static_cast<size_t>(k * 30 + i)] += off;
    }
    REQUIRE(pseudo_label(shifted) == base);
  }
}
