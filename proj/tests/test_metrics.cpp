#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mlbseg/metrics.hpp"
#include "mlbseg/rng.hpp"

using namespace mlbseg;

namespace {

Mask random_mask(int h, int w, double p, Rng& rng) {
  Mask m(h, w);
  for (auto& v : m.v) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

// Everything below is recomputed from scratch, sharing nothing with the
// implementation under test.
struct Oracle {
  double hd, hd95, asd, a2b, b2a;
  bool degenerate;
};

std::vector<std::pair<int, int>> oracle_surface(const Mask& m) {
  std::vector<std::pair<int, int>> pts;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (m.at(y, x) == 0) continue;
      bool border = false;
      int ns[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (auto& n : ns) {
        if (n[0] < 0 || n[0] >= m.h || n[1] < 0 || n[1] >= m.w)
          border = true;
        else if (m.at(n[0], n[1]) == 0)
          border = true;
      }
      if (border) pts.emplace_back(y, x);
    }
  return pts;
}

std::vector<double> oracle_directed(const std::vector<std::pair<int, int>>& a,
                                    const std::vector<std::pair<int, int>>& b) {
  std::vector<double> out;
  for (auto [ay, ax] : a) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [by, bx] : b)
      best = std::min(best, std::sqrt(static_cast<double>((ay - by) * (ay - by) + (ax - bx) * (ax - bx))));
    out.push_back(best);
  }
  return out;
}

double oracle_pct95(std::vector<double> d) {
  std::sort(d.begin(), d.end());
  long long idx = static_cast<long long>(std::ceil(0.95 * static_cast<double>(d.size())));
  if (idx < 1) idx = 1;
  return d[static_cast<size_t>(idx - 1)];
}

Oracle oracle_distances(const Mask& a, const Mask& b) {
  auto sa = oracle_surface(a), sb = oracle_surface(b);
  if (sa.empty() && sb.empty()) return {0, 0, 0, 0, 0, false};
  if (sa.empty() || sb.empty()) {
    double inf = std::numeric_limits<double>::infinity();
    return {inf, inf, inf, inf, inf, true};
  }
  auto dab = oracle_directed(sa, sb), dba = oracle_directed(sb, sa);
  Oracle o{};
  o.hd = std::max(*std::max_element(dab.begin(), dab.end()), *std::max_element(dba.begin(), dba.end()));
  o.hd95 = std::max(oracle_pct95(dab), oracle_pct95(dba));
  double s1 = 0, s2 = 0;
  for (double d : dab) s1 += d;
  for (double d : dba) s2 += d;
  o.a2b = s1 / static_cast<double>(dab.size());
  o.b2a = s2 / static_cast<double>(dba.size());
  o.asd = (s1 + s2) / static_cast<double>(dab.size() + dba.size());
  o.degenerate = false;
  return o;
}

}  // namespace

TEST_CASE("metrics: overlap scores on hand examples", "[metrics]") {
  Mask a(4, 4), b(4, 4);
  a.at(0, 0) = a.at(0, 1) = a.at(1, 0) = a.at(1, 1) = 1;  // |A| = 4
  b.at(1, 1) = b.at(0, 1) = 1;                            // |B| = 2, overlap 2
  REQUIRE(dice(a, b) == Catch::Approx(2.0 / 3.0).margin(1e-15));
  REQUIRE(jaccard(a, b) == Catch::Approx(0.5).margin(1e-15));

  REQUIRE(dice(a, a) == 1.0);
  REQUIRE(jaccard(a, a) == 1.0);

  Mask c(4, 4);
  c.at(3, 3) = 1;
  REQUIRE(dice(a, c) == 0.0);
  REQUIRE(jaccard(a, c) == 0.0);

  Mask e1(4, 4), e2(4, 4);
  REQUIRE(dice(e1, e2) == 1.0);
  REQUIRE(jaccard(e1, e2) == 1.0);
}

TEST_CASE("metrics: jaccard is dice over two minus dice", "[metrics]") {
  Rng rng(71);
  for (int trial = 0; trial < 1000; ++trial) {
    Mask a = random_mask(8, 8, 0.4, rng);
    Mask b = random_mask(8, 8, 0.4, rng);
    double d = dice(a, b);
    REQUIRE(std::abs(jaccard(a, b) - d / (2.0 - d)) <= 1e-9);
  }
}

TEST_CASE("metrics: distances vanish on identical masks", "[metrics]") {
  Rng rng(72);
  Mask a = random_mask(10, 10, 0.3, rng);
  a.at(5, 5) = 1;
  SurfaceDistances s = surface_distances(a, a);
  REQUIRE(s.hd == 0.0);
  REQUIRE(s.hd95 == 0.0);
  REQUIRE(s.asd == 0.0);
  REQUIRE(!s.degenerate);
}

TEST_CASE("metrics: two single pixels give the 3-4-5 distance", "[metrics]") {
  Mask a(8, 8), b(8, 8);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;
  SurfaceDistances s = surface_distances(a, b);
  REQUIRE(s.hd == 5.0);
  REQUIRE(s.hd95 == 5.0);
  REQUIRE(s.asd == 5.0);
  REQUIRE(s.asd_pred_to_gt == 5.0);
  REQUIRE(s.asd_gt_to_pred == 5.0);
}

TEST_CASE("metrics: distances match a brute-force recomputation", "[metrics]") {
  Rng rng(73);
  for (int trial = 0; trial < 50; ++trial) {
    Mask a = random_mask(16, 16, 0.25 + 0.02 * (trial % 5), rng);
    Mask b = random_mask(16, 16, 0.25, rng);
    SurfaceDistances got = surface_distances(a, b);
    Oracle want = oracle_distances(a, b);
    REQUIRE(got.degenerate == want.degenerate);
    if (want.degenerate) {
      REQUIRE(std::isinf(got.hd));
      continue;
    }
    REQUIRE(std::abs(got.hd - want.hd) <= 1e-9);
    REQUIRE(std::abs(got.hd95 - want.hd95) <= 1e-9);
    REQUIRE(std::abs(got.asd - want.asd) <= 1e-9);
    REQUIRE(std::abs(got.asd_pred_to_gt - want.a2b) <= 1e-9);
    REQUIRE(std::abs(got.asd_gt_to_pred - want.b2a) <= 1e-9);
  }
}

TEST_CASE("metrics: hausdorff and pooled asd are symmetric", "[metrics]") {
  Rng rng(74);
  for (int trial = 0; trial < 20; ++trial) {
    Mask a = random_mask(12, 12, 0.3, rng);
    Mask b = random_mask(12, 12, 0.3, rng);
    SurfaceDistances ab = surface_distances(a, b);
    SurfaceDistances ba = surface_distances(b, a);
    REQUIRE(ab.hd == ba.hd);
    REQUIRE(ab.hd95 == ba.hd95);
    REQUIRE(ab.asd == ba.asd);
    REQUIRE(ab.asd_pred_to_gt == ba.asd_gt_to_pred);
  }
}

TEST_CASE("metrics: translating both masks changes nothing", "[metrics]") {
  Rng rng(75);
  Mask pa(20, 20), pb(20, 20), qa(20, 20), qb(20, 20);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      int va = rng.bernoulli(0.5) ? 1 : 0;
      int vb = rng.bernoulli(0.5) ? 1 : 0;
      pa.at(3 + y, 3 + x) = static_cast<uint8_t>(va);
      qa.at(5 + y, 6 + x) = static_cast<uint8_t>(va);
      pb.at(3 + y, 3 + x) = static_cast<uint8_t>(vb);
      qb.at(5 + y, 6 + x) = static_cast<uint8_t>(vb);
    }
  REQUIRE(dice(pa, pb) == dice(qa, qb));
  REQUIRE(jaccard(pa, pb) == jaccard(qa, qb));
  SurfaceDistances p = surface_distances(pa, pb);
  SurfaceDistances q = surface_distances(qa, qb);
  REQUIRE(p.degenerate == q.degenerate);
  if (!p.degenerate) {
    REQUIRE(p.hd == q.hd);
    REQUIRE(p.hd95 == q.hd95);
    REQUIRE(p.asd == q.asd);
  }
}

TEST_CASE("metrics: empty-mask conventions", "[metrics]") {
  Mask e(6, 6), full(6, 6);
  full.at(2, 2) = full.at(2, 3) = 1;

  SurfaceDistances both = surface_distances(e, e);
  REQUIRE(!both.degenerate);
  REQUIRE(both.hd == 0.0);
  REQUIRE(both.asd == 0.0);

  SurfaceDistances one = surface_distances(e, full);
  REQUIRE(one.degenerate);
  REQUIRE(std::isinf(one.hd));
  REQUIRE(std::isinf(one.hd95));
  REQUIRE(std::isinf(one.asd));

  MetricsReport r = compute_metrics(full, e);
  REQUIRE(r.dice == 0.0);
  REQUIRE(r.degenerate);
}

TEST_CASE("metrics: input validation", "[metrics]") {
  Mask a(4, 4), b(4, 5);
  REQUIRE_THROWS_AS(dice(a, b), Error);
  REQUIRE_THROWS_AS(surface_distances(a, b), Error);
  Mask c(4, 4);
  c.at(0, 0) = 2;
  REQUIRE_THROWS_AS(jaccard(a, c), Error);
  REQUIRE_THROWS_AS(surface_distances(c, a), Error);
}
