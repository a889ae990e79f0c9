#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mlbseg/tensor.hpp"

namespace mlbseg {

namespace detail {
inline void require_binary_pair(const Mask& a, const Mask& b, const char* who) {
  if (a.h != b.h || a.w != b.w)
    throw Error(std::string(who) + ": mask shapes differ, [" + std::to_string(a.h) + "," + std::to_string(a.w) +
                "] vs [" + std::to_string(b.h) + "," + std::to_string(b.w) + "]");
  for (uint8_t v : a.v)
    if (v > 1) throw Error(std::string(who) + ": masks must be binary");
  for (uint8_t v : b.v)
    if (v > 1) throw Error(std::string(who) + ": masks must be binary");
}
}  // namespace detail

inline double dice(const Mask& pred, const Mask& gt) {
  detail::require_binary_pair(pred, gt, "dice");
  long long inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    a += pred.v[i];
    b += gt.v[i];
    inter += pred.v[i] & gt.v[i];
  }
  if (a + b == 0) return 1.0;  // both empty: perfect agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

inline double jaccard(const Mask& pred, const Mask& gt) {
  detail::require_binary_pair(pred, gt, "jaccard");
  long long inter = 0, uni = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    inter += pred.v[i] & gt.v[i];
    uni += pred.v[i] | gt.v[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct SurfaceDistances {
  double hd = 0;    // max of the two directed maxima
  double hd95 = 0;  // max of the two directed 95th percentiles (nearest rank)
  double asd = 0;   // mean over both directed distance sets pooled
  double asd_pred_to_gt = 0;
  double asd_gt_to_pred = 0;
  bool degenerate = false;  // exactly one boundary empty: distances are +inf
};

namespace detail {
// Foreground pixels with a 4-neighbor background or touching the image edge.
inline std::vector<std::pair<int, int>> surface(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      if (y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1 || !m.at(y - 1, x) || !m.at(y + 1, x) ||
          !m.at(y, x - 1) || !m.at(y, x + 1))
        out.emplace_back(y, x);
    }
  return out;
}

inline std::vector<double> directed(const std::vector<std::pair<int, int>>& from,
                                    const std::vector<std::pair<int, int>>& to) {
  std::vector<double> d;
  d.reserve(from.size());
  for (auto [ay, ax] : from) {
    long long best = std::numeric_limits<long long>::max();
    for (auto [by, bx] : to) {
      long long dy = ay - by, dx = ax - bx;
      best = std::min(best, dy * dy + dx * dx);
    }
    d.push_back(std::sqrt(static_cast<double>(best)));
  }
  return d;
}

// Nearest-rank percentile: element at index ceil(p*n)-1 of the sorted set.
inline double percentile(std::vector<double> d, double p) {
  std::sort(d.begin(), d.end());
  size_t idx = static_cast<size_t>(std::ceil(p * static_cast<double>(d.size())));
  return d[std::max<size_t>(1, idx) - 1];
}
}  // namespace detail

inline SurfaceDistances surface_distances(const Mask& pred, const Mask& gt) {
  detail::require_binary_pair(pred, gt, "surface_distances");
  auto sp = detail::surface(pred);
  auto sg = detail::surface(gt);
  SurfaceDistances out;
  if (sp.empty() && sg.empty()) return out;  // both empty: all distances 0
  if (sp.empty() || sg.empty()) {
    out.degenerate = true;
    double inf = std::numeric_limits<double>::infinity();
    out.hd = out.hd95 = out.asd = out.asd_pred_to_gt = out.asd_gt_to_pred = inf;
    return out;
  }
  std::vector<double> d_pg = detail::directed(sp, sg);
  std::vector<double> d_gp = detail::directed(sg, sp);
  out.hd = std::max(*std::max_element(d_pg.begin(), d_pg.end()), *std::max_element(d_gp.begin(), d_gp.end()));
  out.hd95 = std::max(detail::percentile(d_pg, 0.95), detail::percentile(d_gp, 0.95));
  double sum = 0;
  for (double d : d_pg) sum += d;
  out.asd_pred_to_gt = sum / static_cast<double>(d_pg.size());
  double sum2 = 0;
  for (double d : d_gp) sum2 += d;
  out.asd_gt_to_pred = sum2 / static_cast<double>(d_gp.size());
  out.asd = (sum + sum2) / static_cast<double>(d_pg.size() + d_gp.size());
  return out;
}

struct MetricsReport {
  double dice = 0, jaccard = 0;
  double hd = 0, hd95 = 0, asd = 0;
  bool degenerate = false;
};

inline MetricsReport compute_metrics(const Mask& pred, const Mask& gt) {
  MetricsReport r;
  r.dice = dice(pred, gt);
  r.jaccard = jaccard(pred, gt);
  SurfaceDistances s = surface_distances(pred, gt);
  r.hd = s.hd;
  r.hd95 = s.hd95;
  r.asd = s.asd;
  r.degenerate = s.degenerate;
  return r;
}

}  // namespace mlbseg
