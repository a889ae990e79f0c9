#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mlbseg/rng.hpp"
#include "mlbseg/tensor.hpp"

namespace mlbseg {

struct Sample {
  Tensor image;  // [1,H,W], values in [0,1]
  bool has_mask = false;
  Mask mask;
};

struct Dataset {
  std::string split;  // clean | meta | unlabeled | initialized | eval
  int h = 0, w = 0;
  std::vector<Sample> samples;
};

// ---------------------------------------------------------------- generator

struct GenConfig {
  int h = 32, w = 32;
  int count = 1;
  enum class Family { kEllipse, kRect, kMixed } family = Family::kMixed;
  double noise_level = 0.05;

  static Family parse_family(const std::string& s) {
    if (s == "ellipse") return Family::kEllipse;
    if (s == "rect") return Family::kRect;
    if (s == "mixed") return Family::kMixed;
    throw Error("shape family '" + s + "' (expected ellipse, rect or mixed)");
  }
  static std::string family_str(Family f) {
    switch (f) {
      case Family::kEllipse: return "ellipse";
      case Family::kRect: return "rect";
      case Family::kMixed: return "mixed";
    }
    return "?";
  }
};

// 1-3 bright shapes on a darker background plus optional pixel noise. Shapes
// are kept fully inside the frame and their radii span [5,7] (scaled with
// image size), which keeps the foreground fraction in a sane band. Image
// values are quantized to the float32 grid so disk round trips are exact.
inline Dataset generate(const GenConfig& cfg, Rng& rng) {
  if (cfg.h < 8 || cfg.w < 8 || cfg.h % 2 || cfg.w % 2)
    throw Error("generate: H and W must be even and >= 8, got " + std::to_string(cfg.h) + "x" +
                std::to_string(cfg.w));
  if (cfg.count < 1) throw Error("generate: count must be >= 1");
  if (cfg.noise_level < 0) throw Error("generate: noise level must be >= 0");
  double s = static_cast<double>(std::min(cfg.h, cfg.w)) / 32.0;
  int r_lo = std::max(2, static_cast<int>(5.0 * s + 0.5));
  int r_hi = std::max(r_lo, static_cast<int>(7.0 * s + 0.5));

  Dataset ds;
  ds.h = cfg.h;
  ds.w = cfg.w;
  ds.samples.reserve(static_cast<size_t>(cfg.count));
  for (int n = 0; n < cfg.count; ++n) {
    Sample smp;
    double bg = 0.15 + 0.15 * rng.uniform();
    smp.image = Tensor::full({1, cfg.h, cfg.w}, bg);
    smp.has_mask = true;
    smp.mask = Mask(cfg.h, cfg.w);
    int shapes = 1 + rng.uniform_int(3);
    for (int k = 0; k < shapes; ++k) {
      bool rect = cfg.family == GenConfig::Family::kRect ||
                  (cfg.family == GenConfig::Family::kMixed && rng.bernoulli(0.5));
      int rx = r_lo + rng.uniform_int(r_hi - r_lo + 1);
      int ry = r_lo + rng.uniform_int(r_hi - r_lo + 1);
      int cx = rx + rng.uniform_int(cfg.w - 2 * rx);
      int cy = ry + rng.uniform_int(cfg.h - 2 * ry);
      double fg = bg + 0.35 + 0.25 * rng.uniform();
      for (int y = cy - ry; y <= cy + ry; ++y)
        for (int x = cx - rx; x <= cx + rx; ++x) {
          double ny = static_cast<double>(y - cy) / ry;
          double nx = static_cast<double>(x - cx) / rx;
          if (rect || nx * nx + ny * ny <= 1.0) {
            smp.image.at(0, y, x) = fg;
            smp.mask.at(y, x) = 1;
          }
        }
    }
    if (cfg.noise_level > 0)
      for (auto& e : smp.image.v) e += rng.normal(0.0, cfg.noise_level);
    for (auto& e : smp.image.v) e = static_cast<double>(static_cast<float>(std::clamp(e, 0.0, 1.0)));
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

inline Dataset generate(const GenConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  return generate(cfg, rng);
}

// --------------------------------------------------------- label corruption

struct CorruptConfig {
  int dilate_r = 0;
  int erode_r = 0;
  double flip_rate = 0.0;
};

namespace detail {
// Offsets within a Euclidean disk of radius r.
inline std::vector<std::pair<int, int>> disk_offsets(int r) {
  std::vector<std::pair<int, int>> o;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) o.emplace_back(dy, dx);
  return o;
}

// Foreground pixels touching background or the image edge (4-neighborhood).
inline std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> b;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
      if (edge || !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1))
        b.emplace_back(y, x);
    }
  return b;
}
}  // namespace detail

// Dilation then erosion with Euclidean disk elements, then Bernoulli flips on
// the band within distance 2 of the original boundary. No pixel farther than
// max(dilate_r, erode_r, 2) from the original boundary ever changes.
inline Mask corrupt_mask(const Mask& m, const CorruptConfig& cfg, Rng& rng) {
  if (cfg.dilate_r < 0 || cfg.erode_r < 0) throw Error("corrupt_mask: radii must be >= 0");
  if (cfg.flip_rate < 0 || cfg.flip_rate > 1) throw Error("corrupt_mask: flip_rate must be in [0,1]");
  Mask out = m;
  if (cfg.dilate_r > 0) {
    Mask d(m.h, m.w);
    auto offs = detail::disk_offsets(cfg.dilate_r);
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        uint8_t v = 0;
        for (auto [dy, dx] : offs) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && out.at(yy, xx)) {
            v = 1;
            break;
          }
        }
        d.at(y, x) = v;
      }
    out = d;
  }
  if (cfg.erode_r > 0) {
    Mask e(m.h, m.w);
    auto offs = detail::disk_offsets(cfg.erode_r);
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        uint8_t v = 1;  // out-of-frame counts as foreground: no edge erosion
        for (auto [dy, dx] : offs) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && !out.at(yy, xx)) {
            v = 0;
            break;
          }
        }
        e.at(y, x) = v;
      }
    out = e;
  }
  if (cfg.flip_rate > 0) {
    std::vector<char> band(static_cast<size_t>(m.h) * m.w, 0);
    auto offs = detail::disk_offsets(2);
    for (auto [by, bx] : detail::boundary_pixels(m))
      for (auto [dy, dx] : offs) {
        int yy = by + dy, xx = bx + dx;
        if (yy >= 0 && yy < m.h && xx >= 0 && xx < m.w) band[static_cast<size_t>(yy) * m.w + xx] = 1;
      }
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x)
        if (band[static_cast<size_t>(y) * m.w + x] && rng.bernoulli(cfg.flip_rate))
          out.at(y, x) = out.at(y, x) ? 0 : 1;
  }
  return out;
}

// ------------------------------------------------------------- file format
// 20-byte header: magic "MSEG", u32 version=1, u32 count, u32 H, u32 W, all
// little-endian. Per sample: H*W float32 LE image values, one mask-present
// byte, and if present H*W u8 mask values.

namespace detail {
inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}
inline uint32_t get_u32(const std::string& s, size_t off) {
  return static_cast<uint32_t>(static_cast<uint8_t>(s[off])) |
         static_cast<uint32_t>(static_cast<uint8_t>(s[off + 1])) << 8 |
         static_cast<uint32_t>(static_cast<uint8_t>(s[off + 2])) << 16 |
         static_cast<uint32_t>(static_cast<uint8_t>(s[off + 3])) << 24;
}
}  // namespace detail

inline void save_mseg(const Dataset& ds, const std::string& path) {
  std::string buf = "MSEG";
  detail::put_u32(buf, 1);
  detail::put_u32(buf, static_cast<uint32_t>(ds.samples.size()));
  detail::put_u32(buf, static_cast<uint32_t>(ds.h));
  detail::put_u32(buf, static_cast<uint32_t>(ds.w));
  for (const auto& s : ds.samples) {
    if (s.image.ndim() != 3 || s.image.dim(1) != ds.h || s.image.dim(2) != ds.w)
      throw Error("save: sample image " + s.image.shape_str() + " does not match dataset " +
                  std::to_string(ds.h) + "x" + std::to_string(ds.w));
    for (double e : s.image.v) {
      float f = static_cast<float>(e);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(buf, bits);
    }
    buf.push_back(s.has_mask ? 1 : 0);
    if (s.has_mask) {
      if (s.mask.h != ds.h || s.mask.w != ds.w) throw Error("save: sample mask size mismatch");
      for (uint8_t v : s.mask.v) buf.push_back(static_cast<char>(v));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("save: cannot open '" + path + "' for writing");
  f.write(buf.data(), static_cast<long>(buf.size()));
  if (!f) throw Error("save: short write to '" + path + "'");
}

inline Dataset load_mseg(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20)
    throw Error("load '" + path + "': file is " + std::to_string(buf.size()) + " bytes, header needs 20");
  if (buf.compare(0, 4, "MSEG") != 0) throw Error("load '" + path + "': bad magic at offset 0, expected 'MSEG'");
  uint32_t version = detail::get_u32(buf, 4);
  if (version != 1)
    throw Error("load '" + path + "': unsupported version " + std::to_string(version) + " at offset 4");
  uint32_t count = detail::get_u32(buf, 8);
  uint32_t h = detail::get_u32(buf, 12);
  uint32_t w = detail::get_u32(buf, 16);
  if (h == 0 || w == 0 || h > 16384 || w > 16384 || count > 10'000'000)
    throw Error("load '" + path + "': implausible header (count=" + std::to_string(count) + ", " +
                std::to_string(h) + "x" + std::to_string(w) + ")");
  Dataset ds;
  ds.h = static_cast<int>(h);
  ds.w = static_cast<int>(w);
  size_t off = 20;
  size_t hw = static_cast<size_t>(h) * w;
  for (uint32_t n = 0; n < count; ++n) {
    if (off + hw * 4 + 1 > buf.size())
      throw Error("load '" + path + "': truncated at offset " + std::to_string(off) + " (sample " +
                  std::to_string(n) + ")");
    Sample s;
    s.image = Tensor::zeros({1, ds.h, ds.w});
    for (size_t i = 0; i < hw; ++i) {
      uint32_t bits = detail::get_u32(buf, off + i * 4);
      float fv;
      std::memcpy(&fv, &bits, 4);
      s.image.v[i] = static_cast<double>(fv);
    }
    off += hw * 4;
    uint8_t flag = static_cast<uint8_t>(buf[off++]);
    if (flag > 1)
      throw Error("load '" + path + "': bad mask flag " + std::to_string(flag) + " at offset " +
                  std::to_string(off - 1));
    if (flag) {
      if (off + hw > buf.size())
        throw Error("load '" + path + "': truncated mask at offset " + std::to_string(off));
      s.has_mask = true;
      s.mask = Mask(ds.h, ds.w);
      for (size_t i = 0; i < hw; ++i) s.mask.v[i] = static_cast<uint8_t>(buf[off + i]);
      off += hw;
    }
    ds.samples.push_back(std::move(s));
  }
  if (off != buf.size())
    throw Error("load '" + path + "': " + std::to_string(buf.size() - off) + " trailing bytes at offset " +
                std::to_string(off));
  return ds;
}

// manifest.txt: one `split=path` line per dataset.
inline void save_manifest(const std::string& path, const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("manifest: cannot open '" + path + "' for writing");
  for (const auto& [split, p] : entries) f << split << "=" << p << "\n";
}

inline std::vector<std::pair<std::string, std::string>> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("manifest: cannot open '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int ln = 0;
  while (std::getline(f, line)) {
    ++ln;
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("manifest '" + path + "' line " + std::to_string(ln) + ": expected split=path");
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

// ------------------------------------------------------------ PGM rendering

// Grayscale P5 rendering of a [H,W] field, mapping [lo,hi] to 0..255.
inline void save_pgm(const std::string& path, const Tensor& t, double lo, double hi) {
  const Tensor& img = t;
  int h = img.ndim() == 3 ? img.dim(1) : img.dim(0);
  int w = img.ndim() == 3 ? img.dim(2) : img.dim(1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("pgm: cannot open '" + path + "' for writing");
  f << "P5\n" << w << " " << h << "\n255\n";
  double span = hi - lo;
  for (int i = 0; i < h * w; ++i) {
    double x = span > 0 ? (img.v[static_cast<size_t>(i)] - lo) / span : 0.0;
    f.put(static_cast<char>(std::clamp(static_cast<int>(x * 255.0 + 0.5), 0, 255)));
  }
  if (!f) throw Error("pgm: short write to '" + path + "'");
}

inline void save_pgm(const std::string& path, const Mask& m, int classes) {
  Tensor t = Tensor::zeros({m.h, m.w});
  for (int i = 0; i < m.numel(); ++i) t.v[static_cast<size_t>(i)] = m.v[static_cast<size_t>(i)];
  save_pgm(path, t, 0.0, std::max(1.0, static_cast<double>(classes - 1)));
}

}  // namespace mlbseg
