#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mlbseg/tape.hpp"
#include "mlbseg/tensor.hpp"

namespace mlbseg {

// Geometric augmentations that are exactly invertible on the pixel grid.
// zoom-in:k crops k pixels off every side (the inverse zero-pads, so the
// border band is unrecoverable); zoom-out:k pads k zeros on every side.
struct AugSpec {
  enum class Kind { kIdentity, kFlipH, kFlipV, kRot90, kRot270, kZoomIn, kZoomOut };
  Kind kind = Kind::kIdentity;
  int k = 0;

  static AugSpec parse(const std::string& raw) {
    std::string s;
    for (char c : raw)
      if (c != ' ' && c != '\t') s += c;
    if (s == "identity") return {Kind::kIdentity, 0};
    if (s == "flip-h") return {Kind::kFlipH, 0};
    if (s == "flip-v") return {Kind::kFlipV, 0};
    if (s == "rot90") return {Kind::kRot90, 0};
    if (s == "rot270") return {Kind::kRot270, 0};
    auto zoom = [&](const std::string& prefix, Kind kind) -> AugSpec {
      std::string num = s.substr(prefix.size());
      if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos)
        throw Error("augmentation '" + raw + "': expected non-negative integer after '" + prefix + "'");
      return {kind, std::stoi(num)};
    };
    if (s.rfind("zoom-in:", 0) == 0) return zoom("zoom-in:", Kind::kZoomIn);
    if (s.rfind("zoom-out:", 0) == 0) return zoom("zoom-out:", Kind::kZoomOut);
    throw Error("unknown augmentation '" + raw +
                "' (expected flip-h, flip-v, rot90, rot270, zoom-in:K, zoom-out:K)");
  }

  std::string str() const {
    switch (kind) {
      case Kind::kIdentity: return "identity";
      case Kind::kFlipH: return "flip-h";
      case Kind::kFlipV: return "flip-v";
      case Kind::kRot90: return "rot90";
      case Kind::kRot270: return "rot270";
      case Kind::kZoomIn: return "zoom-in:" + std::to_string(k);
      case Kind::kZoomOut: return "zoom-out:" + std::to_string(k);
    }
    return "?";
  }
};

inline std::vector<AugSpec> parse_aug_list(const std::string& csv) {
  std::vector<AugSpec> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    std::string item = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    bool blank = item.find_first_not_of(" \t") == std::string::npos;
    if (!blank) out.push_back(AugSpec::parse(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

namespace detail {
inline RemapPlan plan_from(int in_h, int in_w, int out_h, int out_w) {
  RemapPlan p;
  p.in_h = in_h;
  p.in_w = in_w;
  p.out_h = out_h;
  p.out_w = out_w;
  p.src.assign(static_cast<size_t>(out_h) * out_w, -1);
  return p;
}
}  // namespace detail

// Plan mapping an h x w image into the augmented frame.
inline RemapPlan make_plan(const AugSpec& a, int h, int w) {
  using K = AugSpec::Kind;
  switch (a.kind) {
    case K::kIdentity: {
      RemapPlan p = detail::plan_from(h, w, h, w);
      for (int i = 0; i < h * w; ++i) p.src[static_cast<size_t>(i)] = i;
      return p;
    }
    case K::kFlipH: {
      RemapPlan p = detail::plan_from(h, w, h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) p.src[static_cast<size_t>(y * w + x)] = y * w + (w - 1 - x);
      return p;
    }
    case K::kFlipV: {
      RemapPlan p = detail::plan_from(h, w, h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) p.src[static_cast<size_t>(y * w + x)] = (h - 1 - y) * w + x;
      return p;
    }
    case K::kRot90: {  // counter-clockwise quarter turn, output is w x h
      RemapPlan p = detail::plan_from(h, w, w, h);
      for (int oy = 0; oy < w; ++oy)
        for (int ox = 0; ox < h; ++ox) p.src[static_cast<size_t>(oy * h + ox)] = ox * w + (w - 1 - oy);
      return p;
    }
    case K::kRot270: {  // clockwise quarter turn
      RemapPlan p = detail::plan_from(h, w, w, h);
      for (int oy = 0; oy < w; ++oy)
        for (int ox = 0; ox < h; ++ox) p.src[static_cast<size_t>(oy * h + ox)] = (h - 1 - ox) * w + oy;
      return p;
    }
    case K::kZoomIn: {
      int oh = h - 2 * a.k, ow = w - 2 * a.k;
      if (oh < 2 || ow < 2)
        throw Error("zoom-in:" + std::to_string(a.k) + " leaves no interior for a " + std::to_string(h) +
                    "x" + std::to_string(w) + " image");
      RemapPlan p = detail::plan_from(h, w, oh, ow);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
          p.src[static_cast<size_t>(oy * ow + ox)] = (oy + a.k) * w + (ox + a.k);
      return p;
    }
    case K::kZoomOut: {
      int oh = h + 2 * a.k, ow = w + 2 * a.k;
      RemapPlan p = detail::plan_from(h, w, oh, ow);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) p.src[static_cast<size_t>((y + a.k) * ow + (x + a.k))] = y * w + x;
      return p;
    }
  }
  throw Error("make_plan: bad augmentation kind");
}

// Plan mapping the augmented frame back to the original h x w frame. Pixels
// the forward transform discarded come back as fill (-1).
inline RemapPlan make_inverse_plan(const AugSpec& a, int h, int w) {
  using K = AugSpec::Kind;
  switch (a.kind) {
    case K::kIdentity:
    case K::kFlipH:
    case K::kFlipV:
      return make_plan(a, h, w);  // self-inverse
    case K::kRot90:
      return make_plan({K::kRot270, 0}, w, h);
    case K::kRot270:
      return make_plan({K::kRot90, 0}, w, h);
    case K::kZoomIn: {
      int ih = h - 2 * a.k, iw = w - 2 * a.k;
      if (ih < 2 || iw < 2)
        throw Error("zoom-in:" + std::to_string(a.k) + " leaves no interior for a " + std::to_string(h) +
                    "x" + std::to_string(w) + " image");
      RemapPlan p = detail::plan_from(ih, iw, h, w);
      for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x) p.src[static_cast<size_t>((y + a.k) * w + (x + a.k))] = y * iw + x;
      return p;
    }
    case K::kZoomOut: {
      RemapPlan p = detail::plan_from(h + 2 * a.k, w + 2 * a.k, h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          p.src[static_cast<size_t>(y * w + x)] = (y + a.k) * (w + 2 * a.k) + (x + a.k);
      return p;
    }
  }
  throw Error("make_inverse_plan: bad augmentation kind");
}

// 1.0 where a pixel of the original h x w frame survives the forward+inverse
// round trip, 0.0 where it is lost (the cropped band of zoom-in).
inline std::vector<double> validity_mask(const AugSpec& a, int h, int w) {
  std::vector<double> m(static_cast<size_t>(h) * w, 1.0);
  if (a.kind == AugSpec::Kind::kZoomIn) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (y < a.k || y >= h - a.k || x < a.k || x >= w - a.k) m[static_cast<size_t>(y * w + x)] = 0.0;
  }
  return m;
}

inline Tensor apply_plan(const Tensor& t, const RemapPlan& p) {
  bool chw = t.ndim() == 3;
  int channels = chw ? t.dim(0) : 1;
  if ((chw ? t.dim(1) : t.dim(0)) != p.in_h || (chw ? t.dim(2) : t.dim(1)) != p.in_w)
    throw Error("apply_plan: tensor " + t.shape_str() + " vs plan input [" + std::to_string(p.in_h) + "," +
                std::to_string(p.in_w) + "]");
  Tensor out = chw ? Tensor::zeros({channels, p.out_h, p.out_w}) : Tensor::zeros({p.out_h, p.out_w});
  int ihw = p.in_h * p.in_w;
  int ohw = p.out_h * p.out_w;
  for (int c = 0; c < channels; ++c)
    for (int o = 0; o < ohw; ++o) {
      int s = p.src[static_cast<size_t>(o)];
      if (s >= 0) out.v[static_cast<size_t>(c * ohw + o)] = t.v[static_cast<size_t>(c * ihw + s)];
    }
  return out;
}

inline Mask apply_plan(const Mask& m, const RemapPlan& p, uint8_t fill = 0) {
  if (m.h != p.in_h || m.w != p.in_w)
    throw Error("apply_plan: mask [" + std::to_string(m.h) + "," + std::to_string(m.w) + "] vs plan input [" +
                std::to_string(p.in_h) + "," + std::to_string(p.in_w) + "]");
  Mask out(p.out_h, p.out_w);
  for (int o = 0; o < p.out_h * p.out_w; ++o) {
    int s = p.src[static_cast<size_t>(o)];
    out.v[static_cast<size_t>(o)] = s >= 0 ? m.v[static_cast<size_t>(s)] : fill;
  }
  return out;
}

}  // namespace mlbseg
