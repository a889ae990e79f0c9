#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "mlbseg/rng.hpp"
#include "mlbseg/tape.hpp"
#include "mlbseg/tensor.hpp"

namespace mlbseg {

// Channel softmax of a [C,H,W] logit field, max-subtracted per pixel.
inline Tensor softmax_chw(const Tensor& z) {
  Tensor p = z;
  int classes = z.dim(0);
  int hw = z.dim(1) * z.dim(2);
  for (int i = 0; i < hw; ++i) {
    double m = p.v[static_cast<size_t>(i)];
    for (int c = 1; c < classes; ++c) m = std::max(m, p.v[static_cast<size_t>(c * hw + i)]);
    double acc = 0;
    for (int c = 0; c < classes; ++c) {
      double e = std::exp(p.v[static_cast<size_t>(c * hw + i)] - m);
      p.v[static_cast<size_t>(c * hw + i)] = e;
      acc += e;
    }
    for (int c = 0; c < classes; ++c) p.v[static_cast<size_t>(c * hw + i)] /= acc;
  }
  return p;
}

// Per-pixel argmax over channels; ties resolve to the lowest class index.
inline Mask pseudo_label(const Tensor& logits) {
  int classes = logits.dim(0);
  int h = logits.dim(1), w = logits.dim(2);
  int hw = h * w;
  Mask m(h, w);
  for (int i = 0; i < hw; ++i) {
    int best = 0;
    double bv = logits.v[static_cast<size_t>(i)];
    for (int c = 1; c < classes; ++c) {
      double v = logits.v[static_cast<size_t>(c * hw + i)];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    m.v[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return m;
}

// Stand-alone per-pixel cross entropy (same fused log-softmax arithmetic as
// the taped op).
inline Tensor per_pixel_ce(const Tensor& logits, const Mask& target) {
  int classes = logits.dim(0);
  int hw = target.h * target.w;
  if (logits.dim(1) != target.h || logits.dim(2) != target.w)
    throw Error("per_pixel_ce: logits " + logits.shape_str() + " vs target [" + std::to_string(target.h) +
                "," + std::to_string(target.w) + "]");
  Tensor out = Tensor::zeros({target.h, target.w});
  for (int i = 0; i < hw; ++i) {
    if (target.v[static_cast<size_t>(i)] >= classes)
      throw Error("per_pixel_ce: target value " + std::to_string(target.v[static_cast<size_t>(i)]) +
                  " >= C=" + std::to_string(classes));
    double m = logits.v[static_cast<size_t>(i)];
    for (int c = 1; c < classes; ++c) m = std::max(m, logits.v[static_cast<size_t>(c * hw + i)]);
    double acc = 0;
    for (int c = 0; c < classes; ++c) acc += std::exp(logits.v[static_cast<size_t>(c * hw + i)] - m);
    out.v[static_cast<size_t>(i)] =
        m + std::log(acc) - logits.v[static_cast<size_t>(target.v[static_cast<size_t>(i)] * hw + i)];
  }
  return out;
}

struct SegConfig {
  int width = 8;    // F: channels at full resolution
  int classes = 2;  // C: output channels
};

// Small fully convolutional encoder-decoder:
//   enc1a 3x3 1->F, enc1b 3x3 F->F           (full res, relu)
//   avgpool2, down 3x3 F->2F                 (half res, relu)
//   enc2a, enc2b 3x3 2F->2F                  (half res, relu)
//   upsample2, concat enc1b -> 3F
//   dec1a 3x3 3F->F, dec1b 3x3 F->F          (full res, relu)
//   head 1x1 F->C                            (logits)
// Downsampling is pool-then-conv (not strided conv) so the whole network
// commutes exactly with flips and right-angle rotations of even-sized inputs,
// which the augmentation-consistency checks rely on.
class SegModel {
 public:
  SegConfig cfg;
  std::vector<Tensor> params;  // fixed order, see kernel_shapes()

  struct Bound {
    std::vector<ValueId> ids;  // one per tensor in `params`
  };

  static std::vector<std::vector<int>> tensor_shapes(const SegConfig& cfg) {
    int f = cfg.width, c = cfg.classes;
    return {
        {f, 1, 3, 3},     {f},      // enc1a
        {f, f, 3, 3},     {f},      // enc1b
        {2 * f, f, 3, 3}, {2 * f},  // down
        {2 * f, 2 * f, 3, 3}, {2 * f},  // enc2a
        {2 * f, 2 * f, 3, 3}, {2 * f},  // enc2b
        {f, 3 * f, 3, 3}, {f},      // dec1a
        {f, f, 3, 3},     {f},      // dec1b
        {c, f, 1, 1},     {c},      // head
    };
  }

  static SegModel init(const SegConfig& cfg, Rng& rng) {
    if (cfg.width < 1 || cfg.classes < 2)
      throw Error("seg model: width must be >= 1 and classes >= 2");
    SegModel m;
    m.cfg = cfg;
    for (const auto& shape : tensor_shapes(cfg)) {
      Tensor t = Tensor::zeros(shape);
      if (shape.size() == 4) {
        // He-style init: sd = sqrt(2 / fan_in), biases stay zero.
        double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
        double sd = std::sqrt(2.0 / fan_in);
        for (auto& e : t.v) e = rng.normal(0.0, sd);
      }
      m.params.push_back(std::move(t));
    }
    return m;
  }

  int param_count() const {
    int n = 0;
    for (const auto& t : params) n += t.numel();
    return n;
  }

  ParamVector flatten() const {
    ParamVector out;
    out.reserve(static_cast<size_t>(param_count()));
    for (const auto& t : params) out.insert(out.end(), t.v.begin(), t.v.end());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (static_cast<int>(flat.size()) != param_count())
      throw Error("seg model: flat vector size " + std::to_string(flat.size()) + " != param count " +
                  std::to_string(param_count()));
    size_t off = 0;
    for (auto& t : params) {
      std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + t.v.size()),
                t.v.begin());
      off += t.v.size();
    }
  }

  // Registers every tensor as a trainable tape parameter (flat layout matches
  // flatten()).
  Bound bind(TapeD& tape) const {
    Bound b;
    for (const auto& t : params) b.ids.push_back(tape.param(t));
    return b;
  }

  // Registers every tensor as a constant: gradients do not flow into it.
  Bound bind_const(TapeD& tape) const {
    Bound b;
    for (const auto& t : params) b.ids.push_back(tape.constant(t));
    return b;
  }

  // image must be a [1,H,W] value on the tape with even H and W.
  ValueId forward(TapeD& t, const Bound& b, ValueId image) const {
    auto conv_block = [&](ValueId x, int ki, int pad) {
      return t.relu(t.bias_add(t.conv2d(x, b.ids[static_cast<size_t>(ki)], 1, pad), b.ids[static_cast<size_t>(ki) + 1]));
    };
    ValueId e1 = conv_block(image, 0, 1);
    e1 = conv_block(e1, 2, 1);
    ValueId d = conv_block(t.avgpool2(e1), 4, 1);
    d = conv_block(d, 6, 1);
    d = conv_block(d, 8, 1);
    ValueId u = t.concat_c(t.upsample2(d), e1);
    u = conv_block(u, 10, 1);
    u = conv_block(u, 12, 1);
    return t.bias_add(t.conv2d(u, b.ids[14], 1, 0), b.ids[15]);
  }

  // Plain inference on a throwaway tape.
  Tensor logits(const Tensor& image) const {
    TapeD tape;
    Bound b = bind_const(tape);
    ValueId img = tape.constant(image.ndim() == 2 ? Tensor({1, image.dim(0), image.dim(1)}, image.v) : image);
    return tape.val(forward(tape, b, img));
  }

  Mask predict(const Tensor& image) const { return pseudo_label(logits(image)); }
};

}  // namespace mlbseg
