#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlbseg/tensor.hpp"

namespace mlbseg {

// Pixel remapping table for exactly invertible geometric transforms.
// src[o] is the input pixel feeding output pixel o, or -1 for zero fill.
struct RemapPlan {
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;
  std::vector<int> src;
};

using ValueId = int;

// Recorded operation graph over TensorT values. Values are computed at record
// time; the graph supports replay, reverse-mode gradients with respect to the
// registered parameter leaves, and forward-mode tangents along a parameter
// direction.
template <class S>
class Tape {
 public:
  enum class Op : uint8_t {
    kParam,
    kConst,
    kConv2d,
    kBiasAdd,
    kRelu,
    kAvgPool2,
    kUpsample2,
    kConcatC,
    kSoftmaxC,
    kAdd,
    kSub,
    kMul,
    kScale,
    kSumAll,
    kMeanAll,
    kCeMap,
    kRemap,
    kMaskMul,
  };

  ValueId param(TensorT<S> t) {
    ValueId id = push(Op::kParam, -1, -1, std::move(t), true);
    param_ids_.push_back(id);
    param_offsets_.push_back(total_param_size_);
    total_param_size_ += nodes_[static_cast<size_t>(id)].val.numel();
    return id;
  }

  ValueId constant(TensorT<S> t) { return push(Op::kConst, -1, -1, std::move(t), false); }

  ValueId conv2d(ValueId x, ValueId k, int stride = 1, int pad = 0) {
    const auto& xv = val(x);
    const auto& kv = val(k);
    if (xv.ndim() != 3 || kv.ndim() != 4)
      throw Error("conv2d: expected image [C,H,W] and kernel [Co,Ci,kh,kw], got " + xv.shape_str() +
                  " and " + kv.shape_str());
    if (kv.dim(1) != xv.dim(0))
      throw Error("conv2d: kernel input channels " + std::to_string(kv.dim(1)) +
                  " != image channels " + std::to_string(xv.dim(0)));
    if (kv.dim(2) % 2 == 0 || kv.dim(3) % 2 == 0)
      throw Error("conv2d: kernel must be odd-sized, got " + kv.shape_str());
    if (stride < 1) throw Error("conv2d: stride must be >= 1");
    int ho = (xv.dim(1) + 2 * pad - kv.dim(2)) / stride + 1;
    int wo = (xv.dim(2) + 2 * pad - kv.dim(3)) / stride + 1;
    if (ho < 1 || wo < 1)
      throw Error("conv2d: empty output for image " + xv.shape_str() + " kernel " + kv.shape_str());
    Node n;
    n.op = Op::kConv2d;
    n.a = x;
    n.b = k;
    n.stride = stride;
    n.pad = pad;
    n.val = TensorT<S>::zeros({kv.dim(0), ho, wo});
    conv_forward(xv, kv, stride, pad, n.val);
    return push_node(std::move(n));
  }

  ValueId bias_add(ValueId x, ValueId b) {
    const auto& xv = val(x);
    const auto& bv = val(b);
    if (xv.ndim() != 3 || bv.ndim() != 1 || bv.dim(0) != xv.dim(0))
      throw Error("bias_add: image " + xv.shape_str() + " incompatible with bias " + bv.shape_str());
    Node n;
    n.op = Op::kBiasAdd;
    n.a = x;
    n.b = b;
    n.val = xv;
    int hw = xv.dim(1) * xv.dim(2);
    for (int c = 0; c < xv.dim(0); ++c)
      for (int i = 0; i < hw; ++i) n.val.v[static_cast<size_t>(c * hw + i)] += bv.v[static_cast<size_t>(c)];
    return push_node(std::move(n));
  }

  ValueId relu(ValueId x) {
    Node n;
    n.op = Op::kRelu;
    n.a = x;
    n.val = val(x);
    for (auto& e : n.val.v) e = e > S(0) ? e : S(0);
    return push_node(std::move(n));
  }

  ValueId avgpool2(ValueId x) {
    const auto& xv = val(x);
    if (xv.ndim() != 3 || xv.dim(1) % 2 || xv.dim(2) % 2)
      throw Error("avgpool2: needs [C,H,W] with even H,W, got " + xv.shape_str());
    Node n;
    n.op = Op::kAvgPool2;
    n.a = x;
    n.val = TensorT<S>::zeros({xv.dim(0), xv.dim(1) / 2, xv.dim(2) / 2});
    for (int c = 0; c < xv.dim(0); ++c)
      for (int y = 0; y < n.val.dim(1); ++y)
        for (int x2 = 0; x2 < n.val.dim(2); ++x2)
          n.val.at(c, y, x2) = (xv.at(c, 2 * y, 2 * x2) + xv.at(c, 2 * y, 2 * x2 + 1) +
                                xv.at(c, 2 * y + 1, 2 * x2) + xv.at(c, 2 * y + 1, 2 * x2 + 1)) /
                               S(4);
    return push_node(std::move(n));
  }

  ValueId upsample2(ValueId x) {
    const auto& xv = val(x);
    if (xv.ndim() != 3) throw Error("upsample2: needs [C,H,W], got " + xv.shape_str());
    Node n;
    n.op = Op::kUpsample2;
    n.a = x;
    n.val = TensorT<S>::zeros({xv.dim(0), xv.dim(1) * 2, xv.dim(2) * 2});
    for (int c = 0; c < xv.dim(0); ++c)
      for (int y = 0; y < xv.dim(1); ++y)
        for (int x2 = 0; x2 < xv.dim(2); ++x2) {
          S e = xv.at(c, y, x2);
          n.val.at(c, 2 * y, 2 * x2) = e;
          n.val.at(c, 2 * y, 2 * x2 + 1) = e;
          n.val.at(c, 2 * y + 1, 2 * x2) = e;
          n.val.at(c, 2 * y + 1, 2 * x2 + 1) = e;
        }
    return push_node(std::move(n));
  }

  ValueId concat_c(ValueId a, ValueId b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
      throw Error("concat_c: spatial dims differ, " + av.shape_str() + " vs " + bv.shape_str());
    Node n;
    n.op = Op::kConcatC;
    n.a = a;
    n.b = b;
    n.val = TensorT<S>::zeros({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
    std::copy(av.v.begin(), av.v.end(), n.val.v.begin());
    std::copy(bv.v.begin(), bv.v.end(), n.val.v.begin() + av.numel());
    return push_node(std::move(n));
  }

  ValueId softmax_c(ValueId x) {
    const auto& xv = val(x);
    if (xv.ndim() != 3) throw Error("softmax_c: needs [C,H,W], got " + xv.shape_str());
    Node n;
    n.op = Op::kSoftmaxC;
    n.a = x;
    n.val = xv;
    softmax_inplace(n.val);
    return push_node(std::move(n));
  }

  ValueId add(ValueId a, ValueId b) { return binary(Op::kAdd, a, b); }
  ValueId sub(ValueId a, ValueId b) { return binary(Op::kSub, a, b); }
  ValueId mul(ValueId a, ValueId b) { return binary(Op::kMul, a, b); }

  ValueId scale(ValueId x, S c) {
    Node n;
    n.op = Op::kScale;
    n.a = x;
    n.cmul = c;
    n.val = val(x);
    for (auto& e : n.val.v) e *= c;
    return push_node(std::move(n));
  }

  ValueId sum_all(ValueId x) {
    Node n;
    n.op = Op::kSumAll;
    n.a = x;
    S s = 0;
    for (S e : val(x).v) s += e;
    n.val = TensorT<S>::scalar(s);
    return push_node(std::move(n));
  }

  ValueId mean_all(ValueId x) {
    Node n;
    n.op = Op::kMeanAll;
    n.a = x;
    S s = 0;
    for (S e : val(x).v) s += e;
    n.val = TensorT<S>::scalar(s / static_cast<S>(val(x).numel()));
    return push_node(std::move(n));
  }

  // Per-pixel cross entropy with fused log-softmax: out[y,x] = lse(z[.,y,x]) - z[t,y,x].
  ValueId ce_map(ValueId logits, const Mask& target) {
    const auto& zv = val(logits);
    if (zv.ndim() != 3 || zv.dim(1) != target.h || zv.dim(2) != target.w)
      throw Error("ce_map: logits " + zv.shape_str() + " vs target [" + std::to_string(target.h) +
                  "," + std::to_string(target.w) + "]");
    int classes = zv.dim(0);
    for (uint8_t t : target.v)
      if (t >= classes) throw Error("ce_map: target value " + std::to_string(t) + " >= C=" + std::to_string(classes));
    Node n;
    n.op = Op::kCeMap;
    n.a = logits;
    n.target = std::make_shared<Mask>(target);
    n.val = TensorT<S>::zeros({target.h, target.w});
    int hw = target.h * target.w;
    for (int i = 0; i < hw; ++i) {
      S m = zv.v[static_cast<size_t>(i)];
      for (int c = 1; c < classes; ++c) m = std::max(m, zv.v[static_cast<size_t>(c * hw + i)]);
      S acc = 0;
      for (int c = 0; c < classes; ++c) acc += std::exp(zv.v[static_cast<size_t>(c * hw + i)] - m);
      S lse = m + std::log(acc);
      n.val.v[static_cast<size_t>(i)] = lse - zv.v[static_cast<size_t>(target.v[static_cast<size_t>(i)] * hw + i)];
    }
    return push_node(std::move(n));
  }

  ValueId remap(ValueId x, std::shared_ptr<const RemapPlan> plan) {
    const auto& xv = val(x);
    if (xv.ndim() != 3 || xv.dim(1) != plan->in_h || xv.dim(2) != plan->in_w)
      throw Error("remap: input " + xv.shape_str() + " vs plan [" + std::to_string(plan->in_h) + "," +
                  std::to_string(plan->in_w) + "]");
    Node n;
    n.op = Op::kRemap;
    n.a = x;
    n.plan = std::move(plan);
    n.val = TensorT<S>::zeros({xv.dim(0), n.plan->out_h, n.plan->out_w});
    int ihw = n.plan->in_h * n.plan->in_w;
    int ohw = n.plan->out_h * n.plan->out_w;
    for (int c = 0; c < xv.dim(0); ++c)
      for (int o = 0; o < ohw; ++o) {
        int s = n.plan->src[static_cast<size_t>(o)];
        if (s >= 0) n.val.v[static_cast<size_t>(c * ohw + o)] = xv.v[static_cast<size_t>(c * ihw + s)];
      }
    return push_node(std::move(n));
  }

  // Multiplies every channel of x [C,H,W] by a constant H*W mask.
  ValueId mask_mul(ValueId x, std::shared_ptr<const std::vector<S>> mask) {
    const auto& xv = val(x);
    int hw = xv.dim(1) * xv.dim(2);
    if (xv.ndim() != 3 || static_cast<int>(mask->size()) != hw)
      throw Error("mask_mul: image " + xv.shape_str() + " vs mask size " + std::to_string(mask->size()));
    Node n;
    n.op = Op::kMaskMul;
    n.a = x;
    n.mask = std::move(mask);
    n.val = xv;
    for (int c = 0; c < xv.dim(0); ++c)
      for (int i = 0; i < hw; ++i) n.val.v[static_cast<size_t>(c * hw + i)] *= (*n.mask)[static_cast<size_t>(i)];
    return push_node(std::move(n));
  }

  const TensorT<S>& val(ValueId id) const { return nodes_[static_cast<size_t>(id)].val; }
  int size() const { return static_cast<int>(nodes_.size()); }
  int param_size() const { return total_param_size_; }

  // Recomputes all forward values from the leaves. Reproduces the original
  // values bit-identically.
  void replay() {
    for (size_t i = 0; i < nodes_.size(); ++i) recompute(static_cast<ValueId>(i));
  }

  // d(loss)/d(params), flat in parameter registration order. Unreached
  // parameters get zero.
  std::vector<S> reverse_grad(ValueId loss) {
    if (val(loss).numel() != 1) throw Error("reverse_grad: loss must be scalar, got " + val(loss).shape_str());
    grads_.assign(nodes_.size(), {});
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (needs_[i]) grads_[i].assign(nodes_[i].val.v.size(), S(0));
    if (needs_[static_cast<size_t>(loss)]) grads_[static_cast<size_t>(loss)][0] = S(1);
    for (int i = loss; i >= 0; --i)
      if (needs_[static_cast<size_t>(i)]) backward_node(i);
    std::vector<S> out(static_cast<size_t>(total_param_size_), S(0));
    for (size_t p = 0; p < param_ids_.size(); ++p) {
      ValueId id = param_ids_[p];
      const auto& g = grads_[static_cast<size_t>(id)];
      std::copy(g.begin(), g.end(), out.begin() + param_offsets_[p]);
    }
    return out;
  }

  // Propagates the directional derivative along `direction` (same flat layout
  // as the registered parameters) through every recorded value.
  void forward_tangent(std::span<const S> direction) {
    if (static_cast<int>(direction.size()) != total_param_size_)
      throw Error("forward_tangent: direction size " + std::to_string(direction.size()) +
                  " != param size " + std::to_string(total_param_size_));
    tans_.assign(nodes_.size(), {});
    for (size_t i = 0; i < nodes_.size(); ++i) tans_[i].assign(nodes_[i].val.v.size(), S(0));
    for (size_t p = 0; p < param_ids_.size(); ++p) {
      ValueId id = param_ids_[p];
      auto& t = tans_[static_cast<size_t>(id)];
      for (size_t j = 0; j < t.size(); ++j) t[j] = direction[static_cast<size_t>(param_offsets_[p]) + j];
    }
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (needs_[i]) jvp_node(static_cast<ValueId>(i));
  }

  const std::vector<S>& tangent(ValueId id) const { return tans_[static_cast<size_t>(id)]; }
  S tangent_scalar(ValueId id) const { return tans_[static_cast<size_t>(id)][0]; }

 private:
  struct Node {
    Op op;
    ValueId a = -1, b = -1;
    int stride = 1, pad = 0;
    S cmul = S(0);
    std::shared_ptr<const RemapPlan> plan;
    std::shared_ptr<const Mask> target;
    std::shared_ptr<const std::vector<S>> mask;
    TensorT<S> val;
  };

  std::vector<Node> nodes_;
  std::vector<char> needs_;  // reachable from a parameter leaf
  std::vector<ValueId> param_ids_;
  std::vector<int> param_offsets_;
  int total_param_size_ = 0;
  std::vector<std::vector<S>> grads_;
  std::vector<std::vector<S>> tans_;

  ValueId binary(Op op, ValueId a, ValueId b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv))
      throw Error(std::string(op_name(op)) + ": shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = av;
    for (size_t i = 0; i < n.val.v.size(); ++i) {
      S x = av.v[i], y = bv.v[i];
      n.val.v[i] = op == Op::kAdd ? x + y : op == Op::kSub ? x - y : x * y;
    }
    return push_node(std::move(n));
  }

  ValueId push(Op op, ValueId a, ValueId b, TensorT<S> v, bool is_param) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = std::move(v);
    return push_node(std::move(n), is_param);
  }

  ValueId push_node(Node n, bool is_param = false) {
    if (!n.val.all_finite()) throw Error(std::string(op_name(n.op)) + ": non-finite output");
    bool needs = is_param;
    if (n.a >= 0) needs = needs || needs_[static_cast<size_t>(n.a)];
    if (n.b >= 0) needs = needs || needs_[static_cast<size_t>(n.b)];
    nodes_.push_back(std::move(n));
    needs_.push_back(needs ? 1 : 0);
    return static_cast<ValueId>(nodes_.size() - 1);
  }

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kParam: return "param";
      case Op::kConst: return "const";
      case Op::kConv2d: return "conv2d";
      case Op::kBiasAdd: return "bias_add";
      case Op::kRelu: return "relu";
      case Op::kAvgPool2: return "avgpool2";
      case Op::kUpsample2: return "upsample2";
      case Op::kConcatC: return "concat_c";
      case Op::kSoftmaxC: return "softmax_c";
      case Op::kAdd: return "add";
      case Op::kSub: return "sub";
      case Op::kMul: return "mul";
      case Op::kScale: return "scale";
      case Op::kSumAll: return "sum_all";
      case Op::kMeanAll: return "mean_all";
      case Op::kCeMap: return "ce_map";
      case Op::kRemap: return "remap";
      case Op::kMaskMul: return "mask_mul";
    }
    return "?";
  }

  static void softmax_inplace(TensorT<S>& t) {
    int classes = t.dim(0);
    int hw = t.dim(1) * t.dim(2);
    for (int i = 0; i < hw; ++i) {
      S m = t.v[static_cast<size_t>(i)];
      for (int c = 1; c < classes; ++c) m = std::max(m, t.v[static_cast<size_t>(c * hw + i)]);
      S acc = 0;
      for (int c = 0; c < classes; ++c) {
        S e = std::exp(t.v[static_cast<size_t>(c * hw + i)] - m);
        t.v[static_cast<size_t>(c * hw + i)] = e;
        acc += e;
      }
      for (int c = 0; c < classes; ++c) t.v[static_cast<size_t>(c * hw + i)] /= acc;
    }
  }

  struct ConvRange {
    int lo, hi;  // output coordinates with in-bounds input
  };
  static ConvRange conv_range(int out_extent, int in_extent, int stride, int pad, int kpos) {
    // input coord = out*stride - pad + kpos must be in [0, in_extent)
    int lo = 0, hi = out_extent - 1;
    int off = kpos - pad;
    if (off < 0) lo = (-off + stride - 1) / stride;
    int over = in_extent - 1 - off;
    if (over < 0)
      hi = -1;
    else if (over / stride < hi)
      hi = over / stride;
    return {lo, hi};
  }

  static void conv_forward(const TensorT<S>& x, const TensorT<S>& k, int stride, int pad, TensorT<S>& y) {
    int ci_n = x.dim(0), h = x.dim(1), w = x.dim(2);
    int co_n = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    int ho = y.dim(1), wo = y.dim(2);
    for (int co = 0; co < co_n; ++co) {
      S* yp = y.v.data() + static_cast<size_t>(co) * ho * wo;
      for (int ci = 0; ci < ci_n; ++ci) {
        const S* xp = x.v.data() + static_cast<size_t>(ci) * h * w;
        const S* kp = k.v.data() + (static_cast<size_t>(co) * ci_n + ci) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          auto ry = conv_range(ho, h, stride, pad, ky);
          for (int kx = 0; kx < kw; ++kx) {
            auto rx = conv_range(wo, w, stride, pad, kx);
            S wgt = kp[ky * kw + kx];
            if (wgt == S(0)) continue;
            int off = kx - pad;
            for (int oy = ry.lo; oy <= ry.hi; ++oy) {
              int iy = oy * stride - pad + ky;
              const S* xrow = xp + static_cast<size_t>(iy) * w;
              S* yrow = yp + static_cast<size_t>(oy) * wo;
              for (int ox = rx.lo; ox <= rx.hi; ++ox) yrow[ox] += wgt * xrow[ox * stride + off];
            }
          }
        }
      }
    }
  }

  void recompute(ValueId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kConv2d: {
        std::fill(n.val.v.begin(), n.val.v.end(), S(0));
        conv_forward(val(n.a), val(n.b), n.stride, n.pad, n.val);
        break;
      }
      default: {
        // Re-run the same arithmetic the recording constructor used.
        Node fresh = rebuild(n);
        n.val = std::move(fresh.val);
        break;
      }
    }
    if (!n.val.all_finite()) throw Error(std::string(op_name(n.op)) + ": non-finite output");
  }

  Node rebuild(const Node& n) {
    Node out;
    out.val = n.val;
    const TensorT<S>* a = n.a >= 0 ? &val(n.a) : nullptr;
    const TensorT<S>* b = n.b >= 0 ? &val(n.b) : nullptr;
    switch (n.op) {
      case Op::kBiasAdd: {
        out.val = *a;
        int hw = a->dim(1) * a->dim(2);
        for (int c = 0; c < a->dim(0); ++c)
          for (int i = 0; i < hw; ++i) out.val.v[static_cast<size_t>(c * hw + i)] += b->v[static_cast<size_t>(c)];
        break;
      }
      case Op::kRelu: {
        out.val = *a;
        for (auto& e : out.val.v) e = e > S(0) ? e : S(0);
        break;
      }
      case Op::kAvgPool2: {
        for (int c = 0; c < out.val.dim(0); ++c)
          for (int y = 0; y < out.val.dim(1); ++y)
            for (int x2 = 0; x2 < out.val.dim(2); ++x2)
              out.val.at(c, y, x2) = (a->at(c, 2 * y, 2 * x2) + a->at(c, 2 * y, 2 * x2 + 1) +
                                      a->at(c, 2 * y + 1, 2 * x2) + a->at(c, 2 * y + 1, 2 * x2 + 1)) /
                                     S(4);
        break;
      }
      case Op::kUpsample2: {
        for (int c = 0; c < a->dim(0); ++c)
          for (int y = 0; y < a->dim(1); ++y)
            for (int x2 = 0; x2 < a->dim(2); ++x2) {
              S e = a->at(c, y, x2);
              out.val.at(c, 2 * y, 2 * x2) = e;
              out.val.at(c, 2 * y, 2 * x2 + 1) = e;
              out.val.at(c, 2 * y + 1, 2 * x2) = e;
              out.val.at(c, 2 * y + 1, 2 * x2 + 1) = e;
            }
        break;
      }
      case Op::kConcatC: {
        std::copy(a->v.begin(), a->v.end(), out.val.v.begin());
        std::copy(b->v.begin(), b->v.end(), out.val.v.begin() + a->numel());
        break;
      }
      case Op::kSoftmaxC: {
        out.val = *a;
        softmax_inplace(out.val);
        break;
      }
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul: {
        for (size_t i = 0; i < out.val.v.size(); ++i) {
          S x = a->v[i], y = b->v[i];
          out.val.v[i] = n.op == Op::kAdd ? x + y : n.op == Op::kSub ? x - y : x * y;
        }
        break;
      }
      case Op::kScale: {
        out.val = *a;
        for (auto& e : out.val.v) e *= n.cmul;
        break;
      }
      case Op::kSumAll: {
        S s = 0;
        for (S e : a->v) s += e;
        out.val.v[0] = s;
        break;
      }
      case Op::kMeanAll: {
        S s = 0;
        for (S e : a->v) s += e;
        out.val.v[0] = s / static_cast<S>(a->numel());
        break;
      }
      case Op::kCeMap: {
        int classes = a->dim(0);
        int hw = n.target->h * n.target->w;
        for (int i = 0; i < hw; ++i) {
          S m = a->v[static_cast<size_t>(i)];
          for (int c = 1; c < classes; ++c) m = std::max(m, a->v[static_cast<size_t>(c * hw + i)]);
          S acc = 0;
          for (int c = 0; c < classes; ++c) acc += std::exp(a->v[static_cast<size_t>(c * hw + i)] - m);
          out.val.v[static_cast<size_t>(i)] =
              m + std::log(acc) - a->v[static_cast<size_t>(n.target->v[static_cast<size_t>(i)] * hw + i)];
        }
        break;
      }
      case Op::kRemap: {
        int ihw = n.plan->in_h * n.plan->in_w;
        int ohw = n.plan->out_h * n.plan->out_w;
        std::fill(out.val.v.begin(), out.val.v.end(), S(0));
        for (int c = 0; c < a->dim(0); ++c)
          for (int o = 0; o < ohw; ++o) {
            int s = n.plan->src[static_cast<size_t>(o)];
            if (s >= 0) out.val.v[static_cast<size_t>(c * ohw + o)] = a->v[static_cast<size_t>(c * ihw + s)];
          }
        break;
      }
      default:
        break;
    }
    return out;
  }

  void backward_node(ValueId id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const auto& gy = grads_[static_cast<size_t>(id)];
    auto ga = [&]() -> std::vector<S>* {
      return n.a >= 0 && needs_[static_cast<size_t>(n.a)] ? &grads_[static_cast<size_t>(n.a)] : nullptr;
    };
    auto gb = [&]() -> std::vector<S>* {
      return n.b >= 0 && needs_[static_cast<size_t>(n.b)] ? &grads_[static_cast<size_t>(n.b)] : nullptr;
    };
    switch (n.op) {
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kConv2d: {
        const auto& x = val(n.a);
        const auto& k = val(n.b);
        auto* gx = ga();
        auto* gk = gb();
        int ci_n = x.dim(0), h = x.dim(1), w = x.dim(2);
        int co_n = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        int ho = n.val.dim(1), wo = n.val.dim(2);
        for (int co = 0; co < co_n; ++co) {
          const S* gyp = gy.data() + static_cast<size_t>(co) * ho * wo;
          for (int ci = 0; ci < ci_n; ++ci) {
            const S* xp = x.v.data() + static_cast<size_t>(ci) * h * w;
            S* gxp = gx ? gx->data() + static_cast<size_t>(ci) * h * w : nullptr;
            const S* kp = k.v.data() + (static_cast<size_t>(co) * ci_n + ci) * kh * kw;
            S* gkp = gk ? gk->data() + (static_cast<size_t>(co) * ci_n + ci) * kh * kw : nullptr;
            for (int ky = 0; ky < kh; ++ky) {
              auto ry = conv_range(ho, h, n.stride, n.pad, ky);
              for (int kx = 0; kx < kw; ++kx) {
                auto rx = conv_range(wo, w, n.stride, n.pad, kx);
                S wgt = kp[ky * kw + kx];
                S acc = 0;
                int off = kx - n.pad;
                for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                  int iy = oy * n.stride - n.pad + ky;
                  const S* grow = gyp + static_cast<size_t>(oy) * wo;
                  const S* xrow = xp + static_cast<size_t>(iy) * w;
                  S* gxrow = gxp ? gxp + static_cast<size_t>(iy) * w : nullptr;
                  for (int ox = rx.lo; ox <= rx.hi; ++ox) {
                    S g = grow[ox];
                    if (gxrow) gxrow[ox * n.stride + off] += g * wgt;
                    acc += g * xrow[ox * n.stride + off];
                  }
                }
                if (gkp) gkp[ky * kw + kx] += acc;
              }
            }
          }
        }
        break;
      }
      case Op::kBiasAdd: {
        const auto& x = val(n.a);
        int hw = x.dim(1) * x.dim(2);
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
        if (auto* g = gb())
          for (int c = 0; c < x.dim(0); ++c) {
            S acc = 0;
            for (int i = 0; i < hw; ++i) acc += gy[static_cast<size_t>(c * hw + i)];
            (*g)[static_cast<size_t>(c)] += acc;
          }
        break;
      }
      case Op::kRelu: {
        const auto& x = val(n.a);
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i)
            if (x.v[i] > S(0)) (*gx)[i] += gy[i];
        break;
      }
      case Op::kAvgPool2: {
        if (auto* gx = ga()) {
          const auto& x = val(n.a);
          int w = x.dim(2), wo = n.val.dim(2), ho = n.val.dim(1);
          for (int c = 0; c < x.dim(0); ++c)
            for (int y = 0; y < ho; ++y)
              for (int x2 = 0; x2 < wo; ++x2) {
                S g = gy[static_cast<size_t>((c * ho + y) * wo + x2)] / S(4);
                size_t base = static_cast<size_t>(c) * x.dim(1) * w;
                (*gx)[base + static_cast<size_t>(2 * y) * w + 2 * x2] += g;
                (*gx)[base + static_cast<size_t>(2 * y) * w + 2 * x2 + 1] += g;
                (*gx)[base + static_cast<size_t>(2 * y + 1) * w + 2 * x2] += g;
                (*gx)[base + static_cast<size_t>(2 * y + 1) * w + 2 * x2 + 1] += g;
              }
        }
        break;
      }
      case Op::kUpsample2: {
        if (auto* gx = ga()) {
          const auto& x = val(n.a);
          int h = x.dim(1), w = x.dim(2), wo = n.val.dim(2);
          for (int c = 0; c < x.dim(0); ++c)
            for (int y = 0; y < h; ++y)
              for (int x2 = 0; x2 < w; ++x2) {
                size_t base = static_cast<size_t>(c) * (2 * h) * wo;
                S g = gy[base + static_cast<size_t>(2 * y) * wo + 2 * x2] +
                      gy[base + static_cast<size_t>(2 * y) * wo + 2 * x2 + 1] +
                      gy[base + static_cast<size_t>(2 * y + 1) * wo + 2 * x2] +
                      gy[base + static_cast<size_t>(2 * y + 1) * wo + 2 * x2 + 1];
                (*gx)[static_cast<size_t>((c * h + y) * w + x2)] += g;
              }
        }
        break;
      }
      case Op::kConcatC: {
        int an = val(n.a).numel();
        if (auto* gx = ga())
          for (int i = 0; i < an; ++i) (*gx)[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)];
        if (auto* g = gb())
          for (size_t i = static_cast<size_t>(an); i < gy.size(); ++i) (*g)[i - static_cast<size_t>(an)] += gy[i];
        break;
      }
      case Op::kSoftmaxC: {
        if (auto* gx = ga()) {
          const auto& y = n.val;
          int classes = y.dim(0);
          int hw = y.dim(1) * y.dim(2);
          for (int i = 0; i < hw; ++i) {
            S dot = 0;
            for (int c = 0; c < classes; ++c)
              dot += gy[static_cast<size_t>(c * hw + i)] * y.v[static_cast<size_t>(c * hw + i)];
            for (int c = 0; c < classes; ++c)
              (*gx)[static_cast<size_t>(c * hw + i)] +=
                  y.v[static_cast<size_t>(c * hw + i)] * (gy[static_cast<size_t>(c * hw + i)] - dot);
          }
        }
        break;
      }
      case Op::kAdd: {
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
        if (auto* g = gb())
          for (size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
        break;
      }
      case Op::kSub: {
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
        if (auto* g = gb())
          for (size_t i = 0; i < gy.size(); ++i) (*g)[i] -= gy[i];
        break;
      }
      case Op::kMul: {
        const auto& av = val(n.a);
        const auto& bv = val(n.b);
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * bv.v[i];
        if (auto* g = gb())
          for (size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * av.v[i];
        break;
      }
      case Op::kScale: {
        if (auto* gx = ga())
          for (size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * n.cmul;
        break;
      }
      case Op::kSumAll: {
        if (auto* gx = ga())
          for (auto& e : *gx) e += gy[0];
        break;
      }
      case Op::kMeanAll: {
        if (auto* gx = ga()) {
          S g = gy[0] / static_cast<S>(gx->size());
          for (auto& e : *gx) e += g;
        }
        break;
      }
      case Op::kCeMap: {
        if (auto* gx = ga()) {
          const auto& z = val(n.a);
          int classes = z.dim(0);
          int hw = n.target->h * n.target->w;
          for (int i = 0; i < hw; ++i) {
            S g = gy[static_cast<size_t>(i)];
            if (g == S(0)) continue;
            S m = z.v[static_cast<size_t>(i)];
            for (int c = 1; c < classes; ++c) m = std::max(m, z.v[static_cast<size_t>(c * hw + i)]);
            S acc = 0;
            for (int c = 0; c < classes; ++c) acc += std::exp(z.v[static_cast<size_t>(c * hw + i)] - m);
            int t = n.target->v[static_cast<size_t>(i)];
            for (int c = 0; c < classes; ++c) {
              S p = std::exp(z.v[static_cast<size_t>(c * hw + i)] - m) / acc;
              (*gx)[static_cast<size_t>(c * hw + i)] += g * (p - (c == t ? S(1) : S(0)));
            }
          }
        }
        break;
      }
      case Op::kRemap: {
        if (auto* gx = ga()) {
          int ihw = n.plan->in_h * n.plan->in_w;
          int ohw = n.plan->out_h * n.plan->out_w;
          for (int c = 0; c < val(n.a).dim(0); ++c)
            for (int o = 0; o < ohw; ++o) {
              int s = n.plan->src[static_cast<size_t>(o)];
              if (s >= 0) (*gx)[static_cast<size_t>(c * ihw + s)] += gy[static_cast<size_t>(c * ohw + o)];
            }
        }
        break;
      }
      case Op::kMaskMul: {
        if (auto* gx = ga()) {
          int hw = n.val.dim(1) * n.val.dim(2);
          for (int c = 0; c < n.val.dim(0); ++c)
            for (int i = 0; i < hw; ++i)
              (*gx)[static_cast<size_t>(c * hw + i)] +=
                  gy[static_cast<size_t>(c * hw + i)] * (*n.mask)[static_cast<size_t>(i)];
        }
        break;
      }
    }
  }

  void jvp_node(ValueId id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    auto& ty = tans_[static_cast<size_t>(id)];
    const std::vector<S>* ta = n.a >= 0 ? &tans_[static_cast<size_t>(n.a)] : nullptr;
    const std::vector<S>* tb = n.b >= 0 ? &tans_[static_cast<size_t>(n.b)] : nullptr;
    switch (n.op) {
      case Op::kParam:
      case Op::kConst:
        break;  // seeded before the sweep
      case Op::kConv2d: {
        const auto& x = val(n.a);
        const auto& k = val(n.b);
        int ci_n = x.dim(0), h = x.dim(1), w = x.dim(2);
        int co_n = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        int ho = n.val.dim(1), wo = n.val.dim(2);
        bool a_live = needs_[static_cast<size_t>(n.a)];
        bool b_live = needs_[static_cast<size_t>(n.b)];
        for (int co = 0; co < co_n; ++co) {
          S* typ = ty.data() + static_cast<size_t>(co) * ho * wo;
          for (int ci = 0; ci < ci_n; ++ci) {
            const S* xp = x.v.data() + static_cast<size_t>(ci) * h * w;
            const S* txp = ta->data() + static_cast<size_t>(ci) * h * w;
            const S* kp = k.v.data() + (static_cast<size_t>(co) * ci_n + ci) * kh * kw;
            const S* tkp = tb->data() + (static_cast<size_t>(co) * ci_n + ci) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
              auto ry = conv_range(ho, h, n.stride, n.pad, ky);
              for (int kx = 0; kx < kw; ++kx) {
                auto rx = conv_range(wo, w, n.stride, n.pad, kx);
                S wgt = kp[ky * kw + kx];
                S twgt = b_live ? tkp[ky * kw + kx] : S(0);
                if ((!a_live || wgt == S(0)) && twgt == S(0)) continue;
                int off = kx - n.pad;
                for (int oy = ry.lo; oy <= ry.hi; ++oy) {
                  int iy = oy * n.stride - n.pad + ky;
                  const S* xrow = xp + static_cast<size_t>(iy) * w;
                  const S* txrow = txp + static_cast<size_t>(iy) * w;
                  S* trow = typ + static_cast<size_t>(oy) * wo;
                  if (a_live && twgt != S(0)) {
                    for (int ox = rx.lo; ox <= rx.hi; ++ox)
                      trow[ox] += wgt * txrow[ox * n.stride + off] + twgt * xrow[ox * n.stride + off];
                  } else if (a_live) {
                    for (int ox = rx.lo; ox <= rx.hi; ++ox) trow[ox] += wgt * txrow[ox * n.stride + off];
                  } else {
                    for (int ox = rx.lo; ox <= rx.hi; ++ox) trow[ox] += twgt * xrow[ox * n.stride + off];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case Op::kBiasAdd: {
        const auto& x = val(n.a);
        int hw = x.dim(1) * x.dim(2);
        for (int c = 0; c < x.dim(0); ++c)
          for (int i = 0; i < hw; ++i)
            ty[static_cast<size_t>(c * hw + i)] = (*ta)[static_cast<size_t>(c * hw + i)] + (*tb)[static_cast<size_t>(c)];
        break;
      }
      case Op::kRelu: {
        const auto& x = val(n.a);
        for (size_t i = 0; i < ty.size(); ++i) ty[i] = x.v[i] > S(0) ? (*ta)[i] : S(0);
        break;
      }
      case Op::kAvgPool2: {
        const auto& x = val(n.a);
        int w = x.dim(2), ho = n.val.dim(1), wo = n.val.dim(2);
        for (int c = 0; c < x.dim(0); ++c)
          for (int y = 0; y < ho; ++y)
            for (int x2 = 0; x2 < wo; ++x2) {
              size_t base = static_cast<size_t>(c) * x.dim(1) * w;
              ty[static_cast<size_t>((c * ho + y) * wo + x2)] =
                  ((*ta)[base + static_cast<size_t>(2 * y) * w + 2 * x2] +
                   (*ta)[base + static_cast<size_t>(2 * y) * w + 2 * x2 + 1] +
                   (*ta)[base + static_cast<size_t>(2 * y + 1) * w + 2 * x2] +
                   (*ta)[base + static_cast<size_t>(2 * y + 1) * w + 2 * x2 + 1]) /
                  S(4);
            }
        break;
      }
      case Op::kUpsample2: {
        const auto& x = val(n.a);
        int h = x.dim(1), w = x.dim(2), wo = n.val.dim(2);
        for (int c = 0; c < x.dim(0); ++c)
          for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 < w; ++x2) {
              S e = (*ta)[static_cast<size_t>((c * h + y) * w + x2)];
              size_t base = static_cast<size_t>(c) * (2 * h) * wo;
              ty[base + static_cast<size_t>(2 * y) * wo + 2 * x2] = e;
              ty[base + static_cast<size_t>(2 * y) * wo + 2 * x2 + 1] = e;
              ty[base + static_cast<size_t>(2 * y + 1) * wo + 2 * x2] = e;
              ty[base + static_cast<size_t>(2 * y + 1) * wo + 2 * x2 + 1] = e;
            }
        break;
      }
      case Op::kConcatC: {
        std::copy(ta->begin(), ta->end(), ty.begin());
        std::copy(tb->begin(), tb->end(), ty.begin() + static_cast<long>(ta->size()));
        break;
      }
      case Op::kSoftmaxC: {
        const auto& y = n.val;
        int classes = y.dim(0);
        int hw = y.dim(1) * y.dim(2);
        for (int i = 0; i < hw; ++i) {
          S dot = 0;
          for (int c = 0; c < classes; ++c)
            dot += y.v[static_cast<size_t>(c * hw + i)] * (*ta)[static_cast<size_t>(c * hw + i)];
          for (int c = 0; c < classes; ++c)
            ty[static_cast<size_t>(c * hw + i)] =
                y.v[static_cast<size_t>(c * hw + i)] * ((*ta)[static_cast<size_t>(c * hw + i)] - dot);
        }
        break;
      }
      case Op::kAdd:
        for (size_t i = 0; i < ty.size(); ++i) ty[i] = (*ta)[i] + (*tb)[i];
        break;
      case Op::kSub:
        for (size_t i = 0; i < ty.size(); ++i) ty[i] = (*ta)[i] - (*tb)[i];
        break;
      case Op::kMul: {
        const auto& av = val(n.a);
        const auto& bv = val(n.b);
        for (size_t i = 0; i < ty.size(); ++i) ty[i] = (*ta)[i] * bv.v[i] + av.v[i] * (*tb)[i];
        break;
      }
      case Op::kScale:
        for (size_t i = 0; i < ty.size(); ++i) ty[i] = (*ta)[i] * n.cmul;
        break;
      case Op::kSumAll: {
        S s = 0;
        for (S e : *ta) s += e;
        ty[0] = s;
        break;
      }
      case Op::kMeanAll: {
        S s = 0;
        for (S e : *ta) s += e;
        ty[0] = s / static_cast<S>(ta->size());
        break;
      }
      case Op::kCeMap: {
        const auto& z = val(n.a);
        int classes = z.dim(0);
        int hw = n.target->h * n.target->w;
        for (int i = 0; i < hw; ++i) {
          S m = z.v[static_cast<size_t>(i)];
          for (int c = 1; c < classes; ++c) m = std::max(m, z.v[static_cast<size_t>(c * hw + i)]);
          S acc = 0;
          for (int c = 0; c < classes; ++c) acc += std::exp(z.v[static_cast<size_t>(c * hw + i)] - m);
          int t = n.target->v[static_cast<size_t>(i)];
          S tan = 0;
          for (int c = 0; c < classes; ++c) {
            S p = std::exp(z.v[static_cast<size_t>(c * hw + i)] - m) / acc;
            tan += p * (*ta)[static_cast<size_t>(c * hw + i)];
          }
          ty[static_cast<size_t>(i)] = tan - (*ta)[static_cast<size_t>(t * hw + i)];
        }
        break;
      }
      case Op::kRemap: {
        int ihw = n.plan->in_h * n.plan->in_w;
        int ohw = n.plan->out_h * n.plan->out_w;
        for (int c = 0; c < val(n.a).dim(0); ++c)
          for (int o = 0; o < ohw; ++o) {
            int s = n.plan->src[static_cast<size_t>(o)];
            ty[static_cast<size_t>(c * ohw + o)] = s >= 0 ? (*ta)[static_cast<size_t>(c * ihw + s)] : S(0);
          }
        break;
      }
      case Op::kMaskMul: {
        int hw = n.val.dim(1) * n.val.dim(2);
        for (int c = 0; c < n.val.dim(0); ++c)
          for (int i = 0; i < hw; ++i)
            ty[static_cast<size_t>(c * hw + i)] = (*ta)[static_cast<size_t>(c * hw + i)] * (*n.mask)[static_cast<size_t>(i)];
        break;
      }
    }
  }
};

using TapeD = Tape<double>;

}  // namespace mlbseg
