#pragma once

#include <algorithm>
#include <memory>
#include <vector>

#include "mlbseg/augment.hpp"
#include "mlbseg/model.hpp"
#include "mlbseg/tape.hpp"
#include "mlbseg/tensor.hpp"

namespace mlbseg {

// Pseudo label by ensembling: mean of the per-class probability fields of the
// original input and each augmented view (mapped back through the inverse
// transform), argmax per pixel. Pixels a view cannot reconstruct contribute
// nothing; the mean renormalizes by the per-pixel valid-view count. Views are
// accumulated in a canonical order so the result is independent of the spec
// list order.
template <class ModelT>
Mask ensemble_pseudo_label(const ModelT& model, const Tensor& image, const std::vector<AugSpec>& specs) {
  int h = image.ndim() == 3 ? image.dim(1) : image.dim(0);
  int w = image.ndim() == 3 ? image.dim(2) : image.dim(1);
  std::vector<AugSpec> order = specs;
  std::sort(order.begin(), order.end(), [](const AugSpec& a, const AugSpec& b) {
    return a.kind != b.kind ? a.kind < b.kind : a.k < b.k;
  });
  order.insert(order.begin(), AugSpec{});  // the original input always participates

  Tensor acc;  // [C,H,W], sized after the first forward
  std::vector<double> cnt(static_cast<size_t>(h) * w, 0.0);
  for (const AugSpec& spec : order) {
    RemapPlan fwd = make_plan(spec, h, w);
    RemapPlan inv = make_inverse_plan(spec, h, w);
    Tensor probs = softmax_chw(model.logits(apply_plan(image, fwd)));
    Tensor back = apply_plan(probs, inv);
    std::vector<double> valid = validity_mask(spec, h, w);
    if (acc.numel() == 0) acc = Tensor::zeros({back.dim(0), h, w});
    int hw = h * w;
    for (int c = 0; c < back.dim(0); ++c)
      for (int i = 0; i < hw; ++i)
        acc.v[static_cast<size_t>(c * hw + i)] += back.v[static_cast<size_t>(c * hw + i)] * valid[static_cast<size_t>(i)];
    for (int i = 0; i < hw; ++i) cnt[static_cast<size_t>(i)] += valid[static_cast<size_t>(i)];
  }
  int hw = h * w;
  for (int c = 0; c < acc.dim(0); ++c)
    for (int i = 0; i < hw; ++i) acc.v[static_cast<size_t>(c * hw + i)] /= cnt[static_cast<size_t>(i)];
  return pseudo_label(acc);
}

// Pairwise augmentation consistency over raw logit fields. Every view's
// logits are mapped back to the original frame; each unordered view pair
// contributes the squared difference summed over classes and over pixels both
// views can reconstruct. Normalized by (pair count) * (original pixel count).
// View 0 is the original input.
template <class ModelT>
ValueId aug_consistency_loss(TapeD& tape, const ModelT& model, const typename ModelT::Bound& bound,
                             ValueId image, const std::vector<AugSpec>& specs) {
  if (specs.empty()) throw Error("aug_consistency_loss: needs at least one augmentation");
  const Tensor& img = tape.val(image);
  if (img.ndim() != 3) throw Error("aug_consistency_loss: image must be [1,H,W], got " + img.shape_str());
  int h = img.dim(1), w = img.dim(2);

  std::vector<AugSpec> views;
  views.push_back(AugSpec{});
  views.insert(views.end(), specs.begin(), specs.end());

  std::vector<ValueId> back;         // logits in the original frame
  std::vector<std::vector<double>> valid;
  for (const AugSpec& spec : views) {
    ValueId x = spec.kind == AugSpec::Kind::kIdentity
                    ? image
                    : tape.remap(image, std::make_shared<RemapPlan>(make_plan(spec, h, w)));
    ValueId z = model.forward(tape, bound, x);
    back.push_back(spec.kind == AugSpec::Kind::kIdentity
                       ? z
                       : tape.remap(z, std::make_shared<RemapPlan>(make_inverse_plan(spec, h, w))));
    valid.push_back(validity_mask(spec, h, w));
  }

  ValueId total = -1;
  for (size_t q = 0; q < views.size(); ++q)
    for (size_t v = q + 1; v < views.size(); ++v) {
      auto mask = std::make_shared<std::vector<double>>(valid[q]);
      for (size_t i = 0; i < mask->size(); ++i) (*mask)[i] *= valid[v][i];
      ValueId diff = tape.mask_mul(tape.sub(back[q], back[v]), mask);
      ValueId s = tape.sum_all(tape.mul(diff, diff));
      total = total < 0 ? s : tape.add(total, s);
    }
  int qn = static_cast<int>(specs.size());
  double norm = 2.0 / (static_cast<double>(qn + 1) * qn) / (static_cast<double>(h) * w);
  return tape.scale(total, norm);
}

}  // namespace mlbseg
