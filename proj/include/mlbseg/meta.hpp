#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "mlbseg/augment.hpp"
#include "mlbseg/model.hpp"
#include "mlbseg/ple.hpp"
#include "mlbseg/rng.hpp"
#include "mlbseg/tape.hpp"
#include "mlbseg/teacher.hpp"
#include "mlbseg/tensor.hpp"
#include "mlbseg/threading.hpp"

namespace mlbseg {

struct LabeledImage {
  Tensor image;  // [1,H,W]
  Mask mask;
};

// A training sample carrying the label initialized from the pretrained model;
// the pseudo label is regenerated every step from the current student.
struct BootSample {
  Tensor image;  // [1,H,W]
  Mask label_init;
};

// Per-sample pixel weight maps for the initialized-label and pseudo-label
// loss terms.
struct WeightMapPair {
  Tensor w_n;  // [H,W]
  Tensor w_p;  // [H,W]
};

struct HyperConfig {
  double alpha = 0.005;       // inner/outer step size
  double beta = 1.0;          // meta step size (cancelled by normalization)
  double eps = 1e-12;         // normalization guard
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int b_c = 4;                // clean meta batch size
  int b_n = 4;                // training batch size
  double lambda_aug = 1.0;    // augmentation consistency coefficient
  double lambda_st = 1.0;     // student-teacher consistency coefficient
  std::vector<AugSpec> augs;  // Q = augs.size(); empty disables the ensemble
  double gamma = 0.1;         // teacher input perturbation strength
  double mu = 0.0;
  double sigma = 1.0;
  double ema_decay = 0.99;
  int epochs_baseline = 30;
  int epochs_mlb = 100;
  uint64_t seed = 1;

  void validate() const {
    if (!(alpha > 0)) throw Error("config: alpha must be > 0");
    if (!(beta > 0)) throw Error("config: beta must be > 0");
    if (!(eps > 0)) throw Error("config: eps must be > 0");
    if (ema_decay < 0 || ema_decay >= 1) throw Error("config: ema_decay must be in [0,1)");
    if (momentum < 0 || momentum >= 1) throw Error("config: momentum must be in [0,1)");
    if (weight_decay < 0) throw Error("config: weight_decay must be >= 0");
    if (b_c < 1 || b_n < 1) throw Error("config: batch sizes must be >= 1");
    if (gamma < 0 || sigma < 0) throw Error("config: gamma and sigma must be >= 0");
    if (epochs_baseline < 0 || epochs_mlb < 0) throw Error("config: epoch counts must be >= 0");
  }
};

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient (v <- m*v + g + wd*theta; theta <- theta - lr*v).
struct SgdOpt {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  ParamVector velocity;

  void reset(int n) { velocity.assign(static_cast<size_t>(n), 0.0); }

  void apply(ParamVector& theta, const ParamVector& grad) {
    if (velocity.size() != theta.size() || grad.size() != theta.size())
      throw Error("sgd: layout mismatch (theta " + std::to_string(theta.size()) + ", grad " +
                  std::to_string(grad.size()) + ", velocity " + std::to_string(velocity.size()) + ")");
    for (size_t i = 0; i < theta.size(); ++i) {
      double g = grad[i] + weight_decay * theta[i];
      velocity[i] = momentum * velocity[i] + g;
      theta[i] -= lr * velocity[i];
    }
  }
};

// Gradient of the mean per-pixel-averaged cross entropy over the clean batch,
// taken at the current parameters.
template <class ModelT>
ParamVector clean_meta_gradient(const ModelT& model, const std::vector<LabeledImage>& s_c) {
  if (s_c.empty()) throw Error("meta: clean batch is empty");
  TapeD tape;
  typename ModelT::Bound b = model.bind(tape);
  ValueId total = -1;
  for (const auto& s : s_c) {
    ValueId z = model.forward(tape, b, tape.constant(s.image));
    ValueId m = tape.mean_all(tape.ce_map(z, s.mask));
    total = total < 0 ? m : tape.add(total, m);
  }
  ValueId loss = tape.scale(total, 1.0 / static_cast<double>(s_c.size()));
  return tape.reverse_grad(loss);
}

// Raw (unclamped, unnormalized) meta weight maps. One reverse pass computes
// the clean-batch gradient direction; one forward-tangent pass per training
// sample then yields, for every pixel and both label families at once, the
// alignment alpha*beta*<g_clean, d(per-pixel CE)/d(theta)>. This equals the
// negative meta gradient of the clean loss after the virtual inner step with
// respect to that pixel's weight, evaluated at zero weights.
template <class ModelT>
std::vector<WeightMapPair> meta_weight_maps(const ModelT& model, const std::vector<BootSample>& s_n,
                                            const std::vector<Mask>& labels_p,
                                            const std::vector<LabeledImage>& s_c, const HyperConfig& cfg) {
  if (s_n.empty()) throw Error("meta: training batch is empty");
  if (labels_p.size() != s_n.size())
    throw Error("meta: pseudo label count " + std::to_string(labels_p.size()) + " != batch size " +
                std::to_string(s_n.size()));
  ParamVector g_meta = clean_meta_gradient(model, s_c);
  double ab = cfg.alpha * cfg.beta;
  std::vector<WeightMapPair> out(s_n.size());
  parallel_for(static_cast<int>(s_n.size()), [&](int j) {
    const BootSample& s = s_n[static_cast<size_t>(j)];
    TapeD tape;
    typename ModelT::Bound b = model.bind(tape);
    ValueId z = model.forward(tape, b, tape.constant(s.image));
    ValueId ce_n = tape.ce_map(z, s.label_init);
    ValueId ce_p = tape.ce_map(z, labels_p[static_cast<size_t>(j)]);
    tape.forward_tangent(g_meta);
    WeightMapPair& w = out[static_cast<size_t>(j)];
    int h = s.label_init.h, wd = s.label_init.w;
    w.w_n = Tensor::zeros({h, wd});
    w.w_p = Tensor::zeros({h, wd});
    const auto& tn = tape.tangent(ce_n);
    const auto& tp = tape.tangent(ce_p);
    for (size_t i = 0; i < tn.size(); ++i) {
      w.w_n.v[i] = ab * tn[i];
      w.w_p.v[i] = ab * tp[i];
    }
  });
  return out;
}

// Clamp to non-negative, then normalize each family by its batch-wide sum
// plus eps. After this, each family sums to ~1 across the whole batch (or to
// 0 when nothing survived the clamp).
inline std::vector<WeightMapPair> clamp_normalize(std::vector<WeightMapPair> raw, double eps) {
  if (!(eps > 0)) throw Error("clamp_normalize: eps must be > 0");
  double sum_n = 0, sum_p = 0;
  for (auto& pair : raw) {
    for (auto& e : pair.w_n.v) {
      e = e > 0 ? e : 0.0;
      sum_n += e;
    }
    for (auto& e : pair.w_p.v) {
      e = e > 0 ? e : 0.0;
      sum_p += e;
    }
  }
  for (auto& pair : raw) {
    for (auto& e : pair.w_n.v) e /= sum_n + eps;
    for (auto& e : pair.w_p.v) e /= sum_p + eps;
  }
  return raw;
}

// Sum over the batch of <w_n, loss_n> + <w_p, loss_p> (plain, untaped).
inline double weighted_bootstrap_loss(const std::vector<Tensor>& loss_n, const std::vector<Tensor>& loss_p,
                                      const std::vector<WeightMapPair>& w) {
  if (loss_n.size() != w.size() || loss_p.size() != w.size())
    throw Error("weighted_bootstrap_loss: batch sizes differ");
  double acc = 0;
  for (size_t j = 0; j < w.size(); ++j) {
    if (!loss_n[j].same_shape(w[j].w_n) || !loss_p[j].same_shape(w[j].w_p))
      throw Error("weighted_bootstrap_loss: map shape mismatch at sample " + std::to_string(j));
    for (size_t i = 0; i < loss_n[j].v.size(); ++i) acc += w[j].w_n.v[i] * loss_n[j].v[i];
    for (size_t i = 0; i < loss_p[j].v.size(); ++i) acc += w[j].w_p.v[i] * loss_p[j].v[i];
  }
  return acc;
}

struct StepResult {
  std::vector<WeightMapPair> weights;  // the maps used by the real update
  std::vector<Mask> pseudo;            // pseudo labels used for the p-family
  double loss_boot = 0;
  double loss_aug = 0;  // batch mean, before lambda
  double loss_st = 0;   // batch mean, before lambda
  double loss_total = 0;
};

// One full training step: pseudo labels (ensembled when augmentations are
// configured), meta weight maps, clamp+normalize, then a real SGD update on
// weighted bootstrap loss + lambda_aug * augmentation consistency
// + lambda_st * teacher consistency (both batch means). When
// `override_weights` is given the meta machinery is skipped and those maps
// are used as-is (fixed-weight arm, oracle tests). The teacher, when present,
// is advanced by EMA after the update.
template <class ModelT>
StepResult mlb_step(ModelT& model, SgdOpt& opt, TeacherState<ModelT>* teacher,
                    const std::vector<BootSample>& s_n, const std::vector<LabeledImage>& s_c,
                    const HyperConfig& cfg, Rng& rng,
                    const std::vector<WeightMapPair>* override_weights = nullptr) {
  cfg.validate();
  if (s_n.empty()) throw Error("mlb_step: training batch is empty");
  StepResult res;

  // Step 1 input: pseudo labels from the current student (or its ensemble).
  res.pseudo.resize(s_n.size());
  parallel_for(static_cast<int>(s_n.size()), [&](int j) {
    const Tensor& img = s_n[static_cast<size_t>(j)].image;
    res.pseudo[static_cast<size_t>(j)] = cfg.augs.empty()
                                             ? pseudo_label(model.logits(img))
                                             : ensemble_pseudo_label(model, img, cfg.augs);
  });

  // Steps 1+2: meta weight maps, or caller-supplied ones.
  if (override_weights) {
    if (override_weights->size() != s_n.size())
      throw Error("mlb_step: override weight count " + std::to_string(override_weights->size()) +
                  " != batch size " + std::to_string(s_n.size()));
    res.weights = *override_weights;
  } else {
    res.weights = clamp_normalize(meta_weight_maps(model, s_n, res.pseudo, s_c, cfg), cfg.eps);
  }

  // Step 3: real update.
  TapeD tape;
  typename ModelT::Bound bound = model.bind(tape);
  std::vector<ValueId> images;
  ValueId boot = -1;
  for (size_t j = 0; j < s_n.size(); ++j) {
    ValueId img = tape.constant(s_n[j].image);
    images.push_back(img);
    ValueId z = model.forward(tape, bound, img);
    ValueId ce_n = tape.ce_map(z, s_n[j].label_init);
    ValueId ce_p = tape.ce_map(z, res.pseudo[j]);
    ValueId wn = tape.constant(res.weights[j].w_n);
    ValueId wp = tape.constant(res.weights[j].w_p);
    ValueId term = tape.add(tape.sum_all(tape.mul(ce_n, wn)), tape.sum_all(tape.mul(ce_p, wp)));
    boot = boot < 0 ? term : tape.add(boot, term);
  }
  res.loss_boot = tape.val(boot).v[0];
  ValueId loss = boot;

  double inv_b = 1.0 / static_cast<double>(s_n.size());
  if (!cfg.augs.empty() && cfg.lambda_aug != 0) {
    ValueId aug = -1;
    for (size_t j = 0; j < s_n.size(); ++j) {
      ValueId a = aug_consistency_loss(tape, model, bound, images[j], cfg.augs);
      aug = aug < 0 ? a : tape.add(aug, a);
    }
    res.loss_aug = tape.val(aug).v[0] * inv_b;
    loss = tape.add(loss, tape.scale(aug, cfg.lambda_aug * inv_b));
  }
  if (teacher && cfg.lambda_st != 0) {
    ValueId st = -1;
    for (size_t j = 0; j < s_n.size(); ++j) {
      ValueId s = st_consistency_loss(tape, model, bound, teacher->model, images[j], cfg.gamma, cfg.mu,
                                      cfg.sigma, rng);
      st = st < 0 ? s : tape.add(st, s);
    }
    res.loss_st = tape.val(st).v[0] * inv_b;
    loss = tape.add(loss, tape.scale(st, cfg.lambda_st * inv_b));
  }
  res.loss_total = tape.val(loss).v[0];

  ParamVector grad = tape.reverse_grad(loss);
  ParamVector theta = model.flatten();
  opt.apply(theta, grad);
  model.unflatten(theta);

  if (teacher) teacher->update(model);
  return res;
}

// Labels for unlabeled inputs, predicted by a trained model. Order preserved.
template <class ModelT>
std::vector<Mask> init_labels(const ModelT& theta_c, const std::vector<Tensor>& unlabeled) {
  std::vector<Mask> out(unlabeled.size());
  parallel_for(static_cast<int>(unlabeled.size()), [&](int k) {
    out[static_cast<size_t>(k)] = pseudo_label(theta_c.logits(unlabeled[static_cast<size_t>(k)]));
  });
  return out;
}

// Plain supervised pretraining on the clean set: SGD with momentum and weight
// decay on the mean per-pixel cross entropy, shuffled minibatches.
template <class ModelT>
void baseline_train(ModelT& model, const std::vector<LabeledImage>& clean, const HyperConfig& cfg, Rng& rng,
                    const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  if (clean.empty()) throw Error("baseline_train: clean set is empty");
  SgdOpt opt{cfg.alpha, cfg.momentum, cfg.weight_decay, {}};
  opt.reset(model.param_count());
  std::vector<int> order(clean.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs_baseline; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.b_n)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.b_n));
      TapeD tape;
      typename ModelT::Bound b = model.bind(tape);
      ValueId total = -1;
      for (size_t i = start; i < end; ++i) {
        const LabeledImage& s = clean[static_cast<size_t>(order[i])];
        ValueId m = tape.mean_all(tape.ce_map(model.forward(tape, b, tape.constant(s.image)), s.mask));
        total = total < 0 ? m : tape.add(total, m);
      }
      ValueId loss = tape.scale(total, 1.0 / static_cast<double>(end - start));
      epoch_loss += tape.val(loss).v[0] * static_cast<double>(end - start);
      ParamVector grad = tape.reverse_grad(loss);
      ParamVector theta = model.flatten();
      opt.apply(theta, grad);
      model.unflatten(theta);
    }
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(clean.size()));
  }
}

}  // namespace mlbseg
