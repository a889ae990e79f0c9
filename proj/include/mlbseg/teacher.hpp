#pragma once

#include <vector>

#include "mlbseg/rng.hpp"
#include "mlbseg/tape.hpp"
#include "mlbseg/tensor.hpp"

namespace mlbseg {

// x + gamma * N(mu, sigma) sampled i.i.d. per element.
inline Tensor perturb_input(const Tensor& x, double gamma, double mu, double sigma, Rng& rng) {
  if (gamma < 0 || sigma < 0) throw Error("perturb_input: gamma and sigma must be >= 0");
  Tensor out = x;
  if (gamma == 0.0) return out;
  for (auto& e : out.v) e += gamma * rng.normal(mu, sigma);
  return out;
}

// Pixel MSE between student and teacher probability fields; the teacher sees
// a Gaussian-perturbed copy of the input and is bound as constants, so
// gradients reach only the student parameters.
template <class ModelT>
ValueId st_consistency_loss(TapeD& t, const ModelT& model, const typename ModelT::Bound& student,
                            const ModelT& teacher, ValueId x, double gamma, double mu, double sigma,
                            Rng& rng) {
  // Copy what we need out of the node before growing the tape: adding nodes
  // can reallocate the value storage and invalidate references into it.
  Tensor perturbed;
  double hw;
  {
    const Tensor& xv = t.val(x);
    if (xv.ndim() != 3) throw Error("st_consistency_loss: input must be [1,H,W], got " + xv.shape_str());
    hw = static_cast<double>(xv.dim(1)) * xv.dim(2);
    perturbed = perturb_input(xv, gamma, mu, sigma, rng);
  }
  ValueId xt = t.constant(std::move(perturbed));
  typename ModelT::Bound tb = teacher.bind_const(t);
  ValueId pt = t.softmax_c(teacher.forward(t, tb, xt));
  ValueId ps = t.softmax_c(model.forward(t, student, x));
  ValueId d = t.sub(ps, pt);
  return t.scale(t.sum_all(t.mul(d, d)), 1.0 / hw);
}

inline void ema_update(ParamVector& teacher, const ParamVector& student, double decay) {
  if (decay < 0 || decay >= 1) throw Error("ema_update: decay must be in [0,1)");
  if (teacher.size() != student.size())
    throw Error("ema_update: layout mismatch, " + std::to_string(teacher.size()) + " vs " +
                std::to_string(student.size()));
  for (size_t i = 0; i < teacher.size(); ++i) teacher[i] = decay * teacher[i] + (1.0 - decay) * student[i];
}

// Teacher copy of the model, advanced by EMA once per training step.
template <class ModelT>
struct TeacherState {
  ModelT model;
  double decay = 0.99;

  static TeacherState init(const ModelT& student, double decay) {
    if (decay < 0 || decay >= 1) throw Error("teacher: decay must be in [0,1)");
    return {student, decay};
  }

  void update(const ModelT& student) {
    ParamVector t = model.flatten();
    ema_update(t, student.flatten(), decay);
    model.unflatten(t);
  }
};

}  // namespace mlbseg
