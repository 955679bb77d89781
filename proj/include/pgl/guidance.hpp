#pragma once

#include <string>
#include <vector>

#include "pgl/autodiff.hpp"
#include "pgl/models.hpp"
#include "pgl/ops.hpp"
#include "pgl/rng.hpp"
#include "pgl/synthesis.hpp"

namespace pgl {

enum class LabelMode { soft_pair, hard_single };
enum class MaskMode { provenance, random, unmasked };

inline std::string to_string(LabelMode m) { return m == LabelMode::soft_pair ? "soft_pair" : "hard_single"; }

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::provenance: return "provenance";
    case MaskMode::random: return "random";
    case MaskMode::unmasked: return "unmasked";
  }
  return "?";
}

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "provenance") return MaskMode::provenance;
  if (s == "random") return MaskMode::random;
  if (s == "unmasked") return MaskMode::unmasked;
  throw Error("unknown mask mode '" + s + "' (expected provenance, random or unmasked)");
}

struct GuidanceConfig {
  double alpha = 0.05;
  LabelMode label_mode = LabelMode::soft_pair;
  MaskMode mask_mode = MaskMode::provenance;
};

inline void validate(const GuidanceConfig& g) {
  if (!(g.alpha >= 0.0) || !std::isfinite(g.alpha)) throw Error("alpha: must be a finite non-negative number");
}

namespace detail {

// Masks may omit the trailing channel axis of the gradient they weight.
inline Tensor align_mask(const char* op, const Tensor& mask, const Shape& grad_shape) {
  if (mask.shape() == grad_shape) return mask;
  if (!grad_shape.empty() && mask.dim() + 1 == grad_shape.size() &&
      std::equal(mask.shape().begin(), mask.shape().end(), grad_shape.begin())) {
    return expand_axis(mask, mask.dim(), grad_shape.back());
  }
  throw ShapeError(std::string(op) + ": mask " + to_string(mask.shape()) + " is not aligned with gradient " +
                   to_string(grad_shape));
}

inline Tensor as_batch(const ToyModel& model, const Tensor& x) {
  const Shape& in = model.spec().input_shape;
  if (x.shape() == in) {
    Shape b = in;
    b.insert(b.begin(), 1);
    return reshape(x, b);
  }
  return x;
}

}  // namespace detail

/// d f_c / d x for one sample (shape == input_shape) or a batch where every
/// row uses the same class. Non-leaf inputs (e.g. encoded features) must
/// already be on the active tape.
inline Tensor input_gradient(const ToyModel& model, const Tensor& x_tilde, std::size_t class_index, bool create_graph) {
  if (class_index >= model.num_classes()) {
    throw Error("input_gradient: class index " + std::to_string(class_index) + " out of range for " +
                std::to_string(model.num_classes()) + " classes");
  }
  const Tensor x = x_tilde.requires_grad() ? x_tilde : x_tilde.detach(true);
  Tensor logits = model.forward(detail::as_batch(model, x));
  return grad(sum(select(logits, 1, class_index)), {x}, create_graph)[0];
}

/// Gradient of sum_i f_{c_i}(x_i) w.r.t. a batch x; row i holds d f_{c_i}(x_i) / d x_i
/// because samples do not interact in the forward pass.
inline Tensor input_gradients(const Tensor& logits, const Tensor& x, const std::vector<std::size_t>& classes,
                              bool create_graph) {
  if (logits.dim() != 2 || logits.size(0) != classes.size()) {
    throw ShapeError("input_gradients: logits " + to_string(logits.shape()) + " do not match " +
                     std::to_string(classes.size()) + " class indices");
  }
  std::vector<double> sel(logits.numel(), 0.0);
  const std::size_t n = logits.size(1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= n) throw Error("input_gradients: class index out of range");
    sel[i * n + classes[i]] = 1.0;
  }
  return grad(sum(mul(logits, Tensor(logits.shape(), std::move(sel)))), {x}, create_graph)[0];
}

/// ||(1 - M) * grad_a + M * grad_b||^2 over all elements.
inline Tensor provenance_loss_soft(const Tensor& grad_a, const Tensor& grad_b, const Tensor& mask) {
  if (grad_a.shape() != grad_b.shape()) {
    throw ShapeError("provenance_loss_soft: gradient shapes differ: " + to_string(grad_a.shape()) + " vs " +
                     to_string(grad_b.shape()));
  }
  Tensor m = detail::align_mask("provenance_loss_soft", mask, grad_a.shape());
  return sum(square(add(mul(one_minus(m), grad_a), mul(m, grad_b))));
}

inline Tensor provenance_loss_soft(const Tensor& grad_a, const Tensor& grad_b, const ProvenanceMask& mask) {
  return provenance_loss_soft(grad_a, grad_b, mask.values());
}

/// ||(1 - M) * grad_y||^2 over all elements.
inline Tensor provenance_loss_hard(const Tensor& grad_y, const Tensor& mask) {
  Tensor m = detail::align_mask("provenance_loss_hard", mask, grad_y.shape());
  return sum(square(mul(one_minus(m), grad_y)));
}

inline Tensor provenance_loss_hard(const Tensor& grad_y, const ProvenanceMask& mask) {
  return provenance_loss_hard(grad_y, mask.values());
}

/// Soft-pair "unmasked" control: both class gradients penalized everywhere.
inline Tensor unmasked_loss_soft(const Tensor& grad_a, const Tensor& grad_b) {
  return add(sum(square(grad_a)), sum(square(grad_b)));
}

inline Tensor total_loss(const Tensor& cls_loss, const Tensor& pg_loss, double alpha) {
  if (!(alpha >= 0.0)) throw Error("total_loss: alpha must be non-negative");
  if (cls_loss.numel() != 1 || pg_loss.numel() != 1) throw ShapeError("total_loss: losses must be scalars");
  return add(cls_loss, scale(pg_loss, alpha));
}

/// Control masks: `random` is i.i.d. Bernoulli(0.5); `unmasked` is all zeros,
/// which penalizes the gradient everywhere in the hard-label loss.
inline ProvenanceMask control_mask(const Shape& shape, MaskMode mode, Rng& rng, MaskRole role = MaskRole::mix_origin) {
  std::vector<double> v(numel(shape), 0.0);
  switch (mode) {
    case MaskMode::random:
      for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
      break;
    case MaskMode::unmasked:
      break;
    case MaskMode::provenance:
      throw Error("control_mask: mode must be random or unmasked");
  }
  return ProvenanceMask(Tensor(shape, std::move(v)), role);
}

}  // namespace pgl
