#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "pgl/autodiff.hpp"
#include "pgl/data.hpp"
#include "pgl/guidance.hpp"
#include "pgl/models.hpp"
#include "pgl/synthesis.hpp"

namespace pgl {

struct MassRatio {
  double ratio = 0.0;
  /// True when the total gradient mass is zero (ratio reported as 0).
  bool degenerate = false;
};

/// sum over target of |g| / sum of |g|. The mask may omit the trailing
/// channel axis of the gradient.
inline MassRatio mass_ratio(const Tensor& gradient, const Tensor& target_mask) {
  const Tensor m = detail::align_mask("grad_mass_in_target", target_mask, gradient.shape());
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < gradient.numel(); ++i) {
    const double a = std::abs(gradient[i]);
    total += a;
    if (m[i] != 0.0) inside += a;
  }
  if (total == 0.0) return {0.0, true};
  return {inside / total, false};
}

inline MassRatio grad_mass_in_target(const ToyModel& model, const Tensor& x, std::size_t class_index,
                                     const Tensor& target_mask) {
  bool any = false;
  for (double v : target_mask.data()) any = any || v != 0.0;
  if (!any) throw Error("grad_mass_in_target: target mask is empty");
  TapeScope scope;
  return mass_ratio(input_gradient(model, x, class_index, false), target_mask);
}

/// |gradient| summed over the trailing channel axis: [H,W,C] -> [H,W].
inline Tensor saliency_map(const Tensor& gradient) {
  if (gradient.dim() != 3) throw ShapeError("saliency_map: expected [H,W,C], got " + to_string(gradient.shape()));
  const std::size_t h = gradient.size(0), w = gradient.size(1), c = gradient.size(2);
  std::vector<double> s(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t k = 0; k < c; ++k) s[p] += std::abs(gradient[p * c + k]);
  return Tensor({h, w}, std::move(s));
}

/// Saliency thresholds at evenly spaced quantiles k/(n-1), k = 0..n-1, of
/// the map's values (nearest-rank on the sorted values).
inline std::vector<double> quantile_thresholds(std::span<const double> values, std::size_t count = 20) {
  if (count < 2) throw Error("quantile_thresholds: need at least two thresholds");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  const std::size_t n = sorted.size();
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t idx = (k * (n - 1) + (count - 1) / 2) / (count - 1);
    out.push_back(sorted[idx]);
  }
  return out;
}

/// Tightest box around {s >= threshold}; empty when no pixel qualifies.
inline Box threshold_box(const Tensor& saliency, double threshold) {
  const std::size_t h = saliency.size(0), w = saliency.size(1);
  Box b{h, w, 0, 0};
  bool any = false;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (!(saliency[r * w + c] >= threshold)) continue;
      any = true;
      b.row0 = std::min(b.row0, r);
      b.col0 = std::min(b.col0, c);
      b.row1 = std::max(b.row1, r + 1);
      b.col1 = std::max(b.col1, c + 1);
    }
  return any ? b : Box{};
}

/// Best IoU with `truth` over the quantile threshold grid.
inline double max_box_iou(const Tensor& saliency, const Box& truth, std::size_t thresholds = 20) {
  if (saliency.dim() != 2) throw ShapeError("max_box_iou: saliency must be [H,W], got " + to_string(saliency.shape()));
  double best = 0.0;
  for (double t : quantile_thresholds(saliency.data(), thresholds)) {
    const Box b = threshold_box(saliency, t);
    if (!b.empty()) best = std::max(best, box_iou(b, truth));
  }
  return best;
}

inline const std::vector<double>& default_deltas() {
  static const std::vector<double> d{0.3, 0.5, 0.7};
  return d;
}

struct BoxAccuracy {
  std::vector<double> deltas;
  std::vector<double> accuracy;  // per delta
  double mean = 0.0;
};

inline BoxAccuracy box_accuracy_from_ious(const std::vector<double>& ious, const std::vector<double>& deltas) {
  BoxAccuracy out;
  out.deltas = deltas;
  for (double d : deltas) {
    std::size_t hit = 0;
    for (double v : ious) hit += v >= d;
    out.accuracy.push_back(ious.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(ious.size()));
  }
  out.mean = deltas.empty() ? 0.0 : std::accumulate(out.accuracy.begin(), out.accuracy.end(), 0.0) /
                                        static_cast<double>(deltas.size());
  return out;
}

struct EvalOptions {
  std::vector<double> deltas = default_deltas();
  std::size_t thresholds = 20;
  std::size_t batch_size = 64;
  bool localization = true;
};

struct EvalReport {
  double accuracy = 0.0;
  double worst_group_accuracy = 0.0;
  double grad_mass = 0.0;
  std::size_t grad_mass_degenerate = 0;
  /// Empty when localization is not evaluated (e.g. skeleton data).
  std::optional<BoxAccuracy> box;
};

namespace detail {

// Classifier input for a batch: images as-is, skeletons through the encoder.
inline Tensor model_input(const ToyModel& model, const Dataset& data, std::span<const std::size_t> idx) {
  Tensor raw = data.batch(idx);
  if (data.kind == DatasetKind::skeleton) {
    NoGradGuard guard;
    return model.encode(raw).detach();
  }
  return raw;
}

inline Tensor target_masks(const Dataset& data, std::span<const std::size_t> idx) {
  const std::size_t hw = data.height * data.width;
  std::vector<double> m;
  m.reserve(idx.size() * hw);
  for (auto i : idx)
    for (std::size_t p = 0; p < hw; ++p) m.push_back(data.masks[i * hw + p]);
  return Tensor({idx.size(), data.height, data.width}, std::move(m));
}

}  // namespace detail

/// Accuracy, worst-group accuracy, mean gradient mass in the target region
/// (gradient of the true-class logit) and, for image data, box localization
/// accuracy from the same gradients.
inline EvalReport evaluate(const ToyModel& model, const Dataset& data, const EvalOptions& opt = {}) {
  EvalReport rep;
  const std::size_t n = data.size();
  if (n == 0) throw Error("evaluate: empty dataset");
  const std::size_t groups = data.num_classes * data.num_classes;
  std::vector<std::size_t> group_hit(groups, 0), group_total(groups, 0);
  std::size_t hit = 0;
  double mass = 0.0;
  std::vector<double> ious;
  const bool boxes = opt.localization && data.kind == DatasetKind::image;

  for (std::size_t start = 0; start < n; start += opt.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + opt.batch_size); ++i) idx.push_back(i);
    TapeScope scope;
    Tensor x = detail::model_input(model, data, idx).detach(true);
    Tensor logits = model.forward(x);
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(data.labels[i]);
    Tensor g = input_gradients(logits, x, labels, false);
    const std::size_t k = logits.size(1);
    const std::size_t per = g.numel() / idx.size();
    Shape sample_shape(g.shape().begin() + 1, g.shape().end());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx[r];
      std::size_t pred = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (logits[r * k + c] > logits[r * k + pred]) pred = c;
      }
      const bool ok = pred == data.labels[i];
      hit += ok;
      group_hit[data.groups[i]] += ok;
      group_total[data.groups[i]] += 1;

      std::vector<double> gv(g.values().begin() + static_cast<std::ptrdiff_t>(r * per),
                             g.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
      Tensor gi(sample_shape, std::move(gv));
      Tensor mask = data.target_mask(i);
      if (data.kind == DatasetKind::skeleton) mask = expand_axis(mask, 2, gi.size(2));
      auto mr = mass_ratio(gi, mask);
      mass += mr.ratio;
      rep.grad_mass_degenerate += mr.degenerate;
      if (boxes) ious.push_back(max_box_iou(saliency_map(gi), data.target_box(i), opt.thresholds));
    }
  }
  rep.accuracy = static_cast<double>(hit) / static_cast<double>(n);
  rep.grad_mass = mass / static_cast<double>(n);
  rep.worst_group_accuracy = 1.0;
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    if (group_total[gidx] == 0) continue;
    rep.worst_group_accuracy =
        std::min(rep.worst_group_accuracy, static_cast<double>(group_hit[gidx]) / static_cast<double>(group_total[gidx]));
  }
  if (boxes) rep.box = box_accuracy_from_ious(ious, opt.deltas);
  return rep;
}

inline BoxAccuracy box_localization_accuracy(const ToyModel& model, const Dataset& data,
                                             const std::vector<double>& deltas = default_deltas()) {
  if (data.kind != DatasetKind::image) throw Error("box_localization_accuracy: dataset carries no target boxes");
  EvalOptions opt;
  opt.deltas = deltas;
  return *evaluate(model, data, opt).box;
}

/// Saliency rescaled to 0..255 by its maximum, as 8-bit pixels.
inline std::vector<std::uint8_t> saliency_pixels(const Tensor& saliency) {
  double hi = 0.0;
  for (double v : saliency.data()) hi = std::max(hi, v);
  std::vector<std::uint8_t> px(saliency.numel(), 0);
  if (hi > 0.0) {
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(std::lround(255.0 * saliency[i] / hi));
  }
  return px;
}

inline void write_saliency_pgm(const std::string& path, const Tensor& saliency) {
  write_pgm(path, saliency.size(0), saliency.size(1), saliency_pixels(saliency));
}

}  // namespace pgl
