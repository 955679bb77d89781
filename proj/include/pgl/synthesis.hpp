#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pgl/ops.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

enum class MaskRole { mix_origin, edit_target };

/// Binary tensor marking which elements of a synthetic input came from a
/// given source (mix_origin) or were left unedited (edit_target).
class ProvenanceMask {
 public:
  ProvenanceMask() = default;
  ProvenanceMask(Tensor values, MaskRole role) : values_(std::move(values)), role_(role) {
    for (double v : values_.data()) {
      if (v != 0.0 && v != 1.0) throw Error("ProvenanceMask: values must be exactly 0 or 1");
    }
  }

  const Tensor& values() const { return values_; }
  const Shape& shape() const { return values_.shape(); }
  MaskRole role() const { return role_; }

  std::size_t count_ones() const {
    std::size_t n = 0;
    for (double v : values_.data()) n += v == 1.0;
    return n;
  }
  double fraction_ones() const { return static_cast<double>(count_ones()) / static_cast<double>(values_.numel()); }

  ProvenanceMask complement() const {
    std::vector<double> out(values_.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - values_[i];
    return ProvenanceMask(Tensor(values_.shape(), std::move(out)), role_);
  }

 private:
  Tensor values_;
  MaskRole role_ = MaskRole::mix_origin;
};

struct SyntheticSample {
  Tensor x_tilde;
  /// Probability vector over classes (one-hot for hard labels).
  std::vector<double> y_tilde;
  std::optional<std::size_t> hard_label;
  /// One mask per contributing label: {I_A, I_B} for mixes, {I} for edits.
  std::vector<ProvenanceMask> masks;
  std::optional<double> lambda;
  /// Source classes, used to pick the logits guided by the provenance loss.
  std::size_t class_a = 0, class_b = 0;
};

/// Half-open pixel rectangle [row0,row1) x [col0,col1).
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  std::size_t area() const { return (row1 - row0) * (col1 - col0); }
  bool empty() const { return row1 <= row0 || col1 <= col0; }
};

inline double box_iou(const Box& a, const Box& b) {
  if (a.empty() || b.empty()) return 0.0;
  const std::size_t r0 = std::max(a.row0, b.row0), r1 = std::min(a.row1, b.row1);
  const std::size_t c0 = std::max(a.col0, b.col0), c1 = std::min(a.col1, b.col1);
  const double inter = (r1 > r0 && c1 > c0) ? static_cast<double>((r1 - r0) * (c1 - c0)) : 0.0;
  return inter / (static_cast<double>(a.area() + b.area()) - inter);
}

namespace detail {

inline std::size_t check_one_hot(const char* op, const std::vector<double>& y) {
  std::size_t hot = y.size();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0 && hot == y.size()) {
      hot = i;
    } else if (y[i] != 0.0) {
      hot = y.size();
      break;
    }
  }
  if (hot == y.size()) throw Error(std::string(op) + ": label is not a one-hot vector");
  return hot;
}

inline void check_image(const char* op, const Tensor& x) {
  if (!x.defined() || x.dim() != 3) {
    throw ShapeError(std::string(op) + ": expected an image [H,W,C], got " +
                     (x.defined() ? to_string(x.shape()) : std::string("<undefined>")));
  }
}

}  // namespace detail

/// Mixes two images through a rectangle: pixels inside `cut` come from x_b.
/// The label weight lambda is the realized fraction of pixels kept from x_a.
inline SyntheticSample cutmix_with_box(const Tensor& x_a, const std::vector<double>& y_a, const Tensor& x_b,
                                       const std::vector<double>& y_b, const Box& cut) {
  detail::check_image("cutmix", x_a);
  detail::check_image("cutmix", x_b);
  if (x_a.shape() != x_b.shape()) {
    throw ShapeError("cutmix: shape mismatch " + to_string(x_a.shape()) + " vs " + to_string(x_b.shape()));
  }
  if (y_a.size() != y_b.size()) throw Error("cutmix: label vectors differ in length");
  const std::size_t ca = detail::check_one_hot("cutmix", y_a);
  const std::size_t cb = detail::check_one_hot("cutmix", y_b);
  const std::size_t h = x_a.size(0), w = x_a.size(1), c = x_a.size(2);
  if (cut.row1 > h || cut.col1 > w) throw Error("cutmix: rectangle exceeds image bounds");

  std::vector<double> m(h * w, 1.0);
  for (std::size_t r = cut.row0; r < cut.row1; ++r)
    for (std::size_t q = cut.col0; q < cut.col1; ++q) m[r * w + q] = 0.0;

  std::vector<double> out(h * w * c);
  const auto& av = x_a.values();
  const auto& bv = x_b.values();
  std::size_t kept = 0;
  for (std::size_t p = 0; p < h * w; ++p) {
    const bool from_a = m[p] == 1.0;
    kept += from_a;
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] = from_a ? av[p * c + k] : bv[p * c + k];
  }
  const double lambda = static_cast<double>(kept) / static_cast<double>(h * w);

  SyntheticSample s;
  s.x_tilde = Tensor(x_a.shape(), std::move(out));
  s.y_tilde.resize(y_a.size());
  for (std::size_t i = 0; i < y_a.size(); ++i) s.y_tilde[i] = lambda * y_a[i] + (1.0 - lambda) * y_b[i];
  ProvenanceMask ia(Tensor({h, w}, std::move(m)), MaskRole::mix_origin);
  s.masks = {ia, ia.complement()};
  s.lambda = lambda;
  s.class_a = ca;
  s.class_b = cb;
  return s;
}

/// Square cut of side sqrt((1-lambda)HW), lambda ~ U[0,1], centred at a
/// uniformly random pixel and clipped to the image.
inline Box sample_cutmix_box(std::size_t h, std::size_t w, Rng& rng) {
  const double lambda = rng.uniform();
  const double side = std::sqrt((1.0 - lambda) * static_cast<double>(h * w));
  const auto cut_h = static_cast<std::ptrdiff_t>(std::min<double>(std::round(side), static_cast<double>(h)));
  const auto cut_w = static_cast<std::ptrdiff_t>(std::min<double>(std::round(side), static_cast<double>(w)));
  const auto cy = static_cast<std::ptrdiff_t>(rng.below(h));
  const auto cx = static_cast<std::ptrdiff_t>(rng.below(w));
  auto clip = [](std::ptrdiff_t v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(hi)));
  };
  Box b;
  b.row0 = clip(cy - cut_h / 2, h);
  b.row1 = clip(cy - cut_h / 2 + cut_h, h);
  b.col0 = clip(cx - cut_w / 2, w);
  b.col1 = clip(cx - cut_w / 2 + cut_w, w);
  return b;
}

inline SyntheticSample cutmix(const Tensor& x_a, const std::vector<double>& y_a, const Tensor& x_b,
                              const std::vector<double>& y_b, Rng& rng) {
  detail::check_image("cutmix", x_a);
  return cutmix_with_box(x_a, y_a, x_b, y_b, sample_cutmix_box(x_a.size(0), x_a.size(1), rng));
}

/// Skeleton mask over features [P,F,E]: skeletons 0..P/T-1 are zeroed.
inline ProvenanceMask skeleton_mask(std::size_t p, std::size_t f, std::size_t e, std::size_t t) {
  if (t == 0 || p % t != 0) {
    throw Error("skeleton_feature_mix: P=" + std::to_string(p) + " is not divisible by T=" + std::to_string(t));
  }
  std::vector<double> m(p * f * e, 1.0);
  const std::size_t cut = p / t;
  for (std::size_t i = 0; i < cut * f * e; ++i) m[i] = 0.0;
  return ProvenanceMask(Tensor({p, f, e}, std::move(m)), MaskRole::mix_origin);
}

/// Masks both feature maps and takes their elementwise maximum. Works on a
/// single sample [P,F,E] or a batch [B,P,F,E] with a matching mask; the
/// result stays differentiable with respect to both feature maps.
inline Tensor mix_features(const Tensor& features_a, const Tensor& features_b, const Tensor& mask) {
  if (features_a.shape() != features_b.shape() || features_a.shape() != mask.shape()) {
    throw ShapeError("skeleton_feature_mix: shape mismatch " + to_string(features_a.shape()) + ", " +
                     to_string(features_b.shape()) + ", mask " + to_string(mask.shape()));
  }
  Tensor kept_a = mul(mask, features_a);
  Tensor kept_b = mul(one_minus(mask), features_b);
  return maximum(kept_a, kept_b);
}

inline SyntheticSample skeleton_feature_mix(const Tensor& features_a, const std::vector<double>& y_a,
                                            const Tensor& features_b, const std::vector<double>& y_b, std::size_t t) {
  if (!features_a.defined() || features_a.dim() != 3) throw ShapeError("skeleton_feature_mix: expected [P,F,E]");
  if (features_a.shape() != features_b.shape()) {
    throw ShapeError("skeleton_feature_mix: shape mismatch " + to_string(features_a.shape()) + " vs " +
                     to_string(features_b.shape()));
  }
  if (y_a.size() != y_b.size()) throw Error("skeleton_feature_mix: label vectors differ in length");
  const std::size_t ca = detail::check_one_hot("skeleton_feature_mix", y_a);
  const std::size_t cb = detail::check_one_hot("skeleton_feature_mix", y_b);
  ProvenanceMask m = skeleton_mask(features_a.size(0), features_a.size(1), features_a.size(2), t);

  SyntheticSample s;
  s.x_tilde = mix_features(features_a, features_b, m.values());
  const double lambda = m.fraction_ones();
  s.y_tilde.resize(y_a.size());
  for (std::size_t i = 0; i < y_a.size(); ++i) s.y_tilde[i] = lambda * y_a[i] + (1.0 - lambda) * y_b[i];
  s.masks = {m, m.complement()};
  s.lambda = lambda;
  s.class_a = ca;
  s.class_b = cb;
  return s;
}

struct EditResult {
  Tensor x_edited;
  /// 1 where the editor changed the pixel.
  Tensor true_edit_region;
};

/// Deterministic stand-in for a generative editor: every pixel outside
/// `target_mask` (H x W, 1 = target) receives a random texture offset of
/// magnitude amplitude * U[0.5, 1] per channel, with random sign. Target
/// pixels are copied unchanged.
inline EditResult simulated_edit(const Tensor& x, const Tensor& target_mask, double amplitude, Rng& rng) {
  detail::check_image("simulated_edit", x);
  const std::size_t h = x.size(0), w = x.size(1), c = x.size(2);
  if (target_mask.shape() != Shape{h, w}) {
    throw ShapeError("simulated_edit: target mask " + to_string(target_mask.shape()) + " does not match image " +
                     to_string(x.shape()));
  }
  if (!(amplitude >= 0.0)) throw Error("simulated_edit: amplitude must be non-negative");
  std::vector<double> out = x.values();
  std::vector<double> region(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    if (target_mask[p] != 0.0) continue;
    region[p] = 1.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double magnitude = rng.uniform(0.5, 1.0);
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      out[p * c + k] += amplitude * sign * magnitude;
    }
  }
  return {Tensor(x.shape(), std::move(out)), Tensor({h, w}, std::move(region))};
}

/// Threshold maximizing between-class variance over a histogram of `values`
/// with `bins` equal-width bins spanning [min, max]. Bin k holds the values
/// in (edge_k, edge_{k+1}] (bin 0 also holds the minimum). The result is the
/// upper edge of the last bin of the lower class, so "v > threshold" selects
/// the upper class exactly. Ties go to the lower threshold.
inline double otsu_threshold(std::span<const double> values, std::size_t bins = 256) {
  if (bins < 2) throw Error("otsu_threshold: need at least 2 bins");
  if (values.empty()) throw Error("otsu_threshold: no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error("otsu_threshold: all values are identical");

  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  edges[bins] = hi;

  std::vector<std::int64_t> counts(bins, 0);
  for (double v : values) {
    auto it = std::lower_bound(edges.begin() + 1, edges.end(), v);
    counts[static_cast<std::size_t>(it - (edges.begin() + 1))] += 1;
  }

  std::int64_t total_n = 0, total_s = 0;
  for (std::size_t k = 0; k < bins; ++k) {
    total_n += counts[k];
    total_s += counts[k] * static_cast<std::int64_t>(k);
  }

  double best = -1.0;
  std::size_t best_cut = 0;
  std::int64_t n0 = 0, s0 = 0;
  for (std::size_t k = 0; k + 1 < bins; ++k) {
    n0 += counts[k];
    s0 += counts[k] * static_cast<std::int64_t>(k);
    const std::int64_t n1 = total_n - n0, s1 = total_s - s0;
    if (n0 == 0 || n1 == 0) continue;
    const double d = static_cast<double>(s0 * n1 - s1 * n0);
    const double score = d * d / (static_cast<double>(n0) * static_cast<double>(n1));
    if (score > best) {
      best = score;
      best_cut = k;
    }
  }
  return edges[best_cut + 1];
}

inline double otsu_threshold(const Tensor& values, std::size_t bins = 256) { return otsu_threshold(values.data(), bins); }

struct DiffMaskResult {
  ProvenanceMask mask;
  /// Per-pixel mean absolute channel difference.
  Tensor difference;
  double threshold = 0.0;
  /// Set when the difference image is constant; the mask is then all ones.
  bool degenerate = false;
};

/// Recovers the edited region from an image pair: D is the mean absolute
/// channel difference and I = 0 where D exceeds its Otsu threshold.
inline DiffMaskResult diff_mask(const Tensor& x, const Tensor& x_tilde) {
  detail::check_image("diff_mask", x);
  if (x.shape() != x_tilde.shape()) {
    throw ShapeError("diff_mask: shape mismatch " + to_string(x.shape()) + " vs " + to_string(x_tilde.shape()));
  }
  const std::size_t h = x.size(0), w = x.size(1), c = x.size(2);
  std::vector<double> d(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += std::fabs(x_tilde[p * c + k] - x[p * c + k]);
    d[p] = acc / static_cast<double>(c);
  }
  DiffMaskResult r;
  r.difference = Tensor({h, w}, d);
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  std::vector<double> m(h * w, 1.0);
  if (!(*hi > *lo)) {
    r.degenerate = true;
    r.threshold = *hi;
  } else {
    r.threshold = otsu_threshold(std::span<const double>(d));
    for (std::size_t p = 0; p < h * w; ++p) m[p] = d[p] > r.threshold ? 0.0 : 1.0;
  }
  r.mask = ProvenanceMask(Tensor({h, w}, std::move(m)), MaskRole::edit_target);
  return r;
}

enum class Morphology { dilate, erode };

namespace detail {

// One step with a 3x3 cross structuring element. Out-of-image neighbours are
// ignored, so erosion does not eat in from the image border.
inline std::vector<double> morph_step(const std::vector<double>& m, std::size_t h, std::size_t w, Morphology op) {
  std::vector<double> out(m.size());
  const int dr[5] = {0, -1, 1, 0, 0};
  const int dc[5] = {0, 0, 0, -1, 1};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      bool any = false, all = true;
      for (int k = 0; k < 5; ++k) {
        const auto rr = static_cast<std::ptrdiff_t>(r) + dr[k];
        const auto cc = static_cast<std::ptrdiff_t>(c) + dc[k];
        if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cc >= static_cast<std::ptrdiff_t>(w)) continue;
        const bool on = m[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)] == 1.0;
        any = any || on;
        all = all && on;
      }
      out[r * w + c] = (op == Morphology::dilate ? any : all) ? 1.0 : 0.0;
    }
  return out;
}

}  // namespace detail

struct PerturbResult {
  ProvenanceMask mask;
  /// Signed relative change of the I = 1 area.
  double realized_delta = 0.0;
  std::size_t iterations = 0;
  /// Set when the realized change exceeds the requested one.
  bool overshoot = false;
};

/// Grows (dilate) or shrinks (erode) the I = 1 region of a 2-D mask by
/// repeated cross-element morphology until its area has changed by at least
/// `target_area_delta` of the original area.
inline PerturbResult perturb_mask(const ProvenanceMask& mask, Morphology mode, double target_area_delta) {
  if (!(target_area_delta >= 0.0) || !std::isfinite(target_area_delta)) {
    throw Error("perturb_mask: target_area_delta must be a non-negative number");
  }
  if (mask.shape().size() != 2) throw ShapeError("perturb_mask: expected a 2-D mask, got " + to_string(mask.shape()));
  PerturbResult r{mask, 0.0, 0, false};
  if (target_area_delta == 0.0) return r;
  const std::size_t h = mask.shape()[0], w = mask.shape()[1];
  const std::size_t original = mask.count_ones();
  if (original == 0 || original == h * w) throw Error("perturb_mask: mask must contain both zeros and ones");

  std::vector<double> m = mask.values().values();
  const double orig = static_cast<double>(original);
  for (;;) {
    std::vector<double> next = detail::morph_step(m, h, w, mode);
    const auto area = static_cast<double>(std::count(next.begin(), next.end(), 1.0));
    const auto prev_area = static_cast<double>(std::count(m.begin(), m.end(), 1.0));
    ++r.iterations;
    r.realized_delta = (area - orig) / orig;
    if (area == prev_area) {
      throw Error("perturb_mask: mask saturated before reaching the requested change (realized delta " +
                  std::to_string(r.realized_delta) + ")");
    }
    m = std::move(next);
    if (std::fabs(r.realized_delta) >= target_area_delta) break;
  }
  r.overshoot = std::fabs(r.realized_delta) > target_area_delta;
  r.mask = ProvenanceMask(Tensor({h, w}, std::move(m)), mask.role());
  return r;
}

/// Binary portable graymap (P5, maxval 255). `pixels` holds H*W bytes.
inline void write_pgm(const std::string& path, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != h * w) throw Error("write_pgm: pixel count does not match " + std::to_string(h) + "x" + std::to_string(w));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path);
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw Error("write_pgm: write failed for " + path);
}

/// Mask as 0/255 graymap.
inline void write_mask_pgm(const std::string& path, const ProvenanceMask& mask) {
  if (mask.shape().size() != 2) throw ShapeError("write_mask_pgm: expected a 2-D mask");
  std::vector<std::uint8_t> px(mask.values().numel());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.values()[i] == 1.0 ? 255 : 0;
  write_pgm(path, mask.shape()[0], mask.shape()[1], px);
}

}  // namespace pgl
