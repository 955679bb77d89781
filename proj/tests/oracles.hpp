#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary. They use only forward evaluation and plain loops, never
// the tape.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pgl/pgl.hpp"

namespace oracle {

using pgl::Tensor;

/// Exhaustive Otsu: every cut between bin edges, scored by
/// w0 * w1 * (mu0 - mu1)^2 on bin centres; the lowest cut wins ties.
inline double otsu_bruteforce(const std::vector<double>& v, std::size_t bins = 256) {
  const double lo = *std::min_element(v.begin(), v.end());
  const double hi = *std::max_element(v.begin(), v.end());
  auto edge = [&](std::size_t i) {
    return i == bins ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  };
  auto bin_of = [&](double x) {
    std::size_t k = 0;
    while (k + 1 < bins && x > edge(k + 1)) ++k;
    return k;
  };
  std::vector<long double> count(bins, 0.0L);
  for (double x : v) count[bin_of(x)] += 1.0L;
  const long double n = static_cast<long double>(v.size());
  long double best = -1.0L;
  double best_t = edge(1);
  for (std::size_t cut = 0; cut + 1 < bins; ++cut) {
    long double n0 = 0, s0 = 0, n1 = 0, s1 = 0;
    for (std::size_t k = 0; k < bins; ++k) {
      const long double centre = static_cast<long double>(k) + 0.5L;
      if (k <= cut) {
        n0 += count[k];
        s0 += count[k] * centre;
      } else {
        n1 += count[k];
        s1 += count[k] * centre;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const long double diff = s0 / n0 - s1 / n1;
    const long double score = (n0 / n) * (n1 / n) * diff * diff;
    if (score > best * (1.0L + 1e-15L)) {
      best = score;
      best_t = edge(cut + 1);
    }
  }
  return best_t;
}

/// Logits of a batch, evaluated off the tape.
inline std::vector<double> logits(const pgl::ToyModel& m, const Tensor& x) {
  pgl::NoGradGuard ng;
  return m.forward(x.detach()).values();
}

/// Central differences of logit `cls` of one sample x [1, ...] with respect to
/// every input element, computed from a single batched forward pass.
inline std::vector<double> input_gradient_fd(const pgl::ToyModel& m, const Tensor& x, std::size_t cls, double h) {
  const std::size_t d = x.numel();
  std::vector<double> batch;
  batch.reserve(2 * d * d);
  for (std::size_t e = 0; e < d; ++e) {
    for (double sgn : {1.0, -1.0}) {
      std::vector<double> row = x.values();
      row[e] += sgn * h;
      batch.insert(batch.end(), row.begin(), row.end());
    }
  }
  pgl::Shape shape = x.shape();
  shape[0] = 2 * d;
  const auto out = logits(m, Tensor(shape, std::move(batch)));
  const std::size_t n = m.num_classes();
  std::vector<double> g(d);
  for (std::size_t e = 0; e < d; ++e) g[e] = (out[(2 * e) * n + cls] - out[(2 * e + 1) * n + cls]) / (2.0 * h);
  return g;
}

/// Row r of a batch tensor as a batch of one.
inline Tensor row(const Tensor& batch, std::size_t r) {
  const std::size_t per = batch.numel() / batch.size(0);
  pgl::Shape s = batch.shape();
  s[0] = 1;
  return Tensor(s, std::vector<double>(batch.values().begin() + static_cast<std::ptrdiff_t>(r * per),
                                       batch.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * per)));
}

/// L_total of an image batch where every input gradient inside L_PG is itself
/// a finite difference with step h_in.
inline double total_loss_fd(const pgl::ToyModel& m, const pgl::detail::SynthBatch& s, const pgl::TrainConfig& cfg,
                            double h_in) {
  const std::size_t b = s.active.size(), n = m.num_classes();
  const auto z = logits(m, s.input);
  double l_cls = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, z[r * n + k]);
    double lse = 0.0;
    for (std::size_t k = 0; k < n; ++k) lse += std::exp(z[r * n + k] - mx);
    lse = mx + std::log(lse);
    for (std::size_t k = 0; k < n; ++k) l_cls -= s.targets[r * n + k] * (z[r * n + k] - lse);
  }
  l_cls /= static_cast<double>(b);
  if (cfg.alpha == 0.0) return l_cls;

  const std::size_t per = s.input.numel() / b;
  const std::size_t spatial = s.masks.size() / b;
  const std::size_t channels = per / spatial;
  double pg = 0.0;
  std::size_t active = 0;
  const bool hard = pgl::label_mode_for(cfg.synthesis) == pgl::LabelMode::hard_single;
  for (std::size_t r = 0; r < b; ++r) {
    if (!s.active[r]) continue;
    ++active;
    const Tensor xr = row(s.input, r);
    const auto ga = input_gradient_fd(m, xr, s.class_a[r], h_in);
    const auto gb = hard ? std::vector<double>(per, 0.0) : input_gradient_fd(m, xr, s.class_b[r], h_in);
    for (std::size_t e = 0; e < per; ++e) {
      const double mask = s.masks[r * spatial + e / channels];
      double v;
      if (hard) {
        v = (1.0 - mask) * ga[e];
      } else if (cfg.mask_mode == pgl::MaskMode::unmasked) {
        pg += gb[e] * gb[e];
        v = ga[e];
      } else {
        v = (1.0 - mask) * ga[e] + mask * gb[e];
      }
      pg += v * v;
    }
  }
  if (active == 0) return l_cls;
  return l_cls + cfg.alpha * pg / static_cast<double>(active);
}

/// Parameter gradient of total_loss_fd by central differences with step
/// h_out, flattened in parameter order.
inline std::vector<double> total_loss_param_gradient_fd(const pgl::ToyModel& m, const pgl::detail::SynthBatch& s,
                                                        const pgl::TrainConfig& cfg, double h_in, double h_out) {
  std::vector<double> g;
  for (std::size_t p = 0; p < m.params().size(); ++p) {
    const Tensor& value = m.params()[p].value;
    for (std::size_t e = 0; e < value.numel(); ++e) {
      double f[2];
      for (int side = 0; side < 2; ++side) {
        auto params = m.params();
        std::vector<double> v = value.values();
        v[e] += side == 0 ? h_out : -h_out;
        params[p].value = Tensor(value.shape(), std::move(v), true);
        f[side] = total_loss_fd(pgl::ToyModel(m.spec(), std::move(params)), s, cfg, h_in);
      }
      g.push_back((f[0] - f[1]) / (2.0 * h_out));
    }
  }
  return g;
}

/// ||a - b|| / ||b||.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::sqrt(den);
}

/// Random model of the given architecture with non-zero biases.
inline pgl::ToyModel random_model(pgl::ModelSpec spec, pgl::Rng& rng) {
  pgl::ToyModel m = pgl::init_model(spec, rng);
  auto params = m.params();
  for (auto& p : params) {
    std::vector<double> v = p.value.values();
    if (p.name.ends_with(".bias")) {
      for (auto& x : v) x = rng.uniform(-0.3, 0.3);
    }
    p.value = Tensor(p.value.shape(), std::move(v), true);
  }
  return pgl::ToyModel(spec, std::move(params));
}

inline Tensor random_tensor(pgl::Shape shape, pgl::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(pgl::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace oracle
