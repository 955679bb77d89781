#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pgl/autodiff.hpp"
#include "pgl/data.hpp"
#include "pgl/guidance.hpp"
#include "pgl/metrics.hpp"
#include "pgl/models.hpp"
#include "pgl/rng.hpp"
#include "pgl/synthesis.hpp"

namespace pgl {

enum class SynthesisMode { cutmix, skeleton_mix, simulated_edit };
enum class LrSchedule { constant, linear, cosine };

inline std::string to_string(SynthesisMode m) {
  switch (m) {
    case SynthesisMode::cutmix: return "cutmix";
    case SynthesisMode::skeleton_mix: return "skeleton_mix";
    case SynthesisMode::simulated_edit: return "simulated_edit";
  }
  return "?";
}

inline SynthesisMode parse_synthesis_mode(const std::string& s) {
  if (s == "cutmix") return SynthesisMode::cutmix;
  if (s == "skeleton_mix") return SynthesisMode::skeleton_mix;
  if (s == "simulated_edit") return SynthesisMode::simulated_edit;
  throw Error("unknown synthesis mode '" + s + "' (expected cutmix, skeleton_mix or simulated_edit)");
}

inline std::string to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::linear: return "linear";
    case LrSchedule::cosine: return "cosine";
  }
  return "?";
}

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "linear") return LrSchedule::linear;
  if (s == "cosine") return LrSchedule::cosine;
  throw Error("unknown learning-rate schedule '" + s + "' (expected constant, linear or cosine)");
}

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  /// Probability that a batch sample is replaced by a synthetic one.
  double mixing_probability = 1.0;
  double alpha = 0.09;
  std::uint64_t seed = 0;
  SynthesisMode synthesis = SynthesisMode::simulated_edit;
  MaskMode mask_mode = MaskMode::provenance;
  /// Editor strength on the simulated-edit path.
  double edit_amplitude = 0.5;
  /// Signed area change applied to edit masks: > 0 dilates, < 0 erodes.
  double mask_perturbation = 0.0;
  /// Skeleton groups T; skeletons 0..P/T-1 come from the second source.
  std::size_t skeleton_groups = 2;
  LrSchedule schedule = LrSchedule::constant;
  EvalOptions eval;
};

inline LabelMode label_mode_for(SynthesisMode m) {
  return m == SynthesisMode::simulated_edit ? LabelMode::hard_single : LabelMode::soft_pair;
}

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) throw Error("train.learning_rate: must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw Error("train.momentum: must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw Error("train.weight_decay: must be >= 0");
  if (c.epochs < 1) throw Error("train.epochs: must be >= 1");
  if (c.batch_size < 1) throw Error("train.batch_size: must be >= 1");
  if (!(c.mixing_probability >= 0.0 && c.mixing_probability <= 1.0)) {
    throw Error("train.mixing_probability: must be in [0, 1]");
  }
  if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) throw Error("train.alpha: must be a finite number >= 0");
  if (!(c.edit_amplitude >= 0.0)) throw Error("train.edit_amplitude: must be >= 0");
  if (!(std::fabs(c.mask_perturbation) < 10.0)) throw Error("train.mask_perturbation: out of range");
  if (c.skeleton_groups < 1) throw Error("train.skeleton_groups: must be >= 1");
}

/// One row of the per-epoch training report.
struct EpochMetrics {
  std::size_t epoch = 0;
  double l_cls = 0.0, l_pg = 0.0, l_total = 0.0;
  double test_accuracy = 0.0;
  double worst_group_accuracy = 0.0;
  double grad_mass = 0.0;
  std::optional<BoxAccuracy> box;
  /// Synthetic samples that received the provenance loss / were skipped
  /// because both sources had the same class.
  std::size_t pg_samples = 0, pg_skipped = 0;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

struct TrainResult {
  ToyModel model;
  std::vector<EpochMetrics> history;
  /// Epoch with the highest test accuracy (first on ties).
  std::size_t best_epoch = 0;
};

/// Momentum buffers for SGD, one per parameter.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v.
inline void sgd_step(ToyModel& model, const std::vector<Tensor>& grads, SgdState& state, double lr, double momentum,
                     double weight_decay) {
  auto& params = model.params();
  if (grads.size() != params.size()) throw Error("sgd_step: gradient count does not match parameter count");
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.value.numel(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i].value.values();
    const auto& g = grads[i].values();
    auto& v = state.velocity[i];
    std::vector<double> next(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum * v[k] + (g[k] + weight_decay * p[k]);
      next[k] = p[k] - lr * v[k];
    }
    if (!all_finite(next)) throw NumericError("sgd_step: parameter '" + params[i].name + "' became non-finite");
    params[i].value = Tensor(params[i].value.shape(), std::move(next), true);
  }
}

inline double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
  const double progress = total_steps == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps);
  switch (c.schedule) {
    case LrSchedule::constant: return c.learning_rate;
    case LrSchedule::linear: return c.learning_rate * (1.0 - progress);
    case LrSchedule::cosine: return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return c.learning_rate;
}

namespace detail {

template <class F>
auto guarded(const char* term, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(std::string(term) + " is not finite: " + e.what());
  }
}

// A batch after synthesis, ready for the loss.
struct SynthBatch {
  Tensor input;                   // classifier input (leaf for images, mixed features for skeletons)
  std::vector<double> targets;    // [B, N] label distributions
  std::vector<char> active;       // provenance loss applies to this row
  std::vector<std::size_t> class_a, class_b;
  std::vector<double> masks;      // per row, aligned with the input minus channels (images) or fully (skeletons)
  Shape mask_shape;
  std::size_t skipped = 0;
};

inline std::vector<double> random_bits(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return v;
}

inline SynthBatch synthesize_images(const Dataset& data, std::span<const std::size_t> idx, const TrainConfig& cfg,
                                    Rng& pair_rng, Rng& mask_rng) {
  const std::size_t b = idx.size(), n = data.num_classes;
  const std::size_t hw = data.height * data.width, per = data.sample_numel();
  SynthBatch s;
  s.targets.assign(b * n, 0.0);
  s.active.assign(b, 0);
  s.class_a.assign(b, 0);
  s.class_b.assign(b, 0);
  s.masks.assign(b * hw, 1.0);
  s.mask_shape = {b, data.height, data.width};
  std::vector<double> x;
  x.reserve(b * per);
  const auto partner = b >= 2 ? pair_rng.derangement(b) : std::vector<std::size_t>(b, 0);

  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t i = idx[r];
    const std::size_t label = data.labels[i];
    const bool synth = (cfg.synthesis == SynthesisMode::simulated_edit || b >= 2) && mask_rng.bernoulli(cfg.mixing_probability);
    Tensor xi = data.sample(i);
    std::vector<double> mask_row;
    if (!synth) {
      x.insert(x.end(), xi.values().begin(), xi.values().end());
      s.targets[r * n + label] = 1.0;
      continue;
    }
    if (cfg.synthesis == SynthesisMode::cutmix) {
      const std::size_t j = idx[partner[r]];
      SyntheticSample m = cutmix(xi, data.one_hot(i), data.sample(j), data.one_hot(j), mask_rng);
      x.insert(x.end(), m.x_tilde.values().begin(), m.x_tilde.values().end());
      for (std::size_t c = 0; c < n; ++c) s.targets[r * n + c] = m.y_tilde[c];
      s.class_a[r] = m.class_a;
      s.class_b[r] = m.class_b;
      if (m.class_a == m.class_b) {
        ++s.skipped;
        continue;
      }
      mask_row = m.masks[0].values().values();
    } else {
      EditResult e = simulated_edit(xi, data.target_mask(i), cfg.edit_amplitude, mask_rng);
      x.insert(x.end(), e.x_edited.values().begin(), e.x_edited.values().end());
      s.targets[r * n + label] = 1.0;
      s.class_a[r] = label;
      DiffMaskResult dm = diff_mask(xi, e.x_edited);
      ProvenanceMask pm = dm.mask;
      if (cfg.mask_perturbation != 0.0 && !dm.degenerate) {
        pm = perturb_mask(pm, cfg.mask_perturbation > 0 ? Morphology::dilate : Morphology::erode,
                          std::fabs(cfg.mask_perturbation))
                 .mask;
      }
      mask_row = pm.values().values();
    }
    if (cfg.mask_mode == MaskMode::random) mask_row = random_bits(hw, mask_rng);
    if (cfg.mask_mode == MaskMode::unmasked) std::fill(mask_row.begin(), mask_row.end(), 0.0);
    s.active[r] = 1;
    std::copy(mask_row.begin(), mask_row.end(), s.masks.begin() + static_cast<std::ptrdiff_t>(r * hw));
  }
  Shape shape = data.sample_shape();
  shape.insert(shape.begin(), b);
  s.input = Tensor(shape, std::move(x), true);
  return s;
}

// Skeleton mixing happens in feature space, so it must run on the training
// tape: the features depend on the encoder parameters.
inline SynthBatch synthesize_skeletons(const ToyModel& model, const Dataset& data, std::span<const std::size_t> idx,
                                       const TrainConfig& cfg, Rng& pair_rng, Rng& mask_rng) {
  const std::size_t b = idx.size(), n = data.num_classes;
  SynthBatch s;
  s.targets.assign(b * n, 0.0);
  s.active.assign(b, 0);
  s.class_a.assign(b, 0);
  s.class_b.assign(b, 0);
  const auto partner = b >= 2 ? pair_rng.derangement(b) : std::vector<std::size_t>(b, 0);
  std::vector<std::size_t> other(b);
  for (std::size_t r = 0; r < b; ++r) other[r] = idx[partner[r]];

  Tensor fa = model.encode(data.batch(idx));
  Tensor fb = model.encode(data.batch(other));
  const std::size_t p = fa.size(1), f = fa.size(2), e = fa.size(3);
  const std::size_t per = p * f * e;
  const ProvenanceMask mix = skeleton_mask(p, f, e, cfg.skeleton_groups);
  const double lambda = mix.fraction_ones();
  s.masks.assign(b * per, 1.0);
  s.mask_shape = fa.shape();
  std::vector<double> gate(b * per, 1.0);
  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t i = idx[r], j = other[r];
    const bool synth = b >= 2 && mask_rng.bernoulli(cfg.mixing_probability);
    if (!synth) {
      s.targets[r * n + data.labels[i]] = 1.0;
      continue;
    }
    std::copy(mix.values().values().begin(), mix.values().values().end(),
              gate.begin() + static_cast<std::ptrdiff_t>(r * per));
    s.targets[r * n + data.labels[i]] += lambda;
    s.targets[r * n + data.labels[j]] += 1.0 - lambda;
    s.class_a[r] = data.labels[i];
    s.class_b[r] = data.labels[j];
    if (s.class_a[r] == s.class_b[r]) {
      ++s.skipped;
      continue;
    }
    std::vector<double> row = mix.values().values();
    if (cfg.mask_mode == MaskMode::random) row = random_bits(per, mask_rng);
    if (cfg.mask_mode == MaskMode::unmasked) std::fill(row.begin(), row.end(), 0.0);
    std::copy(row.begin(), row.end(), s.masks.begin() + static_cast<std::ptrdiff_t>(r * per));
    s.active[r] = 1;
  }
  s.input = mix_features(fa, fb, Tensor(fa.shape(), std::move(gate)));
  return s;
}

struct StepLosses {
  double l_cls = 0.0, l_pg = 0.0, l_total = 0.0;
  bool has_pg = false;
  std::size_t pg_samples = 0, skipped = 0;
};

/// Loss terms of one synthesized batch, recorded on the current tape. l_pg is
/// undefined when no row carries the provenance loss; l_total includes it only
/// when alpha > 0.
struct BatchLoss {
  Tensor l_cls, l_pg, l_total;
  std::size_t pg_samples = 0;
};

inline BatchLoss batch_loss(const ToyModel& model, const SynthBatch& s, const TrainConfig& cfg) {
  BatchLoss out;
  const std::size_t b = s.active.size();
  const auto inv_b = 1.0 / static_cast<double>(b);
  Tensor logits = guarded("L_cls", [&] { return model.forward(s.input); });
  out.l_cls = guarded("L_cls", [&] {
    Tensor targets(logits.shape(), s.targets);
    return scale(neg(sum(mul(targets, log_softmax(logits)))), inv_b);
  });
  out.l_total = out.l_cls;
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < b; ++r) {
    if (s.active[r]) rows.push_back(r);
  }
  if (rows.empty()) return out;
  const bool create_graph = cfg.alpha > 0.0;
  const double inv_s = 1.0 / static_cast<double>(rows.size());
  out.l_pg = guarded("L_PG", [&] {
    const std::size_t n = logits.size(1);
    auto selection = [&](const std::vector<std::size_t>& cls) {
      std::vector<double> sel(b * n, 0.0);
      for (auto r : rows) sel[r * n + cls[r]] = 1.0;
      return Tensor({b, n}, std::move(sel));
    };
    auto row_grad = [&](const std::vector<std::size_t>& cls) {
      return grad(sum(mul(logits, selection(cls))), {s.input}, create_graph)[0];
    };
    Tensor mask(s.mask_shape, s.masks);
    Tensor ga = row_grad(s.class_a);
    if (label_mode_for(cfg.synthesis) == LabelMode::hard_single) {
      return scale(provenance_loss_hard(ga, mask), inv_s);
    }
    Tensor gb = row_grad(s.class_b);
    if (cfg.mask_mode == MaskMode::unmasked) return scale(unmasked_loss_soft(ga, gb), inv_s);
    return scale(provenance_loss_soft(ga, gb, mask), inv_s);
  });
  out.pg_samples = rows.size();
  if (cfg.alpha > 0.0) out.l_total = guarded("L_total", [&] { return total_loss(out.l_cls, out.l_pg, cfg.alpha); });
  return out;
}

inline SynthBatch synthesize(const ToyModel& model, const Dataset& data, std::span<const std::size_t> idx,
                             const TrainConfig& cfg, Rng& pair_rng, Rng& mask_rng) {
  return data.kind == DatasetKind::skeleton ? synthesize_skeletons(model, data, idx, cfg, pair_rng, mask_rng)
                                            : synthesize_images(data, idx, cfg, pair_rng, mask_rng);
}

}  // namespace detail

/// One optimization step on the given batch indices. Opens its own tape.
inline detail::StepLosses train_step(ToyModel& model, const Dataset& data, std::span<const std::size_t> idx,
                                     const TrainConfig& cfg, SgdState& state, double lr, Rng& pair_rng, Rng& mask_rng) {
  TapeScope scope;
  detail::SynthBatch s = detail::synthesize(model, data, idx, cfg, pair_rng, mask_rng);
  detail::BatchLoss loss = detail::batch_loss(model, s, cfg);
  detail::StepLosses out;
  out.l_cls = loss.l_cls.item();
  out.skipped = s.skipped;
  if (loss.l_pg.defined()) {
    out.l_pg = loss.l_pg.item();
    out.has_pg = true;
    out.pg_samples = loss.pg_samples;
  }
  out.l_total = loss.l_total.item();
  const auto params = model.param_tensors();
  auto grads = detail::guarded("L_total", [&] { return grad(loss.l_total, params, false); });
  sgd_step(model, grads, state, lr, cfg.momentum, cfg.weight_decay);
  return out;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains `model` on `train_set` and evaluates on `test_set` after every
/// epoch. Every random draw comes from named streams of cfg.seed.
inline TrainResult train(ToyModel model, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  validate(cfg);
  if (train_set.size() == 0) throw Error("train: empty training set");
  if ((cfg.synthesis == SynthesisMode::skeleton_mix) != (train_set.kind == DatasetKind::skeleton)) {
    throw Error("train: synthesis mode " + to_string(cfg.synthesis) + " does not match the dataset kind");
  }
  if (train_set.kind == DatasetKind::skeleton && !model.has_encoder()) {
    throw Error("train: skeleton data needs a model with a skeleton encoder");
  }
  TrainResult result;
  SgdState state;
  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches * cfg.epochs;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    MemoryStats::reset_peak();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle", epoch);
    shuffle_rng.shuffle(order);

    EpochMetrics m;
    m.epoch = epoch;
    std::size_t pg_batches = 0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = bi * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Rng pair_rng = Rng::stream(cfg.seed, "pairing", epoch, bi);
      Rng mask_rng = Rng::stream(cfg.seed, "masks", epoch, bi);
      auto s = train_step(model, train_set, idx, cfg, state, scheduled_lr(cfg, step++, total_steps), pair_rng, mask_rng);
      m.l_cls += s.l_cls;
      m.l_total += s.l_total;
      if (s.has_pg) {
        m.l_pg += s.l_pg;
        ++pg_batches;
      }
      m.pg_samples += s.pg_samples;
      m.pg_skipped += s.skipped;
    }
    m.l_cls /= static_cast<double>(batches);
    m.l_total /= static_cast<double>(batches);
    if (pg_batches) m.l_pg /= static_cast<double>(pg_batches);

    EvalReport rep = evaluate(model, test_set, cfg.eval);
    m.test_accuracy = rep.accuracy;
    m.worst_group_accuracy = rep.worst_group_accuracy;
    m.grad_mass = rep.grad_mass;
    m.box = rep.box;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.peak_bytes = MemoryStats::peak_bytes();
    result.history.push_back(m);
    if (m.test_accuracy > result.history[result.best_epoch].test_accuracy) result.best_epoch = epoch;
    if (on_epoch) on_epoch(m);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace pgl
