#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pgl/rng.hpp"
#include "pgl/synthesis.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

/// Toy analogue of a spurious-background benchmark: each image holds a
/// class-specific patch at a random location over a background whose type
/// matches the class with probability rho (otherwise uniformly random).
struct ToyDatasetSpec {
  std::size_t height = 16, width = 16, channels = 1;
  std::size_t num_classes = 2;
  std::size_t patch_size = 4;
  double patch_amplitude = 1.0;
  double background_amplitude = 0.9;
  /// Side of the blocks making up a background texture.
  std::size_t background_block = 4;
  double noise_std = 0.1;
  double rho_train = 1.0, rho_test = 0.0;
  std::size_t n_train = 512, n_test = 512;
  std::uint64_t seed = 0;
};

/// Toy multi-person skeleton sequences: one actor performs the class motion,
/// the other skeletons move with class-independent distractor motion.
struct ToySkeletonSpec {
  std::size_t persons = 4, frames = 8, joints = 5, dims = 2;
  std::size_t num_classes = 2;
  double motion_amplitude = 1.0;
  double noise_std = 0.1;
  std::size_t n_train = 256, n_test = 256;
  std::uint64_t seed = 0;
};

enum class DatasetKind { image, skeleton };

/// Flat labelled dataset. Images are [H,W,C]; skeleton samples reuse the
/// layout with H = persons, W = frames, C = joints * dims. Masks mark the
/// ground-truth target region (patch pixels or actor rows), groups encode
/// label * num_classes + background type.
struct Dataset {
  DatasetKind kind = DatasetKind::image;
  std::size_t height = 0, width = 0, channels = 0, num_classes = 0;
  std::size_t joints = 0, dims = 0;
  std::vector<double> images;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> masks;
  std::vector<std::uint8_t> groups;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return height * width * channels; }

  Shape sample_shape() const {
    if (kind == DatasetKind::skeleton) return {height, width, joints, dims};
    return {height, width, channels};
  }

  Tensor sample(std::size_t i) const {
    auto first = images.begin() + static_cast<std::ptrdiff_t>(i * sample_numel());
    return Tensor(sample_shape(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(sample_numel())));
  }

  /// Stacks the listed samples into [B, sample_shape...].
  Tensor batch(std::span<const std::size_t> idx, bool requires_grad = false) const {
    std::vector<double> out;
    out.reserve(idx.size() * sample_numel());
    for (auto i : idx) {
      auto first = images.begin() + static_cast<std::ptrdiff_t>(i * sample_numel());
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(sample_numel()));
    }
    Shape s = sample_shape();
    s.insert(s.begin(), idx.size());
    return Tensor(std::move(s), std::move(out), requires_grad);
  }

  /// Target mask [H,W] (1 = target).
  Tensor target_mask(std::size_t i) const {
    std::vector<double> m(height * width);
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = masks[i * height * width + p];
    return Tensor({height, width}, std::move(m));
  }

  /// Tightest box around the target mask.
  Box target_box(std::size_t i) const {
    Box b{height, width, 0, 0};
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        if (!masks[(i * height + r) * width + c]) continue;
        b.row0 = std::min(b.row0, r);
        b.col0 = std::min(b.col0, c);
        b.row1 = std::max(b.row1, r + 1);
        b.col1 = std::max(b.col1, c + 1);
      }
    if (b.row1 == 0) return Box{};
    return b;
  }

  std::size_t background(std::size_t i) const { return groups[i] % num_classes; }

  std::vector<double> one_hot(std::size_t i) const {
    std::vector<double> y(num_classes, 0.0);
    y[labels[i]] = 1.0;
    return y;
  }
};

struct DatasetSplits {
  Dataset train, test;
};

inline void validate(const ToyDatasetSpec& s) {
  if (s.height == 0 || s.width == 0) throw Error("dataset.image_size: height and width must be positive");
  if (s.channels == 0) throw Error("dataset.channels: must be positive");
  if (s.num_classes < 2 || s.num_classes > 8) throw Error("dataset.num_classes: must be in [2, 8]");
  if (s.patch_size == 0 || s.patch_size > s.height || s.patch_size > s.width) {
    throw Error("dataset.patch_size: patch must be non-empty and fit inside the image");
  }
  if (s.background_block == 0) throw Error("dataset.background_block: must be positive");
  if (!(s.rho_train >= 0.0 && s.rho_train <= 1.0)) throw Error("dataset.rho_train: must be in [0, 1]");
  if (!(s.rho_test >= 0.0 && s.rho_test <= 1.0)) throw Error("dataset.rho_test: must be in [0, 1]");
  if (!(s.noise_std >= 0.0)) throw Error("dataset.noise_std: must be non-negative");
  if (s.n_train == 0 || s.n_test == 0) throw Error("dataset.n_train/n_test: must be positive");
}

inline void validate(const ToySkeletonSpec& s) {
  if (s.persons == 0 || s.frames == 0 || s.joints == 0 || s.dims == 0) {
    throw Error("skeleton: persons, frames, joints and dims must be positive");
  }
  if (s.num_classes < 2 || s.num_classes > 8) throw Error("skeleton.num_classes: must be in [2, 8]");
  if (!(s.noise_std >= 0.0)) throw Error("skeleton.noise_std: must be non-negative");
  if (s.n_train == 0 || s.n_test == 0) throw Error("skeleton.n_train/n_test: must be positive");
}

namespace detail {

struct ImageTemplates {
  std::vector<std::vector<double>> patches;      // per class, s*s*C, entries +-1
  std::vector<std::vector<double>> backgrounds;  // per type, H*W*C, entries +-1
};

inline ImageTemplates make_templates(const ToyDatasetSpec& s) {
  Rng rng = Rng::stream(s.seed, "dataset.templates");
  ImageTemplates t;
  const std::size_t pn = s.patch_size * s.patch_size * s.channels;
  for (std::size_t c = 0; c < s.num_classes; ++c) {
    std::vector<double> p(pn);
    for (auto& v : p) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    t.patches.push_back(std::move(p));
  }
  const std::size_t bh = (s.height + s.background_block - 1) / s.background_block;
  const std::size_t bw = (s.width + s.background_block - 1) / s.background_block;
  for (std::size_t b = 0; b < s.num_classes; ++b) {
    std::vector<double> coarse(bh * bw * s.channels);
    for (auto& v : coarse) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    std::vector<double> full(s.height * s.width * s.channels);
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t q = 0; q < s.width; ++q)
        for (std::size_t k = 0; k < s.channels; ++k) {
          full[(r * s.width + q) * s.channels + k] =
              coarse[((r / s.background_block) * bw + q / s.background_block) * s.channels + k];
        }
    t.backgrounds.push_back(std::move(full));
  }
  return t;
}

inline Dataset make_image_split(const ToyDatasetSpec& s, const ImageTemplates& t, std::size_t n, double rho,
                                Rng& rng) {
  Dataset d;
  d.kind = DatasetKind::image;
  d.height = s.height;
  d.width = s.width;
  d.channels = s.channels;
  d.num_classes = s.num_classes;
  const std::size_t hwc = s.height * s.width * s.channels;
  d.images.resize(n * hwc);
  d.masks.assign(n * s.height * s.width, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(rng.below(s.num_classes));
    const std::size_t bg = rng.bernoulli(rho) ? label : static_cast<std::size_t>(rng.below(s.num_classes));
    const std::size_t pr = rng.below(s.height - s.patch_size + 1);
    const std::size_t pc = rng.below(s.width - s.patch_size + 1);
    double* img = &d.images[i * hwc];
    for (std::size_t p = 0; p < hwc; ++p) img[p] = s.background_amplitude * t.backgrounds[bg][p];
    for (std::size_t r = 0; r < s.patch_size; ++r)
      for (std::size_t q = 0; q < s.patch_size; ++q) {
        const std::size_t pix = (pr + r) * s.width + (pc + q);
        d.masks[i * s.height * s.width + pix] = 1;
        for (std::size_t k = 0; k < s.channels; ++k) {
          img[pix * s.channels + k] = s.patch_amplitude * t.patches[label][(r * s.patch_size + q) * s.channels + k];
        }
      }
    for (std::size_t p = 0; p < hwc; ++p) img[p] += s.noise_std * rng.normal();
    d.labels.push_back(static_cast<std::uint16_t>(label));
    d.groups.push_back(static_cast<std::uint8_t>(label * s.num_classes + bg));
  }
  return d;
}

struct MotionSignature {
  double frequency;
  std::vector<double> phase;      // per joint
  std::vector<double> direction;  // per joint * dims
};

inline MotionSignature random_motion(const ToySkeletonSpec& s, Rng& rng) {
  MotionSignature m;
  m.frequency = static_cast<double>(1 + rng.below(3));
  for (std::size_t k = 0; k < s.joints; ++k) m.phase.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
  for (std::size_t k = 0; k < s.joints * s.dims; ++k) m.direction.push_back(rng.bernoulli(0.5) ? 1.0 : -1.0);
  return m;
}

inline Dataset make_skeleton_split(const ToySkeletonSpec& s, const std::vector<MotionSignature>& classes,
                                   const std::vector<double>& rest_pose, std::size_t n, Rng& rng) {
  Dataset d;
  d.kind = DatasetKind::skeleton;
  d.height = s.persons;
  d.width = s.frames;
  d.channels = s.joints * s.dims;
  d.joints = s.joints;
  d.dims = s.dims;
  d.num_classes = s.num_classes;
  const std::size_t per = s.persons * s.frames * s.joints * s.dims;
  d.images.resize(n * per);
  d.masks.assign(n * s.persons * s.frames, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(rng.below(s.num_classes));
    const std::size_t actor = rng.below(s.persons);
    double* x = &d.images[i * per];
    for (std::size_t p = 0; p < s.persons; ++p) {
      const MotionSignature motion = p == actor ? classes[label] : random_motion(s, rng);
      for (std::size_t f = 0; f < s.frames; ++f) {
        if (p == actor) d.masks[(i * s.persons + p) * s.frames + f] = 1;
        const double t = 2.0 * std::numbers::pi * motion.frequency * static_cast<double>(f) / static_cast<double>(s.frames);
        for (std::size_t k = 0; k < s.joints; ++k)
          for (std::size_t v = 0; v < s.dims; ++v) {
            const std::size_t kv = k * s.dims + v;
            x[((p * s.frames + f) * s.joints + k) * s.dims + v] =
                rest_pose[kv] + s.motion_amplitude * motion.direction[kv] * std::sin(t + motion.phase[k]) +
                s.noise_std * rng.normal();
          }
      }
    }
    d.labels.push_back(static_cast<std::uint16_t>(label));
    d.groups.push_back(static_cast<std::uint8_t>(label * s.num_classes + label));
  }
  return d;
}

}  // namespace detail

/// Train and test splits drawn from disjoint random streams of one seed.
inline DatasetSplits generate_image_dataset(const ToyDatasetSpec& spec) {
  validate(spec);
  auto templates = detail::make_templates(spec);
  Rng train_rng = Rng::stream(spec.seed, "dataset.train");
  Rng test_rng = Rng::stream(spec.seed, "dataset.test");
  return {detail::make_image_split(spec, templates, spec.n_train, spec.rho_train, train_rng),
          detail::make_image_split(spec, templates, spec.n_test, spec.rho_test, test_rng)};
}

inline DatasetSplits generate_skeleton_dataset(const ToySkeletonSpec& spec) {
  validate(spec);
  Rng sig = Rng::stream(spec.seed, "dataset.templates");
  std::vector<detail::MotionSignature> classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) classes.push_back(detail::random_motion(spec, sig));
  std::vector<double> rest(spec.joints * spec.dims);
  for (auto& v : rest) v = sig.uniform(-1.0, 1.0);
  Rng train_rng = Rng::stream(spec.seed, "dataset.train");
  Rng test_rng = Rng::stream(spec.seed, "dataset.test");
  return {detail::make_skeleton_split(spec, classes, rest, spec.n_train, train_rng),
          detail::make_skeleton_split(spec, classes, rest, spec.n_test, test_rng)};
}

// ---------------------------------------------------------------------------
// Binary dataset file: little-endian header
//   magic[4] ("PGLI" image / "PGLS" skeleton), u32 version, u32 H, W, C, N, num_classes
// followed by f64 images[N*H*W*C], u16 labels[N], u8 masks[N*H*W], u8 groups[N].
// Skeleton files additionally need joints/dims, which live in the JSON sidecar.

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw Error("dataset file: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& d) {
  std::string out;
  out += d.kind == DatasetKind::skeleton ? "PGLS" : "PGLI";
  detail::put_u32(out, kDatasetVersion);
  for (auto v : {d.height, d.width, d.channels, d.size(), d.num_classes}) detail::put_u32(out, static_cast<std::uint32_t>(v));
  for (double v : d.images) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  for (auto l : d.labels) {
    out.push_back(static_cast<char>(l & 0xff));
    out.push_back(static_cast<char>(l >> 8));
  }
  out.append(reinterpret_cast<const char*>(d.masks.data()), d.masks.size());
  out.append(reinterpret_cast<const char*>(d.groups.data()), d.groups.size());
  return out;
}

/// Inverse of encode_dataset. For skeleton files pass the joint count and
/// per-joint dims from the sidecar.
inline Dataset decode_dataset(const std::string& in, std::size_t joints = 0, std::size_t dims = 0) {
  if (in.size() < 4) throw Error("dataset file: too short");
  Dataset d;
  const std::string magic = in.substr(0, 4);
  if (magic == "PGLI") {
    d.kind = DatasetKind::image;
  } else if (magic == "PGLS") {
    d.kind = DatasetKind::skeleton;
  } else {
    throw Error("dataset file: bad magic");
  }
  std::size_t pos = 4;
  if (detail::get_u32(in, pos) != kDatasetVersion) throw Error("dataset file: unsupported version");
  d.height = detail::get_u32(in, pos);
  d.width = detail::get_u32(in, pos);
  d.channels = detail::get_u32(in, pos);
  const std::size_t n = detail::get_u32(in, pos);
  d.num_classes = detail::get_u32(in, pos);
  if (d.kind == DatasetKind::skeleton) {
    if (joints * dims != d.channels) throw Error("dataset file: skeleton joints*dims does not match channel count");
    d.joints = joints;
    d.dims = dims;
  }
  const std::size_t hw = d.height * d.width;
  const std::size_t need = pos + n * hw * d.channels * 8 + n * 2 + n * hw + n;
  if (in.size() != need) throw Error("dataset file: size does not match header");
  d.images.resize(n * hw * d.channels);
  for (auto& v : d.images) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    v = std::bit_cast<double>(bits);
    pos += 8;
  }
  d.labels.resize(n);
  for (auto& l : d.labels) {
    l = static_cast<std::uint16_t>(static_cast<unsigned char>(in[pos]) | (static_cast<unsigned char>(in[pos + 1]) << 8));
    pos += 2;
  }
  d.masks.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.begin() + static_cast<std::ptrdiff_t>(pos + n * hw));
  pos += n * hw;
  d.groups.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.end());
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  auto bytes = encode_dataset(d);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

inline Dataset load_dataset(const std::string& path, std::size_t joints = 0, std::size_t dims = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes, joints, dims);
}

}  // namespace pgl
