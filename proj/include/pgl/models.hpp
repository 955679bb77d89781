#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pgl/ops.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

enum class Architecture { linear, mlp, tiny_conv };
enum class Pooling { mean, max };

inline std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "max"; }

inline Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  throw Error("unknown pooling '" + s + "' (expected mean or max)");
}

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::linear: return "linear";
    case Architecture::mlp: return "mlp";
    case Architecture::tiny_conv: return "tiny_conv";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "linear") return Architecture::linear;
  if (s == "mlp") return Architecture::mlp;
  if (s == "tiny_conv") return Architecture::tiny_conv;
  throw Error("unknown architecture '" + s + "' (expected linear, mlp or tiny_conv)");
}

struct ModelSpec {
  Architecture architecture = Architecture::tiny_conv;
  /// Per-sample shape of the classifier input: [H,W,C] for images, [P,F,E]
  /// for skeleton features.
  Shape input_shape{16, 16, 1};
  std::size_t num_classes = 2;
  std::vector<std::size_t> hidden{32};        // mlp: 1-2 layers
  std::vector<std::size_t> conv_channels{8};  // tiny_conv: 1-2 layers
  std::size_t kernel = 3;
  /// Global pooling over positions after the conv layers.
  Pooling pooling = Pooling::max;
  /// When non-zero the model starts with a per-skeleton encoder mapping raw
  /// skeletons [P,F,K,V] with K*V = encoder_in to features [P,F,encoder_dim].
  std::size_t encoder_in = 0;
  std::size_t encoder_dim = 0;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Small differentiable classifier. Parameters are leaf tensors; an
/// optimizer step replaces them with new leaves.
class ToyModel {
 public:
  ToyModel() = default;
  ToyModel(ModelSpec spec, std::vector<NamedTensor> params) : spec_(std::move(spec)), params_(std::move(params)) {}

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_classes() const { return spec_.num_classes; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& params() { return params_; }

  const Tensor& param(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.value;
    }
    throw Error("model has no parameter '" + name + "'");
  }

  std::vector<Tensor> param_tensors() const {
    std::vector<Tensor> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(p.value);
    return v;
  }

  bool has_encoder() const { return spec_.encoder_dim != 0; }

  /// Raw skeletons [B,P,F,K,V] -> features [B,P,F,E].
  Tensor encode(const Tensor& skeletons) const;

  /// Logits [B, N] for a batch whose trailing dims equal spec().input_shape.
  Tensor forward(const Tensor& x) const;

 private:
  ModelSpec spec_;
  std::vector<NamedTensor> params_;
};

namespace detail {

inline Tensor gaussian_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor zero_param(Shape shape) { return Tensor::full(std::move(shape), 0.0, true); }

// Dense layer on [B, D] with weight [D, N] and bias [N].
inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rows(matmul(x, w), b); }

}  // namespace detail

inline void validate(const ModelSpec& s) {
  if (s.num_classes < 2) throw Error("model: num_classes must be at least 2");
  if (s.input_shape.empty() || numel(s.input_shape) == 0) throw Error("model: input_shape must be non-empty");
  if (s.architecture == Architecture::mlp && (s.hidden.empty() || s.hidden.size() > 2)) {
    throw Error("model: mlp needs 1 or 2 hidden layers");
  }
  if (s.architecture == Architecture::tiny_conv) {
    if (s.conv_channels.empty() || s.conv_channels.size() > 2) throw Error("model: tiny_conv needs 1 or 2 conv layers");
    if (s.input_shape.size() != 3) throw Error("model: tiny_conv needs image input [H,W,C]");
    if (s.kernel % 2 == 0) throw Error("model: conv kernel size must be odd");
  }
  if ((s.encoder_in == 0) != (s.encoder_dim == 0)) throw Error("model: encoder_in and encoder_dim must both be set");
  if (s.encoder_dim != 0 && (s.input_shape.size() != 3 || s.input_shape[2] != s.encoder_dim)) {
    throw Error("model: with an encoder, input_shape must be [P,F,encoder_dim]");
  }
}

/// He-normal weights, zero biases.
inline ToyModel init_model(const ModelSpec& spec, Rng& rng) {
  validate(spec);
  std::vector<NamedTensor> ps;
  if (spec.encoder_dim != 0) {
    ps.push_back({"encoder.weight", detail::gaussian_param({spec.encoder_in, spec.encoder_dim},
                                                           std::sqrt(1.0 / static_cast<double>(spec.encoder_in)), rng)});
    ps.push_back({"encoder.bias", detail::zero_param({spec.encoder_dim})});
  }
  const std::size_t in = numel(spec.input_shape);
  const std::size_t n = spec.num_classes;
  switch (spec.architecture) {
    case Architecture::linear:
      ps.push_back({"fc.weight", detail::gaussian_param({in, n}, std::sqrt(1.0 / static_cast<double>(in)), rng)});
      ps.push_back({"fc.bias", detail::zero_param({n})});
      break;
    case Architecture::mlp: {
      std::size_t prev = in;
      for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
        const auto tag = "hidden" + std::to_string(i);
        ps.push_back({tag + ".weight", detail::gaussian_param({prev, spec.hidden[i]},
                                                              std::sqrt(2.0 / static_cast<double>(prev)), rng)});
        ps.push_back({tag + ".bias", detail::zero_param({spec.hidden[i]})});
        prev = spec.hidden[i];
      }
      ps.push_back({"fc.weight", detail::gaussian_param({prev, n}, std::sqrt(1.0 / static_cast<double>(prev)), rng)});
      ps.push_back({"fc.bias", detail::zero_param({n})});
      break;
    }
    case Architecture::tiny_conv: {
      std::size_t prev = spec.input_shape[2];
      for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
        const auto tag = "conv" + std::to_string(i);
        const std::size_t fan_in = prev * spec.kernel * spec.kernel;
        ps.push_back({tag + ".weight", detail::gaussian_param({spec.conv_channels[i], spec.kernel, spec.kernel, prev},
                                                              std::sqrt(2.0 / static_cast<double>(fan_in)), rng)});
        ps.push_back({tag + ".bias", detail::zero_param({spec.conv_channels[i]})});
        prev = spec.conv_channels[i];
      }
      ps.push_back({"fc.weight", detail::gaussian_param({prev, n}, std::sqrt(1.0 / static_cast<double>(prev)), rng)});
      ps.push_back({"fc.bias", detail::zero_param({n})});
      break;
    }
  }
  return ToyModel(spec, std::move(ps));
}

/// Per-skeleton embedding: softplus(x W + b) applied to every (skeleton,
/// frame) pair, so outputs are strictly positive and permuting skeletons
/// permutes the output rows. Accepts [P,F,K,V] or [B,P,F,K,V].
inline Tensor skeleton_encoder(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (!x.defined() || (x.dim() != 4 && x.dim() != 5)) {
    throw ShapeError("skeleton_encoder: expected [P,F,K,V] or [B,P,F,K,V], got " +
                     (x.defined() ? to_string(x.shape()) : std::string("<undefined>")));
  }
  const Shape& s = x.shape();
  const std::size_t kv = s[s.size() - 2] * s[s.size() - 1];
  if (weight.dim() != 2 || weight.size(0) != kv || bias.dim() != 1 || bias.size(0) != weight.size(1)) {
    throw ShapeError("skeleton_encoder: weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                     " do not match joints*dims = " + std::to_string(kv));
  }
  const std::size_t rows = x.numel() / kv;
  Tensor h = softplus(detail::dense(reshape(x, {rows, kv}), weight, bias));
  Shape out(s.begin(), s.end() - 2);
  out.push_back(weight.size(1));
  return reshape(h, out);
}

inline Tensor ToyModel::encode(const Tensor& skeletons) const {
  if (!has_encoder()) throw Error("model has no skeleton encoder");
  return skeleton_encoder(skeletons, param("encoder.weight"), param("encoder.bias"));
}

inline Tensor ToyModel::forward(const Tensor& x) const {
  const Shape& in = spec_.input_shape;
  if (!x.defined() || x.dim() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    throw ShapeError("forward: expected batch of " + to_string(in) + ", got " +
                     (x.defined() ? to_string(x.shape()) : std::string("<undefined>")));
  }
  const std::size_t batch = x.size(0);
  switch (spec_.architecture) {
    case Architecture::linear:
      return detail::dense(reshape(x, {batch, numel(in)}), param("fc.weight"), param("fc.bias"));
    case Architecture::mlp: {
      Tensor h = reshape(x, {batch, numel(in)});
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const auto tag = "hidden" + std::to_string(i);
        h = relu(detail::dense(h, param(tag + ".weight"), param(tag + ".bias")));
      }
      return detail::dense(h, param("fc.weight"), param("fc.bias"));
    }
    case Architecture::tiny_conv: {
      Tensor h = x;
      const std::size_t hh = in[0], ww = in[1];
      for (std::size_t i = 0; i < spec_.conv_channels.size(); ++i) {
        const auto tag = "conv" + std::to_string(i);
        const std::size_t oc = spec_.conv_channels[i];
        Tensor z = conv2d(h, param(tag + ".weight"), spec_.kernel / 2);
        z = reshape(add_rows(reshape(z, {batch * hh * ww, oc}), param(tag + ".bias")), {batch, hh, ww, oc});
        h = relu(z);
      }
      const std::size_t oc = spec_.conv_channels.back();
      Tensor flat = reshape(h, {batch, hh * ww, oc});
      Tensor pooled = spec_.pooling == Pooling::mean ? mean_axis(flat, 1) : max_axis(flat, 1);
      return detail::dense(pooled, param("fc.weight"), param("fc.bias"));
    }
  }
  throw Error("forward: unknown architecture");
}

}  // namespace pgl
