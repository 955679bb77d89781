#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgl/data.hpp"
#include "pgl/guidance.hpp"
#include "pgl/models.hpp"
#include "pgl/trainer.hpp"

namespace pgl {

using json = nlohmann::json;

enum class AblationGroup { alpha, mask, perturbation };

inline std::string to_string(AblationGroup g) {
  switch (g) {
    case AblationGroup::alpha: return "alpha";
    case AblationGroup::mask: return "mask";
    case AblationGroup::perturbation: return "perturbation";
  }
  return "?";
}

inline AblationGroup parse_ablation_group(const std::string& s) {
  if (s == "alpha") return AblationGroup::alpha;
  if (s == "mask") return AblationGroup::mask;
  if (s == "perturbation") return AblationGroup::perturbation;
  throw Error("unknown ablation group '" + s + "' (expected alpha, mask or perturbation)");
}

struct AblationConfig {
  std::vector<AblationGroup> groups{AblationGroup::alpha, AblationGroup::mask, AblationGroup::perturbation};
  std::vector<double> alphas{0.0, 0.01, 0.03, 0.05, 0.07, 0.09};
  std::vector<MaskMode> mask_modes{MaskMode::provenance, MaskMode::random, MaskMode::unmasked};
  /// Signed area deltas for edit-mask perturbation; 0 is the unperturbed reference.
  std::vector<double> perturbations{0.0, 0.10, 0.30, -0.10, -0.30};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

/// Everything needed to reproduce one run. The dataset kind follows the
/// synthesis mode: skeleton mixing uses the skeleton generator.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  /// When unset the dataset uses the root seed.
  std::optional<std::uint64_t> dataset_seed;
  ToyDatasetSpec dataset;
  ToySkeletonSpec skeleton;
  ModelSpec model;
  std::size_t encoder_dim = 8;
  TrainConfig train;
  AblationConfig ablation;

  bool skeleton_mode() const { return train.synthesis == SynthesisMode::skeleton_mix; }
};

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

namespace detail {

// Reads typed fields from a JSON object and rejects unknown keys, reporting
// errors by dotted field path.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw Error(where() + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    try {
      convert(v, out);
    } catch (const Error& e) {
      throw Error(field(key) + ": " + e.what());
    } catch (const json::exception&) {
      throw Error(field(key) + ": has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw Error(field(it.key()) + ": unknown field");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  static void convert(const json& v, double& out) {
    if (!v.is_number()) throw Error("expected a number");
    out = v.get<double>();
  }
  static void convert(const json& v, std::size_t& out) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw Error("expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void convert(const json& v, std::string& out) {
    if (!v.is_string()) throw Error("expected a string");
    out = v.get<std::string>();
  }
  static void convert(const json& v, std::optional<std::uint64_t>& out) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    std::uint64_t x = 0;
    convert(v, x);
    out = x;
  }
  template <class T>
  static void convert(const json& v, std::vector<T>& out) {
    if (!v.is_array()) throw Error("expected an array");
    std::vector<T> r;
    for (const auto& e : v) {
      T x{};
      convert(e, x);
      r.push_back(x);
    }
    out = std::move(r);
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Parse, class T>
void read_enum(FieldReader& r, const char* key, T& out, Parse parse) {
  std::string s;
  r.read(key, s);
  if (s.empty()) return;
  try {
    out = parse(s);
  } catch (const Error& e) {
    throw Error(r.field(key) + ": " + e.what());
  }
}

}  // namespace detail

/// Derives the model's input geometry from the data geometry.
inline void resolve_model_shape(ExperimentConfig& c) {
  if (c.skeleton_mode()) {
    c.model.num_classes = c.skeleton.num_classes;
    c.model.encoder_in = c.skeleton.joints * c.skeleton.dims;
    c.model.encoder_dim = c.encoder_dim;
    c.model.input_shape = {c.skeleton.persons, c.skeleton.frames, c.encoder_dim};
  } else {
    c.model.num_classes = c.dataset.num_classes;
    c.model.encoder_in = 0;
    c.model.encoder_dim = 0;
    c.model.input_shape = {c.dataset.height, c.dataset.width, c.dataset.channels};
  }
  c.dataset.seed = c.dataset_seed.value_or(c.seed);
  c.skeleton.seed = c.dataset_seed.value_or(c.seed);
  c.train.seed = c.seed;
}

inline void validate(const ExperimentConfig& c) {
  if (c.skeleton_mode()) {
    validate(c.skeleton);
    if (c.encoder_dim == 0) throw Error("model.encoder_dim: must be positive");
    if (c.skeleton.persons % c.train.skeleton_groups != 0) {
      throw Error("train.skeleton_groups: must divide skeleton.persons");
    }
    if (c.model.architecture == Architecture::tiny_conv) {
      throw Error("model.architecture: skeleton features need linear or mlp");
    }
  } else {
    validate(c.dataset);
  }
  if (c.model.architecture == Architecture::mlp && (c.model.hidden.empty() || c.model.hidden.size() > 2)) {
    throw Error("model.hidden: mlp needs 1 or 2 hidden layer sizes");
  }
  for (auto h : c.model.hidden) {
    if (h == 0) throw Error("model.hidden: layer sizes must be positive");
  }
  if (c.model.architecture == Architecture::tiny_conv) {
    if (c.model.conv_channels.empty() || c.model.conv_channels.size() > 2) {
      throw Error("model.conv_channels: tiny_conv needs 1 or 2 layers");
    }
    for (auto ch : c.model.conv_channels) {
      if (ch == 0) throw Error("model.conv_channels: channel counts must be positive");
    }
    if (c.model.kernel % 2 == 0) throw Error("model.kernel: must be odd");
  }
  validate(c.model);
  validate(c.train);
  if (c.train.eval.thresholds < 2) throw Error("eval.thresholds: must be at least 2");
  if (c.train.eval.batch_size < 1) throw Error("eval.batch_size: must be positive");
  for (double d : c.train.eval.deltas) {
    if (!(d > 0.0 && d <= 1.0)) throw Error("eval.deltas: every delta must be in (0, 1]");
  }
  for (double a : c.ablation.alphas) {
    if (!(a >= 0.0)) throw Error("ablation.alphas: every alpha must be >= 0");
  }
  if (c.ablation.seeds.empty()) throw Error("ablation.seeds: must list at least one seed");
}

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::FieldReader root(j, "");
  root.read("seed", c.seed);
  root.read("dataset_seed", c.dataset_seed);

  if (const json* d = root.child("dataset")) {
    detail::FieldReader r(*d, "dataset");
    std::vector<std::size_t> size;
    r.read("image_size", size);
    if (d->contains("image_size")) {
      if (size.size() != 2) throw Error("dataset.image_size: expected [height, width]");
      c.dataset.height = size[0];
      c.dataset.width = size[1];
    }
    r.read("channels", c.dataset.channels);
    r.read("num_classes", c.dataset.num_classes);
    r.read("patch_size", c.dataset.patch_size);
    r.read("patch_amplitude", c.dataset.patch_amplitude);
    r.read("background_amplitude", c.dataset.background_amplitude);
    r.read("background_block", c.dataset.background_block);
    r.read("noise_std", c.dataset.noise_std);
    r.read("rho_train", c.dataset.rho_train);
    r.read("rho_test", c.dataset.rho_test);
    r.read("n_train", c.dataset.n_train);
    r.read("n_test", c.dataset.n_test);
    r.finish();
  }
  if (const json* s = root.child("skeleton")) {
    detail::FieldReader r(*s, "skeleton");
    r.read("persons", c.skeleton.persons);
    r.read("frames", c.skeleton.frames);
    r.read("joints", c.skeleton.joints);
    r.read("dims", c.skeleton.dims);
    r.read("num_classes", c.skeleton.num_classes);
    r.read("motion_amplitude", c.skeleton.motion_amplitude);
    r.read("noise_std", c.skeleton.noise_std);
    r.read("n_train", c.skeleton.n_train);
    r.read("n_test", c.skeleton.n_test);
    r.finish();
  }
  if (const json* m = root.child("model")) {
    detail::FieldReader r(*m, "model");
    detail::read_enum(r, "architecture", c.model.architecture, parse_architecture);
    r.read("hidden", c.model.hidden);
    r.read("conv_channels", c.model.conv_channels);
    r.read("kernel", c.model.kernel);
    detail::read_enum(r, "pooling", c.model.pooling, parse_pooling);
    r.read("encoder_dim", c.encoder_dim);
    r.finish();
  }
  if (const json* t = root.child("train")) {
    detail::FieldReader r(*t, "train");
    r.read("learning_rate", c.train.learning_rate);
    r.read("momentum", c.train.momentum);
    r.read("weight_decay", c.train.weight_decay);
    r.read("epochs", c.train.epochs);
    r.read("batch_size", c.train.batch_size);
    r.read("mixing_probability", c.train.mixing_probability);
    r.read("alpha", c.train.alpha);
    detail::read_enum(r, "synthesis", c.train.synthesis, parse_synthesis_mode);
    detail::read_enum(r, "mask_mode", c.train.mask_mode, parse_mask_mode);
    r.read("edit_amplitude", c.train.edit_amplitude);
    r.read("mask_perturbation", c.train.mask_perturbation);
    r.read("skeleton_groups", c.train.skeleton_groups);
    detail::read_enum(r, "schedule", c.train.schedule, parse_lr_schedule);
    r.finish();
  }
  if (const json* e = root.child("eval")) {
    detail::FieldReader r(*e, "eval");
    r.read("deltas", c.train.eval.deltas);
    r.read("thresholds", c.train.eval.thresholds);
    r.read("batch_size", c.train.eval.batch_size);
    r.finish();
  }
  if (const json* a = root.child("ablation")) {
    detail::FieldReader r(*a, "ablation");
    std::vector<std::string> groups, modes;
    r.read("groups", groups);
    if (a->contains("groups")) {
      c.ablation.groups.clear();
      for (const auto& g : groups) c.ablation.groups.push_back(parse_ablation_group(g));
    }
    r.read("alphas", c.ablation.alphas);
    r.read("mask_modes", modes);
    if (a->contains("mask_modes")) {
      c.ablation.mask_modes.clear();
      for (const auto& m : modes) c.ablation.mask_modes.push_back(parse_mask_mode(m));
    }
    r.read("perturbations", c.ablation.perturbations);
    r.read("seeds", c.ablation.seeds);
    r.finish();
  }
  root.finish();
  resolve_model_shape(c);
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Fully resolved config, every default expanded. Parsing the result gives
/// back an identical config.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset_seed"] = c.dataset_seed ? json(*c.dataset_seed) : json(nullptr);
  j["dataset"] = {{"image_size", {c.dataset.height, c.dataset.width}},
                  {"channels", c.dataset.channels},
                  {"num_classes", c.dataset.num_classes},
                  {"patch_size", c.dataset.patch_size},
                  {"patch_amplitude", c.dataset.patch_amplitude},
                  {"background_amplitude", c.dataset.background_amplitude},
                  {"background_block", c.dataset.background_block},
                  {"noise_std", c.dataset.noise_std},
                  {"rho_train", c.dataset.rho_train},
                  {"rho_test", c.dataset.rho_test},
                  {"n_train", c.dataset.n_train},
                  {"n_test", c.dataset.n_test}};
  j["skeleton"] = {{"persons", c.skeleton.persons},
                   {"frames", c.skeleton.frames},
                   {"joints", c.skeleton.joints},
                   {"dims", c.skeleton.dims},
                   {"num_classes", c.skeleton.num_classes},
                   {"motion_amplitude", c.skeleton.motion_amplitude},
                   {"noise_std", c.skeleton.noise_std},
                   {"n_train", c.skeleton.n_train},
                   {"n_test", c.skeleton.n_test}};
  j["model"] = {{"architecture", to_string(c.model.architecture)},
                {"hidden", c.model.hidden},
                {"conv_channels", c.model.conv_channels},
                {"kernel", c.model.kernel},
                {"pooling", to_string(c.model.pooling)},
                {"encoder_dim", c.encoder_dim}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"mixing_probability", c.train.mixing_probability},
                {"alpha", c.train.alpha},
                {"synthesis", to_string(c.train.synthesis)},
                {"mask_mode", to_string(c.train.mask_mode)},
                {"edit_amplitude", c.train.edit_amplitude},
                {"mask_perturbation", c.train.mask_perturbation},
                {"skeleton_groups", c.train.skeleton_groups},
                {"schedule", to_string(c.train.schedule)}};
  j["eval"] = {{"deltas", c.train.eval.deltas},
               {"thresholds", c.train.eval.thresholds},
               {"batch_size", c.train.eval.batch_size}};
  json groups = json::array(), modes = json::array();
  for (auto g : c.ablation.groups) groups.push_back(to_string(g));
  for (auto m : c.ablation.mask_modes) modes.push_back(to_string(m));
  j["ablation"] = {{"groups", groups},
                   {"alphas", c.ablation.alphas},
                   {"mask_modes", modes},
                   {"perturbations", c.ablation.perturbations},
                   {"seeds", c.ablation.seeds}};
  return j;
}

/// Config as it affects a single training run (ablation grid removed).
inline json run_json(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("ablation");
  return j;
}

}  // namespace pgl
