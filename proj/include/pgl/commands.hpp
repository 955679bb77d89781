#pragma once

#include <chrono>
#include <optional>
#include <string>

#include "pgl/ablation.hpp"
#include "pgl/config.hpp"
#include "pgl/experiment.hpp"
#include "pgl/io.hpp"
#include "pgl/metrics.hpp"

namespace pgl {

/// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<std::string> mask_mode;
};

inline ExperimentConfig load_experiment(const std::string& config_path, const Overrides& o = {}) {
  ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.alpha) c.train.alpha = *o.alpha;
  if (o.mask_mode) {
    try {
      c.train.mask_mode = parse_mask_mode(*o.mask_mode);
    } catch (const Error& e) {
      throw Error(std::string("--mask-mode: ") + e.what());
    }
  }
  resolve_model_shape(c);
  validate(c);
  return c;
}

/// Writes train.bin / test.bin in the dataset file format plus a dataset.json
/// sidecar describing the spec.
inline json cmd_generate(const std::string& config_path, const fs::path& out_dir, const Overrides& o = {}) {
  const ExperimentConfig c = load_experiment(config_path, o);
  DatasetSplits d = make_datasets(c);
  json files = json::object();
  for (auto [name, set] : {std::pair<const char*, const Dataset*>{"train", &d.train}, {"test", &d.test}}) {
    const std::string bytes = encode_dataset(*set);
    const std::string file = std::string(name) + ".bin";
    write_file(out_dir / file, bytes);
    files[name] = {{"path", file}, {"samples", set->size()}, {"sha1", git_blob_hash(bytes)}};
  }
  const json cfg = run_json(c);
  json sidecar = {{"format", "pgl-dataset"},
                  {"version", kDatasetVersion},
                  {"kind", c.skeleton_mode() ? "skeleton" : "image"},
                  {"spec", c.skeleton_mode() ? cfg.at("skeleton") : cfg.at("dataset")},
                  {"seed", c.skeleton_mode() ? c.skeleton.seed : c.dataset.seed},
                  {"files", files}};
  if (c.skeleton_mode()) {
    sidecar["joints"] = c.skeleton.joints;
    sidecar["dims"] = c.skeleton.dims;
  }
  write_file(out_dir / "dataset.json", sidecar.dump(2) + "\n");
  return sidecar;
}

/// Reads a dataset split written by cmd_generate.
inline Dataset load_generated(const fs::path& dir, const std::string& split) {
  const json sidecar = json::parse(read_file(dir / "dataset.json"));
  const std::size_t joints = sidecar.value("joints", std::size_t{0});
  const std::size_t dims = sidecar.value("dims", std::size_t{0});
  return decode_dataset(read_file(dir / sidecar.at("files").at(split).at("path").get<std::string>()), joints, dims);
}

inline json cmd_train(const std::string& config_path, const fs::path& out_dir, const Overrides& o = {}) {
  const ExperimentConfig c = load_experiment(config_path, o);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r = run_experiment(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return write_run_outputs(out_dir, c, r, secs);
}

inline AblationResult cmd_ablate(const std::string& config_path, const fs::path& out_dir, const Overrides& o = {},
                                 std::size_t jobs = 1) {
  ExperimentConfig c = load_experiment(config_path, o);
  if (o.seed) c.ablation.seeds = {*o.seed};
  if (o.alpha) c.ablation.alphas = {*o.alpha};
  if (o.mask_mode) c.ablation.mask_modes = {c.train.mask_mode};
  return run_ablation_suite(c, out_dir, jobs);
}

/// Re-evaluates a checkpoint on the config's test split. Writes eval.json and,
/// for image data, saliency heatmaps of the first `saliency_count` samples.
inline json cmd_eval(const std::string& config_path, const fs::path& checkpoint_dir, const fs::path& out_dir,
                     const Overrides& o = {}, std::size_t saliency_count = 0) {
  const ExperimentConfig c = load_experiment(config_path, o);
  const ToyModel model = load_checkpoint(checkpoint_dir);
  if (model.spec().input_shape != c.model.input_shape || model.spec().num_classes != c.model.num_classes) {
    throw Error("checkpoint: model geometry does not match the config's dataset");
  }
  DatasetSplits d = make_datasets(c);
  EvalReport rep = evaluate(model, d.test, c.train.eval);
  json j = {{"config_hash", config_hash(c)},
            {"test_accuracy", rep.accuracy},
            {"worst_group_accuracy", rep.worst_group_accuracy},
            {"grad_mass", rep.grad_mass},
            {"grad_mass_degenerate", rep.grad_mass_degenerate}};
  if (rep.box) {
    json acc = json::object();
    for (std::size_t i = 0; i < rep.box->deltas.size(); ++i) acc[format_number(rep.box->deltas[i])] = rep.box->accuracy[i];
    j["box_accuracy"] = acc;
    j["box_accuracy_mean"] = rep.box->mean;
  }
  if (saliency_count > 0 && d.test.kind == DatasetKind::image) {
    json files = json::array();
    for (std::size_t i = 0; i < std::min(saliency_count, d.test.size()); ++i) {
      TapeScope scope;
      Tensor g = input_gradient(model, d.test.sample(i), d.test.labels[i], false);
      Shape s = d.test.sample_shape();
      const std::string name = "saliency_" + std::to_string(i) + ".pgm";
      fs::create_directories(out_dir);
      write_saliency_pgm((out_dir / name).string(), saliency_map(reshape(g, s)));
      files.push_back(name);
    }
    j["saliency_maps"] = files;
  }
  write_file(out_dir / "eval.json", j.dump(2) + "\n");
  return j;
}

}  // namespace pgl
