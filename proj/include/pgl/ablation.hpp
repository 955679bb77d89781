#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pgl/config.hpp"
#include "pgl/experiment.hpp"
#include "pgl/io.hpp"

namespace pgl {

/// Timing and memory figures of a run. They vary between executions, so they
/// are kept out of the metrics CSV and the summary.
inline json timing_json(const TrainResult& r, double total_seconds) {
  json seconds = json::array(), peak = json::array();
  for (const auto& m : r.history) {
    seconds.push_back(m.seconds);
    peak.push_back(m.peak_bytes);
  }
  return {{"total_seconds", total_seconds}, {"epoch_seconds", seconds}, {"epoch_peak_bytes", peak}};
}

/// Writes metrics.csv, summary.json, the checkpoint and manifest.json for a
/// finished run into `dir`.
inline json write_run_outputs(const fs::path& dir, const ExperimentConfig& c, const TrainResult& r, double total_seconds) {
  const std::string hash = config_hash(c);
  write_file(dir / "metrics.csv", metrics_csv(hash, c.seed, r.history, c.train.eval.deltas));
  json summary = summary_json(c, hash, r);
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  save_checkpoint(dir, r.model);
  json manifest = {{"run_id", utc_timestamp() + "-seed" + std::to_string(c.seed)},
                   {"config_hash", hash},
                   {"config", to_json(c)},
                   {"version", kVersion},
                   {"outputs",
                    {{"metrics", "metrics.csv"},
                     {"summary", "summary.json"},
                     {"checkpoint", "checkpoint.bin"},
                     {"checkpoint_index", "checkpoint.json"}}},
                   {"timing", timing_json(r, total_seconds)}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

struct AblationRun {
  AblationGroup group;
  ExperimentConfig config;
  std::string hash;
};

/// Expands the ablation grid of `base` into individual runs, seed-major.
inline std::vector<AblationRun> plan_ablation(const ExperimentConfig& base) {
  std::vector<AblationRun> plan;
  auto add = [&](AblationGroup g, ExperimentConfig c) {
    resolve_model_shape(c);
    validate(c);
    plan.push_back({g, c, config_hash(c)});
  };
  for (auto group : base.ablation.groups) {
    for (auto seed : base.ablation.seeds) {
      ExperimentConfig c = base;
      c.seed = seed;
      c.train.mask_perturbation = 0.0;
      c.train.mask_mode = MaskMode::provenance;
      switch (group) {
        case AblationGroup::alpha:
          for (double a : base.ablation.alphas) {
            c.train.alpha = a;
            add(group, c);
          }
          break;
        case AblationGroup::mask:
          for (auto m : base.ablation.mask_modes) {
            c.train.mask_mode = m;
            add(group, c);
          }
          break;
        case AblationGroup::perturbation:
          c.train.synthesis = SynthesisMode::simulated_edit;
          for (double d : base.ablation.perturbations) {
            c.train.mask_perturbation = d;
            add(group, c);
          }
          break;
      }
    }
  }
  return plan;
}

inline std::vector<std::string> suite_header(const std::vector<double>& deltas) {
  std::vector<std::string> h{"group", "config_hash", "status", "error", "seed", "dataset_seed", "synthesis", "alpha",
                             "mask_mode", "mask_perturbation", "epochs", "test_accuracy", "worst_group_accuracy",
                             "grad_mass"};
  for (double d : deltas) h.push_back(delta_label(d));
  h.insert(h.end(), {"box_acc_mean", "l_cls", "l_pg", "l_total", "l_pg_first_epoch", "best_epoch",
                     "best_test_accuracy"});
  return h;
}

inline std::vector<std::string> suite_row(const AblationRun& run, const json* summary, const std::string& error,
                                          const std::vector<double>& deltas) {
  const auto& c = run.config;
  std::vector<std::string> r{to_string(run.group),
                             run.hash,
                             summary ? "ok" : "failed",
                             error,
                             std::to_string(c.seed),
                             std::to_string(c.dataset_seed.value_or(c.seed)),
                             to_string(c.train.synthesis),
                             format_number(c.train.alpha),
                             to_string(c.train.mask_mode),
                             format_number(c.train.mask_perturbation),
                             std::to_string(c.train.epochs)};
  if (!summary) {
    r.resize(suite_header(deltas).size());
    return r;
  }
  const json& f = summary->at("final");
  for (const char* k : {"test_accuracy", "worst_group_accuracy", "grad_mass"}) r.push_back(format_number(f.at(k).get<double>()));
  for (double d : deltas) {
    r.push_back(f.contains("box_accuracy") ? format_number(f["box_accuracy"].at(format_number(d)).get<double>()) : "");
  }
  r.push_back(f.contains("box_accuracy_mean") ? format_number(f.at("box_accuracy_mean").get<double>()) : "");
  for (const char* k : {"l_cls", "l_pg", "l_total"}) r.push_back(format_number(f.at(k).get<double>()));
  r.push_back(format_number(summary->at("l_pg_first_epoch").get<double>()));
  r.push_back(std::to_string(summary->at("best_epoch").get<std::size_t>()));
  r.push_back(format_number(summary->at("best").at("test_accuracy").get<double>()));
  return r;
}

struct AblationResult {
  std::vector<AblationRun> plan;
  /// Summary per plan entry (null when the run failed).
  std::vector<json> summaries;
  std::vector<std::string> errors;
  std::size_t executed = 0, reused = 0, failed = 0;
};

/// Runs every configuration of the grid, `jobs` at a time. Each run writes to
/// runs/<config hash>/; a run whose summary already exists is reused, so an
/// interrupted suite resumes where it stopped. The merged table is written to
/// suite.csv in plan order.
inline AblationResult run_ablation_suite(const ExperimentConfig& base, const fs::path& out_dir, std::size_t jobs = 1) {
  AblationResult res;
  res.plan = plan_ablation(base);
  res.summaries.assign(res.plan.size(), json());
  res.errors.assign(res.plan.size(), "");

  // Identical configurations (e.g. the same alpha in two groups) run once.
  std::map<std::string, std::vector<std::size_t>> by_hash;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < res.plan.size(); ++i) {
    auto& slots = by_hash[res.plan[i].hash];
    if (slots.empty()) order.push_back(res.plan[i].hash);
    slots.push_back(i);
  }

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= order.size()) return;
      const auto& slots = by_hash[order[k]];
      const AblationRun& run = res.plan[slots.front()];
      const fs::path dir = out_dir / "runs" / run.hash;
      json summary;
      std::string error;
      bool reused = false;
      try {
        if (fs::exists(dir / "summary.json")) {
          summary = json::parse(read_file(dir / "summary.json"));
          reused = true;
        } else {
          const auto t0 = std::chrono::steady_clock::now();
          TrainResult r = run_experiment(run.config);
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          summary = write_run_outputs(dir, run.config, r, secs);
        }
      } catch (const std::exception& e) {
        error = e.what();
      }
      std::lock_guard lock(mu);
      for (auto i : slots) {
        res.summaries[i] = summary;
        res.errors[i] = error;
      }
      if (!error.empty()) {
        ++res.failed;
      } else if (reused) {
        ++res.reused;
      } else {
        ++res.executed;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::max<std::size_t>(jobs, 1); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::string csv = csv_row(suite_header(base.train.eval.deltas));
  for (std::size_t i = 0; i < res.plan.size(); ++i) {
    const json* s = res.errors[i].empty() ? &res.summaries[i] : nullptr;
    csv += csv_row(suite_row(res.plan[i], s, res.errors[i], base.train.eval.deltas));
  }
  write_file(out_dir / "suite.csv", csv);
  return res;
}

}  // namespace pgl
