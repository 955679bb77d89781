#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "pgl/config.hpp"
#include "pgl/data.hpp"
#include "pgl/metrics.hpp"
#include "pgl/models.hpp"
#include "pgl/trainer.hpp"

namespace pgl {

inline constexpr const char* kVersion = "0.1.0";

inline DatasetSplits make_datasets(const ExperimentConfig& c) {
  return c.skeleton_mode() ? generate_skeleton_dataset(c.skeleton) : generate_image_dataset(c.dataset);
}

inline ToyModel init_model_for(const ExperimentConfig& c) {
  Rng rng = Rng::stream(c.seed, "init");
  return init_model(c.model, rng);
}

inline TrainResult run_experiment(const ExperimentConfig& c, const EpochCallback& on_epoch = {}) {
  validate(c);
  DatasetSplits data = make_datasets(c);
  return train(init_model_for(c), data.train, data.test, c.train, on_epoch);
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180): comma separated, CRLF line ends, fields quoted when they
// contain a comma, quote, CR or LF, with embedded quotes doubled.

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

/// Shortest text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string delta_label(double d) { return "box_acc_" + format_number(d); }

inline std::vector<std::string> metrics_header(const std::vector<double>& deltas) {
  std::vector<std::string> h{"config_hash", "seed", "epoch", "l_cls", "l_pg", "l_total", "test_accuracy",
                             "worst_group_accuracy", "grad_mass"};
  for (double d : deltas) h.push_back(delta_label(d));
  h.insert(h.end(), {"box_acc_mean", "pg_samples", "pg_skipped"});
  return h;
}

/// Per-epoch rows; localization cells are blank when not evaluated.
inline std::vector<std::string> metrics_row(const std::string& config_hash, std::uint64_t seed, const EpochMetrics& m,
                                            const std::vector<double>& deltas) {
  std::vector<std::string> r{config_hash,
                             std::to_string(seed),
                             std::to_string(m.epoch),
                             format_number(m.l_cls),
                             format_number(m.l_pg),
                             format_number(m.l_total),
                             format_number(m.test_accuracy),
                             format_number(m.worst_group_accuracy),
                             format_number(m.grad_mass)};
  for (std::size_t i = 0; i < deltas.size(); ++i) r.push_back(m.box ? format_number(m.box->accuracy[i]) : "");
  r.push_back(m.box ? format_number(m.box->mean) : "");
  r.push_back(std::to_string(m.pg_samples));
  r.push_back(std::to_string(m.pg_skipped));
  return r;
}

inline std::string metrics_csv(const std::string& config_hash, std::uint64_t seed, const std::vector<EpochMetrics>& history,
                               const std::vector<double>& deltas) {
  std::string out = csv_row(metrics_header(deltas));
  for (const auto& m : history) out += csv_row(metrics_row(config_hash, seed, m, deltas));
  return out;
}

inline json epoch_json(const EpochMetrics& m) {
  json j = {{"epoch", m.epoch},
            {"l_cls", m.l_cls},
            {"l_pg", m.l_pg},
            {"l_total", m.l_total},
            {"test_accuracy", m.test_accuracy},
            {"worst_group_accuracy", m.worst_group_accuracy},
            {"grad_mass", m.grad_mass},
            {"pg_samples", m.pg_samples},
            {"pg_skipped", m.pg_skipped}};
  if (m.box) {
    json acc = json::object();
    for (std::size_t i = 0; i < m.box->deltas.size(); ++i) acc[format_number(m.box->deltas[i])] = m.box->accuracy[i];
    j["box_accuracy"] = acc;
    j["box_accuracy_mean"] = m.box->mean;
  }
  return j;
}

/// Run summary: config echo plus final and best-epoch metrics. Timing lives
/// in the run manifest so that this file is reproducible byte for byte.
inline json summary_json(const ExperimentConfig& c, const std::string& config_hash, const TrainResult& r) {
  return {{"config_hash", config_hash},
          {"version", kVersion},
          {"config", run_json(c)},
          {"final", epoch_json(r.history.back())},
          {"best_epoch", r.best_epoch},
          {"best", epoch_json(r.history[r.best_epoch])},
          {"l_pg_first_epoch", r.history.front().l_pg},
          {"l_pg_final_epoch", r.history.back().l_pg}};
}

}  // namespace pgl
