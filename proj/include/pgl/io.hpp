#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/sha.h>

#include "pgl/config.hpp"
#include "pgl/models.hpp"

namespace pgl {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file and renames, so readers never observe a
/// partially written file.
inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string to_hex(const unsigned char* bytes, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    out += digits[bytes[i] >> 4];
    out += digits[bytes[i] & 15];
  }
  return out;
}

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
inline std::string git_blob_hash(const std::string& content) {
  const std::string data = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
  return to_hex(digest, SHA_DIGEST_LENGTH);
}

/// Content hash of the resolved run config (ablation grid excluded).
inline std::string config_hash(const ExperimentConfig& c) { return git_blob_hash(run_json(c).dump()); }

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoint: checkpoint.bin holds the raw little-endian float64 values of
// every parameter back to back; checkpoint.json indexes them by name, shape
// and offset and records the model spec.

inline json model_spec_json(const ModelSpec& s) {
  return {{"architecture", to_string(s.architecture)},
          {"input_shape", s.input_shape},
          {"num_classes", s.num_classes},
          {"hidden", s.hidden},
          {"conv_channels", s.conv_channels},
          {"kernel", s.kernel},
          {"pooling", to_string(s.pooling)},
          {"encoder_in", s.encoder_in},
          {"encoder_dim", s.encoder_dim}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.architecture = parse_architecture(j.at("architecture").get<std::string>());
  s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  s.kernel = j.at("kernel").get<std::size_t>();
  s.pooling = parse_pooling(j.at("pooling").get<std::string>());
  s.encoder_in = j.at("encoder_in").get<std::size_t>();
  s.encoder_dim = j.at("encoder_dim").get<std::size_t>();
  return s;
}

inline void save_checkpoint(const fs::path& dir, const ToyModel& model) {
  std::string bin;
  json index = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    for (double v : p.value.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) bin.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    index.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"count", p.value.numel()}});
    offset += p.value.numel();
  }
  write_file(dir / "checkpoint.bin", bin);
  json meta = {{"format", "pgl-checkpoint"},
               {"version", 1},
               {"dtype", "float64-le"},
               {"model", model_spec_json(model.spec())},
               {"parameters", index}};
  write_file(dir / "checkpoint.json", meta.dump(2) + "\n");
}

inline ToyModel load_checkpoint(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "checkpoint.json"));
  } catch (const json::exception& e) {
    throw Error("checkpoint.json: " + std::string(e.what()));
  }
  const std::string bin = read_file(dir / "checkpoint.bin");
  try {
    ModelSpec spec = model_spec_from_json(meta.at("model"));
    std::vector<NamedTensor> params;
    for (const auto& e : meta.at("parameters")) {
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if ((offset + count) * 8 > bin.size()) throw Error("checkpoint.bin: truncated");
      std::vector<double> v(count);
      for (std::size_t k = 0; k < count; ++k) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
          bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bin[(offset + k) * 8 + i])) << (8 * i);
        }
        v[k] = std::bit_cast<double>(bits);
      }
      params.push_back({e.at("name").get<std::string>(), Tensor(e.at("shape").get<Shape>(), std::move(v), true)});
    }
    ToyModel model(spec, std::move(params));
    // A fresh model of the same spec fixes the expected parameter layout.
    Rng probe(0);
    ToyModel reference = init_model(spec, probe);
    if (reference.params().size() != model.params().size()) throw Error("checkpoint: parameter count does not match model");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      if (reference.params()[i].name != model.params()[i].name ||
          reference.params()[i].value.shape() != model.params()[i].value.shape()) {
        throw Error("checkpoint: parameter '" + model.params()[i].name + "' does not match the model spec");
      }
    }
    return model;
  } catch (const json::exception& e) {
    throw Error("checkpoint.json: " + std::string(e.what()));
  }
}

/// Directory for command outputs: an explicit --out wins (relative paths
/// resolve under $PGL_OUTPUT_ROOT when set); otherwise
/// $PGL_OUTPUT_ROOT (or ./runs)/<fallback>.
inline fs::path resolve_output(const std::string& out, const std::string& fallback) {
  const char* env = std::getenv("PGL_OUTPUT_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  if (out.empty()) return root / fallback;
  fs::path p(out);
  if (p.is_relative() && env && *env) return root / p;
  return p;
}

}  // namespace pgl
