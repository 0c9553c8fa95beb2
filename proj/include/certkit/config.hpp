#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "certkit/losses.hpp"
#include "certkit/training.hpp"

namespace certkit {

struct DatasetConfig {
  std::string source = "blobs";  // "blobs" | "idx"
  // blobs
  int classes = 3;
  int per_class = 200;
  int dims = 16;
  double spread = 0.05;
  // idx
  std::string images;
  std::string labels;
  std::size_t limit = 0;  // 0 = use everything
  double val_fraction = 0.2;
};

struct NetworkConfig {
  std::string preset = "mlp-small";
  int toy_depth = 2;
  double toy_w = 1.0;
  std::string init = "default";  // "default" | "ibp-aware"
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  NetworkConfig network;
  LossSpec loss;
  TrainPlan train;
  AttackConfig eval_attack;  // strong attack used by the eval/certify commands
  std::string output_dir = "runs/out";

  void validate() const;  // throws ConfigError naming the offending field
};

// Strict parse: unknown keys are rejected with their dotted path; values are
// validated and defaults recorded. Parse errors carry the byte offset that
// the JSON reader reports.
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Apply "section.key=value" onto the JSON document before validation.
std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides);

// Serialization of the fully-resolved config; re-parsing yields an equal
// RunConfig.
std::string dump_config(const RunConfig& cfg);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace certkit
