#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vbae/ingest.hpp"
#include "vbae/metrics.hpp"
#include "vbae/model.hpp"

namespace vbae::exp {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string interactions;
  std::string item_tokens;  // optional for feature-free variants
  int min_visits = 10;
  int vocab_size = 8000;
};

struct ExperimentConfig {
  int schema_version = 1;
  std::string tag = "vbae";
  DatasetConfig dataset;
  model::VbaeConfig model;
  std::vector<std::uint64_t> split_seeds = {1};
  std::string out_dir = "runs/out";
  int threads = 1;
};

// Strict parse: unknown keys anywhere are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Test-set evaluation of a trained model against a split.
struct SplitEvaluation {
  metrics::EvalReport report;
  std::vector<metrics::PerUserRow> per_user;
};
SplitEvaluation evaluate_on_split(model::VbaeModel& m,
                                  const std::vector<std::vector<int>>& rows,
                                  const ingest::UserFeatureMatrix* features,
                                  const std::vector<int>& eval_users,
                                  const std::map<int, std::vector<int>>& heldout,
                                  int threads);

struct RunResult {
  std::vector<std::uint64_t> seeds;
  std::vector<metrics::EvalReport> reports;
  nlohmann::json aggregate;
};

// End-to-end pipeline: for each seed ingest + split + train + evaluate, then
// aggregate mean +- std across seeds. Artifacts land under out_dir/tag/ and
// aggregate.json is byte-identical across reruns with the same config.
RunResult run(const ExperimentConfig& cfg);

// Side-by-side table of reports (plain report or aggregate files). Best
// Recall@20/40 and NDCG@100 per column are starred.
struct Comparison {
  std::string table;
  std::string csv;
};
Comparison compare(const std::vector<std::string>& report_paths);

}  // namespace vbae::exp
