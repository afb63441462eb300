#pragma once

// Run configuration, data preparation, the run / dry-run / report drivers
// and the on-disk run directory layout.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pfr/data.hpp"
#include "pfr/federation.hpp"
#include "pfr/metrics.hpp"
#include "pfr/nn.hpp"

namespace pfr {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DatasetKind { kMl1m, kAnime, kSynthetic };

std::string to_string(DatasetKind dataset);
std::string to_string(Feedback feedback);

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::kSynthetic;
  std::string data_path;
  Feedback feedback = Feedback::kExplicit;
  Algorithm algorithm = Algorithm::kPersonalFR;
  bool pc_enabled = true;
  std::size_t num_clients = 100;
  double participation = 0.1;
  std::size_t batch_size = 10;
  std::size_t local_epochs = 5;
  std::size_t rounds = 800;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::string output_dir = "runs/default";

  double train_fraction = 0.8;
  double user_fraction = 1.0;
  double threshold = 3.5;  // implicit feedback: positive iff rating > threshold
  std::optional<std::size_t> ndcg_cutoff;
  AnimeFilter anime;
  SyntheticSpec synthetic;
  std::size_t threads = 1;
  bool include_wall_time = false;

  FederationConfig federation() const;
};

// Flat `key = value` lines; `#` starts a comment. Later keys win.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in);

// `key=value` command-line tokens.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& tokens);

// Resolves defaults for the chosen (dataset, algorithm) pair, then applies
// `file` followed by `overrides`. Unknown keys and out-of-range values throw
// ConfigError.
ExperimentConfig resolve_config(const std::vector<std::pair<std::string, std::string>>& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides = {});

ExperimentConfig parse_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});

// Every key in canonical order with its resolved value.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);
std::string config_echo(const ExperimentConfig& cfg);

// FNV-1a over the echo without seed, output_dir, threads and wall_time, as
// 16 hex digits. Runs that differ only by seed share a hash.
std::string config_hash(const ExperimentConfig& cfg);

struct PreparedData {
  FederatedData data;
  double train_mean = 0.0;
};

// Load or generate, subsample users, binarize, split, partition.
PreparedData prepare_data(const ExperimentConfig& cfg);

// Test RMSE of predicting the global training mean everywhere.
double constant_predictor_rmse(const RatingMatrix& train, const RatingMatrix& test);

// ---------------------------------------------------------------------------
// Run directory
//
//   config.txt       resolved config echo, with config_hash
//   partition.tsv    client<TAB>raw user id
//   rounds.jsonl     one RoundReport per line
//   checkpoint.bin   TensorArchive with the full simulation state
//   summary.csv      written last; its presence marks the run complete

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after;  // stop once this many rounds are done
  std::size_t checkpoint_every = 0;       // 0: only on stop and completion
  std::ostream* log = nullptr;
};

enum class RunStatus { kCompleted, kStopped };

struct RunOutcome {
  RunStatus status = RunStatus::kCompleted;
  std::size_t rounds_completed = 0;
  std::optional<double> final_metric;
};

RunOutcome run(const ExperimentConfig& cfg, const RunOptions& options = {});

struct DryRunSummary {
  std::size_t clients_per_round = 0;
  CommCost comm;
  CommCost fedavg_comm;
  std::uint64_t flops = 0;
  std::uint64_t fedavg_flops = 0;
};

// Predicted traffic and client FLOPs for the whole schedule, no training.
DryRunSummary dry_run(const ExperimentConfig& cfg, std::ostream& out);

// Reads a finished run directory.
struct RunRecord {
  std::filesystem::path dir;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<RoundReport> rounds;

  std::string value(const std::string& key) const;
};

RunRecord load_run(const std::filesystem::path& dir);

struct ReportRow {
  std::string algorithm;
  std::size_t num_clients = 0;
  bool pc_enabled = true;
  std::string metric;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<double> finals;
  double mean = 0.0;
  std::optional<double> std_dev;  // sample standard deviation, absent for one run
};

// Groups runs by (algorithm, M, pc). Data-defining keys must agree across
// every run and all keys but the seed within a group; otherwise the error
// names the differing keys. Writes table.csv, table.md, curves.csv and
// compression.csv into `out_dir`.
std::vector<ReportRow> emit_report(const std::vector<std::filesystem::path>& run_dirs,
                                   const std::filesystem::path& out_dir);

std::string format_fixed4(double value);

}  // namespace pfr
