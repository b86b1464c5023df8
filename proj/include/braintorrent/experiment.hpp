#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "braintorrent/dataset.hpp"
#include "braintorrent/federation.hpp"
#include "braintorrent/model.hpp"

namespace bt {

inline constexpr const char* kToolVersion = "braintorrent 0.1.0";

enum class Mode { fls, braintorrent, pooled, only_client };
enum class SplitKind { uniform, cohort };
enum class TransportKind { sim, tcp };

struct SplitConfig {
  SplitKind kind = SplitKind::uniform;
  std::vector<double> boundaries;   // cohort only
  std::vector<std::size_t> counts;  // cohort only; targeted by the generator

  bool operator==(const SplitConfig&) const = default;
};

struct Seeds {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t shuffle = 3;
  std::uint64_t initiator = 4;

  bool operator==(const Seeds&) const = default;
};

struct TransportConfig {
  TransportKind kind = TransportKind::sim;
  std::string peers;  // peer table path (tcp)
  std::size_t node = 0;  // this process's client index (tcp)
  std::uint64_t timeout_ms = 10'000;
  double drop_probability = 0.0;  // sim fault injection
  std::vector<std::size_t> unreachable;  // sim fault injection

  bool operator==(const TransportConfig&) const = default;
};

struct ExperimentConfig {
  Mode mode = Mode::braintorrent;
  std::size_t n_clients = 10;
  SplitConfig split;
  std::size_t rounds_fls = 16;  // R; BrainTorrent runs R x N rounds
  ModelSpec model{kFeatureChannels, {16, 16}, 4};
  GenConfig data;  // data.seed is overridden by seeds.data
  double base_lr = 1e-3;
  int epochs_per_round = 2;
  std::size_t batch_size = 8;
  MergeNorm merge_norm = MergeNorm::participants;
  AggregateWeighting aggregate = AggregateWeighting::weighted;
  PingFailurePolicy ping_failure = PingFailurePolicy::skip;
  bool warm_up = false;
  std::size_t eval_every = 0;  // protocol rounds between evaluations; 0 = N for BrainTorrent, 1 otherwise
  Seeds seeds;
  TransportConfig transport;

  void validate() const;
  FederationConfig federation() const;
  std::size_t evaluation_interval() const;
  /// Protocol rounds executed: R for fls/pooled/only_client, R x N for BrainTorrent.
  std::size_t total_rounds() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Rejects unknown keys at every level; absent keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

const char* to_string(Mode m) noexcept;
Mode parse_mode(const std::string& s);

struct MetricsRecord {
  std::size_t round_index = 0;
  std::vector<double> per_client_dice;
  double avg_client_dice = 0.0;
  double aggregated_model_dice = 0.0;
  std::uint64_t bytes_transferred = 0;  // cumulative
  double wall_time_ms = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

struct RunOptions {
  bool keep_trajectory = false;  // store every model at every evaluation point
};

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<ModelWeights> final_client_weights;
  ModelWeights aggregated;
  std::uint64_t fine_tune_calls = 0;
  std::uint64_t aborted_rounds = 0;  // BrainTorrent rounds lost to transport faults
  std::vector<std::size_t> shard_sizes;
  std::vector<std::vector<ModelWeights>> trajectory;  // per evaluation point: client models
};

/// Generates the dataset the config describes (cohort targets included).
Dataset prepare_dataset(const ExperimentConfig& cfg);

/// The client shards of the config's split strategy.
std::vector<DatasetShard> make_shards(const ExperimentConfig& cfg, const Dataset& ds);

/// Runs one configuration over the simulated transport.
RunResult run_training(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& options = {});

struct MetricsFormat {
  enum Kind { csv, json } kind = csv;
};

/// csv: round_index, avg_client_dice, aggregated_model_dice, bytes_transferred,
/// client_0..client_{n-1}. Reals use 17 significant digits. Wall time is kept
/// out of these files so they are reproducible byte for byte.
void emit_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& path,
                  MetricsFormat::Kind format, std::size_t n_clients);
std::string metrics_csv(const std::vector<MetricsRecord>& records, std::size_t n_clients);
std::string metrics_json(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Writes metrics.csv, metrics.json, timing.csv, weights/ and manifest.json
/// into `out_dir` and returns the result. On failure, writes the partial
/// metrics plus a FAILED marker and rethrows.
RunResult run_to_directory(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                           const std::optional<Dataset>& dataset = {});

/// Reruns the configuration stored in a manifest.
RunResult rerun_manifest(const std::filesystem::path& manifest, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Experiment sweeps

struct SummaryRow {
  std::size_t n_clients = 0;
  std::string scans_per_client;
  double fls_avg = 0.0;
  double bt_avg = 0.0;
  double fls_agg = 0.0;
  double bt_agg = 0.0;
};

struct PerClientRow {
  std::string method;
  std::vector<double> dice;
  double mean = 0.0;
  std::optional<double> aggregated;
};

struct Experiment1Result {
  std::vector<SummaryRow> summary;   // one row per client count
  double pooled = 0.0;
  std::vector<PerClientRow> per_client;  // BrainTorrent, FLS, Only Client at the 10-client point
};

struct Experiment2Result {
  std::vector<std::size_t> shard_sizes;
  std::vector<PerClientRow> rows;  // BrainTorrent, FLS, Pooled Model
};

inline const std::vector<std::size_t> kExperiment1ClientCounts{5, 7, 10, 20};

/// Client sweep {5,7,10,20} x {fls, braintorrent} plus pooled and only-client
/// baselines. With `out_dir`, each run and the tables are written there.
Experiment1Result run_experiment1(const ExperimentConfig& base, const std::optional<std::filesystem::path>& out_dir = {},
                                  std::vector<std::size_t> client_counts = kExperiment1ClientCounts,
                                  std::size_t per_client_point = 10);

/// Cohort split into five age-like buckets, fls + braintorrent + pooled.
Experiment2Result run_experiment2(const ExperimentConfig& base, const std::optional<std::filesystem::path>& out_dir = {});

/// Default cohort split of the second experiment: buckets <=20, (20,30],
/// (30,40], (40,50], >50 holding 5, 9, 2, 1, 3 training images.
SplitConfig experiment2_split();

std::string render_table1(const Experiment1Result& r);
std::string render_table2(const Experiment1Result& r);
std::string render_table4(const Experiment2Result& r);
std::string table1_csv(const Experiment1Result& r);
std::string per_client_csv(const std::vector<PerClientRow>& rows);

/// Human-readable summary of a run or experiment directory; also writes a
/// plot-ready curves.csv into `dir`.
std::string render_report(const std::filesystem::path& dir);

/// %.17g
std::string format_real(double v);

}  // namespace bt
