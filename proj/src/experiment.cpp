#include "braintorrent/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "braintorrent/errors.hpp"
#include "braintorrent/rng.hpp"
#include "braintorrent/training.hpp"

namespace bt {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Enum names

const char* to_string(Mode m) noexcept {
  switch (m) {
    case Mode::fls: return "fls";
    case Mode::braintorrent: return "braintorrent";
    case Mode::pooled: return "pooled";
    case Mode::only_client: return "only_client";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  if (s == "fls") return Mode::fls;
  if (s == "braintorrent") return Mode::braintorrent;
  if (s == "pooled") return Mode::pooled;
  if (s == "only_client") return Mode::only_client;
  throw InvalidArgument("unknown mode '" + s + "' (fls, braintorrent, pooled, only_client)");
}

namespace {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<MergeNorm> {
  static constexpr std::pair<MergeNorm, const char*> values[] = {{MergeNorm::participants, "participants"},
                                                                 {MergeNorm::global, "global"}};
};
template <>
struct EnumNames<AggregateWeighting> {
  static constexpr std::pair<AggregateWeighting, const char*> values[] = {
      {AggregateWeighting::weighted, "weighted"}, {AggregateWeighting::unweighted, "unweighted"}};
};
template <>
struct EnumNames<PingFailurePolicy> {
  static constexpr std::pair<PingFailurePolicy, const char*> values[] = {{PingFailurePolicy::skip, "skip"},
                                                                         {PingFailurePolicy::strict, "strict"}};
};
template <>
struct EnumNames<SplitKind> {
  static constexpr std::pair<SplitKind, const char*> values[] = {{SplitKind::uniform, "uniform"},
                                                                 {SplitKind::cohort, "cohort"}};
};
template <>
struct EnumNames<TransportKind> {
  static constexpr std::pair<TransportKind, const char*> values[] = {{TransportKind::sim, "sim"},
                                                                     {TransportKind::tcp, "tcp"}};
};

template <typename E>
std::string enum_name(E v) {
  for (const auto& [value, name] : EnumNames<E>::values) {
    if (value == v) return name;
  }
  return "?";
}

template <typename E>
E enum_from(const json& j, const std::string& where) {
  const auto s = j.get<std::string>();
  std::string allowed;
  for (const auto& [value, name] : EnumNames<E>::values) {
    if (s == name) return value;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  throw InvalidArgument(where + ": unknown value '" + s + "' (expected " + allowed + ")");
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw InvalidArgument(where + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; })) {
      throw InvalidArgument(where + ": unknown key '" + item.key() + "'");
    }
  }
}

template <typename T>
void read_if(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

std::string iso_time_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  if (n_clients < 1) throw InvalidArgument("config: n_clients must be >= 1");
  if (rounds_fls < 1) throw InvalidArgument("config: rounds_fls must be >= 1");
  if (epochs_per_round < 1) throw InvalidArgument("config: epochs_per_round must be >= 1");
  if (!(base_lr > 0.0)) throw InvalidArgument("config: base_lr must be > 0");
  if (batch_size < 1) throw InvalidArgument("config: batch_size must be >= 1");
  if (model.input_dim != kFeatureChannels) {
    throw InvalidArgument("config: model.input_dim must be " + std::to_string(kFeatureChannels) +
                          " (intensity, x, y, noise channel)");
  }
  if (model.num_classes != data.num_classes) throw InvalidArgument("config: model.num_classes must equal data.num_classes");
  if (split.kind == SplitKind::uniform) {
    if (n_clients > data.num_train) throw InvalidArgument("config: more clients than training images");
  } else {
    if (split.counts.size() != split.boundaries.size() + 1) {
      throw InvalidArgument("config: cohort split needs one more count than boundaries");
    }
    if (n_clients != split.counts.size()) throw InvalidArgument("config: cohort split defines " +
                                                                std::to_string(split.counts.size()) +
                                                                " clients but n_clients is " + std::to_string(n_clients));
  }
  if (transport.drop_probability < 0.0 || transport.drop_probability > 1.0) {
    throw InvalidArgument("config: transport.drop_probability must be in [0, 1]");
  }
  for (auto u : transport.unreachable) {
    if (u >= n_clients) throw InvalidArgument("config: transport.unreachable names a client out of range");
  }
  if (transport.kind == TransportKind::tcp) {
    if (mode != Mode::braintorrent) throw InvalidArgument("config: the tcp transport only runs braintorrent");
    if (transport.node >= n_clients) throw InvalidArgument("config: transport.node out of range");
  }
}

FederationConfig ExperimentConfig::federation() const {
  FederationConfig f;
  f.epochs_per_round = epochs_per_round;
  f.base_lr = base_lr;
  f.batch_size = batch_size;
  f.shuffle_seed = seeds.shuffle;
  f.merge_norm = merge_norm;
  f.aggregate = aggregate;
  f.ping_failure = ping_failure;
  return f;
}

std::size_t ExperimentConfig::evaluation_interval() const {
  if (eval_every > 0) return eval_every;
  return mode == Mode::braintorrent ? n_clients : 1;
}

std::size_t ExperimentConfig::total_rounds() const {
  return mode == Mode::braintorrent ? rounds_fls * n_clients : rounds_fls;
}

json to_json(const ExperimentConfig& c) {
  json split = {{"kind", enum_name(c.split.kind)}};
  if (c.split.kind == SplitKind::cohort) {
    split["boundaries"] = c.split.boundaries;
    split["counts"] = c.split.counts;
  }
  json transport = {{"kind", enum_name(c.transport.kind)},
                    {"peers", c.transport.peers},
                    {"node", c.transport.node},
                    {"timeout_ms", c.transport.timeout_ms},
                    {"drop_probability", c.transport.drop_probability},
                    {"unreachable", c.transport.unreachable}};
  return {
      {"mode", to_string(c.mode)},
      {"n_clients", c.n_clients},
      {"split", split},
      {"rounds_fls", c.rounds_fls},
      {"model", {{"input_dim", c.model.input_dim}, {"hidden_dims", c.model.hidden_dims}, {"num_classes", c.model.num_classes}}},
      {"data",
       {{"num_train", c.data.num_train},
        {"num_test", c.data.num_test},
        {"height", c.data.height},
        {"width", c.data.width},
        {"num_classes", c.data.num_classes},
        {"noise_std", c.data.noise_std},
        {"cohort_shift", c.data.cohort_shift}}},
      {"base_lr", c.base_lr},
      {"epochs_per_round", c.epochs_per_round},
      {"batch_size", c.batch_size},
      {"merge_norm", enum_name(c.merge_norm)},
      {"aggregate", enum_name(c.aggregate)},
      {"ping_failure", enum_name(c.ping_failure)},
      {"warm_up", c.warm_up},
      {"eval_every", c.eval_every},
      {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"shuffle", c.seeds.shuffle}, {"initiator", c.seeds.initiator}}},
      {"transport", transport},
  };
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  try {
    check_keys(doc,
               {"mode", "n_clients", "split", "rounds_fls", "model", "data", "base_lr", "epochs_per_round", "batch_size",
                "merge_norm", "aggregate", "ping_failure", "warm_up", "eval_every", "seeds", "transport"},
               "config");
    if (doc.contains("mode")) c.mode = parse_mode(doc.at("mode").get<std::string>());
    read_if(doc, "n_clients", c.n_clients);
    read_if(doc, "rounds_fls", c.rounds_fls);
    read_if(doc, "base_lr", c.base_lr);
    read_if(doc, "epochs_per_round", c.epochs_per_round);
    read_if(doc, "batch_size", c.batch_size);
    read_if(doc, "warm_up", c.warm_up);
    read_if(doc, "eval_every", c.eval_every);
    if (doc.contains("merge_norm")) c.merge_norm = enum_from<MergeNorm>(doc.at("merge_norm"), "config.merge_norm");
    if (doc.contains("aggregate")) c.aggregate = enum_from<AggregateWeighting>(doc.at("aggregate"), "config.aggregate");
    if (doc.contains("ping_failure")) {
      c.ping_failure = enum_from<PingFailurePolicy>(doc.at("ping_failure"), "config.ping_failure");
    }
    if (doc.contains("split")) {
      const auto& s = doc.at("split");
      check_keys(s, {"kind", "boundaries", "counts"}, "config.split");
      if (s.contains("kind")) c.split.kind = enum_from<SplitKind>(s.at("kind"), "config.split.kind");
      read_if(s, "boundaries", c.split.boundaries);
      read_if(s, "counts", c.split.counts);
    }
    if (doc.contains("model")) {
      const auto& m = doc.at("model");
      check_keys(m, {"input_dim", "hidden_dims", "num_classes"}, "config.model");
      read_if(m, "input_dim", c.model.input_dim);
      read_if(m, "hidden_dims", c.model.hidden_dims);
      read_if(m, "num_classes", c.model.num_classes);
    }
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      check_keys(d, {"num_train", "num_test", "height", "width", "num_classes", "noise_std", "cohort_shift"}, "config.data");
      read_if(d, "num_train", c.data.num_train);
      read_if(d, "num_test", c.data.num_test);
      read_if(d, "height", c.data.height);
      read_if(d, "width", c.data.width);
      read_if(d, "num_classes", c.data.num_classes);
      read_if(d, "noise_std", c.data.noise_std);
      read_if(d, "cohort_shift", c.data.cohort_shift);
    }
    if (doc.contains("seeds")) {
      const auto& s = doc.at("seeds");
      check_keys(s, {"data", "init", "shuffle", "initiator"}, "config.seeds");
      read_if(s, "data", c.seeds.data);
      read_if(s, "init", c.seeds.init);
      read_if(s, "shuffle", c.seeds.shuffle);
      read_if(s, "initiator", c.seeds.initiator);
    }
    if (doc.contains("transport")) {
      const auto& t = doc.at("transport");
      check_keys(t, {"kind", "peers", "node", "timeout_ms", "drop_probability", "unreachable"}, "config.transport");
      if (t.contains("kind")) c.transport.kind = enum_from<TransportKind>(t.at("kind"), "config.transport.kind");
      read_if(t, "peers", c.transport.peers);
      read_if(t, "node", c.transport.node);
      read_if(t, "timeout_ms", c.transport.timeout_ms);
      read_if(t, "drop_probability", c.transport.drop_probability);
      read_if(t, "unreachable", c.transport.unreachable);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Training runs

Dataset prepare_dataset(const ExperimentConfig& cfg) {
  GenConfig g = cfg.data;
  g.seed = cfg.seeds.data;
  if (cfg.split.kind == SplitKind::cohort) {
    return generate_for_cohort_split(g, CohortTargets{cfg.split.boundaries, cfg.split.counts}).first;
  }
  return generate_dataset(g);
}

std::vector<DatasetShard> make_shards(const ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.split.kind == SplitKind::cohort) {
    return split_by_cohort(ds.train, cfg.split.boundaries, std::span<const std::size_t>{cfg.split.counts});
  }
  return split_uniform(ds.train, cfg.n_clients, derive_seed(cfg.seeds.data, 0x5B));
}

namespace {

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& options, RunResult& out)
      : cfg_(cfg), ds_(ds), options_(options), out_(out), start_(std::chrono::steady_clock::now()) {}

  void run() {
    cfg_.validate();
    if (ds_.num_classes != cfg_.model.num_classes) throw InvalidArgument("dataset and model disagree on num_classes");
    auto shards = make_shards(cfg_, ds_);
    for (const auto& s : shards) out_.shard_sizes.push_back(s.sample_count());

    fed_ = cfg_.federation();
    fed_.global_sample_total = std::accumulate(out_.shard_sizes.begin(), out_.shard_sizes.end(), std::uint64_t{0});
    const ModelWeights init = init_model(cfg_.model, cfg_.seeds.init);
    const LocalTrainer fine_tuner = make_fine_tuner(cfg_.model, fed_);
    train_ = [this, fine_tuner](const ModelWeights& w, const DatasetShard& shard, ClientIndex client,
                                std::uint64_t round) {
      ++out_.fine_tune_calls;
      return fine_tuner(w, shard, client, round);
    };

    switch (cfg_.mode) {
      case Mode::fls: run_fls(std::move(shards), init); break;
      case Mode::braintorrent: run_braintorrent(std::move(shards), init); break;
      case Mode::pooled: run_pooled(std::move(shards), init); break;
      case Mode::only_client: run_only_client(std::move(shards), init); break;
    }
  }

 private:
  bool due(std::size_t round) const {
    return round % cfg_.evaluation_interval() == 0 || round == cfg_.total_rounds();
  }

  double dice_of(const ModelWeights& w) const { return evaluate_dice(cfg_.model, w, ds_.test, ds_.num_classes); }

  void record(std::size_t round, const std::vector<ModelWeights>& client_models, const ModelWeights& aggregated,
              std::uint64_t bytes) {
    MetricsRecord r;
    r.round_index = round;
    for (const auto& w : client_models) r.per_client_dice.push_back(dice_of(w));
    r.avg_client_dice = std::accumulate(r.per_client_dice.begin(), r.per_client_dice.end(), 0.0) /
                        static_cast<double>(r.per_client_dice.size());
    r.aggregated_model_dice = dice_of(aggregated);
    r.bytes_transferred = bytes;
    r.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    out_.records.push_back(std::move(r));
    if (options_.keep_trajectory) out_.trajectory.push_back(client_models);
  }

  static std::vector<ModelWeights> weights_of(std::span<const ClientState> clients) {
    std::vector<ModelWeights> w;
    for (const auto& c : clients) w.push_back(c.weights);
    return w;
  }

  void run_fls(std::vector<DatasetShard> shards, const ModelWeights& init) {
    auto clients = make_clients(std::move(shards), init);
    ModelWeights server = init;
    std::uint64_t bytes = 0;
    std::vector<ModelWeights> personalized = weights_of(clients);
    for (std::size_t r = 1; r <= cfg_.rounds_fls; ++r) {
      auto report = fls_round(clients, server, fed_, train_);
      bytes += report.bytes_transferred;
      personalized = std::move(report.local_updates);
      if (due(r)) record(r, personalized, server, bytes);
    }
    out_.final_client_weights = std::move(personalized);
    out_.aggregated = server;
  }

  void run_braintorrent(std::vector<DatasetShard> shards, const ModelWeights& init) {
    SimFederation sim(make_clients(std::move(shards), init), derive_seed(cfg_.seeds.initiator, 0x51));
    sim.transport().set_drop_probability(cfg_.transport.drop_probability);
    for (auto u : cfg_.transport.unreachable) sim.transport().set_unreachable(u, true);
    if (cfg_.warm_up) warm_up(sim.clients(), train_);

    const std::size_t n = cfg_.n_clients;
    for (std::size_t r = 1; r <= cfg_.total_rounds(); ++r) {
      const ClientIndex initiator = pick_initiator(r - 1, n, cfg_.seeds.initiator);
      try {
        sim.bt_round(initiator, fed_, train_);
      } catch (const PeerUnreachable&) {
        // Under the strict policy a lost peer ends the run; otherwise the
        // round is dropped and the schedule moves on.
        if (cfg_.ping_failure == PingFailurePolicy::strict) throw;
        ++out_.aborted_rounds;
      }
      if (due(r)) {
        record(r, weights_of(sim.clients()), aggregate_all_clients(sim.clients(), cfg_.aggregate),
               sim.transport().bytes_delivered());
      }
    }
    out_.final_client_weights = weights_of(sim.clients());
    out_.aggregated = aggregate_all_clients(sim.clients(), cfg_.aggregate);
  }

  void run_pooled(std::vector<DatasetShard> shards, const ModelWeights& init) {
    const DatasetShard pooled = pool_shards(shards);
    ModelWeights w = init;
    for (std::size_t r = 1; r <= cfg_.rounds_fls; ++r) {
      w = train_(w, pooled, 0, r - 1);
      if (due(r)) record(r, {w}, w, 0);
    }
    out_.final_client_weights = {w};
    out_.aggregated = w;
  }

  void run_only_client(std::vector<DatasetShard> shards, const ModelWeights& init) {
    auto clients = make_clients(std::move(shards), init);
    for (std::size_t r = 1; r <= cfg_.rounds_fls; ++r) {
      for (auto& c : clients) {
        c.weights = train_(c.weights, c.shard, c.client_index, c.own_update_count);
        c.own_update_count += 1;
        c.version[c.client_index] = c.own_update_count;
      }
      if (due(r)) record(r, weights_of(clients), aggregate_all_clients(clients, cfg_.aggregate), 0);
    }
    out_.final_client_weights = weights_of(clients);
    out_.aggregated = aggregate_all_clients(clients, cfg_.aggregate);
  }

  const ExperimentConfig& cfg_;
  const Dataset& ds_;
  const RunOptions& options_;
  RunResult& out_;
  std::chrono::steady_clock::time_point start_;
  FederationConfig fed_;
  LocalTrainer train_;
};

}  // namespace

RunResult run_training(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& options) {
  RunResult result;
  Runner(cfg, ds, options, result).run();
  return result;
}

// ---------------------------------------------------------------------------
// Metrics files

std::string metrics_csv(const std::vector<MetricsRecord>& records, std::size_t n_clients) {
  std::ostringstream out;
  out << "round_index,avg_client_dice,aggregated_model_dice,bytes_transferred";
  for (std::size_t i = 0; i < n_clients; ++i) out << ",client_" << i;
  out << '\n';
  for (const auto& r : records) {
    if (r.per_client_dice.size() != n_clients) throw InvalidArgument("metrics_csv: record width differs from n_clients");
    out << r.round_index << ',' << format_real(r.avg_client_dice) << ',' << format_real(r.aggregated_model_dice) << ','
        << r.bytes_transferred;
    for (double d : r.per_client_dice) out << ',' << format_real(d);
    out << '\n';
  }
  return out.str();
}

std::string metrics_json(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  out << "[";
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    out << (k ? ",\n " : "\n ") << "{\"round_index\": " << r.round_index << ", \"avg_client_dice\": "
        << format_real(r.avg_client_dice) << ", \"aggregated_model_dice\": " << format_real(r.aggregated_model_dice)
        << ", \"bytes_transferred\": " << r.bytes_transferred << ", \"per_client_dice\": [";
    for (std::size_t i = 0; i < r.per_client_dice.size(); ++i) {
      out << (i ? ", " : "") << format_real(r.per_client_dice[i]);
    }
    out << "]}";
  }
  out << (records.empty() ? "]\n" : "\n]\n");
  return out.str();
}

void emit_metrics(const std::vector<MetricsRecord>& records, const fs::path& path, MetricsFormat::Kind format,
                  std::size_t n_clients) {
  write_text(path, format == MetricsFormat::csv ? metrics_csv(records, n_clients) : metrics_json(records));
}

std::vector<MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);  // header
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() < 4) throw InvalidArgument(path.string() + ": malformed metrics row");
    MetricsRecord r;
    r.round_index = std::stoull(cells[0]);
    r.avg_client_dice = std::stod(cells[1]);
    r.aggregated_model_dice = std::stod(cells[2]);
    r.bytes_transferred = std::stoull(cells[3]);
    for (std::size_t i = 4; i < cells.size(); ++i) r.per_client_dice.push_back(std::stod(cells[i]));
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

std::string timing_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  out << "round_index,wall_time_ms\n";
  for (const auto& r : records) out << r.round_index << ',' << format_real(r.wall_time_ms) << '\n';
  return out.str();
}

std::size_t metrics_width(const ExperimentConfig& cfg) { return cfg.mode == Mode::pooled ? 1 : cfg.n_clients; }

RunResult run_to_directory_impl(const ExperimentConfig& cfg, const fs::path& out_dir,
                                const std::optional<fs::path>& dataset_path) {
  fs::create_directories(out_dir / "weights");
  fs::remove(out_dir / "FAILED");

  json manifest = {{"tool_version", kToolVersion}, {"config", to_json(cfg)}, {"started_at", iso_time_now()}};
  if (dataset_path) manifest["dataset_file"] = fs::absolute(*dataset_path).string();

  RunResult result;
  const std::size_t width = metrics_width(cfg);
  try {
    const Dataset ds = dataset_path ? read_dataset(*dataset_path) : prepare_dataset(cfg);
    RunOptions options;
    Runner(cfg, ds, options, result).run();
  } catch (const std::exception& e) {
    emit_metrics(result.records, out_dir / "metrics.csv", MetricsFormat::csv, width);
    emit_metrics(result.records, out_dir / "metrics.json", MetricsFormat::json, width);
    write_text(out_dir / "FAILED", std::string(e.what()) + '\n');
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["finished_at"] = iso_time_now();
    write_text(out_dir / "manifest.json", manifest.dump(2) + '\n');
    throw;
  }

  std::vector<std::string> outputs{"metrics.csv", "metrics.json", "timing.csv", "weights/aggregated.bin"};
  emit_metrics(result.records, out_dir / "metrics.csv", MetricsFormat::csv, width);
  emit_metrics(result.records, out_dir / "metrics.json", MetricsFormat::json, width);
  write_text(out_dir / "timing.csv", timing_csv(result.records));
  for (std::size_t i = 0; i < result.final_client_weights.size(); ++i) {
    const std::string name = "weights/client_" + std::to_string(i) + ".bin";
    write_weights(out_dir / name, result.final_client_weights[i]);
    outputs.push_back(name);
  }
  write_weights(out_dir / "weights/aggregated.bin", result.aggregated);

  manifest["status"] = "complete";
  manifest["finished_at"] = iso_time_now();
  manifest["shard_sizes"] = result.shard_sizes;
  manifest["fine_tune_calls"] = result.fine_tune_calls;
  manifest["aborted_rounds"] = result.aborted_rounds;
  manifest["outputs"] = outputs;
  write_text(out_dir / "manifest.json", manifest.dump(2) + '\n');
  return result;
}

}  // namespace

RunResult run_to_directory(const ExperimentConfig& cfg, const fs::path& out_dir, const std::optional<Dataset>& dataset) {
  if (!dataset) return run_to_directory_impl(cfg, out_dir, std::nullopt);
  fs::create_directories(out_dir);
  const fs::path ds_file = out_dir / "dataset.btds";
  write_dataset(ds_file, *dataset);
  return run_to_directory_impl(cfg, out_dir, ds_file);
}

RunResult rerun_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw InvalidArgument(manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("config")) throw InvalidArgument(manifest_path.string() + ": no config section");
  const ExperimentConfig cfg = config_from_json(manifest.at("config"));
  if (cfg.transport.kind != TransportKind::sim) throw InvalidArgument("manifest reruns need the simulated transport");
  std::optional<fs::path> ds_path;
  if (manifest.contains("dataset_file")) ds_path = manifest.at("dataset_file").get<std::string>();
  return run_to_directory_impl(cfg, out_dir, ds_path);
}

// ---------------------------------------------------------------------------
// Experiments

SplitConfig experiment2_split() { return {SplitKind::cohort, {20.0, 30.0, 40.0, 50.0}, {5, 9, 2, 1, 3}}; }

namespace {

std::string sizes_label(const std::vector<std::size_t>& sizes) {
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  if (*lo == *hi) return std::to_string(*lo);
  return std::to_string(*lo) + "-" + std::to_string(*hi);
}

RunResult run_point(const ExperimentConfig& cfg, const Dataset& ds, const std::optional<fs::path>& out_dir,
                    const std::string& name) {
  if (out_dir) return run_to_directory(cfg, *out_dir / name, ds);
  return run_training(cfg, ds);
}

PerClientRow row_from(const std::string& method, const RunResult& r) {
  const auto& last = r.records.back();
  return {method, last.per_client_dice, last.avg_client_dice, last.aggregated_model_dice};
}

std::string fixed3(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

Experiment1Result run_experiment1(const ExperimentConfig& base, const std::optional<fs::path>& out_dir,
                                  std::vector<std::size_t> client_counts, std::size_t per_client_point) {
  ExperimentConfig cfg = base;
  cfg.split = SplitConfig{};
  cfg.transport = TransportConfig{};
  const Dataset ds = prepare_dataset(cfg);

  Experiment1Result result;
  for (std::size_t n : client_counts) {
    cfg.n_clients = n;
    cfg.mode = Mode::fls;
    const RunResult fls = run_point(cfg, ds, out_dir, "n" + std::to_string(n) + "_fls");
    cfg.mode = Mode::braintorrent;
    const RunResult bt = run_point(cfg, ds, out_dir, "n" + std::to_string(n) + "_braintorrent");

    result.summary.push_back({n, sizes_label(fls.shard_sizes), fls.records.back().avg_client_dice,
                              bt.records.back().avg_client_dice, fls.records.back().aggregated_model_dice,
                              bt.records.back().aggregated_model_dice});
    if (n == per_client_point) {
      cfg.mode = Mode::only_client;
      const RunResult only = run_point(cfg, ds, out_dir, "n" + std::to_string(n) + "_only_client");
      result.per_client = {row_from("BrainTorrent", bt), row_from("FLS", fls), row_from("Only Client", only)};
      result.per_client.back().aggregated.reset();
    }
  }
  cfg.mode = Mode::pooled;
  cfg.n_clients = 1;
  result.pooled = run_point(cfg, ds, out_dir, "pooled").records.back().aggregated_model_dice;

  if (out_dir) {
    write_text(*out_dir / "table1.csv", table1_csv(result));
    if (!result.per_client.empty()) write_text(*out_dir / "table2.csv", per_client_csv(result.per_client));
    write_text(*out_dir / "summary.txt", render_table1(result) + "\n" + render_table2(result));
  }
  return result;
}

Experiment2Result run_experiment2(const ExperimentConfig& base, const std::optional<fs::path>& out_dir) {
  ExperimentConfig cfg = base;
  if (cfg.split.kind != SplitKind::cohort) cfg.split = experiment2_split();
  cfg.n_clients = cfg.split.counts.size();
  cfg.transport = TransportConfig{};
  const Dataset ds = prepare_dataset(cfg);

  cfg.mode = Mode::braintorrent;
  const RunResult bt = run_point(cfg, ds, out_dir, "braintorrent");
  cfg.mode = Mode::fls;
  const RunResult fls = run_point(cfg, ds, out_dir, "fls");
  ExperimentConfig pooled_cfg = cfg;
  pooled_cfg.mode = Mode::pooled;
  const RunResult pooled = run_point(pooled_cfg, ds, out_dir, "pooled");

  Experiment2Result result;
  result.shard_sizes = bt.shard_sizes;
  const double pooled_dice = pooled.records.back().aggregated_model_dice;
  result.rows = {row_from("BrainTorrent", bt), row_from("FLS", fls), PerClientRow{"Pooled Model", {}, pooled_dice, pooled_dice}};

  if (out_dir) {
    write_text(*out_dir / "table4.csv", per_client_csv(result.rows));
    write_text(*out_dir / "summary.txt", render_table4(result));
  }
  return result;
}

std::string table1_csv(const Experiment1Result& r) {
  std::ostringstream out;
  out << "n_clients,scans_per_client,fls_avg_dice,braintorrent_avg_dice,fls_aggregated_dice,braintorrent_aggregated_dice\n";
  for (const auto& row : r.summary) {
    out << row.n_clients << ',' << row.scans_per_client << ',' << format_real(row.fls_avg) << ','
        << format_real(row.bt_avg) << ',' << format_real(row.fls_agg) << ',' << format_real(row.bt_agg) << '\n';
  }
  out << "pooled,," << format_real(r.pooled) << ",,,\n";
  return out.str();
}

std::string per_client_csv(const std::vector<PerClientRow>& rows) {
  std::size_t width = 0;
  for (const auto& row : rows) width = std::max(width, row.dice.size());
  std::ostringstream out;
  out << "method";
  for (std::size_t i = 0; i < width; ++i) out << ",C" << (i + 1);
  out << ",mean,aggregated\n";
  for (const auto& row : rows) {
    out << row.method;
    for (std::size_t i = 0; i < width; ++i) out << ',' << (i < row.dice.size() ? format_real(row.dice[i]) : "");
    out << ',' << format_real(row.mean) << ',' << (row.aggregated ? format_real(*row.aggregated) : "") << '\n';
  }
  return out.str();
}

std::string render_table1(const Experiment1Result& r) {
  std::ostringstream out;
  out << "# Clients | Scans/client | Avg Dice FLS | Avg Dice BT | Aggregated FLS | Aggregated BT\n";
  for (const auto& row : r.summary) {
    char line[160];
    std::snprintf(line, sizeof line, "%9zu | %12s | %12s | %11s | %14s | %13s\n", row.n_clients,
                  row.scans_per_client.c_str(), fixed3(row.fls_avg).c_str(), fixed3(row.bt_avg).c_str(),
                  fixed3(row.fls_agg).c_str(), fixed3(row.bt_agg).c_str());
    out << line;
  }
  out << "Pooled model: " << fixed3(r.pooled) << '\n';
  return out.str();
}

namespace {

std::string render_rows(const std::vector<PerClientRow>& rows) {
  std::size_t width = 0;
  for (const auto& row : rows) width = std::max(width, row.dice.size());
  std::ostringstream out;
  char cell[32];
  std::snprintf(cell, sizeof cell, "%-14s", "Method");
  out << cell;
  for (std::size_t i = 0; i < width; ++i) {
    std::snprintf(cell, sizeof cell, " | %5s", ("C" + std::to_string(i + 1)).c_str());
    out << cell;
  }
  out << " |  Mean | Aggregated\n";
  for (const auto& row : rows) {
    std::snprintf(cell, sizeof cell, "%-14s", row.method.c_str());
    out << cell;
    for (std::size_t i = 0; i < width; ++i) {
      out << " | " << (i < row.dice.size() ? fixed3(row.dice[i]) : std::string("  -  "));
    }
    out << " | " << fixed3(row.mean) << " | " << (row.aggregated ? fixed3(*row.aggregated) : std::string("-")) << '\n';
  }
  return out.str();
}

}  // namespace

std::string render_table2(const Experiment1Result& r) {
  if (r.per_client.empty()) return "";
  return "Per-client Dice (" + std::to_string(r.per_client.front().dice.size()) + " clients)\n" +
         render_rows(r.per_client);
}

std::string render_table4(const Experiment2Result& r) {
  std::ostringstream out;
  out << "Shard sizes:";
  for (auto s : r.shard_sizes) out << ' ' << s;
  out << '\n' << render_rows(r.rows);
  return out.str();
}

std::string render_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InvalidArgument(dir.string() + " is not a directory");
  std::ostringstream out;
  if (fs::exists(dir / "summary.txt")) out << read_text(dir / "summary.txt") << '\n';

  std::vector<fs::path> runs;
  if (fs::exists(dir / "metrics.csv")) runs.push_back(dir);
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "metrics.csv")) runs.push_back(entry.path());
  }
  std::sort(runs.begin(), runs.end());

  std::ostringstream curves;
  curves << "run,round_index,avg_client_dice,aggregated_model_dice,bytes_transferred\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-32s %8s %10s %12s %14s\n", "run", "rounds", "avg_dice", "aggregated", "bytes");
  out << line;
  for (const auto& run : runs) {
    const auto records = read_metrics_csv(run / "metrics.csv");
    std::string name = fs::relative(run, dir).generic_string();
    if (name.empty() || name == ".") name = run.filename().string();
    for (const auto& r : records) {
      curves << name << ',' << r.round_index << ',' << format_real(r.avg_client_dice) << ','
             << format_real(r.aggregated_model_dice) << ',' << r.bytes_transferred << '\n';
    }
    const bool failed = fs::exists(run / "FAILED");
    if (records.empty()) {
      std::snprintf(line, sizeof line, "%-32s %8s%s\n", name.c_str(), "-", failed ? "  FAILED" : "");
    } else {
      const auto& last = records.back();
      std::snprintf(line, sizeof line, "%-32s %8zu %10s %12s %14" PRIu64 "%s\n", name.c_str(), last.round_index,
                    fixed3(last.avg_client_dice).c_str(), fixed3(last.aggregated_model_dice).c_str(),
                    static_cast<std::uint64_t>(last.bytes_transferred), failed ? "  FAILED" : "");
    }
    out << line;
  }
  write_text(dir / "curves.csv", curves.str());
  return out.str();
}

}  // namespace bt
