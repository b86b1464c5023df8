#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "braintorrent/errors.hpp"
#include "braintorrent/experiment.hpp"

using namespace bt;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(Mode mode, std::size_t n = 4, std::size_t rounds = 2) {
  ExperimentConfig c;
  c.mode = mode;
  c.n_clients = n;
  c.rounds_fls = rounds;
  c.data.height = 8;
  c.data.width = 8;
  c.model.hidden_dims = {8};
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("bt_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<MetricsRecord> without_time(std::vector<MetricsRecord> r) {
  for (auto& m : r) m.wall_time_ms = 0;
  return r;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  auto c = tiny(Mode::only_client, 5, 3);
  c.split = experiment2_split();
  c.merge_norm = MergeNorm::global;
  c.aggregate = AggregateWeighting::unweighted;
  c.seeds = {11, 12, 13, 14};
  c.transport.unreachable = {1};
  const auto back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.split, c.split);
  EXPECT_EQ(back.seeds, c.seeds);
}

TEST(Config, AbsentKeysKeepDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"mode": "fls"})"));
  EXPECT_EQ(c.mode, Mode::fls);
  EXPECT_EQ(c.n_clients, 10u);
  EXPECT_EQ(c.rounds_fls, 16u);
  EXPECT_EQ(c.base_lr, 1e-3);
  EXPECT_EQ(c.epochs_per_round, 2);
}

TEST(Config, RejectsUnknownKeysAndValues) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"modes": "fls"})")), InvalidArgument);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"data": {"noise": 1}})")), InvalidArgument);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"mode": "gossip"})")), InvalidArgument);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"merge_norm": "all"})")), InvalidArgument);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"n_clients": "ten"})")), InvalidArgument);
}

TEST(Config, Validation) {
  auto c = tiny(Mode::fls);
  c.n_clients = 21;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny(Mode::fls);
  c.split = experiment2_split();
  EXPECT_THROW(c.validate(), InvalidArgument);  // 4 clients vs 5 buckets
  c.n_clients = 5;
  EXPECT_NO_THROW(c.validate());
  c = tiny(Mode::fls);
  c.transport.kind = TransportKind::tcp;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny(Mode::fls);
  c.model.num_classes = 3;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(RunTraining, BudgetParityBetweenProtocols) {
  const auto fls_cfg = tiny(Mode::fls, 3, 4);
  const auto ds = prepare_dataset(fls_cfg);
  auto bt_cfg = fls_cfg;
  bt_cfg.mode = Mode::braintorrent;
  auto only_cfg = fls_cfg;
  only_cfg.mode = Mode::only_client;
  const auto fls = run_training(fls_cfg, ds);
  const auto bt = run_training(bt_cfg, ds);
  EXPECT_EQ(fls.fine_tune_calls, 12u);
  EXPECT_EQ(bt.fine_tune_calls, 12u);
  EXPECT_EQ(run_training(only_cfg, ds).fine_tune_calls, 12u);
  EXPECT_EQ(fls.records.size(), 4u);
  EXPECT_EQ(bt.records.size(), 4u);
  EXPECT_EQ(bt.records.back().round_index, 12u);
}

TEST(RunTraining, BaselineShapes) {
  const auto cfg = tiny(Mode::pooled, 4, 2);
  const auto ds = prepare_dataset(cfg);
  const auto pooled = run_training(cfg, ds);
  ASSERT_EQ(pooled.final_client_weights.size(), 1u);
  EXPECT_EQ(pooled.records.back().per_client_dice.size(), 1u);
  EXPECT_EQ(pooled.fine_tune_calls, 2u);

  auto only = cfg;
  only.mode = Mode::only_client;
  const auto r = run_training(only, ds);
  EXPECT_EQ(r.final_client_weights.size(), 4u);
  EXPECT_EQ(r.records.back().bytes_transferred, 0u);
  EXPECT_FALSE(bitwise_equal(r.final_client_weights[0], r.final_client_weights[1]));
}

TEST(RunTraining, DeterministicPerSeeds) {
  const auto cfg = tiny(Mode::braintorrent, 3, 2);
  const auto ds = prepare_dataset(cfg);
  EXPECT_EQ(without_time(run_training(cfg, ds).records), without_time(run_training(cfg, ds).records));
  auto other = cfg;
  other.seeds.initiator = 99;
  EXPECT_NE(without_time(run_training(cfg, ds).records), without_time(run_training(other, ds).records));
}

TEST(RunTraining, FaultInjectionCountsAbortedRounds) {
  auto cfg = tiny(Mode::braintorrent, 4, 3);
  cfg.transport.drop_probability = 0.3;
  const auto r = run_training(cfg, prepare_dataset(cfg));
  EXPECT_GT(r.aborted_rounds, 0u);
  EXPECT_EQ(r.fine_tune_calls + r.aborted_rounds, 12u);
}

TEST(Metrics, CsvAndJsonShapes) {
  const auto dir = scratch("metrics");
  fs::create_directories(dir);
  emit_metrics({}, dir / "empty.csv", MetricsFormat::csv, 3);
  EXPECT_EQ(slurp(dir / "empty.csv"),
            "round_index,avg_client_dice,aggregated_model_dice,bytes_transferred,client_0,client_1,client_2\n");

  std::vector<MetricsRecord> recs{{1, {0.5, 0.25}, 0.375, 0.4, 100, 1.0}, {2, {0.1, 1.0 / 3}, 0.2, 0.3, 250, 2.0}};
  emit_metrics(recs, dir / "m.csv", MetricsFormat::csv, 2);
  const auto csv = slurp(dir / "m.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  auto back = read_metrics_csv(dir / "m.csv");
  for (auto& r : recs) r.wall_time_ms = 0;
  EXPECT_EQ(back, recs);  // 17 significant digits survive the text round trip

  emit_metrics(recs, dir / "m.json", MetricsFormat::json, 2);
  const auto j = nlohmann::json::parse(slurp(dir / "m.json"));
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[1]["bytes_transferred"], 250);
  EXPECT_EQ(j[1]["per_client_dice"][1].get<double>(), 1.0 / 3);
  emit_metrics({}, dir / "e.json", MetricsFormat::json, 2);
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "e.json")).empty());
  EXPECT_THROW(emit_metrics(recs, dir / "m.csv", MetricsFormat::csv, 3), InvalidArgument);
  EXPECT_THROW(emit_metrics(recs, dir / "no_such_dir" / "x.csv", MetricsFormat::csv, 2), Error);
  fs::remove_all(dir);
}

TEST(Directory, ManifestRerunIsByteIdentical) {
  const auto a = scratch("run_a"), b = scratch("run_b");
  auto cfg = tiny(Mode::braintorrent, 3, 2);
  cfg.transport.drop_probability = 0.1;
  run_to_directory(cfg, a);
  for (const char* f : {"metrics.csv", "metrics.json", "timing.csv", "manifest.json", "weights/client_2.bin",
                        "weights/aggregated.bin"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["status"], "complete");
  EXPECT_EQ(manifest["tool_version"], kToolVersion);
  rerun_manifest(a / "manifest.json", b);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  EXPECT_EQ(slurp(a / "weights/client_0.bin"), slurp(b / "weights/client_0.bin"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Directory, FailureLeavesPartialMetricsAndMarker) {
  const auto dir = scratch("failing");
  auto cfg = tiny(Mode::braintorrent, 3, 2);
  cfg.transport.unreachable = {1};
  cfg.ping_failure = PingFailurePolicy::strict;
  EXPECT_THROW(run_to_directory(cfg, dir), PeerUnreachable);
  EXPECT_TRUE(fs::exists(dir / "FAILED"));
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "manifest.json"))["status"], "failed");
  fs::remove_all(dir);
}

TEST(Experiments, TableStructures) {
  auto base = tiny(Mode::fls, 4, 1);
  const auto e1 = run_experiment1(base, std::nullopt, {5, 10}, 10);
  ASSERT_EQ(e1.summary.size(), 2u);
  EXPECT_EQ(e1.summary[0].scans_per_client, "4");
  EXPECT_EQ(e1.summary[1].scans_per_client, "2");
  ASSERT_EQ(e1.per_client.size(), 3u);
  EXPECT_EQ(e1.per_client[0].method, "BrainTorrent");
  EXPECT_EQ(e1.per_client[2].method, "Only Client");
  for (const auto& row : e1.per_client) EXPECT_EQ(row.dice.size(), 10u);
  EXPECT_NE(render_table1(e1).find("Pooled"), std::string::npos);
  EXPECT_EQ(run_experiment1(base, std::nullopt, {5, 10}, 10).summary[1].bt_avg, e1.summary[1].bt_avg);

  const auto dir = scratch("exp2");
  const auto e2 = run_experiment2(base, dir);
  EXPECT_EQ(e2.shard_sizes, (std::vector<std::size_t>{5, 9, 2, 1, 3}));
  ASSERT_EQ(e2.rows.size(), 3u);
  EXPECT_EQ(e2.rows[2].method, "Pooled Model");
  const auto manifest = nlohmann::json::parse(slurp(dir / "braintorrent" / "manifest.json"));
  EXPECT_EQ(manifest["shard_sizes"], nlohmann::json({5, 9, 2, 1, 3}));
  EXPECT_TRUE(fs::exists(dir / "table4.csv"));
  const auto report = render_report(dir);
  EXPECT_NE(report.find("fls"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "curves.csv"));
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const char* cli = std::getenv("BT_CLI");
  if (!cli) GTEST_SKIP() << "BT_CLI not set";
  const std::string bin = cli;
  EXPECT_EQ(std::system((bin + " defaults > /dev/null").c_str()), 0);
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"mode": "fls", "bogus": 1})";
  EXPECT_NE(std::system((bin + " run --config " + (dir / "bad.json").string() + " --out " + (dir / "o").string() +
                         " 2> /dev/null")
                            .c_str()),
            0);
  std::ofstream(dir / "ok.json") << to_json(tiny(Mode::fls, 2, 1)).dump();
  EXPECT_EQ(std::system((bin + " run --config " + (dir / "ok.json").string() + " --out " + (dir / "o").string() +
                         " > /dev/null")
                            .c_str()),
            0);
  EXPECT_TRUE(fs::exists(dir / "o" / "metrics.csv"));
  fs::remove_all(dir);
}
