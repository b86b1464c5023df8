// Command-line front end: training runs, dataset files, experiments, reports.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "braintorrent/dataset.hpp"
#include "braintorrent/errors.hpp"
#include "braintorrent/experiment.hpp"
#include "braintorrent/tcp_node.hpp"

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::string mode;
  std::optional<std::size_t> clients;
  std::optional<std::size_t> rounds;
  std::optional<std::uint64_t> seed_data, seed_init, seed_shuffle, seed_initiator;
  std::string transport;
  std::string peers;
  std::optional<std::size_t> node;
  std::optional<std::size_t> eval_every;
  bool warm_up = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--mode", mode, "fls | braintorrent | pooled | only_client");
    app->add_option("--clients", clients, "number of clients");
    app->add_option("--rounds", rounds, "FLS-equivalent rounds R (BrainTorrent runs R x N)");
    app->add_option("--seed-data", seed_data);
    app->add_option("--seed-init", seed_init);
    app->add_option("--seed-shuffle", seed_shuffle);
    app->add_option("--seed-initiator", seed_initiator);
    app->add_option("--transport", transport, "sim | tcp");
    app->add_option("--peers", peers, "peer table for the tcp transport");
    app->add_option("--node", node, "client index this process runs (tcp)");
    app->add_option("--eval-every", eval_every, "protocol rounds between evaluations");
    app->add_flag("--warm-up", warm_up, "one local training pass per client before round 1");
  }

  bt::ExperimentConfig build() const {
    bt::ExperimentConfig cfg = config.empty() ? bt::ExperimentConfig{} : bt::load_config(config);
    if (!mode.empty()) cfg.mode = bt::parse_mode(mode);
    if (clients) cfg.n_clients = *clients;
    if (rounds) cfg.rounds_fls = *rounds;
    if (seed_data) cfg.seeds.data = *seed_data;
    if (seed_init) cfg.seeds.init = *seed_init;
    if (seed_shuffle) cfg.seeds.shuffle = *seed_shuffle;
    if (seed_initiator) cfg.seeds.initiator = *seed_initiator;
    if (transport == "tcp") {
      cfg.transport.kind = bt::TransportKind::tcp;
    } else if (transport == "sim") {
      cfg.transport.kind = bt::TransportKind::sim;
    } else if (!transport.empty()) {
      throw bt::InvalidArgument("unknown transport '" + transport + "' (sim, tcp)");
    }
    if (!peers.empty()) cfg.transport.peers = peers;
    if (node) cfg.transport.node = *node;
    if (eval_every) cfg.eval_every = *eval_every;
    if (warm_up) cfg.warm_up = true;
    cfg.validate();
    return cfg;
  }
};

void print_final(const bt::RunResult& r) {
  if (r.records.empty()) return;
  const auto& last = r.records.back();
  std::printf("round %zu  avg client Dice %.4f  aggregated Dice %.4f  bytes %llu\n", last.round_index,
              last.avg_client_dice, last.aggregated_model_dice, static_cast<unsigned long long>(last.bytes_transferred));
  if (r.aborted_rounds) std::printf("aborted rounds: %llu\n", static_cast<unsigned long long>(r.aborted_rounds));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized and server-based federated segmentation training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", bt::kToolVersion);

  // run
  Overrides run_opts;
  std::string run_out, run_dataset, run_manifest;
  auto* run = app.add_subcommand("run", "train one configuration");
  run_opts.attach(run);
  run->add_option("--out", run_out, "output directory")->required();
  run->add_option("--dataset", run_dataset, "use this dataset file instead of generating one")->check(CLI::ExistingFile);
  run->add_option("--manifest", run_manifest, "rerun the configuration recorded in a manifest")
      ->check(CLI::ExistingFile);

  // dataset
  auto* dataset = app.add_subcommand("dataset", "generate or inspect dataset files");
  dataset->require_subcommand(1);
  Overrides gen_opts;
  std::string gen_out;
  auto* gen = dataset->add_subcommand("gen", "write the dataset a config describes");
  gen_opts.attach(gen);
  gen->add_option("--out", gen_out, "dataset file")->required();
  std::string dump_in;
  auto* dump = dataset->add_subcommand("dump", "summarize a dataset file");
  dump->add_option("--in", dump_in)->required()->check(CLI::ExistingFile);

  // experiments
  Overrides exp1_opts;
  std::string exp1_out;
  std::vector<std::size_t> exp1_counts = bt::kExperiment1ClientCounts;
  auto* exp1 = app.add_subcommand("exp1", "client-count sweep with pooled and only-client baselines");
  exp1_opts.attach(exp1);
  exp1->add_option("--counts", exp1_counts, "client counts to sweep");
  exp1->add_option("--out", exp1_out)->required();

  Overrides exp2_opts;
  std::string exp2_out;
  auto* exp2 = app.add_subcommand("exp2", "cohort-split comparison");
  exp2_opts.attach(exp2);
  exp2->add_option("--out", exp2_out)->required();

  std::string report_in;
  auto* report = app.add_subcommand("report", "summarize a run or experiment directory");
  report->add_option("--in", report_in)->required()->check(CLI::ExistingDirectory);

  auto* defaults = app.add_subcommand("defaults", "print the default config as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (!run_manifest.empty()) {
        print_final(bt::rerun_manifest(run_manifest, run_out));
        return 0;
      }
      const auto cfg = run_opts.build();
      if (cfg.transport.kind == bt::TransportKind::tcp) {
        const bt::Dataset ds = run_dataset.empty() ? bt::prepare_dataset(cfg) : bt::read_dataset(run_dataset);
        const auto r = bt::run_tcp_node(cfg, ds, run_out);
        std::printf("node %zu done: %llu own updates, %llu rounds initiated, %llu bytes received\n",
                    cfg.transport.node, static_cast<unsigned long long>(r.own_update_count),
                    static_cast<unsigned long long>(r.rounds_initiated),
                    static_cast<unsigned long long>(r.bytes_received));
        return 0;
      }
      std::optional<bt::Dataset> ds;
      if (!run_dataset.empty()) ds = bt::read_dataset(run_dataset);
      print_final(bt::run_to_directory(cfg, run_out, ds));
    } else if (gen->parsed()) {
      const auto cfg = gen_opts.build();
      bt::write_dataset(gen_out, bt::prepare_dataset(cfg));
    } else if (dump->parsed()) {
      const auto ds = bt::read_dataset(dump_in);
      std::printf("classes %zu  train %zu  test %zu\n", ds.num_classes, ds.train.size(), ds.test.size());
      for (const auto* part : {&ds.train, &ds.test}) {
        for (const auto& img : *part) {
          std::printf("%s id=%u %zux%zu cohort=%.2f\n", part == &ds.train ? "train" : "test ", img.id, img.height,
                      img.width, img.cohort);
        }
      }
    } else if (exp1->parsed()) {
      fs::create_directories(exp1_out);
      const auto r = bt::run_experiment1(exp1_opts.build(), fs::path(exp1_out), exp1_counts);
      std::cout << bt::render_table1(r) << '\n' << bt::render_table2(r);
    } else if (exp2->parsed()) {
      fs::create_directories(exp2_out);
      std::cout << bt::render_table4(bt::run_experiment2(exp2_opts.build(), fs::path(exp2_out)));
    } else if (report->parsed()) {
      std::cout << bt::render_report(report_in);
    } else if (defaults->parsed()) {
      std::cout << bt::to_json(bt::ExperimentConfig{}).dump(2) << '\n';
    }
  } catch (const bt::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
