#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>

#include "braintorrent/dataset.hpp"
#include "braintorrent/experiment.hpp"
#include "braintorrent/model.hpp"

namespace bt {

struct TcpNodeOptions {
  std::chrono::milliseconds sync_timeout{120'000};  // waiting on one peer's progress
  std::chrono::milliseconds poll_interval{20};
  std::chrono::milliseconds linger{3'000};  // keep serving after everyone finished
};

struct TcpNodeResult {
  ModelWeights final_weights;
  std::uint64_t own_update_count = 0;
  std::uint64_t rounds_initiated = 0;
  std::uint64_t bytes_received = 0;
};

/// Runs client `cfg.transport.node` of a BrainTorrent environment in this
/// process, talking to the peers listed in `cfg.transport.peers` over TCP.
///
/// Every node follows the same seeded initiator schedule. Before its turn an
/// initiator waits until each peer's own version shows that the peer has
/// finished all of its earlier turns, so the run reproduces the simulated
/// transport bit for bit. Writes weights/client_<node>.bin and node.json into
/// `out_dir`.
TcpNodeResult run_tcp_node(const ExperimentConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir,
                           const TcpNodeOptions& options = {});

}  // namespace bt
