#include "braintorrent/tcp_node.hpp"

#include <fstream>
#include <mutex>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "braintorrent/errors.hpp"
#include "braintorrent/federation.hpp"
#include "braintorrent/tcp_transport.hpp"

namespace bt {

namespace {

using Clock = std::chrono::steady_clock;

// Own version of `peer`, or nothing if it cannot be reached right now.
std::optional<std::uint64_t> peer_version(Transport& transport, ClientIndex self, ClientIndex peer) {
  try {
    const Message reply = transport.request(self, peer, PingRequest{});
    if (const auto* pong = std::get_if<PingResponse>(&reply.body)) return pong->own_version;
    throw ProtocolError("peer " + std::to_string(peer) + " answered ping with " + to_string(reply.tag()));
  } catch (const PeerUnreachable&) {
    return std::nullopt;
  }
}

// Polls every pending peer in turn until each reports exactly its expected
// own version. A peer that has been confirmed is not asked again, since it may
// already have shut down.
void wait_for_versions(Transport& transport, ClientIndex self, const std::vector<std::uint64_t>& expected,
                       const TcpNodeOptions& options) {
  std::vector<ClientIndex> pending;
  for (ClientIndex j = 0; j < expected.size(); ++j) {
    if (j != self) pending.push_back(j);
  }
  std::vector<std::uint64_t> last_seen(expected.size(), 0);
  auto deadline = Clock::now() + options.sync_timeout;
  while (!pending.empty()) {
    std::vector<ClientIndex> still;
    for (ClientIndex j : pending) {
      const auto v = peer_version(transport, self, j);
      if (v && *v > expected[j]) {
        throw Error("peer " + std::to_string(j) + " is ahead of the schedule (version " + std::to_string(*v) +
                    ", expected " + std::to_string(expected[j]) + ")");
      }
      if (v && *v == expected[j]) continue;
      if (v && *v > last_seen[j]) {
        last_seen[j] = *v;
        deadline = Clock::now() + options.sync_timeout;  // progress resets the clock
      }
      still.push_back(j);
    }
    pending = std::move(still);
    if (pending.empty()) break;
    if (Clock::now() > deadline) {
      throw PeerUnreachable(pending.front(),
                            "no progress within " + std::to_string(options.sync_timeout.count()) + " ms");
    }
    std::this_thread::sleep_for(options.poll_interval);
  }
}

}  // namespace

TcpNodeResult run_tcp_node(const ExperimentConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir,
                           const TcpNodeOptions& options) {
  cfg.validate();
  if (cfg.transport.kind != TransportKind::tcp) throw InvalidArgument("run_tcp_node: config does not select tcp");
  const auto peers = load_peer_table(cfg.transport.peers);
  const std::size_t n = cfg.n_clients;
  if (peers.size() != n) {
    throw InvalidArgument("peer table lists " + std::to_string(peers.size()) + " clients, config has " +
                          std::to_string(n));
  }
  const ClientIndex self = cfg.transport.node;

  auto shards = make_shards(cfg, ds);
  FederationConfig fed = cfg.federation();
  fed.global_sample_total = 0;
  for (const auto& s : shards) *fed.global_sample_total += s.sample_count();
  auto clients = make_clients(std::move(shards), init_model(cfg.model, cfg.seeds.init));
  const LocalTrainer train = make_fine_tuner(cfg.model, fed);

  std::mutex mu;
  ClientState state = std::move(clients[self]);
  clients.clear();

  TcpOptions tcp;
  tcp.timeout = std::chrono::milliseconds(cfg.transport.timeout_ms);
  TcpServer server(peers[self].host, peers[self].port, self,
                   [&](const Message& req) {
                     std::lock_guard lock(mu);
                     return serve_request(state, req);
                   },
                   tcp);
  TcpTransport transport(peers, tcp);

  const std::uint64_t base = cfg.warm_up ? 1 : 0;
  if (cfg.warm_up) {
    ClientState next = state;
    warm_up(std::span<ClientState>(&next, 1), train);
    std::lock_guard lock(mu);
    state = std::move(next);
  }

  TcpNodeResult result;
  std::vector<std::uint64_t> expected(n, base);
  for (std::size_t r = 0; r < cfg.total_rounds(); ++r) {
    const ClientIndex initiator = pick_initiator(r, n, cfg.seeds.initiator);
    if (initiator == self) {
      wait_for_versions(transport, self, expected, options);
      ClientState next;
      {
        std::lock_guard lock(mu);
        next = state;
      }
      bt_round(next, transport, fed, train);
      {
        std::lock_guard lock(mu);
        state = std::move(next);
      }
      ++result.rounds_initiated;
    }
    expected[initiator] += 1;
  }

  wait_for_versions(transport, self, expected, options);
  std::this_thread::sleep_for(options.linger);
  server.stop();

  result.final_weights = state.weights;
  result.own_update_count = state.own_update_count;
  result.bytes_received = transport.bytes_received();

  std::filesystem::create_directories(out_dir / "weights");
  write_weights(out_dir / "weights" / ("client_" + std::to_string(self) + ".bin"), result.final_weights);
  const nlohmann::json node = {{"tool_version", kToolVersion},
                               {"config", to_json(cfg)},
                               {"node", self},
                               {"own_update_count", result.own_update_count},
                               {"rounds_initiated", result.rounds_initiated},
                               {"bytes_received", result.bytes_received},
                               {"version", state.version.entries}};
  std::ofstream(out_dir / "node.json") << node.dump(2) << '\n';
  return result;
}

}  // namespace bt
