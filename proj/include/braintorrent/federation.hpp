#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "braintorrent/dataset.hpp"
#include "braintorrent/model.hpp"
#include "braintorrent/transport.hpp"

namespace bt {

/// Last model version of every client that this client has incorporated;
/// its own entry counts its own fine-tunes.
struct VersionVector {
  std::vector<std::uint64_t> entries;

  VersionVector() = default;
  explicit VersionVector(std::size_t n) : entries(n, 0) {}

  std::size_t size() const noexcept { return entries.size(); }
  std::uint64_t& operator[](std::size_t j) { return entries[j]; }
  std::uint64_t operator[](std::size_t j) const { return entries[j]; }

  bool operator==(const VersionVector&) const = default;
};

struct ClientState {
  ClientIndex client_index = 0;
  ModelWeights weights;
  VersionVector version;
  DatasetShard shard;
  std::uint64_t own_update_count = 0;  // always equals version[client_index]
};

enum class MergeNorm { participants, global };
enum class AggregateWeighting { weighted, unweighted };
enum class PingFailurePolicy { skip, strict };

struct FederationConfig {
  int epochs_per_round = 2;
  double base_lr = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t shuffle_seed = 0;
  MergeNorm merge_norm = MergeNorm::participants;
  AggregateWeighting aggregate = AggregateWeighting::weighted;
  PingFailurePolicy ping_failure = PingFailurePolicy::skip;
  /// Sum of every client's sample count; required by MergeNorm::global.
  std::optional<std::uint64_t> global_sample_total;
};

/// Local training step: returns the updated weights for `client`'s
/// `update_round`-th own update (0-based).
using LocalTrainer = std::function<ModelWeights(const ModelWeights& start, const DatasetShard& shard,
                                                ClientIndex client, std::uint64_t update_round)>;

/// fine_tune with lr_schedule(update_round) and a shuffle seed derived from
/// (shuffle_seed, client, update_round).
LocalTrainer make_fine_tuner(const ModelSpec& spec, const FederationConfig& cfg);

struct WeightedModel {
  std::reference_wrapper<const ModelWeights> weights;
  std::uint64_t count;
};

/// result[p] = sum_k (count_k / normalizer) * params_k[p], accumulated left to
/// right in the given order: acc = c_0*w_0, then acc += c_k*w_k. The
/// normalizer defaults to the sum of the entries' counts.
ModelWeights weighted_average(std::span<const WeightedModel> entries, std::optional<double> normalizer = {});

/// Independent copies of `initial` for every shard, all versions zero.
std::vector<ClientState> make_clients(std::vector<DatasetShard> shards, const ModelWeights& initial);

struct FlsRoundReport {
  std::uint64_t bytes_transferred = 0;  // uploads plus downloads, wire-frame sizes
  std::vector<ModelWeights> local_updates;  // each client's model after step 1, before aggregation
};

/// One server round: every client trains locally, the server takes the
/// count-weighted average over all clients, and every client adopts it.
/// Strong guarantee: on a training error nothing is modified.
FlsRoundReport fls_round(std::span<ClientState> clients, ModelWeights& server, const FederationConfig& cfg,
                         const LocalTrainer& train);

struct PingResult {
  VersionVector v_new;
  std::vector<ClientIndex> unreachable;
  std::uint64_t bytes = 0;
};

/// Asks every other client for its own version. Unreachable peers keep their
/// v_old entry under PingFailurePolicy::skip and abort under strict.
PingResult ping_request(const ClientState& initiator, Transport& transport,
                        PingFailurePolicy policy = PingFailurePolicy::skip);

/// { j != initiator : v_new[j] > v_old[j] } in ascending order.
std::vector<ClientIndex> select_stale_peers(const VersionVector& v_old, const VersionVector& v_new,
                                            ClientIndex initiator);

struct MergeReport {
  ClientIndex initiator = 0;
  std::vector<ClientIndex> participants;  // ascending, always contains the initiator
  std::vector<ClientIndex> unreachable;   // peers skipped during the ping
  std::uint64_t bytes_received = 0;       // reply frames received by the initiator
  std::size_t weights_responses = 0;
  VersionVector v_old;
  VersionVector v_new;
};

/// One peer-to-peer round for `initiator`: ping, merge the stale peers with
/// its own model, fine-tune, bump its own version. The initiator is left
/// untouched if the round throws.
MergeReport bt_round(ClientState& initiator, Transport& transport, const FederationConfig& cfg,
                     const LocalTrainer& train);

/// Reply a client gives to a ping or weights request.
MessageBody serve_request(const ClientState& client, const Message& request);

/// Seeded uniform choice of the round's initiator; a pure function of its inputs.
ClientIndex pick_initiator(std::uint64_t round_index, std::size_t n_clients, std::uint64_t seed);

/// The model handed to a newly joining client.
ModelWeights aggregate_all_clients(std::span<const ClientState> clients,
                                   AggregateWeighting weighting = AggregateWeighting::weighted);

/// One local training pass per client before the first round; counts as an
/// own update.
void warm_up(std::span<ClientState> clients, const LocalTrainer& train);

/// Clients and a simulated transport wired to serve from them.
class SimFederation {
 public:
  SimFederation(std::vector<ClientState> clients, std::uint64_t transport_seed);
  SimFederation(const SimFederation&) = delete;
  SimFederation& operator=(const SimFederation&) = delete;

  std::span<ClientState> clients() noexcept { return clients_; }
  std::span<const ClientState> clients() const noexcept { return clients_; }
  SimTransport& transport() noexcept { return transport_; }

  MergeReport bt_round(ClientIndex initiator, const FederationConfig& cfg, const LocalTrainer& train);

 private:
  std::vector<ClientState> clients_;
  SimTransport transport_;
};

}  // namespace bt
