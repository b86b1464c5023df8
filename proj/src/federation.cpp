#include "braintorrent/federation.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <variant>

#include "braintorrent/errors.hpp"
#include "braintorrent/rng.hpp"
#include "braintorrent/training.hpp"

namespace bt {

LocalTrainer make_fine_tuner(const ModelSpec& spec, const FederationConfig& cfg) {
  return [spec, cfg](const ModelWeights& start, const DatasetShard& shard, ClientIndex client,
                     std::uint64_t update_round) {
    FineTuneOptions opts;
    opts.epochs = cfg.epochs_per_round;
    opts.lr = lr_schedule(update_round, cfg.base_lr);
    opts.batch_size = cfg.batch_size;
    opts.seed = derive_seed(cfg.shuffle_seed, client, update_round);
    return fine_tune(spec, start, shard, opts).weights;
  };
}

ModelWeights weighted_average(std::span<const WeightedModel> entries, std::optional<double> normalizer) {
  if (entries.empty()) throw InvalidArgument("weighted_average: no entries");
  const ModelWeights& first = entries.front().weights.get();
  double total = 0.0;
  for (const auto& e : entries) {
    const ModelWeights& w = e.weights.get();
    if (w.spec_fingerprint != first.spec_fingerprint || w.params.size() != first.params.size()) {
      throw ShapeError("weighted_average: models have different specs");
    }
    if (e.count == 0) throw InvalidArgument("weighted_average: sample counts must be positive");
    total += static_cast<double>(e.count);
  }
  if (normalizer) {
    if (!(*normalizer > 0.0)) throw InvalidArgument("weighted_average: normalizer must be positive");
    total = *normalizer;
  }

  // The first term seeds the accumulator so a lone entry with coefficient 1
  // comes back bit-identical (signed zeros included).
  ModelWeights out{first.spec_fingerprint, std::vector<double>(first.params.size())};
  const double coef0 = static_cast<double>(entries.front().count) / total;
  for (std::size_t p = 0; p < first.params.size(); ++p) out.params[p] = coef0 * first.params[p];
  for (const auto& e : entries.subspan(1)) {
    const double coef = static_cast<double>(e.count) / total;
    const auto& params = e.weights.get().params;
    for (std::size_t p = 0; p < params.size(); ++p) out.params[p] += coef * params[p];
  }
  return out;
}

std::vector<ClientState> make_clients(std::vector<DatasetShard> shards, const ModelWeights& initial) {
  std::vector<ClientState> clients;
  clients.reserve(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) {
    ClientState c;
    c.client_index = i;
    c.weights = initial;
    c.version = VersionVector(shards.size());
    c.shard = std::move(shards[i]);
    c.shard.client_index = i;
    clients.push_back(std::move(c));
  }
  return clients;
}

FlsRoundReport fls_round(std::span<ClientState> clients, ModelWeights& server, const FederationConfig&,
                         const LocalTrainer& train) {
  if (clients.empty()) throw InvalidArgument("fls_round: no clients");

  // 1. local updates
  std::vector<ModelWeights> updated;
  updated.reserve(clients.size());
  for (const auto& c : clients) updated.push_back(train(c.weights, c.shard, c.client_index, c.own_update_count));

  // 2-3. upload and aggregate with a = sum of all a_i
  std::vector<WeightedModel> entries;
  for (std::size_t i = 0; i < clients.size(); ++i) entries.push_back({updated[i], clients[i].shard.sample_count()});
  ModelWeights aggregate = weighted_average(entries);

  const Message upload{Header{}, WeightsResponse{0, aggregate.params}};
  const std::uint64_t frame = encoded_size(upload);

  // 4. redistribute
  for (auto& c : clients) {
    c.weights = aggregate;
    c.own_update_count += 1;
    c.version[c.client_index] = c.own_update_count;
  }
  server = std::move(aggregate);
  return {2 * frame * clients.size(), std::move(updated)};
}

PingResult ping_request(const ClientState& initiator, Transport& transport, PingFailurePolicy policy) {
  const ClientIndex self = initiator.client_index;
  if (initiator.version.size() != transport.size()) {
    throw InvalidArgument("ping_request: version vector length differs from environment size");
  }
  PingResult result{initiator.version, {}, 0};
  for (ClientIndex j = 0; j < transport.size(); ++j) {
    if (j == self) continue;
    try {
      const Message reply = transport.request(self, j, PingRequest{});
      result.bytes += encoded_size(reply);
      if (const auto* pong = std::get_if<PingResponse>(&reply.body)) {
        result.v_new[j] = pong->own_version;
      } else if (const auto* err = std::get_if<ErrorReply>(&reply.body)) {
        throw ProtocolError("peer " + std::to_string(j) + " answered ping with error: " + err->text);
      } else {
        throw ProtocolError("peer " + std::to_string(j) + " answered ping with " + to_string(reply.tag()));
      }
    } catch (const PeerUnreachable&) {
      if (policy == PingFailurePolicy::strict) throw;
      result.unreachable.push_back(j);
    }
  }
  return result;
}

std::vector<ClientIndex> select_stale_peers(const VersionVector& v_old, const VersionVector& v_new,
                                            ClientIndex initiator) {
  if (v_old.size() != v_new.size()) throw InvalidArgument("select_stale_peers: version vectors differ in length");
  std::vector<ClientIndex> stale;
  for (ClientIndex j = 0; j < v_old.size(); ++j) {
    if (j != initiator && v_new[j] > v_old[j]) stale.push_back(j);
  }
  return stale;
}

MergeReport bt_round(ClientState& initiator, Transport& transport, const FederationConfig& cfg,
                     const LocalTrainer& train) {
  const ClientIndex self = initiator.client_index;
  MergeReport report;
  report.initiator = self;
  report.v_old = initiator.version;

  PingResult ping = ping_request(initiator, transport, cfg.ping_failure);
  report.v_new = ping.v_new;
  report.unreachable = std::move(ping.unreachable);
  report.bytes_received = ping.bytes;

  const auto stale = select_stale_peers(report.v_old, report.v_new, self);

  // Only stale peers transmit weights. Any failure here aborts the round.
  std::vector<std::pair<ClientIndex, ModelWeights>> fetched;
  std::vector<std::uint64_t> counts;
  for (ClientIndex j : stale) {
    const Message reply = transport.request(self, j, WeightsRequest{});
    report.bytes_received += encoded_size(reply);
    if (const auto* err = std::get_if<ErrorReply>(&reply.body)) {
      throw ProtocolError("peer " + std::to_string(j) + " refused weights: " + err->text);
    }
    const auto* wr = std::get_if<WeightsResponse>(&reply.body);
    if (!wr) throw ProtocolError("peer " + std::to_string(j) + " answered weights request with " + to_string(reply.tag()));
    if (wr->params.size() != initiator.weights.params.size()) {
      throw ShapeError("peer " + std::to_string(j) + " sent " + std::to_string(wr->params.size()) + " params, expected " +
                       std::to_string(initiator.weights.params.size()));
    }
    if (wr->sample_count == 0) throw ProtocolError("peer " + std::to_string(j) + " reported zero samples");
    ++report.weights_responses;
    fetched.emplace_back(j, ModelWeights{initiator.weights.spec_fingerprint, wr->params});
    counts.push_back(wr->sample_count);
  }

  // Merge in ascending client index, the initiator at its own position.
  std::vector<WeightedModel> entries;
  std::size_t next = 0;
  for (ClientIndex j = 0; j < transport.size(); ++j) {
    if (j == self) {
      entries.push_back({initiator.weights, initiator.shard.sample_count()});
      report.participants.push_back(j);
    } else if (next < fetched.size() && fetched[next].first == j) {
      entries.push_back({fetched[next].second, counts[next]});
      report.participants.push_back(j);
      ++next;
    }
  }
  std::optional<double> normalizer;
  if (cfg.merge_norm == MergeNorm::global) {
    if (!cfg.global_sample_total) throw InvalidArgument("bt_round: global merge normalization needs global_sample_total");
    normalizer = static_cast<double>(*cfg.global_sample_total);
  }
  ModelWeights merged = weighted_average(entries, normalizer);

  ClientState next_state = initiator;
  for (ClientIndex j : stale) next_state.version[j] = report.v_new[j];
  next_state.weights = train(merged, initiator.shard, self, initiator.own_update_count);
  next_state.own_update_count += 1;
  next_state.version[self] = next_state.own_update_count;

  initiator = std::move(next_state);
  return report;
}

MessageBody serve_request(const ClientState& client, const Message& request) {
  if (std::holds_alternative<PingRequest>(request.body)) {
    return PingResponse{client.version[client.client_index]};
  }
  if (std::holds_alternative<WeightsRequest>(request.body)) {
    return WeightsResponse{static_cast<std::uint32_t>(client.shard.sample_count()), client.weights.params};
  }
  return ErrorReply{static_cast<std::uint16_t>(ErrorCode::unsupported_request),
                    std::string("cannot serve ") + to_string(request.tag())};
}

ClientIndex pick_initiator(std::uint64_t round_index, std::size_t n_clients, std::uint64_t seed) {
  if (n_clients == 0) throw InvalidArgument("pick_initiator: no clients");
  Rng rng(derive_seed(seed, 0x1417, round_index));
  return static_cast<ClientIndex>(rng.below(n_clients));
}

ModelWeights aggregate_all_clients(std::span<const ClientState> clients, AggregateWeighting weighting) {
  if (clients.empty()) throw InvalidArgument("aggregate_all_clients: no clients");
  std::vector<WeightedModel> entries;
  for (const auto& c : clients) {
    entries.push_back({c.weights, weighting == AggregateWeighting::weighted ? c.shard.sample_count() : 1});
  }
  return weighted_average(entries);
}

void warm_up(std::span<ClientState> clients, const LocalTrainer& train) {
  std::vector<ModelWeights> updated;
  for (const auto& c : clients) updated.push_back(train(c.weights, c.shard, c.client_index, c.own_update_count));
  for (std::size_t i = 0; i < clients.size(); ++i) {
    clients[i].weights = std::move(updated[i]);
    clients[i].own_update_count += 1;
    clients[i].version[clients[i].client_index] = clients[i].own_update_count;
  }
}

SimFederation::SimFederation(std::vector<ClientState> clients, std::uint64_t transport_seed)
    : clients_(std::move(clients)), transport_(clients_.size(), transport_seed) {
  for (ClientIndex j = 0; j < clients_.size(); ++j) {
    if (clients_[j].client_index != j) throw InvalidArgument("SimFederation: client_index must equal position");
    transport_.set_handler(j, [this, j](const Message& req) { return serve_request(clients_[j], req); });
  }
}

MergeReport SimFederation::bt_round(ClientIndex initiator, const FederationConfig& cfg, const LocalTrainer& train) {
  return ::bt::bt_round(clients_.at(initiator), transport_, cfg, train);
}

}  // namespace bt
