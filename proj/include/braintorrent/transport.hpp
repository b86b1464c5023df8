#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "braintorrent/message.hpp"
#include "braintorrent/rng.hpp"

namespace bt {

using ClientIndex = std::size_t;

/// Server-side hook: builds the reply body for one inbound request.
using RequestHandler = std::function<MessageBody(const Message& request)>;

/// Request/response channel between the clients of one environment.
class Transport {
 public:
  virtual ~Transport() = default;

  /// Number of clients in the environment.
  virtual std::size_t size() const = 0;

  /// Delivers `body` from `from` to `to` and returns the peer's reply.
  /// Throws PeerUnreachable when the peer cannot be reached and
  /// ProtocolError on a malformed or mismatched reply.
  virtual Message request(ClientIndex from, ClientIndex to, MessageBody body) = 0;
};

struct TraceEntry {
  std::uint64_t request_id = 0;
  ClientIndex from = 0;
  ClientIndex to = 0;
  MessageTag tag = MessageTag::ping_request;
  std::size_t bytes = 0;
  bool delivered = true;

  bool operator==(const TraceEntry&) const = default;
};

/// In-process transport. Every message is encoded and decoded so byte counts
/// and codec behaviour match the wire. Single-threaded; do not share a handle
/// across threads.
class SimTransport final : public Transport {
 public:
  SimTransport(std::size_t n_clients, std::uint64_t seed);

  void set_handler(ClientIndex peer, RequestHandler handler);
  void set_unreachable(ClientIndex peer, bool unreachable);
  /// Each request is lost with this probability (seeded).
  void set_drop_probability(double p);

  std::size_t size() const override { return handlers_.size(); }
  Message request(ClientIndex from, ClientIndex to, MessageBody body) override;

  const std::vector<TraceEntry>& trace() const noexcept { return trace_; }
  std::uint64_t bytes_delivered() const noexcept { return bytes_delivered_; }

 private:
  std::vector<RequestHandler> handlers_;
  std::vector<bool> unreachable_;
  double drop_probability_ = 0.0;
  Rng rng_;
  std::uint64_t next_request_id_ = 0;
  std::uint64_t bytes_delivered_ = 0;
  std::vector<TraceEntry> trace_;
};

}  // namespace bt
