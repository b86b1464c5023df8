#include "braintorrent/transport.hpp"

#include <string>
#include <utility>

#include "braintorrent/errors.hpp"

namespace bt {

SimTransport::SimTransport(std::size_t n_clients, std::uint64_t seed)
    : handlers_(n_clients), unreachable_(n_clients, false), rng_(derive_seed(seed, 0x7A45)) {
  if (n_clients == 0) throw InvalidArgument("sim transport needs at least one client");
}

void SimTransport::set_handler(ClientIndex peer, RequestHandler handler) { handlers_.at(peer) = std::move(handler); }

void SimTransport::set_unreachable(ClientIndex peer, bool unreachable) { unreachable_.at(peer) = unreachable; }

void SimTransport::set_drop_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("drop probability must be in [0, 1]");
  drop_probability_ = p;
}

Message SimTransport::request(ClientIndex from, ClientIndex to, MessageBody body) {
  if (from >= size() || to >= size()) throw InvalidArgument("sim transport: client index out of range");

  Message req{Header{kProtocolVersion, static_cast<std::uint16_t>(from), ++next_request_id_}, std::move(body)};
  const auto req_bytes = encode(req);
  TraceEntry entry{req.header.request_id, from, to, req.tag(), req_bytes.size(), true};

  const bool dropped = drop_probability_ > 0.0 && rng_.uniform01() < drop_probability_;
  if (unreachable_[to] || dropped || !handlers_[to]) {
    entry.delivered = false;
    trace_.push_back(entry);
    throw PeerUnreachable(to, unreachable_[to] ? "flagged unreachable" : dropped ? "request dropped" : "no handler");
  }
  trace_.push_back(entry);
  bytes_delivered_ += req_bytes.size();

  const Message delivered = decode(req_bytes);
  Message reply{Header{kProtocolVersion, static_cast<std::uint16_t>(to), delivered.header.request_id},
                handlers_[to](delivered)};
  const auto reply_bytes = encode(reply);
  trace_.push_back({reply.header.request_id, to, from, reply.tag(), reply_bytes.size(), true});
  bytes_delivered_ += reply_bytes.size();

  Message received = decode(reply_bytes);
  if (received.header.request_id != req.header.request_id) {
    throw ProtocolError("reply request_id " + std::to_string(received.header.request_id) + " does not match " +
                        std::to_string(req.header.request_id));
  }
  return received;
}

}  // namespace bt
