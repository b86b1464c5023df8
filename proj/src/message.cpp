#include "braintorrent/message.hpp"

#include <string>

#include "braintorrent/bytes.hpp"
#include "braintorrent/errors.hpp"
#include "braintorrent/model.hpp"

namespace bt {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::size_t payload_size(const MessageBody& body) noexcept {
  return std::visit(overloaded{
                        [](const PingRequest&) -> std::size_t { return 0; },
                        [](const PingResponse&) -> std::size_t { return 8; },
                        [](const WeightsRequest&) -> std::size_t { return 0; },
                        [](const WeightsResponse& r) -> std::size_t { return 8 + 8 * r.params.size(); },
                        [](const ErrorReply& e) -> std::size_t { return 6 + e.text.size(); },
                    },
                    body);
}

}  // namespace

bool operator==(const WeightsResponse& a, const WeightsResponse& b) noexcept {
  return a.sample_count == b.sample_count && bitwise_equal(std::span{a.params}, std::span{b.params});
}

MessageTag Message::tag() const noexcept {
  return std::visit(overloaded{
                        [](const PingRequest&) { return MessageTag::ping_request; },
                        [](const PingResponse&) { return MessageTag::ping_response; },
                        [](const WeightsRequest&) { return MessageTag::weights_request; },
                        [](const WeightsResponse&) { return MessageTag::weights_response; },
                        [](const ErrorReply&) { return MessageTag::error; },
                    },
                    body);
}

const char* to_string(MessageTag tag) noexcept {
  switch (tag) {
    case MessageTag::ping_request: return "PingRequest";
    case MessageTag::ping_response: return "PingResponse";
    case MessageTag::weights_request: return "WeightsRequest";
    case MessageTag::weights_response: return "WeightsResponse";
    case MessageTag::error: return "Error";
  }
  return "Unknown";
}

std::size_t encoded_size(const Message& msg) noexcept {
  return kLengthPrefixBytes + kHeaderBytes + payload_size(msg.body);
}

std::vector<std::uint8_t> encode(const Message& msg) {
  std::vector<std::uint8_t> out;
  out.reserve(encoded_size(msg));
  ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(kHeaderBytes + payload_size(msg.body)));
  w.u8(msg.header.protocol_version);
  w.u16(msg.header.sender);
  w.u64(msg.header.request_id);
  w.u8(static_cast<std::uint8_t>(msg.tag()));
  std::visit(overloaded{
                 [](const PingRequest&) {},
                 [&](const PingResponse& r) { w.u64(r.own_version); },
                 [](const WeightsRequest&) {},
                 [&](const WeightsResponse& r) {
                   w.u32(r.sample_count);
                   w.u32(static_cast<std::uint32_t>(r.params.size()));
                   for (double p : r.params) w.f64(p);
                 },
                 [&](const ErrorReply& e) {
                   w.u16(e.code);
                   w.u32(static_cast<std::uint32_t>(e.text.size()));
                   w.raw(e.text);
                 },
             },
             msg.body);
  return out;
}

std::optional<std::size_t> peek_body_length(std::span<const std::uint8_t> prefix, std::size_t max_frame_bytes) {
  if (prefix.size() < kLengthPrefixBytes) return std::nullopt;
  ByteReader r(prefix.first(kLengthPrefixBytes));
  const std::size_t length = r.u32();
  if (length > max_frame_bytes) {
    throw OversizeFrame("frame announces " + std::to_string(length) + " bytes, limit is " +
                        std::to_string(max_frame_bytes));
  }
  return length;
}

Message decode(std::span<const std::uint8_t> frame, std::size_t max_frame_bytes) {
  const auto length = peek_body_length(frame, max_frame_bytes);
  if (!length) throw IncompleteFrame("frame shorter than its length prefix");
  if (*length < kHeaderBytes) throw ProtocolError("frame body shorter than the message header");
  if (frame.size() < kLengthPrefixBytes + *length) {
    throw IncompleteFrame("frame announces " + std::to_string(*length) + " body bytes, only " +
                          std::to_string(frame.size() - kLengthPrefixBytes) + " present");
  }
  if (frame.size() > kLengthPrefixBytes + *length) throw ProtocolError("trailing bytes after frame");

  ByteReader r(frame.subspan(kLengthPrefixBytes, *length));
  Message msg;
  msg.header.protocol_version = r.u8();
  msg.header.sender = r.u16();
  msg.header.request_id = r.u64();
  const std::uint8_t tag = r.u8();
  if (msg.header.protocol_version != kProtocolVersion) {
    throw ProtocolError("protocol version mismatch: got " + std::to_string(msg.header.protocol_version) +
                        ", expected " + std::to_string(kProtocolVersion));
  }

  switch (static_cast<MessageTag>(tag)) {
    case MessageTag::ping_request:
      msg.body = PingRequest{};
      break;
    case MessageTag::ping_response:
      msg.body = PingResponse{r.u64()};
      break;
    case MessageTag::weights_request:
      msg.body = WeightsRequest{};
      break;
    case MessageTag::weights_response: {
      WeightsResponse wr;
      wr.sample_count = r.u32();
      const std::size_t count = r.u32();
      if (r.remaining() != 8 * count) throw ProtocolError("weights payload length disagrees with its param count");
      wr.params.resize(count);
      for (double& p : wr.params) p = r.f64();
      msg.body = std::move(wr);
      break;
    }
    case MessageTag::error: {
      ErrorReply e;
      e.code = r.u16();
      const std::size_t n = r.u32();
      e.text = r.raw(n);
      msg.body = std::move(e);
      break;
    }
    default:
      throw ProtocolError("unknown message tag " + std::to_string(tag));
  }
  if (r.remaining() != 0) throw ProtocolError("unexpected bytes after payload");
  return msg;
}

}  // namespace bt
