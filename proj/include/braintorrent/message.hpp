#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bt {

// Frame layout (all integers little-endian):
//   u32 length of everything that follows
//   u8  protocol_version | u16 sender | u64 request_id | u8 tag      (12 bytes)
//   payload
// Payloads:
//   PingRequest, WeightsRequest: empty
//   PingResponse:    u64 own_version
//   WeightsResponse: u32 sample_count | u32 param_count | f64[param_count]
//   Error:           u16 code | u32 text_length | text bytes

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kLengthPrefixBytes = 4;
inline constexpr std::size_t kHeaderBytes = 12;
inline constexpr std::size_t kDefaultMaxFrameBytes = 64u << 20;

enum class MessageTag : std::uint8_t {
  ping_request = 1,
  ping_response = 2,
  weights_request = 3,
  weights_response = 4,
  error = 5,
};

enum class ErrorCode : std::uint16_t {
  version_mismatch = 1,
  malformed_request = 2,
  unsupported_request = 3,
  internal = 4,
};

struct Header {
  std::uint8_t protocol_version = kProtocolVersion;
  std::uint16_t sender = 0;
  std::uint64_t request_id = 0;

  bool operator==(const Header&) const = default;
};

struct PingRequest {
  bool operator==(const PingRequest&) const = default;
};

struct PingResponse {
  std::uint64_t own_version = 0;
  bool operator==(const PingResponse&) const = default;
};

struct WeightsRequest {
  bool operator==(const WeightsRequest&) const = default;
};

struct WeightsResponse {
  std::uint32_t sample_count = 0;
  std::vector<double> params;
};
bool operator==(const WeightsResponse& a, const WeightsResponse& b) noexcept;  // bitwise on params

struct ErrorReply {
  std::uint16_t code = 0;
  std::string text;
  bool operator==(const ErrorReply&) const = default;
};

using MessageBody = std::variant<PingRequest, PingResponse, WeightsRequest, WeightsResponse, ErrorReply>;

struct Message {
  Header header;
  MessageBody body;

  MessageTag tag() const noexcept;
  bool operator==(const Message&) const = default;
};

const char* to_string(MessageTag tag) noexcept;

std::vector<std::uint8_t> encode(const Message& msg);

/// Total frame size of encode(msg), length prefix included.
std::size_t encoded_size(const Message& msg) noexcept;

/// Inverse of encode for exactly one complete frame. Throws IncompleteFrame,
/// OversizeFrame or ProtocolError; never reads out of bounds.
Message decode(std::span<const std::uint8_t> frame, std::size_t max_frame_bytes = kDefaultMaxFrameBytes);

/// Reads the length prefix of a (possibly partial) frame and returns the body
/// length, or nullopt if fewer than 4 bytes are available. Throws OversizeFrame.
std::optional<std::size_t> peek_body_length(std::span<const std::uint8_t> prefix,
                                            std::size_t max_frame_bytes = kDefaultMaxFrameBytes);

}  // namespace bt
