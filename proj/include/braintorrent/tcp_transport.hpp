#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "braintorrent/transport.hpp"

namespace bt {

struct PeerAddress {
  ClientIndex client_index = 0;
  std::string host;
  std::uint16_t port = 0;

  std::string endpoint() const { return host + ":" + std::to_string(port); }
  static PeerAddress parse(ClientIndex index, const std::string& endpoint);

  bool operator==(const PeerAddress&) const = default;
};

/// Peer table file: JSON array of {"client_index": i, "endpoint": "host:port"}.
/// Entries are returned sorted by client index; indices must be 0..N-1.
std::vector<PeerAddress> load_peer_table(const std::filesystem::path& path);
void save_peer_table(const std::filesystem::path& path, const std::vector<PeerAddress>& peers);

struct TcpOptions {
  std::chrono::milliseconds timeout{10'000};
  std::size_t max_frame_bytes = kDefaultMaxFrameBytes;
};

/// Accepts connections and answers every framed request with `handler`.
/// Connections are served concurrently; the handler must be thread-safe.
/// A frame with the wrong protocol version is answered with an Error frame
/// and the connection is closed.
class TcpServer {
 public:
  TcpServer(const std::string& host, std::uint16_t port, ClientIndex self, RequestHandler handler,
            TcpOptions options = {}, std::size_t threads = 2);
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const noexcept;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Client side: one connection per request, bounded by options.timeout.
/// Connect failures and timeouts surface as PeerUnreachable.
class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(std::vector<PeerAddress> peers, TcpOptions options = {});

  std::size_t size() const override { return peers_.size(); }
  Message request(ClientIndex from, ClientIndex to, MessageBody body) override;

  /// Sends raw bytes and returns the raw reply frame.
  std::vector<std::uint8_t> exchange_raw(ClientIndex to, const std::vector<std::uint8_t>& frame);

  std::uint64_t bytes_received() const noexcept { return bytes_received_; }

 private:
  std::vector<PeerAddress> peers_;
  TcpOptions options_;
  std::atomic<std::uint64_t> next_request_id_{0};
  std::atomic<std::uint64_t> bytes_received_{0};
};

}  // namespace bt
