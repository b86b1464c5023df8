#include <gtest/gtest.h>

#include <boost/asio.hpp>
#include <chrono>
#include <filesystem>
#include <thread>

#include "braintorrent/errors.hpp"
#include "braintorrent/tcp_transport.hpp"
#include "braintorrent/transport.hpp"

using namespace bt;
using namespace std::chrono_literals;

namespace {

MessageBody echo_version(const Message& m) {
  if (std::holds_alternative<PingRequest>(m.body)) return PingResponse{m.header.sender + 100u};
  return WeightsResponse{4, {1.0, -2.5, 3.25}};
}

SimTransport make_sim(std::size_t n, std::uint64_t seed) {
  SimTransport t(n, seed);
  for (std::size_t j = 0; j < n; ++j) t.set_handler(j, echo_version);
  return t;
}

}  // namespace

TEST(SimTransport, DeliversExactlyOneReply) {
  auto t = make_sim(3, 1);
  const auto reply = t.request(2, 0, PingRequest{});
  EXPECT_EQ(std::get<PingResponse>(reply.body).own_version, 102u);
  ASSERT_EQ(t.trace().size(), 2u);
  EXPECT_EQ(t.trace()[0].tag, MessageTag::ping_request);
  EXPECT_EQ(t.trace()[1].tag, MessageTag::ping_response);
  EXPECT_EQ(t.trace()[1].from, 0u);
  EXPECT_EQ(t.bytes_delivered(), 16u + 24u);
}

TEST(SimTransport, UnreachablePeerSurfaces) {
  auto t = make_sim(3, 1);
  t.set_unreachable(1, true);
  try {
    t.request(0, 1, PingRequest{});
    FAIL();
  } catch (const PeerUnreachable& e) {
    EXPECT_EQ(e.peer(), 1u);
  }
  EXPECT_FALSE(t.trace().back().delivered);
  EXPECT_EQ(t.bytes_delivered(), 0u);
  t.set_unreachable(1, false);
  EXPECT_NO_THROW(t.request(0, 1, PingRequest{}));
  EXPECT_THROW(t.request(0, 5, PingRequest{}), InvalidArgument);
}

TEST(SimTransport, TracesArePureFunctionsOfSeedAndSchedule) {
  auto run = [](std::uint64_t seed) {
    auto t = make_sim(4, seed);
    t.set_drop_probability(0.3);
    for (int i = 0; i < 200; ++i) {
      try {
        t.request(i % 4, (i * 7 + 1) % 4, i % 2 ? MessageBody{PingRequest{}} : MessageBody{WeightsRequest{}});
      } catch (const PeerUnreachable&) {
      }
    }
    return t.trace();
  };
  EXPECT_EQ(run(5), run(5));
  EXPECT_NE(run(5), run(6));
}

TEST(SimTransport, DropProbabilityOneLosesEverything) {
  auto t = make_sim(2, 1);
  t.set_drop_probability(1.0);
  for (int i = 0; i < 10; ++i) EXPECT_THROW(t.request(0, 1, PingRequest{}), PeerUnreachable);
  EXPECT_THROW(t.set_drop_probability(1.5), InvalidArgument);
}

TEST(PeerTable, ParseAndRoundTrip) {
  const auto p = PeerAddress::parse(2, "127.0.0.1:4100");
  EXPECT_EQ(p.host, "127.0.0.1");
  EXPECT_EQ(p.port, 4100);
  EXPECT_THROW(PeerAddress::parse(0, "nohost"), InvalidArgument);
  EXPECT_THROW(PeerAddress::parse(0, "h:99999"), InvalidArgument);

  const auto path = std::filesystem::temp_directory_path() / "bt_peer_table_test.json";
  const std::vector<PeerAddress> peers{{0, "127.0.0.1", 5000}, {1, "localhost", 5001}};
  save_peer_table(path, peers);
  EXPECT_EQ(load_peer_table(path), peers);
  std::filesystem::remove(path);
}

TEST(Tcp, RequestsRoundTripOverLoopback) {
  TcpServer server("127.0.0.1", 0, 1, echo_version);
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", server.port()}});
  const auto pong = t.request(0, 1, PingRequest{});
  EXPECT_EQ(std::get<PingResponse>(pong.body).own_version, 100u);
  const auto w = t.request(0, 1, WeightsRequest{});
  EXPECT_EQ(std::get<WeightsResponse>(w.body), (WeightsResponse{4, {1.0, -2.5, 3.25}}));
  EXPECT_EQ(t.bytes_received(), encoded_size(pong) + encoded_size(w));
}

TEST(Tcp, ServesConcurrentClients) {
  TcpServer server("127.0.0.1", 0, 0, echo_version);
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int k = 0; k < 4; ++k) {
    threads.emplace_back([&, k] {
      TcpTransport t({{0, "127.0.0.1", server.port()}, {1, "127.0.0.1", 1}});
      for (int i = 0; i < 20; ++i) {
        if (std::get<PingResponse>(t.request(1, 0, PingRequest{}).body).own_version == 101u) ++ok;
      }
      (void)k;
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(ok.load(), 80);
}

TEST(Tcp, VersionMismatchIsRefused) {
  TcpServer server("127.0.0.1", 0, 1, echo_version);
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", server.port()}});
  auto frame = encode({Header{}, PingRequest{}});
  frame[4] = kProtocolVersion + 1;
  const auto reply = decode(t.exchange_raw(1, frame));
  const auto& err = std::get<ErrorReply>(reply.body);
  EXPECT_EQ(err.code, static_cast<std::uint16_t>(ErrorCode::version_mismatch));
}

TEST(Tcp, HandlerFailureBecomesErrorReply) {
  TcpServer server("127.0.0.1", 0, 1, [](const Message&) -> MessageBody { throw std::runtime_error("boom"); });
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", server.port()}});
  const auto reply = t.request(0, 1, PingRequest{});
  EXPECT_EQ(std::get<ErrorReply>(reply.body).code, static_cast<std::uint16_t>(ErrorCode::internal));
}

TEST(Tcp, ClosedPortIsUnreachable) {
  std::uint16_t port;
  {
    boost::asio::io_context io;
    boost::asio::ip::tcp::acceptor a(io, {boost::asio::ip::make_address("127.0.0.1"), 0});
    port = a.local_endpoint().port();
  }
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", port}}, TcpOptions{1000ms});
  EXPECT_THROW(t.request(0, 1, PingRequest{}), PeerUnreachable);
}

TEST(Tcp, SilentPeerTimesOutWithinBudget) {
  // Accepts connections but never answers, like a hung or killed process.
  boost::asio::io_context io;
  boost::asio::ip::tcp::acceptor acceptor(io, {boost::asio::ip::make_address("127.0.0.1"), 0});
  const auto port = acceptor.local_endpoint().port();
  boost::asio::ip::tcp::socket held(io);
  std::thread accept_thread([&] {
    boost::system::error_code ec;
    acceptor.accept(held, ec);
  });

  const auto timeout = 500ms;
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", port}}, TcpOptions{timeout});
  const auto start = std::chrono::steady_clock::now();
  EXPECT_THROW(t.request(0, 1, PingRequest{}), PeerUnreachable);
  const auto elapsed = std::chrono::steady_clock::now() - start;
  EXPECT_LE(elapsed, timeout + 1s);
  EXPECT_GE(elapsed, timeout - 50ms);
  accept_thread.join();
}

TEST(Tcp, StoppedServerBecomesUnreachable) {
  auto server = std::make_unique<TcpServer>("127.0.0.1", 0, 1, echo_version);
  TcpTransport t({{0, "127.0.0.1", 1}, {1, "127.0.0.1", server->port()}}, TcpOptions{1000ms});
  EXPECT_NO_THROW(t.request(0, 1, PingRequest{}));
  server.reset();
  EXPECT_THROW(t.request(0, 1, PingRequest{}), PeerUnreachable);
}
