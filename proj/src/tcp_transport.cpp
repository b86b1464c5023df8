#include "braintorrent/tcp_transport.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <thread>
#include <utility>

#include <boost/asio.hpp>
#include <nlohmann/json.hpp>

#include "braintorrent/bytes.hpp"
#include "braintorrent/errors.hpp"

namespace bt {

namespace asio = boost::asio;
using asio::ip::tcp;

PeerAddress PeerAddress::parse(ClientIndex index, const std::string& endpoint) {
  const auto colon = endpoint.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size()) {
    throw InvalidArgument("peer endpoint must look like host:port, got '" + endpoint + "'");
  }
  const std::string port_text = endpoint.substr(colon + 1);
  if (!std::all_of(port_text.begin(), port_text.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
      port_text.size() > 5) {
    throw InvalidArgument("bad port in endpoint '" + endpoint + "'");
  }
  const unsigned long port = std::stoul(port_text);
  if (port == 0 || port > 65535) throw InvalidArgument("bad port in endpoint '" + endpoint + "'");
  return {index, endpoint.substr(0, colon), static_cast<std::uint16_t>(port)};
}

std::vector<PeerAddress> load_peer_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open peer table " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("peer table " + path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw InvalidArgument("peer table must be a JSON array");
  std::vector<PeerAddress> peers;
  for (const auto& entry : doc) {
    if (!entry.is_object() || !entry.contains("client_index") || !entry.contains("endpoint") || entry.size() != 2) {
      throw InvalidArgument("peer table entries need exactly client_index and endpoint");
    }
    peers.push_back(PeerAddress::parse(entry.at("client_index").get<ClientIndex>(), entry.at("endpoint").get<std::string>()));
  }
  std::sort(peers.begin(), peers.end(), [](const auto& a, const auto& b) { return a.client_index < b.client_index; });
  for (std::size_t i = 0; i < peers.size(); ++i) {
    if (peers[i].client_index != i) throw InvalidArgument("peer table client indices must be exactly 0..N-1");
  }
  return peers;
}

void save_peer_table(const std::filesystem::path& path, const std::vector<PeerAddress>& peers) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& p : peers) doc.push_back({{"client_index", p.client_index}, {"endpoint", p.endpoint()}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write peer table " + path.string());
  out << doc.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Server

struct TcpServer::Impl {
  asio::io_context io;
  tcp::acceptor acceptor{io};
  ClientIndex self = 0;
  RequestHandler handler;
  TcpOptions options;
  std::vector<std::thread> threads;
  std::once_flag stop_once;

  void accept_next();
};

namespace {

class Session : public std::enable_shared_from_this<Session> {
 public:
  Session(tcp::socket socket, ClientIndex self, const RequestHandler& handler, std::size_t max_frame)
      : socket_(std::move(socket)), self_(self), handler_(handler), max_frame_(max_frame) {}

  void start() { read_prefix(); }

 private:
  void read_prefix() {
    auto self = shared_from_this();
    asio::async_read(socket_, asio::buffer(prefix_), [self](boost::system::error_code ec, std::size_t) {
      if (ec) return;
      std::size_t length = 0;
      try {
        length = *peek_body_length(self->prefix_, self->max_frame_);
      } catch (const OversizeFrame& e) {
        self->reply_error(ErrorCode::malformed_request, e.what(), 0);
        return;
      }
      self->frame_.assign(self->prefix_.begin(), self->prefix_.end());
      self->frame_.resize(kLengthPrefixBytes + length);
      asio::async_read(self->socket_, asio::buffer(self->frame_.data() + kLengthPrefixBytes, length),
                       [self](boost::system::error_code ec2, std::size_t) {
                         if (!ec2) self->handle_frame();
                       });
    });
  }

  void handle_frame() {
    std::uint64_t request_id = 0;
    if (frame_.size() >= kLengthPrefixBytes + kHeaderBytes) {
      ByteReader r(std::span<const std::uint8_t>(frame_).subspan(kLengthPrefixBytes + 3, 8));
      request_id = r.u64();
    }
    if (frame_.size() > kLengthPrefixBytes && frame_[kLengthPrefixBytes] != kProtocolVersion) {
      reply_error(ErrorCode::version_mismatch,
                  "protocol version " + std::to_string(frame_[kLengthPrefixBytes]) + " not supported, expected " +
                      std::to_string(kProtocolVersion),
                  request_id);
      return;
    }
    Message request;
    try {
      request = decode(frame_, max_frame_);
    } catch (const Error& e) {
      reply_error(ErrorCode::malformed_request, e.what(), request_id);
      return;
    }
    Message reply{Header{kProtocolVersion, static_cast<std::uint16_t>(self_), request.header.request_id}, ErrorReply{}};
    try {
      reply.body = handler_(request);
    } catch (const std::exception& e) {
      reply.body = ErrorReply{static_cast<std::uint16_t>(ErrorCode::internal), e.what()};
    }
    send(encode(reply), true);
  }

  void reply_error(ErrorCode code, const std::string& text, std::uint64_t request_id) {
    const Message reply{Header{kProtocolVersion, static_cast<std::uint16_t>(self_), request_id},
                        ErrorReply{static_cast<std::uint16_t>(code), text}};
    send(encode(reply), false);
  }

  void send(std::vector<std::uint8_t> bytes, bool keep_open) {
    out_ = std::move(bytes);
    auto self = shared_from_this();
    asio::async_write(socket_, asio::buffer(out_), [self, keep_open](boost::system::error_code ec, std::size_t) {
      if (ec) return;
      if (keep_open) {
        self->read_prefix();
      } else {
        boost::system::error_code ignored;
        self->socket_.shutdown(tcp::socket::shutdown_both, ignored);
        self->socket_.close(ignored);
      }
    });
  }

  tcp::socket socket_;
  ClientIndex self_;
  const RequestHandler& handler_;
  std::size_t max_frame_;
  std::array<std::uint8_t, kLengthPrefixBytes> prefix_{};
  std::vector<std::uint8_t> frame_;
  std::vector<std::uint8_t> out_;
};

}  // namespace

void TcpServer::Impl::accept_next() {
  acceptor.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec == asio::error::operation_aborted) return;
    } else {
      std::make_shared<Session>(std::move(socket), self, handler, options.max_frame_bytes)->start();
    }
    accept_next();
  });
}

TcpServer::TcpServer(const std::string& host, std::uint16_t port, ClientIndex self, RequestHandler handler,
                     TcpOptions options, std::size_t threads)
    : impl_(std::make_unique<Impl>()) {
  impl_->self = self;
  impl_->handler = std::move(handler);
  impl_->options = options;
  try {
    tcp::resolver resolver(impl_->io);
    const auto endpoints = resolver.resolve(host, std::to_string(port));
    const tcp::endpoint ep = *endpoints.begin();
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(tcp::acceptor::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
  } catch (const boost::system::system_error& e) {
    throw Error("cannot listen on " + host + ":" + std::to_string(port) + ": " + e.what());
  }
  impl_->accept_next();
  for (std::size_t t = 0; t < std::max<std::size_t>(threads, 1); ++t) {
    impl_->threads.emplace_back([impl = impl_.get()] { impl->io.run(); });
  }
}

TcpServer::~TcpServer() { stop(); }

std::uint16_t TcpServer::port() const noexcept {
  boost::system::error_code ec;
  const auto ep = impl_->acceptor.local_endpoint(ec);
  return ec ? 0 : ep.port();
}

void TcpServer::stop() {
  std::call_once(impl_->stop_once, [this] {
    asio::post(impl_->io, [impl = impl_.get()] {
      boost::system::error_code ignored;
      impl->acceptor.close(ignored);
    });
    impl_->io.stop();
    for (auto& t : impl_->threads) {
      if (t.joinable()) t.join();
    }
  });
}

// ---------------------------------------------------------------------------
// Client

TcpTransport::TcpTransport(std::vector<PeerAddress> peers, TcpOptions options)
    : peers_(std::move(peers)), options_(options) {
  for (std::size_t i = 0; i < peers_.size(); ++i) {
    if (peers_[i].client_index != i) throw InvalidArgument("tcp transport: peer table must be ordered 0..N-1");
  }
}

std::vector<std::uint8_t> TcpTransport::exchange_raw(ClientIndex to, const std::vector<std::uint8_t>& frame) {
  if (to >= peers_.size()) throw InvalidArgument("tcp transport: no peer " + std::to_string(to));
  const PeerAddress& peer = peers_[to];

  asio::io_context io;
  tcp::socket socket(io);
  std::array<std::uint8_t, kLengthPrefixBytes> prefix{};
  std::vector<std::uint8_t> reply;
  boost::system::error_code failure;
  bool done = false;

  tcp::resolver::results_type endpoints;
  try {
    tcp::resolver resolver(io);
    endpoints = resolver.resolve(peer.host, std::to_string(peer.port));
  } catch (const boost::system::system_error& e) {
    throw PeerUnreachable(to, std::string("resolve failed: ") + e.what());
  }

  std::exception_ptr oversize;
  asio::async_connect(socket, endpoints, [&](boost::system::error_code ec, const tcp::endpoint&) {
    if (ec) {
      failure = ec;
      return;
    }
    asio::async_write(socket, asio::buffer(frame), [&](boost::system::error_code ec2, std::size_t) {
      if (ec2) {
        failure = ec2;
        return;
      }
      asio::async_read(socket, asio::buffer(prefix), [&](boost::system::error_code ec3, std::size_t) {
        if (ec3) {
          failure = ec3;
          return;
        }
        std::size_t length = 0;
        try {
          length = *peek_body_length(prefix, options_.max_frame_bytes);
        } catch (...) {
          oversize = std::current_exception();
          return;
        }
        reply.assign(prefix.begin(), prefix.end());
        reply.resize(kLengthPrefixBytes + length);
        asio::async_read(socket, asio::buffer(reply.data() + kLengthPrefixBytes, length),
                         [&](boost::system::error_code ec4, std::size_t) {
                           failure = ec4;
                           done = !ec4;
                         });
      });
    });
  });

  io.run_for(options_.timeout);
  boost::system::error_code ignored;
  socket.close(ignored);
  if (oversize) std::rethrow_exception(oversize);
  if (failure) throw PeerUnreachable(to, failure.message());
  if (!done) throw PeerUnreachable(to, "timed out after " + std::to_string(options_.timeout.count()) + " ms");
  bytes_received_ += reply.size();
  return reply;
}

Message TcpTransport::request(ClientIndex from, ClientIndex to, MessageBody body) {
  const Message req{Header{kProtocolVersion, static_cast<std::uint16_t>(from), ++next_request_id_}, std::move(body)};
  const auto reply_bytes = exchange_raw(to, encode(req));
  Message reply = decode(reply_bytes, options_.max_frame_bytes);
  if (const auto* err = std::get_if<ErrorReply>(&reply.body);
      err && err->code == static_cast<std::uint16_t>(ErrorCode::version_mismatch)) {
    throw ProtocolError("peer " + std::to_string(to) + " refused connection: " + err->text);
  }
  if (reply.header.request_id != req.header.request_id) {
    throw ProtocolError("reply request_id " + std::to_string(reply.header.request_id) + " does not match " +
                        std::to_string(req.header.request_id));
  }
  return reply;
}

}  // namespace bt
