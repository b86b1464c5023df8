#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bt {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension or layout disagreement between weights, inputs and specs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller handed an argument outside an operation's domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Wire-level violation: unknown tag, version mismatch, malformed payload,
/// or an Error frame returned by a peer.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// The byte buffer ends before the frame it announces.
class IncompleteFrame : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

/// Length prefix exceeds the configured maximum frame size.
class OversizeFrame : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

/// A peer could not be reached (connect failure, timeout, injected fault).
class PeerUnreachable : public Error {
 public:
  PeerUnreachable(std::size_t peer, const std::string& why)
      : Error("peer " + std::to_string(peer) + " unreachable: " + why), peer_(peer) {}

  std::size_t peer() const noexcept { return peer_; }

 private:
  std::size_t peer_;
};

}  // namespace bt
