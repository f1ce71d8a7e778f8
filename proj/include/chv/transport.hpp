#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "chv/server.hpp"

namespace chv {

struct NetworkFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// What a client sees of the relay. Implementations throw NetworkFailure when the
// request could not be completed; the client cannot tell whether it reached the server.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void begin_sync() {}
  virtual void end_sync() {}
  virtual std::vector<SealedMessage> get_msg(SeqNo since) = 0;
  virtual PutResult put_msg(const SealedMessage& m) = 0;
  virtual void set_capacity(std::uint64_t n) = 0;
};

enum class TransportOp { Get, Put, SetCap };

struct TransportLogEntry {
  TransportOp op;
  std::size_t payload_bytes = 0;
};

// In-process transport over a ServerQueue, logging the request pattern.
class LocalTransport : public Transport {
 public:
  explicit LocalTransport(ServerQueue& q) : q_(q) {}

  std::vector<SealedMessage> get_msg(SeqNo since) override {
    log_.push_back({TransportOp::Get, 8});
    return q_.get_msg(since);
  }
  PutResult put_msg(const SealedMessage& m) override {
    log_.push_back({TransportOp::Put, 8 + m.nonce.size() + m.cipher_block.size()});
    return q_.put_msg(m);
  }
  void set_capacity(std::uint64_t n) override {
    log_.push_back({TransportOp::SetCap, 8});
    q_.set_capacity(n);
  }

  const std::vector<TransportLogEntry>& log() const { return log_; }

 private:
  ServerQueue& q_;
  std::vector<TransportLogEntry> log_;
};

}  // namespace chv
