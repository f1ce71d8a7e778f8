#pragma once

#include <type_traits>

#include "chv/netd/wire.hpp"
#include "chv/transport.hpp"

namespace chv::netd {

// Blocking request/response client for one connection.
class WireClient {
 public:
  WireClient(Socket s, std::size_t block_size) : s_(std::move(s)), block_(block_size) {}

  static WireClient connect(const std::string& host, std::uint16_t port, std::size_t block_size) {
    return WireClient(Socket::connect(host, port), block_size);
  }

  Response call(WireOp op, Bytes payload) {
    write_frame(s_, {op, std::move(payload)});
    auto f = read_frame(s_, kMaxResponse);
    if (!f) throw WireError("server closed the connection");
    auto expect = static_cast<WireOp>(static_cast<std::uint8_t>(op) | 0x80);
    if (f->op != expect) throw WireError("unexpected response op");
    return parse_response(f->payload, block_);
  }

  PutResult put(const SealedMessage& m) {
    auto r = call(WireOp::PutMsg, putmsg_payload(m));
    if (r.status == kStatusRejected) return Rejected{std::move(r.messages)};
    return Accepted{};
  }
  std::vector<SealedMessage> get(SeqNo since) { return call(WireOp::GetMsg, u64_payload(since)).messages; }
  void setcap(std::uint64_t n) { call(WireOp::SetCap, u64_payload(n)); }

  Socket& socket() { return s_; }

 private:
  static constexpr std::size_t kMaxResponse = 256u << 20;
  Socket s_;
  std::size_t block_;
};

// Transport over netd. A sync (begin_sync..end_sync) uses one connection; calls outside a
// sync open their own.
class TcpTransport : public Transport {
 public:
  TcpTransport(std::string host, std::uint16_t port, std::size_t block_size)
      : host_(std::move(host)), port_(port), block_(block_size) {}

  void begin_sync() override { in_sync_ = true; }
  void end_sync() override {
    in_sync_ = false;
    conn_.reset();
  }

  std::vector<SealedMessage> get_msg(SeqNo since) override {
    return guarded([&](WireClient& c) { return c.get(since); });
  }
  PutResult put_msg(const SealedMessage& m) override {
    return guarded([&](WireClient& c) { return c.put(m); });
  }
  void set_capacity(std::uint64_t n) override {
    guarded([&](WireClient& c) {
      c.setcap(n);
      return 0;
    });
  }

  std::size_t connections_opened() const { return opened_; }

 private:
  template <class F>
  std::invoke_result_t<F, WireClient&> guarded(F&& f) {
    try {
      if (!conn_) {
        conn_.emplace(WireClient::connect(host_, port_, block_));
        ++opened_;
      }
      auto r = f(*conn_);
      if (!in_sync_) conn_.reset();
      return r;
    } catch (const std::exception& e) {
      conn_.reset();
      throw NetworkFailure(e.what());
    }
  }

  std::string host_;
  std::uint16_t port_;
  std::size_t block_;
  bool in_sync_ = false;
  std::optional<WireClient> conn_;
  std::size_t opened_ = 0;
};

}  // namespace chv::netd
