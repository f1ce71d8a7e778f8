#pragma once

#include <arpa/inet.h>

#include <atomic>
#include <list>
#include <memory>
#include <mutex>
#include <spdlog/spdlog.h>
#include <thread>

#include "chv/netd/wire.hpp"

namespace chv::netd {

struct DaemonConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::uint64_t capacity = 8;
  std::size_t block_size = 1024;
  bool log_frames = false;  // keep raw request frames per session
};

struct SessionLog {
  std::uint64_t id = 0;
  std::vector<Bytes> frames;  // complete request frames, header included
};

// TCP relay. One thread per connection; queue operations are serialized by one mutex, so
// the queue's history is the order in which handlers took that lock.
class Daemon {
 public:
  explicit Daemon(DaemonConfig cfg) : cfg_(std::move(cfg)), q_(cfg_.capacity) {
    if (cfg_.block_size < kMinBlockSize) throw std::invalid_argument("block_size too small");
  }
  Daemon(const Daemon&) = delete;
  Daemon& operator=(const Daemon&) = delete;
  ~Daemon() { stop(); }

  void start() {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(cfg_.port);
    if (::inet_pton(AF_INET, cfg_.host.c_str(), &addr.sin_addr) != 1)
      throw std::system_error(EINVAL, std::generic_category(), "bad bind address " + cfg_.host);
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw std::system_error(errno, std::generic_category(), "socket");
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw std::system_error(errno, std::generic_category(),
                              "bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    if (::listen(s.fd(), 64) != 0) throw std::system_error(errno, std::generic_category(), "listen");
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    listener_ = std::move(s);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    spdlog::info("netd listening on {}:{} capacity={} block_size={}", cfg_.host, port_, cfg_.capacity,
                 cfg_.block_size);
  }

  void stop() {
    if (!running_.exchange(false)) return;
    listener_.shutdown();
    if (acceptor_.joinable()) acceptor_.join();
    listener_.close();
    std::list<Conn> conns;
    {
      std::lock_guard lk(conns_mu_);
      conns.swap(conns_);
    }
    for (auto& c : conns) c.sock->shutdown();
    for (auto& c : conns)
      if (c.thread.joinable()) c.thread.join();
  }

  // Blocks until stop() is called from another thread.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

  std::uint16_t port() const { return port_; }
  const DaemonConfig& config() const { return cfg_; }

  std::vector<SessionLog> sessions() const {
    std::lock_guard lk(log_mu_);
    return logs_;
  }

  // Copy of the queue state, taken under the queue lock.
  std::pair<std::vector<SealedMessage>, SeqNo> queue_state() const {
    std::lock_guard lk(q_mu_);
    return {{q_.entries().begin(), q_.entries().end()}, q_.last_seq()};
  }
  std::uint64_t capacity() const {
    std::lock_guard lk(q_mu_);
    return q_.capacity();
  }

 private:
  struct Conn {
    std::shared_ptr<Socket> sock;
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  void accept_loop() {
    while (running_) {
      int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR || errno == ECONNABORTED) continue;
        break;
      }
      auto sock = std::make_shared<Socket>(fd);
      auto done = std::make_shared<std::atomic<bool>>(false);
      std::uint64_t id = next_session_++;
      std::lock_guard lk(conns_mu_);
      reap();
      if (!running_) break;
      conns_.push_back({sock, std::thread([this, sock, done, id] {
                          serve_connection(*sock, id);
                          sock->close();
                          *done = true;
                        }),
                        done});
    }
  }

  void reap() {
    for (auto it = conns_.begin(); it != conns_.end();) {
      if (*it->done) {
        it->thread.join();
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void serve_connection(const Socket& s, std::uint64_t id) {
    const std::size_t max_payload = 8 + 16 + cfg_.block_size;
    std::size_t log_index = 0;
    if (cfg_.log_frames) {
      std::lock_guard lk(log_mu_);
      log_index = logs_.size();
      logs_.push_back({id, {}});
    }
    try {
      while (auto f = read_frame(s, max_payload)) {
        if (cfg_.log_frames) {
          std::lock_guard lk(log_mu_);
          logs_[log_index].frames.push_back(encode_frame(*f));
        }
        write_frame(s, handle(*f));
      }
    } catch (const std::exception& e) {
      // nothing was applied for the frame that failed
      spdlog::debug("session {} closed: {}", id, e.what());
    }
  }

  Frame handle(const Frame& f) {
    switch (f.op) {
      case WireOp::PutMsg: {
        auto m = parse_putmsg(f.payload, cfg_.block_size);
        std::lock_guard lk(q_mu_);
        auto r = q_.put_msg(m);
        if (auto* rej = std::get_if<Rejected>(&r)) {
          spdlog::debug("putmsg seq={} rejected, returning {}", m.seq, rej->messages.size());
          return {WireOp::PutResp, response_payload(kStatusRejected, rej->messages)};
        }
        spdlog::debug("putmsg seq={} accepted", m.seq);
        return {WireOp::PutResp, response_payload(kStatusAccepted, {})};
      }
      case WireOp::GetMsg: {
        auto since = parse_u64(f.payload);
        std::lock_guard lk(q_mu_);
        return {WireOp::GetResp, response_payload(kStatusAccepted, q_.get_msg(since))};
      }
      case WireOp::SetCap: {
        auto n = parse_u64(f.payload);
        if (n == 0) throw WireError("setcap 0");
        std::lock_guard lk(q_mu_);
        q_.set_capacity(n);
        spdlog::debug("setcap {}", n);
        return {WireOp::SetCapResp, response_payload(kStatusAccepted, {})};
      }
      default:
        throw WireError("unknown op " + std::to_string(static_cast<int>(f.op)));
    }
  }

  DaemonConfig cfg_;
  mutable std::mutex q_mu_;
  ServerQueue q_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex conns_mu_;
  std::list<Conn> conns_;
  std::atomic<std::uint64_t> next_session_{1};
  mutable std::mutex log_mu_;
  std::vector<SessionLog> logs_;
};

}  // namespace chv::netd
