#pragma once

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "chv/server.hpp"

// Frame: "CHV1" | op u8 | length u32 BE | payload. Integers inside payloads are BE too.
namespace chv::netd {

enum class WireOp : std::uint8_t {
  PutMsg = 1,
  GetMsg = 2,
  SetCap = 3,
  PutResp = 129,
  GetResp = 130,
  SetCapResp = 131,
};

inline constexpr std::array<std::uint8_t, 4> kMagic{'C', 'H', 'V', '1'};
inline constexpr std::size_t kFrameHeader = 9;
inline constexpr std::uint8_t kStatusAccepted = 0;
inline constexpr std::uint8_t kStatusRejected = 1;

struct WireError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Frame {
  WireOp op{};
  Bytes payload;
  bool operator==(const Frame&) const = default;
};

inline void put_be(Bytes& out, std::uint64_t v, int n) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_be(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v = (v << 8) | p[i];
  return v;
}

inline Bytes encode_frame(const Frame& f) {
  if (f.payload.size() > 0xffffffffu) throw WireError("payload too large");
  Bytes out(kMagic.begin(), kMagic.end());
  out.push_back(static_cast<std::uint8_t>(f.op));
  put_be(out, f.payload.size(), 4);
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

// ---------------------------------------------------------------- payloads

inline void put_message(Bytes& out, const SealedMessage& m) {
  put_be(out, m.seq, 8);
  out.insert(out.end(), m.nonce.begin(), m.nonce.end());
  out.insert(out.end(), m.cipher_block.begin(), m.cipher_block.end());
}

inline SealedMessage get_message(const std::uint8_t*& p, const std::uint8_t* end, std::size_t block) {
  if (static_cast<std::size_t>(end - p) < 8 + 16 + block) throw WireError("truncated message");
  SealedMessage m;
  m.seq = get_be(p, 8);
  std::memcpy(m.nonce.data(), p + 8, 16);
  m.cipher_block.assign(p + 24, p + 24 + block);
  p += 24 + block;
  return m;
}

inline Bytes putmsg_payload(const SealedMessage& m) {
  Bytes out;
  put_message(out, m);
  return out;
}

inline SealedMessage parse_putmsg(const Bytes& payload, std::size_t block) {
  if (payload.size() != 8 + 16 + block) throw WireError("putmsg payload has wrong length");
  const std::uint8_t* p = payload.data();
  return get_message(p, p + payload.size(), block);
}

inline Bytes u64_payload(std::uint64_t v) {
  Bytes out;
  put_be(out, v, 8);
  return out;
}

inline std::uint64_t parse_u64(const Bytes& payload) {
  if (payload.size() != 8) throw WireError("expected an 8-byte payload");
  return get_be(payload.data(), 8);
}

inline Bytes response_payload(std::uint8_t status, const std::vector<SealedMessage>& msgs) {
  Bytes out{status};
  put_be(out, msgs.size(), 4);
  for (const auto& m : msgs) put_message(out, m);
  return out;
}

struct Response {
  std::uint8_t status = kStatusAccepted;
  std::vector<SealedMessage> messages;
};

inline Response parse_response(const Bytes& payload, std::size_t block) {
  if (payload.size() < 5) throw WireError("short response");
  Response r;
  r.status = payload[0];
  if (r.status > kStatusRejected) throw WireError("unknown status byte");
  auto n = get_be(payload.data() + 1, 4);
  const std::uint8_t* p = payload.data() + 5;
  const std::uint8_t* end = payload.data() + payload.size();
  for (std::uint64_t i = 0; i < n; ++i) r.messages.push_back(get_message(p, end, block));
  if (p != end) throw WireError("trailing bytes in response");
  return r;
}

// ---------------------------------------------------------------- sockets

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  static Socket connect(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
      throw std::system_error(EHOSTUNREACH, std::generic_category(), "resolve " + host + ": " + gai_strerror(rc));
    int err = 0;
    for (addrinfo* a = res; a; a = a->ai_next) {
      Socket s(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
      if (!s.valid()) {
        err = errno;
        continue;
      }
      if (::connect(s.fd(), a->ai_addr, a->ai_addrlen) == 0) {
        ::freeaddrinfo(res);
        int one = 1;
        ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        return s;
      }
      err = errno;
    }
    ::freeaddrinfo(res);
    throw std::system_error(err, std::generic_category(), "connect " + host + ":" + std::to_string(port));
  }

  void write_all(const Bytes& b) const {
    std::size_t off = 0;
    while (off < b.size()) {
      ssize_t n = ::send(fd_, b.data() + off, b.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw std::system_error(errno, std::generic_category(), "send");
      off += static_cast<std::size_t>(n);
    }
  }

  // false on orderly EOF before the first byte; throws on EOF mid-read
  bool read_exact(std::uint8_t* dst, std::size_t n) const {
    std::size_t off = 0;
    while (off < n) {
      ssize_t r = ::recv(fd_, dst + off, n - off, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw std::system_error(errno, std::generic_category(), "recv");
      if (r == 0) {
        if (off == 0) return false;
        throw WireError("connection closed mid-frame");
      }
      off += static_cast<std::size_t>(r);
    }
    return true;
  }

 private:
  int fd_ = -1;
};

// Reads one frame. nullopt on a clean close between frames; WireError on a malformed or
// truncated frame.
inline std::optional<Frame> read_frame(const Socket& s, std::size_t max_payload) {
  std::array<std::uint8_t, kFrameHeader> h{};
  if (!s.read_exact(h.data(), h.size())) return std::nullopt;
  if (!std::equal(kMagic.begin(), kMagic.end(), h.begin())) throw WireError("bad magic");
  Frame f;
  f.op = static_cast<WireOp>(h[4]);
  auto len = get_be(h.data() + 5, 4);
  if (len > max_payload) throw WireError("frame length " + std::to_string(len) + " exceeds limit");
  f.payload.resize(len);
  if (len && !s.read_exact(f.payload.data(), len)) throw WireError("connection closed mid-frame");
  return f;
}

inline void write_frame(const Socket& s, const Frame& f) { s.write_all(encode_frame(f)); }

}  // namespace chv::netd
