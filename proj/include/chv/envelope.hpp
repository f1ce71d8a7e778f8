#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "chv/bytes.hpp"
#include "chv/crypto.hpp"
#include "chv/records.hpp"

namespace chv {

struct SecretKeys {
  crypto::Key256 auth_key{};
  crypto::Key256 enc_key{};
  bool operator==(const SecretKeys&) const = default;
};

enum class CipherKind { Aes256Ctr, Null };

struct ChainConfig {
  std::size_t block_size = 1024;
  std::string hmac_algorithm = "HMAC-SHA-256";
  CipherKind cipher = CipherKind::Aes256Ctr;
};

// seq_e(8) machine_id(8) hmac_prev(32) record_count(2) ... hmac_cur(32)
inline constexpr std::size_t kHeaderBytes = 8 + 8 + 32 + 2;
inline constexpr std::size_t kTrailerBytes = 32;
inline constexpr std::size_t kEnvelopeOverhead = kHeaderBytes + kTrailerBytes;
// RejectedMessages: tag + len + 4 * u64
inline constexpr std::size_t kMaxControlRecordBytes = 3 + 32;
inline constexpr std::size_t kMinBlockSize = kEnvelopeOverhead + kMaxControlRecordBytes;

inline std::size_t record_capacity(const ChainConfig& cfg) {
  return cfg.block_size - kEnvelopeOverhead;
}

inline void validate(const ChainConfig& cfg) {
  if (cfg.block_size < kMinBlockSize)
    throw std::invalid_argument("block_size below minimum of " + std::to_string(kMinBlockSize));
  if (cfg.hmac_algorithm != "HMAC-SHA-256")
    throw std::invalid_argument("unsupported hmac algorithm: " + cfg.hmac_algorithm);
}

struct PlainBody {
  SeqNo seq_e = 0;
  MachineId machine_id = 0;
  Digest hmac_prev{};
  std::vector<Record> records;
  Digest hmac_cur{};
  bool operator==(const PlainBody&) const = default;
};

struct SealedMessage {
  SeqNo seq = 0;
  Nonce nonce{};
  Bytes cipher_block;
  bool operator==(const SealedMessage&) const = default;
};

class EnvelopeError : public std::runtime_error {
 public:
  enum class Kind { Overflow, NonceReuse, BadMac, SeqMismatch, MalformedBody };
  EnvelopeError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline const char* to_string(EnvelopeError::Kind k) {
  switch (k) {
    case EnvelopeError::Kind::Overflow: return "Overflow";
    case EnvelopeError::Kind::NonceReuse: return "NonceReuse";
    case EnvelopeError::Kind::BadMac: return "BadMac";
    case EnvelopeError::Kind::SeqMismatch: return "SeqMismatch";
    case EnvelopeError::Kind::MalformedBody: return "MalformedBody";
  }
  return "?";
}

inline Nonce make_nonce(MachineId id, std::uint64_t counter) {
  Nonce n{};
  for (int i = 0; i < 8; ++i) {
    n[i] = static_cast<std::uint8_t>(id >> (8 * i));
    n[8 + i] = static_cast<std::uint8_t>(counter >> (8 * i));
  }
  return n;
}

// Not thread-safe; callers serialize access.
class NonceRegistry {
 public:
  void claim(const Nonce& n) {
    if (!used_.insert(n).second) throw EnvelopeError(EnvelopeError::Kind::NonceReuse, "nonce reused");
  }
  bool contains(const Nonce& n) const { return used_.count(n) > 0; }
  std::size_t size() const { return used_.size(); }

 private:
  std::set<Nonce> used_;
};

namespace detail {

// The CTR counter block must not overlap between messages, so the IV is a hash of the
// nonce with the low 32 bits zeroed for the block counter.
inline std::array<std::uint8_t, 16> ctr_iv(const Nonce& nonce) {
  static constexpr std::string_view kLabel = "chv-ctr-iv";
  ByteWriter w;
  w.raw(kLabel);
  w.raw(ByteSpan(nonce));
  auto h = crypto::sha256(w.bytes());
  std::array<std::uint8_t, 16> iv{};
  std::copy_n(h.begin(), 12, iv.begin());
  return iv;
}

inline Bytes apply_cipher(const ChainConfig& cfg, const SecretKeys& keys, const Nonce& nonce,
                          ByteSpan in) {
  if (cfg.cipher == CipherKind::Null) return Bytes(in.begin(), in.end());
  return crypto::aes256_ctr(keys.enc_key, ctr_iv(nonce), in);
}

}  // namespace detail

// Serialized records without the envelope; size checks against record_capacity().
inline std::size_t records_size(const std::vector<Record>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n += encoded_size(r);
  return n;
}

// Plaintext block (everything, hmac_cur included) for a body; hmac_cur is recomputed.
inline Bytes serialize_body(PlainBody& body, const SecretKeys& keys, const ChainConfig& cfg) {
  if (body.records.size() > 0xffff)
    throw EnvelopeError(EnvelopeError::Kind::Overflow, "too many records");
  ByteWriter w;
  w.u64(body.seq_e);
  w.u64(body.machine_id);
  w.raw(ByteSpan(body.hmac_prev));
  w.u16(static_cast<std::uint16_t>(body.records.size()));
  for (const auto& r : body.records) encode_record(w, r);
  std::size_t mac_at = cfg.block_size - kTrailerBytes;
  if (w.size() > mac_at)
    throw EnvelopeError(EnvelopeError::Kind::Overflow,
                        "records need " + std::to_string(w.size() - kHeaderBytes) +
                            " bytes, capacity is " + std::to_string(record_capacity(cfg)));
  Bytes plain = w.take();
  plain.resize(mac_at, 0);
  body.hmac_cur = crypto::hmac_sha256(keys.auth_key, plain);
  plain.insert(plain.end(), body.hmac_cur.begin(), body.hmac_cur.end());
  return plain;
}

inline Digest compute_mac(const PlainBody& body, const SecretKeys& keys, const ChainConfig& cfg) {
  PlainBody copy = body;
  serialize_body(copy, keys, cfg);
  return copy.hmac_cur;
}

// Fills body.hmac_cur. The registry, when given, rejects a reused nonce before anything
// leaves the client.
inline SealedMessage seal(PlainBody& body, const SecretKeys& keys, SeqNo seq, const Nonce& nonce,
                          const ChainConfig& cfg = {}, NonceRegistry* registry = nullptr) {
  if (body.seq_e != seq) throw std::invalid_argument("body.seq_e must equal seq");
  Bytes plain = serialize_body(body, keys, cfg);
  if (registry) registry->claim(nonce);
  SealedMessage out;
  out.seq = seq;
  out.nonce = nonce;
  out.cipher_block = detail::apply_cipher(cfg, keys, nonce, plain);
  return out;
}

inline PlainBody open(const SealedMessage& sealed, const SecretKeys& keys,
                      const ChainConfig& cfg = {}) {
  using K = EnvelopeError::Kind;
  if (sealed.cipher_block.size() != cfg.block_size)
    throw EnvelopeError(K::MalformedBody, "cipher block has wrong length");
  Bytes plain = detail::apply_cipher(cfg, keys, sealed.nonce, sealed.cipher_block);
  std::size_t mac_at = cfg.block_size - kTrailerBytes;
  ByteSpan covered(plain.data(), mac_at);
  ByteSpan stored(plain.data() + mac_at, kTrailerBytes);
  Digest expect = crypto::hmac_sha256(keys.auth_key, covered);
  if (!crypto::equal_ct(expect, stored)) throw EnvelopeError(K::BadMac, "hmac mismatch");

  PlainBody body;
  std::copy(stored.begin(), stored.end(), body.hmac_cur.begin());
  try {
    ByteReader r(covered);
    body.seq_e = r.u64();
    if (body.seq_e != sealed.seq)
      throw EnvelopeError(K::SeqMismatch, "server seq " + std::to_string(sealed.seq) +
                                              " but body says " + std::to_string(body.seq_e));
    body.machine_id = r.u64();
    body.hmac_prev = r.fixed<32>();
    auto count = r.u16();
    body.records.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) body.records.push_back(decode_record(r));
    while (!r.done())
      if (r.u8() != 0) throw DecodeError("non-zero padding");
  } catch (const DecodeError& e) {
    throw EnvelopeError(K::MalformedBody, e.what());
  }
  return body;
}

}  // namespace chv
