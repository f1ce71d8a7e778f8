#pragma once

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/sha.h>

#include <memory>
#include <stdexcept>

#include "chv/bytes.hpp"

// Thin wrappers over OpenSSL. Only the primitives the chain needs live here.
namespace chv::crypto {

using Key256 = std::array<std::uint8_t, 32>;

inline Digest hmac_sha256(ByteSpan key, ByteSpan data) {
  Digest out{};
  unsigned int len = 0;
  if (HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
           out.data(), &len) == nullptr ||
      len != out.size()) {
    throw std::runtime_error("HMAC-SHA-256 failed");
  }
  return out;
}

inline Digest sha256(ByteSpan data) {
  Digest out{};
  SHA256(data.data(), data.size(), out.data());
  return out;
}

inline bool equal_ct(ByteSpan a, ByteSpan b) {
  return a.size() == b.size() && CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

// AES-256-CTR; encryption and decryption are the same operation.
inline Bytes aes256_ctr(const Key256& key, const std::array<std::uint8_t, 16>& iv, ByteSpan in) {
  std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(EVP_CIPHER_CTX_new(),
                                                                      &EVP_CIPHER_CTX_free);
  if (!ctx) throw std::runtime_error("EVP_CIPHER_CTX_new failed");
  if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_ctr(), nullptr, key.data(), iv.data()) != 1)
    throw std::runtime_error("AES-256-CTR init failed");
  Bytes out(in.size());
  int len = 0;
  if (EVP_EncryptUpdate(ctx.get(), out.data(), &len, in.data(), static_cast<int>(in.size())) != 1)
    throw std::runtime_error("AES-256-CTR update failed");
  int tail = 0;
  if (EVP_EncryptFinal_ex(ctx.get(), out.data() + len, &tail) != 1)
    throw std::runtime_error("AES-256-CTR final failed");
  return out;
}

}  // namespace chv::crypto
