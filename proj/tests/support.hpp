#pragma once

#include <cstdlib>
#include <random>
#include <string>

#include "chv/envelope.hpp"

namespace chv::testing {

inline SecretKeys keys_from_seed(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  SecretKeys k;
  for (auto& b : k.auth_key) b = static_cast<std::uint8_t>(g());
  for (auto& b : k.enc_key) b = static_cast<std::uint8_t>(g());
  return k;
}

inline std::string random_string(std::mt19937_64& g, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::string s(len(g), '\0');
  for (auto& c : s) c = static_cast<char>(g());
  return s;
}

inline Record random_record(std::mt19937_64& g) {
  std::uniform_int_distribution<int> kind(0, 6);
  auto u64 = [&] { return g() % 1000; };
  auto key = [&] { return random_string(g, 12); };
  auto val = [&] { return random_string(g, 24); };
  switch (kind(g)) {
    case 0: return NewKey{key(), u64(), u64()};
    case 1: {
      Transaction t{{u64(), u64()}, u64(), {}, {}};
      for (int i = static_cast<int>(g() % 3); i > 0; --i) t.writes.push_back({key(), val()});
      for (int i = static_cast<int>(g() % 3); i > 0; --i)
        t.guard.push_back({key(), g() % 2 ? std::optional<Value>(val()) : std::nullopt});
      return t;
    }
    case 2: {
      Commit c{{u64(), u64()}, {}};
      for (int i = static_cast<int>(g() % 3); i > 0; --i) c.writes.push_back({key(), val()});
      return c;
    }
    case 3: return Abort{{u64(), u64()}};
    case 4: return LastMessage{u64(), u64()};
    case 5: {
      SeqNo lo = u64();
      SeqNo hi = lo + g() % 5;
      return RejectedMessages{u64(), lo, hi, hi + 1 + g() % 5};
    }
    default: return QueueSize{1 + u64(), u64()};
  }
}

inline std::string testdata_dir() {
  const char* d = std::getenv("CHV_TESTDATA");
  return d ? d : CHV_SOURCE_DIR "/testdata";
}

inline std::string scenarios_dir() {
  const char* d = std::getenv("CHV_SCENARIOS");
  return d ? d : CHV_SOURCE_DIR "/scenarios";
}

}  // namespace chv::testing
