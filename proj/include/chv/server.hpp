#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "chv/envelope.hpp"

namespace chv {

struct Accepted {
  bool operator==(const Accepted&) const = default;
};
struct Rejected {
  std::vector<SealedMessage> messages;
  bool operator==(const Rejected&) const = default;
};
using PutResult = std::variant<Accepted, Rejected>;

// Reference relay queue. Never looks inside cipher blocks.
class ServerQueue {
 public:
  using EvictionObserver = std::function<void(const SealedMessage& evicted, const ServerQueue& q)>;

  explicit ServerQueue(std::uint64_t capacity) {
    if (capacity == 0) throw std::invalid_argument("capacity must be >= 1");
    capacity_ = capacity;
  }

  PutResult put_msg(const SealedMessage& m) {
    if (m.seq != last_seq_ + 1) return Rejected{get_msg(m.seq)};
    entries_.push_back(m);
    last_seq_ = m.seq;
    evict_to(capacity_);
    return Accepted{};
  }

  std::vector<SealedMessage> get_msg(SeqNo since) const {
    std::vector<SealedMessage> out;
    for (const auto& e : entries_)
      if (e.seq >= since) out.push_back(e);
    return out;
  }

  void set_capacity(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("capacity must be >= 1");
    capacity_ = n;
    evict_to(capacity_);
  }

  std::uint64_t capacity() const { return capacity_; }
  SeqNo last_seq() const { return last_seq_; }
  const std::deque<SealedMessage>& entries() const { return entries_; }

  void on_evict(EvictionObserver obs) { observer_ = std::move(obs); }

  // Adversary access. An honest deployment never calls these.
  std::deque<SealedMessage>& mutable_entries() { return entries_; }
  void force_last_seq(SeqNo s) { last_seq_ = s; }

 private:
  void evict_to(std::uint64_t n) {
    while (entries_.size() > n) {
      SealedMessage gone = std::move(entries_.front());
      entries_.pop_front();
      if (observer_) observer_(gone, *this);
    }
  }

  std::uint64_t capacity_ = 1;
  SeqNo last_seq_ = 0;
  std::deque<SealedMessage> entries_;
  EvictionObserver observer_;
};

}  // namespace chv
