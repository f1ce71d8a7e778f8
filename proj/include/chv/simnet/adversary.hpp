#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "chv/simnet/config.hpp"
#include "chv/transport.hpp"

namespace chv::sim {

// The server as seen from the simulator: honest behaviour plus whatever a script changes.
// Implementations see only sealed messages and the calling client's id.
class ServerHooks {
 public:
  using StoreFn = std::function<void(std::size_t queue, const SealedMessage&)>;

  virtual ~ServerHooks() = default;

  void attach(const Time* now, StoreFn on_store) {
    now_ = now;
    on_store_ = std::move(on_store);
  }

  virtual std::vector<SealedMessage> get(MachineId c, SeqNo since) = 0;
  virtual PutResult put(MachineId c, const SealedMessage& m) = 0;  // may throw NetworkFailure
  virtual void set_capacity(MachineId c, std::uint64_t n) = 0;
  // True once the scripted misbehaviour has fully played out.
  virtual bool attack_complete() const { return true; }
  virtual ServerQueue& primary() = 0;

 protected:
  Time now() const { return now_ ? *now_ : 0; }
  void stored(std::size_t queue, const SealedMessage& m) {
    if (on_store_) on_store_(queue, m);
  }

 private:
  const Time* now_ = nullptr;
  StoreFn on_store_;
};

class HonestServer : public ServerHooks {
 public:
  explicit HonestServer(std::uint64_t cap) : q_(cap) {}

  std::vector<SealedMessage> get(MachineId, SeqNo since) override { return q_.get_msg(since); }
  PutResult put(MachineId, const SealedMessage& m) override {
    auto r = q_.put_msg(m);
    if (std::holds_alternative<Accepted>(r)) stored(0, m);
    return r;
  }
  void set_capacity(MachineId, std::uint64_t n) override { q_.set_capacity(n); }
  ServerQueue& primary() override { return q_; }

 protected:
  static std::vector<SealedMessage> filter(const std::vector<SealedMessage>& in, SeqNo since,
                                           SeqNo below = ~SeqNo{0}) {
    std::vector<SealedMessage> out;
    for (const auto& m : in)
      if (m.seq >= since && m.seq < below) out.push_back(m);
    return out;
  }
  std::vector<SealedMessage> all() const { return {q_.entries().begin(), q_.entries().end()}; }

  ServerQueue q_;
};

// Accepts X at at_seq, hides it from everyone but its sender, then accepts a second
// message Y for the same slot and serves Y to all.
class DuplicateSeqServer : public HonestServer {
 public:
  DuplicateSeqServer(std::uint64_t cap, SeqNo at) : HonestServer(cap), at_(at) {}

  std::vector<SealedMessage> get(MachineId c, SeqNo since) override {
    if (phase_ == 1 && c != owner_) return filter(all(), since, at_);
    return HonestServer::get(c, since);
  }

  PutResult put(MachineId c, const SealedMessage& m) override {
    if (phase_ == 0) {
      auto r = HonestServer::put(c, m);
      if (std::holds_alternative<Accepted>(r) && m.seq == at_) {
        owner_ = c;
        phase_ = 1;
      }
      return r;
    }
    if (phase_ == 1) {
      if (c == owner_) throw NetworkFailure("unreachable");
      if (m.seq == at_) {
        q_.mutable_entries().back() = m;
        stored(0, m);
        phase_ = 2;
        return Accepted{};
      }
      return Rejected{filter(all(), m.seq, at_)};
    }
    return HonestServer::put(c, m);
  }

  bool attack_complete() const override { return phase_ == 2; }

 private:
  SeqNo at_;
  int phase_ = 0;
  MachineId owner_ = 0;
};

// Rejects a client's message R for target_seq honestly, then later serves R at that
// slot to a third client as if it had been accepted.
class ReplayRejectedServer : public HonestServer {
 public:
  ReplayRejectedServer(std::uint64_t cap, SeqNo target) : HonestServer(cap), s_(target) {}

  std::vector<SealedMessage> get(MachineId c, SeqNo since) override {
    if (phase_ == 1 && c != owner_) return filter(all(), since, s_);
    if (phase_ == 2 && c != owner_ && c != rejected_from_) {
      auto out = filter(all(), since, s_);
      if (since <= s_) out.push_back(captured_);
      phase_ = 3;
      return out;
    }
    return HonestServer::get(c, since);
  }

  PutResult put(MachineId c, const SealedMessage& m) override {
    if (phase_ == 0) {
      auto r = HonestServer::put(c, m);
      if (std::holds_alternative<Accepted>(r) && m.seq == s_) {
        owner_ = c;
        phase_ = 1;
      }
      return r;
    }
    if (phase_ == 1) {
      if (c != owner_ && m.seq == s_) {
        captured_ = m;
        rejected_from_ = c;
        phase_ = 2;
        return HonestServer::put(c, m);  // honest rejection
      }
      throw NetworkFailure("unreachable");
    }
    if (phase_ == 2 && c != owner_ && c != rejected_from_) throw NetworkFailure("unreachable");
    return HonestServer::put(c, m);
  }

  bool attack_complete() const override { return phase_ == 3; }

 private:
  SeqNo s_;
  int phase_ = 0;
  MachineId owner_ = 0, rejected_from_ = 0;
  SealedMessage captured_;
};

// Once seq_b is stored, swaps the stored bodies of seq_a and seq_b, keeping the labels.
class SwapSeqServer : public HonestServer {
 public:
  SwapSeqServer(std::uint64_t cap, SeqNo a, SeqNo b) : HonestServer(cap), a_(a), b_(b) {}

  PutResult put(MachineId c, const SealedMessage& m) override {
    auto r = HonestServer::put(c, m);
    if (done_ || !std::holds_alternative<Accepted>(r)) return r;
    if (m.seq == a_) kept_a_ = m;  // the server keeps its own copy past eviction
    if (m.seq == b_ && kept_a_) {
      SealedMessage* pa = nullptr;
      SealedMessage* pb = nullptr;
      for (auto& e : q_.mutable_entries()) {
        if (e.seq == a_) pa = &e;
        if (e.seq == b_) pb = &e;
      }
      if (pa) {
        std::swap(pa->nonce, pb->nonce);
        std::swap(pa->cipher_block, pb->cipher_block);
      } else {
        pb->nonce = kept_a_->nonce;
        pb->cipher_block = kept_a_->cipher_block;
      }
      done_ = true;
    }
    return r;
  }

  bool attack_complete() const override { return done_; }

 private:
  SeqNo a_, b_;
  std::optional<SealedMessage> kept_a_;
  bool done_ = false;
};

// Acknowledges the message at at_seq and then forgets it.
class DropAfterAckServer : public HonestServer {
 public:
  DropAfterAckServer(std::uint64_t cap, SeqNo at) : HonestServer(cap), at_(at) {}

  PutResult put(MachineId c, const SealedMessage& m) override {
    auto r = HonestServer::put(c, m);
    if (!done_ && std::holds_alternative<Accepted>(r) && m.seq == at_) {
      q_.mutable_entries().pop_back();
      q_.force_last_seq(at_ - 1);
      done_ = true;
    }
    return r;
  }

  bool attack_complete() const override { return done_; }

 private:
  SeqNo at_;
  bool done_ = false;
};

// Freezes one client's view and drops its puts for a time window.
class WithholdServer : public HonestServer {
 public:
  WithholdServer(std::uint64_t cap, Withhold w) : HonestServer(cap), w_(w) {}

  std::vector<SealedMessage> get(MachineId c, SeqNo since) override {
    if (active(c)) return filter(all(), since, frozen_ + 1);
    return HonestServer::get(c, since);
  }
  PutResult put(MachineId c, const SealedMessage& m) override {
    if (active(c)) throw NetworkFailure("unreachable");
    return HonestServer::put(c, m);
  }
  bool attack_complete() const override { return now() >= w_.until; }

 private:
  bool active(MachineId c) {
    bool on = c == w_.client && now() >= w_.from && now() < w_.until;
    if (on && !frozen_set_) {
      frozen_ = q_.last_seq();
      frozen_set_ = true;
    }
    return on;
  }

  Withhold w_;
  SeqNo frozen_ = 0;
  bool frozen_set_ = false;
};

// Splits the queue into one copy per group at `from`; on heal every client is served
// group 0's copy.
class PartitionServer : public ServerHooks {
 public:
  PartitionServer(std::uint64_t cap, Partition p) : p_(std::move(p)) {
    queues_.emplace_back(cap);
  }

  std::vector<SealedMessage> get(MachineId c, SeqNo since) override {
    return queue_for(c).get_msg(since);
  }
  PutResult put(MachineId c, const SealedMessage& m) override {
    std::size_t idx = index_for(c);
    auto r = queues_[idx].put_msg(m);
    if (std::holds_alternative<Accepted>(r)) stored(idx, m);
    return r;
  }
  void set_capacity(MachineId c, std::uint64_t n) override { queue_for(c).set_capacity(n); }
  bool attack_complete() const override { return split_ && (!p_.heal || now() >= *p_.heal); }
  ServerQueue& primary() override { return queues_.front(); }

 private:
  std::size_t index_for(MachineId c) {
    if (!split_ && now() >= p_.from) {
      split_ = true;
      for (std::size_t g = 1; g < p_.groups.size(); ++g) queues_.push_back(queues_.front());
    }
    if (!split_ || (p_.heal && now() >= *p_.heal)) return 0;
    for (std::size_t g = 0; g < p_.groups.size(); ++g)
      for (auto m : p_.groups[g])
        if (m == c) return g;
    return 0;
  }
  ServerQueue& queue_for(MachineId c) { return queues_[index_for(c)]; }

  Partition p_;
  std::vector<ServerQueue> queues_;
  bool split_ = false;
};

inline std::unique_ptr<ServerHooks> make_server(const SimConfig& cfg) {
  return std::visit(
      [&](const auto& a) -> std::unique_ptr<ServerHooks> {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, Honest>) return std::make_unique<HonestServer>(cfg.capacity);
        if constexpr (std::is_same_v<T, DuplicateSeq>)
          return std::make_unique<DuplicateSeqServer>(cfg.capacity, a.at_seq);
        if constexpr (std::is_same_v<T, ReplayRejected>)
          return std::make_unique<ReplayRejectedServer>(cfg.capacity, a.target_seq);
        if constexpr (std::is_same_v<T, SwapSeq>)
          return std::make_unique<SwapSeqServer>(cfg.capacity, a.seq_a, a.seq_b);
        if constexpr (std::is_same_v<T, Partition>)
          return std::make_unique<PartitionServer>(cfg.capacity, a);
        if constexpr (std::is_same_v<T, DropAfterAck>)
          return std::make_unique<DropAfterAckServer>(cfg.capacity, a.at_seq);
        if constexpr (std::is_same_v<T, Withhold>) return std::make_unique<WithholdServer>(cfg.capacity, a);
        if constexpr (std::is_same_v<T, Custom>) return a.make();
        return nullptr;
      },
      cfg.adversary);
}

}  // namespace chv::sim
