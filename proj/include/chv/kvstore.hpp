#pragma once

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "chv/records.hpp"

namespace chv {

enum class TxStatus { Open, Pending, Committed, Aborted, Deferred };

inline const char* to_string(TxStatus s) {
  switch (s) {
    case TxStatus::Open: return "Open";
    case TxStatus::Pending: return "Pending";
    case TxStatus::Committed: return "Committed";
    case TxStatus::Aborted: return "Aborted";
    case TxStatus::Deferred: return "Deferred";
  }
  return "?";
}

class KvError : public std::runtime_error {
 public:
  enum class Kind { DuplicateKey, ArbitratorMismatch, UseAfterClose, NotArbitrator, UnknownKey };
  KvError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct KvEvent {
  enum class Kind { KeyCreated, DuplicateKey, TxCommitted, TxAborted };
  Kind kind;
  std::string key;
  TxId tx;
  bool operator==(const KvEvent&) const = default;
};

using KvMap = std::map<std::string, Value>;

struct TxHandle {
  TxId id;
};

class KVTable {
 public:
  explicit KVTable(MachineId self) : self_(self) {}

  MachineId self() const { return self_; }

  // Size limit for records this table hands to the client.
  void set_max_record_bytes(std::size_t n) { max_record_bytes_ = n; }

  // ------------------------------------------------------------ reads
  std::optional<Value> get_committed(const std::string& key) const {
    auto it = committed_.find(key);
    if (it == committed_.end()) return std::nullopt;
    return it->second;
  }

  // Committed values overlaid with this replica's undecided or not-yet-synced writes.
  // Weaker than get_committed: other replicas may never see these values.
  std::optional<Value> get_speculative(const std::string& key) const {
    KvMap m = authoritative();
    for (const auto& [id, tx] : own_)
      if (tx.status == TxStatus::Pending || tx.status == TxStatus::Deferred)
        for (const auto& w : tx.writes) m[w.key] = w.value;
    auto it = m.find(key);
    if (it == m.end()) return std::nullopt;
    return it->second;
  }

  const KvMap& committed() const { return committed_; }

  std::optional<MachineId> arbitrator_of(const std::string& key) const {
    auto it = arbitrators_.find(key);
    if (it == arbitrators_.end()) return std::nullopt;
    return it->second.first;
  }

  const std::map<std::string, std::pair<MachineId, SeqNo>>& arbitrators() const {
    return arbitrators_;
  }

  // Committed state plus this replica's own arbitration decisions not yet seen in the chain.
  KvMap authoritative() const {
    KvMap m = committed_;
    for (const auto& c : local_commits_)
      for (const auto& w : c.writes) m[w.key] = w.value;
    return m;
  }

  // ------------------------------------------------------------ keys
  std::vector<Record> create_key(const std::string& key, MachineId arbitrator) {
    if (key.size() > kMaxKeyBytes) throw std::length_error("key exceeds 64 bytes");
    if (arbitrators_.count(key) || creating_.count(key))
      throw KvError(KvError::Kind::DuplicateKey, "key already exists: " + key);
    creating_[key] = arbitrator;
    return {NewKey{key, arbitrator, 0}};
  }

  bool key_pending(const std::string& key) const { return creating_.count(key) > 0; }

  // ------------------------------------------------------------ transactions
  TxHandle start_transaction() {
    TxId id{self_, ++tx_counter_};
    OwnTx tx;
    tx.read_view = authoritative();
    own_[id] = std::move(tx);
    return {id};
  }

  void put(const TxHandle& h, const std::string& key, const Value& value) {
    auto& tx = open_tx(h);
    if (key.size() > kMaxKeyBytes) throw std::length_error("key exceeds 64 bytes");
    if (value.size() > kMaxValueBytes) throw std::length_error("value exceeds 256 bytes");
    for (auto& w : tx.writes)
      if (w.key == key) {
        w.value = value;
        return;
      }
    tx.writes.push_back({key, value});
  }

  // Read at transaction start; the value becomes part of the guard.
  std::optional<Value> read(const TxHandle& h, const std::string& key) {
    auto& tx = open_tx(h);
    tx.extra_guard.insert(key);
    auto it = tx.read_view.find(key);
    if (it == tx.read_view.end()) return std::nullopt;
    return it->second;
  }

  TxStatus status(const TxHandle& h) const {
    auto it = own_.find(h.id);
    if (it == own_.end()) throw KvError(KvError::Kind::UseAfterClose, "unknown transaction");
    return it->second.status;
  }

  // Closes the handle. Returns the records to send: a Transaction for a remote arbitrator,
  // or a Commit decided on the spot when this replica is the arbitrator.
  std::vector<Record> submit(const TxHandle& h) {
    auto& tx = open_tx(h);
    if (tx.writes.empty()) {
      tx.status = TxStatus::Committed;
      return {};
    }
    std::optional<MachineId> arb;
    for (const auto& w : tx.writes) {
      auto a = effective_arbitrator(w.key);
      if (!a) throw KvError(KvError::Kind::UnknownKey, "unknown key: " + w.key);
      if (arb && *arb != *a)
        throw KvError(KvError::Kind::ArbitratorMismatch,
                      "transaction spans arbitrators " + std::to_string(*arb) + " and " +
                          std::to_string(*a));
      arb = a;
    }
    Transaction rec{h.id, *arb, tx.writes, {}};
    std::set<std::string> guarded;
    for (const auto& w : tx.writes) guarded.insert(w.key);
    guarded.insert(tx.extra_guard.begin(), tx.extra_guard.end());
    for (const auto& k : guarded) {
      auto it = tx.read_view.find(k);
      rec.guard.push_back({k, it == tx.read_view.end() ? std::nullopt : std::optional<Value>(it->second)});
    }
    if (encoded_size(rec) > max_record_bytes_)
      throw std::length_error("transaction too large for one message");
    tx.arbitrator = *arb;

    if (*arb == self_) {
      Record decision = decide(rec);
      if (auto* c = std::get_if<Commit>(&decision)) {
        tx.status = TxStatus::Committed;
        events_.push_back({KvEvent::Kind::TxCommitted, {}, h.id});
        return {*c};
      }
      tx.status = TxStatus::Aborted;
      events_.push_back({KvEvent::Kind::TxAborted, {}, h.id});
      return {};
    }
    tx.status = TxStatus::Pending;
    return {rec};
  }

  // The arbitrator's decision for `tx` against its current authoritative state.
  Record arbitrate(const Transaction& tx) const {
    for (const auto& w : tx.writes) {
      auto a = effective_arbitrator(w.key);
      if (a != self_)
        throw KvError(KvError::Kind::NotArbitrator,
                      "machine " + std::to_string(self_) + " does not arbitrate " + w.key);
    }
    KvMap state = authoritative();
    for (const auto& g : tx.guard) {
      auto it = state.find(g.key);
      std::optional<Value> cur = it == state.end() ? std::nullopt : std::optional<Value>(it->second);
      if (cur != g.expected) return Abort{tx.id};
    }
    return Commit{tx.id, tx.writes};
  }

  // The transport failed: own transactions that never reached the chain are deferred.
  void on_network_failure() {
    for (auto& [id, tx] : own_)
      if (tx.status == TxStatus::Pending && !tx.seen_in_chain) tx.status = TxStatus::Deferred;
  }

  // ------------------------------------------------------------ chain processing
  // Applies newly validated entries in chain order. Returns decisions this replica must
  // publish as the arbitrator. `window` is the replica's current validated window.
  template <class Window>
  std::vector<Record> apply(const std::vector<ViewEntry>& delivered, const Window& window) {
    std::vector<Record> out;
    for (const auto& e : delivered)
      for (const auto& r : e.records) apply_record(e, r, out);
    infer_outcomes(window);
    return out;
  }

  std::vector<KvEvent> take_events() { return std::exchange(events_, {}); }

  std::size_t own_count() const { return own_.size(); }

  // ------------------------------------------------------------ snapshots
  Bytes snapshot() const {
    ByteWriter w;
    w.raw(std::string_view("CHVK"));
    w.u32(1);
    w.u64(self_);
    w.u64(tx_counter_);
    w.u32(static_cast<std::uint32_t>(committed_.size()));
    for (const auto& [k, v] : committed_) {
      w.short_str(k);
      w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(arbitrators_.size()));
    for (const auto& [k, v] : arbitrators_) {
      w.short_str(k);
      w.u64(v.first);
      w.u64(v.second);
    }
    w.u32(static_cast<std::uint32_t>(creating_.size()));
    for (const auto& [k, v] : creating_) {
      w.short_str(k);
      w.u64(v);
    }
    w.u32(static_cast<std::uint32_t>(local_commits_.size()));
    for (const auto& c : local_commits_) encode_record(w, c);
    w.u32(static_cast<std::uint32_t>(decided_.size()));
    for (const auto& id : decided_) {
      w.u64(id.machine);
      w.u64(id.counter);
    }
    w.u32(static_cast<std::uint32_t>(own_.size()));
    for (const auto& [id, tx] : own_) {
      w.u64(id.counter);
      w.u8(static_cast<std::uint8_t>(tx.status));
      w.u64(tx.arbitrator);
      w.u8(tx.seen_in_chain ? 1 : 0);
      w.u32(static_cast<std::uint32_t>(tx.writes.size()));
      for (const auto& wr : tx.writes) {
        w.short_str(wr.key);
        w.str(wr.value);
      }
      w.u32(static_cast<std::uint32_t>(tx.read_view.size()));
      for (const auto& [k, v] : tx.read_view) {
        w.short_str(k);
        w.str(v);
      }
      w.u32(static_cast<std::uint32_t>(tx.extra_guard.size()));
      for (const auto& k : tx.extra_guard) w.short_str(k);
    }
    return w.take();
  }

  static KVTable restore(ByteSpan blob) {
    ByteReader r(blob);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "CHVK") throw DecodeError("not a kv snapshot");
    if (r.u32() != 1) throw DecodeError("unsupported kv snapshot version");
    KVTable t(r.u64());
    t.tx_counter_ = r.u64();
    for (auto n = r.u32(); n > 0; --n) {
      auto k = r.short_str();
      t.committed_[k] = r.str();
    }
    for (auto n = r.u32(); n > 0; --n) {
      auto k = r.short_str();
      auto a = r.u64();
      t.arbitrators_[k] = {a, r.u64()};
    }
    for (auto n = r.u32(); n > 0; --n) {
      auto k = r.short_str();
      t.creating_[k] = r.u64();
    }
    for (auto n = r.u32(); n > 0; --n) t.local_commits_.push_back(std::get<Commit>(decode_record(r)));
    for (auto n = r.u32(); n > 0; --n) {
      TxId id;
      id.machine = r.u64();
      id.counter = r.u64();
      t.decided_.insert(id);
    }
    for (auto n = r.u32(); n > 0; --n) {
      TxId id{t.self_, r.u64()};
      OwnTx tx;
      tx.status = static_cast<TxStatus>(r.u8());
      tx.arbitrator = r.u64();
      tx.seen_in_chain = r.u8() != 0;
      for (auto m = r.u32(); m > 0; --m) {
        Write wr;
        wr.key = r.short_str();
        wr.value = r.str();
        tx.writes.push_back(std::move(wr));
      }
      for (auto m = r.u32(); m > 0; --m) {
        auto k = r.short_str();
        tx.read_view[k] = r.str();
      }
      for (auto m = r.u32(); m > 0; --m) tx.extra_guard.insert(r.short_str());
      t.own_[id] = std::move(tx);
    }
    if (!r.done()) throw DecodeError("trailing bytes in kv snapshot");
    return t;
  }

 private:
  struct OwnTx {
    std::vector<Write> writes;
    KvMap read_view;
    std::set<std::string> extra_guard;
    TxStatus status = TxStatus::Open;
    MachineId arbitrator = 0;
    bool seen_in_chain = false;
  };

  OwnTx& open_tx(const TxHandle& h) {
    auto it = own_.find(h.id);
    if (it == own_.end() || it->second.status != TxStatus::Open)
      throw KvError(KvError::Kind::UseAfterClose, "transaction handle is closed");
    return it->second;
  }

  std::optional<MachineId> effective_arbitrator(const std::string& key) const {
    if (auto a = arbitrator_of(key)) return a;
    if (auto it = creating_.find(key); it != creating_.end()) return it->second;
    return std::nullopt;
  }

  Record decide(const Transaction& tx) {
    Record d;
    try {
      d = arbitrate(tx);
    } catch (const KvError&) {
      d = Abort{tx.id};
    }
    decided_.insert(tx.id);
    if (auto* c = std::get_if<Commit>(&d)) local_commits_.push_back(*c);
    return d;
  }

  void finish_own(const TxId& id, bool committed) {
    auto it = own_.find(id);
    if (it == own_.end()) return;
    auto& tx = it->second;
    if (tx.status == TxStatus::Committed || tx.status == TxStatus::Aborted) return;
    tx.status = committed ? TxStatus::Committed : TxStatus::Aborted;
    events_.push_back({committed ? KvEvent::Kind::TxCommitted : KvEvent::Kind::TxAborted, {}, id});
  }

  void apply_record(const ViewEntry& e, const Record& r, std::vector<Record>& out) {
    if (auto* nk = std::get_if<NewKey>(&r)) {
      auto it = arbitrators_.find(nk->key);
      bool wins = it == arbitrators_.end() || nk->origin_seq < it->second.second;
      bool mine = e.machine == self_ && e.seq == nk->origin_seq;
      if (wins) {
        bool replaced_mine = it != arbitrators_.end() && owned_.count(nk->key);
        arbitrators_[nk->key] = {nk->arbitrator, nk->origin_seq};
        if (replaced_mine) {
          owned_.erase(nk->key);
          events_.push_back({KvEvent::Kind::DuplicateKey, nk->key, {}});
        }
      }
      if (creating_.count(nk->key) && (mine || wins)) {
        creating_.erase(nk->key);
        if (mine && wins) {
          owned_.insert(nk->key);
          events_.push_back({KvEvent::Kind::KeyCreated, nk->key, {}});
        } else {
          events_.push_back({KvEvent::Kind::DuplicateKey, nk->key, {}});
        }
      }
    } else if (auto* tx = std::get_if<Transaction>(&r)) {
      if (tx->id.machine == self_)
        if (auto it = own_.find(tx->id); it != own_.end()) {
          it->second.seen_in_chain = true;
          if (it->second.status == TxStatus::Deferred) it->second.status = TxStatus::Pending;
        }
      if (tx->arbitrator == self_ && !decided_.count(tx->id)) out.push_back(decide(*tx));
    } else if (auto* c = std::get_if<Commit>(&r)) {
      for (const auto& w : c->writes) committed_[w.key] = w.value;
      if (chain_decided_.insert(c->id).second) {
        decided_.insert(c->id);
        std::erase_if(local_commits_, [&](const Commit& lc) { return lc.id == c->id; });
        finish_own(c->id, true);
      }
    } else if (auto* a = std::get_if<Abort>(&r)) {
      if (chain_decided_.insert(a->id).second) {
        decided_.insert(a->id);
        finish_own(a->id, false);
      }
    }
  }

  template <class Window>
  void infer_outcomes(const Window& window) {
    for (auto& [id, tx] : own_) {
      if (tx.status != TxStatus::Pending || !tx.seen_in_chain) continue;
      bool present = false;
      for (const auto& e : window) {
        for (const auto& r : e.records) {
          if (auto* t = std::get_if<Transaction>(&r); t && t->id == id) present = true;
        }
        if (present) break;
      }
      // A live transaction is always refreshed; an abort outlives our next send.
      if (!present) finish_own(id, true);
    }
  }

  MachineId self_;
  std::size_t max_record_bytes_ = 0xffff;
  std::uint64_t tx_counter_ = 0;
  KvMap committed_;
  std::map<std::string, std::pair<MachineId, SeqNo>> arbitrators_;  // key -> (arbitrator, origin)
  std::map<std::string, MachineId> creating_;
  std::set<std::string> owned_;
  std::vector<Commit> local_commits_;
  std::set<TxId> decided_;
  std::set<TxId> chain_decided_;
  std::map<TxId, OwnTx> own_;
  std::vector<KvEvent> events_;
};

}  // namespace chv
