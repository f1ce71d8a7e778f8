#pragma once

#include <optional>
#include <string>
#include <vector>

#include "chv/client.hpp"
#include "chv/kvstore.hpp"

namespace chv {

// A client engine plus its key-value table. All chain traffic flows through sync().
class Replica {
 public:
  explicit Replica(ClientConfig cfg) : client_(std::move(cfg)), kv_(client_.id()) {
    kv_.set_max_record_bytes(client_.max_payload_record());
  }
  Replica(Client c, KVTable kv) : client_(std::move(c)), kv_(std::move(kv)) {
    kv_.set_max_record_bytes(client_.max_payload_record());
  }

  Client& client() { return client_; }
  const Client& client() const { return client_; }
  KVTable& kv() { return kv_; }
  const KVTable& kv() const { return kv_; }
  MachineId id() const { return client_.id(); }

  // Receive half of a sync; arbitration decisions are queued for the send half.
  FetchOutcome fetch(Transport& t) {
    auto f = client_.fetch(t);
    pump();
    if (f.network_failure) kv_.on_network_failure();
    return f;
  }

  SendOutcome send(Transport& t) {
    auto s = client_.send_once(t);
    pump();
    if (std::holds_alternative<DeferredNetworkFailure>(s)) kv_.on_network_failure();
    return s;
  }

  SyncReport sync(Transport& t) {
    SyncReport rep;
    t.begin_sync();
    rep.fetch = fetch(t);
    if (!rep.fetch.network_failure && !rep.fetch.detection) rep.send = send(t);
    t.end_sync();
    return rep;
  }

  // Feeds a batch (for example a full server queue) through validation and the KV layer.
  ProcessResult ingest(const std::vector<SealedMessage>& batch) {
    auto r = client_.process_updates(batch);
    pump();
    return r;
  }

  void create_key(const std::string& key, MachineId arbitrator) {
    for (auto& r : kv_.create_key(key, arbitrator)) client_.enqueue(std::move(r));
  }

  TxHandle start_transaction() { return kv_.start_transaction(); }
  void put(const TxHandle& h, const std::string& key, const Value& v) { kv_.put(h, key, v); }
  std::optional<Value> read(const TxHandle& h, const std::string& key) { return kv_.read(h, key); }

  // Closes the handle and queues its records; no network traffic.
  TxStatus submit(const TxHandle& h) {
    auto recs = kv_.submit(h);
    for (auto& r : recs) client_.enqueue(std::move(r));
    return kv_.status(h);
  }

  // submit() followed by one sync. A remote arbitrator decides later, so the usual result
  // is Pending; Deferred when the network is unreachable.
  TxStatus commit_transaction(const TxHandle& h, Transport& t) {
    submit(h);
    sync(t);
    return kv_.status(h);
  }

  TxStatus status(const TxHandle& h) const { return kv_.status(h); }

  std::optional<Value> get_committed(const std::string& key) const { return kv_.get_committed(key); }
  std::optional<Value> get_speculative(const std::string& key) const {
    return kv_.get_speculative(key);
  }

  Bytes snapshot() const {
    ByteWriter w;
    auto c = client_.snapshot();
    auto k = kv_.snapshot();
    w.u32(static_cast<std::uint32_t>(c.size()));
    w.raw(ByteSpan(c));
    w.u32(static_cast<std::uint32_t>(k.size()));
    w.raw(ByteSpan(k));
    return w.take();
  }

  static Replica restore(ClientConfig cfg, ByteSpan blob) {
    ByteReader r(blob);
    auto c = r.raw(r.u32());
    auto k = r.raw(r.u32());
    if (!r.done()) throw DecodeError("trailing bytes in replica snapshot");
    return Replica(Client::restore(std::move(cfg), c), KVTable::restore(k));
  }

  // Builds a replica from nothing but a server queue.
  // Chain entries handed to the KV layer since the last call, in chain order.
  std::vector<ViewEntry> take_delivered() { return std::exchange(delivered_log_, {}); }
  void keep_delivered(bool on) { keep_delivered_ = on; }

  static Replica reconstruct(ClientConfig cfg, const std::vector<SealedMessage>& full_window) {
    Replica r(std::move(cfg));
    auto res = r.ingest(full_window);
    if (res.detection) throw DetectionError(*res.detection);
    return r;
  }

 private:
  void pump() {
    auto delivered = client_.take_delivered();
    if (delivered.empty()) return;
    for (auto& r : kv_.apply(delivered, client_.window())) client_.enqueue(std::move(r));
    if (keep_delivered_)
      delivered_log_.insert(delivered_log_.end(), std::make_move_iterator(delivered.begin()),
                            std::make_move_iterator(delivered.end()));
  }

  Client client_;
  KVTable kv_;
  bool keep_delivered_ = false;
  std::vector<ViewEntry> delivered_log_;
};

// Canonical byte form of a committed map, used for exact snapshot comparisons.
inline Bytes canonical_bytes(const KvMap& m) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, v] : m) {
    w.short_str(k);
    w.str(v);
  }
  return w.take();
}

}  // namespace chv
