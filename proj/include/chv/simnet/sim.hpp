#pragma once

#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <set>

#include "chv/replica.hpp"
#include "chv/simnet/adversary.hpp"
#include "chv/simnet/trace.hpp"

namespace chv::sim {

inline SecretKeys keys_for_seed(std::uint64_t seed) {
  std::mt19937_64 g(seed ^ 0x6b65797300000000ULL);
  SecretKeys k;
  for (auto& b : k.auth_key) b = static_cast<std::uint8_t>(g());
  for (auto& b : k.enc_key) b = static_cast<std::uint8_t>(g());
  return k;
}

class Simulator {
 public:
  explicit Simulator(SimConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed ^ 0x73696d00ULL) {
    cfg_.validate();
    keys_ = keys_for_seed(cfg_.seed);
    chain_.block_size = cfg_.block_size;
    server_ = make_server(cfg_);
    server_->attach(&now_, [this](std::size_t q, const SealedMessage& m) { on_store(q, m); });
    if (cfg_.instrument_evictions && std::holds_alternative<Honest>(cfg_.adversary))
      server_->primary().on_evict(
          [this](const SealedMessage& gone, const ServerQueue& q) { check_eviction(gone, q); });

    trace_.header = {cfg_.seed, cfg_.num_clients, cfg_.capacity, cfg_.block_size,
                     adversary_name(cfg_.adversary), keys_};
    for (MachineId id = 1; id <= cfg_.num_clients; ++id) {
      members_.push_back(id);
    }
    for (MachineId id = 1; id <= cfg_.num_clients; ++id) {
      auto& n = nodes_[id];
      n.replica.emplace(client_config(id));
      n.replica->keep_delivered(true);
      n.transport = std::make_unique<SimTransport>(*this, id);
    }
  }

  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  ClientConfig client_config(MachineId id) const {
    ClientConfig c;
    c.machine_id = id;
    c.keys = keys_;
    c.chain = chain_;
    c.initial_capacity = cfg_.capacity;
    c.known_clients = members_;
    c.seed = cfg_.seed;
    return c;
  }

  const Trace& run() {
    if (ran_) return trace_;
    ran_ = true;
    for (const auto& k : cfg_.keys) {
      auto& n = nodes_.at(k.arbitrator);
      try {
        n.replica->create_key(k.name, k.arbitrator);
      } catch (const std::exception& e) {
        emit(KvTraceEvent{0, k.arbitrator, "TxError", k.name, {}, e.what()});
      }
    }
    for (std::size_t i = 0; i < cfg_.schedule.size(); ++i) push(cfg_.schedule[i].t, Pending::Schedule, i);
    while (!agenda_.empty()) {
      auto p = agenda_.top();
      agenda_.pop();
      now_ = p.t;
      if (p.kind == Pending::Schedule)
        apply(cfg_.schedule[p.index]);
      else
        put_step(static_cast<MachineId>(p.index));
    }
    drain();
    return trace_;
  }

  const Trace& trace() const { return trace_; }
  const SimConfig& config() const { return cfg_; }
  const SecretKeys& keys() const { return keys_; }
  ServerHooks& server() { return *server_; }

  // nullptr while the client sleeps
  Replica* replica(MachineId id) {
    auto& n = nodes_.at(id);
    return n.replica ? &*n.replica : nullptr;
  }

  // A client that has never synced, built from nothing but the primary server queue.
  Replica reconstruct_fresh() const {
    auto cfg = client_config(static_cast<MachineId>(cfg_.num_clients + 1));
    const auto& q = server_->primary().entries();
    return Replica::reconstruct(cfg, {q.begin(), q.end()});
  }

  std::size_t eviction_violations() const { return trace_.count<EvictionViolation>(); }

 private:
  class SimTransport : public Transport {
   public:
    SimTransport(Simulator& s, MachineId id) : s_(s), id_(id) {}

    std::vector<SealedMessage> get_msg(SeqNo since) override {
      if (s_.nodes_.at(id_).net_down) {
        s_.emit(OpEvent{s_.now_, id_, NetOp::Get, since, "failed", 0});
        throw NetworkFailure("network down");
      }
      try {
        auto out = s_.server_->get(id_, since);
        s_.emit(OpEvent{s_.now_, id_, NetOp::Get, since, "ok", out.size()});
        return out;
      } catch (const NetworkFailure&) {
        s_.emit(OpEvent{s_.now_, id_, NetOp::Get, since, "failed", 0});
        throw;
      }
    }

    PutResult put_msg(const SealedMessage& m) override {
      s_.record_sealed(m);
      if (s_.nodes_.at(id_).net_down) {
        s_.emit(OpEvent{s_.now_, id_, NetOp::Put, m.seq, "failed", 0});
        throw NetworkFailure("network down");
      }
      try {
        auto r = s_.server_->put(id_, m);
        bool ok = std::holds_alternative<Accepted>(r);
        s_.emit(OpEvent{s_.now_, id_, NetOp::Put, m.seq, ok ? "accepted" : "rejected",
                        ok ? 0 : std::get<Rejected>(r).messages.size()});
        return r;
      } catch (const NetworkFailure&) {
        s_.emit(OpEvent{s_.now_, id_, NetOp::Put, m.seq, "failed", 0});
        throw;
      }
    }

    void set_capacity(std::uint64_t n) override {
      if (s_.nodes_.at(id_).net_down) {
        s_.emit(OpEvent{s_.now_, id_, NetOp::SetCap, n, "failed", 0});
        throw NetworkFailure("network down");
      }
      s_.server_->set_capacity(id_, n);
      s_.emit(OpEvent{s_.now_, id_, NetOp::SetCap, n, "ok", 0});
    }

   private:
    Simulator& s_;
    MachineId id_;
  };

  struct Node {
    std::optional<Replica> replica;
    Bytes sleep_blob;
    std::unique_ptr<SimTransport> transport;
    bool net_down = false;
    bool put_pending = false;
    bool detection_reported = false;
  };

  struct Pending {
    enum Kind { Schedule, PutStep };
    Time t;
    std::uint64_t order;
    Kind kind;
    std::size_t index;
    bool operator>(const Pending& o) const { return std::tie(t, order) > std::tie(o.t, o.order); }
  };

  void push(Time t, Pending::Kind k, std::size_t idx) { agenda_.push({t, order_++, k, idx}); }

  void emit(TraceEvent e) { trace_.events.push_back(std::move(e)); }

  void apply(const ScheduleEvent& e) {
    auto& n = nodes_.at(e.client);
    switch (e.op) {
      case Op::Sync:
        get_step(e.client, true);
        break;
      case Op::Tx:
        submit_tx(e);
        break;
      case Op::Sleep:
        if (n.replica) {
          n.sleep_blob = n.replica->snapshot();
          n.replica.reset();
          n.put_pending = false;
          emit(LifecycleEvent{now_, e.client, "sleep"});
        }
        break;
      case Op::Wake:
        wake(e.client);
        break;
      case Op::NetDown:
        n.net_down = true;
        emit(LifecycleEvent{now_, e.client, "net_down"});
        break;
      case Op::NetUp:
        n.net_down = false;
        emit(LifecycleEvent{now_, e.client, "net_up"});
        break;
    }
  }

  void wake(MachineId id) {
    auto& n = nodes_.at(id);
    if (n.replica) return;
    n.replica.emplace(Replica::restore(client_config(id), ByteSpan(n.sleep_blob)));
    n.replica->keep_delivered(true);
    emit(LifecycleEvent{now_, id, "wake"});
  }

  void submit_tx(const ScheduleEvent& e) {
    auto& n = nodes_.at(e.client);
    if (!n.replica) {
      emit(KvTraceEvent{now_, e.client, "TxError", {}, {}, "client asleep"});
      return;
    }
    auto& r = *n.replica;
    TxHandle h = r.start_transaction();
    try {
      for (const auto& [k, v] : e.writes) r.put(h, k, v);
      auto st = r.submit(h);
      emit(KvTraceEvent{now_, e.client, "TxSubmitted", {}, h.id, to_string(st)});
    } catch (const std::exception& ex) {
      emit(KvTraceEvent{now_, e.client, "TxError", {}, h.id, ex.what()});
    }
    collect(e.client);
  }

  void get_step(MachineId id, bool delayed_put) {
    auto& n = nodes_.at(id);
    if (!n.replica || n.put_pending) {
      emit(LifecycleEvent{now_, id, "skipped_sync"});
      return;
    }
    auto& r = *n.replica;
    n.transport->begin_sync();
    auto f = r.fetch(*n.transport);
    collect(id);
    if (f.network_failure || f.detection) {
      n.transport->end_sync();
      return;
    }
    Time d = delayed_put && cfg_.max_put_delay > 0
                 ? std::uniform_int_distribution<Time>(0, cfg_.max_put_delay)(rng_)
                 : 0;
    if (d == 0 && !delayed_put) {
      n.put_pending = true;
      put_step(id);
      return;
    }
    n.put_pending = true;
    push(now_ + d, Pending::PutStep, id);
  }

  void put_step(MachineId id) {
    auto& n = nodes_.at(id);
    if (!n.put_pending) return;  // cancelled by sleep
    n.put_pending = false;
    if (!n.replica) return;
    n.replica->send(*n.transport);
    n.transport->end_sync();
    collect(id);
  }

  void drain() {
    ++now_;
    for (auto& [id, n] : nodes_) {
      if (n.net_down) {
        n.net_down = false;
        emit(LifecycleEvent{now_, id, "net_up"});
      }
      if (!n.replica) wake(id);
    }
    unsigned extra = 0;
    for (unsigned round = 0; round < cfg_.max_drain_rounds; ++round) {
      if (server_->attack_complete()) {
        if (extra >= cfg_.drain_rounds) break;
        ++extra;
      }
      bool any = false;
      for (auto& [id, n] : nodes_) {
        if (n.replica->client().halted()) continue;
        any = true;
        ++now_;
        get_step(id, false);
      }
      if (!any) break;
    }
  }

  void collect(MachineId id) {
    auto& n = nodes_.at(id);
    if (!n.replica) return;
    auto& r = *n.replica;
    auto delivered = r.take_delivered();
    bool gap = r.client().gap_since_last_take();
    r.client().clear_gap_flag();
    for (std::size_t i = 0; i < delivered.size(); ++i) {
      const auto& e = delivered[i];
      emit(AcceptEvent{now_, id, e.seq, e.machine, e.hmac_prev, e.hmac_cur, gap && i == 0,
                       r.client().capacity()});
    }
    for (const auto& ev : r.kv().take_events()) {
      const char* what = ev.kind == KvEvent::Kind::KeyCreated     ? "KeyCreated"
                         : ev.kind == KvEvent::Kind::DuplicateKey ? "DuplicateKey"
                         : ev.kind == KvEvent::Kind::TxCommitted  ? "TxCommitted"
                                                                  : "TxAborted";
      emit(KvTraceEvent{now_, id, what, ev.key, ev.tx, {}});
    }
    if (r.client().detection() && !n.detection_reported) {
      n.detection_reported = true;
      emit(DetectEvent{now_, id, *r.client().detection()});
    }
  }

  const ViewEntry* decrypt(const SealedMessage& m) {
    auto key = std::make_pair(m.seq, m.nonce);
    auto it = opened_.find(key);
    if (it != opened_.end()) return &it->second;
    try {
      auto b = open(m, keys_, chain_);
      auto& slot = opened_[key];
      slot = ViewEntry{b.seq_e, b.machine_id, b.hmac_prev, b.hmac_cur, std::move(b.records)};
      return &slot;
    } catch (const EnvelopeError&) {
      return nullptr;
    }
  }

  void record_sealed(const SealedMessage& m) {
    const ViewEntry* e = decrypt(m);
    if (!e || !universe_.insert(e->hmac_cur).second) return;
    SealedEvent s{e->seq, e->machine, e->hmac_prev, e->hmac_cur, m.nonce, {}};
    if (cfg_.record_ciphertexts) s.cipher = m.cipher_block;
    emit(std::move(s));
  }

  void on_store(std::size_t q, const SealedMessage& m) {
    const ViewEntry* e = decrypt(m);
    Digest h = e ? e->hmac_cur : Digest{};
    if (e) {
      auto& ls = global_last_sent_[e->machine];
      ls = std::max(ls, e->seq);
    }
    emit(ServerAcceptEvent{now_, q, m.seq, h});
  }

  // Instrumented honest server: nothing live may leave the queue, and every machine that
  // ever sent must keep evidence in it.
  void check_eviction(const SealedMessage& gone, const ServerQueue& q) {
    QueueView v;
    v.capacity = q.capacity();
    const ViewEntry* ge = decrypt(gone);
    if (!ge) return;
    v.entries.push_back(*ge);
    std::map<MachineId, SeqNo> last_sent;
    for (auto id : members_) last_sent[id] = 0;
    for (const auto& [id, s] : global_last_sent_) last_sent[id] = std::max(last_sent[id], s);
    for (const auto& m : q.entries()) {
      const ViewEntry* e = decrypt(m);
      if (!e) return;
      v.entries.push_back(*e);
      last_sent[e->machine] = std::max(last_sent[e->machine], e->seq);
    }
    LivenessIndex idx(v, last_sent);
    for (std::size_t i = 0; i < ge->records.size(); ++i)
      if (!idx.is_dead(ge->records[i], {ge->seq, i}))
        emit(EvictionViolation{now_, ge->seq,
                               std::string("live ") + tag_name(tag_of(ge->records[i])) +
                                   " record evicted"});
    std::map<MachineId, SeqNo> evidence;
    for (std::size_t k = 1; k < v.entries.size(); ++k) {
      const auto& e = v.entries[k];
      evidence[e.machine] = std::max(evidence[e.machine], e.seq);
      for (const auto& r : e.records)
        if (auto* lm = std::get_if<LastMessage>(&r))
          evidence[lm->id] = std::max(evidence[lm->id], lm->seq);
    }
    for (const auto& [id, s] : last_sent)
      if (s > 0 && evidence[id] < s)
        emit(EvictionViolation{now_, ge->seq,
                               "machine " + std::to_string(id) + " lost its last-message evidence"});
  }

  SimConfig cfg_;
  SecretKeys keys_;
  ChainConfig chain_;
  std::mt19937_64 rng_;
  std::unique_ptr<ServerHooks> server_;
  std::vector<MachineId> members_;
  std::map<MachineId, Node> nodes_;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<>> agenda_;
  std::uint64_t order_ = 0;
  Time now_ = 0;
  bool ran_ = false;
  Trace trace_;
  std::set<Digest> universe_;
  std::map<std::pair<SeqNo, Nonce>, ViewEntry> opened_;
  std::map<MachineId, SeqNo> global_last_sent_;
};

inline Trace run(const SimConfig& cfg) {
  Simulator s(cfg);
  return s.run();
}

}  // namespace chv::sim
