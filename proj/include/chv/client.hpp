#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "chv/envelope.hpp"
#include "chv/records.hpp"
#include "chv/transport.hpp"

namespace chv {

enum class DetectionKind {
  ChainIntegrity,
  SeqRelabel,
  DroppedMessage,
  ReplayedRejected,
  MissingMessages,
  LastSeqRegression,
  SelfSeqRegression,
};

inline const char* to_string(DetectionKind k) {
  switch (k) {
    case DetectionKind::ChainIntegrity: return "ChainIntegrity";
    case DetectionKind::SeqRelabel: return "SeqRelabel";
    case DetectionKind::DroppedMessage: return "DroppedMessage";
    case DetectionKind::ReplayedRejected: return "ReplayedRejected";
    case DetectionKind::MissingMessages: return "MissingMessages";
    case DetectionKind::LastSeqRegression: return "LastSeqRegression";
    case DetectionKind::SelfSeqRegression: return "SelfSeqRegression";
  }
  return "?";
}

struct Detection {
  DetectionKind kind = DetectionKind::ChainIntegrity;
  SeqNo at_seq = 0;
  std::string details;
  bool operator==(const Detection&) const = default;
};

struct DetectionError : std::runtime_error {
  explicit DetectionError(Detection d)
      : std::runtime_error(std::string(to_string(d.kind)) + " at seq " + std::to_string(d.at_seq) +
                           ": " + d.details),
        detection(std::move(d)) {}
  Detection detection;
};

struct ClientConfig {
  MachineId machine_id = 0;
  SecretKeys keys;
  ChainConfig chain;
  std::uint64_t initial_capacity = 8;
  std::vector<MachineId> known_clients;  // static membership
  std::uint64_t seed = 0;
  unsigned max_rejections = 16;
  double resize_low = 0.65;
  double resize_high = 0.85;
  std::size_t fill_reserve = 64;  // bytes kept free by payload and fill
  SeqNo history_span = 4096;      // how far back sender history is kept
};

struct Sent {
  SeqNo seq = 0;
};
struct RejectedAttempt {
  SeqNo seq = 0;
};
struct DeferredNetworkFailure {
  std::string reason;
};
using SendOutcome = std::variant<Sent, RejectedAttempt, DeferredNetworkFailure, Detection>;

struct FetchOutcome {
  std::size_t accepted = 0;
  bool network_failure = false;
  std::optional<Detection> detection;
};

struct SyncReport {
  FetchOutcome fetch;
  std::optional<SendOutcome> send;  // absent when the fetch failed
};

struct ProcessResult {
  std::vector<ViewEntry> delivered;
  std::optional<Detection> detection;
};

class Client {
 public:
  explicit Client(ClientConfig cfg) : cfg_(std::move(cfg)), capacity_(cfg_.initial_capacity) {
    validate(cfg_.chain);
    if (cfg_.initial_capacity == 0) throw std::invalid_argument("initial capacity must be >= 1");
    rng_.seed(cfg_.seed * 0x9e3779b97f4a7c15ULL ^ cfg_.machine_id);
  }

  // ---------------------------------------------------------------- accessors
  MachineId id() const { return cfg_.machine_id; }
  const ClientConfig& config() const { return cfg_; }
  SeqNo expected_seq() const { return expected_; }
  std::uint64_t capacity() const { return capacity_; }
  const std::deque<ViewEntry>& window() const { return window_; }
  QueueView view() const { return QueueView{{window_.begin(), window_.end()}, capacity_}; }
  const std::map<MachineId, SeqNo>& last_message_table() const { return table_; }
  const std::vector<RejectedMessages>& rejected_ranges() const { return rejected_; }
  const std::optional<Detection>& detection() const { return detection_; }
  bool halted() const { return detection_.has_value(); }
  std::uint64_t nonce_counter() const { return nonce_counter_; }
  const std::deque<Record>& outbox() const { return outbox_; }
  bool has_in_flight() const { return in_flight_.has_value(); }
  std::optional<SeqNo> in_flight_seq() const {
    return in_flight_ ? std::optional<SeqNo>(in_flight_->entry.seq) : std::nullopt;
  }

  // Newly accepted chain entries (own included) since the last call, in chain order.
  std::vector<ViewEntry> take_delivered() { return std::exchange(delivered_, {}); }
  bool gap_since_last_take() const { return gap_flag_; }
  void clear_gap_flag() { gap_flag_ = false; }

  // Largest encoded record the outbox accepts.
  std::size_t max_payload_record() const { return record_capacity(cfg_.chain) / 2; }

  void enqueue(Record r) {
    if (encoded_size(r) > max_payload_record())
      throw std::length_error("record too large for one message");
    outbox_.push_back(std::move(r));
  }

  // ---------------------------------------------------------------- receive path
  ProcessResult process_updates(const std::vector<SealedMessage>& batch) {
    ProcessResult out;
    if (detection_) {
      out.detection = detection_;
      return out;
    }
    std::size_t before = delivered_.size();
    try {
      ingest(batch);
    } catch (const DetectionError& e) {
      detection_ = e.detection;
      out.detection = detection_;
    }
    out.delivered.assign(delivered_.begin() + static_cast<std::ptrdiff_t>(before), delivered_.end());
    return out;
  }

  FetchOutcome fetch(Transport& t) {
    FetchOutcome out;
    if (detection_) {
      out.detection = detection_;
      return out;
    }
    std::vector<SealedMessage> batch;
    try {
      batch = t.get_msg(expected_);
    } catch (const NetworkFailure&) {
      out.network_failure = true;
      return out;
    }
    auto r = process_updates(batch);
    out.accepted = r.delivered.size();
    out.detection = r.detection;
    return out;
  }

  // ---------------------------------------------------------------- send path
  // One putmsg. A rejection is processed and the payload requeued for the next attempt.
  SendOutcome send_once(Transport& t) {
    if (detection_) return *detection_;
    try {
      return send_inner(t);
    } catch (const DetectionError& e) {
      detection_ = e.detection;
      return *detection_;
    }
  }

  // Retries rejected sends with fresh sequence numbers, bounded by max_rejections.
  SendOutcome attempt_send(const std::vector<Record>& payload, Transport& t) {
    for (auto it = payload.rbegin(); it != payload.rend(); ++it) {
      if (encoded_size(*it) > max_payload_record())
        throw std::length_error("record too large for one message");
      outbox_.push_front(*it);
    }
    for (;;) {
      auto r = send_once(t);
      if (!std::holds_alternative<RejectedAttempt>(r)) return r;
      if (consecutive_rejections_ >= cfg_.max_rejections)
        return DeferredNetworkFailure{"rejected " + std::to_string(consecutive_rejections_) +
                                      " times in a row"};
    }
  }

  // getmsg followed by exactly one putmsg.
  SyncReport sync(Transport& t) {
    SyncReport rep;
    t.begin_sync();
    rep.fetch = fetch(t);
    if (!rep.fetch.network_failure && !rep.fetch.detection) rep.send = send_once(t);
    t.end_sync();
    return rep;
  }

  unsigned consecutive_rejections() const { return consecutive_rejections_; }

  // Built but not sent; exposed for inspection in tests.
  struct Draft {
    PlainBody body;
    std::optional<std::uint64_t> setcap;
    std::vector<Record> payload;  // outbox records consumed, before origin stamping
    std::optional<std::pair<SeqNo, SeqNo>> carried_rejection;
    std::size_t refresh_count = 0;
    std::size_t lastmsg_count = 0;
  };

  Draft build_draft() {
    Draft d;
    const SeqNo s = expected_;
    const std::size_t cap_bytes = record_capacity(cfg_.chain);
    const std::size_t budget = cap_bytes > cfg_.fill_reserve ? cap_bytes - cfg_.fill_reserve : 0;

    QueueView v = view();
    LivenessIndex idx(v, last_sent_table());
    std::vector<Record> mandatory;

    // (i) resize
    std::uint64_t eff_cap = capacity_;
    if (s == 1) {
      mandatory.push_back(QueueSize{capacity_, 1});
    } else if (resize_due(v, idx, s)) {
      eff_cap = capacity_ * 2;
      mandatory.push_back(QueueSize{eff_cap, s});
      d.setcap = eff_cap;
    }

    // (ii) rejected range
    if (pending_rejection_) {
      mandatory.push_back(
          RejectedMessages{cfg_.machine_id, pending_rejection_->first, pending_rejection_->second, s});
      d.carried_rejection = pending_rejection_;
    }

    // (iii) refresh what this put evicts, plus last-message pins
    auto add_refresh = [&](std::size_t horizon, std::vector<Record>& into) {
      auto items = refresh_candidates(v, idx, horizon);
      for (auto& it : items) into.push_back(std::move(it.record));
      d.refresh_count = items.size();
      std::size_t n = std::min(horizon, v.entries.size());
      d.lastmsg_count = 0;
      if (n == 0) return;
      SeqNo edge = v.entries[n - 1].seq;
      for (const auto& [mid, latest] : idx.latest_messages()) {
        if (mid == cfg_.machine_id || latest > edge) continue;
        auto pinned = idx.latest_last_message_record(mid);
        if (pinned && *pinned >= latest) continue;
        into.push_back(LastMessage{mid, latest});
        ++d.lastmsg_count;
      }
    };
    std::size_t horizon = eviction_horizon(eff_cap);
    std::vector<Record> refresh;
    add_refresh(horizon, refresh);
    if (records_size(mandatory) + records_size(refresh) > cap_bytes && !d.setcap && s > 1 &&
        resize_allowed(s)) {
      // Growing the queue means nothing is evicted by this put.
      eff_cap = capacity_ * 2;
      mandatory.insert(mandatory.begin(), QueueSize{eff_cap, s});
      d.setcap = eff_cap;
      refresh.clear();
      horizon = eviction_horizon(eff_cap);
      add_refresh(horizon, refresh);
    }
    // an older QueueSize copied after a new one would undo the resize
    const bool resizing = std::any_of(mandatory.begin(), mandatory.end(),
                                      [](const Record& r) { return std::holds_alternative<QueueSize>(r); });
    for (auto& r : refresh)
      if (!resizing || !std::holds_alternative<QueueSize>(r)) mandatory.push_back(std::move(r));
    std::size_t used = records_size(mandatory);
    if (used > cap_bytes)
      throw EnvelopeError(EnvelopeError::Kind::Overflow,
                          "control and refresh records need " + std::to_string(used) + " bytes");

    // (iv) payload, in outbox order
    std::vector<Record> records = std::move(mandatory);
    std::vector<Record> payload;
    while (!outbox_.empty()) {
      Record r = outbox_.front();
      if (auto* nk = std::get_if<NewKey>(&r)) nk->origin_seq = s;
      std::size_t sz = encoded_size(r);
      if (used + sz > budget) break;
      d.payload.push_back(outbox_.front());
      outbox_.pop_front();
      payload.push_back(std::move(r));
      used += sz;
    }

    // (v) fill with the oldest live records from the older half of the window. Fill copies
    // go in front of the payload so a fresh Commit is never overwritten by an old copy.
    if (v.entries.size() > horizon) {
      std::set<Bytes> present;
      for (const auto& r : records) present.insert(encode_record(r));
      for (const auto& r : payload) present.insert(encode_record(r));
      std::size_t older_half = std::max(horizon, v.entries.size() / 2);
      for (const auto& it : refresh_candidates(v, idx, older_half)) {
        if (it.origin.first <= (horizon ? v.entries[horizon - 1].seq : 0)) continue;
        if (resizing && std::holds_alternative<QueueSize>(it.record)) continue;
        auto enc = encode_record(it.record);
        if (present.count(enc)) continue;
        if (used + enc.size() > budget) continue;
        used += enc.size();
        present.insert(enc);
        records.push_back(it.record);
      }
    }
    for (auto& r : payload) records.push_back(std::move(r));

    d.body.seq_e = s;
    d.body.machine_id = cfg_.machine_id;
    d.body.hmac_prev = window_.empty() ? Digest{} : window_.back().hmac_cur;
    d.body.records = std::move(records);
    return d;
  }

  // ---------------------------------------------------------------- snapshots
  static constexpr std::uint32_t kSnapshotVersion = 1;

  Bytes snapshot() const {
    ByteWriter w;
    w.raw(std::string_view("CHVC"));
    w.u32(kSnapshotVersion);
    w.u64(cfg_.machine_id);
    w.u64(expected_);
    w.u64(capacity_);
    w.u64(nonce_counter_);
    w.u32(consecutive_rejections_);
    w.u32(static_cast<std::uint32_t>(window_.size()));
    for (const auto& e : window_) put_entry(w, e);
    w.u32(static_cast<std::uint32_t>(table_.size()));
    for (const auto& [k, v] : table_) {
      w.u64(k);
      w.u64(v);
    }
    w.u32(static_cast<std::uint32_t>(rejected_.size()));
    for (const auto& r : rejected_) encode_record(w, r);
    w.u8(pending_rejection_ ? 1 : 0);
    if (pending_rejection_) {
      w.u64(pending_rejection_->first);
      w.u64(pending_rejection_->second);
    }
    w.u32(static_cast<std::uint32_t>(outbox_.size()));
    for (const auto& r : outbox_) encode_record(w, r);
    w.u8(in_flight_ ? 1 : 0);
    if (in_flight_) {
      put_entry(w, in_flight_->entry);
      put_sealed(w, in_flight_->sealed);
      w.u8(in_flight_->setcap ? 1 : 0);
      if (in_flight_->setcap) w.u64(*in_flight_->setcap);
      w.u32(static_cast<std::uint32_t>(in_flight_->payload.size()));
      for (const auto& r : in_flight_->payload) encode_record(w, r);
      w.u8(in_flight_->carried_rejection ? 1 : 0);
      if (in_flight_->carried_rejection) {
        w.u64(in_flight_->carried_rejection->first);
        w.u64(in_flight_->carried_rejection->second);
      }
    }
    w.u32(static_cast<std::uint32_t>(history_.size()));
    for (const auto& [s, h] : history_) {
      w.u64(s);
      w.u64(h.first);
      w.raw(ByteSpan(h.second));
    }
    w.u8(detection_ ? 1 : 0);
    if (detection_) {
      w.u8(static_cast<std::uint8_t>(detection_->kind));
      w.u64(detection_->at_seq);
      w.str(detection_->details);
    }
    std::ostringstream rs;
    rs << rng_;
    w.str(rs.str());
    return w.take();
  }

  static Client restore(ClientConfig cfg, ByteSpan blob) {
    Client c(std::move(cfg));
    ByteReader r(blob);
    auto magic = r.raw(4);
    if (std::string(magic.begin(), magic.end()) != "CHVC") throw DecodeError("not a client snapshot");
    if (r.u32() != kSnapshotVersion) throw DecodeError("unsupported client snapshot version");
    if (r.u64() != c.cfg_.machine_id) throw DecodeError("snapshot belongs to another machine");
    c.expected_ = r.u64();
    c.capacity_ = r.u64();
    c.nonce_counter_ = r.u64();
    c.consecutive_rejections_ = r.u32();
    for (auto n = r.u32(); n > 0; --n) c.window_.push_back(get_entry(r));
    for (auto n = r.u32(); n > 0; --n) {
      auto k = r.u64();
      c.table_[k] = r.u64();
    }
    for (auto n = r.u32(); n > 0; --n)
      c.rejected_.push_back(std::get<RejectedMessages>(decode_record(r)));
    if (r.u8()) {
      auto lo = r.u64();
      c.pending_rejection_ = std::make_pair(lo, r.u64());
    }
    for (auto n = r.u32(); n > 0; --n) c.outbox_.push_back(decode_record(r));
    if (r.u8()) {
      InFlight f;
      f.entry = get_entry(r);
      f.sealed = get_sealed(r);
      if (r.u8()) f.setcap = r.u64();
      for (auto n = r.u32(); n > 0; --n) f.payload.push_back(decode_record(r));
      if (r.u8()) {
        auto lo = r.u64();
        f.carried_rejection = std::make_pair(lo, r.u64());
      }
      c.in_flight_ = std::move(f);
    }
    for (auto n = r.u32(); n > 0; --n) {
      auto s = r.u64();
      auto m = r.u64();
      c.history_[s] = {m, r.fixed<32>()};
    }
    if (r.u8()) {
      Detection d;
      d.kind = static_cast<DetectionKind>(r.u8());
      d.at_seq = r.u64();
      d.details = r.str();
      c.detection_ = d;
    }
    std::istringstream rs(r.str());
    rs >> c.rng_;
    if (!r.done()) throw DecodeError("trailing bytes in client snapshot");
    return c;
  }

  // last-sent knowledge used by liveness rules: every known client, 0 if silent so far
  std::map<MachineId, SeqNo> last_sent_table() const {
    std::map<MachineId, SeqNo> out;
    for (auto id : cfg_.known_clients) out[id] = 0;
    for (const auto& [k, v] : table_) out[k] = std::max(out[k], v);
    return out;
  }

 private:
  struct InFlight {
    ViewEntry entry;
    SealedMessage sealed;
    std::optional<std::uint64_t> setcap;
    std::vector<Record> payload;
    std::optional<std::pair<SeqNo, SeqNo>> carried_rejection;
  };

  struct Opened {
    SeqNo seq;
    ViewEntry entry;
  };

  [[noreturn]] static void detect(DetectionKind k, SeqNo at, std::string details) {
    throw DetectionError(Detection{k, at, std::move(details)});
  }

  static void put_entry(ByteWriter& w, const ViewEntry& e) {
    w.u64(e.seq);
    w.u64(e.machine);
    w.raw(ByteSpan(e.hmac_prev));
    w.raw(ByteSpan(e.hmac_cur));
    w.u32(static_cast<std::uint32_t>(e.records.size()));
    for (const auto& r : e.records) encode_record(w, r);
  }
  static ViewEntry get_entry(ByteReader& r) {
    ViewEntry e;
    e.seq = r.u64();
    e.machine = r.u64();
    e.hmac_prev = r.fixed<32>();
    e.hmac_cur = r.fixed<32>();
    for (auto n = r.u32(); n > 0; --n) e.records.push_back(decode_record(r));
    return e;
  }
  static void put_sealed(ByteWriter& w, const SealedMessage& m) {
    w.u64(m.seq);
    w.raw(ByteSpan(m.nonce));
    w.u32(static_cast<std::uint32_t>(m.cipher_block.size()));
    w.raw(ByteSpan(m.cipher_block));
  }
  static SealedMessage get_sealed(ByteReader& r) {
    SealedMessage m;
    m.seq = r.u64();
    m.nonce = r.fixed<16>();
    auto n = r.u32();
    auto b = r.raw(n);
    m.cipher_block.assign(b.begin(), b.end());
    return m;
  }

  bool is_fresh() const { return expected_ == 1 && window_.empty() && table_.empty() && !in_flight_; }

  std::optional<QueueSize> newest_queue_size(const std::vector<const ViewEntry*>& entries) const {
    std::optional<QueueSize> q;
    for (const auto* e : entries)
      for (const auto& r : e->records)
        if (auto* p = std::get_if<QueueSize>(&r)) q = *p;
    return q;
  }

  std::optional<QueueSize> newest_queue_size_in_window() const {
    std::vector<const ViewEntry*> ptrs;
    for (const auto& e : window_) ptrs.push_back(&e);
    return newest_queue_size(ptrs);
  }

  // Resizes are spaced by at least half the current capacity so that the missing-message
  // bound below stays valid: the previous capacity is always half the current one.
  bool resize_allowed(SeqNo s) const {
    auto q = newest_queue_size_in_window();
    SeqNo at = q ? q->s_at : 1;
    return s >= at + capacity_ / 2;
  }

  bool resize_due(const QueueView& v, const LivenessIndex& idx, SeqNo s) {
    std::uniform_real_distribution<double> dist(cfg_.resize_low, cfg_.resize_high);
    double u = dist(rng_);
    std::size_t bearing = 0;
    for (const auto& e : v.entries) {
      for (std::size_t i = 0; i < e.records.size(); ++i) {
        if (!idx.is_dead(e.records[i], {e.seq, i})) {
          ++bearing;
          break;
        }
      }
    }
    return static_cast<double>(bearing) > static_cast<double>(capacity_) * u && resize_allowed(s);
  }

  std::size_t eviction_horizon(std::uint64_t cap) const {
    std::size_t len = window_.size();
    return len + 1 > cap ? static_cast<std::size_t>(len + 1 - cap) : 0;
  }

  void extend_pending_rejection(SeqNo s) {
    if (!pending_rejection_)
      pending_rejection_ = {s, s};
    else {
      pending_rejection_->first = std::min(pending_rejection_->first, s);
      pending_rejection_->second = std::max(pending_rejection_->second, s);
    }
  }

  void requeue(const std::vector<Record>& payload) {
    for (auto it = payload.rbegin(); it != payload.rend(); ++it) outbox_.push_front(*it);
  }

  void in_flight_rejected() {
    extend_pending_rejection(in_flight_->entry.seq);
    requeue(in_flight_->payload);
    in_flight_.reset();
  }

  void in_flight_accepted() {
    if (in_flight_->carried_rejection && pending_rejection_ == in_flight_->carried_rejection)
      pending_rejection_.reset();
    in_flight_.reset();
    consecutive_rejections_ = 0;
  }

  std::vector<Opened> open_batch(const std::vector<SealedMessage>& batch) const {
    std::vector<Opened> out;
    out.reserve(batch.size());
    for (const auto& m : batch) {
      PlainBody b;
      try {
        b = open(m, cfg_.keys, cfg_.chain);
      } catch (const EnvelopeError& e) {
        if (e.kind() == EnvelopeError::Kind::SeqMismatch)
          detect(DetectionKind::SeqRelabel, m.seq, e.what());
        detect(DetectionKind::ChainIntegrity, m.seq, std::string("cannot open: ") + e.what());
      }
      out.push_back({m.seq, ViewEntry{b.seq_e, b.machine_id, b.hmac_prev, b.hmac_cur,
                                      std::move(b.records)}});
    }
    return out;
  }

  void ingest(const std::vector<SealedMessage>& batch) {
    auto opened = open_batch(batch);
    for (std::size_t i = 1; i < opened.size(); ++i) {
      const auto& prev = opened[i - 1].entry;
      const auto& cur = opened[i].entry;
      if (cur.seq != prev.seq + 1)
        detect(DetectionKind::ChainIntegrity, cur.seq,
               "batch not contiguous after seq " + std::to_string(prev.seq));
      if (cur.hmac_prev != prev.hmac_cur)
        detect(DetectionKind::ChainIntegrity, cur.seq, "parent hmac does not match predecessor");
    }

    // Entries we already hold must be identical to ours.
    std::vector<ViewEntry> fresh;
    for (auto& o : opened) {
      if (o.entry.seq >= expected_) {
        fresh.push_back(std::move(o.entry));
        continue;
      }
      Digest known{};
      bool have = false;
      if (auto it = history_.find(o.entry.seq); it != history_.end()) {
        known = it->second.second;
        have = true;
      }
      if (have && known != o.entry.hmac_cur)
        detect(DetectionKind::ChainIntegrity, o.entry.seq,
               "second message with an already validated sequence number");
    }
    if (fresh.empty()) return;

    const ViewEntry& first = fresh.front();
    const bool contiguous = first.seq == expected_;
    if (contiguous) {
      Digest parent = window_.empty() ? Digest{} : window_.back().hmac_cur;
      if (expected_ > 1 && window_.empty()) {
        auto it = history_.find(expected_ - 1);
        if (it != history_.end()) parent = it->second.second;
      }
      if (first.hmac_prev != parent)
        detect(DetectionKind::ChainIntegrity, first.seq, "parent hmac does not match our chain");
    } else if (first.seq == 1) {
      if (first.hmac_prev != Digest{})
        detect(DetectionKind::ChainIntegrity, 1, "genesis message with non-zero parent");
    }

    std::vector<const ViewEntry*> fresh_ptrs;
    for (const auto& e : fresh) fresh_ptrs.push_back(&e);

    // Own messages must be the one we have in flight.
    const bool fresh_client = is_fresh();
    for (const auto& e : fresh) {
      if (e.machine != cfg_.machine_id || fresh_client) continue;
      bool ours = in_flight_ && in_flight_->entry.seq == e.seq &&
                  in_flight_->entry.hmac_cur == e.hmac_cur;
      if (!ours)
        detect(DetectionKind::ReplayedRejected, e.seq, "message under our id that we never had accepted");
    }

    // Rejected ranges: new records against everything we have seen, and every new message
    // against every range we know.
    std::vector<RejectedMessages> ranges = rejected_;
    if (pending_rejection_)
      ranges.push_back({cfg_.machine_id, pending_rejection_->first, pending_rejection_->second,
                        pending_rejection_->second + 1});
    std::vector<RejectedMessages> incoming;
    for (const auto& e : fresh)
      for (const auto& r : e.records)
        if (auto* rm = std::get_if<RejectedMessages>(&r)) incoming.push_back(*rm);
    for (const auto& rm : incoming) {
      ranges.push_back(rm);
      for (auto it = history_.lower_bound(rm.s_low); it != history_.end() && it->first <= rm.s_high;
           ++it) {
        if (it->second.first == rm.id)
          detect(DetectionKind::ReplayedRejected, it->first,
                 "previously received message later reported rejected by machine " +
                     std::to_string(rm.id));
      }
    }
    for (const auto& e : fresh) {
      for (const auto& rm : ranges) {
        if (rm.id == e.machine && e.seq >= rm.s_low && e.seq <= rm.s_high)
          detect(DetectionKind::ReplayedRejected, e.seq,
                 "message from machine " + std::to_string(e.machine) + " inside a rejected range");
      }
    }

    // Last-message validation.
    auto regress = [&](MachineId mid, SeqNo got, SeqNo had, SeqNo at) {
      detect(mid == cfg_.machine_id ? DetectionKind::SelfSeqRegression
                                    : DetectionKind::LastSeqRegression,
             at,
             "latest seq of machine " + std::to_string(mid) + " went from " + std::to_string(had) +
                 " to " + std::to_string(got));
    };
    std::map<MachineId, SeqNo> evidence;
    for (const auto& e : fresh) {
      for (const auto& r : e.records) {
        if (auto* lm = std::get_if<LastMessage>(&r)) {
          if (auto it = table_.find(lm->id); it != table_.end() && lm->seq < it->second)
            regress(lm->id, lm->seq, it->second, e.seq);
          evidence[lm->id] = std::max(evidence[lm->id], lm->seq);
        }
      }
      evidence[e.machine] = std::max(evidence[e.machine], e.seq);
    }

    std::optional<bool> own_accepted;
    if (!contiguous) {
      gap_flag_ = true;
      for (const auto& [mid, had] : table_) {
        auto it = evidence.find(mid);
        if (it == evidence.end())
          detect(DetectionKind::DroppedMessage, first.seq,
                 "no trace of machine " + std::to_string(mid) + " in the served queue");
        if (it->second < had) regress(mid, it->second, had, first.seq);
      }
      // Missing oldest messages.
      auto q = newest_queue_size(fresh_ptrs);
      if (!q) detect(DetectionKind::MissingMessages, first.seq, "served queue has no queue-size record");
      SeqNo last = fresh.back().seq;
      SeqNo bound = 1;
      if (last + 1 > q->n) bound = std::max(bound, last + 1 - q->n);
      if (q->s_at > q->n / 2) bound = std::max(bound, q->s_at - q->n / 2);
      if (first.seq > bound)
        detect(DetectionKind::MissingMessages, first.seq,
               "queue starts at " + std::to_string(first.seq) + " but must reach back to " +
                   std::to_string(bound));
      if (in_flight_ && in_flight_->entry.seq < first.seq) {
        auto it = evidence.find(cfg_.machine_id);
        own_accepted = it != evidence.end() && it->second >= in_flight_->entry.seq;
      }
    }

    // All checks passed: commit.
    if (in_flight_ && !own_accepted) {
      for (const auto& e : fresh) {
        if (e.seq == in_flight_->entry.seq) {
          own_accepted = e.hmac_cur == in_flight_->entry.hmac_cur;
          break;
        }
      }
    }
    if (own_accepted) {
      if (*own_accepted)
        in_flight_accepted();
      else
        in_flight_rejected();
    }

    if (!contiguous) window_.clear();
    for (auto& e : fresh) accept_entry(std::move(e));
    prune();
  }

  void accept_entry(ViewEntry e) {
    auto& t = table_[e.machine];
    t = std::max(t, e.seq);
    for (const auto& r : e.records) {
      if (auto* lm = std::get_if<LastMessage>(&r)) {
        auto& v = table_[lm->id];
        v = std::max(v, lm->seq);
      } else if (auto* rm = std::get_if<RejectedMessages>(&r)) {
        if (std::find(rejected_.begin(), rejected_.end(), *rm) == rejected_.end())
          rejected_.push_back(*rm);
      } else if (auto* q = std::get_if<QueueSize>(&r)) {
        capacity_ = q->n;
      }
    }
    history_[e.seq] = {e.machine, e.hmac_cur};
    expected_ = e.seq + 1;
    window_.push_back(e);
    delivered_.push_back(std::move(e));
  }

  void prune() {
    while (window_.size() > capacity_) window_.pop_front();
    SeqNo floor = expected_ > cfg_.history_span ? expected_ - cfg_.history_span : 0;
    history_.erase(history_.begin(), history_.lower_bound(floor));
    std::erase_if(rejected_, [&](const RejectedMessages& r) { return r.s_high < floor; });
  }

  SendOutcome send_inner(Transport& t) {
    if (in_flight_ && in_flight_->entry.seq != expected_) {
      // Someone else took our slot while we were unsure of the outcome.
      in_flight_rejected();
    }
    bool retransmit = in_flight_.has_value();
    if (!retransmit) {
      Draft d = build_draft();
      Nonce nonce = make_nonce(cfg_.machine_id, ++nonce_counter_);
      SealedMessage sealed = seal(d.body, cfg_.keys, d.body.seq_e, nonce, cfg_.chain, &nonces_);
      InFlight f;
      f.entry = ViewEntry{d.body.seq_e, d.body.machine_id, d.body.hmac_prev, d.body.hmac_cur,
                          std::move(d.body.records)};
      f.sealed = std::move(sealed);
      f.setcap = d.setcap;
      f.payload = std::move(d.payload);
      f.carried_rejection = d.carried_rejection;
      in_flight_ = std::move(f);
    }

    const SeqNo s = in_flight_->entry.seq;
    PutResult res;
    try {
      if (in_flight_->setcap) t.set_capacity(*in_flight_->setcap);
      res = t.put_msg(in_flight_->sealed);
    } catch (const NetworkFailure& e) {
      return DeferredNetworkFailure{e.what()};
    }

    if (std::holds_alternative<Accepted>(res)) {
      ViewEntry own = in_flight_->entry;
      in_flight_accepted();
      accept_entry(std::move(own));
      prune();
      return Sent{s};
    }

    const auto& proof = std::get<Rejected>(res).messages;
    ingest(proof);
    if (expected_ <= s)
      detect(DetectionKind::ChainIntegrity, s, "rejection not backed by a newer message");
    if (in_flight_) in_flight_rejected();
    ++consecutive_rejections_;
    return RejectedAttempt{s};
  }

  ClientConfig cfg_;
  std::deque<ViewEntry> window_;
  SeqNo expected_ = 1;
  std::uint64_t capacity_;
  std::map<MachineId, SeqNo> table_;
  std::vector<RejectedMessages> rejected_;
  std::optional<std::pair<SeqNo, SeqNo>> pending_rejection_;
  std::map<SeqNo, std::pair<MachineId, Digest>> history_;
  std::deque<Record> outbox_;
  std::optional<InFlight> in_flight_;
  std::uint64_t nonce_counter_ = 0;
  NonceRegistry nonces_;
  unsigned consecutive_rejections_ = 0;
  std::optional<Detection> detection_;
  std::vector<ViewEntry> delivered_;
  bool gap_flag_ = false;
  std::mt19937_64 rng_;
};

}  // namespace chv
