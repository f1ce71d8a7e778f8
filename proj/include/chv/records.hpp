#pragma once

#include <algorithm>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "chv/bytes.hpp"

namespace chv {

using Value = std::string;  // opaque bytes

inline constexpr std::size_t kMaxKeyBytes = 64;
inline constexpr std::size_t kMaxValueBytes = 256;

// Wire tags. Part of the format; never renumber.
enum class RecordTag : std::uint8_t {
  NewKey = 1,
  Transaction = 2,
  Commit = 3,
  Abort = 4,
  LastMessage = 5,
  RejectedMessages = 6,
  QueueSize = 7,
};

struct TxId {
  MachineId machine = 0;
  std::uint64_t counter = 0;
  auto operator<=>(const TxId&) const = default;
};

struct Write {
  std::string key;
  Value value;
  bool operator==(const Write&) const = default;
};

// Expected committed value at arbitration time; nullopt means "key has no committed value".
struct GuardEntry {
  std::string key;
  std::optional<Value> expected;
  bool operator==(const GuardEntry&) const = default;
};

// origin_seq is the sequence number of the first message that carried the record.
// Refreshed copies keep it, so the earliest creation wins regardless of copy order.
struct NewKey {
  std::string key;
  MachineId arbitrator = 0;
  SeqNo origin_seq = 0;
  bool operator==(const NewKey&) const = default;
};

struct Transaction {
  TxId id;
  MachineId arbitrator = 0;
  std::vector<Write> writes;
  std::vector<GuardEntry> guard;
  bool operator==(const Transaction&) const = default;
};

struct Commit {
  TxId id;
  std::vector<Write> writes;
  bool operator==(const Commit&) const = default;
};

struct Abort {
  TxId id;
  bool operator==(const Abort&) const = default;
};

struct LastMessage {
  MachineId id = 0;
  SeqNo seq = 0;
  bool operator==(const LastMessage&) const = default;
};

// Messages from `id` with s_low <= seq <= s_high were rejected by the server.
// s_first is the sequence number of the first message that published the range.
struct RejectedMessages {
  MachineId id = 0;
  SeqNo s_low = 0;
  SeqNo s_high = 0;
  SeqNo s_first = 0;
  bool operator==(const RejectedMessages&) const = default;
};

struct QueueSize {
  std::uint64_t n = 0;
  SeqNo s_at = 0;
  bool operator==(const QueueSize&) const = default;
};

using Record =
    std::variant<NewKey, Transaction, Commit, Abort, LastMessage, RejectedMessages, QueueSize>;

inline RecordTag tag_of(const Record& r) {
  return static_cast<RecordTag>(r.index() + 1);
}

inline const char* tag_name(RecordTag t) {
  switch (t) {
    case RecordTag::NewKey: return "NewKey";
    case RecordTag::Transaction: return "Transaction";
    case RecordTag::Commit: return "Commit";
    case RecordTag::Abort: return "Abort";
    case RecordTag::LastMessage: return "LastMessage";
    case RecordTag::RejectedMessages: return "RejectedMessages";
    case RecordTag::QueueSize: return "QueueSize";
  }
  return "?";
}

inline bool is_control(const Record& r) {
  return std::holds_alternative<LastMessage>(r) || std::holds_alternative<RejectedMessages>(r) ||
         std::holds_alternative<QueueSize>(r);
}

// ---------------------------------------------------------------------------
// Codec: 1-byte tag, 2-byte little-endian payload length, payload.

namespace detail {

inline void check_key(const std::string& k) {
  if (k.size() > kMaxKeyBytes) throw std::length_error("key exceeds 64 bytes");
}
inline void check_value(const Value& v) {
  if (v.size() > kMaxValueBytes) throw std::length_error("value exceeds 256 bytes");
}

inline void put_tx(ByteWriter& w, const TxId& id) {
  w.u64(id.machine);
  w.u64(id.counter);
}
inline TxId get_tx(ByteReader& r) {
  TxId id;
  id.machine = r.u64();
  id.counter = r.u64();
  return id;
}

inline void put_writes(ByteWriter& w, const std::vector<Write>& writes) {
  if (writes.size() > 0xff) throw std::length_error("too many writes in one record");
  w.u8(static_cast<std::uint8_t>(writes.size()));
  for (const auto& wr : writes) {
    check_key(wr.key);
    check_value(wr.value);
    w.short_str(wr.key);
    w.str(wr.value);
  }
}
inline std::vector<Write> get_writes(ByteReader& r) {
  std::vector<Write> out(r.u8());
  for (auto& wr : out) {
    wr.key = r.short_str();
    wr.value = r.str();
    if (wr.key.size() > kMaxKeyBytes || wr.value.size() > kMaxValueBytes)
      throw DecodeError("write exceeds size bounds");
  }
  return out;
}

inline void encode_payload(ByteWriter& w, const Record& rec) {
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, NewKey>) {
          check_key(r.key);
          w.short_str(r.key);
          w.u64(r.arbitrator);
          w.u64(r.origin_seq);
        } else if constexpr (std::is_same_v<T, Transaction>) {
          put_tx(w, r.id);
          w.u64(r.arbitrator);
          put_writes(w, r.writes);
          if (r.guard.size() > 0xff) throw std::length_error("guard too large");
          w.u8(static_cast<std::uint8_t>(r.guard.size()));
          for (const auto& g : r.guard) {
            check_key(g.key);
            w.short_str(g.key);
            w.u8(g.expected ? 1 : 0);
            if (g.expected) {
              check_value(*g.expected);
              w.str(*g.expected);
            }
          }
        } else if constexpr (std::is_same_v<T, Commit>) {
          put_tx(w, r.id);
          put_writes(w, r.writes);
        } else if constexpr (std::is_same_v<T, Abort>) {
          put_tx(w, r.id);
        } else if constexpr (std::is_same_v<T, LastMessage>) {
          w.u64(r.id);
          w.u64(r.seq);
        } else if constexpr (std::is_same_v<T, RejectedMessages>) {
          if (r.s_low > r.s_high || r.s_first <= r.s_high)
            throw std::invalid_argument("RejectedMessages range out of order");
          w.u64(r.id);
          w.u64(r.s_low);
          w.u64(r.s_high);
          w.u64(r.s_first);
        } else if constexpr (std::is_same_v<T, QueueSize>) {
          if (r.n == 0) throw std::invalid_argument("QueueSize n must be >= 1");
          w.u64(r.n);
          w.u64(r.s_at);
        }
      },
      rec);
}

}  // namespace detail

inline void encode_record(ByteWriter& w, const Record& rec) {
  w.u8(static_cast<std::uint8_t>(tag_of(rec)));
  std::size_t len_pos = w.size();
  w.u16(0);
  std::size_t start = w.size();
  detail::encode_payload(w, rec);
  std::size_t len = w.size() - start;
  if (len > 0xffff) throw std::length_error("record payload too large");
  w.patch_u16(len_pos, static_cast<std::uint16_t>(len));
}

inline Bytes encode_record(const Record& rec) {
  ByteWriter w;
  encode_record(w, rec);
  return w.take();
}

inline std::size_t encoded_size(const Record& rec) { return encode_record(rec).size(); }

inline Record decode_record(ByteReader& in) {
  auto tag = in.u8();
  auto len = in.u16();
  ByteReader r(in.raw(len));
  Record out;
  switch (static_cast<RecordTag>(tag)) {
    case RecordTag::NewKey: {
      NewKey k;
      k.key = r.short_str();
      k.arbitrator = r.u64();
      k.origin_seq = r.u64();
      if (k.key.size() > kMaxKeyBytes) throw DecodeError("key exceeds 64 bytes");
      out = std::move(k);
      break;
    }
    case RecordTag::Transaction: {
      Transaction t;
      t.id = detail::get_tx(r);
      t.arbitrator = r.u64();
      t.writes = detail::get_writes(r);
      t.guard.resize(r.u8());
      for (auto& g : t.guard) {
        g.key = r.short_str();
        auto has = r.u8();
        if (has > 1) throw DecodeError("bad guard flag");
        if (has) g.expected = r.str();
      }
      out = std::move(t);
      break;
    }
    case RecordTag::Commit: {
      Commit c;
      c.id = detail::get_tx(r);
      c.writes = detail::get_writes(r);
      out = std::move(c);
      break;
    }
    case RecordTag::Abort:
      out = Abort{detail::get_tx(r)};
      break;
    case RecordTag::LastMessage: {
      LastMessage m;
      m.id = r.u64();
      m.seq = r.u64();
      out = m;
      break;
    }
    case RecordTag::RejectedMessages: {
      RejectedMessages m;
      m.id = r.u64();
      m.s_low = r.u64();
      m.s_high = r.u64();
      m.s_first = r.u64();
      if (m.s_low > m.s_high || m.s_first <= m.s_high)
        throw DecodeError("rejected-messages range out of order");
      out = m;
      break;
    }
    case RecordTag::QueueSize: {
      QueueSize q;
      q.n = r.u64();
      q.s_at = r.u64();
      if (q.n == 0) throw DecodeError("queue size of zero");
      out = q;
      break;
    }
    default:
      throw DecodeError("unknown record tag " + std::to_string(tag));
  }
  if (!r.done()) throw DecodeError("trailing bytes in record payload");
  return out;
}

// ---------------------------------------------------------------------------
// Views and liveness

struct ViewEntry {
  SeqNo seq = 0;
  MachineId machine = 0;
  Digest hmac_prev{};
  Digest hmac_cur{};
  std::vector<Record> records;
  bool operator==(const ViewEntry&) const = default;
};

// Contiguous run of chain messages, oldest first, plus the capacity the holder believes in.
struct QueueView {
  std::vector<ViewEntry> entries;
  std::uint64_t capacity = 0;

  const ViewEntry* find(SeqNo s) const {
    if (entries.empty() || s < entries.front().seq || s > entries.back().seq) return nullptr;
    const auto& e = entries[s - entries.front().seq];
    return e.seq == s ? &e : nullptr;
  }
};

// (sequence number, index within the message)
using Position = std::pair<SeqNo, std::size_t>;

// Precomputed facts about a view so liveness checks are cheap. `last_sent` maps every
// known client to the highest sequence number it is known to have sent (0 if none).
class LivenessIndex {
 public:
  LivenessIndex(const QueueView& view, std::map<MachineId, SeqNo> last_sent)
      : last_sent_(std::move(last_sent)) {
    for (const auto& e : view.entries) {
      auto& lm = latest_msg_[e.machine];
      lm = std::max(lm, e.seq);
      for (std::size_t i = 0; i < e.records.size(); ++i) {
        const Record& r = e.records[i];
        Position pos{e.seq, i};
        auto enc = encode_record(r);
        std::string key(enc.begin(), enc.end());
        earliest_copy_.try_emplace(key, pos);
        latest_copy_[std::move(key)] = pos;
        if (auto* c = std::get_if<Commit>(&r)) {
          for (const auto& w : c->writes) latest_commit_[w.key] = pos;
          decided_.insert(c->id);
        } else if (auto* a = std::get_if<Abort>(&r)) {
          decided_.insert(a->id);
        } else if (std::holds_alternative<QueueSize>(r)) {
          newest_queue_size_ = pos;
        } else if (auto* l = std::get_if<LastMessage>(&r)) {
          auto& v = latest_last_msg_[l->id];
          v = std::max(v, l->seq);
        } else if (auto* k = std::get_if<NewKey>(&r)) {
          auto it = min_origin_.find(k->key);
          if (it == min_origin_.end() || k->origin_seq < it->second)
            min_origin_[k->key] = k->origin_seq;
        }
      }
    }
  }

  bool everyone_sent_after(SeqNo s) const {
    for (const auto& [id, sent] : last_sent_)
      if (sent <= s) return false;
    return true;
  }

  bool is_dead(const Record& r, Position pos) const {
    // (i) a refreshed copy sits later in the view
    auto enc = encode_record(r);
    if (auto it = latest_copy_.find(std::string(enc.begin(), enc.end()));
        it != latest_copy_.end() && it->second > pos)
      return true;

    return std::visit(
        [&](const auto& rec) -> bool {
          using T = std::decay_t<decltype(rec)>;
          if constexpr (std::is_same_v<T, QueueSize>) {
            // (ii)
            return newest_queue_size_ && *newest_queue_size_ > pos;
          } else if constexpr (std::is_same_v<T, RejectedMessages>) {
            // (iii)
            return everyone_sent_after(rec.s_first);
          } else if constexpr (std::is_same_v<T, LastMessage>) {
            // (iv), plus newer evidence for the same machine
            if (auto it = latest_msg_.find(rec.id); it != latest_msg_.end() && it->second > rec.seq)
              return true;
            auto it = latest_last_msg_.find(rec.id);
            return it != latest_last_msg_.end() && it->second > rec.seq;
          } else if constexpr (std::is_same_v<T, NewKey>) {
            auto it = min_origin_.find(rec.key);
            return it != min_origin_.end() && it->second < rec.origin_seq;
          } else if constexpr (std::is_same_v<T, Transaction>) {
            return decided_.count(rec.id) > 0;
          } else if constexpr (std::is_same_v<T, Commit>) {
            return live_writes(rec, pos).empty();
          } else if constexpr (std::is_same_v<T, Abort>) {
            // anchored at the earliest copy still in view: sending after it proves receipt
            auto it = earliest_copy_.find(std::string(enc.begin(), enc.end()));
            SeqNo first = it != earliest_copy_.end() ? std::min(it->second.first, pos.first) : pos.first;
            return everyone_sent_after(first);
          }
          return false;
        },
        r);
  }

  // Copy of `r` to reinsert, or nullopt if dead. Commits are trimmed to the keys they
  // still determine so a refreshed copy never reapplies a superseded write.
  std::optional<Record> refresh_copy(const Record& r, Position pos) const {
    if (is_dead(r, pos)) return std::nullopt;
    if (auto* c = std::get_if<Commit>(&r)) {
      Commit trimmed{c->id, live_writes(*c, pos)};
      return Record{std::move(trimmed)};
    }
    return r;
  }

  std::optional<SeqNo> latest_message_from(MachineId id) const {
    auto it = latest_msg_.find(id);
    if (it == latest_msg_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<SeqNo> latest_last_message_record(MachineId id) const {
    auto it = latest_last_msg_.find(id);
    if (it == latest_last_msg_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<MachineId, SeqNo>& latest_messages() const { return latest_msg_; }

 private:
  std::vector<Write> live_writes(const Commit& c, Position pos) const {
    std::vector<Write> out;
    for (const auto& w : c.writes) {
      auto it = latest_commit_.find(w.key);
      if (it == latest_commit_.end() || !(it->second > pos)) out.push_back(w);
    }
    return out;
  }

  std::map<MachineId, SeqNo> last_sent_;
  std::unordered_map<std::string, Position> latest_copy_;
  std::unordered_map<std::string, Position> earliest_copy_;
  std::map<MachineId, SeqNo> latest_msg_;
  std::map<MachineId, SeqNo> latest_last_msg_;
  std::map<std::string, Position> latest_commit_;
  std::set<TxId> decided_;
  std::optional<Position> newest_queue_size_;
  std::map<std::string, SeqNo> min_origin_;
};

// Liveness of the first record equal to `r` in the message at `at_seq`.
inline bool is_dead(const Record& r, SeqNo at_seq, const QueueView& view,
                    const std::map<MachineId, SeqNo>& client_last_sent) {
  const ViewEntry* e = view.find(at_seq);
  if (!e) throw std::invalid_argument("record's message is not in the view");
  auto it = std::find(e->records.begin(), e->records.end(), r);
  if (it == e->records.end()) throw std::invalid_argument("record not found at at_seq");
  LivenessIndex idx(view, client_last_sent);
  return idx.is_dead(r, {at_seq, static_cast<std::size_t>(it - e->records.begin())});
}

struct RefreshItem {
  Position origin;
  Record record;  // refresh-ready copy
};

// Live records housed in the oldest `horizon` messages, oldest first, as refresh-ready copies.
inline std::vector<RefreshItem> refresh_candidates(const QueueView& view, const LivenessIndex& idx,
                                                   std::size_t horizon) {
  std::vector<RefreshItem> out;
  std::size_t n = std::min(horizon, view.entries.size());
  for (std::size_t m = 0; m < n; ++m) {
    const auto& e = view.entries[m];
    for (std::size_t i = 0; i < e.records.size(); ++i) {
      if (auto copy = idx.refresh_copy(e.records[i], {e.seq, i}))
        out.push_back({{e.seq, i}, std::move(*copy)});
    }
  }
  return out;
}

inline std::vector<Record> records_needing_refresh(
    const QueueView& view, std::size_t eviction_horizon,
    const std::map<MachineId, SeqNo>& client_last_sent) {
  if (eviction_horizon < 1) throw std::invalid_argument("eviction horizon must be >= 1");
  LivenessIndex idx(view, client_last_sent);
  std::vector<Record> out;
  for (auto& item : refresh_candidates(view, idx, eviction_horizon))
    out.push_back(std::move(item.record));
  return out;
}

}  // namespace chv
