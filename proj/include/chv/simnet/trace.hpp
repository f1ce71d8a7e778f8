#pragma once

#include <istream>
#include <json.hpp>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "chv/client.hpp"
#include "chv/simnet/config.hpp"

namespace chv::sim {

struct TraceHeader {
  std::uint64_t seed = 0;
  std::size_t num_clients = 0;
  std::uint64_t capacity = 0;
  std::size_t block_size = 0;
  std::string adversary;
  SecretKeys keys;
  bool operator==(const TraceHeader&) const = default;
};

// A distinct sealed message that reached the server boundary.
struct SealedEvent {
  SeqNo seq = 0;
  MachineId sender = 0;
  Digest hmac_prev{};
  Digest hmac_cur{};
  Nonce nonce{};
  Bytes cipher;  // empty when ciphertexts are not recorded
  bool operator==(const SealedEvent&) const = default;
};

enum class NetOp { Get, Put, SetCap };

struct OpEvent {
  Time t = 0;
  MachineId client = 0;
  NetOp op = NetOp::Get;
  SeqNo seq = 0;        // since for get, message seq for put, capacity for setcap
  std::string result;   // "ok", "accepted", "rejected", "failed"
  std::size_t count = 0;
  bool operator==(const OpEvent&) const = default;
};

// A client accepted a chain entry.
struct AcceptEvent {
  Time t = 0;
  MachineId client = 0;
  SeqNo seq = 0;
  MachineId sender = 0;
  Digest hmac_prev{};
  Digest hmac_cur{};
  bool gap = false;  // first entry of a batch that did not extend the client's window
  std::uint64_t capacity = 0;
  bool operator==(const AcceptEvent&) const = default;
};

struct DetectEvent {
  Time t = 0;
  MachineId client = 0;
  Detection detection;
  bool operator==(const DetectEvent&) const = default;
};

struct KvTraceEvent {
  Time t = 0;
  MachineId client = 0;
  std::string what;  // KeyCreated, DuplicateKey, TxCommitted, TxAborted, TxSubmitted, TxError
  std::string key;
  TxId tx;
  std::string detail;
  bool operator==(const KvTraceEvent&) const = default;
};

struct LifecycleEvent {
  Time t = 0;
  MachineId client = 0;
  std::string what;  // sleep, wake, net_down, net_up, skipped_sync
  bool operator==(const LifecycleEvent&) const = default;
};

// The server (or, under Partition, one of its queues) stored a message.
struct ServerAcceptEvent {
  Time t = 0;
  std::size_t queue = 0;
  SeqNo seq = 0;
  Digest hmac_cur{};
  bool operator==(const ServerAcceptEvent&) const = default;
};

struct EvictionViolation {
  Time t = 0;
  SeqNo evicted_seq = 0;
  std::string detail;
  bool operator==(const EvictionViolation&) const = default;
};

using TraceEvent = std::variant<SealedEvent, OpEvent, AcceptEvent, DetectEvent, KvTraceEvent,
                                LifecycleEvent, ServerAcceptEvent, EvictionViolation>;

struct Trace {
  TraceHeader header;
  std::vector<TraceEvent> events;

  template <class T>
  std::vector<T> all() const {
    std::vector<T> out;
    for (const auto& e : events)
      if (auto* p = std::get_if<T>(&e)) out.push_back(*p);
    return out;
  }
  template <class T>
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : events) n += std::holds_alternative<T>(e);
    return n;
  }
  std::size_t detections() const { return count<DetectEvent>(); }
  bool operator==(const Trace&) const = default;
};

// ---------------------------------------------------------------- JSONL

namespace detail {

inline const char* net_op_name(NetOp o) {
  switch (o) {
    case NetOp::Get: return "get";
    case NetOp::Put: return "put";
    case NetOp::SetCap: return "setcap";
  }
  return "?";
}

inline NetOp net_op_from(const std::string& s) {
  if (s == "get") return NetOp::Get;
  if (s == "put") return NetOp::Put;
  if (s == "setcap") return NetOp::SetCap;
  throw DecodeError("unknown net op " + s);
}

inline DetectionKind detection_kind_from(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(DetectionKind::SelfSeqRegression); ++k)
    if (s == to_string(static_cast<DetectionKind>(k))) return static_cast<DetectionKind>(k);
  throw DecodeError("unknown detection kind " + s);
}

}  // namespace detail

inline nlohmann::json to_json(const TraceEvent& ev) {
  using nlohmann::json;
  return std::visit(
      [](const auto& e) -> json {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, SealedEvent>) {
          return {{"type", "sealed"},          {"seq", e.seq},
                  {"sender", e.sender},        {"hmac_prev", to_hex(e.hmac_prev)},
                  {"hmac_cur", to_hex(e.hmac_cur)}, {"nonce", to_hex(e.nonce)},
                  {"cipher", to_hex(e.cipher)}};
        } else if constexpr (std::is_same_v<T, OpEvent>) {
          return {{"type", detail::net_op_name(e.op)}, {"t", e.t}, {"client", e.client},
                  {"seq", e.seq}, {"result", e.result}, {"count", e.count}};
        } else if constexpr (std::is_same_v<T, AcceptEvent>) {
          return {{"type", "accept"},          {"t", e.t},
                  {"client", e.client},        {"seq", e.seq},
                  {"sender", e.sender},        {"hmac_prev", to_hex(e.hmac_prev)},
                  {"hmac_cur", to_hex(e.hmac_cur)}, {"gap", e.gap},
                  {"capacity", e.capacity}};
        } else if constexpr (std::is_same_v<T, DetectEvent>) {
          return {{"type", "detect"}, {"t", e.t}, {"client", e.client},
                  {"kind", to_string(e.detection.kind)}, {"at_seq", e.detection.at_seq},
                  {"details", e.detection.details}};
        } else if constexpr (std::is_same_v<T, KvTraceEvent>) {
          return {{"type", "kv"}, {"t", e.t}, {"client", e.client}, {"what", e.what},
                  {"key", e.key}, {"tx", {e.tx.machine, e.tx.counter}}, {"detail", e.detail}};
        } else if constexpr (std::is_same_v<T, LifecycleEvent>) {
          return {{"type", "lifecycle"}, {"t", e.t}, {"client", e.client}, {"what", e.what}};
        } else if constexpr (std::is_same_v<T, ServerAcceptEvent>) {
          return {{"type", "server_accept"}, {"t", e.t}, {"queue", e.queue}, {"seq", e.seq},
                  {"hmac_cur", to_hex(e.hmac_cur)}};
        } else {
          return {{"type", "eviction_violation"}, {"t", e.t}, {"seq", e.evicted_seq},
                  {"detail", e.detail}};
        }
      },
      ev);
}

inline TraceEvent event_from_json(const nlohmann::json& j) {
  auto type = j.at("type").get<std::string>();
  auto digest = [&](const char* f) { return fixed_from_hex<32>(j.at(f).get<std::string>()); };
  if (type == "sealed") {
    SealedEvent e;
    e.seq = j.at("seq");
    e.sender = j.at("sender");
    e.hmac_prev = digest("hmac_prev");
    e.hmac_cur = digest("hmac_cur");
    e.nonce = fixed_from_hex<16>(j.at("nonce").get<std::string>());
    e.cipher = from_hex(j.at("cipher").get<std::string>());
    return e;
  }
  if (type == "get" || type == "put" || type == "setcap") {
    OpEvent e;
    e.op = detail::net_op_from(type);
    e.t = j.at("t");
    e.client = j.at("client");
    e.seq = j.at("seq");
    e.result = j.at("result");
    e.count = j.at("count");
    return e;
  }
  if (type == "accept") {
    AcceptEvent e;
    e.t = j.at("t");
    e.client = j.at("client");
    e.seq = j.at("seq");
    e.sender = j.at("sender");
    e.hmac_prev = digest("hmac_prev");
    e.hmac_cur = digest("hmac_cur");
    e.gap = j.at("gap");
    e.capacity = j.at("capacity");
    return e;
  }
  if (type == "detect") {
    DetectEvent e;
    e.t = j.at("t");
    e.client = j.at("client");
    e.detection.kind = detail::detection_kind_from(j.at("kind"));
    e.detection.at_seq = j.at("at_seq");
    e.detection.details = j.at("details");
    return e;
  }
  if (type == "kv") {
    KvTraceEvent e;
    e.t = j.at("t");
    e.client = j.at("client");
    e.what = j.at("what");
    e.key = j.at("key");
    e.tx = {j.at("tx")[0].get<MachineId>(), j.at("tx")[1].get<std::uint64_t>()};
    e.detail = j.at("detail");
    return e;
  }
  if (type == "lifecycle") return LifecycleEvent{j.at("t"), j.at("client"), j.at("what")};
  if (type == "server_accept")
    return ServerAcceptEvent{j.at("t"), j.at("queue"), j.at("seq"), digest("hmac_cur")};
  if (type == "eviction_violation") return EvictionViolation{j.at("t"), j.at("seq"), j.at("detail")};
  throw DecodeError("unknown trace event " + type);
}

inline void write_jsonl(std::ostream& out, const Trace& tr) {
  nlohmann::json h = {{"type", "header"},
                      {"seed", tr.header.seed},
                      {"num_clients", tr.header.num_clients},
                      {"capacity", tr.header.capacity},
                      {"block_size", tr.header.block_size},
                      {"adversary", tr.header.adversary},
                      {"auth_key", to_hex(tr.header.keys.auth_key)},
                      {"enc_key", to_hex(tr.header.keys.enc_key)}};
  out << h.dump() << '\n';
  for (const auto& e : tr.events) out << to_json(e).dump() << '\n';
}

inline std::string to_jsonl(const Trace& tr) {
  std::ostringstream s;
  write_jsonl(s, tr);
  return s.str();
}

inline Trace read_jsonl(std::istream& in) {
  Trace tr;
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (!have_header) {
        if (j.at("type") != "header") throw DecodeError("trace must start with a header");
        tr.header.seed = j.at("seed");
        tr.header.num_clients = j.at("num_clients");
        tr.header.capacity = j.at("capacity");
        tr.header.block_size = j.at("block_size");
        tr.header.adversary = j.at("adversary");
        tr.header.keys.auth_key = fixed_from_hex<32>(j.at("auth_key").get<std::string>());
        tr.header.keys.enc_key = fixed_from_hex<32>(j.at("enc_key").get<std::string>());
        have_header = true;
        continue;
      }
      tr.events.push_back(event_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw DecodeError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw DecodeError("empty trace");
  return tr;
}

}  // namespace chv::sim
