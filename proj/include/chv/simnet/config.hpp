#pragma once

#include <functional>
#include <memory>
#include <set>
#include <json.hpp>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "chv/envelope.hpp"
#include "chv/server.hpp"

namespace chv::sim {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Time = std::uint64_t;

enum class Op { Sync, Tx, Sleep, Wake, NetDown, NetUp };

inline const char* to_string(Op op) {
  switch (op) {
    case Op::Sync: return "sync";
    case Op::Tx: return "tx";
    case Op::Sleep: return "sleep";
    case Op::Wake: return "wake";
    case Op::NetDown: return "net_down";
    case Op::NetUp: return "net_up";
  }
  return "?";
}

struct ScheduleEvent {
  Time t = 0;
  Op op = Op::Sync;
  MachineId client = 0;
  std::vector<std::pair<std::string, std::string>> writes;  // Tx only
};

struct KeySpec {
  std::string name;
  MachineId arbitrator = 0;
};

// Adversary scripts. They act at the server boundary and never see keys.
struct Honest {};
struct DuplicateSeq {
  SeqNo at_seq = 0;
};
struct ReplayRejected {
  SeqNo target_seq = 0;
};
struct SwapSeq {
  SeqNo seq_a = 0, seq_b = 0;
};
struct Partition {
  std::vector<std::vector<MachineId>> groups;
  Time from = 0;
  std::optional<Time> heal;
};
struct DropAfterAck {
  SeqNo at_seq = 0;
};
struct Withhold {
  MachineId client = 0;
  Time from = 0, until = 0;
};

class ServerHooks;
// In-process hook; not serializable.
struct Custom {
  std::function<std::unique_ptr<ServerHooks>()> make;
  std::string name = "Custom";
};

using AdversaryScript =
    std::variant<Honest, DuplicateSeq, ReplayRejected, SwapSeq, Partition, DropAfterAck, Withhold, Custom>;

inline std::string adversary_name(const AdversaryScript& a) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Honest>) return "Honest";
        if constexpr (std::is_same_v<T, DuplicateSeq>) return "DuplicateSeq";
        if constexpr (std::is_same_v<T, ReplayRejected>) return "ReplayRejected";
        if constexpr (std::is_same_v<T, SwapSeq>) return "SwapSeq";
        if constexpr (std::is_same_v<T, Partition>) return "Partition";
        if constexpr (std::is_same_v<T, DropAfterAck>) return "DropAfterAck";
        if constexpr (std::is_same_v<T, Withhold>) return "Withhold";
        if constexpr (std::is_same_v<T, Custom>) return x.name;
        return "?";
      },
      a);
}

struct SimConfig {
  std::uint64_t seed = 1;
  std::size_t num_clients = 2;
  std::uint64_t capacity = 8;
  std::size_t block_size = 1024;
  std::vector<KeySpec> keys;
  std::vector<ScheduleEvent> schedule;
  AdversaryScript adversary = Honest{};
  unsigned drain_rounds = 3;
  unsigned max_drain_rounds = 200;  // cap while waiting for an attack to play out
  Time max_put_delay = 2;           // virtual time between a sync's getmsg and putmsg
  bool instrument_evictions = false;
  bool record_ciphertexts = true;

  void validate() const {
    if (num_clients == 0) throw ConfigError("num_clients must be >= 1");
    if (capacity == 0) throw ConfigError("capacity must be >= 1");
    if (block_size < kMinBlockSize) throw ConfigError("block_size too small");
    auto check_client = [&](MachineId c, const char* what) {
      if (c < 1 || c > num_clients)
        throw ConfigError(std::string(what) + ": client " + std::to_string(c) + " out of range");
    };
    std::set<std::string> names;
    for (const auto& k : keys) {
      check_client(k.arbitrator, "key arbitrator");
      if (k.name.empty() || k.name.size() > 64) throw ConfigError("bad key name");
      if (!names.insert(k.name).second) throw ConfigError("duplicate key " + k.name);
    }
    Time prev = 0;
    for (const auto& e : schedule) {
      if (e.t < prev) throw ConfigError("schedule is not time-sorted");
      prev = e.t;
      check_client(e.client, "schedule");
      if (e.op == Op::Tx && e.writes.empty()) throw ConfigError("tx event without writes");
    }
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, DuplicateSeq> || std::is_same_v<T, DropAfterAck>) {
            if (a.at_seq < 2) throw ConfigError("at_seq must be >= 2");
          } else if constexpr (std::is_same_v<T, ReplayRejected>) {
            if (a.target_seq < 2) throw ConfigError("target_seq must be >= 2");
            if (num_clients < 3) throw ConfigError("ReplayRejected needs at least 3 clients");
          } else if constexpr (std::is_same_v<T, SwapSeq>) {
            if (a.seq_a == 0 || a.seq_a >= a.seq_b) throw ConfigError("SwapSeq needs 0 < seq_a < seq_b");
          } else if constexpr (std::is_same_v<T, Partition>) {
            std::set<MachineId> seen;
            for (const auto& g : a.groups)
              for (auto c : g) {
                check_client(c, "partition");
                if (!seen.insert(c).second) throw ConfigError("client in two partition groups");
              }
            if (a.groups.size() < 2) throw ConfigError("partition needs at least two groups");
            if (a.heal && *a.heal <= a.from) throw ConfigError("heal must come after from");
          } else if constexpr (std::is_same_v<T, Withhold>) {
            check_client(a.client, "withhold");
            if (a.until <= a.from) throw ConfigError("withhold window is empty");
          } else if constexpr (std::is_same_v<T, Custom>) {
            if (!a.make) throw ConfigError("custom adversary without a factory");
          }
        },
        adversary);
  }
};

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const AdversaryScript& a) {
  using nlohmann::json;
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        json j;
        if constexpr (std::is_same_v<T, Honest>) {
          j["type"] = "Honest";
        } else if constexpr (std::is_same_v<T, DuplicateSeq>) {
          j = {{"type", "DuplicateSeq"}, {"at_seq", x.at_seq}};
        } else if constexpr (std::is_same_v<T, ReplayRejected>) {
          j = {{"type", "ReplayRejected"}, {"target_seq", x.target_seq}};
        } else if constexpr (std::is_same_v<T, SwapSeq>) {
          j = {{"type", "SwapSeq"}, {"seq_a", x.seq_a}, {"seq_b", x.seq_b}};
        } else if constexpr (std::is_same_v<T, Partition>) {
          j = {{"type", "Partition"}, {"groups", x.groups}, {"from", x.from}};
          if (x.heal) j["heal"] = *x.heal;
        } else if constexpr (std::is_same_v<T, DropAfterAck>) {
          j = {{"type", "DropAfterAck"}, {"at_seq", x.at_seq}};
        } else if constexpr (std::is_same_v<T, Withhold>) {
          j = {{"type", "Withhold"}, {"client", x.client}, {"from", x.from}, {"until", x.until}};
        } else {
          throw ConfigError("custom adversaries cannot be serialized");
        }
        return j;
      },
      a);
}

inline AdversaryScript adversary_from_json(const nlohmann::json& j) {
  auto type = j.at("type").get<std::string>();
  if (type == "Honest") return Honest{};
  if (type == "DuplicateSeq") return DuplicateSeq{j.at("at_seq").get<SeqNo>()};
  if (type == "ReplayRejected") return ReplayRejected{j.at("target_seq").get<SeqNo>()};
  if (type == "SwapSeq") return SwapSeq{j.at("seq_a").get<SeqNo>(), j.at("seq_b").get<SeqNo>()};
  if (type == "Partition") {
    Partition p;
    p.groups = j.at("groups").get<std::vector<std::vector<MachineId>>>();
    p.from = j.at("from").get<Time>();
    if (j.contains("heal")) p.heal = j.at("heal").get<Time>();
    return p;
  }
  if (type == "DropAfterAck") return DropAfterAck{j.at("at_seq").get<SeqNo>()};
  if (type == "Withhold")
    return Withhold{j.at("client").get<MachineId>(), j.at("from").get<Time>(), j.at("until").get<Time>()};
  throw ConfigError("unknown adversary type " + type);
}

inline nlohmann::json to_json(const SimConfig& c) {
  using nlohmann::json;
  json keys = json::array();
  for (const auto& k : c.keys) keys.push_back({{"name", k.name}, {"arbitrator", k.arbitrator}});
  json sched = json::array();
  for (const auto& e : c.schedule) {
    json ev = {{"t", e.t}, {"op", to_string(e.op)}, {"client", e.client}};
    if (e.op == Op::Tx) {
      json w = json::object();
      for (const auto& [k, v] : e.writes) w[k] = v;
      ev["writes"] = w;
    }
    sched.push_back(ev);
  }
  return {{"seed", c.seed},
          {"num_clients", c.num_clients},
          {"capacity", c.capacity},
          {"block_size", c.block_size},
          {"keys", keys},
          {"schedule", sched},
          {"adversary", to_json(c.adversary)},
          {"drain_rounds", c.drain_rounds},
          {"max_drain_rounds", c.max_drain_rounds},
          {"max_put_delay", c.max_put_delay},
          {"instrument_evictions", c.instrument_evictions}};
}

inline SimConfig config_from_json(const nlohmann::json& j) {
  SimConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{1});
    c.num_clients = j.at("num_clients").get<std::size_t>();
    c.capacity = j.value("capacity", std::uint64_t{8});
    c.block_size = j.value("block_size", std::size_t{1024});
    for (const auto& k : j.value("keys", nlohmann::json::array()))
      c.keys.push_back({k.at("name").get<std::string>(), k.at("arbitrator").get<MachineId>()});
    for (const auto& e : j.value("schedule", nlohmann::json::array())) {
      ScheduleEvent ev;
      ev.t = e.at("t").get<Time>();
      ev.client = e.at("client").get<MachineId>();
      auto op = e.at("op").get<std::string>();
      if (op == "sync") ev.op = Op::Sync;
      else if (op == "tx") ev.op = Op::Tx;
      else if (op == "sleep") ev.op = Op::Sleep;
      else if (op == "wake") ev.op = Op::Wake;
      else if (op == "net_down") ev.op = Op::NetDown;
      else if (op == "net_up") ev.op = Op::NetUp;
      else throw ConfigError("unknown schedule op " + op);
      if (ev.op == Op::Tx)
        for (const auto& [k, v] : e.at("writes").items()) ev.writes.emplace_back(k, v.get<std::string>());
      c.schedule.push_back(std::move(ev));
    }
    if (j.contains("adversary")) c.adversary = adversary_from_json(j.at("adversary"));
    c.drain_rounds = j.value("drain_rounds", 3u);
    c.max_drain_rounds = j.value("max_drain_rounds", 200u);
    c.max_put_delay = j.value("max_put_delay", Time{2});
    c.instrument_evictions = j.value("instrument_evictions", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scenario: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace chv::sim
