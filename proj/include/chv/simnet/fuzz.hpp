#pragma once

#include <algorithm>
#include <random>

#include "chv/simnet/config.hpp"

namespace chv::sim {

struct FuzzShape {
  std::size_t min_clients = 2, max_clients = 4;
  std::vector<std::uint64_t> capacities{4, 6, 8, 12};
  Time min_len = 60, max_len = 200;
  bool sleeps = true;
  bool net_outages = true;
};

// Random honest workload: syncs, transactions, sleeps and network outages, one event per
// time unit per client at most. Resizes follow from the live-record load.
inline SimConfig fuzz_honest(std::uint64_t seed, const FuzzShape& shape = {}) {
  std::mt19937_64 g(seed * 0x9e3779b97f4a7c15ULL + 1);
  auto pick = [&](auto lo, auto hi) { return std::uniform_int_distribution<decltype(hi)>(lo, hi)(g); };

  SimConfig c;
  c.seed = seed;
  c.num_clients = pick(shape.min_clients, shape.max_clients);
  c.capacity = shape.capacities[pick(std::size_t{0}, shape.capacities.size() - 1)];
  const std::size_t nkeys = pick(std::size_t{1}, std::size_t{6});
  for (std::size_t k = 0; k < nkeys; ++k)
    c.keys.push_back({"key" + std::to_string(k), pick(MachineId{1}, MachineId{c.num_clients})});

  const Time len = pick(shape.min_len, shape.max_len);
  std::vector<bool> asleep(c.num_clients + 1, false), down(c.num_clients + 1, false);
  std::vector<ScheduleEvent> later;  // wake and net_up, merged as time passes
  auto awake_count = [&] { return std::count(asleep.begin() + 1, asleep.end(), false); };
  auto random_client = [&] { return pick(MachineId{1}, MachineId{c.num_clients}); };

  for (Time t = 1; t <= len; ++t) {
    std::sort(later.begin(), later.end(), [](auto& a, auto& b) { return a.t < b.t; });
    while (!later.empty() && later.front().t <= t) {
      auto e = later.front();
      later.erase(later.begin());
      e.t = t;
      (e.op == Op::Wake ? asleep : down)[e.client] = false;
      c.schedule.push_back(e);
    }
    MachineId id = random_client();
    auto roll = pick(0, 99);
    if (roll < 55) {
      if (!asleep[id]) c.schedule.push_back({t, Op::Sync, id, {}});
    } else if (roll < 78) {
      if (asleep[id]) continue;
      const auto& arb = c.keys[pick(std::size_t{0}, c.keys.size() - 1)].arbitrator;
      std::vector<std::pair<std::string, std::string>> w;
      for (const auto& k : c.keys)
        if (k.arbitrator == arb && (w.empty() || pick(0, 2) == 0)) {
          std::size_t n = pick(0, 9) == 0 ? pick(std::size_t{100}, std::size_t{300}) : pick(std::size_t{1}, std::size_t{24});
          std::string v(n, 'a');
          for (auto& ch : v) ch = static_cast<char>('a' + pick(0, 25));
          w.emplace_back(k.name, std::move(v));
        }
      c.schedule.push_back({t, Op::Tx, id, std::move(w)});
    } else if (roll < 85) {
      if (!shape.sleeps || asleep[id] || awake_count() < 2) continue;
      asleep[id] = true;
      c.schedule.push_back({t, Op::Sleep, id, {}});
      later.push_back({t + pick(Time{3}, Time{60}), Op::Wake, id, {}});
    } else if (roll < 90) {
      if (!shape.net_outages || down[id]) continue;
      down[id] = true;
      c.schedule.push_back({t, Op::NetDown, id, {}});
      later.push_back({t + pick(Time{2}, Time{30}), Op::NetUp, id, {}});
    }
  }
  std::sort(later.begin(), later.end(), [](auto& a, auto& b) { return a.t < b.t; });
  for (auto e : later) {
    e.t = std::max(e.t, len + 1);
    c.schedule.push_back(e);
  }
  return c;
}

// An honest-shaped workload for three clients with a random server attack.
inline SimConfig fuzz_adversarial(std::uint64_t seed) {
  FuzzShape shape;
  shape.min_clients = shape.max_clients = 3;
  shape.max_len = 120;
  SimConfig c = fuzz_honest(seed, shape);
  std::mt19937_64 g(seed ^ 0xad7e55a1ULL);
  auto pick = [&](auto lo, auto hi) { return std::uniform_int_distribution<decltype(hi)>(lo, hi)(g); };
  SeqNo s = pick(SeqNo{2}, SeqNo{25});
  Time from = pick(Time{1}, Time{60});
  switch (pick(0, 5)) {
    case 0: c.adversary = DuplicateSeq{s}; break;
    case 1: c.adversary = ReplayRejected{s}; break;
    case 2: c.adversary = SwapSeq{s, s + pick(SeqNo{1}, SeqNo{6})}; break;
    case 3: c.adversary = Withhold{pick(MachineId{1}, MachineId{3}), from, from + pick(Time{1}, Time{50})}; break;
    case 4: c.adversary = DropAfterAck{s}; break;
    default: {
      Partition p;
      MachineId lone = pick(MachineId{1}, MachineId{3});
      p.groups = {{lone}, {}};
      for (MachineId m = 1; m <= 3; ++m)
        if (m != lone) p.groups[1].push_back(m);
      p.from = from;
      if (pick(0, 1)) p.heal = from + pick(Time{1}, Time{40});
      c.adversary = p;
    }
  }
  return c;
}

enum class Attack { DuplicateSeq, ReplayRejected, SwapSeq };

// Three clients, capacity 8, a short random workload with the given attack.
inline SimConfig attack_scenario(Attack a, std::uint64_t seed) {
  std::mt19937_64 g(seed * 31 + static_cast<int>(a));
  auto pick = [&](auto lo, auto hi) { return std::uniform_int_distribution<decltype(hi)>(lo, hi)(g); };
  SimConfig c;
  c.seed = seed;
  c.num_clients = 3;
  c.capacity = 8;
  c.keys = {{"k1", 1}, {"k2", 2}};
  Time t = 1;
  for (int i = 0, n = pick(10, 40); i < n; ++i, ++t) {
    MachineId id = pick(MachineId{1}, MachineId{3});
    if (pick(0, 4) == 0)
      c.schedule.push_back({t, Op::Tx, id, {{pick(0, 1) ? "k1" : "k2", std::to_string(i)}}});
    else
      c.schedule.push_back({t, Op::Sync, id, {}});
  }
  SeqNo s = pick(SeqNo{2}, SeqNo{15});
  switch (a) {
    case Attack::DuplicateSeq: c.adversary = DuplicateSeq{s}; break;
    case Attack::ReplayRejected: c.adversary = ReplayRejected{s}; break;
    case Attack::SwapSeq: c.adversary = SwapSeq{s, s + pick(SeqNo{1}, SeqNo{5})}; break;
  }
  return c;
}

}  // namespace chv::sim
