#pragma once

#include <random>

#include "chv/simnet/checker.hpp"
#include "chv/simnet/sim.hpp"

namespace chv::testing {

// Round-robin syncs over `clients`, one per time unit.
inline std::vector<sim::ScheduleEvent> round_robin(std::size_t clients, std::size_t syncs, sim::Time t0 = 1) {
  std::vector<sim::ScheduleEvent> s;
  for (std::size_t i = 0; i < syncs; ++i)
    s.push_back({t0 + i, sim::Op::Sync, static_cast<MachineId>(1 + i % clients), {}});
  return s;
}

inline sim::ScheduleEvent tx_event(sim::Time t, MachineId c,
                                   std::vector<std::pair<std::string, std::string>> w) {
  return {t, sim::Op::Tx, c, std::move(w)};
}

}  // namespace chv::testing
