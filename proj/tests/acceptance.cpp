// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <spdlog/spdlog.h>
#include <string>

#include "brute_force.hpp"
#include "chv/netd/daemon.hpp"
#include "chv/netd/tcp_transport.hpp"
#include "chv/netd/wire.hpp"
#include "chv/simnet/checker.hpp"
#include "chv/simnet/fuzz.hpp"
#include "chv/simnet/oracle.hpp"
#include "chv/simnet/sim.hpp"
#include "cluster.hpp"
#include "support.hpp"

using namespace chv;
using namespace chv::sim;
using chv::testing::Cluster;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome attacks_detected() {
  auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (auto a : {Attack::DuplicateSeq, Attack::ReplayRejected, Attack::SwapSeq}) {
    int hit = 0;
    std::string name;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      auto c = attack_scenario(a, seed);
      name = adversary_name(c.adversary);
      Simulator s(c);
      hit += s.run().detections() >= 1;
    }
    ok &= hit == 1000;
    detail += name + " " + std::to_string(hit) + "/1000, ";
  }
  double secs = seconds_since(t0);
  ok &= secs < 60;
  return {ok, detail + std::to_string(secs) + " s (limit 60)"};
}

// ---------------------------------------------------------------- 2

Outcome no_false_positives() {
  auto t0 = Clock::now();
  std::size_t runs_with_detection = 0, messages = 0;
  std::uint64_t first_bad = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    Simulator s(fuzz_honest(1'000'000 + seed));
    const auto& tr = s.run();
    messages += tr.count<ServerAcceptEvent>();
    if (tr.detections() && !runs_with_detection++) first_bad = 1'000'000 + seed;
  }
  double secs = seconds_since(t0);
  std::string d = std::to_string(runs_with_detection) + "/10000 runs with a detection, " +
                  std::to_string(messages) + " messages, " + std::to_string(secs) + " s (limit 300)";
  if (runs_with_detection) d += ", first seed " + std::to_string(first_bad);
  return {runs_with_detection == 0 && secs < 300, d};
}

// ---------------------------------------------------------------- 3

// Adversarial schedule cut short so the trace stays small enough to enumerate.
SimConfig short_adversarial(std::uint64_t seed) {
  auto c = fuzz_adversarial(seed);
  const Time stop = 4 + seed % 10;
  std::erase_if(c.schedule, [&](const ScheduleEvent& e) { return e.t > stop; });
  c.drain_rounds = 1 + seed % 2;
  c.max_drain_rounds = 3;
  return c;
}

Outcome fork_consistency() {
  std::size_t counts[3] = {0, 0, 0};
  std::size_t cross = 0, disagree = 0;
  auto check = [&](const Trace& tr, bool tally) {
    auto v = check_fork_consistency(tr);
    if (tally) ++counts[static_cast<int>(v.kind)];
    if (tr.count<SealedEvent>() <= 12) {
      ++cross;
      disagree += (v.kind != Verdict::Kind::Inconsistent) != chv::testing::brute_force_consistent(tr);
    }
  };
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Simulator s(fuzz_adversarial(seed));
    check(s.run(), true);
  }
  const std::size_t from_main = cross;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Simulator s(short_adversarial(seed));
    check(s.run(), false);
  }
  const auto inconsistent = counts[static_cast<int>(Verdict::Kind::Inconsistent)];
  std::string d = std::to_string(counts[static_cast<int>(Verdict::Kind::ForkConsistent)]) + " ForkConsistent, " +
                  std::to_string(counts[static_cast<int>(Verdict::Kind::DetectedViolation)]) +
                  " DetectedViolation, " + std::to_string(inconsistent) + " INCONSISTENT; brute force on " +
                  std::to_string(cross) + " traces <= 12 messages (" + std::to_string(from_main) +
                  " from the main sample), " + std::to_string(disagree) + " disagreements";
  return {inconsistent == 0 && disagree == 0 && cross >= 500, d};
}

// ---------------------------------------------------------------- 4 and 5

struct ReconstructionResult {
  Outcome reconstruction, refresh;
};

ReconstructionResult reconstruction() {
  FuzzShape shape;
  shape.capacities = {8};
  shape.min_len = 450;  // roughly a third of the time units end in an accepted put
  shape.max_len = 600;
  std::size_t runs = 0, equal = 0, short_skipped = 0, violations = 0, evictions = 0;
  std::uint64_t first_bad = 0;
  for (std::uint64_t seed = 0; runs < 500 && seed < 5000; ++seed) {
    auto c = fuzz_honest(2'000'000 + seed, shape);
    c.instrument_evictions = true;
    Simulator s(c);
    const auto& tr = s.run();
    const auto msgs = tr.all<ServerAcceptEvent>();
    const auto accepted = std::count_if(msgs.begin(), msgs.end(), [](auto& e) { return e.queue == 0; });
    if (accepted < 100) {
      ++short_skipped;
      continue;
    }
    ++runs;
    evictions += static_cast<std::size_t>(accepted) - s.server().primary().entries().size();
    violations += s.eviction_violations();
    auto fresh = s.reconstruct_fresh();
    auto o = oracle_replay(tr);
    if (canonical_bytes(fresh.kv().committed()) == canonical_bytes(o.final_state))
      ++equal;
    else if (!first_bad)
      first_bad = 2'000'000 + seed;
  }
  std::string d4 = std::to_string(equal) + "/" + std::to_string(runs) + " byte-equal snapshots (" + std::to_string(short_skipped) +
                   " generated workloads under 100 messages skipped)";
  if (first_bad) d4 += ", first mismatch seed " + std::to_string(first_bad);
  std::string d5 = std::to_string(violations) + " live records evicted over " + std::to_string(evictions) +
                   " evictions";
  return {{runs == 500 && equal == 500, d4}, {violations == 0 && evictions > 0, d5}};
}

// ---------------------------------------------------------------- 6

// Syncs every replica once per round, in a fresh random order each round.
void settle(Cluster& c, std::mt19937_64& g, int rounds = 6) {
  std::vector<std::size_t> order(c.replicas.size());
  std::iota(order.begin(), order.end(), 0);
  for (int r = 0; r < rounds; ++r) {
    std::shuffle(order.begin(), order.end(), g);
    for (auto i : order) c.sync(i);
  }
}

// Independent view of the chain: the first decision published for each transaction.
struct ChainWatcher {
  explicit ChainWatcher(const ServerQueue& q, SecretKeys k) : q_(q), keys_(k) {}
  void poll() {
    for (const auto& m : q_.entries()) see(m);
  }
  void see(const SealedMessage& m) {
    if (m.seq <= seen_) return;
    seen_ = m.seq;
    for (const auto& r : open(m, keys_).records) {
      if (auto* c = std::get_if<Commit>(&r)) decisions.try_emplace(c->id, true);
      if (auto* a = std::get_if<Abort>(&r)) decisions.try_emplace(a->id, false);
    }
  }
  std::map<TxId, bool> decisions;  // true = Commit

 private:
  const ServerQueue& q_;
  SecretKeys keys_;
  SeqNo seen_ = 0;
};

bool heat_race(std::uint64_t seed, std::string& why, bool& off_won) {
  std::mt19937_64 g(seed);
  // 1 = phone, 2 = thermostat (arbitrator), 3 = wall panel
  Cluster c({1, 2, 3}, 8, seed);
  c[1].create_key("mode", 2);
  settle(c, g, 2);
  auto h0 = c[1].start_transaction();
  c[1].put(h0, "mode", "HEAT");
  c[1].submit(h0);
  settle(c, g, 3);
  if (c[0].get_committed("mode") != std::optional<Value>("HEAT")) return why = "HEAT never committed", false;

  ChainWatcher w(c.server, chv::testing::keys_from_seed(42));
  w.poll();
  c.server.on_evict([&](const SealedMessage& gone, const ServerQueue&) { w.see(gone); });
  auto off = c[0].start_transaction();
  c[0].put(off, "mode", "OFF");
  auto cool = c[2].start_transaction();
  c[2].put(cool, "mode", "COOL");
  bool off_in = false, cool_in = false;
  // random interleaving of submissions and syncs by all three machines
  while (!off_in || !cool_in || g() % 3) {
    auto who = g() % 5;
    if (who == 3 && !off_in) {
      c[0].submit(off);
      off_in = true;
    } else if (who == 4 && !cool_in) {
      c[2].submit(cool);
      cool_in = true;
    } else if (who < 3) {
      c.sync(who);
    }
    w.poll();
  }
  for (int i = 0; i < 8; ++i) {
    c.sync(g() % 3);
    w.poll();
  }
  settle(c, g);
  w.poll();

  auto so = c[0].status(off), sc = c[2].status(cool);
  off_won = so == TxStatus::Committed;
  if ((so == TxStatus::Committed) + (sc == TxStatus::Committed) != 1 ||
      (so == TxStatus::Aborted) + (sc == TxStatus::Aborted) != 1)
    return why = "statuses " + std::string(to_string(so)) + "/" + to_string(sc), false;
  if (!w.decisions.count(off.id) || !w.decisions.count(cool.id)) return why = "a decision never reached the chain", false;
  if (w.decisions[off.id] != off_won || w.decisions[cool.id] == off_won)
    return why = "chain decisions disagree with client status", false;
  const Value winner = off_won ? "OFF" : "COOL";
  for (std::size_t k = 0; k < 3; ++k)
    if (c[k].get_committed("mode") != std::optional<Value>(winner)) return why = "replicas diverge", false;
  return true;
}

// Every submission order for n racing transactions; the first one to reach the chain wins.
std::size_t brute_force_race(std::size_t n) {
  std::size_t bad = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 1);
  std::mt19937_64 g(n);
  do {
    std::vector<MachineId> ids{10};
    for (std::size_t i = 1; i <= n; ++i) ids.push_back(i);
    Cluster c(ids, 16);
    c[0].create_key("x", 10);
    settle(c, g, 2);
    auto h0 = c[0].start_transaction();
    c[0].put(h0, "x", "init");
    c[0].commit_transaction(h0, c.transport(0));
    settle(c, g, 2);
    std::vector<TxHandle> hs(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
      hs[i] = c[i].start_transaction();
      c[i].put(hs[i], "x", "v" + std::to_string(i));
    }
    for (auto i : order) c[i].commit_transaction(hs[i], c.transport(i));
    settle(c, g);
    const std::size_t winner = order.front();
    for (std::size_t i = 1; i <= n; ++i)
      bad += c[i].status(hs[i]) != (i == winner ? TxStatus::Committed : TxStatus::Aborted);
    for (std::size_t k = 0; k <= n; ++k)
      bad += c[k].get_committed("x") != std::optional<Value>("v" + std::to_string(winner));
  } while (std::next_permutation(order.begin(), order.end()));
  return bad;
}

Outcome arbitration() {
  std::size_t good = 0, off_wins = 0;
  std::string first_why;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::string why;
    bool off_won = false;
    if (heat_race(seed, why, off_won)) {
      ++good;
      off_wins += off_won;
    } else if (first_why.empty()) {
      first_why = "seed " + std::to_string(seed) + ": " + why;
    }
  }
  std::size_t brute_bad = 0, perms = 0;
  for (std::size_t n = 2; n <= 4; ++n) {
    brute_bad += brute_force_race(n);
    std::size_t f = 1;
    for (std::size_t i = 2; i <= n; ++i) f *= i;
    perms += f;
  }
  std::string d = std::to_string(good) + "/200 races with one Commit, one Abort and convergence; " +
                  std::to_string(perms) + " brute-force orderings for N<=4, " + std::to_string(brute_bad) +
                  " mismatches; OFF won " + std::to_string(off_wins) + " times";
  if (!first_why.empty()) d += "; " + first_why;
  // the randomized order must actually exercise both outcomes
  return {good == 200 && brute_bad == 0 && off_wins > 0 && off_wins < 200, d};
}

// ---------------------------------------------------------------- 7

Outcome traffic_uniformity() {
  constexpr std::size_t kBlock = 1024;
  netd::DaemonConfig cfg;
  cfg.capacity = 512;  // large enough that no client ever resizes
  cfg.log_frames = true;
  netd::Daemon d(cfg);
  d.start();
  std::mt19937_64 g(7);
  std::vector<MachineId> ids{1, 2, 3};
  std::vector<Replica> rs;
  std::vector<std::unique_ptr<netd::TcpTransport>> ts;
  for (auto id : ids) {
    ClientConfig c;
    c.machine_id = id;
    c.keys = chv::testing::keys_from_seed(7);
    c.initial_capacity = cfg.capacity;
    c.known_clients = ids;
    rs.emplace_back(c);
    ts.push_back(std::make_unique<netd::TcpTransport>("127.0.0.1", d.port(), kBlock));
  }
  rs[0].create_key("lamp", 1);
  rs[1].create_key("fan", 2);
  std::size_t loaded = 0, empty = 0, failures = 0;
  for (int i = 0; i < 6; ++i) rs[i % 3].sync(*ts[i % 3]);  // everyone learns both keys
  for (int i = 0; i < 100; ++i) {
    auto k = g() % 3;
    if (g() % 2) {
      auto h = rs[k].start_transaction();
      rs[k].put(h, g() % 2 ? "lamp" : "fan", std::string(1 + g() % 200, 'x'));
      rs[k].submit(h);
      ++loaded;
    } else {
      ++empty;
    }
    auto rep = rs[k].sync(*ts[k]);
    failures += rep.fetch.network_failure || rep.fetch.detection.has_value();
  }
  d.stop();

  const auto sessions = d.sessions();
  std::size_t strict = 0;
  std::optional<Bytes> put_shape;  // header bytes of the first putmsg frame
  std::optional<std::size_t> put_len;
  bool lengths_equal = true;
  for (const auto& s : sessions) {
    if (s.frames.size() != 2) continue;
    const auto& get = s.frames[0];
    const auto& put = s.frames[1];
    bool ok = get.size() == netd::kFrameHeader + 8 && get[4] == static_cast<std::uint8_t>(netd::WireOp::GetMsg) &&
              put.size() >= netd::kFrameHeader && put[4] == static_cast<std::uint8_t>(netd::WireOp::PutMsg);
    if (!ok) continue;
    ++strict;
    Bytes header(put.begin(), put.begin() + netd::kFrameHeader);
    if (!put_shape) put_shape = header, put_len = put.size();
    lengths_equal &= header == *put_shape && put.size() == *put_len;
  }
  const bool pass = sessions.size() == 106 && strict == 106 && lengths_equal && failures == 0 &&
                    put_len == netd::kFrameHeader + 8 + 16 + kBlock && loaded > 0 && empty > 0;
  std::string detail = std::to_string(sessions.size()) + " sessions (" + std::to_string(loaded) + " loaded, " +
                       std::to_string(empty) + " empty, 6 setup), " + std::to_string(strict) +
                       " strictly get-then-put, putmsg frames " +
                       (lengths_equal ? "all " + std::to_string(put_len.value_or(0)) + " bytes"
                                      : std::string("of differing length"));
  return {pass, detail};
}

// ---------------------------------------------------------------- 8

struct Decrypted {
  QueueView view;
  std::map<MachineId, SeqNo> last_sent;
};

Outcome rejection_bookkeeping() {
  const auto keys = chv::testing::keys_from_seed(42);
  Cluster c({1, 2, 3}, 6);
  std::map<MachineId, SeqNo> global_last{{1, 0}, {2, 0}, {3, 0}};
  SeqNo polled = 0;
  auto poll = [&] {
    for (const auto& m : c.server.entries())
      if (m.seq > polled) {
        polled = m.seq;
        auto b = open(m, keys);
        global_last[b.machine_id] = std::max(global_last[b.machine_id], b.seq_e);
      }
  };
  auto entry = [&](const SealedMessage& m) {
    auto b = open(m, keys);
    return ViewEntry{b.seq_e, b.machine_id, b.hmac_prev, b.hmac_cur, b.records};
  };
  auto rm_positions = [](const ViewEntry& e) {
    std::vector<std::size_t> at;
    for (std::size_t i = 0; i < e.records.size(); ++i)
      if (std::holds_alternative<RejectedMessages>(e.records[i])) at.push_back(i);
    return at;
  };

  // liveness instrumentation on the server: a live RejectedMessages must never leave the queue
  std::size_t live_evicted = 0, rm_evicted = 0;
  c.server.on_evict([&](const SealedMessage& gone, const ServerQueue& q) {
    poll();
    QueueView v;
    v.capacity = q.capacity();
    v.entries.push_back(entry(gone));
    for (const auto& m : q.entries()) v.entries.push_back(entry(m));
    LivenessIndex idx(v, global_last);
    for (auto i : rm_positions(v.entries.front())) {
      ++rm_evicted;
      live_evicted += !idx.is_dead(v.entries.front().records[i], {v.entries.front().seq, i});
    }
  });

  // machine 2 takes seq 1 behind machine 1's back, so machine 1's first put is rejected
  c.sync(1);
  poll();
  auto first = c[0].client().send_once(c.transport(0));
  if (!std::holds_alternative<RejectedAttempt>(first)) return {false, "scripted rejection did not happen"};
  c.sync(0);
  poll();
  std::optional<RejectedMessages> rm;
  SeqNo origin = 0;
  for (const auto& m : c.server.entries()) {
    auto e = entry(m);
    for (auto i : rm_positions(e)) rm = std::get<RejectedMessages>(e.records[i]), origin = e.seq;
  }
  if (!rm || rm->id != 1) return {false, "no RejectedMessages record for machine 1"};

  // latest copy in the queue and whether the global oracle calls it dead
  auto latest = [&]() -> std::optional<bool> {
    QueueView v;
    v.capacity = c.server.capacity();
    for (const auto& m : c.server.entries()) v.entries.push_back(entry(m));
    LivenessIndex idx(v, global_last);
    std::optional<bool> dead;
    for (const auto& e : v.entries)
      for (auto i : rm_positions(e))
        if (std::get<RejectedMessages>(e.records[i]) == *rm) dead = idx.is_dead(e.records[i], {e.seq, i});
    return dead;
  };

  // machines 1 and 2 keep writing; machine 3 stays silent, so its last-sent seq is 0
  std::size_t live_rounds = 0;
  bool held = true;
  for (int i = 0; i < 30; ++i) {
    c.sync(i % 2);
    poll();
    auto st = latest();
    held &= st.has_value() && !*st;
    live_rounds += st.has_value() && !*st;
  }
  const bool truncated = c.server.entries().front().seq > origin + 2 * c.server.capacity();

  // machine 3 writes once: every client has now sent past s_first
  c.sync(2);
  poll();
  auto after = latest();
  const bool dead_now = after.has_value() && *after;
  for (int i = 0; i < 3 * static_cast<int>(c.server.capacity()); ++i) {
    c.sync(i % 3);
    poll();
  }
  const bool gone = !latest().has_value();

  const bool pass = held && truncated && dead_now && gone && live_evicted == 0 && rm_evicted > 0;
  std::string d = "record {id 1, seqs " + std::to_string(rm->s_low) + ".." + std::to_string(rm->s_high) +
                  ", s_first " + std::to_string(rm->s_first) + "} live for " + std::to_string(live_rounds) +
                  "/30 syncs while machine 3 was silent" + (truncated ? " across truncations" : " (no truncation)") +
                  ", dead after machine 3 sent: " + (dead_now ? "yes" : "no") +
                  ", dropped from the queue afterwards: " + (gone ? "yes" : "no") + ", " +
                  std::to_string(live_evicted) + " live copies evicted of " + std::to_string(rm_evicted);
  return {pass, d};
}

// ---------------------------------------------------------------- 9

Outcome envelope() {
  std::mt19937_64 g(9);
  ChainConfig cfg;
  std::size_t identical = 0;
  for (int i = 0; i < 1000; ++i) {
    auto keys = chv::testing::keys_from_seed(g());
    PlainBody b;
    b.seq_e = 1 + g() % 1'000'000;
    b.machine_id = g();
    for (auto& x : b.hmac_prev) x = static_cast<std::uint8_t>(g());
    std::size_t budget = record_capacity(cfg);
    for (int n = static_cast<int>(g() % 14); n > 0; --n) {
      Record r = chv::testing::random_record(g);
      if (encoded_size(r) > budget) break;
      budget -= encoded_size(r);
      b.records.push_back(std::move(r));
    }
    PlainBody in = b;
    const auto nonce = make_nonce(b.machine_id, static_cast<std::uint64_t>(i));
    auto m = seal(b, keys, b.seq_e, nonce, cfg);
    PlainBody out = open(m, keys, cfg);
    in.hmac_cur = b.hmac_cur;
    PlainBody again = out;
    auto m2 = seal(again, keys, out.seq_e, nonce, cfg);
    identical += out == in && m2 == m && m.cipher_block.size() == cfg.block_size;
  }

  auto keys = chv::testing::keys_from_seed(99);
  PlainBody b;
  b.seq_e = 12;
  b.machine_id = 3;
  b.records = {NewKey{"mode", 2, 4}, Commit{{2, 7}, {{"mode", "COOL"}}}, LastMessage{3, 11}};
  auto m = seal(b, keys, 12, make_nonce(3, 5));
  std::size_t flips = 0, bad_mac = 0;
  auto attempt = [&](const SealedMessage& t) {
    ++flips;
    try {
      open(t, keys);
    } catch (const EnvelopeError& e) {
      bad_mac += e.kind() == EnvelopeError::Kind::BadMac;
    }
  };
  for (std::size_t i = 0; i < m.cipher_block.size() * 8; ++i) {
    auto t = m;
    t.cipher_block[i / 8] ^= static_cast<std::uint8_t>(1u << (i % 8));
    attempt(t);
  }
  for (std::size_t i = 0; i < m.nonce.size() * 8; ++i) {
    auto t = m;
    t.nonce[i / 8] ^= static_cast<std::uint8_t>(1u << (i % 8));
    attempt(t);
  }
  std::string d = std::to_string(identical) + "/1000 bit-identical round trips, " + std::to_string(bad_mac) + "/" +
                  std::to_string(flips) + " single-bit flips (cipher block and nonce) rejected as BadMac";
  return {identical == 1000 && bad_mac == flips, d};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  bool all = true;
  auto report = [&](int n, const char* name, const Outcome& o, double secs) {
    std::printf("criterion %d %s %s: %s [%.1f s]\n", n, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    all &= o.pass;
  };
  auto timed = [&](int n, const char* name, const std::function<Outcome()>& f) {
    auto t0 = Clock::now();
    auto o = f();
    report(n, name, o, seconds_since(t0));
  };

  timed(1, "attack detection", attacks_detected);
  timed(2, "no false positives", no_false_positives);
  timed(3, "fork consistency", fork_consistency);
  {
    auto t0 = Clock::now();
    auto r = reconstruction();
    double secs = seconds_since(t0);
    report(4, "state reconstruction", r.reconstruction, secs);
    report(5, "refresh sufficiency", r.refresh, secs);
  }
  timed(6, "arbitration exclusivity", arbitration);
  timed(7, "traffic uniformity", traffic_uniformity);
  timed(8, "rejection bookkeeping", rejection_bookkeeping);
  timed(9, "envelope", envelope);
  return all ? 0 : 1;
}
