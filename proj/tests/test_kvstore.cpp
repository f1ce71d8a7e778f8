#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "cluster.hpp"

using namespace chv;
using namespace chv::testing;

namespace {

const SecretKeys kKeys = keys_from_seed(42);

class SwitchTransport : public Transport {
 public:
  explicit SwitchTransport(ServerQueue& q) : inner_(q) {}
  bool down = false;
  std::vector<SealedMessage> get_msg(SeqNo s) override {
    if (down) throw NetworkFailure("offline");
    return inner_.get_msg(s);
  }
  PutResult put_msg(const SealedMessage& m) override {
    if (down) throw NetworkFailure("offline");
    return inner_.put_msg(m);
  }
  void set_capacity(std::uint64_t n) override {
    if (down) throw NetworkFailure("offline");
    inner_.set_capacity(n);
  }

 private:
  LocalTransport inner_;
};

// Collects every message the server ever accepted, for untruncated replay.
struct Archive {
  std::map<SeqNo, SealedMessage> all;
  void capture(const ServerQueue& q) {
    for (const auto& m : q.entries()) all.try_emplace(m.seq, m);
  }
};

// Independent replay of the full history: first NewKey per key wins, the first Commit of
// each transaction applies its writes in chain order.
KvMap oracle_state(const Archive& a) {
  KvMap out;
  std::set<TxId> applied;
  for (const auto& [s, m] : a.all) {
    for (const auto& r : open(m, kKeys).records) {
      if (auto* c = std::get_if<Commit>(&r)) {
        if (!applied.insert(c->id).second) continue;
        for (const auto& w : c->writes) out[w.key] = w.value;
      }
    }
  }
  return out;
}

void settle(Cluster& c, int rounds = 3) {
  for (int i = 0; i < rounds; ++i)
    for (std::size_t k = 0; k < c.replicas.size(); ++k) c.sync(k);
}

}  // namespace

TEST(KvStore, CreateKeyAgreedByAll) {
  Cluster c({1, 2, 3});
  c[0].create_key("thermo/mode", 3);
  c[1].create_key("door", 2);
  settle(c);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(c[k].kv().arbitrator_of("thermo/mode"), 3u);
    EXPECT_EQ(c[k].kv().arbitrator_of("door"), 2u);
  }
  auto ev = c[0].kv().take_events();
  ASSERT_FALSE(ev.empty());
  EXPECT_EQ(ev.front().kind, KvEvent::Kind::KeyCreated);
  EXPECT_THROW(c[0].create_key("door", 1), KvError);
}

TEST(KvStore, RacingCreateFirstInChainWins) {
  Cluster c({1, 2});
  c[0].create_key("k", 1);
  c[1].create_key("k", 2);
  c.sync(1);  // 2's NewKey lands first
  c.sync(0);
  settle(c);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(c[k].kv().arbitrator_of("k"), 2u);
  auto e0 = c[0].kv().take_events();
  auto e1 = c[1].kv().take_events();
  ASSERT_EQ(e0.size(), 1u);
  EXPECT_EQ(e0[0].kind, KvEvent::Kind::DuplicateKey);
  ASSERT_EQ(e1.size(), 1u);
  EXPECT_EQ(e1[0].kind, KvEvent::Kind::KeyCreated);
}

TEST(KvStore, SingleClientCommitVisibleEverywhere) {
  Cluster c({1, 2});
  c[0].create_key("k", 2);
  settle(c);
  EXPECT_FALSE(c[1].get_committed("k"));
  auto h = c[0].start_transaction();
  c[0].put(h, "k", "5");
  EXPECT_EQ(c[0].commit_transaction(h, c.transport(0)), TxStatus::Pending);
  EXPECT_EQ(c[0].get_speculative("k"), "5");
  EXPECT_FALSE(c[0].get_committed("k"));
  settle(c);
  EXPECT_EQ(c[0].status(h), TxStatus::Committed);
  EXPECT_EQ(c[0].get_committed("k"), "5");
  EXPECT_EQ(c[1].get_committed("k"), "5");
  auto h2 = c[1].start_transaction();
  c[1].put(h2, "k", "9");
  EXPECT_EQ(c[1].commit_transaction(h2, c.transport(1)), TxStatus::Committed);
  settle(c);
  EXPECT_EQ(c[0].get_committed("k"), "9");
}

TEST(KvStore, HeatOffCool) {
  // 1 = phone app, 2 = thermostat (arbitrator), 3 = wall panel
  Cluster c({1, 2, 3});
  c[1].create_key("mode", 2);
  settle(c);
  auto h0 = c[1].start_transaction();
  c[1].put(h0, "mode", "HEAT");
  c[1].commit_transaction(h0, c.transport(1));
  settle(c);
  auto off = c[0].start_transaction();
  c[0].put(off, "mode", "OFF");
  auto cool = c[2].start_transaction();
  c[2].put(cool, "mode", "COOL");
  c[0].commit_transaction(off, c.transport(0));
  c[2].commit_transaction(cool, c.transport(2));
  settle(c);
  EXPECT_EQ(c[0].status(off), TxStatus::Committed);
  EXPECT_EQ(c[2].status(cool), TxStatus::Aborted);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(c[k].get_committed("mode"), "OFF");
}

TEST(KvStore, RacingTransactionsAllInterleavings) {
  for (std::size_t n = 2; n <= 4; ++n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 1);  // replicas 1..n race, replica 0 arbitrates
    do {
      std::vector<MachineId> ids{10};
      for (std::size_t i = 1; i <= n; ++i) ids.push_back(i);
      Cluster c(ids, 16);
      c[0].create_key("x", 10);
      settle(c, 1);
      auto h0 = c[0].start_transaction();
      c[0].put(h0, "x", "init");
      c[0].commit_transaction(h0, c.transport(0));
      settle(c, 1);
      std::vector<TxHandle> hs(n + 1);
      for (std::size_t i = 1; i <= n; ++i) {
        hs[i] = c[i].start_transaction();
        c[i].put(hs[i], "x", "v" + std::to_string(i));
      }
      for (auto i : order) c[i].commit_transaction(hs[i], c.transport(i));
      settle(c);
      // Oracle: the chain-earliest transaction is the first one synced.
      std::size_t winner = order.front();
      std::size_t committed = 0;
      for (std::size_t i = 1; i <= n; ++i) {
        auto st = c[i].status(hs[i]);
        EXPECT_EQ(st, i == winner ? TxStatus::Committed : TxStatus::Aborted);
        committed += st == TxStatus::Committed;
      }
      EXPECT_EQ(committed, 1u);
      for (std::size_t k = 0; k <= n; ++k)
        EXPECT_EQ(c[k].get_committed("x"), "v" + std::to_string(winner));
    } while (std::next_permutation(order.begin(), order.end()));
  }
}

TEST(KvStore, OfflineArbitratorLocalControl) {
  ServerQueue q(8);
  std::vector<MachineId> ids{1, 2};
  Replica app(client_config(1, ids)), thermo(client_config(2, ids));
  SwitchTransport ta(q), tt(q);
  thermo.create_key("mode", 2);
  thermo.sync(tt);
  app.sync(ta);
  auto h = thermo.start_transaction();
  thermo.put(h, "mode", "HEAT");
  thermo.commit_transaction(h, tt);
  app.sync(ta);
  ASSERT_EQ(app.get_committed("mode"), "HEAT");

  tt.down = true;
  auto local = thermo.start_transaction();
  thermo.put(local, "mode", "COOL");
  EXPECT_EQ(thermo.commit_transaction(local, tt), TxStatus::Committed);
  EXPECT_EQ(thermo.kv().authoritative().at("mode"), "COOL");

  ta.down = true;
  auto remote = app.start_transaction();
  app.put(remote, "mode", "OFF");
  EXPECT_EQ(app.commit_transaction(remote, ta), TxStatus::Deferred);

  ta.down = false;
  app.sync(ta);  // remote transaction reaches the chain
  EXPECT_EQ(app.status(remote), TxStatus::Pending);
  tt.down = false;
  thermo.sync(tt);
  app.sync(ta);
  thermo.sync(tt);
  EXPECT_EQ(app.status(remote), TxStatus::Aborted);
  EXPECT_EQ(app.get_committed("mode"), "COOL");
  EXPECT_EQ(thermo.get_committed("mode"), "COOL");
}

TEST(KvStore, HandleErrors) {
  KVTable t(1);
  t.create_key("a", 1);
  t.create_key("b", 2);
  auto h = t.start_transaction();
  t.put(h, "a", "1");
  t.put(h, "b", "2");
  EXPECT_THROW(
      {
        try {
          t.submit(h);
        } catch (const KvError& e) {
          EXPECT_EQ(e.kind(), KvError::Kind::ArbitratorMismatch);
          throw;
        }
      },
      KvError);
  auto h2 = t.start_transaction();
  t.put(h2, "a", "1");
  EXPECT_EQ(t.submit(h2).size(), 1u);
  EXPECT_EQ(t.status(h2), TxStatus::Committed);
  try {
    t.put(h2, "a", "2");
    FAIL();
  } catch (const KvError& e) {
    EXPECT_EQ(e.kind(), KvError::Kind::UseAfterClose);
  }
  EXPECT_THROW(t.put(t.start_transaction(), "a", std::string(kMaxValueBytes + 1, 'v')),
               std::length_error);
}

TEST(KvStore, ArbitrateGuards) {
  KVTable t(2);
  t.create_key("mode", 2);
  ViewEntry e{1, 2, {}, {}, {NewKey{"mode", 2, 1}, Commit{{2, 1}, {{"mode", "HEAT"}}}}};
  t.apply(std::vector<ViewEntry>{e}, std::vector<ViewEntry>{e});
  Transaction ok{{1, 1}, 2, {{"mode", "OFF"}}, {{"mode", "HEAT"}}};
  Transaction stale{{1, 2}, 2, {{"mode", "OFF"}}, {{"mode", "COOL"}}};
  EXPECT_TRUE(std::holds_alternative<Commit>(t.arbitrate(ok)));
  EXPECT_TRUE(std::holds_alternative<Abort>(t.arbitrate(stale)));
  KVTable other(3);
  other.apply(std::vector<ViewEntry>{e}, std::vector<ViewEntry>{e});
  try {
    other.arbitrate(ok);
    FAIL();
  } catch (const KvError& err) {
    EXPECT_EQ(err.kind(), KvError::Kind::NotArbitrator);
  }
}

TEST(KvStore, ReconstructEmptyQueue) {
  Cluster c({1, 2}, 4);
  settle(c, 2);
  auto r = Replica::reconstruct(client_config(3, {1, 2, 3}, 4),
                                {c.server.entries().begin(), c.server.entries().end()});
  EXPECT_TRUE(r.kv().committed().empty());
}

TEST(KvStore, ReconstructMatchesUntruncatedOracle) {
  std::mt19937_64 g(8);
  for (int run = 0; run < 20; ++run) {
    Cluster c({1, 2, 3}, 4, run + 1);
    Archive arch;
    c[0].create_key("a", 1);
    c[1].create_key("b", 2);
    c[2].create_key("c", 3);
    settle(c, 2);
    arch.capture(c.server);
    const char* keys[] = {"a", "b", "c"};
    for (int step = 0; step < 60; ++step) {
      std::size_t who = g() % 3;
      if (g() % 2) {
        auto h = c[who].start_transaction();
        c[who].put(h, keys[g() % 3], std::to_string(g() % 1000));
        c[who].submit(h);
      }
      c.sync(who);
      arch.capture(c.server);
    }
    settle(c, 2);
    arch.capture(c.server);
    ASSERT_GT(arch.all.size(), c.server.entries().size());  // truncation happened
    auto r = Replica::reconstruct(client_config(9, {1, 2, 3, 9}, 4),
                                  {c.server.entries().begin(), c.server.entries().end()});
    EXPECT_EQ(canonical_bytes(r.kv().committed()), canonical_bytes(oracle_state(arch))) << run;
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_EQ(c[k].kv().committed(), oracle_state(arch)) << run;
  }
}

TEST(KvStore, ReconstructDetectsMissingOldest) {
  Cluster c({1, 2}, 4);
  settle(c, 4);
  std::vector<SealedMessage> w(c.server.entries().begin() + 1, c.server.entries().end());
  EXPECT_THROW(Replica::reconstruct(client_config(3, {1, 2, 3}, 4), w), DetectionError);
}

TEST(KvStore, SnapshotRoundTrip) {
  Cluster c({1, 2});
  c[0].create_key("k", 1);
  settle(c);
  auto h = c[0].start_transaction();
  c[0].put(h, "k", "v");
  auto open_h = c[1].start_transaction();
  c[1].put(open_h, "k", "w");
  c[0].commit_transaction(h, c.transport(0));
  auto blob = c[1].snapshot();
  auto back = Replica::restore(c[1].client().config(), ByteSpan(blob));
  EXPECT_EQ(back.snapshot(), blob);
  EXPECT_EQ(back.kv().committed(), c[1].kv().committed());
}
