#include <gtest/gtest.h>

#include <random>

#include "chv/server.hpp"

using namespace chv;

namespace {

SealedMessage msg(SeqNo s) {
  SealedMessage m;
  m.seq = s;
  m.cipher_block.assign(16, static_cast<std::uint8_t>(s));
  return m;
}

std::vector<SeqNo> seqs(const std::vector<SealedMessage>& v) {
  std::vector<SeqNo> out;
  for (auto& m : v) out.push_back(m.seq);
  return out;
}

std::vector<SeqNo> seqs(const ServerQueue& q) {
  return seqs(std::vector<SealedMessage>(q.entries().begin(), q.entries().end()));
}

ServerQueue filled(std::uint64_t cap, SeqNo upto) {
  ServerQueue q(cap);
  for (SeqNo s = 1; s <= upto; ++s) q.put_msg(msg(s));
  return q;
}

}  // namespace

TEST(Server, FirstPutAccepted) {
  ServerQueue q(4);
  EXPECT_TRUE(std::holds_alternative<Accepted>(q.put_msg(msg(1))));
  EXPECT_EQ(seqs(q), (std::vector<SeqNo>{1}));
}

TEST(Server, StaleSeqRejectedWithProof) {
  auto q = filled(8, 5);
  auto r = q.put_msg(msg(5));
  ASSERT_TRUE(std::holds_alternative<Rejected>(r));
  EXPECT_EQ(seqs(std::get<Rejected>(r).messages), (std::vector<SeqNo>{5}));
  auto r2 = q.put_msg(msg(3));
  EXPECT_EQ(seqs(std::get<Rejected>(r2).messages), (std::vector<SeqNo>{3, 4, 5}));
  EXPECT_EQ(q.last_seq(), 5u);
}

TEST(Server, FutureSeqRejected) {
  auto q = filled(8, 2);
  auto r = q.put_msg(msg(4));
  ASSERT_TRUE(std::holds_alternative<Rejected>(r));
  EXPECT_TRUE(std::get<Rejected>(r).messages.empty());
}

TEST(Server, OldestEvictedWhenFull) {
  auto q = filled(4, 6);
  EXPECT_EQ(seqs(q), (std::vector<SeqNo>{3, 4, 5, 6}));
  EXPECT_TRUE(std::holds_alternative<Accepted>(q.put_msg(msg(7))));
  EXPECT_EQ(seqs(q), (std::vector<SeqNo>{4, 5, 6, 7}));
}

TEST(Server, GetMsg) {
  auto q = filled(6, 9);
  EXPECT_EQ(seqs(q.get_msg(7)), (std::vector<SeqNo>{7, 8, 9}));
  EXPECT_TRUE(q.get_msg(10).empty());
  EXPECT_EQ(seqs(q.get_msg(1)), (std::vector<SeqNo>{4, 5, 6, 7, 8, 9}));
}

TEST(Server, SetCapacity) {
  auto q = filled(8, 5);
  q.set_capacity(16);
  EXPECT_EQ(seqs(q), (std::vector<SeqNo>{1, 2, 3, 4, 5}));
  auto q2 = filled(8, 6);
  q2.set_capacity(4);
  EXPECT_EQ(seqs(q2), (std::vector<SeqNo>{3, 4, 5, 6}));
  EXPECT_THROW(q2.set_capacity(0), std::invalid_argument);
  EXPECT_THROW(ServerQueue(0), std::invalid_argument);
}

TEST(Server, ServesStoredBytesUnchanged) {
  ServerQueue q(4);
  auto m = msg(1);
  m.cipher_block = {9, 8, 7};
  m.nonce[0] = 42;
  q.put_msg(m);
  EXPECT_EQ(q.get_msg(1).front(), m);
}

TEST(Server, EvictionObserverSeesQueueAfterAppend) {
  ServerQueue q(2);
  std::vector<SeqNo> evicted;
  q.on_evict([&](const SealedMessage& m, const ServerQueue& now) {
    evicted.push_back(m.seq);
    EXPECT_EQ(now.last_seq(), now.entries().back().seq);
  });
  for (SeqNo s = 1; s <= 4; ++s) q.put_msg(msg(s));
  EXPECT_EQ(evicted, (std::vector<SeqNo>{1, 2}));
}

// Randomized resize/put interleaving checked against an independent contiguity check.
TEST(Server, RandomResizeKeepsContiguity) {
  std::mt19937_64 g(11);
  for (int run = 0; run < 200; ++run) {
    ServerQueue q(1 + g() % 8);
    SeqNo next = 1;
    for (int i = 0; i < 200; ++i) {
      if (g() % 5 == 0) {
        q.set_capacity(1 + g() % 10);
      } else if (g() % 7 == 0) {
        SeqNo bad = next > 1 ? 1 + g() % (next - 1) : next + 1;
        ASSERT_TRUE(std::holds_alternative<Rejected>(q.put_msg(msg(bad))));
      } else {
        ASSERT_TRUE(std::holds_alternative<Accepted>(q.put_msg(msg(next))));
        ++next;
      }
      ASSERT_LE(q.entries().size(), q.capacity());
      const auto& e = q.entries();
      for (std::size_t k = 1; k < e.size(); ++k) ASSERT_EQ(e[k].seq, e[k - 1].seq + 1);
      if (!e.empty()) {
        ASSERT_EQ(e.back().seq, next - 1);
      }
    }
  }
}
