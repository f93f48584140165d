#include <gtest/gtest.h>

#include "dispel/rbc.hpp"
#include "support/rbc_fuzz.hpp"

using namespace dispel;

namespace {

constexpr EpochId kEpoch{5};

BatchPtr batch_of(ReplicaId origin, std::vector<Bytes> txs) {
  auto b = std::make_shared<Batch>();
  b->origin = origin;
  b->epoch = kEpoch;
  for (auto& t : txs) b->txs.emplace_back(std::move(t));
  return b;
}

BatchDigest fake_digest(std::uint8_t v) {
  BatchDigest d;
  d.bytes.fill(v);
  return d;
}

}  // namespace

TEST(Rbc, StartEmitsBatchThenEcho) {
  RbcInstance inst(quorums(4, 1), 4, 2, kEpoch, 2);
  auto b = batch_of(2, {{1, 2, 3}});
  auto out = inst.start(b);
  ASSERT_EQ(out.broadcasts.size(), 2u);
  EXPECT_EQ(out.broadcasts[0].kind, MsgKind::Batch);
  EXPECT_EQ(Batch::deserialize(out.broadcasts[0].payload), *b);
  EXPECT_EQ(out.broadcasts[1].kind, MsgKind::Echo);
  EXPECT_EQ(RbcVote::decode(out.broadcasts[1].payload).digest, digest(*b));
  EXPECT_TRUE(inst.echoed());
  EXPECT_THROW(inst.start(b), DuplicateStart);
}

TEST(Rbc, EmptyBatchUsesSamePattern) {
  RbcInstance inst(quorums(4, 1), 4, 0, kEpoch, 0);
  auto out = inst.start(batch_of(0, {}));
  ASSERT_EQ(out.broadcasts.size(), 2u);
  EXPECT_EQ(out.broadcasts[0].payload.size(), Batch::kHeaderSize);
}

TEST(Rbc, OnlySourceMayStart) {
  RbcInstance inst(quorums(4, 1), 4, 1, kEpoch, 0);
  EXPECT_THROW(inst.start(batch_of(0, {})), std::logic_error);
}

TEST(Rbc, BatchFromSourceIsEchoedOnce) {
  RbcInstance inst(quorums(4, 1), 4, 1, kEpoch, 0);
  auto b = batch_of(0, {{9}});
  auto env = Envelope{kEpoch, MsgKind::Batch, 0, b->serialize()};
  auto out = inst.handle(env);
  ASSERT_EQ(out.broadcasts.size(), 1u);
  EXPECT_EQ(out.broadcasts[0].kind, MsgKind::Echo);
  EXPECT_EQ(out.accepted_digest, digest(*b));
  EXPECT_TRUE(inst.handle(env).broadcasts.empty());
}

TEST(Rbc, BatchFromOtherSenderIgnored) {
  RbcInstance inst(quorums(4, 1), 4, 1, kEpoch, 0);
  auto b = batch_of(0, {{9}});
  auto out = inst.handle(Envelope{kEpoch, MsgKind::Batch, 3, b->serialize()});
  EXPECT_TRUE(out.broadcasts.empty());
  EXPECT_FALSE(inst.seen_batch());
}

TEST(Rbc, ConflictingBatchDiscarded) {
  RbcInstance inst(quorums(4, 1), 4, 1, kEpoch, 0);
  auto a = batch_of(0, {{1}});
  auto b = batch_of(0, {{2}});
  inst.handle(Envelope{kEpoch, MsgKind::Batch, 0, a->serialize()});
  auto out = inst.handle(Envelope{kEpoch, MsgKind::Batch, 0, b->serialize()});
  EXPECT_TRUE(out.broadcasts.empty());
  EXPECT_FALSE(out.accepted_batch);
  EXPECT_EQ(*inst.seen_digest(), digest(*a));
  EXPECT_EQ(inst.equivocations(), 1u);
}

TEST(Rbc, ThreeEchoesTriggerReady) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  auto d = fake_digest(7);
  EXPECT_TRUE(inst.on_echo(0, d).broadcasts.empty());
  EXPECT_TRUE(inst.on_echo(1, d).broadcasts.empty());
  auto out = inst.on_echo(2, d);
  ASSERT_EQ(out.broadcasts.size(), 1u);
  EXPECT_EQ(out.broadcasts[0].kind, MsgKind::Ready);
  EXPECT_EQ(RbcVote::decode(out.broadcasts[0].payload).digest, d);
  EXPECT_TRUE(inst.on_echo(3, d).broadcasts.empty());
}

TEST(Rbc, TwoReadiesAmplify) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  auto d = fake_digest(7);
  EXPECT_TRUE(inst.on_ready(0, d).broadcasts.empty());
  auto out = inst.on_ready(1, d);
  ASSERT_EQ(out.broadcasts.size(), 1u);
  EXPECT_EQ(out.broadcasts[0].kind, MsgKind::Ready);
  EXPECT_FALSE(out.delivered);
}

TEST(Rbc, DeliversDigestWithoutBatch) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  auto d = fake_digest(7);
  inst.on_ready(0, d);
  inst.on_ready(1, d);
  auto out = inst.on_ready(2, d);
  ASSERT_TRUE(out.delivered);
  EXPECT_EQ(*out.delivered, d);
  EXPECT_FALSE(inst.seen_batch());
  EXPECT_FALSE(inst.on_ready(3, d).delivered);
}

TEST(Rbc, SplitEchoesNeverReachThreshold) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  inst.on_echo(0, fake_digest(1));
  inst.on_echo(1, fake_digest(1));
  inst.on_echo(2, fake_digest(2));
  // A second, different echo from a sender is recorded but not counted.
  auto out = inst.on_echo(2, fake_digest(1));
  EXPECT_TRUE(out.broadcasts.empty());
  EXPECT_FALSE(inst.readied());
  EXPECT_EQ(inst.echo_count(fake_digest(1)), 2u);
  EXPECT_EQ(inst.equivocations(), 1u);
}

TEST(Rbc, VotesForOtherSourceIgnored) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  auto env = Envelope{kEpoch, MsgKind::Echo, 1, RbcVote{2, fake_digest(1)}.encode()};
  inst.handle(env);
  EXPECT_EQ(inst.echo_count(fake_digest(1)), 0u);
}

TEST(Rbc, OutOfRangeSenderIgnored) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  EXPECT_TRUE(inst.on_echo(9, fake_digest(1)).broadcasts.empty());
  EXPECT_EQ(inst.echo_count(fake_digest(1)), 0u);
}

TEST(Rbc, MalformedVoteThrows) {
  RbcInstance inst(quorums(4, 1), 4, 3, kEpoch, 0);
  EXPECT_THROW(inst.handle(Envelope{kEpoch, MsgKind::Ready, 1, Bytes{0, 0, 1}}), DecodeError);
}

TEST(RbcFuzz, CorrectSourceValidityN4) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto r = check::run_rbc_fuzz(seed, 4, false);
    ASSERT_TRUE(r.agreement && r.totality && r.validity) << "seed " << seed << ": " << r.detail;
    ASSERT_TRUE(r.digest_frames_ok);
  }
}

TEST(RbcFuzz, EquivocatingSourceN4) {
  std::size_t delivered_runs = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto r = check::run_rbc_fuzz(seed, 4, true);
    ASSERT_TRUE(r.agreement && r.totality) << "seed " << seed << ": " << r.detail;
    if (r.delivered) ++delivered_runs;
  }
  // The schedule space must actually exercise both outcomes.
  EXPECT_GT(delivered_runs, 0u);
  EXPECT_LT(delivered_runs, 1000u);
}

TEST(RbcFuzz, EquivocatingSourceN7AndN10) {
  for (std::size_t n : {7u, 10u}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      auto r = check::run_rbc_fuzz(seed, n, true);
      ASSERT_TRUE(r.agreement && r.totality) << "n " << n << " seed " << seed << ": " << r.detail;
    }
  }
}
