#include <gtest/gtest.h>

#include <algorithm>
#include <deque>

#include "dispel/binconsensus.hpp"
#include "support/bin_fuzz.hpp"
#include "support/bin_model.hpp"

using namespace dispel;

namespace {

using Msg = BinInstance::Message;

bool has(const BinInstance::Output& out, MsgKind kind, std::uint32_t round, bool bit) {
  return std::find(out.broadcasts.begin(), out.broadcasts.end(), Msg{kind, round, bit}) != out.broadcasts.end();
}

// Delivers every message immediately, in emission order, to all replicas.
struct LockstepRun {
  std::vector<BinInstance> nodes;
  std::vector<std::optional<bool>> decided;
  std::vector<std::uint32_t> decided_round;

  explicit LockstepRun(std::size_t n) : decided(n), decided_round(n, 0) {
    for (std::size_t i = 0; i < n; ++i) nodes.emplace_back(n, (n - 1) / 3, static_cast<ReplicaId>(i));
  }

  void run(const std::vector<bool>& inputs) {
    struct Item {
      ReplicaId from;
      Msg m;
    };
    std::deque<Item> queue;
    auto take = [&](ReplicaId i, const BinInstance::Output& out) {
      for (const auto& m : out.broadcasts) queue.push_back({i, m});
      if (out.decided && !decided[i]) {
        decided[i] = out.decided;
        decided_round[i] = nodes[i].decided_round().value_or(0);
      }
    };
    for (std::size_t i = 0; i < nodes.size(); ++i) take(static_cast<ReplicaId>(i), nodes[i].propose(inputs[i]));
    while (!queue.empty()) {
      auto item = queue.front();
      queue.pop_front();
      for (std::size_t to = 0; to < nodes.size(); ++to)
        take(static_cast<ReplicaId>(to), nodes[to].on_message(item.from, item.m.kind, item.m.round, item.m.bit));
    }
  }
};

}  // namespace

TEST(BinInstance, ProposeEmitsRoundOneEst) {
  BinInstance inst(4, 1, 0);
  auto out = inst.propose(true);
  ASSERT_EQ(out.broadcasts.size(), 1u);
  EXPECT_EQ(out.broadcasts[0], (Msg{MsgKind::Est, 1, true}));
  EXPECT_EQ(out.arm_timer, 1u);
  EXPECT_THROW(inst.propose(false), DuplicatePropose);
}

TEST(BinInstance, EstRelayAndBinValues) {
  BinInstance inst(4, 1, 3);
  inst.propose(false);
  EXPECT_TRUE(inst.on_message(0, MsgKind::Est, 1, true).broadcasts.empty());
  // f + 1 senders: relay.
  auto out = inst.on_message(1, MsgKind::Est, 1, true);
  EXPECT_TRUE(has(out, MsgKind::Est, 1, true));
  EXPECT_EQ(inst.bin_values(1), 0);
  // 2f + 1 senders: bin value.
  inst.on_message(2, MsgKind::Est, 1, true);
  EXPECT_EQ(inst.bin_values(1), 2);
}

TEST(BinInstance, FSpammersNeverEnterBinValues) {
  BinInstance inst(4, 1, 0);
  inst.propose(false);
  // One Byzantine replica repeating EST(1) cannot reach f + 1 distinct senders.
  for (int i = 0; i < 10; ++i) inst.on_message(3, MsgKind::Est, 1, true);
  EXPECT_EQ(inst.bin_values(1) & 2, 0);
}

TEST(BinInstance, CoordinatorSuggestsFirstBinValue) {
  // Replica 1 coordinates round 1 at n = 4.
  BinInstance inst(4, 1, 1);
  inst.propose(true);
  inst.on_message(0, MsgKind::Est, 1, true);
  auto out = inst.on_message(2, MsgKind::Est, 1, true);
  EXPECT_FALSE(has(out, MsgKind::Coord, 1, true));
  out = inst.on_message(1, MsgKind::Est, 1, true);
  EXPECT_TRUE(has(out, MsgKind::Coord, 1, true));
}

TEST(BinInstance, AuxWaitsForCoordOrDeadline) {
  BinInstance inst(4, 1, 0);
  inst.propose(true);
  for (ReplicaId s : {0, 2, 3}) inst.on_message(s, MsgKind::Est, 1, true);
  EXPECT_EQ(inst.bin_values(1), 2);
  auto out = inst.on_timeout(1);
  EXPECT_TRUE(has(out, MsgKind::Aux, 1, true));
}

TEST(BinInstance, CoordValueUsedWhenInBinValues) {
  BinInstance inst(4, 1, 0);
  inst.propose(false);
  for (ReplicaId s : {0, 2, 3}) inst.on_message(s, MsgKind::Est, 1, false);
  for (ReplicaId s : {0, 2, 3}) inst.on_message(s, MsgKind::Est, 1, true);
  EXPECT_EQ(inst.bin_values(1), 3);
  auto out = inst.on_message(1, MsgKind::Coord, 1, true);
  EXPECT_TRUE(has(out, MsgKind::Aux, 1, true));
}

TEST(BinInstance, CoordFromNonCoordinatorIgnored) {
  BinInstance inst(4, 1, 0);
  inst.propose(true);
  for (ReplicaId s : {0, 2, 3}) inst.on_message(s, MsgKind::Est, 1, true);
  EXPECT_TRUE(inst.on_message(2, MsgKind::Coord, 1, true).broadcasts.empty());
}

TEST(BinInstance, AllOnesDecideInRoundOne) {
  LockstepRun run(4);
  run.run({true, true, true, true});
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_TRUE(run.decided[i]);
    EXPECT_TRUE(*run.decided[i]);
    EXPECT_EQ(run.decided_round[i], 1u);
  }
}

TEST(BinInstance, AllZerosDecideInRoundTwo) {
  LockstepRun run(4);
  run.run({false, false, false, false});
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_TRUE(run.decided[i]);
    EXPECT_FALSE(*run.decided[i]);
    EXPECT_EQ(run.decided_round[i], 2u);
  }
}

TEST(BinInstance, AllReplicasHaltAfterDecision) {
  LockstepRun run(7);
  run.run({true, false, true, true, false, true, false});
  for (auto& node : run.nodes) {
    EXPECT_TRUE(node.decision());
    EXPECT_TRUE(node.halted());
  }
}

TEST(BinInstance, DecideMessagesFromFPlusOneDecideImmediately) {
  BinInstance inst(4, 1, 0);
  inst.propose(false);
  EXPECT_FALSE(inst.on_message(1, MsgKind::Decide, 3, true).decided);
  auto out = inst.on_message(2, MsgKind::Decide, 3, true);
  ASSERT_TRUE(out.decided);
  EXPECT_TRUE(*out.decided);
  EXPECT_TRUE(has(out, MsgKind::Decide, inst.round(), true));
  EXPECT_FALSE(inst.halted());
  inst.on_message(3, MsgKind::Decide, 3, true);
  EXPECT_TRUE(inst.halted());
}

TEST(BinInstance, DecideBeforeProposeStillCounts) {
  BinInstance inst(4, 1, 0);
  inst.on_message(1, MsgKind::Decide, 1, false);
  auto out = inst.on_message(2, MsgKind::Decide, 1, false);
  ASSERT_TRUE(out.decided);
  EXPECT_FALSE(*out.decided);
}

TEST(BinInstance, FarFutureRoundsDropped) {
  BinInstance inst(4, 1, 0);
  inst.propose(true);
  inst.on_message(1, MsgKind::Est, 1 + BinInstance::kDefaultRoundWindow + 1, true);
  EXPECT_EQ(inst.dropped(), 1u);
  inst.on_message(1, MsgKind::Est, 1 + BinInstance::kDefaultRoundWindow, true);
  EXPECT_EQ(inst.dropped(), 1u);
  inst.on_message(1, MsgKind::Est, 0, true);
  EXPECT_EQ(inst.dropped(), 2u);
}

TEST(BinModelOracle, FairScheduleMatchesHandTrace) {
  check::BinModel::Options opt;
  opt.byzantine = false;
  opt.prefix_depth = 0;
  auto ones = check::BinModel::explore({1, 1, 1, 1}, opt);
  EXPECT_EQ(ones.decided_values, 2);
  EXPECT_EQ(ones.max_decision_round, 1);
  auto zeros = check::BinModel::explore({0, 0, 0, 0}, opt);
  EXPECT_EQ(zeros.decided_values, 1);
  EXPECT_EQ(zeros.max_decision_round, 2);
}

TEST(BinModelOracle, BoundedPrefixesFaultFree) {
  check::BinModel::Options opt;
  opt.byzantine = false;
  opt.prefix_depth = 7;
  for (auto inputs : std::vector<std::vector<int>>{{1, 1, 1, 1}, {0, 0, 0, 0}, {0, 1, 0, 1}, {1, 1, 0, 0}}) {
    auto r = check::BinModel::explore(inputs, opt);
    EXPECT_EQ(r.agreement_violations, 0u);
    EXPECT_EQ(r.validity_violations, 0u);
    EXPECT_EQ(r.undecided_completions, 0u);
    EXPECT_GT(r.states, 1000u);
  }
}

TEST(BinModelOracle, BoundedPrefixesWithByzantine) {
  check::BinModel::Options opt;
  opt.prefix_depth = 5;
  for (auto inputs : std::vector<std::vector<int>>{{1, 1, 1}, {0, 0, 0}, {0, 1, 1}, {1, 0, 0}}) {
    auto r = check::BinModel::explore(inputs, opt);
    EXPECT_EQ(r.agreement_violations, 0u);
    EXPECT_EQ(r.validity_violations, 0u);
    EXPECT_EQ(r.undecided_completions, 0u);
    EXPECT_FALSE(r.truncated);
    EXPECT_GT(r.completions, 100000u);
  }
}

TEST(BinFuzz, UnanimousInputsDecideThatInput) {
  for (int v : {0, 1}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      check::BinFuzzOptions opt;
      opt.inputs = {v, v, v, v};
      opt.async_period = 100ms;
      auto r = check::run_bin_fuzz(seed, opt);
      ASSERT_TRUE(r.agreement && r.validity && r.terminated) << seed << ": " << r.detail;
    }
  }
}

TEST(BinFuzz, FairSchedulesDecideWithinSixRounds) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    check::BinFuzzOptions opt;
    auto r = check::run_bin_fuzz(seed, opt);
    ASSERT_TRUE(r.agreement && r.terminated) << seed << ": " << r.detail;
    ASSERT_GT(r.messages, 0u);
    ASSERT_LE(r.max_decision_round, 6u) << seed;
  }
}

TEST(BinFuzz, AdversarialSchedules) {
  for (std::size_t n : {4u, 7u}) {
    for (auto adv : {check::BinAdversary::Mute, check::BinAdversary::EstEquivocator, check::BinAdversary::Random}) {
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        check::BinFuzzOptions opt;
        opt.n = n;
        opt.adversary = adv;
        opt.async_period = 300ms;
        auto r = check::run_bin_fuzz(seed * 7 + n, opt);
        ASSERT_TRUE(r.agreement && r.validity && r.terminated)
            << "n " << n << " adversary " << static_cast<int>(adv) << " seed " << seed << ": " << r.detail;
      }
    }
  }
}
