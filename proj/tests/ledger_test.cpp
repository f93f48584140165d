#include <gtest/gtest.h>

#include <future>
#include <random>
#include <set>

#include "dispel/ledger.hpp"
#include "dispel/sim.hpp"
#include "support/ledger_scenarios.hpp"

using namespace dispel;
using check::block_bytes;
using check::forged;
using check::key;
using check::Outbox;
using check::transfer;

namespace {

Transaction flip(const Transaction& tx, std::size_t at) {
  Bytes p = tx.payload();
  p[at] ^= 0x01;
  return Transaction(std::move(p));
}

// Independent model of the transfer rules.
struct Model {
  std::map<PubKey, std::uint64_t> bal;
  std::map<PubKey, std::uint64_t> nonce;
  std::set<Bytes> bad;

  void apply(const Transaction& tx) {
    if (bad.count(tx.payload())) return;
    auto t = TransferTx::decode(tx.payload());
    if (t.nonce != nonce[t.from] + 1 || bal[t.from] < t.amount) return;
    bal[t.from] -= t.amount;
    bal[t.to] += t.amount;
    nonce[t.from] = t.nonce;
  }
};

}  // namespace

TEST(Keys, PrivateKeyOneIsTheGenerator) {
  std::array<std::uint8_t, 32> one{};
  one[31] = 1;
  auto kp = KeyPair::from_private(one);
  EXPECT_EQ(to_hex(kp.public_key()), "0279be667ef9dcbbac55a06295ce870b07029bfcdb2dce28d959f2815b16f81798");
}

TEST(Keys, SeedsAreDeterministicAndDistinct) {
  EXPECT_EQ(KeyPair::from_seed(5).public_key(), KeyPair::from_seed(5).public_key());
  EXPECT_NE(KeyPair::from_seed(5).public_key(), KeyPair::from_seed(6).public_key());
  EXPECT_NE(KeyPair::generate().public_key(), KeyPair::generate().public_key());
  auto k = key(0).public_key();
  EXPECT_EQ(pubkey_from_hex(to_hex(k)), k);
  EXPECT_THROW(pubkey_from_hex("02zz"), DecodeError);
}

TEST(TransferTxTest, FixedSizeRoundTrip) {
  auto t = TransferTx::make(key(0), key(1).public_key(), 40, 1);
  auto bytes = t.encode();
  ASSERT_EQ(bytes.size(), 400u);
  EXPECT_EQ(TransferTx::decode(bytes), t);
  EXPECT_TRUE(std::all_of(bytes.begin() + TransferTx::kPreimageSize + 64, bytes.end(), [](auto b) { return b == 0; }));
}

TEST(TransferTxTest, StrictDecoding) {
  auto bytes = TransferTx::make(key(0), key(1).public_key(), 40, 1).encode();
  auto bad = bytes;
  bad.pop_back();
  EXPECT_THROW(TransferTx::decode(bad), DecodeError);
  bad = bytes;
  bad[0] = 0;
  EXPECT_THROW(TransferTx::decode(bad), DecodeError);
  bad = bytes;
  bad[399] = 1;
  EXPECT_THROW(TransferTx::decode(bad), DecodeError);
  bad = bytes;
  bad[1] = 0x04;
  EXPECT_THROW(TransferTx::decode(bad), DecodeError);
}

TEST(Verify, MatchingKeyIsValid) {
  EXPECT_EQ(verify_tx(transfer(0, 1, 40, 1)), Verdict::Valid);
  EXPECT_EQ(verify_tx(transfer(3, 3, 0, 9)), Verdict::Valid);
}

TEST(Verify, AnyFlippedSignedByteBreaksTheSignature) {
  auto tx = transfer(0, 1, 40, 1);
  Verifier v;
  // Skip byte 1 (key prefix) and the tag; those turn into Malformed.
  for (std::size_t at = 2; at < TransferTx::kPreimageSize + 64; ++at) {
    auto verdict = v.verify(flip(tx, at));
    if (at < 34) {
      // A bit flip in the sender key can leave the curve.
      EXPECT_NE(verdict, Verdict::Valid) << at;
    } else {
      EXPECT_EQ(verdict, Verdict::BadSignature) << at;
    }
  }
  EXPECT_EQ(v.verify(flip(tx, 0)), Verdict::Malformed);
  EXPECT_EQ(v.verify(flip(tx, 300)), Verdict::Malformed);
  EXPECT_EQ(v.verify(Transaction(Bytes(400, 0))), Verdict::Malformed);
  EXPECT_EQ(v.verify(Transaction(Bytes(10, 1))), Verdict::Malformed);
}

TEST(Verify, WrongKeyAndZeroSignatureAreRejected) {
  auto t = TransferTx::make(key(0), key(1).public_key(), 40, 1);
  t.from = key(2).public_key();
  EXPECT_EQ(verify_tx(t.to_transaction()), Verdict::BadSignature);
  t = TransferTx::make(key(0), key(1).public_key(), 40, 1);
  t.signature.fill(0);
  EXPECT_EQ(verify_tx(t.to_transaction()), Verdict::BadSignature);
}

TEST(Verify, OffCurveKeyIsMalformed) {
  auto t = TransferTx::make(key(0), key(1).public_key(), 40, 1);
  Verifier v;
  int off = 0;
  for (std::uint8_t x = 1; x < 40; ++x) {
    t.from.fill(0);
    t.from[0] = 0x02;
    t.from[32] = x;
    auto verdict = v.verify(t.to_transaction());
    EXPECT_NE(verdict, Verdict::Valid);
    off += verdict == Verdict::Malformed;
  }
  EXPECT_GT(off, 0);
  EXPECT_LE(v.cached_keys(), 39u);
}

TEST(VerifierPoolTest, MatchesSequentialVerification) {
  std::mt19937_64 rng(4);
  std::vector<Transaction> txs;
  for (int i = 0; i < 60; ++i) {
    switch (i % 3) {
      case 0: txs.push_back(transfer(i % 8, (i + 1) % 8, i, i)); break;
      case 1: txs.push_back(forged(i % 8, 0, 1, 1, rng)); break;
      default: txs.push_back(Transaction(Bytes(1 + rng() % 500, 7))); break;
    }
  }
  Verifier v;
  std::vector<Verdict> expected;
  for (const auto& t : txs) expected.push_back(v.verify(t));
  for (std::size_t w : {1, 2, 4}) {
    VerifierPool pool(w);
    EXPECT_EQ(pool.workers(), w);
    EXPECT_EQ(pool.verify_all(txs), expected);
    std::promise<std::vector<Verdict>> got;
    pool.verify_async(txs, [&](std::vector<Transaction> back, std::vector<Verdict> vs) {
      EXPECT_EQ(back, txs);
      got.set_value(std::move(vs));
    });
    EXPECT_EQ(got.get_future().get(), expected);
  }
  VerifierPool pool(2);
  EXPECT_TRUE(pool.verify_all({}).empty());
  EXPECT_THROW(VerifierPool(0), ConfigError);
}

TEST(LedgerStateTest, TransferExample) {
  LedgerState s({{key(0).public_key(), 100}});
  auto out = s.apply_block({transfer(0, 1, 40, 1)});
  ASSERT_EQ(out, std::vector<TxOutcome>{TxOutcome::Applied});
  EXPECT_EQ(s.balance(key(0).public_key()), 60u);
  EXPECT_EQ(s.balance(key(1).public_key()), 40u);
  EXPECT_EQ(s.nonce(key(0).public_key()), 1u);
  EXPECT_EQ(s.total(), 100u);
}

TEST(LedgerStateTest, ReplayIsSkipped) {
  LedgerState s({{key(0).public_key(), 100}});
  auto tx = transfer(0, 1, 40, 1);
  s.apply_block({tx});
  EXPECT_EQ(s.apply_block({tx}), std::vector<TxOutcome>{TxOutcome::StaleNonce});
  EXPECT_EQ(s.balance(key(0).public_key()), 60u);
  // Skipping ahead is refused as well.
  EXPECT_EQ(s.apply_block({transfer(0, 1, 1, 3)}), std::vector<TxOutcome>{TxOutcome::StaleNonce});
}

TEST(LedgerStateTest, OverdraftIsSkippedAndTotalHolds) {
  LedgerState s({{key(0).public_key(), 100}, {key(1).public_key(), 5}});
  EXPECT_EQ(s.apply_block({transfer(0, 1, 101, 1)}), std::vector<TxOutcome>{TxOutcome::InsufficientFunds});
  EXPECT_EQ(s.apply_block({transfer(2, 1, 1, 1)}), std::vector<TxOutcome>{TxOutcome::InsufficientFunds});
  EXPECT_EQ(s.total(), 105u);
  EXPECT_EQ(s.skipped(), 2u);
  // The nonce was not consumed by the failed transfer.
  EXPECT_EQ(s.apply_block({transfer(0, 1, 100, 1)}), std::vector<TxOutcome>{TxOutcome::Applied});
}

TEST(LedgerStateTest, InvalidSignaturesAreNeverApplied) {
  std::mt19937_64 rng(2);
  LedgerState s({{key(0).public_key(), 100}});
  auto out = s.apply_block({forged(0, 1, 50, 1, rng), flip(transfer(0, 1, 50, 1), 70), Transaction(Bytes(400, 9))});
  EXPECT_EQ(out, (std::vector<TxOutcome>{TxOutcome::BadSignature, TxOutcome::BadSignature, TxOutcome::Malformed}));
  EXPECT_EQ(s.balance(key(0).public_key()), 100u);
  // Precomputed verdicts are trusted only in the reject direction.
  std::vector<Verdict> v{Verdict::BadSignature};
  EXPECT_EQ(s.apply_block({transfer(0, 1, 1, 1)}, &v), std::vector<TxOutcome>{TxOutcome::BadSignature});
  std::vector<Verdict> wrong_size;
  EXPECT_THROW(s.apply_block({transfer(0, 1, 1, 1)}, &wrong_size), std::invalid_argument);
}

TEST(LedgerStateTest, GenesisOverflowRejected) {
  EXPECT_THROW(LedgerState({{key(0).public_key(), UINT64_MAX}, {key(1).public_key(), 1}}), ConfigError);
}

TEST(LedgerStateTest, GenesisFileAndCsv) {
  auto text = to_hex(key(0).public_key()) + " = 70\n" + to_hex(key(1).public_key()) + " = 30\n";
  auto s = LedgerState::from_genesis(KvFile::parse(text));
  EXPECT_EQ(s.genesis_total(), 100u);
  EXPECT_EQ(s.accounts(), 2u);
  auto csv = s.to_csv();
  EXPECT_EQ(csv.rfind("pubkey,balance\n", 0), 0u);
  EXPECT_NE(csv.find(to_hex(key(0).public_key()) + ",70\n"), std::string::npos);
}

TEST(LedgerStateTest, RandomBlocksConserveAndMatchModel) {
  std::mt19937_64 rng(77);
  std::vector<std::pair<PubKey, std::uint64_t>> genesis;
  for (int i = 0; i < 8; ++i) genesis.emplace_back(key(i).public_key(), 1000);
  LedgerState a(genesis), b(genesis);
  Model m;
  for (auto& [k, v] : genesis) m.bal[k] = v;
  std::vector<std::uint64_t> next(8, 1);
  std::vector<std::vector<Transaction>> log;
  std::vector<std::vector<TxOutcome>> outcomes;

  for (int block = 0; block < 30; ++block) {
    std::vector<Transaction> txs;
    for (int i = 0; i < 10; ++i) {
      int from = static_cast<int>(rng() % 8), to = static_cast<int>(rng() % 8);
      auto amount = rng() % 400;
      switch (rng() % 6) {
        case 0: {
          auto tx = forged(from, to, amount, next[from], rng);
          m.bad.insert(tx.payload());
          txs.push_back(tx);
          break;
        }
        case 1:
          if (!log.empty() && !log.back().empty()) txs.push_back(log.back()[rng() % log.back().size()]);
          break;
        case 2: txs.push_back(transfer(from, to, amount, next[from] + 1)); break;
        default: txs.push_back(transfer(from, to, amount, next[from]++)); break;
      }
    }
    outcomes.push_back(a.apply_block(txs));
    for (const auto& t : txs) m.apply(t);
    ASSERT_EQ(a.total(), 8000u) << block;
    for (const auto& [k, v] : m.bal) ASSERT_EQ(a.balance(k), v);
    log.push_back(txs);
  }
  // Same prefix, same state.
  for (const auto& txs : log) b.apply_block(txs);
  EXPECT_EQ(a.state_hash(), b.state_hash());
  // Re-applying an already-applied transaction is always skipped.
  auto applied = a.applied();
  for (std::size_t blk = 0; blk < log.size(); ++blk) {
    auto again = a.apply_block(log[blk]);
    for (std::size_t k = 0; k < again.size(); ++k)
      if (outcomes[blk][k] == TxOutcome::Applied) EXPECT_NE(again[k], TxOutcome::Applied);
  }
  EXPECT_EQ(a.total(), 8000u);
  EXPECT_GT(applied, 50u);
}

TEST(LedgerStateTest, StateHashSeesNonces) {
  LedgerState a({{key(0).public_key(), 10}}), b({{key(0).public_key(), 10}});
  a.apply_block({transfer(0, 0, 5, 1)});
  EXPECT_EQ(a.total(), b.total());
  EXPECT_NE(a.state_hash(), b.state_hash());
}

struct SelectCase {
  const char* name;
  std::size_t f;
  std::vector<int> responses;  // 0 is the committed block, others are lies
  bool quorum;
};

TEST(FetchBlock, SelectBlockTable) {
  const std::vector<SelectCase> cases{
      {"two identical one corrupt", 1, {0, 0, 1}, true},
      {"all identical", 1, {0, 0, 0}, true},
      {"corrupt first", 1, {1, 0, 0}, true},
      {"pairwise distinct", 1, {0, 1, 2}, false},
      {"single response", 1, {0}, false},
      {"two colluding liars n=7", 2, {1, 1, 0, 0, 0}, true},
      {"only f copies", 2, {0, 0, 1, 2, 3}, false},
  };
  for (const auto& c : cases) {
    SCOPED_TRACE(c.name);
    std::vector<Bytes> rs;
    for (int r : c.responses) rs.push_back(block_bytes(EpochId{4}, static_cast<std::uint8_t>(r)));
    if (c.quorum)
      EXPECT_EQ(select_block(rs, c.f), block_bytes(EpochId{4}, 0));
    else
      EXPECT_THROW(select_block(rs, c.f), NoQuorum);
  }
}

TEST(FetchBlock, TargetsRotateOverPeers) {
  BlockFetch f4(4, 1, 0, EpochId{1});
  EXPECT_EQ(f4.targets(0), (std::vector<ReplicaId>{1, 2, 3}));
  BlockFetch f7(7, 2, 2, EpochId{1});
  EXPECT_EQ(f7.targets(0), (std::vector<ReplicaId>{3, 4, 5, 6, 0}));
  EXPECT_EQ(f7.targets(1), (std::vector<ReplicaId>{1, 3, 4, 5, 6}));
}

// Every placement of one liar (garbage or a well-formed forgery) among the
// three responders, in every arrival order.
TEST(FetchBlock, AtMostFLiarsTableN4) {
  auto r = check::run_fetch_liar_table();
  EXPECT_EQ(r.cases, 4u * 3u * 6u);
  EXPECT_EQ(r.failures, 0u) << r.first_failure;
}

TEST(FetchBlock, RepeatedAndUnsolicitedResponsesDoNotCount) {
  const EpochId e{3};
  Outbox net;
  BlockFetch fetch(7, 2, 0, e);
  fetch.start(net);
  auto lie = block_bytes(e, 5);
  // Replica 6 is not among the first five targets.
  EXPECT_FALSE(fetch.on_response(Envelope{e, MsgKind::BlockResp, 6, lie}));
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(fetch.on_response(Envelope{e, MsgKind::BlockResp, 1, lie}));
  EXPECT_FALSE(fetch.on_response(Envelope{e, MsgKind::BlockResp, 2, lie}));
  EXPECT_EQ(fetch.responses(), 2u);
  EXPECT_FALSE(fetch.on_response(Envelope{EpochId{4}, MsgKind::BlockResp, 3, lie}));
  EXPECT_THROW(fetch.on_timeout(), NoQuorum);
  EXPECT_TRUE(fetch.on_response(Envelope{e, MsgKind::BlockResp, 3, lie}));
}

TEST(FetchBlock, DistinctResponsesTimeOutWithNoQuorum) {
  const EpochId e{3};
  Outbox net;
  BlockFetch fetch(4, 1, 0, e);
  fetch.start(net);
  for (ReplicaId r = 1; r <= 3; ++r)
    EXPECT_FALSE(fetch.on_response(Envelope{e, MsgKind::BlockResp, r, block_bytes(e, static_cast<std::uint8_t>(r))}));
  EXPECT_THROW(fetch.on_timeout(), NoQuorum);
  fetch.start(net, 1);
  EXPECT_EQ(fetch.responses(), 0u);
}

// A Byzantine proposer stuffs forged transfers into its own batches, bypassing
// admission; correct replicas must never apply them.
TEST(LedgerSim, ByzantineProposerCannotInjectForgedTransfers) {
  auto r = check::run_byzantine_proposer(5);
  EXPECT_EQ(r.agreement, "");
  EXPECT_EQ(r.bad_applied, 0u);
  EXPECT_GT(r.applied, 1000u);
  EXPECT_GT(r.admitted, 1000u);
  EXPECT_EQ(r.forged_admitted, 0u);
  EXPECT_EQ(r.conservation_failures, 0u);
  EXPECT_GT(r.common_prefix, 5u);
  EXPECT_TRUE(r.prefix_states_match);
  // The Byzantine replica's batches did reach the log.
  EXPECT_GT(r.forged_skipped, 100u);
  EXPECT_TRUE(r.fetch_matches_commit);
}
