#include <gtest/gtest.h>

#include <random>

#include "dispel/transport.hpp"

using namespace dispel;

namespace {

Envelope random_envelope(std::mt19937_64& rng) {
  Envelope env;
  env.kind = static_cast<MsgKind>(1 + rng() % 12);
  env.epoch = EpochId{rng()};
  env.sender = static_cast<ReplicaId>(rng());
  env.payload.resize(rng() % 600);
  for (auto& b : env.payload) b = static_cast<std::uint8_t>(rng());
  return env;
}

}  // namespace

TEST(Frame, HeaderLayoutIsBitExact) {
  Envelope env{EpochId{0x0102030405060708ULL}, MsgKind::Echo, 0x0a0b, Bytes{0xee}};
  Bytes expected = {0, 0, 0, 12, 2, 1, 2, 3, 4, 5, 6, 7, 8, 0x0a, 0x0b, 0xee};
  EXPECT_EQ(encode_frame(env), expected);
  EXPECT_EQ(frame_size(env), expected.size());
}

TEST(Frame, RoundTripFuzz) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    auto env = random_envelope(rng);
    EXPECT_EQ(decode_frame(encode_frame(env)), env);
  }
}

TEST(Frame, RejectsBadKindAndLength) {
  Envelope env{EpochId{1}, MsgKind::Est, 1, Bytes{1, 2}};
  auto bytes = encode_frame(env);
  auto bad = bytes;
  bad[4] = 0;
  EXPECT_THROW(decode_frame(bad), FrameError);
  bad[4] = 13;
  EXPECT_THROW(decode_frame(bad), FrameError);
  bad = bytes;
  bad[3] += 1;
  EXPECT_THROW(decode_frame(bad), FrameError);
  EXPECT_THROW(decode_frame(ByteView(bytes.data(), 10)), DecodeError);
}

TEST(FrameReader, ReassemblesArbitrarySplits) {
  std::mt19937_64 rng(2);
  std::vector<Envelope> sent;
  Bytes stream;
  for (int i = 0; i < 300; ++i) {
    sent.push_back(random_envelope(rng));
    auto f = encode_frame(sent.back());
    stream.insert(stream.end(), f.begin(), f.end());
  }
  FrameReader reader;
  std::vector<Envelope> got;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    auto chunk = std::min<std::size_t>(1 + rng() % 97, stream.size() - pos);
    reader.feed(ByteView(stream.data() + pos, chunk));
    pos += chunk;
    while (auto env = reader.next()) got.push_back(std::move(*env));
  }
  EXPECT_EQ(got, sent);
  EXPECT_EQ(reader.buffered(), 0u);
}

TEST(FrameReader, RejectsShortLength) {
  FrameReader reader;
  Bytes junk = {0, 0, 0, 3, 1, 1, 1};
  reader.feed(junk);
  EXPECT_THROW(reader.next(), FrameError);
}

TEST(Payload, RbcVoteIsDigestPlusSource) {
  RbcVote v{3, {}};
  v.digest.bytes.fill(0x5a);
  auto bytes = v.encode();
  ASSERT_EQ(bytes.size(), 34u);
  EXPECT_EQ(bytes[0], 0);
  EXPECT_EQ(bytes[1], 3);
  auto back = RbcVote::decode(bytes);
  EXPECT_EQ(back.source, 3);
  EXPECT_EQ(back.digest, v.digest);
  bytes.push_back(0);
  EXPECT_THROW(RbcVote::decode(bytes), DecodeError);
}

TEST(Payload, BinVotePacking) {
  BinVote v{0x0102, 0x03040506, true};
  Bytes expected = {1, 2, 3, 4, 5, 6, 1};
  EXPECT_EQ(v.encode(), expected);
  auto back = BinVote::decode(expected);
  EXPECT_EQ(back.index, 0x0102);
  EXPECT_EQ(back.round, 0x03040506u);
  EXPECT_TRUE(back.bit);
  expected[6] = 2;
  EXPECT_THROW(BinVote::decode(expected), DecodeError);
}

TEST(Payload, BatchRequestAndBlock) {
  BatchRequest req;
  for (int i = 0; i < 3; ++i) {
    BatchDigest d;
    d.bytes.fill(static_cast<std::uint8_t>(i));
    req.digests.push_back(d);
  }
  auto bytes = req.encode();
  EXPECT_EQ(bytes.size(), 4u + 96u);
  EXPECT_EQ(BatchRequest::decode(bytes).digests, req.digests);
  bytes[3] = 200;
  EXPECT_THROW(BatchRequest::decode(bytes), DecodeError);

  Block block;
  block.epoch = EpochId{9};
  Batch a;
  a.origin = 1;
  a.txs.emplace_back(Bytes{1, 2, 3});
  Batch b;
  b.origin = 2;
  block.batches = {a, b};
  auto enc = block.encode();
  EXPECT_EQ(Block::decode(enc), block);
  EXPECT_EQ(block.transactions().size(), 1u);
  enc.pop_back();
  EXPECT_THROW(Block::decode(enc), DecodeError);
}

TEST(RateMeter, ZeroWhenNothingSent) {
  RateMeter m;
  EXPECT_EQ(m.sample(2ms), 0.0);
}

TEST(RateMeter, PointTransfersOverWindow) {
  RateMeter m;
  m.record(1ms, 1200);
  EXPECT_DOUBLE_EQ(m.sample(2ms), 600'000.0);
  EXPECT_EQ(m.sample(4ms), 0.0);
}

TEST(RateMeter, SpreadsTransfersAcrossWindows) {
  RateMeter m;
  // 4000 bytes on the wire from 1 ms to 5 ms: 1000 bytes per millisecond.
  m.record(1ms, 5ms, 4000);
  EXPECT_DOUBLE_EQ(m.sample(2ms), 1000.0 / 0.002);
  EXPECT_DOUBLE_EQ(m.sample(4ms), 2000.0 / 0.002);
  EXPECT_DOUBLE_EQ(m.sample(6ms), 1000.0 / 0.002);
  EXPECT_EQ(m.sample(8ms), 0.0);
}

TEST(RateMeter, SumOfSamplesEqualsBytes) {
  std::mt19937_64 rng(4);
  RateMeter m;
  double total = 0;
  for (int i = 0; i < 500; ++i) {
    auto start = Time(static_cast<std::int64_t>(rng() % 100'000'000));
    auto len = Duration(static_cast<std::int64_t>(rng() % 5'000'000));
    auto bytes = 1 + rng() % 10'000;
    m.record(start, start + len, bytes);
    total += static_cast<double>(bytes);
  }
  double seen = 0;
  for (int t = 1; t <= 60; ++t) seen += m.sample(Time(t * 2'000'000LL)) * 0.002;
  EXPECT_NEAR(seen, total, total * 1e-9);
}

TEST(MsgKind, Names) {
  EXPECT_STREQ(to_string(MsgKind::BatchReq), "BATCH_REQ");
  EXPECT_TRUE(is_consensus_kind(MsgKind::Decide));
  EXPECT_FALSE(is_consensus_kind(MsgKind::ClientTx));
}
