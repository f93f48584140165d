#include "dispel/transport.hpp"

#include <algorithm>

namespace dispel {

const char* to_string(MsgKind kind) {
  switch (kind) {
    case MsgKind::Batch: return "BATCH";
    case MsgKind::Echo: return "ECHO";
    case MsgKind::Ready: return "READY";
    case MsgKind::Est: return "EST";
    case MsgKind::Coord: return "COORD";
    case MsgKind::Aux: return "AUX";
    case MsgKind::Decide: return "DECIDE";
    case MsgKind::BatchReq: return "BATCH_REQ";
    case MsgKind::BatchResp: return "BATCH_RESP";
    case MsgKind::ClientTx: return "CLIENT_TX";
    case MsgKind::BlockReq: return "BLOCK_REQ";
    case MsgKind::BlockResp: return "BLOCK_RESP";
  }
  return "UNKNOWN";
}

bool is_consensus_kind(MsgKind kind) {
  switch (kind) {
    case MsgKind::Batch:
    case MsgKind::Echo:
    case MsgKind::Ready:
    case MsgKind::Est:
    case MsgKind::Coord:
    case MsgKind::Aux:
    case MsgKind::Decide: return true;
    default: return false;
  }
}

namespace {

bool valid_kind(std::uint8_t k) {
  return k >= static_cast<std::uint8_t>(MsgKind::Batch) && k <= static_cast<std::uint8_t>(MsgKind::BlockResp);
}

}  // namespace

std::size_t frame_size(const Envelope& env) { return kFrameHeaderSize + env.payload.size(); }

Bytes encode_frame(const Envelope& env) {
  if (env.payload.size() > kMaxFrameBody) throw FrameError("payload exceeds maximum frame size");
  Bytes out;
  out.reserve(frame_size(env));
  be::put_u32(out, static_cast<std::uint32_t>(kFrameHeaderSize - 4 + env.payload.size()));
  be::put_u8(out, static_cast<std::uint8_t>(env.kind));
  be::put_u64(out, env.epoch.value);
  be::put_u16(out, env.sender);
  be::put_bytes(out, env.payload);
  return out;
}

Envelope decode_frame(ByteView frame) {
  be::Reader in(frame);
  std::uint32_t len = in.u32();
  if (len < kFrameHeaderSize - 4) throw FrameError("frame length shorter than header");
  if (len != in.remaining()) throw FrameError("frame length does not match buffer");
  std::uint8_t kind = in.u8();
  if (!valid_kind(kind)) throw FrameError("unknown message kind " + std::to_string(kind));
  Envelope env;
  env.kind = static_cast<MsgKind>(kind);
  env.epoch = EpochId{in.u64()};
  env.sender = in.u16();
  auto body = in.bytes(in.remaining());
  env.payload.assign(body.begin(), body.end());
  return env;
}

void FrameReader::feed(ByteView data) {
  if (pos_ > 0 && pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  } else if (pos_ > (1u << 20) && pos_ * 2 > buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  buf_.insert(buf_.end(), data.begin(), data.end());
}

std::optional<Envelope> FrameReader::next() {
  if (buffered() < 4) return std::nullopt;
  const std::uint8_t* p = buf_.data() + pos_;
  std::uint32_t len = std::uint32_t(p[0]) << 24 | std::uint32_t(p[1]) << 16 | std::uint32_t(p[2]) << 8 | p[3];
  if (len < kFrameHeaderSize - 4 || len > kMaxFrameBody + kFrameHeaderSize) throw FrameError("bad frame length");
  if (buffered() < 4 + std::size_t(len)) return std::nullopt;
  auto env = decode_frame(ByteView(p, 4 + std::size_t(len)));
  pos_ += 4 + len;
  return env;
}

Bytes RbcVote::encode() const {
  Bytes out;
  out.reserve(kEncodedSize);
  be::put_u16(out, source);
  be::put_bytes(out, digest.bytes);
  return out;
}

RbcVote RbcVote::decode(ByteView payload) {
  be::Reader in(payload);
  RbcVote v;
  v.source = in.u16();
  auto d = in.bytes(32);
  std::copy(d.begin(), d.end(), v.digest.bytes.begin());
  in.expect_done("rbc vote");
  return v;
}

Bytes BinVote::encode() const {
  Bytes out;
  out.reserve(kEncodedSize);
  be::put_u16(out, index);
  be::put_u32(out, round);
  be::put_u8(out, bit ? 1 : 0);
  return out;
}

BinVote BinVote::decode(ByteView payload) {
  be::Reader in(payload);
  BinVote v;
  v.index = in.u16();
  v.round = in.u32();
  auto b = in.u8();
  if (b > 1) throw DecodeError("binary vote bit must be 0 or 1");
  v.bit = b == 1;
  in.expect_done("binary vote");
  return v;
}

Bytes BatchRequest::encode() const {
  Bytes out;
  be::put_u32(out, static_cast<std::uint32_t>(digests.size()));
  for (const auto& d : digests) be::put_bytes(out, d.bytes);
  return out;
}

BatchRequest BatchRequest::decode(ByteView payload) {
  be::Reader in(payload);
  std::uint32_t count = in.u32();
  if (count > in.remaining() / 32) throw DecodeError("batch request count exceeds payload");
  BatchRequest req;
  req.digests.resize(count);
  for (auto& d : req.digests) {
    auto b = in.bytes(32);
    std::copy(b.begin(), b.end(), d.bytes.begin());
  }
  in.expect_done("batch request");
  return req;
}

Bytes Block::encode() const {
  Bytes out;
  be::put_u64(out, epoch.value);
  be::put_u32(out, static_cast<std::uint32_t>(batches.size()));
  for (const auto& b : batches) {
    auto bytes = b.serialize();
    be::put_u32(out, static_cast<std::uint32_t>(bytes.size()));
    be::put_bytes(out, bytes);
  }
  return out;
}

Block Block::decode(ByteView payload) {
  be::Reader in(payload);
  Block block;
  block.epoch = EpochId{in.u64()};
  std::uint32_t count = in.u32();
  if (count > in.remaining() / (4 + Batch::kHeaderSize)) throw DecodeError("block batch count exceeds payload");
  block.batches.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = in.u32();
    block.batches.push_back(Batch::deserialize(in.bytes(len)));
  }
  in.expect_done("block");
  return block;
}

std::vector<Transaction> Block::transactions() const {
  std::vector<Transaction> out;
  for (const auto& b : batches) out.insert(out.end(), b.txs.begin(), b.txs.end());
  return out;
}

void RateMeter::record(Time start, Time end, std::uint64_t bytes) {
  if (bytes == 0) return;
  pending_.push_back(Transfer{start, std::max(start, end), static_cast<double>(bytes)});
}

double RateMeter::sample(Time now) {
  const Time from = last_sample_;
  last_sample_ = now;
  if (now <= from) return 0.0;
  double bytes = 0.0;
  for (const auto& t : pending_) {
    if (t.end == t.start) {
      if (t.start > from && t.start <= now) bytes += t.bytes;
      continue;
    }
    auto lo = std::max(t.start, from);
    auto hi = std::min(t.end, now);
    if (hi > lo)
      bytes += t.bytes * static_cast<double>((hi - lo).count()) / static_cast<double>((t.end - t.start).count());
  }
  std::erase_if(pending_, [now](const Transfer& t) { return t.end <= now; });
  return bytes / (static_cast<double>((now - from).count()) / 1e9);
}

}  // namespace dispel
