#include "dispel/core.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstring>

namespace dispel {

namespace {

constexpr char kHex[] = "0123456789abcdef";

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

std::string BatchDigest::hex() const {
  std::string out;
  out.reserve(64);
  for (auto b : bytes) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

BatchDigest BatchDigest::from_hex(std::string_view hex) {
  if (hex.size() != 64) throw DecodeError("digest hex must be 64 characters");
  BatchDigest d;
  for (std::size_t i = 0; i < 32; ++i) {
    int hi = hex_value(hex[2 * i]);
    int lo = hex_value(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw DecodeError("digest hex has a non-hex character");
    d.bytes[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return d;
}

std::size_t default_fault_bound(std::size_t n) { return n == 0 ? 0 : (n - 1) / 3; }

Config Config::for_cluster(std::size_t n, ReplicaId id) {
  Config cfg;
  cfg.n = n;
  cfg.f = default_fault_bound(n);
  cfg.replica_id = id;
  cfg.batch_size_bytes = default_batch_size(n);
  return cfg;
}

void Config::set_rtt_estimate(Duration rtt) {
  rtt_estimate = rtt;
  round_timeout_initial = 4 * rtt;
  batch_request_retry = 4 * rtt;
}

void Config::validate() const {
  if (n < 3 * f + 1)
    throw ConfigError("n=" + std::to_string(n) + " cannot tolerate f=" + std::to_string(f) + " (need n >= 3f+1)");
  if (n > 0xFFFF) throw ConfigError("n exceeds the 16-bit replica id space");
  if (replica_id >= n) throw ConfigError("replica_id " + std::to_string(replica_id) + " outside [0, n)");
  if (batch_size_bytes <= Batch::kHeaderSize + Batch::kPerTxOverhead)
    throw ConfigError("batch_size_bytes too small to hold a transaction");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (idle_sample_count < 1) throw ConfigError("idle_sample_count must be at least 1");
  if (idle_sample_period <= Duration::zero()) throw ConfigError("idle_sample_period must be positive");
  if (!(idle_fraction > 0.0 && idle_fraction <= 1.0)) throw ConfigError("idle_fraction must lie in (0, 1]");
  if (!(link_capacity_bytes_per_s > 0.0)) throw ConfigError("link capacity must be positive");
  if (round_timeout_initial <= Duration::zero()) throw ConfigError("round_timeout_initial must be positive");
  if (round_timeout_factor < 1.0) throw ConfigError("round_timeout_factor must be >= 1");
  if (batch_request_retry <= Duration::zero()) throw ConfigError("batch_request_retry must be positive");
  if (pool_timeout <= Duration::zero()) throw ConfigError("pool_timeout must be positive");
}

Quorums quorums(std::size_t n, std::size_t f) {
  return Quorums{
      .echo_threshold = (n + f + 2) / 2,  // ceil((n + f + 1) / 2)
      .ready_amplify = f + 1,
      .deliver_threshold = 2 * f + 1,
      .aux_threshold = n - f,
  };
}

Quorums quorums(const Config& cfg) { return quorums(cfg.n, cfg.f); }

std::size_t default_batch_size(std::size_t n, std::uint64_t total_budget_bytes) {
  if (n == 0) throw ConfigError("replica count must be positive");
  return static_cast<std::size_t>(total_budget_bytes / n);
}

Transaction::Transaction(Bytes payload) : payload_(std::move(payload)) {
  if (payload_.empty()) throw std::invalid_argument("transaction payload must not be empty");
}

Bytes Batch::serialize() const {
  Bytes out;
  out.reserve(serialized_size());
  be::put_u16(out, origin);
  be::put_u64(out, epoch.value);
  be::put_u32(out, static_cast<std::uint32_t>(txs.size()));
  for (const auto& tx : txs) {
    be::put_u32(out, static_cast<std::uint32_t>(tx.size()));
    be::put_bytes(out, tx.payload());
  }
  return out;
}

Batch Batch::deserialize(ByteView bytes) {
  be::Reader in(bytes);
  Batch b;
  b.origin = in.u16();
  b.epoch = EpochId{in.u64()};
  std::uint32_t count = in.u32();
  // Each transaction needs at least a length prefix and one byte.
  if (count > in.remaining() / (kPerTxOverhead + 1)) throw DecodeError("batch tx count exceeds frame");
  b.txs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = in.u32();
    if (len == 0) throw DecodeError("empty transaction in batch");
    auto body = in.bytes(len);
    b.txs.emplace_back(Bytes(body.begin(), body.end()));
  }
  in.expect_done("batch");
  return b;
}

std::size_t Batch::serialized_size() const {
  std::size_t size = kHeaderSize;
  for (const auto& tx : txs) size += kPerTxOverhead + tx.size();
  return size;
}

std::size_t Batch::payload_bytes() const {
  std::size_t size = 0;
  for (const auto& tx : txs) size += tx.size();
  return size;
}

BatchDigest sha256(ByteView data) {
  BatchDigest d;
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), d.bytes.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw std::runtime_error("sha256 failed");
  return d;
}

BatchDigest digest(const Batch& batch) { return sha256(batch.serialize()); }

namespace be {

void put_u8(Bytes& out, std::uint8_t v) { out.push_back(v); }

void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int shift = 56; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_bytes(Bytes& out, ByteView v) { out.insert(out.end(), v.begin(), v.end()); }

void Reader::need(std::size_t len) const {
  if (remaining() < len) throw DecodeError("truncated input");
}

std::uint8_t Reader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t Reader::u16() {
  need(2);
  std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] << 8 | data_[pos_ + 1]);
  pos_ += 2;
  return v;
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = v << 8 | data_[pos_ + i];
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = v << 8 | data_[pos_ + i];
  pos_ += 8;
  return v;
}

ByteView Reader::bytes(std::size_t len) {
  need(len);
  auto v = data_.subspan(pos_, len);
  pos_ += len;
  return v;
}

void Reader::expect_done(const char* what) const {
  if (!done()) throw DecodeError(std::string("trailing bytes after ") + what);
}

}  // namespace be

}  // namespace dispel
