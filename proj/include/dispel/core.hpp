#pragma once

#include <array>
#include <chrono>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dispel {

using ReplicaId = std::uint16_t;
using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// All protocol clocks count nanoseconds since the transport started.
using Duration = std::chrono::nanoseconds;
using Time = std::chrono::nanoseconds;

using namespace std::chrono_literals;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochId {
  std::uint64_t value = 0;

  constexpr EpochId() = default;
  constexpr explicit EpochId(std::uint64_t v) : value(v) {}

  constexpr EpochId next() const { return EpochId{value + 1}; }
  constexpr auto operator<=>(const EpochId&) const = default;
};

struct BatchDigest {
  std::array<std::uint8_t, 32> bytes{};

  std::string hex() const;
  static BatchDigest from_hex(std::string_view hex);

  auto operator<=>(const BatchDigest&) const = default;
};

struct DigestHash {
  std::size_t operator()(const BatchDigest& d) const noexcept {
    std::size_t h = 0;
    for (std::size_t i = 0; i < sizeof(std::size_t); ++i) h = (h << 8) | d.bytes[i];
    return h;
  }
};

struct Config {
  std::size_t n = 4;
  std::size_t f = 1;
  ReplicaId replica_id = 0;

  std::size_t batch_size_bytes = 25'000'000 / 4;
  std::size_t max_epochs = 12;
  // Memory set aside for in-flight batches; epoch_budget divides it by the batch size.
  std::uint64_t memory_budget_bytes = 8ULL << 30;

  Duration pool_timeout = 500ms;
  Duration idle_sample_period = 2ms;
  std::size_t idle_sample_count = 3;
  double idle_fraction = 0.05;
  double link_capacity_bytes_per_s = 600.0 * 1024 * 1024;

  Duration rtt_estimate = 10ms;
  Duration round_timeout_initial = 40ms;
  double round_timeout_factor = 2.0;
  // Retry period for unanswered batch requests.
  Duration batch_request_retry = 40ms;

  // Consensus envelopes buffered per not-yet-joined epoch (drop-oldest beyond).
  std::size_t buffer_limit_per_epoch = 10'000;
  // Terminated epochs kept around so late peers can still be served.
  std::size_t retained_epochs = 16;
  // Keep committed batches for BLOCK_REQ.
  bool retain_blocks = false;

  // f = floor((n - 1) / 3); every other knob keeps its default.
  static Config for_cluster(std::size_t n, ReplicaId id);

  // Round timeout starts at four RTTs; batch requests retry at the same period.
  void set_rtt_estimate(Duration rtt);

  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct Quorums {
  std::size_t echo_threshold;
  std::size_t ready_amplify;
  std::size_t deliver_threshold;
  std::size_t aux_threshold;

  bool operator==(const Quorums&) const = default;
};

Quorums quorums(const Config& cfg);
Quorums quorums(std::size_t n, std::size_t f);

std::size_t default_fault_bound(std::size_t n);

inline constexpr std::uint64_t kDefaultDecisionBudget = 25'000'000;

// Per-replica batch size derived from an aggregate decision budget.
std::size_t default_batch_size(std::size_t n, std::uint64_t total_budget_bytes = kDefaultDecisionBudget);

class Transaction {
 public:
  Transaction() = default;
  explicit Transaction(Bytes payload);

  const Bytes& payload() const { return payload_; }
  std::size_t size() const { return payload_.size(); }

  bool operator==(const Transaction&) const = default;

 private:
  Bytes payload_;
};

struct Batch {
  ReplicaId origin = 0;
  EpochId epoch{};
  std::vector<Transaction> txs;

  // origin:u16 | epoch:u64 | count:u32 | (len:u32 | bytes)*, all big-endian.
  Bytes serialize() const;
  static Batch deserialize(ByteView bytes);

  std::size_t serialized_size() const;
  std::size_t payload_bytes() const;

  static constexpr std::size_t kHeaderSize = 2 + 8 + 4;
  static constexpr std::size_t kPerTxOverhead = 4;

  bool operator==(const Batch&) const = default;
};

using BatchPtr = std::shared_ptr<const Batch>;

BatchDigest sha256(ByteView data);
BatchDigest digest(const Batch& batch);

// Big-endian helpers shared by the wire codecs.
namespace be {

void put_u8(Bytes& out, std::uint8_t v);
void put_u16(Bytes& out, std::uint16_t v);
void put_u32(Bytes& out, std::uint32_t v);
void put_u64(Bytes& out, std::uint64_t v);
void put_bytes(Bytes& out, ByteView v);

class Reader {
 public:
  explicit Reader(ByteView data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  ByteView bytes(std::size_t len);

  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }
  void expect_done(const char* what) const;

 private:
  void need(std::size_t len) const;

  ByteView data_;
  std::size_t pos_ = 0;
};

}  // namespace be

}  // namespace dispel

template <>
struct std::hash<dispel::EpochId> {
  std::size_t operator()(const dispel::EpochId& e) const noexcept { return std::hash<std::uint64_t>{}(e.value); }
};
