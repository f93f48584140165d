#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dispel/core.hpp"

namespace dispel {

enum class MsgKind : std::uint8_t {
  Batch = 1,
  Echo,
  Ready,
  Est,
  Coord,
  Aux,
  Decide,
  BatchReq,
  BatchResp,
  ClientTx,
  BlockReq,
  BlockResp,
};

const char* to_string(MsgKind kind);
bool is_consensus_kind(MsgKind kind);

// Sender id used by clients in their frames; transports map it to a
// per-connection id at or above kFirstClientId.
inline constexpr ReplicaId kClientSender = 0xFFFF;
inline constexpr ReplicaId kFirstClientId = 0x8000;

struct Envelope {
  EpochId epoch{};
  MsgKind kind = MsgKind::Batch;
  ReplicaId sender = 0;
  Bytes payload;

  bool operator==(const Envelope&) const = default;
};

using EnvelopePtr = std::shared_ptr<const Envelope>;

// Frame: length:u32 | kind:u8 | epoch:u64 | sender:u16 | payload, big-endian.
// The length counts every byte after the length field itself.
inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 8 + 2;
inline constexpr std::size_t kMaxFrameBody = 256u << 20;

class FrameError : public DecodeError {
 public:
  using DecodeError::DecodeError;
};

Bytes encode_frame(const Envelope& env);
Envelope decode_frame(ByteView frame);
std::size_t frame_size(const Envelope& env);

// Incremental frame extraction for stream transports.
class FrameReader {
 public:
  void feed(ByteView data);
  // Throws FrameError on a malformed length or kind.
  std::optional<Envelope> next();
  std::size_t buffered() const { return buf_.size() - pos_; }

 private:
  Bytes buf_;
  std::size_t pos_ = 0;
};

// Payload codecs ------------------------------------------------------------

// ECHO / READY: the RBC source they vote on plus the 32-byte digest.
struct RbcVote {
  ReplicaId source = 0;
  BatchDigest digest;

  static constexpr std::size_t kEncodedSize = 2 + 32;
  Bytes encode() const;
  static RbcVote decode(ByteView payload);
};

// EST / COORD / AUX / DECIDE: instance index, round, bit.
struct BinVote {
  std::uint16_t index = 0;
  std::uint32_t round = 0;
  bool bit = false;

  static constexpr std::size_t kEncodedSize = 2 + 4 + 1;
  Bytes encode() const;
  static BinVote decode(ByteView payload);
};

struct BatchRequest {
  std::vector<BatchDigest> digests;

  Bytes encode() const;
  static BatchRequest decode(ByteView payload);
};

// A committed epoch as served to BLOCK_REQ: batches in commit order.
struct Block {
  EpochId epoch{};
  std::vector<Batch> batches;

  Bytes encode() const;
  static Block decode(ByteView payload);
  std::vector<Transaction> transactions() const;

  bool operator==(const Block&) const = default;
};

// Transport contract ---------------------------------------------------------

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownPeer : public TransportError {
 public:
  using TransportError::TransportError;
};

enum class SendStatus { Queued, Backpressure };

enum class TimerKind : std::uint8_t { MonitorTick, RoundTimeout, BatchRequestRetry, User };

struct TimerTag {
  TimerKind kind = TimerKind::MonitorTick;
  EpochId epoch{};
  std::uint16_t index = 0;
  std::uint32_t round = 0;

  bool operator==(const TimerTag&) const = default;
};

// Everything a transport feeds into a replica, one call at a time.
class EventHandler {
 public:
  virtual ~EventHandler() = default;
  virtual void on_start() {}
  virtual void on_envelope(const Envelope& env) = 0;
  virtual void on_timer(const TimerTag& tag) = 0;
};

class Transport {
 public:
  virtual ~Transport() = default;

  virtual ReplicaId self() const = 0;
  virtual std::size_t size() const = 0;
  virtual Time now() const = 0;

  // Reliable FIFO per (sender, receiver) between correct connected replicas.
  virtual SendStatus send(ReplicaId to, EnvelopePtr env) = 0;
  // Sends to all n replicas; the local copy is delivered loss-free.
  virtual SendStatus broadcast(EnvelopePtr env) = 0;

  virtual void schedule(Duration delay, TimerTag tag) = 0;

  // Bytes handed to the network since the previous sample, per second of elapsed time.
  virtual double tx_rate_sample() = 0;
};

// Byte-rate accounting. Transfers may span an interval; a sample takes the
// share of each transfer that overlaps the window since the previous sample.
class RateMeter {
 public:
  explicit RateMeter(Time start = Time::zero()) : last_sample_(start) {}

  void record(Time start, Time end, std::uint64_t bytes);
  void record(Time at, std::uint64_t bytes) { record(at, at, bytes); }
  double sample(Time now);

 private:
  struct Transfer {
    Time start;
    Time end;
    double bytes;
  };
  std::deque<Transfer> pending_;
  Time last_sample_;
};

}  // namespace dispel
