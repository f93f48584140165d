#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/transport.hpp"

namespace dispel {

class DuplicateStart : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bracha reliable broadcast of one batch, for one (epoch, source) pair.
// Only the BATCH step carries the batch; ECHO and READY carry its digest,
// so delivery can happen before this replica holds the batch bytes.
class RbcInstance {
 public:
  struct Output {
    std::vector<Envelope> broadcasts;
    std::optional<BatchDigest> delivered;
    // Set when a BATCH from the source was accepted, together with its digest.
    BatchPtr accepted_batch;
    BatchDigest accepted_digest;
  };

  RbcInstance(const Quorums& q, std::size_t n, ReplicaId self, EpochId epoch, ReplicaId source);

  // Source side: BATCH to all, then ECHO of the digest.
  Output start(BatchPtr batch);
  Output start(BatchPtr batch, const BatchDigest& d);

  // Dispatches BATCH, ECHO and READY; throws DecodeError on malformed payloads.
  Output handle(const Envelope& env);

  Output on_batch(ReplicaId sender, BatchPtr batch, const BatchDigest& d);
  Output on_echo(ReplicaId sender, const BatchDigest& d);
  Output on_ready(ReplicaId sender, const BatchDigest& d);

  EpochId epoch() const { return epoch_; }
  ReplicaId source() const { return source_; }
  const std::optional<BatchDigest>& delivered() const { return delivered_; }
  const BatchPtr& seen_batch() const { return seen_batch_; }
  const std::optional<BatchDigest>& seen_digest() const { return seen_digest_; }
  bool echoed() const { return echoed_; }
  bool readied() const { return readied_; }
  bool started() const { return started_; }
  std::size_t equivocations() const { return equivocations_; }
  std::size_t echo_count(const BatchDigest& d) const;
  std::size_t ready_count(const BatchDigest& d) const;

 private:
  struct Tally {
    BatchDigest digest;
    std::size_t echoes = 0;
    std::size_t readies = 0;
  };

  std::size_t tally_index(const BatchDigest& d);
  const Tally* find_tally(const BatchDigest& d) const;
  Envelope vote(MsgKind kind, const BatchDigest& d) const;
  void send_ready(const BatchDigest& d, Output& out);

  Quorums q_;
  std::size_t n_;
  ReplicaId self_;
  EpochId epoch_;
  ReplicaId source_;

  BatchPtr seen_batch_;
  std::optional<BatchDigest> seen_digest_;
  std::optional<BatchDigest> delivered_;
  bool started_ = false;
  bool echoed_ = false;
  bool readied_ = false;
  std::size_t equivocations_ = 0;

  // Per sender: 1 + tally index of the first ECHO / READY, 0 when none yet.
  std::vector<std::uint16_t> echo_from_;
  std::vector<std::uint16_t> ready_from_;
  std::vector<Tally> tallies_;
};

}  // namespace dispel
