#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dispel/binconsensus.hpp"
#include "dispel/core.hpp"
#include "dispel/rbc.hpp"
#include "dispel/transport.hpp"

namespace dispel {

class DuplicateEpoch : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Upward and outward effects of an epoch's consensus.
class ConsensusSink {
 public:
  virtual ~ConsensusSink() = default;
  virtual void broadcast(Envelope env) = 0;
  virtual void arm_round_timer(EpochId epoch, std::uint16_t index, std::uint32_t round, Duration delay) = 0;
  // A batch from source k arrived through its reliable broadcast.
  virtual void on_batch(EpochId epoch, const BatchDigest& d, BatchPtr batch) = 0;
  virtual void on_decision(EpochId epoch, const std::vector<BatchDigest>& decided) = 0;
};

// n reliable broadcasts feed n binary instances; the binary decisions form a
// bitmask over the delivered digests.
class EpochConsensus {
 public:
  EpochConsensus(const Config& cfg, EpochId epoch, ConsensusSink& sink);

  void propose(BatchPtr batch);
  void propose(BatchPtr batch, const BatchDigest& d);
  // Throws DecodeError on malformed payloads.
  void handle(const Envelope& env);
  void on_round_timeout(std::uint16_t index, std::uint32_t round);

  EpochId epoch() const { return epoch_; }
  bool proposed() const { return proposed_; }
  bool decided() const { return decided_set_.has_value(); }
  const std::optional<std::vector<BatchDigest>>& decided_set() const { return decided_set_; }
  const std::optional<BatchDigest>& delivered(std::size_t k) const { return delivered_[k]; }
  const std::optional<bool>& mask(std::size_t k) const { return mask_[k]; }
  bool all_halted() const;
  std::size_t size() const { return n_; }

  const RbcInstance& rbc(std::size_t k) const { return rbc_[k]; }
  const BinInstance& bin(std::size_t k) const { return bin_[k]; }

  Duration round_timeout(std::uint32_t round) const;

 private:
  void on_rbc_deliver(std::size_t k, const BatchDigest& d);
  void on_first_one();
  void on_bin_decide(std::size_t k, bool b);
  void bin_propose(std::size_t k, bool b);
  void apply(RbcInstance::Output out, std::size_t k);
  void apply(BinInstance::Output out, std::size_t k);
  void maybe_emit();

  Config cfg_;
  EpochId epoch_;
  ConsensusSink& sink_;
  std::size_t n_;

  std::vector<RbcInstance> rbc_;
  std::vector<BinInstance> bin_;
  std::vector<std::optional<BatchDigest>> delivered_;
  std::vector<std::optional<bool>> mask_;
  std::size_t decided_bits_ = 0;
  bool proposed_ = false;
  bool seen_one_ = false;
  std::optional<std::vector<BatchDigest>> decided_set_;
};

}  // namespace dispel
