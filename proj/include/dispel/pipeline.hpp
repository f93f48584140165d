#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/epoch_consensus.hpp"
#include "dispel/monitor.hpp"
#include "dispel/transport.hpp"

namespace dispel {

enum class EpochState : std::uint8_t { Running, Decided, Commitable, Terminated };

const char* to_string(EpochState s);

struct CommittedEpoch {
  EpochId epoch{};
  Time commit_time{};
  std::vector<BatchDigest> digests;
  std::size_t tx_count = 0;
  std::size_t payload_bytes = 0;

  bool operator==(const CommittedEpoch&) const = default;
};

struct EpochRecord {
  EpochId epoch{};
  EpochState state = EpochState::Running;
  // Released once every binary instance halted; batches stay for late requests.
  std::unique_ptr<EpochConsensus> consensus;
  std::unordered_map<BatchDigest, BatchPtr, DigestHash> batches;
  std::vector<BatchDigest> decided;
  std::vector<BatchDigest> missing;
  BatchPtr own_batch;
  BatchDigest own_digest;
  Time started{};
  bool self_spawned = false;
};

struct ReplicaStats {
  std::uint64_t envelopes = 0;
  std::uint64_t decode_errors = 0;
  std::uint64_t dropped_far_future = 0;
  std::uint64_t dropped_stale = 0;
  std::uint64_t buffered = 0;
  std::uint64_t buffer_evictions = 0;
  std::uint64_t spawned = 0;
  std::uint64_t joined = 0;
  std::uint64_t batch_requests = 0;
  std::uint64_t batch_responses_rejected = 0;
  std::uint64_t requeued_txs = 0;
  std::uint64_t client_accepted = 0;
  std::uint64_t client_rejected = 0;
  std::size_t max_active = 0;
};

// The distributed pipeline manager of one replica: spawns and joins epochs,
// resolves decided digests to batches and commits epochs in order.
class Replica : public EventHandler, private ConsensusSink {
 public:
  using CommitFn = std::function<void(const CommittedEpoch&, const std::vector<BatchPtr>&)>;
  using StateFn = std::function<void(EpochId, EpochState)>;

  Replica(Config cfg, Transport& net);
  ~Replica() override;

  void on_commit(CommitFn fn) { commit_fn_ = std::move(fn); }
  void on_state_change(StateFn fn) { state_fn_ = std::move(fn); }

  void on_start() override;
  void on_envelope(const Envelope& env) override;
  void on_timer(const TimerTag& tag) override;

  OfferResult submit(Transaction tx);

  // One monitor step: spawns at next_spawn when the monitor allows it.
  std::optional<EpochId> maybe_spawn();

  const Config& config() const { return cfg_; }
  ReplicaId id() const { return cfg_.replica_id; }
  EpochId next_commit() const { return next_commit_; }
  EpochId next_spawn() const { return next_spawn_; }
  std::size_t active_epochs() const { return static_cast<std::size_t>(next_spawn_.value - next_commit_.value); }
  std::size_t budget() const { return budget_; }
  std::optional<EpochState> state_of(EpochId e) const;
  const EpochRecord* record(EpochId e) const;
  const std::vector<CommittedEpoch>& committed_log() const { return log_; }
  const TxPool& pool() const { return pool_; }
  const IdleDetector& detector() const { return detector_; }
  const ReplicaStats& stats() const { return stats_; }
  std::size_t buffered_epochs() const { return buffers_.size(); }
  std::optional<Bytes> block(EpochId e) const;

 private:
  // ConsensusSink
  void broadcast(Envelope env) override;
  void arm_round_timer(EpochId epoch, std::uint16_t index, std::uint32_t round, Duration delay) override;
  void on_batch(EpochId epoch, const BatchDigest& d, BatchPtr batch) override;
  void on_decision(EpochId epoch, const std::vector<BatchDigest>& decided) override;

  EpochRecord* find(EpochId e);
  void route_consensus(const Envelope& env);
  void on_remote_epoch(const Envelope& env);
  bool predecessor_decided(EpochId e) const;
  bool can_join(EpochId e) const;
  EpochRecord& start_epoch(EpochId e, bool self_spawn);
  void replay(EpochId e);
  void deliver(EpochRecord& rec, const Envelope& env);
  void set_state(EpochRecord& rec, EpochState s);
  void request_missing(EpochRecord& rec);
  void on_batch_request(const Envelope& env);
  void on_batch_response(const Envelope& env);
  void on_block_request(const Envelope& env);
  void settle();
  void advance_commit();
  void prune();

  Config cfg_;
  Transport& net_;
  std::size_t budget_;
  TxPool pool_;
  IdleDetector detector_;

  std::map<EpochId, std::unique_ptr<EpochRecord>> records_;
  std::map<EpochId, std::deque<Envelope>> buffers_;
  EpochId next_spawn_{};
  EpochId next_commit_{};
  std::vector<CommittedEpoch> log_;

  std::map<EpochId, Bytes> blocks_;
  std::multimap<EpochId, ReplicaId> parked_block_requests_;

  CommitFn commit_fn_;
  StateFn state_fn_;
  ReplicaStats stats_;
  int depth_ = 0;
};

}  // namespace dispel
