#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/kvfile.hpp"
#include "dispel/pipeline.hpp"
#include "dispel/transport.hpp"

namespace dispel {

enum class ByzBehavior : std::uint8_t { Mute, RbcEquivocator, EstEquivocator, EpochSpammer };

const char* to_string(ByzBehavior b);
ByzBehavior parse_byz_behavior(std::string_view name);

struct FaultSpec {
  enum class Kind : std::uint8_t { Crash, CrashRegion, Partition, Byzantine };

  Kind kind = Kind::Crash;
  // Crash / Byzantine: one replica. CrashRegion: the crashed set. Partition: side A.
  std::vector<ReplicaId> replicas;
  // Partition: side B.
  std::vector<ReplicaId> other;
  Duration duration{};
  ByzBehavior behavior = ByzBehavior::Mute;

  static FaultSpec crash(ReplicaId r);
  static FaultSpec crash_region(std::vector<ReplicaId> rs);
  static FaultSpec partition(std::vector<ReplicaId> a, std::vector<ReplicaId> b, Duration d);
  static FaultSpec byzantine(ReplicaId r, ByzBehavior b);
};

const char* to_string(FaultSpec::Kind k);

struct TimedFault {
  Time at{};
  FaultSpec fault;
};

// Client traffic injected by the cluster runner.
struct Workload {
  // Open-loop transactions per second per target replica.
  double rate_tx_per_s = 0;
  // Keep every target's pool topped up instead of a fixed rate.
  bool saturate = false;
  std::size_t tx_size = 400;
  Duration tick = 1ms;
  // Empty means every replica.
  std::vector<ReplicaId> targets;
};

struct SimScenario {
  std::size_t n = 4;
  // One-way delay per ordered pair; empty means `latency` everywhere.
  std::vector<std::vector<Duration>> latency_matrix;
  Duration latency = 10ms;
  // Uniform extra delay in [0, jitter] per frame; FIFO is kept regardless.
  Duration jitter{};
  // Per directed link; 0 means unlimited.
  double bandwidth_bytes_per_s = 20.0 * 1024 * 1024;
  double loss_rate = 0;
  Duration retransmit_timeout = 200ms;
  std::uint64_t seed = 1;
  std::vector<TimedFault> faults;
  Duration horizon = 10s;
  Workload load;
  // Record every delivery in the trace, not only in its fingerprint.
  bool trace_deliveries = false;

  Duration link_latency(ReplicaId from, ReplicaId to) const;
  // Regions of equal size, consecutive ids; intra and inter-region one-way delays.
  void set_regions(std::size_t regions, Duration intra, Duration inter);
  std::vector<ReplicaId> region_members(std::size_t regions, std::size_t region) const;
  // Throws ConfigError.
  void validate() const;
};

// Keys: n, seed, latency_ms, jitter_ms, bandwidth_mib_s, loss_rate, rto_ms,
// horizon_s, regions, intra_ms, inter_ms, load_rate, load_saturate, tx_size,
// trace_deliveries, and fault = "<time_s> crash <id>", "<time_s> crash_region <ids,>",
// "<time_s> partition <ids,> <ids,> <duration_s>", "<time_s> byzantine <id> <behavior>".
SimScenario scenario_from_kv(const KvFile& kv);

enum class TraceKind : std::uint8_t { Deliver, State, Commit, Fault, Spawn };

const char* to_string(TraceKind k);

struct TraceRecord {
  Time at{};
  TraceKind kind = TraceKind::Deliver;
  ReplicaId node = 0;
  ReplicaId peer = 0;
  std::uint64_t epoch = 0;
  std::uint64_t a = 0;
  std::uint64_t b = 0;

  bool operator==(const TraceRecord&) const = default;
};

class EventTrace {
 public:
  void add(const TraceRecord& r, bool store = true);
  const std::vector<TraceRecord>& records() const { return records_; }
  // Covers every added record, stored or not.
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::size_t count() const { return count_; }

  // time_ns,event,node,peer,epoch,a,b
  std::string to_csv() const;
  static EventTrace from_csv(std::string_view csv);

 private:
  std::vector<TraceRecord> records_;
  std::uint64_t fingerprint_ = 1469598103934665603ULL;
  std::size_t count_ = 0;
};

// Rewrites a Byzantine replica's outbound traffic.
class Adversary {
 public:
  virtual ~Adversary() = default;
  virtual ByzBehavior behavior() const = 0;
  // Frames actually put on the link towards `to`.
  virtual std::vector<EnvelopePtr> outbound(ReplicaId to, const EnvelopePtr& env, std::mt19937_64& rng) = 0;
};

std::unique_ptr<Adversary> make_adversary(ByzBehavior b, ReplicaId self, std::size_t n);

struct SimStats {
  std::uint64_t events = 0;
  std::uint64_t deliveries = 0;
  std::uint64_t dropped_crashed = 0;
  std::uint64_t delayed_by_loss = 0;
  std::uint64_t held_by_partition = 0;
  std::uint64_t bytes_sent = 0;
};

// Single-threaded discrete-event network. Each replica gets a Transport view
// whose clock is the simulated clock.
class Simulator {
 public:
  explicit Simulator(SimScenario scenario);
  ~Simulator();

  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  const SimScenario& scenario() const { return sc_; }
  Transport& transport(ReplicaId i);
  void attach(ReplicaId i, EventHandler* handler);

  // Arbitrary callback at a simulated instant (client load, probes).
  void call_at(Time at, std::function<void()> fn);

  // Starts attached handlers on the first call, then processes events up to `until`.
  void run_until(Time until);
  Time now() const { return now_; }

  bool crashed(ReplicaId i) const { return crashed_[i]; }
  bool byzantine(ReplicaId i) const { return adversaries_[i] != nullptr; }
  std::optional<Time> crash_time(ReplicaId i) const;
  // Crashed or Byzantine at any point of the run so far.
  bool faulty(ReplicaId i) const { return crashed_[i] || adversaries_[i] || scheduled_faulty_[i]; }

  EventTrace& trace() { return trace_; }
  const EventTrace& trace() const { return trace_; }
  const SimStats& stats() const { return stats_; }

 private:
  class NodeTransport;
  friend class NodeTransport;

  enum class EvType : std::uint8_t { Deliver, Timer, Fault, Call };
  struct Event {
    Time at;
    std::uint64_t seq;
    EvType type;
    ReplicaId to;
    ReplicaId from;
    EnvelopePtr env;
    TimerTag tag;
    std::size_t index;
  };
  struct Later {
    bool operator()(const Event& a, const Event& b) const { return a.at != b.at ? a.at > b.at : a.seq > b.seq; }
  };

  void push(Event ev);
  void send_frame(ReplicaId from, ReplicaId to, EnvelopePtr env);
  void transmit(ReplicaId from, ReplicaId to, EnvelopePtr env);
  void apply_fault(const FaultSpec& f);
  bool partitioned(ReplicaId a, ReplicaId b, Time at, Time* heal) const;

  SimScenario sc_;
  std::size_t n_;
  Time now_{};
  bool started_ = false;
  std::uint64_t seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::vector<std::unique_ptr<NodeTransport>> nodes_;
  std::vector<EventHandler*> handlers_;
  std::vector<bool> crashed_;
  std::vector<bool> scheduled_faulty_;
  std::vector<std::optional<Time>> crash_time_;
  std::vector<std::unique_ptr<Adversary>> adversaries_;
  std::vector<Time> link_free_;
  std::vector<Time> last_arrival_;
  struct ActivePartition {
    std::vector<bool> side_a;
    std::vector<bool> side_b;
    Time until;
  };
  std::vector<ActivePartition> partitions_;
  std::vector<std::function<void()>> calls_;
  std::mt19937_64 net_rng_;
  std::mt19937_64 adv_rng_;
  EventTrace trace_;
  SimStats stats_;
};

// Per-replica commit observations made by the cluster runner.
struct CommitSample {
  Time at{};
  EpochId epoch{};
  std::size_t txs = 0;
  std::size_t bytes = 0;
};

// Transactions generated by the runner start with submit time, submitting
// replica and a sequence number so latency can be measured at commit.
struct LoadTxHeader {
  Time submitted{};
  ReplicaId origin = 0;
  std::uint64_t seq = 0;

  static constexpr std::size_t kSize = 8 + 2 + 8;
  static std::optional<LoadTxHeader> parse(const Transaction& tx);
  Bytes make(std::size_t total_size) const;
};

// n Replicas on one Simulator plus a workload driver.
class SimCluster {
 public:
  // `base` supplies every knob except n, f and replica_id.
  SimCluster(SimScenario scenario, Config base);
  ~SimCluster();

  void run();
  void run_until(Time t);

  Simulator& sim() { return *sim_; }
  const Simulator& sim() const { return *sim_; }
  Replica& replica(ReplicaId i) { return *replicas_[i]; }
  const Replica& replica(ReplicaId i) const { return *replicas_[i]; }
  std::size_t size() const { return replicas_.size(); }
  bool correct(ReplicaId i) const { return !sim_->faulty(i); }

  const std::vector<CommitSample>& commits(ReplicaId i) const { return commits_[i]; }
  // Submit-to-commit latencies observed at the submitting replica, in seconds.
  const std::vector<double>& latencies(ReplicaId i) const { return latencies_[i]; }
  std::uint64_t submitted(ReplicaId i) const { return submitted_[i]; }
  // Largest number of epochs simultaneously Running at one replica.
  std::size_t max_running() const { return max_running_; }
  std::size_t max_active() const;
  // Exceptions escaping replica handlers; the run continues after counting them.
  std::uint64_t exceptions() const { return exceptions_; }

  // Empty string when all correct replicas' logs agree on their common prefix.
  std::string check_agreement() const;
  // Empty string when every correct replica's log is contiguous from epoch 0.
  std::string check_contiguity() const;

 private:
  class Guard;
  void load_tick();

  SimScenario sc_;
  std::unique_ptr<Simulator> sim_;
  std::vector<std::unique_ptr<Replica>> replicas_;
  std::vector<std::unique_ptr<EventHandler>> guards_;
  std::vector<std::vector<CommitSample>> commits_;
  std::vector<std::vector<double>> latencies_;
  std::vector<std::uint64_t> submitted_;
  std::vector<std::size_t> running_;
  std::vector<double> load_credit_;
  std::size_t max_running_ = 0;
  std::uint64_t seq_ = 0;
  std::uint64_t exceptions_ = 0;
};

}  // namespace dispel
