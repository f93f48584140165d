#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "dispel/bench.hpp"
#include "dispel/ledger.hpp"
#include "dispel/pipeline.hpp"
#include "dispel/tcp.hpp"

namespace dispel {

// Replica-to-client notice, sent with kind CLIENT_TX on the client's connection.
// Lists the SHA-256 of each transaction payload it covers.
struct ClientAck {
  enum class Status : std::uint8_t { Committed = 0, Rejected = 1 };

  Status status = Status::Committed;
  EpochId epoch{};
  std::vector<BatchDigest> txs;

  Bytes encode() const;
  static ClientAck decode(ByteView payload);
  bool operator==(const ClientAck&) const = default;
};

enum class TxKind { Raw, Transfer };

TxKind parse_tx_kind(std::string_view s);

// Accounts shared by nodes and load generators: KeyPair::from_seed(seed + i).
std::vector<KeyPair> workload_accounts(std::size_t count, std::uint64_t seed);
LedgerState workload_genesis(const std::vector<KeyPair>& accounts, std::uint64_t balance);

struct NodeOptions {
  Config cfg;
  std::vector<Endpoint> peers;
  TxKind app = TxKind::Transfer;
  bool verify = true;
  std::size_t verifier_workers = 1;
  std::size_t accounts = 1000;
  std::uint64_t account_seed = 1;
  std::uint64_t genesis_balance = 1'000'000'000'000ULL;
  // Overrides the generated accounts when set.
  std::optional<std::filesystem::path> genesis_file;
  // Output directory; nothing is written when empty.
  std::filesystem::path out;
  // Zero runs until stop().
  Duration duration{};
  // Admission batches go to the verifier pool at this size or period.
  std::size_t admission_batch = 256;
  Duration admission_period = 2ms;
  // Client transactions held at once (verifying or awaiting commit); more are rejected.
  std::size_t max_pending = 4096;
};

// One replica process: TCP transport, pipeline, optional ledger.
class Node : private EventHandler {
 public:
  // Throws ConfigError on a bad configuration and TransportError when the
  // listening socket cannot be bound.
  explicit Node(NodeOptions opts);
  ~Node() override;

  // Blocks until stop() or the configured duration.
  void run();
  // Safe from any thread.
  void stop() { net_.stop(); }

  // committed_log.csv, report.csv and, with a ledger, ledger.csv.
  void write_outputs() const;

  const Replica& replica() const { return *replica_; }
  const LedgerApp* ledger() const { return ledger_.get(); }
  BenchReport report() const;
  TcpTransport& transport() { return net_; }

 private:
  void on_start() override;
  void on_envelope(const Envelope& env) override;
  void on_timer(const TimerTag& tag) override;

  void admit(ReplicaId client, Transaction tx);
  void flush_admission();
  void admitted(std::vector<Transaction> txs, std::vector<ReplicaId> clients, std::vector<Verdict> verdicts);
  void on_committed(const CommittedEpoch& c, const std::vector<Transaction>& txs);
  void ack(ReplicaId client, const ClientAck& a);

  NodeOptions opts_;
  TcpTransport net_;
  std::unique_ptr<Replica> replica_;
  std::unique_ptr<VerifierPool> pool_;
  std::unique_ptr<LedgerApp> ledger_;

  std::vector<Transaction> pending_txs_;
  std::vector<ReplicaId> pending_clients_;
  std::size_t verifying_ = 0;
  bool flush_armed_ = false;

  struct Waiting {
    ReplicaId client;
    Time admitted;
  };
  std::unordered_map<BatchDigest, Waiting, DigestHash> waiting_;
  std::vector<CommitObservation> commits_;
  std::vector<double> latencies_;
  std::uint64_t received_ = 0;
  std::uint64_t rejected_ = 0;
  Time started_{};
  Time stopped_{};
};

struct LoadgenOptions {
  std::vector<Endpoint> replicas;
  // Total offered load in tx/s, spread across replicas.
  double rate = 1000;
  Duration duration = 10s;
  // How long to wait for commit notices after the last submission.
  Duration drain = 5s;
  TxKind kind = TxKind::Transfer;
  std::size_t tx_size = 400;
  std::size_t accounts = 1000;
  std::uint64_t account_seed = 1;
  // Nonce of each account's first transfer.
  std::uint64_t first_nonce = 1;
  // Signed transfers are read from here when it holds the same workload, and written otherwise.
  std::filesystem::path tx_cache;
  std::chrono::milliseconds connect_timeout{10000};
};

// Open-loop load against running replicas. Transfers from account i always
// go to replica i mod n so nonces arrive in order. Latency runs from
// submission to the submitting replica's commit notice.
BenchReport run_loadgen(const LoadgenOptions& opts);

// committed_log.csv: epoch,tx_count,payload_bytes,digests
std::string committed_log_csv(const std::vector<CommittedEpoch>& log);

}  // namespace dispel
