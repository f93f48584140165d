#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/kvfile.hpp"
#include "dispel/pipeline.hpp"
#include "dispel/transport.hpp"

namespace dispel {

// Compressed secp256k1 point.
using PubKey = std::array<std::uint8_t, 33>;
// r || s, 32 bytes each.
using Signature = std::array<std::uint8_t, 64>;

std::string to_hex(const PubKey& k);
PubKey pubkey_from_hex(std::string_view hex);

class CryptoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KeyPair {
 public:
  // Fresh key from the system RNG.
  static KeyPair generate();
  // Deterministic key, for workloads and tests.
  static KeyPair from_seed(std::uint64_t seed);
  // Big-endian scalar, reduced modulo the group order.
  static KeyPair from_private(ByteView scalar);

  KeyPair(KeyPair&&) noexcept;
  KeyPair& operator=(KeyPair&&) noexcept;
  ~KeyPair();

  const PubKey& public_key() const { return pub_; }
  // Signs SHA-256(message).
  Signature sign(ByteView message) const;

 private:
  KeyPair() = default;
  struct Impl;
  std::unique_ptr<Impl> impl_;
  PubKey pub_{};
};

struct TransferTx {
  PubKey from{};
  PubKey to{};
  std::uint64_t amount = 0;
  std::uint64_t nonce = 0;
  Signature signature{};

  static constexpr std::size_t kSize = 400;
  static constexpr std::uint8_t kTag = 0x54;
  // tag | from | to | amount | nonce
  static constexpr std::size_t kPreimageSize = 1 + 33 + 33 + 8 + 8;

  Bytes preimage() const;
  // Preimage, signature, zero padding to kSize.
  Bytes encode() const;
  // Throws DecodeError unless the layout is exact, padding included.
  static TransferTx decode(ByteView bytes);

  static TransferTx make(const KeyPair& from, const PubKey& to, std::uint64_t amount, std::uint64_t nonce);
  Transaction to_transaction() const { return Transaction(encode()); }

  bool operator==(const TransferTx&) const = default;
};

enum class Verdict : std::uint8_t { Valid, Malformed, BadSignature };

const char* to_string(Verdict v);

// Parses keys once and keeps them; one instance per thread.
class Verifier {
 public:
  Verifier();
  ~Verifier();
  Verifier(const Verifier&) = delete;
  Verifier& operator=(const Verifier&) = delete;

  Verdict verify(const Transaction& tx);
  Verdict verify(const TransferTx& tx);
  std::size_t cached_keys() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Verdict verify_tx(const Transaction& tx);

// Fixed set of verification threads.
class VerifierPool {
 public:
  using Done = std::function<void(std::vector<Transaction>, std::vector<Verdict>)>;

  explicit VerifierPool(std::size_t workers);
  ~VerifierPool();
  VerifierPool(const VerifierPool&) = delete;
  VerifierPool& operator=(const VerifierPool&) = delete;

  std::size_t workers() const { return threads_.size(); }

  // Splits the work across the workers and waits for all of it.
  std::vector<Verdict> verify_all(const std::vector<Transaction>& txs);
  // Runs `done` on a worker thread once every transaction is checked.
  void verify_async(std::vector<Transaction> txs, Done done);

 private:
  void run(std::size_t index);
  void post(std::function<void(Verifier&)> job);

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void(Verifier&)>> jobs_;
  bool stop_ = false;
};

enum class TxOutcome : std::uint8_t { Applied, Malformed, BadSignature, StaleNonce, InsufficientFunds };

const char* to_string(TxOutcome o);

class LedgerState {
 public:
  LedgerState() = default;
  // Throws ConfigError when the total overflows.
  explicit LedgerState(const std::vector<std::pair<PubKey, std::uint64_t>>& genesis);

  // Keys are hex public keys, values are balances.
  static LedgerState from_genesis(const KvFile& kv);

  std::uint64_t balance(const PubKey& k) const;
  std::uint64_t nonce(const PubKey& k) const;
  std::uint64_t total() const;
  std::uint64_t genesis_total() const { return genesis_total_; }
  std::size_t accounts() const { return balances_.size(); }
  const std::map<PubKey, std::uint64_t>& balances() const { return balances_; }

  // `verdicts`, when given, holds one precomputed verdict per transaction;
  // otherwise each transaction is verified here.
  std::vector<TxOutcome> apply_block(const std::vector<Transaction>& txs,
                                     const std::vector<Verdict>* verdicts = nullptr);
  TxOutcome apply(const Transaction& tx, Verdict verdict);

  // SHA-256 over the sorted (key, balance, nonce) entries.
  BatchDigest state_hash() const;
  // pubkey,balance
  std::string to_csv() const;

  std::uint64_t applied() const { return applied_; }
  std::uint64_t skipped() const { return skipped_; }

 private:
  std::map<PubKey, std::uint64_t> balances_;
  std::map<PubKey, std::uint64_t> nonces_;
  std::uint64_t genesis_total_ = 0;
  std::uint64_t applied_ = 0;
  std::uint64_t skipped_ = 0;
};

// The transactions of a committed epoch in commit order.
std::vector<Transaction> block_transactions(const std::vector<BatchPtr>& batches);

class NoQuorum : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The response bytes that at least f+1 responders returned; NoQuorum otherwise.
Bytes select_block(const std::vector<Bytes>& responses, std::size_t f);

// One BLOCK_REQ round: asks 2f+1 peers, accepts the first copy seen f+1 times.
class BlockFetch {
 public:
  BlockFetch(std::size_t n, std::size_t f, ReplicaId self, EpochId epoch);

  EpochId epoch() const { return epoch_; }
  // Targets for attempt `attempt`: 2f+1 peers, rotating so retries reach others.
  std::vector<ReplicaId> targets(std::size_t attempt) const;
  // Sends BLOCK_REQ to targets(attempt) and resets the responses.
  void start(Transport& net, std::size_t attempt = 0);
  // Returns the block once f+1 identical copies have arrived.
  std::optional<Block> on_response(const Envelope& env);
  // Throws NoQuorum: no copy reached f+1 among the responses so far.
  void on_timeout() const;
  std::size_t responses() const { return responses_.size(); }

 private:
  std::size_t n_;
  std::size_t f_;
  ReplicaId self_;
  EpochId epoch_;
  std::vector<ReplicaId> asked_;
  std::map<ReplicaId, Bytes> responses_;
};

// Ledger application on top of a Replica: verifies at admission and again
// before applying committed blocks.
class LedgerApp {
 public:
  LedgerApp(Replica& replica, LedgerState genesis, VerifierPool* pool = nullptr);

  // Verified admission; invalid transactions never reach the pool.
  OfferResult admit(const Transaction& tx);
  // A transaction this replica already verified; its commit-time check is skipped.
  void remember_valid(const Transaction& tx);
  std::uint64_t commit_checks_skipped() const { return skipped_checks_; }
  // Benchmark baseline only: committed signatures are taken as valid.
  void set_verify(bool on) { verify_ = on; }
  bool verify() const { return verify_; }

  const LedgerState& state() const { return state_; }
  std::uint64_t rejected_at_admission() const { return rejected_; }
  const std::vector<TxOutcome>& last_outcomes() const { return last_outcomes_; }
  std::uint64_t blocks() const { return blocks_; }
  // Set when a block was ever applied with total() != genesis_total().
  bool conservation_violated() const { return violated_; }

  using BlockFn = std::function<void(const CommittedEpoch&, const std::vector<Transaction>&, const std::vector<TxOutcome>&)>;
  void on_block(BlockFn fn) { block_fn_ = std::move(fn); }

 private:
  void on_commit(const CommittedEpoch& c, const std::vector<BatchPtr>& batches);

  Replica& replica_;
  LedgerState state_;
  VerifierPool* pool_;
  Verifier verifier_;
  std::vector<TxOutcome> last_outcomes_;
  std::uint64_t rejected_ = 0;
  std::uint64_t blocks_ = 0;
  bool violated_ = false;
  bool verify_ = true;
  std::unordered_set<BatchDigest, DigestHash> known_valid_;
  std::uint64_t skipped_checks_ = 0;
  BlockFn block_fn_;
};

}  // namespace dispel
