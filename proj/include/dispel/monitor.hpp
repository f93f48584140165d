#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dispel/core.hpp"

namespace dispel {

enum class OfferResult { Accepted, Rejected };

// FIFO of pending client transactions. The capacity is the batch size; the
// transaction that crosses it is still accepted and closes the batch.
class TxPool {
 public:
  explicit TxPool(std::size_t capacity_bytes);

  // free_epoch_slots: epochs that could still be spawned to drain the pool.
  OfferResult offer(Transaction tx, Time now, std::size_t free_epoch_slots = 0);

  // Removes transactions in FIFO order while the serialized batch stays within max_serialized_bytes.
  Batch take_batch(ReplicaId origin, EpochId epoch, std::size_t max_serialized_bytes);
  // Puts transactions back at the head, keeping their relative order.
  void requeue_front(std::vector<Transaction> txs, Time now);

  bool full() const { return byte_size_ >= capacity_; }
  bool empty() const { return pending_.empty(); }
  std::size_t byte_size() const { return byte_size_; }
  std::size_t size() const { return pending_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::optional<Time> opened_at() const;
  std::size_t rejected() const { return rejected_; }

 private:
  struct Entry {
    Transaction tx;
    Time arrived;
  };
  std::deque<Entry> pending_;
  std::size_t byte_size_ = 0;
  std::size_t capacity_;
  std::size_t rejected_ = 0;
};

class InsufficientSamples : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Network idleness from the mean of the most recent send-rate samples.
class IdleDetector {
 public:
  IdleDetector(std::size_t sample_count, double capacity_bytes_per_s, double fraction);

  void push(double bytes_per_s);
  bool warmed_up() const { return samples_.size() >= count_; }
  // Throws InsufficientSamples before sample_count samples were pushed.
  bool is_idle() const;
  double mean() const;
  double threshold() const { return fraction_ * capacity_; }

 private:
  std::size_t count_;
  double capacity_;
  double fraction_;
  std::deque<double> samples_;
};

// min(max_epochs, memory_budget / batch_size), never below one.
std::size_t epoch_budget(const Config& cfg);

bool spawn_ready(const TxPool& pool, const IdleDetector& det, std::size_t active_epochs, std::size_t budget,
                 Time now, Duration pool_timeout);

}  // namespace dispel
