#include "dispel/monitor.hpp"

#include <algorithm>
#include <numeric>

namespace dispel {

TxPool::TxPool(std::size_t capacity_bytes) : capacity_(capacity_bytes) {
  if (capacity_ == 0) throw std::invalid_argument("pool capacity must be positive");
}

OfferResult TxPool::offer(Transaction tx, Time now, std::size_t free_epoch_slots) {
  // Each free slot can absorb one more batch worth of transactions.
  const double limit = static_cast<double>(capacity_) * static_cast<double>(1 + free_epoch_slots);
  if (tx.size() == 0 || tx.size() + Batch::kHeaderSize + Batch::kPerTxOverhead > capacity_ ||
      static_cast<double>(byte_size_) >= limit) {
    ++rejected_;
    return OfferResult::Rejected;
  }
  byte_size_ += tx.size();
  pending_.push_back(Entry{std::move(tx), now});
  return OfferResult::Accepted;
}

Batch TxPool::take_batch(ReplicaId origin, EpochId epoch, std::size_t max_serialized_bytes) {
  Batch batch;
  batch.origin = origin;
  batch.epoch = epoch;
  std::size_t size = Batch::kHeaderSize;
  while (!pending_.empty()) {
    auto next = Batch::kPerTxOverhead + pending_.front().tx.size();
    if (size + next > max_serialized_bytes) break;
    size += next;
    byte_size_ -= pending_.front().tx.size();
    batch.txs.push_back(std::move(pending_.front().tx));
    pending_.pop_front();
  }
  return batch;
}

void TxPool::requeue_front(std::vector<Transaction> txs, Time now) {
  // Keep arrival stamps non-decreasing from the head so opened_at is the front.
  Time stamp = pending_.empty() ? now : std::min(now, pending_.front().arrived);
  for (auto it = txs.rbegin(); it != txs.rend(); ++it) {
    byte_size_ += it->size();
    pending_.push_front(Entry{std::move(*it), stamp});
  }
}

std::optional<Time> TxPool::opened_at() const {
  if (pending_.empty()) return std::nullopt;
  return pending_.front().arrived;
}

IdleDetector::IdleDetector(std::size_t sample_count, double capacity_bytes_per_s, double fraction)
    : count_(sample_count), capacity_(capacity_bytes_per_s), fraction_(fraction) {
  if (count_ == 0) throw std::invalid_argument("idle detector needs at least one sample");
}

void IdleDetector::push(double bytes_per_s) {
  samples_.push_back(bytes_per_s);
  while (samples_.size() > count_) samples_.pop_front();
}

double IdleDetector::mean() const {
  if (samples_.empty()) return 0.0;
  return std::accumulate(samples_.begin(), samples_.end(), 0.0) / static_cast<double>(samples_.size());
}

bool IdleDetector::is_idle() const {
  if (!warmed_up()) throw InsufficientSamples("idle detector has not collected enough samples");
  return mean() < threshold();
}

std::size_t epoch_budget(const Config& cfg) {
  auto by_memory = cfg.batch_size_bytes == 0 ? std::uint64_t{1} : cfg.memory_budget_bytes / cfg.batch_size_bytes;
  auto budget = std::min<std::uint64_t>(cfg.max_epochs, by_memory);
  return static_cast<std::size_t>(std::max<std::uint64_t>(budget, 1));
}

bool spawn_ready(const TxPool& pool, const IdleDetector& det, std::size_t active_epochs, std::size_t budget,
                 Time now, Duration pool_timeout) {
  if (active_epochs >= budget || !det.warmed_up() || !det.is_idle()) return false;
  if (pool.full()) return true;
  auto opened = pool.opened_at();
  return opened && now - *opened >= pool_timeout;
}

}  // namespace dispel
