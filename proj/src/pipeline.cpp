#include "dispel/pipeline.hpp"

#include <algorithm>

namespace dispel {

const char* to_string(EpochState s) {
  switch (s) {
    case EpochState::Running: return "running";
    case EpochState::Decided: return "decided";
    case EpochState::Commitable: return "commitable";
    case EpochState::Terminated: return "terminated";
  }
  return "unknown";
}

namespace {

constexpr std::size_t kMaxParkedBlockRequests = 4096;

}  // namespace

Replica::Replica(Config cfg, Transport& net)
    : cfg_(std::move(cfg)),
      net_(net),
      budget_(epoch_budget(cfg_)),
      pool_(cfg_.batch_size_bytes),
      detector_(cfg_.idle_sample_count, cfg_.link_capacity_bytes_per_s, cfg_.idle_fraction) {
  cfg_.validate();
}

Replica::~Replica() = default;

void Replica::on_start() { net_.schedule(cfg_.idle_sample_period, TimerTag{TimerKind::MonitorTick}); }

std::optional<EpochState> Replica::state_of(EpochId e) const {
  if (auto* rec = record(e)) return rec->state;
  if (e < next_commit_) return EpochState::Terminated;
  return std::nullopt;
}

const EpochRecord* Replica::record(EpochId e) const {
  auto it = records_.find(e);
  return it == records_.end() ? nullptr : it->second.get();
}

EpochRecord* Replica::find(EpochId e) {
  auto it = records_.find(e);
  return it == records_.end() ? nullptr : it->second.get();
}

std::optional<Bytes> Replica::block(EpochId e) const {
  auto it = blocks_.find(e);
  if (it == blocks_.end()) return std::nullopt;
  return it->second;
}

OfferResult Replica::submit(Transaction tx) {
  auto active = active_epochs();
  auto free_slots = active < budget_ ? budget_ - active : 0;
  auto res = pool_.offer(std::move(tx), net_.now(), free_slots);
  ++(res == OfferResult::Accepted ? stats_.client_accepted : stats_.client_rejected);
  return res;
}

void Replica::on_envelope(const Envelope& env) {
  ++depth_;
  ++stats_.envelopes;
  try {
    if (is_consensus_kind(env.kind)) {
      if (env.sender < cfg_.n) route_consensus(env);
    } else {
      switch (env.kind) {
        case MsgKind::ClientTx:
          if (!env.payload.empty()) submit(Transaction(env.payload));
          break;
        case MsgKind::BatchReq:
          if (env.sender < cfg_.n) on_batch_request(env);
          break;
        case MsgKind::BatchResp:
          if (env.sender < cfg_.n) on_batch_response(env);
          break;
        case MsgKind::BlockReq: on_block_request(env); break;
        default: break;
      }
    }
  } catch (const DecodeError&) {
    ++stats_.decode_errors;
  }
  if (--depth_ == 0) settle();
}

void Replica::on_timer(const TimerTag& tag) {
  ++depth_;
  switch (tag.kind) {
    case TimerKind::MonitorTick:
      detector_.push(net_.tx_rate_sample());
      maybe_spawn();
      net_.schedule(cfg_.idle_sample_period, TimerTag{TimerKind::MonitorTick});
      break;
    case TimerKind::RoundTimeout:
      if (auto* rec = find(tag.epoch); rec && rec->consensus) rec->consensus->on_round_timeout(tag.index, tag.round);
      break;
    case TimerKind::BatchRequestRetry:
      if (auto* rec = find(tag.epoch); rec && rec->state == EpochState::Decided && !rec->missing.empty())
        request_missing(*rec);
      break;
    case TimerKind::User: break;
  }
  if (--depth_ == 0) settle();
}

std::optional<EpochId> Replica::maybe_spawn() {
  if (!spawn_ready(pool_, detector_, active_epochs(), budget_, net_.now(), cfg_.pool_timeout)) return std::nullopt;
  auto e = next_spawn_;
  start_epoch(e, true);
  return e;
}

void Replica::route_consensus(const Envelope& env) {
  if (auto* rec = find(env.epoch)) {
    if (rec->consensus)
      deliver(*rec, env);
    else
      ++stats_.dropped_stale;
    return;
  }
  if (env.epoch < next_commit_) {
    ++stats_.dropped_stale;
    return;
  }
  on_remote_epoch(env);
}

void Replica::on_remote_epoch(const Envelope& env) {
  const auto e = env.epoch;
  if (e.value > next_commit_.value + budget_) {
    ++stats_.dropped_far_future;
    return;
  }
  if (can_join(e)) {
    auto& rec = start_epoch(e, false);
    deliver(rec, env);
    return;
  }
  auto& buf = buffers_[e];
  if (buf.size() >= cfg_.buffer_limit_per_epoch) {
    buf.pop_front();
    ++stats_.buffer_evictions;
  }
  buf.push_back(env);
  ++stats_.buffered;
}

bool Replica::predecessor_decided(EpochId e) const {
  if (e.value == 0) return true;
  EpochId prev{e.value - 1};
  if (prev < next_commit_) return true;
  auto* rec = record(prev);
  return rec && rec->state != EpochState::Running;
}

bool Replica::can_join(EpochId e) const {
  return e == next_spawn_ && active_epochs() < budget_ && predecessor_decided(e);
}

EpochRecord& Replica::start_epoch(EpochId e, bool self_spawn) {
  auto batch = pool_.take_batch(cfg_.replica_id, e, cfg_.batch_size_bytes);
  auto rec = std::make_unique<EpochRecord>();
  rec->epoch = e;
  rec->started = net_.now();
  rec->self_spawned = self_spawn;
  rec->own_batch = std::make_shared<const Batch>(std::move(batch));
  rec->own_digest = digest(*rec->own_batch);
  rec->consensus = std::make_unique<EpochConsensus>(cfg_, e, static_cast<ConsensusSink&>(*this));
  auto& ref = *rec;
  records_[e] = std::move(rec);
  next_spawn_ = e.next();
  ++(self_spawn ? stats_.spawned : stats_.joined);
  stats_.max_active = std::max(stats_.max_active, active_epochs());
  if (state_fn_) state_fn_(e, EpochState::Running);

  ref.consensus->propose(ref.own_batch, ref.own_digest);
  replay(e);
  return ref;
}

void Replica::replay(EpochId e) {
  auto it = buffers_.find(e);
  if (it == buffers_.end()) return;
  auto pending = std::move(it->second);
  buffers_.erase(it);
  for (const auto& env : pending) {
    auto* rec = find(e);
    if (!rec || !rec->consensus) break;
    try {
      deliver(*rec, env);
    } catch (const DecodeError&) {
      ++stats_.decode_errors;
    }
  }
}

void Replica::deliver(EpochRecord& rec, const Envelope& env) { rec.consensus->handle(env); }

void Replica::set_state(EpochRecord& rec, EpochState s) {
  rec.state = s;
  if (state_fn_) state_fn_(rec.epoch, s);
}

void Replica::broadcast(Envelope env) { net_.broadcast(std::make_shared<const Envelope>(std::move(env))); }

void Replica::arm_round_timer(EpochId epoch, std::uint16_t index, std::uint32_t round, Duration delay) {
  net_.schedule(delay, TimerTag{TimerKind::RoundTimeout, epoch, index, round});
}

void Replica::on_batch(EpochId epoch, const BatchDigest& d, BatchPtr batch) {
  auto* rec = find(epoch);
  if (!rec) return;
  rec->batches.emplace(d, std::move(batch));
  if (rec->state != EpochState::Decided) return;
  auto it = std::find(rec->missing.begin(), rec->missing.end(), d);
  if (it == rec->missing.end()) return;
  rec->missing.erase(it);
  if (rec->missing.empty()) set_state(*rec, EpochState::Commitable);
}

void Replica::on_decision(EpochId epoch, const std::vector<BatchDigest>& decided) {
  auto* rec = find(epoch);
  if (!rec || rec->state != EpochState::Running) return;
  rec->decided = decided;
  for (const auto& d : decided)
    if (!rec->batches.count(d)) rec->missing.push_back(d);
  set_state(*rec, EpochState::Decided);

  // Our batch lost its slot: give its transactions another chance.
  if (!rec->own_batch->txs.empty() &&
      std::find(decided.begin(), decided.end(), rec->own_digest) == decided.end()) {
    stats_.requeued_txs += rec->own_batch->txs.size();
    pool_.requeue_front(rec->own_batch->txs, net_.now());
  }

  if (rec->missing.empty())
    set_state(*rec, EpochState::Commitable);
  else
    request_missing(*rec);
}

void Replica::request_missing(EpochRecord& rec) {
  ++stats_.batch_requests;
  auto env = std::make_shared<const Envelope>(
      Envelope{rec.epoch, MsgKind::BatchReq, cfg_.replica_id, BatchRequest{rec.missing}.encode()});
  for (std::size_t to = 0; to < cfg_.n; ++to)
    if (to != cfg_.replica_id) net_.send(static_cast<ReplicaId>(to), env);
  net_.schedule(cfg_.batch_request_retry, TimerTag{TimerKind::BatchRequestRetry, rec.epoch});
}

void Replica::on_batch_request(const Envelope& env) {
  auto req = BatchRequest::decode(env.payload);
  auto* rec = find(env.epoch);
  if (!rec) return;
  for (const auto& d : req.digests) {
    auto it = rec->batches.find(d);
    if (it == rec->batches.end()) continue;
    net_.send(env.sender, std::make_shared<const Envelope>(
                              Envelope{env.epoch, MsgKind::BatchResp, cfg_.replica_id, it->second->serialize()}));
  }
}

void Replica::on_batch_response(const Envelope& env) {
  auto* rec = find(env.epoch);
  if (!rec || rec->state != EpochState::Decided) return;
  auto batch = std::make_shared<const Batch>(Batch::deserialize(env.payload));
  auto d = digest(*batch);
  if (std::find(rec->missing.begin(), rec->missing.end(), d) == rec->missing.end()) {
    ++stats_.batch_responses_rejected;
    return;
  }
  on_batch(env.epoch, d, std::move(batch));
}

void Replica::on_block_request(const Envelope& env) {
  if (auto it = blocks_.find(env.epoch); it != blocks_.end()) {
    net_.send(env.sender, std::make_shared<const Envelope>(
                              Envelope{env.epoch, MsgKind::BlockResp, cfg_.replica_id, it->second}));
    return;
  }
  if (cfg_.retain_blocks && env.epoch >= next_commit_ && parked_block_requests_.size() < kMaxParkedBlockRequests)
    parked_block_requests_.emplace(env.epoch, env.sender);
}

void Replica::settle() {
  advance_commit();
  while (buffers_.count(next_spawn_) && can_join(next_spawn_)) {
    start_epoch(next_spawn_, false);
    advance_commit();
  }
  prune();
}

void Replica::advance_commit() {
  while (auto* rec = find(next_commit_)) {
    if (rec->state != EpochState::Commitable) break;
    CommittedEpoch entry;
    entry.epoch = next_commit_;
    entry.commit_time = net_.now();
    entry.digests = rec->decided;
    std::vector<BatchPtr> batches;
    batches.reserve(rec->decided.size());
    for (const auto& d : rec->decided) {
      auto& b = rec->batches.at(d);
      entry.tx_count += b->txs.size();
      entry.payload_bytes += b->payload_bytes();
      batches.push_back(b);
    }
    set_state(*rec, EpochState::Terminated);
    log_.push_back(entry);
    if (commit_fn_) commit_fn_(entry, batches);

    if (cfg_.retain_blocks) {
      Block block;
      block.epoch = next_commit_;
      for (const auto& b : batches) block.batches.push_back(*b);
      auto bytes = block.encode();
      auto range = parked_block_requests_.equal_range(next_commit_);
      for (auto it = range.first; it != range.second; ++it)
        net_.send(it->second,
                  std::make_shared<const Envelope>(Envelope{next_commit_, MsgKind::BlockResp, cfg_.replica_id, bytes}));
      parked_block_requests_.erase(range.first, range.second);
      blocks_.emplace(next_commit_, std::move(bytes));
    }
    next_commit_ = next_commit_.next();
  }
}

void Replica::prune() {
  for (auto it = records_.begin(); it != records_.end();) {
    auto& rec = *it->second;
    if (rec.state != EpochState::Terminated) break;
    if (rec.consensus && rec.consensus->all_halted()) rec.consensus.reset();
    if (rec.epoch.value + cfg_.retained_epochs < next_commit_.value)
      it = records_.erase(it);
    else
      ++it;
  }
}

}  // namespace dispel
