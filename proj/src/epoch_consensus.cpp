#include "dispel/epoch_consensus.hpp"

#include <algorithm>
#include <cmath>

namespace dispel {

EpochConsensus::EpochConsensus(const Config& cfg, EpochId epoch, ConsensusSink& sink)
    : cfg_(cfg), epoch_(epoch), sink_(sink), n_(cfg.n), delivered_(cfg.n), mask_(cfg.n) {
  auto q = quorums(cfg);
  rbc_.reserve(n_);
  bin_.reserve(n_);
  for (std::size_t k = 0; k < n_; ++k) {
    rbc_.emplace_back(q, n_, cfg.replica_id, epoch, static_cast<ReplicaId>(k));
    bin_.emplace_back(n_, cfg.f, cfg.replica_id);
  }
}

void EpochConsensus::propose(BatchPtr batch) {
  auto d = digest(*batch);
  propose(std::move(batch), d);
}

void EpochConsensus::propose(BatchPtr batch, const BatchDigest& d) {
  if (proposed_) throw DuplicateEpoch("epoch " + std::to_string(epoch_.value) + " already proposed");
  proposed_ = true;
  apply(rbc_[cfg_.replica_id].start(std::move(batch), d), cfg_.replica_id);
}

void EpochConsensus::handle(const Envelope& env) {
  if (env.epoch != epoch_ || env.sender >= n_) return;
  switch (env.kind) {
    case MsgKind::Batch: {
      // The BATCH is routed by its sender; the instance checks the origin field.
      apply(rbc_[env.sender].handle(env), env.sender);
      break;
    }
    case MsgKind::Echo:
    case MsgKind::Ready: {
      auto v = RbcVote::decode(env.payload);
      if (v.source >= n_) return;
      auto& inst = rbc_[v.source];
      apply(env.kind == MsgKind::Echo ? inst.on_echo(env.sender, v.digest) : inst.on_ready(env.sender, v.digest),
            v.source);
      break;
    }
    case MsgKind::Est:
    case MsgKind::Coord:
    case MsgKind::Aux:
    case MsgKind::Decide: {
      auto v = BinVote::decode(env.payload);
      if (v.index >= n_) return;
      apply(bin_[v.index].on_message(env.sender, env.kind, v.round, v.bit), v.index);
      break;
    }
    default: break;
  }
}

void EpochConsensus::on_round_timeout(std::uint16_t index, std::uint32_t round) {
  if (index >= n_) return;
  apply(bin_[index].on_timeout(round), index);
}

bool EpochConsensus::all_halted() const {
  return std::all_of(bin_.begin(), bin_.end(), [](const BinInstance& b) { return b.halted(); });
}

Duration EpochConsensus::round_timeout(std::uint32_t round) const {
  double scale = std::pow(cfg_.round_timeout_factor, static_cast<double>(round > 0 ? round - 1 : 0));
  double ns = static_cast<double>(cfg_.round_timeout_initial.count()) * scale;
  return Duration(static_cast<std::int64_t>(std::min(ns, 30e9)));
}

void EpochConsensus::apply(RbcInstance::Output out, std::size_t k) {
  for (auto& env : out.broadcasts) sink_.broadcast(std::move(env));
  if (out.accepted_batch) sink_.on_batch(epoch_, out.accepted_digest, std::move(out.accepted_batch));
  if (out.delivered) on_rbc_deliver(k, *out.delivered);
}

void EpochConsensus::apply(BinInstance::Output out, std::size_t k) {
  for (const auto& m : out.broadcasts)
    sink_.broadcast(Envelope{epoch_, m.kind, cfg_.replica_id,
                             BinVote{static_cast<std::uint16_t>(k), m.round, m.bit}.encode()});
  if (out.arm_timer)
    sink_.arm_round_timer(epoch_, static_cast<std::uint16_t>(k), *out.arm_timer, round_timeout(*out.arm_timer));
  if (out.decided) on_bin_decide(k, *out.decided);
}

void EpochConsensus::on_rbc_deliver(std::size_t k, const BatchDigest& d) {
  delivered_[k] = d;
  if (!bin_[k].proposed()) bin_propose(k, true);
  maybe_emit();
}

void EpochConsensus::on_first_one() {
  for (std::size_t j = 0; j < n_; ++j)
    if (!bin_[j].proposed()) bin_propose(j, false);
}

void EpochConsensus::on_bin_decide(std::size_t k, bool b) {
  if (mask_[k]) return;
  mask_[k] = b;
  ++decided_bits_;
  if (b && !seen_one_) {
    seen_one_ = true;
    on_first_one();
  }
  maybe_emit();
}

void EpochConsensus::bin_propose(std::size_t k, bool b) { apply(bin_[k].propose(b), k); }

void EpochConsensus::maybe_emit() {
  if (decided_set_ || decided_bits_ < n_) return;
  std::vector<BatchDigest> set;
  for (std::size_t k = 0; k < n_; ++k) {
    if (!*mask_[k]) continue;
    if (!delivered_[k]) return;
    set.push_back(*delivered_[k]);
  }
  std::sort(set.begin(), set.end(), [](const BatchDigest& a, const BatchDigest& b) { return a.bytes < b.bytes; });
  decided_set_ = std::move(set);
  sink_.on_decision(epoch_, *decided_set_);
}

}  // namespace dispel
