#include "dispel/rbc.hpp"

#include <algorithm>

namespace dispel {

RbcInstance::RbcInstance(const Quorums& q, std::size_t n, ReplicaId self, EpochId epoch, ReplicaId source)
    : q_(q), n_(n), self_(self), epoch_(epoch), source_(source), echo_from_(n, 0), ready_from_(n, 0) {}

RbcInstance::Output RbcInstance::start(BatchPtr batch) {
  auto d = digest(*batch);
  return start(std::move(batch), d);
}

RbcInstance::Output RbcInstance::start(BatchPtr batch, const BatchDigest& d) {
  if (self_ != source_) throw std::logic_error("only the source starts a reliable broadcast");
  if (started_) throw DuplicateStart("reliable broadcast already started for this epoch and source");
  started_ = true;

  Output out;
  out.broadcasts.push_back(Envelope{epoch_, MsgKind::Batch, self_, batch->serialize()});
  // The local BATCH copy comes back through loopback; record the batch now so
  // the echo below is the first (and only) one.
  seen_batch_ = batch;
  seen_digest_ = d;
  out.accepted_batch = std::move(batch);
  out.accepted_digest = d;
  echoed_ = true;
  out.broadcasts.push_back(vote(MsgKind::Echo, d));
  return out;
}

RbcInstance::Output RbcInstance::handle(const Envelope& env) {
  switch (env.kind) {
    case MsgKind::Batch: {
      auto batch = std::make_shared<Batch>(Batch::deserialize(env.payload));
      if (batch->origin != source_ || batch->epoch != epoch_) return {};
      // Decoding is strict, so the payload is already the canonical encoding.
      auto d = sha256(env.payload);
      return on_batch(env.sender, std::move(batch), d);
    }
    case MsgKind::Echo: {
      auto v = RbcVote::decode(env.payload);
      if (v.source != source_) return {};
      return on_echo(env.sender, v.digest);
    }
    case MsgKind::Ready: {
      auto v = RbcVote::decode(env.payload);
      if (v.source != source_) return {};
      return on_ready(env.sender, v.digest);
    }
    default: return {};
  }
}

RbcInstance::Output RbcInstance::on_batch(ReplicaId sender, BatchPtr batch, const BatchDigest& d) {
  Output out;
  if (sender != source_) return out;
  if (seen_digest_) {
    // First writer wins; a second, different batch is equivocation evidence.
    if (*seen_digest_ != d) ++equivocations_;
    return out;
  }
  seen_batch_ = batch;
  seen_digest_ = d;
  out.accepted_batch = std::move(batch);
  out.accepted_digest = d;
  if (!echoed_) {
    echoed_ = true;
    out.broadcasts.push_back(vote(MsgKind::Echo, d));
  }
  return out;
}

RbcInstance::Output RbcInstance::on_echo(ReplicaId sender, const BatchDigest& d) {
  Output out;
  if (sender >= n_) return out;
  if (echo_from_[sender] != 0) {
    if (tallies_[echo_from_[sender] - 1].digest != d) ++equivocations_;
    return out;
  }
  auto idx = tally_index(d);
  echo_from_[sender] = static_cast<std::uint16_t>(idx + 1);
  if (++tallies_[idx].echoes >= q_.echo_threshold) send_ready(d, out);
  return out;
}

RbcInstance::Output RbcInstance::on_ready(ReplicaId sender, const BatchDigest& d) {
  Output out;
  if (sender >= n_) return out;
  if (ready_from_[sender] != 0) {
    if (tallies_[ready_from_[sender] - 1].digest != d) ++equivocations_;
    return out;
  }
  auto idx = tally_index(d);
  ready_from_[sender] = static_cast<std::uint16_t>(idx + 1);
  auto readies = ++tallies_[idx].readies;
  if (readies >= q_.ready_amplify) send_ready(d, out);
  if (readies >= q_.deliver_threshold && !delivered_) {
    delivered_ = d;
    out.delivered = d;
  }
  return out;
}

std::size_t RbcInstance::echo_count(const BatchDigest& d) const {
  auto t = find_tally(d);
  return t ? t->echoes : 0;
}

std::size_t RbcInstance::ready_count(const BatchDigest& d) const {
  auto t = find_tally(d);
  return t ? t->readies : 0;
}

std::size_t RbcInstance::tally_index(const BatchDigest& d) {
  for (std::size_t i = 0; i < tallies_.size(); ++i)
    if (tallies_[i].digest == d) return i;
  tallies_.push_back(Tally{d});
  return tallies_.size() - 1;
}

const RbcInstance::Tally* RbcInstance::find_tally(const BatchDigest& d) const {
  auto it = std::find_if(tallies_.begin(), tallies_.end(), [&](const Tally& t) { return t.digest == d; });
  return it == tallies_.end() ? nullptr : &*it;
}

Envelope RbcInstance::vote(MsgKind kind, const BatchDigest& d) const {
  return Envelope{epoch_, kind, self_, RbcVote{source_, d}.encode()};
}

void RbcInstance::send_ready(const BatchDigest& d, Output& out) {
  if (readied_) return;
  readied_ = true;
  out.broadcasts.push_back(vote(MsgKind::Ready, d));
}

}  // namespace dispel
