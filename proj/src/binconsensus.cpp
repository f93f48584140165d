#include "dispel/binconsensus.hpp"

#include <algorithm>

namespace dispel {

namespace {

std::uint8_t bit_mask(bool b) { return b ? 2 : 1; }

}  // namespace

BinInstance::BinInstance(std::size_t n, std::size_t f, ReplicaId self, std::uint32_t round_window)
    : n_(n), f_(f), self_(self), window_(std::max<std::uint32_t>(round_window, 1)), decide_from_(n, 0) {}

std::uint8_t BinInstance::bin_values(std::uint32_t round) const {
  auto it = rounds_.find(round);
  return it == rounds_.end() ? 0 : it->second.bin_values;
}

BinInstance::RoundState& BinInstance::state(std::uint32_t round) {
  auto [it, fresh] = rounds_.try_emplace(round);
  if (fresh) it->second.from.assign(n_, 0);
  return it->second;
}

BinInstance::Output BinInstance::propose(bool b) {
  if (proposed_) throw DuplicatePropose("binary instance already proposed");
  proposed_ = true;
  Output out;
  if (halted_) return out;
  est_ = b;
  enter_round(1, out);
  progress(out);
  return out;
}

BinInstance::Output BinInstance::on_message(ReplicaId sender, MsgKind kind, std::uint32_t round, bool bit) {
  Output out;
  if (sender >= n_ || halted_) return out;
  if (kind == MsgKind::Decide) {
    on_decide(sender, bit, out);
    return out;
  }
  if (round == 0 || round > std::max<std::uint32_t>(round_, 1) + window_) {
    ++dropped_;
    return out;
  }
  switch (kind) {
    case MsgKind::Est: on_est(sender, round, bit, out); break;
    case MsgKind::Coord: on_coord(sender, round, bit, out); break;
    case MsgKind::Aux: on_aux(sender, round, bit, out); break;
    default: break;
  }
  return out;
}

BinInstance::Output BinInstance::on_timeout(std::uint32_t round) {
  Output out;
  if (!proposed_ || halted_ || round != round_) return out;
  state(round).timed_out = true;
  progress(out);
  return out;
}

void BinInstance::enter_round(std::uint32_t round, Output& out) {
  round_ = round;
  out.arm_timer = round;
  auto& rs = state(round);
  if (!rs.est_sent[est_]) send_est(round, est_, out);
  bv_step(round, false, out);
  bv_step(round, true, out);
  maybe_coord(round, out);
}

void BinInstance::send_est(std::uint32_t round, bool b, Output& out) {
  state(round).est_sent[b] = true;
  out.broadcasts.push_back(Message{MsgKind::Est, round, b});
}

void BinInstance::on_est(ReplicaId sender, std::uint32_t round, bool b, Output& out) {
  auto& rs = state(round);
  auto flag = b ? kEst1 : kEst0;
  if (rs.from[sender] & flag) return;
  rs.from[sender] |= flag;
  ++rs.est_count[b];
  if (!proposed_ || round > round_) return;
  bv_step(round, b, out);
  if (round == round_) progress(out);
}

void BinInstance::bv_step(std::uint32_t round, bool b, Output& out) {
  auto& rs = state(round);
  if (rs.est_count[b] >= f_ + 1 && !rs.est_sent[b]) send_est(round, b, out);
  if (rs.est_count[b] >= 2 * f_ + 1 && !(rs.bin_values & bit_mask(b))) {
    rs.bin_values |= bit_mask(b);
    if (!rs.first_bin) rs.first_bin = b;
    maybe_coord(round, out);
  }
}

void BinInstance::maybe_coord(std::uint32_t round, Output& out) {
  auto& rs = state(round);
  if (round != round_ || coordinator(round, n_) != self_ || rs.coord_sent || !rs.first_bin) return;
  rs.coord_sent = true;
  out.broadcasts.push_back(Message{MsgKind::Coord, round, *rs.first_bin});
}

void BinInstance::on_coord(ReplicaId sender, std::uint32_t round, bool b, Output& out) {
  if (sender != coordinator(round, n_)) return;
  auto& rs = state(round);
  if (rs.from[sender] & kCoordSeen) return;
  rs.from[sender] |= kCoordSeen;
  rs.coord = b;
  if (proposed_ && round == round_) progress(out);
}

void BinInstance::on_aux(ReplicaId sender, std::uint32_t round, bool b, Output& out) {
  auto& rs = state(round);
  if (rs.from[sender] & kAux) return;
  rs.from[sender] |= static_cast<std::uint8_t>(kAux | (b ? kAuxBit : 0));
  ++rs.aux_count[b];
  if (proposed_ && round == round_) progress(out);
}

void BinInstance::progress(Output& out) {
  while (!halted_) {
    const auto r = round_;
    auto& rs = state(r);
    if (!rs.aux_sent && rs.bin_values && (rs.coord || rs.timed_out)) {
      bool v = *rs.first_bin;
      if (rs.coord && (rs.bin_values & bit_mask(*rs.coord))) v = *rs.coord;
      rs.aux_sent = true;
      out.broadcasts.push_back(Message{MsgKind::Aux, r, v});
    }
    if (!rs.aux_sent) return;

    const bool parity = r % 2 == 1;
    const std::size_t need = n_ - f_;
    auto usable = [&](bool b) { return (rs.bin_values & bit_mask(b)) ? rs.aux_count[b] : std::size_t{0}; };
    // Any n-f AUX senders whose values lie in bin_values may be chosen;
    // prefer a single-valued set so a decision is reached as early as possible.
    std::uint8_t values;
    if (usable(parity) >= need) {
      values = bit_mask(parity);
    } else if (usable(!parity) >= need) {
      values = bit_mask(!parity);
    } else if (usable(false) + usable(true) >= need) {
      values = 3;
    } else {
      return;
    }

    if (values == bit_mask(parity)) {
      if (!decided_) decided_round_ = r;
      decide(parity, out);
      est_ = parity;
    } else if (values == bit_mask(!parity)) {
      est_ = !parity;
    } else {
      est_ = parity;
    }
    enter_round(r + 1, out);
  }
}

void BinInstance::decide(bool b, Output& out) {
  if (decided_) return;
  decided_ = b;
  out.decided = b;
  if (!decide_sent_) {
    decide_sent_ = true;
    out.broadcasts.push_back(Message{MsgKind::Decide, round_, b});
  }
}

void BinInstance::on_decide(ReplicaId sender, bool b, Output& out) {
  if (decide_from_[sender] & bit_mask(b)) return;
  decide_from_[sender] |= bit_mask(b);
  auto count = ++decide_count_[b];
  if (count >= f_ + 1) decide(b, out);
  if (count >= 2 * f_ + 1 && decided_ == b) {
    halted_ = true;
    rounds_.clear();
  }
}

}  // namespace dispel
