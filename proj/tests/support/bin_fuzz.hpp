#pragma once

// Timed random schedules for n real BinInstance replicas, f of which may be
// Byzantine. Correct replicas see arbitrary reordering during an initial
// asynchronous period, then bounded delays.

#include <cmath>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "dispel/binconsensus.hpp"

namespace dispel::check {

enum class BinAdversary { None, Mute, EstEquivocator, Random };

struct BinFuzzOptions {
  std::size_t n = 4;
  BinAdversary adversary = BinAdversary::None;
  // Inputs of correct replicas; empty means random.
  std::vector<int> inputs;
  Duration async_period = 0ms;
  Duration async_delay = 200ms;
  Duration max_delay = 5ms;
  Duration round_timeout = 40ms;
  Duration horizon = 600s;
};

struct BinFuzzResult {
  bool agreement = true;
  bool validity = true;
  bool terminated = true;
  std::uint32_t max_decision_round = 0;
  std::size_t messages = 0;
  std::string detail;
};

inline BinFuzzResult run_bin_fuzz(std::uint64_t seed, const BinFuzzOptions& opt) {
  std::mt19937_64 rng(seed);
  const std::size_t n = opt.n;
  const std::size_t f = (n - 1) / 3;
  const std::size_t byz = opt.adversary == BinAdversary::None ? 0 : f;

  // Byzantine replicas are the last `byz` ids shifted by a random offset.
  std::vector<bool> faulty(n, false);
  auto offset = rng() % n;
  for (std::size_t k = 0; k < byz; ++k) faulty[(offset + k) % n] = true;

  std::vector<BinInstance> nodes;
  for (std::size_t i = 0; i < n; ++i) nodes.emplace_back(n, f, static_cast<ReplicaId>(i));

  struct Event {
    Time at;
    std::uint64_t seq;
    int type;  // 0 message, 1 timeout
    ReplicaId to;
    ReplicaId from;
    BinInstance::Message msg;
    bool operator>(const Event& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> q;
  std::uint64_t seq = 0;
  Time now{0};

  auto delay = [&]() {
    auto bound = now < opt.async_period ? opt.async_delay : opt.max_delay;
    return Duration(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(bound.count() + 1)));
  };

  BinFuzzResult res;
  std::vector<std::optional<bool>> decided(n);
  std::vector<std::uint32_t> decided_round(n, 0);

  auto emit = [&](ReplicaId from, const BinInstance::Output& out) {
    for (const auto& m : out.broadcasts) {
      for (std::size_t to = 0; to < n; ++to) {
        auto msg = m;
        if (faulty[from]) {
          if (opt.adversary == BinAdversary::Mute) continue;
          if (opt.adversary == BinAdversary::EstEquivocator && (m.kind == MsgKind::Est || m.kind == MsgKind::Aux))
            msg.bit = (to % 2 == 0) ? m.bit : !m.bit;
          if (opt.adversary == BinAdversary::Random) {
            msg.bit = rng() % 2 == 1;
            if (rng() % 4 == 0) msg.round += static_cast<std::uint32_t>(rng() % 3);
          }
        }
        q.push(Event{now + delay(), seq++, 0, static_cast<ReplicaId>(to), from, msg});
        ++res.messages;
      }
    }
    if (out.arm_timer) {
      double scale = std::pow(2.0, static_cast<double>(*out.arm_timer - 1));
      auto d = Duration(static_cast<std::int64_t>(static_cast<double>(opt.round_timeout.count()) * std::min(scale, 1e4)));
      q.push(Event{now + d, seq++, 1, from, from, BinInstance::Message{MsgKind::Est, *out.arm_timer, false}});
    }
    if (out.decided && !faulty[from] && !decided[from]) {
      decided[from] = *out.decided;
      decided_round[from] = nodes[from].decided_round().value_or(nodes[from].round());
    }
  };

  std::optional<int> unanimous;
  for (std::size_t i = 0, c = 0; i < n; ++i) {
    int input = static_cast<int>(rng() % 2);
    if (!faulty[i] && c < opt.inputs.size()) input = opt.inputs[c++];
    if (!faulty[i]) unanimous = (!unanimous || *unanimous == input) ? std::optional<int>(input) : std::optional<int>(-1);
    emit(static_cast<ReplicaId>(i), nodes[i].propose(input == 1));
  }
  if (opt.adversary == BinAdversary::EstEquivocator) {
    // Extra equivocation: both EST values for the first rounds straight away.
    for (std::size_t i = 0; i < n; ++i) {
      if (!faulty[i]) continue;
      for (std::uint32_t r = 1; r <= 3; ++r)
        for (std::size_t to = 0; to < n; ++to)
          for (bool b : {false, true})
            q.push(Event{now + delay(), seq++, 0, static_cast<ReplicaId>(to), static_cast<ReplicaId>(i),
                         BinInstance::Message{MsgKind::Est, r, b}});
    }
  }

  auto all_done = [&]() {
    for (std::size_t i = 0; i < n; ++i)
      if (!faulty[i] && !nodes[i].halted()) return false;
    return true;
  };

  while (!q.empty() && !all_done()) {
    auto ev = q.top();
    q.pop();
    now = ev.at;
    if (now > opt.horizon) break;
    if (ev.type == 1)
      emit(ev.to, nodes[ev.to].on_timeout(ev.msg.round));
    else
      emit(ev.to, nodes[ev.to].on_message(ev.from, ev.msg.kind, ev.msg.round, ev.msg.bit));
  }

  std::optional<bool> first;
  for (std::size_t i = 0; i < n; ++i) {
    if (faulty[i]) continue;
    if (!decided[i]) {
      res.terminated = false;
      res.detail = "replica " + std::to_string(i) + " did not decide";
      continue;
    }
    res.max_decision_round = std::max(res.max_decision_round, decided_round[i]);
    if (!first) first = decided[i];
    if (*first != *decided[i]) {
      res.agreement = false;
      res.detail = "replicas decided differently";
    }
    if (unanimous && *unanimous >= 0 && *decided[i] != (*unanimous == 1)) {
      res.validity = false;
      res.detail = "decided a value no correct replica proposed";
    }
  }
  return res;
}

}  // namespace dispel::check
