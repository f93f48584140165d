#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/transport.hpp"

namespace dispel {

class DuplicatePropose : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// One binary Byzantine consensus instance with a rotating weak coordinator.
// Rounds start at 1; the coordinator of round r is replica r mod n.
class BinInstance {
 public:
  struct Message {
    MsgKind kind = MsgKind::Est;
    std::uint32_t round = 0;
    bool bit = false;

    bool operator==(const Message&) const = default;
  };

  struct Output {
    std::vector<Message> broadcasts;
    std::optional<bool> decided;
    // Round whose timer the caller must arm (the round just entered).
    std::optional<std::uint32_t> arm_timer;
  };

  // Messages further than this many rounds past the current one are dropped.
  static constexpr std::uint32_t kDefaultRoundWindow = 4;

  BinInstance(std::size_t n, std::size_t f, ReplicaId self,
              std::uint32_t round_window = kDefaultRoundWindow);

  Output propose(bool b);
  Output on_message(ReplicaId sender, MsgKind kind, std::uint32_t round, bool bit);
  Output on_timeout(std::uint32_t round);

  bool proposed() const { return proposed_; }
  const std::optional<bool>& decision() const { return decided_; }
  // Decided and at least 2f+1 replicas announced the same decision.
  bool halted() const { return halted_; }
  std::uint32_t round() const { return round_; }
  // Round in which this replica decided through its own round machine, if any.
  std::optional<std::uint32_t> decided_round() const { return decided_round_; }
  bool est() const { return est_; }
  std::uint8_t bin_values(std::uint32_t round) const;
  std::size_t dropped() const { return dropped_; }

  static ReplicaId coordinator(std::uint32_t round, std::size_t n) { return static_cast<ReplicaId>(round % n); }

 private:
  enum SenderFlag : std::uint8_t { kEst0 = 1, kEst1 = 2, kAux = 4, kAuxBit = 8, kCoordSeen = 16 };

  struct RoundState {
    std::vector<std::uint8_t> from;
    std::size_t est_count[2] = {0, 0};
    bool est_sent[2] = {false, false};
    std::uint8_t bin_values = 0;
    std::optional<bool> first_bin;
    std::size_t aux_count[2] = {0, 0};
    std::optional<bool> coord;
    bool coord_sent = false;
    bool aux_sent = false;
    bool timed_out = false;
  };

  RoundState& state(std::uint32_t round);
  void enter_round(std::uint32_t round, Output& out);
  void send_est(std::uint32_t round, bool b, Output& out);
  void on_est(ReplicaId sender, std::uint32_t round, bool b, Output& out);
  void on_aux(ReplicaId sender, std::uint32_t round, bool b, Output& out);
  void on_coord(ReplicaId sender, std::uint32_t round, bool b, Output& out);
  void on_decide(ReplicaId sender, bool b, Output& out);
  void bv_step(std::uint32_t round, bool b, Output& out);
  void maybe_coord(std::uint32_t round, Output& out);
  // Runs the AUX and decision steps of the current round until it blocks.
  void progress(Output& out);
  void decide(bool b, Output& out);

  std::size_t n_;
  std::size_t f_;
  ReplicaId self_;
  std::uint32_t window_;

  bool proposed_ = false;
  bool est_ = false;
  std::uint32_t round_ = 0;
  std::optional<bool> decided_;
  std::optional<std::uint32_t> decided_round_;
  bool decide_sent_ = false;
  bool halted_ = false;
  std::size_t dropped_ = 0;

  std::map<std::uint32_t, RoundState> rounds_;
  // Per sender: bit 0 / bit 1 set once DECIDE(0) / DECIDE(1) was received.
  std::vector<std::uint8_t> decide_from_;
  std::size_t decide_count_[2] = {0, 0};
};

}  // namespace dispel
