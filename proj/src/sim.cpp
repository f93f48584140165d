#include "dispel/sim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace dispel {

const char* to_string(ByzBehavior b) {
  switch (b) {
    case ByzBehavior::Mute: return "mute";
    case ByzBehavior::RbcEquivocator: return "rbc_equivocator";
    case ByzBehavior::EstEquivocator: return "est_equivocator";
    case ByzBehavior::EpochSpammer: return "epoch_spammer";
  }
  return "unknown";
}

ByzBehavior parse_byz_behavior(std::string_view name) {
  for (auto b : {ByzBehavior::Mute, ByzBehavior::RbcEquivocator, ByzBehavior::EstEquivocator, ByzBehavior::EpochSpammer})
    if (name == to_string(b)) return b;
  throw ConfigError("unknown byzantine behavior: " + std::string(name));
}

const char* to_string(FaultSpec::Kind k) {
  switch (k) {
    case FaultSpec::Kind::Crash: return "crash";
    case FaultSpec::Kind::CrashRegion: return "crash_region";
    case FaultSpec::Kind::Partition: return "partition";
    case FaultSpec::Kind::Byzantine: return "byzantine";
  }
  return "unknown";
}

FaultSpec FaultSpec::crash(ReplicaId r) {
  FaultSpec f;
  f.kind = Kind::Crash;
  f.replicas = {r};
  return f;
}

FaultSpec FaultSpec::crash_region(std::vector<ReplicaId> rs) {
  FaultSpec f;
  f.kind = Kind::CrashRegion;
  f.replicas = std::move(rs);
  return f;
}

FaultSpec FaultSpec::partition(std::vector<ReplicaId> a, std::vector<ReplicaId> b, Duration d) {
  FaultSpec f;
  f.kind = Kind::Partition;
  f.replicas = std::move(a);
  f.other = std::move(b);
  f.duration = d;
  return f;
}

FaultSpec FaultSpec::byzantine(ReplicaId r, ByzBehavior b) {
  FaultSpec f;
  f.kind = Kind::Byzantine;
  f.replicas = {r};
  f.behavior = b;
  return f;
}

// Scenario ---------------------------------------------------------------------

Duration SimScenario::link_latency(ReplicaId from, ReplicaId to) const {
  if (latency_matrix.empty()) return latency;
  return latency_matrix[from][to];
}

void SimScenario::set_regions(std::size_t regions, Duration intra, Duration inter) {
  if (regions == 0) throw ConfigError("regions must be positive");
  latency_matrix.assign(n, std::vector<Duration>(n, inter));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i * regions / n == j * regions / n) latency_matrix[i][j] = intra;
}

std::vector<ReplicaId> SimScenario::region_members(std::size_t regions, std::size_t region) const {
  std::vector<ReplicaId> out;
  for (std::size_t i = 0; i < n; ++i)
    if (i * regions / n == region) out.push_back(static_cast<ReplicaId>(i));
  return out;
}

void SimScenario::validate() const {
  if (n == 0) throw ConfigError("scenario needs at least one replica");
  if (latency < Duration::zero() || jitter < Duration::zero()) throw ConfigError("latency must be non-negative");
  if (!latency_matrix.empty()) {
    if (latency_matrix.size() != n) throw ConfigError("latency matrix must be n x n");
    for (const auto& row : latency_matrix) {
      if (row.size() != n) throw ConfigError("latency matrix must be n x n");
      for (auto d : row)
        if (d < Duration::zero()) throw ConfigError("latency must be non-negative");
    }
  }
  if (!(loss_rate >= 0 && loss_rate < 1)) throw ConfigError("loss_rate must be in [0, 1)");
  if (bandwidth_bytes_per_s < 0) throw ConfigError("bandwidth must be non-negative");
  if (horizon <= Duration::zero()) throw ConfigError("horizon must be positive");
  if (load.tx_size < LoadTxHeader::kSize) throw ConfigError("tx_size too small for the load header");
  if (load.tick <= Duration::zero()) throw ConfigError("load tick must be positive");
  for (const auto& tf : faults) {
    for (auto r : tf.fault.replicas)
      if (r >= n) throw ConfigError("fault names an unknown replica");
    for (auto r : tf.fault.other)
      if (r >= n) throw ConfigError("fault names an unknown replica");
    if (tf.at < Time::zero()) throw ConfigError("fault time must be non-negative");
  }
  for (auto r : load.targets)
    if (r >= n) throw ConfigError("load targets an unknown replica");
}

namespace {

Duration from_seconds(double s) { return Duration(static_cast<std::int64_t>(std::llround(s * 1e9))); }
Duration from_millis(double ms) { return Duration(static_cast<std::int64_t>(std::llround(ms * 1e6))); }

double parse_double(std::string_view s, std::string_view what) {
  try {
    std::size_t used = 0;
    double v = std::stod(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + std::string(what) + ": " + std::string(s));
  }
}

std::vector<ReplicaId> parse_ids(std::string_view s) {
  std::vector<ReplicaId> out;
  for (const auto& part : split(s, ',')) {
    if (part.empty()) continue;
    out.push_back(static_cast<ReplicaId>(parse_double(part, "replica id")));
  }
  return out;
}

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

SimScenario scenario_from_kv(const KvFile& kv) {
  SimScenario sc;
  sc.n = static_cast<std::size_t>(kv.get_int("n", static_cast<std::int64_t>(sc.n)));
  sc.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(sc.seed)));
  sc.latency = from_millis(kv.get_double("latency_ms", 10));
  sc.jitter = from_millis(kv.get_double("jitter_ms", 0));
  sc.bandwidth_bytes_per_s = kv.get_double("bandwidth_mib_s", 20) * 1024 * 1024;
  sc.loss_rate = kv.get_double("loss_rate", 0);
  sc.retransmit_timeout = from_millis(kv.get_double("rto_ms", 200));
  sc.horizon = from_seconds(kv.get_double("horizon_s", 10));
  if (kv.has("regions")) {
    sc.set_regions(static_cast<std::size_t>(kv.get_int("regions", 1)), from_millis(kv.get_double("intra_ms", 1)),
                   from_millis(kv.get_double("inter_ms", 50)));
  }
  sc.load.rate_tx_per_s = kv.get_double("load_rate", 0);
  sc.load.saturate = kv.get_bool("load_saturate", false);
  sc.load.tx_size = static_cast<std::size_t>(kv.get_int("tx_size", 400));
  sc.trace_deliveries = kv.get_bool("trace_deliveries", false);
  for (const auto& spec : kv.get_all("fault")) {
    auto w = words(spec);
    if (w.size() < 3) throw ConfigError("bad fault: " + spec);
    TimedFault tf;
    tf.at = from_seconds(parse_double(w[0], "fault time"));
    if (w[1] == "crash") {
      tf.fault = FaultSpec::crash(static_cast<ReplicaId>(parse_double(w[2], "replica id")));
    } else if (w[1] == "crash_region") {
      tf.fault = FaultSpec::crash_region(parse_ids(w[2]));
    } else if (w[1] == "partition" && w.size() == 5) {
      tf.fault = FaultSpec::partition(parse_ids(w[2]), parse_ids(w[3]), from_seconds(parse_double(w[4], "duration")));
    } else if (w[1] == "byzantine" && w.size() == 4) {
      tf.fault = FaultSpec::byzantine(static_cast<ReplicaId>(parse_double(w[2], "replica id")), parse_byz_behavior(w[3]));
    } else {
      throw ConfigError("bad fault: " + spec);
    }
    sc.faults.push_back(std::move(tf));
  }
  sc.validate();
  return sc;
}

// Trace ------------------------------------------------------------------------

const char* to_string(TraceKind k) {
  switch (k) {
    case TraceKind::Deliver: return "deliver";
    case TraceKind::State: return "state";
    case TraceKind::Commit: return "commit";
    case TraceKind::Fault: return "fault";
    case TraceKind::Spawn: return "spawn";
  }
  return "unknown";
}

void EventTrace::add(const TraceRecord& r, bool store) {
  auto mix = [this](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      fingerprint_ ^= (v >> (8 * i)) & 0xff;
      fingerprint_ *= 1099511628211ULL;
    }
  };
  mix(static_cast<std::uint64_t>(r.at.count()));
  mix(static_cast<std::uint64_t>(r.kind));
  mix(r.node);
  mix(r.peer);
  mix(r.epoch);
  mix(r.a);
  mix(r.b);
  ++count_;
  if (store) records_.push_back(r);
}

std::string EventTrace::to_csv() const {
  std::string out = "time_ns,event,node,peer,epoch,a,b\n";
  out.reserve(out.size() + records_.size() * 40);
  for (const auto& r : records_) {
    out += std::to_string(r.at.count());
    out += ',';
    out += to_string(r.kind);
    for (std::uint64_t v : {std::uint64_t{r.node}, std::uint64_t{r.peer}, r.epoch, r.a, r.b}) {
      out += ',';
      out += std::to_string(v);
    }
    out += '\n';
  }
  return out;
}

EventTrace EventTrace::from_csv(std::string_view csv) {
  EventTrace t;
  bool header = true;
  for (const auto& line : split(csv, '\n')) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("time_ns", 0) == 0) continue;
    }
    auto f = split(line, ',');
    if (f.size() != 7) throw DecodeError("trace line needs 7 fields: " + line);
    auto num = [&](const std::string& s) {
      std::uint64_t v = 0;
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DecodeError("bad trace number: " + s);
      return v;
    };
    TraceRecord r;
    r.at = Time(static_cast<std::int64_t>(num(f[0])));
    bool known = false;
    for (auto k : {TraceKind::Deliver, TraceKind::State, TraceKind::Commit, TraceKind::Fault, TraceKind::Spawn})
      if (f[1] == to_string(k)) {
        r.kind = k;
        known = true;
      }
    if (!known) throw DecodeError("bad trace event: " + f[1]);
    r.node = static_cast<ReplicaId>(num(f[2]));
    r.peer = static_cast<ReplicaId>(num(f[3]));
    r.epoch = num(f[4]);
    r.a = num(f[5]);
    r.b = num(f[6]);
    t.add(r);
  }
  return t;
}

// Adversaries ------------------------------------------------------------------

namespace {

class MuteAdversary : public Adversary {
 public:
  ByzBehavior behavior() const override { return ByzBehavior::Mute; }
  std::vector<EnvelopePtr> outbound(ReplicaId, const EnvelopePtr&, std::mt19937_64&) override { return {}; }
};

// Binary-consensus votes carry the opposite bit to odd-numbered receivers.
class EstEquivocator : public Adversary {
 public:
  ByzBehavior behavior() const override { return ByzBehavior::EstEquivocator; }
  std::vector<EnvelopePtr> outbound(ReplicaId to, const EnvelopePtr& env, std::mt19937_64&) override {
    switch (env->kind) {
      case MsgKind::Est:
      case MsgKind::Coord:
      case MsgKind::Aux:
      case MsgKind::Decide: {
        if (to % 2 == 0) return {env};
        auto v = BinVote::decode(env->payload);
        v.bit = !v.bit;
        return {std::make_shared<const Envelope>(Envelope{env->epoch, env->kind, env->sender, v.encode()})};
      }
      default: return {env};
    }
  }
};

// Its own reliable broadcasts send one batch to even receivers and another to
// odd ones, and its votes for them follow the receiver's variant.
class RbcEquivocator : public Adversary {
 public:
  explicit RbcEquivocator(ReplicaId self) : self_(self) {}
  ByzBehavior behavior() const override { return ByzBehavior::RbcEquivocator; }

  std::vector<EnvelopePtr> outbound(ReplicaId to, const EnvelopePtr& env, std::mt19937_64&) override {
    switch (env->kind) {
      case MsgKind::Batch: {
        if (env->sender != self_) return {env};
        auto& v = variant(*env);
        return {to % 2 == 0 ? env : v.alt};
      }
      case MsgKind::Echo:
      case MsgKind::Ready: {
        auto vote = RbcVote::decode(env->payload);
        auto it = variants_.find(env->epoch.value);
        if (vote.source != self_ || it == variants_.end()) return {env};
        vote.digest = it->second.digests[to % 2];
        return {std::make_shared<const Envelope>(Envelope{env->epoch, env->kind, env->sender, vote.encode()})};
      }
      default: return {env};
    }
  }

 private:
  struct Variant {
    EnvelopePtr alt;
    BatchDigest digests[2];
  };

  Variant& variant(const Envelope& env) {
    auto it = variants_.find(env.epoch.value);
    if (it != variants_.end()) return it->second;
    auto batch = Batch::deserialize(env.payload);
    batch.txs.emplace_back(Bytes{0xee, static_cast<std::uint8_t>(env.epoch.value), 0xee});
    Variant v;
    v.digests[0] = sha256(env.payload);
    v.alt = std::make_shared<const Envelope>(Envelope{env.epoch, MsgKind::Batch, env.sender, batch.serialize()});
    v.digests[1] = sha256(v.alt->payload);
    while (variants_.size() > 64) variants_.erase(variants_.begin());
    return variants_.emplace(env.epoch.value, std::move(v)).first->second;
  }

  ReplicaId self_;
  std::map<std::uint64_t, Variant> variants_;
};

// Forwards its honest traffic and adds junk for far-future, near-future and
// stale epochs.
class EpochSpammer : public Adversary {
 public:
  EpochSpammer(ReplicaId self, std::size_t n) : self_(self), n_(n) {}
  ByzBehavior behavior() const override { return ByzBehavior::EpochSpammer; }

  std::vector<EnvelopePtr> outbound(ReplicaId, const EnvelopePtr& env, std::mt19937_64& rng) override {
    std::vector<EnvelopePtr> out{env};
    if (!is_consensus_kind(env->kind)) return out;
    auto e = env->epoch.value;
    auto vote = [&](MsgKind k, std::uint64_t epoch) {
      BinVote v{static_cast<std::uint16_t>(rng() % n_), static_cast<std::uint32_t>(1 + rng() % 3), rng() % 2 == 1};
      return std::make_shared<const Envelope>(Envelope{EpochId{epoch}, k, self_, v.encode()});
    };
    switch (rng() % 4) {
      case 0: out.push_back(vote(MsgKind::Est, e + 1000 + rng() % 1'000'000)); break;
      case 1: out.push_back(vote(MsgKind::Est, e + 1 + rng() % 3)); break;
      case 2: out.push_back(vote(MsgKind::Decide, e == 0 ? 0 : rng() % e)); break;
      default: {
        Bytes junk(16 + rng() % 48);
        for (auto& b : junk) b = static_cast<std::uint8_t>(rng());
        out.push_back(std::make_shared<const Envelope>(Envelope{EpochId{e + 1 + rng() % 8}, MsgKind::Batch, self_, junk}));
      }
    }
    return out;
  }

 private:
  ReplicaId self_;
  std::size_t n_;
};

}  // namespace

std::unique_ptr<Adversary> make_adversary(ByzBehavior b, ReplicaId self, std::size_t n) {
  switch (b) {
    case ByzBehavior::Mute: return std::make_unique<MuteAdversary>();
    case ByzBehavior::RbcEquivocator: return std::make_unique<RbcEquivocator>(self);
    case ByzBehavior::EstEquivocator: return std::make_unique<EstEquivocator>();
    case ByzBehavior::EpochSpammer: return std::make_unique<EpochSpammer>(self, n);
  }
  throw std::logic_error("unknown behavior");
}

// Simulator --------------------------------------------------------------------

class Simulator::NodeTransport : public Transport {
 public:
  NodeTransport(Simulator& sim, ReplicaId self) : sim_(sim), self_(self) {}

  ReplicaId self() const override { return self_; }
  std::size_t size() const override { return sim_.n_; }
  Time now() const override { return sim_.now_; }

  SendStatus send(ReplicaId to, EnvelopePtr env) override {
    if (to >= sim_.n_) throw UnknownPeer("unknown peer " + std::to_string(to));
    if (!sim_.crashed_[self_]) sim_.send_frame(self_, to, std::move(env));
    return SendStatus::Queued;
  }

  SendStatus broadcast(EnvelopePtr env) override {
    for (std::size_t to = 0; to < sim_.n_; ++to) send(static_cast<ReplicaId>(to), env);
    return SendStatus::Queued;
  }

  void schedule(Duration delay, TimerTag tag) override {
    if (sim_.crashed_[self_]) return;
    Event ev{};
    ev.at = sim_.now_ + std::max(delay, Duration::zero());
    ev.type = EvType::Timer;
    ev.to = self_;
    ev.tag = tag;
    sim_.push(std::move(ev));
  }

  double tx_rate_sample() override { return meter.sample(sim_.now_); }

  RateMeter meter;

 private:
  Simulator& sim_;
  ReplicaId self_;
};

Simulator::Simulator(SimScenario scenario)
    : sc_(std::move(scenario)),
      n_(sc_.n),
      handlers_(n_, nullptr),
      crashed_(n_, false),
      scheduled_faulty_(n_, false),
      crash_time_(n_),
      adversaries_(n_),
      link_free_(n_ * n_, Time::zero()),
      last_arrival_(n_ * n_, Time::zero()),
      net_rng_(sc_.seed),
      adv_rng_(sc_.seed ^ 0x9e3779b97f4a7c15ULL) {
  sc_.validate();
  for (std::size_t i = 0; i < n_; ++i) nodes_.push_back(std::make_unique<NodeTransport>(*this, static_cast<ReplicaId>(i)));
  for (std::size_t k = 0; k < sc_.faults.size(); ++k) {
    const auto& tf = sc_.faults[k];
    if (tf.fault.kind != FaultSpec::Kind::Partition)
      for (auto r : tf.fault.replicas) scheduled_faulty_[r] = true;
    Event ev{};
    ev.at = tf.at;
    ev.type = EvType::Fault;
    ev.index = k;
    push(std::move(ev));
  }
}

Simulator::~Simulator() = default;

Transport& Simulator::transport(ReplicaId i) { return *nodes_.at(i); }

void Simulator::attach(ReplicaId i, EventHandler* handler) { handlers_.at(i) = handler; }

std::optional<Time> Simulator::crash_time(ReplicaId i) const { return crash_time_[i]; }

void Simulator::call_at(Time at, std::function<void()> fn) {
  Event ev{};
  ev.at = std::max(at, now_);
  ev.type = EvType::Call;
  ev.index = calls_.size();
  calls_.push_back(std::move(fn));
  push(std::move(ev));
}

void Simulator::push(Event ev) {
  ev.seq = seq_++;
  queue_.push(std::move(ev));
}

void Simulator::send_frame(ReplicaId from, ReplicaId to, EnvelopePtr env) {
  if (adversaries_[from] && to != from) {
    for (auto& e : adversaries_[from]->outbound(to, env, adv_rng_)) transmit(from, to, std::move(e));
    return;
  }
  transmit(from, to, std::move(env));
}

bool Simulator::partitioned(ReplicaId a, ReplicaId b, Time at, Time* heal) const {
  bool cut = false;
  for (const auto& p : partitions_) {
    if (at >= p.until) continue;
    if ((p.side_a[a] && p.side_b[b]) || (p.side_b[a] && p.side_a[b])) {
      cut = true;
      *heal = std::max(*heal, p.until);
    }
  }
  return cut;
}

void Simulator::transmit(ReplicaId from, ReplicaId to, EnvelopePtr env) {
  Event ev{};
  ev.type = EvType::Deliver;
  ev.to = to;
  ev.from = from;
  if (to == from) {
    ev.at = now_;
    ev.env = std::move(env);
    push(std::move(ev));
    return;
  }
  if (crashed_[to]) {
    ++stats_.dropped_crashed;
    return;
  }
  const auto size = frame_size(*env);
  stats_.bytes_sent += size;
  const auto idx = static_cast<std::size_t>(from) * n_ + to;
  Time start = std::max(now_, link_free_[idx]);
  Duration tx{};
  if (sc_.bandwidth_bytes_per_s > 0)
    tx = Duration(static_cast<std::int64_t>(std::ceil(static_cast<double>(size) * 1e9 / sc_.bandwidth_bytes_per_s)));
  Time end = start + tx;
  link_free_[idx] = end;
  nodes_[from]->meter.record(start, end, size);

  const auto lat = sc_.link_latency(from, to);
  Time arrival = end + lat;
  if (sc_.jitter > Duration::zero())
    arrival += Duration(static_cast<std::int64_t>(net_rng_() % static_cast<std::uint64_t>(sc_.jitter.count() + 1)));
  if (sc_.loss_rate > 0 && std::uniform_real_distribution<double>(0, 1)(net_rng_) < sc_.loss_rate) {
    arrival += sc_.retransmit_timeout;
    ++stats_.delayed_by_loss;
  }
  Time heal{};
  if (!partitions_.empty() && partitioned(from, to, now_, &heal)) {
    arrival = std::max(arrival, heal + lat);
    ++stats_.held_by_partition;
  }
  arrival = std::max(arrival, last_arrival_[idx]);
  last_arrival_[idx] = arrival;
  ev.at = arrival;
  ev.env = std::move(env);
  push(std::move(ev));
}

void Simulator::apply_fault(const FaultSpec& f) {
  TraceRecord r{now_, TraceKind::Fault, f.replicas.empty() ? ReplicaId{0} : f.replicas.front(), 0, 0,
                static_cast<std::uint64_t>(f.kind), f.replicas.size()};
  trace_.add(r);
  switch (f.kind) {
    case FaultSpec::Kind::Crash:
    case FaultSpec::Kind::CrashRegion:
      for (auto rid : f.replicas) {
        if (crashed_[rid]) continue;
        crashed_[rid] = true;
        crash_time_[rid] = now_;
      }
      break;
    case FaultSpec::Kind::Partition: {
      ActivePartition p{std::vector<bool>(n_, false), std::vector<bool>(n_, false), now_ + f.duration};
      for (auto rid : f.replicas) p.side_a[rid] = true;
      for (auto rid : f.other) p.side_b[rid] = true;
      partitions_.push_back(std::move(p));
      break;
    }
    case FaultSpec::Kind::Byzantine:
      for (auto rid : f.replicas) adversaries_[rid] = make_adversary(f.behavior, rid, n_);
      break;
  }
}

void Simulator::run_until(Time until) {
  if (!started_) {
    started_ = true;
    // Faults scheduled at time zero take effect before anything starts.
    while (!queue_.empty() && queue_.top().at == Time::zero() && queue_.top().type == EvType::Fault) {
      auto ev = queue_.top();
      queue_.pop();
      apply_fault(sc_.faults[ev.index].fault);
    }
    for (std::size_t i = 0; i < n_; ++i)
      if (handlers_[i] && !crashed_[i]) handlers_[i]->on_start();
  }
  while (!queue_.empty() && queue_.top().at <= until) {
    auto ev = queue_.top();
    queue_.pop();
    now_ = ev.at;
    ++stats_.events;
    switch (ev.type) {
      case EvType::Deliver: {
        if (crashed_[ev.to] || crashed_[ev.from]) {
          ++stats_.dropped_crashed;
          break;
        }
        ++stats_.deliveries;
        trace_.add(TraceRecord{now_, TraceKind::Deliver, ev.to, ev.from, ev.env->epoch.value,
                               static_cast<std::uint64_t>(ev.env->kind), ev.env->payload.size()},
                   sc_.trace_deliveries);
        if (handlers_[ev.to]) handlers_[ev.to]->on_envelope(*ev.env);
        break;
      }
      case EvType::Timer:
        if (!crashed_[ev.to] && handlers_[ev.to]) handlers_[ev.to]->on_timer(ev.tag);
        break;
      case EvType::Fault: apply_fault(sc_.faults[ev.index].fault); break;
      case EvType::Call: {
        auto fn = std::move(calls_[ev.index]);
        calls_[ev.index] = nullptr;
        if (fn) fn();
        break;
      }
    }
  }
  now_ = std::max(now_, until);
}

// Load header ------------------------------------------------------------------

std::optional<LoadTxHeader> LoadTxHeader::parse(const Transaction& tx) {
  if (tx.size() < kSize) return std::nullopt;
  be::Reader in(tx.payload());
  LoadTxHeader h;
  h.submitted = Time(static_cast<std::int64_t>(in.u64()));
  h.origin = in.u16();
  h.seq = in.u64();
  return h;
}

Bytes LoadTxHeader::make(std::size_t total_size) const {
  Bytes out;
  out.reserve(std::max(total_size, kSize));
  be::put_u64(out, static_cast<std::uint64_t>(submitted.count()));
  be::put_u16(out, origin);
  be::put_u64(out, seq);
  out.resize(std::max(total_size, kSize), 0x5a);
  return out;
}

// Cluster ------------------------------------------------------------------------

class SimCluster::Guard : public EventHandler {
 public:
  Guard(SimCluster& c, Replica& r) : c_(c), r_(r) {}
  void on_start() override { run([&] { r_.on_start(); }); }
  void on_envelope(const Envelope& env) override { run([&] { r_.on_envelope(env); }); }
  void on_timer(const TimerTag& tag) override { run([&] { r_.on_timer(tag); }); }

 private:
  template <typename F>
  void run(F&& f) {
    try {
      f();
    } catch (const std::exception&) {
      ++c_.exceptions_;
    }
  }
  SimCluster& c_;
  Replica& r_;
};

SimCluster::SimCluster(SimScenario scenario, Config base)
    : sc_(std::move(scenario)),
      commits_(sc_.n),
      latencies_(sc_.n),
      submitted_(sc_.n, 0),
      running_(sc_.n, 0),
      load_credit_(sc_.n, 0.0) {
  sim_ = std::make_unique<Simulator>(sc_);
  const auto n = sc_.n;
  for (std::size_t i = 0; i < n; ++i) {
    auto cfg = base;
    cfg.n = n;
    cfg.f = default_fault_bound(n);
    cfg.replica_id = static_cast<ReplicaId>(i);
    auto rep = std::make_unique<Replica>(cfg, sim_->transport(cfg.replica_id));
    auto* r = rep.get();
    const auto id = cfg.replica_id;
    r->on_state_change([this, r, id](EpochId e, EpochState s) {
      std::uint64_t spawned = 0;
      if (s == EpochState::Running) {
        ++running_[id];
        max_running_ = std::max(max_running_, running_[id]);
        if (auto* rec = r->record(e)) spawned = rec->self_spawned;
      } else if (s == EpochState::Decided) {
        --running_[id];
      }
      sim_->trace().add(TraceRecord{sim_->now(), TraceKind::State, id, 0, e.value, static_cast<std::uint64_t>(s), spawned});
    });
    r->on_commit([this, id](const CommittedEpoch& c, const std::vector<BatchPtr>& batches) {
      std::uint64_t fold = 0;
      for (const auto& d : c.digests)
        for (int k = 0; k < 8; ++k) fold = (fold << 8 | fold >> 56) ^ d.bytes[k];
      sim_->trace().add(TraceRecord{sim_->now(), TraceKind::Commit, id, 0, c.epoch.value, c.tx_count, fold});
      commits_[id].push_back(CommitSample{sim_->now(), c.epoch, c.tx_count, c.payload_bytes});
      for (const auto& b : batches) {
        if (b->origin != id) continue;
        for (const auto& tx : b->txs) {
          auto h = LoadTxHeader::parse(tx);
          if (h && h->origin == id) latencies_[id].push_back(std::chrono::duration<double>(sim_->now() - h->submitted).count());
        }
      }
    });
    guards_.push_back(std::make_unique<Guard>(*this, *r));
    sim_->attach(id, guards_.back().get());
    replicas_.push_back(std::move(rep));
  }
  if (sc_.load.saturate || sc_.load.rate_tx_per_s > 0) sim_->call_at(sc_.load.tick, [this] { load_tick(); });
}

SimCluster::~SimCluster() = default;

void SimCluster::run() { run_until(sc_.horizon); }

void SimCluster::run_until(Time t) { sim_->run_until(t); }

void SimCluster::load_tick() {
  const auto& load = sc_.load;
  auto submit_one = [&](ReplicaId i) {
    LoadTxHeader h{sim_->now(), i, seq_++};
    ++submitted_[i];
    return replicas_[i]->submit(Transaction(h.make(load.tx_size)));
  };
  auto each = [&](auto&& fn) {
    if (load.targets.empty())
      for (std::size_t i = 0; i < replicas_.size(); ++i) fn(static_cast<ReplicaId>(i));
    else
      for (auto i : load.targets) fn(i);
  };
  each([&](ReplicaId i) {
    if (sim_->crashed(i)) return;
    if (load.saturate) {
      // Top up until the pool pushes back.
      for (int k = 0; k < 1'000'000; ++k)
        if (submit_one(i) == OfferResult::Rejected) break;
      return;
    }
    load_credit_[i] += load.rate_tx_per_s * std::chrono::duration<double>(load.tick).count();
    while (load_credit_[i] >= 1.0) {
      submit_one(i);
      load_credit_[i] -= 1.0;
    }
  });
  if (sim_->now() + load.tick <= sc_.horizon) sim_->call_at(sim_->now() + load.tick, [this] { load_tick(); });
}

std::size_t SimCluster::max_active() const {
  std::size_t m = 0;
  for (const auto& r : replicas_) m = std::max(m, r->stats().max_active);
  return m;
}

std::string SimCluster::check_agreement() const {
  std::optional<std::size_t> ref;
  for (std::size_t i = 0; i < replicas_.size(); ++i) {
    if (!correct(static_cast<ReplicaId>(i))) continue;
    if (!ref) {
      ref = i;
      continue;
    }
    const auto& a = replicas_[*ref]->committed_log();
    const auto& b = replicas_[i]->committed_log();
    auto common = std::min(a.size(), b.size());
    for (std::size_t k = 0; k < common; ++k) {
      if (a[k].epoch != b[k].epoch || a[k].digests != b[k].digests)
        return "replicas " + std::to_string(*ref) + " and " + std::to_string(i) + " diverge at log index " +
               std::to_string(k);
    }
  }
  return {};
}

std::string SimCluster::check_contiguity() const {
  for (std::size_t i = 0; i < replicas_.size(); ++i) {
    if (!correct(static_cast<ReplicaId>(i))) continue;
    const auto& log = replicas_[i]->committed_log();
    for (std::size_t k = 0; k < log.size(); ++k)
      if (log[k].epoch.value != k) return "replica " + std::to_string(i) + " has a gap at log index " + std::to_string(k);
  }
  return {};
}

}  // namespace dispel
