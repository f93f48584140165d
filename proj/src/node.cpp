#include "dispel/node.hpp"

#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace dispel {

namespace {

constexpr std::uint16_t kFlushTimer = 1;
constexpr std::uint16_t kStopTimer = 2;

double seconds(Duration d) { return std::chrono::duration<double>(d).count(); }

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

}  // namespace

Bytes ClientAck::encode() const {
  Bytes out;
  be::put_u8(out, static_cast<std::uint8_t>(status));
  be::put_u64(out, epoch.value);
  be::put_u32(out, static_cast<std::uint32_t>(txs.size()));
  for (const auto& d : txs) be::put_bytes(out, d.bytes);
  return out;
}

ClientAck ClientAck::decode(ByteView payload) {
  be::Reader r(payload);
  ClientAck a;
  auto s = r.u8();
  if (s > 1) throw DecodeError("unknown ack status");
  a.status = static_cast<Status>(s);
  a.epoch = EpochId{r.u64()};
  auto count = r.u32();
  if (count > r.remaining() / 32) throw DecodeError("ack count exceeds payload");
  a.txs.resize(count);
  for (auto& d : a.txs) {
    auto b = r.bytes(32);
    std::copy(b.begin(), b.end(), d.bytes.begin());
  }
  r.expect_done("client ack");
  return a;
}

TxKind parse_tx_kind(std::string_view s) {
  if (s == "raw") return TxKind::Raw;
  if (s == "transfer") return TxKind::Transfer;
  throw ConfigError("tx kind must be raw or transfer, got " + std::string(s));
}

std::vector<KeyPair> workload_accounts(std::size_t count, std::uint64_t seed) {
  std::vector<KeyPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(KeyPair::from_seed(seed + i));
  return out;
}

LedgerState workload_genesis(const std::vector<KeyPair>& accounts, std::uint64_t balance) {
  std::vector<std::pair<PubKey, std::uint64_t>> g;
  for (const auto& k : accounts) g.emplace_back(k.public_key(), balance);
  return LedgerState(g);
}

std::string committed_log_csv(const std::vector<CommittedEpoch>& log) {
  std::ostringstream out;
  out << "epoch,tx_count,payload_bytes,digests\n";
  for (const auto& c : log) {
    out << c.epoch.value << ',' << c.tx_count << ',' << c.payload_bytes << ',';
    for (std::size_t i = 0; i < c.digests.size(); ++i) out << (i ? ";" : "") << c.digests[i].hex();
    out << '\n';
  }
  return out.str();
}

// Node ------------------------------------------------------------------------

Node::Node(NodeOptions opts) : opts_(std::move(opts)), net_(opts_.cfg.replica_id, opts_.peers) {
  opts_.cfg.validate();
  if (opts_.peers.size() != opts_.cfg.n)
    throw ConfigError("peer list has " + std::to_string(opts_.peers.size()) + " entries but n=" +
                      std::to_string(opts_.cfg.n));
  opts_.cfg.retain_blocks = true;
  replica_ = std::make_unique<Replica>(opts_.cfg, net_);
  if (opts_.app == TxKind::Transfer) {
    LedgerState genesis = opts_.genesis_file
                              ? LedgerState::from_genesis(KvFile::load(*opts_.genesis_file))
                              : workload_genesis(workload_accounts(opts_.accounts, opts_.account_seed),
                                                 opts_.genesis_balance);
    if (opts_.verify) pool_ = std::make_unique<VerifierPool>(std::max<std::size_t>(1, opts_.verifier_workers));
    ledger_ = std::make_unique<LedgerApp>(*replica_, std::move(genesis), pool_.get());
    ledger_->set_verify(opts_.verify);
    ledger_->on_block([this](const CommittedEpoch& c, const std::vector<Transaction>& txs,
                             const std::vector<TxOutcome>&) { on_committed(c, txs); });
  } else {
    replica_->on_commit([this](const CommittedEpoch& c, const std::vector<BatchPtr>& batches) {
      on_committed(c, block_transactions(batches));
    });
  }
  net_.listen();
}

Node::~Node() { net_.stop(); }

void Node::run() {
  net_.run(*this);
  if (stopped_ == Time::zero()) stopped_ = net_.now();
}

void Node::on_start() {
  started_ = net_.now();
  replica_->on_start();
  if (opts_.duration > Duration::zero()) net_.schedule(opts_.duration, TimerTag{TimerKind::User, {}, kStopTimer});
}

void Node::on_envelope(const Envelope& env) {
  if (env.kind == MsgKind::ClientTx && env.sender >= kFirstClientId) {
    if (!env.payload.empty()) admit(env.sender, Transaction(env.payload));
    return;
  }
  replica_->on_envelope(env);
}

void Node::on_timer(const TimerTag& tag) {
  if (tag.kind != TimerKind::User) {
    replica_->on_timer(tag);
    return;
  }
  if (tag.index == kFlushTimer) {
    flush_armed_ = false;
    flush_admission();
  } else if (tag.index == kStopTimer) {
    stopped_ = net_.now();
    net_.stop();
  }
}

void Node::admit(ReplicaId client, Transaction tx) {
  ++received_;
  if (pending_txs_.size() + verifying_ + waiting_.size() >= opts_.max_pending) {
    ++rejected_;
    ClientAck a;
    a.status = ClientAck::Status::Rejected;
    a.txs.push_back(sha256(tx.payload()));
    ack(client, a);
    return;
  }
  if (!pool_) {
    admitted({std::move(tx)}, {client}, {Verdict::Valid});
    return;
  }
  pending_txs_.push_back(std::move(tx));
  pending_clients_.push_back(client);
  if (pending_txs_.size() >= opts_.admission_batch) {
    flush_admission();
  } else if (!flush_armed_) {
    flush_armed_ = true;
    net_.schedule(opts_.admission_period, TimerTag{TimerKind::User, {}, kFlushTimer});
  }
}

void Node::flush_admission() {
  if (pending_txs_.empty()) return;
  auto txs = std::move(pending_txs_);
  auto clients = std::move(pending_clients_);
  pending_txs_.clear();
  pending_clients_.clear();
  verifying_ += txs.size();
  pool_->verify_async(std::move(txs), [this, clients](std::vector<Transaction> t, std::vector<Verdict> v) {
    net_.post([this, clients, t = std::move(t), v = std::move(v)]() mutable {
      admitted(std::move(t), clients, std::move(v));
    });
  });
}

void Node::admitted(std::vector<Transaction> txs, std::vector<ReplicaId> clients, std::vector<Verdict> verdicts) {
  if (pool_) verifying_ -= txs.size();
  std::map<ReplicaId, ClientAck> rejects;
  for (std::size_t i = 0; i < txs.size(); ++i) {
    auto d = sha256(txs[i].payload());
    bool ok = verdicts[i] == Verdict::Valid && replica_->submit(txs[i]) == OfferResult::Accepted;
    if (ok) {
      if (ledger_ && pool_) ledger_->remember_valid(txs[i]);
      waiting_[d] = Waiting{clients[i], net_.now()};
    } else {
      ++rejected_;
      auto& a = rejects[clients[i]];
      a.status = ClientAck::Status::Rejected;
      a.txs.push_back(d);
    }
  }
  for (const auto& [c, a] : rejects) ack(c, a);
}

void Node::on_committed(const CommittedEpoch& c, const std::vector<Transaction>& txs) {
  commits_.push_back({seconds(c.commit_time - started_), c.tx_count, c.payload_bytes});
  if (waiting_.empty()) return;
  std::map<ReplicaId, ClientAck> acks;
  for (const auto& tx : txs) {
    auto it = waiting_.find(sha256(tx.payload()));
    if (it == waiting_.end()) continue;
    latencies_.push_back(seconds(c.commit_time - it->second.admitted));
    auto& a = acks[it->second.client];
    a.epoch = c.epoch;
    a.txs.push_back(it->first);
    waiting_.erase(it);
  }
  for (const auto& [client, a] : acks) ack(client, a);
}

void Node::ack(ReplicaId client, const ClientAck& a) {
  try {
    net_.send(client, std::make_shared<Envelope>(Envelope{a.epoch, MsgKind::ClientTx, replica_->id(), a.encode()}));
  } catch (const TransportError&) {
    // The client has gone away.
  }
}

BenchReport Node::report() const {
  Time end = stopped_ != Time::zero() ? stopped_ : net_.now();
  return make_report("node-" + std::to_string(replica_->id()), 0, seconds(end - started_), commits_, latencies_,
                     received_, rejected_);
}

void Node::write_outputs() const {
  if (opts_.out.empty()) return;
  std::filesystem::create_directories(opts_.out);
  write_file(opts_.out / "committed_log.csv", committed_log_csv(replica_->committed_log()));
  write_file(opts_.out / "report.csv", reports_to_csv({report()}));
  if (ledger_) write_file(opts_.out / "ledger.csv", ledger_->state().to_csv());
}

// Load generator ----------------------------------------------------------------

BenchReport run_loadgen(const LoadgenOptions& opts) {
  using Clock = std::chrono::steady_clock;
  const std::size_t n = opts.replicas.size();
  if (n == 0) throw ConfigError("no replicas to load");
  if (opts.rate < 0) throw ConfigError("rate must be non-negative");
  std::string label = "load-" + std::to_string(static_cast<std::uint64_t>(opts.rate));
  auto total = static_cast<std::size_t>(opts.rate * seconds(opts.duration));
  if (total == 0) return make_report(label, opts.rate, 0, {}, {});

  // Everything is signed up front so the timed phase only sends.
  std::vector<Transaction> txs;
  std::vector<std::size_t> target;
  txs.reserve(total);
  target.reserve(total);
  if (opts.kind == TxKind::Transfer) {
    if (opts.accounts < 2) throw ConfigError("transfers need at least two accounts");
    for (std::size_t k = 0; k < total; ++k) target.push_back(k % opts.accounts % n);
    // Cache header: accounts, seed, first nonce, count.
    Bytes key;
    be::put_u64(key, opts.accounts);
    be::put_u64(key, opts.account_seed);
    be::put_u64(key, opts.first_nonce);
    be::put_u64(key, total);
    if (!opts.tx_cache.empty()) {
      std::ifstream in(opts.tx_cache, std::ios::binary);
      Bytes head(key.size());
      if (in && in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size())) && head == key) {
        Bytes buf(TransferTx::kSize);
        while (txs.size() < total && in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
          txs.emplace_back(buf);
        if (txs.size() != total) txs.clear();
      }
    }
    if (txs.empty()) {
      auto accounts = workload_accounts(opts.accounts, opts.account_seed);
      for (std::size_t k = 0; k < total; ++k) {
        std::size_t a = k % accounts.size();
        auto to = accounts[(a + 1) % accounts.size()].public_key();
        txs.push_back(TransferTx::make(accounts[a], to, 1, opts.first_nonce + k / accounts.size()).to_transaction());
      }
      if (!opts.tx_cache.empty()) {
        std::ofstream out(opts.tx_cache, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(key.data()), static_cast<std::streamsize>(key.size()));
        for (const auto& t : txs)
          out.write(reinterpret_cast<const char*>(t.payload().data()), static_cast<std::streamsize>(t.size()));
      }
    }
  } else {
    for (std::size_t k = 0; k < total; ++k) {
      LoadTxHeader h{Time::zero(), static_cast<ReplicaId>(k % n), k};
      txs.push_back(Transaction(h.make(std::max(opts.tx_size, LoadTxHeader::kSize))));
      target.push_back(k % n);
    }
  }
  std::unordered_map<BatchDigest, std::size_t, DigestHash> index;
  for (std::size_t k = 0; k < total; ++k) index.emplace(sha256(txs[k].payload()), k);

  TcpClient client(opts.replicas);
  client.connect(opts.connect_timeout);

  std::mutex mu;
  std::vector<double> sent_at(total, -1);
  std::vector<bool> resolved(total, false);
  std::size_t resolved_count = 0;
  std::uint64_t rejected = 0;
  std::vector<CommitObservation> commits;
  std::vector<double> latencies;
  std::atomic<bool> done{false};
  auto start = Clock::now();
  auto since = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };

  std::vector<std::thread> readers;
  for (std::size_t r = 0; r < n; ++r) {
    readers.emplace_back([&, r] {
      while (!done) {
        auto env = client.receive(r, std::chrono::milliseconds(50));
        if (!env) continue;
        if (env->kind != MsgKind::ClientTx) continue;
        ClientAck a;
        try {
          a = ClientAck::decode(env->payload);
        } catch (const DecodeError&) {
          continue;
        }
        double t = since();
        std::lock_guard lk(mu);
        for (const auto& d : a.txs) {
          auto it = index.find(d);
          if (it == index.end() || resolved[it->second] || sent_at[it->second] < 0) continue;
          resolved[it->second] = true;
          ++resolved_count;
          if (a.status == ClientAck::Status::Rejected) {
            ++rejected;
          } else {
            latencies.push_back(t - sent_at[it->second]);
            commits.push_back({t, 1, txs[it->second].size()});
          }
        }
      }
    });
  }

  std::size_t sent = 0;
  for (std::size_t k = 0; k < total; ++k) {
    auto due = start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(k / opts.rate));
    if (Clock::now() < due) std::this_thread::sleep_until(due);
    {
      std::lock_guard lk(mu);
      sent_at[k] = since();
    }
    if (client.submit(target[k], txs[k])) {
      ++sent;
    } else {
      std::lock_guard lk(mu);
      if (!resolved[k]) {
        resolved[k] = true;
        ++resolved_count;
        ++rejected;
      }
    }
  }
  auto drain_until = Clock::now() + opts.drain;
  while (Clock::now() < drain_until) {
    {
      std::lock_guard lk(mu);
      if (resolved_count == total) break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  done = true;
  for (auto& t : readers) t.join();
  std::lock_guard lk(mu);
  return make_report(label, opts.rate, seconds(opts.duration), commits, latencies, sent, rejected);
}

}  // namespace dispel
