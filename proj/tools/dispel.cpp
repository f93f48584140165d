#include <csignal>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "dispel/bench.hpp"
#include "dispel/kvfile.hpp"
#include "dispel/node.hpp"
#include "dispel/sim.hpp"

using namespace dispel;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

Duration secs(double s) { return std::chrono::duration_cast<Duration>(std::chrono::duration<double>(s)); }

void print_reports(const std::vector<BenchReport>& reports) {
  std::printf("%-16s %10s %12s %10s %10s %10s %10s\n", "label", "load", "tx/s", "MiB/s", "mean_ms", "p50_ms",
              "p99_ms");
  for (const auto& r : reports) {
    std::printf("%-16s %10.0f %12.1f %10.3f %10.2f %10.2f %10.2f\n", r.label.c_str(), r.load, r.tx_per_s, r.mib_per_s,
                r.latency.mean_s * 1e3, r.latency.p50_s * 1e3, r.latency.p99_s * 1e3);
  }
  if (!reports.empty()) {
    auto op = select_operating_point(reports);
    std::printf("operating point: load=%.0f tx/s throughput=%.1f tx/s latency=%.2f ms\n", op.load, op.throughput,
                op.latency_s * 1e3);
  }
}

struct NodeArgs {
  std::string config;
  int id = 0;
  std::string peers;
  std::string mode = "tcp";
  std::string scenario;
  std::string out;
  double duration = 0;
  std::string tx_kind = "transfer";
  bool no_verify = false;
  std::size_t workers = 1;
  std::size_t accounts = 1000;
  std::size_t max_pending = 4096;
  std::string genesis;
};

struct SimArgs {
  std::string scenario;
  std::string config;
  std::string bench_mode = "pipelined";
  std::string out;
  double warmup = 0;
};

int run_sim(const SimArgs& a) {
  SimScenario sc = scenario_from_kv(KvFile::load(a.scenario));
  Config base;
  if (!a.config.empty()) apply_config(KvFile::load(a.config), base);
  std::vector<BenchMode> modes;
  if (a.bench_mode == "pipelined" || a.bench_mode == "both") modes.push_back(BenchMode::Pipelined);
  if (a.bench_mode == "sequential" || a.bench_mode == "both") modes.push_back(BenchMode::Sequential);
  std::vector<BenchReport> reports;
  int rc = 0;
  for (auto m : modes) {
    auto res = sim_bench(sc, base, m, secs(a.warmup));
    if (!res.log_problem.empty()) {
      std::cerr << res.report.label << ": " << res.log_problem << "\n";
      rc = 1;
    }
    std::printf("%s: max running epochs %zu, exceptions %llu\n", res.report.label.c_str(), res.max_running,
                static_cast<unsigned long long>(res.exceptions));
    if (!a.out.empty()) write_file(std::filesystem::path(a.out) / ("trace_" + res.report.label + ".csv"), res.trace.to_csv());
    reports.push_back(std::move(res.report));
  }
  print_reports(reports);
  if (!a.out.empty()) {
    std::filesystem::path dir(a.out);
    write_file(dir / "report.csv", reports_to_csv(reports));
    write_file(dir / "series.csv", series_to_csv(reports));
    write_file(dir / "commits.svg", series_svg(reports, "committed transactions per second"));
  }
  return rc;
}

int run_node(const NodeArgs& a) {
  if (a.mode == "sim") {
    if (a.scenario.empty()) throw ConfigError("--mode sim needs --scenario");
    return run_sim(SimArgs{a.scenario, a.config, "pipelined", a.out, 0});
  }
  if (a.mode != "tcp") throw ConfigError("--mode must be tcp or sim");
  if (a.peers.empty()) throw ConfigError("--mode tcp needs --peers");
  NodeOptions o;
  o.peers = parse_endpoints(a.peers);
  if (a.id < 0 || static_cast<std::size_t>(a.id) >= o.peers.size()) throw ConfigError("--id outside the peer list");
  o.cfg = Config::for_cluster(o.peers.size(), static_cast<ReplicaId>(a.id));
  if (!a.config.empty()) apply_config(KvFile::load(a.config), o.cfg);
  o.cfg.replica_id = static_cast<ReplicaId>(a.id);
  o.app = parse_tx_kind(a.tx_kind);
  o.verify = !a.no_verify;
  o.verifier_workers = a.workers;
  o.accounts = a.accounts;
  o.max_pending = a.max_pending;
  if (!a.genesis.empty()) o.genesis_file = a.genesis;
  o.out = a.out;
  o.duration = secs(a.duration);

  // Signals go to a dedicated thread; every other thread inherits the mask.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Node node(std::move(o));
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    node.stop();
  });
  waiter.detach();
  std::fprintf(stderr, "replica %d listening\n", a.id);
  node.run();
  node.write_outputs();
  auto r = node.report();
  std::fprintf(stderr, "replica %d: %zu epochs committed, %llu txs, %.1f tx/s\n", a.id,
               node.replica().committed_log().size(), static_cast<unsigned long long>(r.committed_txs), r.tx_per_s);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dispel: pipelined BFT replication"};
  app.require_subcommand(1);

  NodeArgs na;
  auto* node = app.add_subcommand("node", "run one replica");
  node->add_option("--config", na.config, "key = value config file");
  node->add_option("--id", na.id, "replica id");
  node->add_option("--peers", na.peers, "comma-separated host:port list, one per replica");
  node->add_option("--mode", na.mode, "tcp or sim")->check(CLI::IsMember({"tcp", "sim"}));
  node->add_option("--scenario", na.scenario, "scenario file for --mode sim");
  node->add_option("--out", na.out, "output directory");
  node->add_option("--duration", na.duration, "seconds to run, 0 until signalled");
  node->add_option("--tx-kind", na.tx_kind, "raw or transfer")->check(CLI::IsMember({"raw", "transfer"}));
  node->add_flag("--no-verify", na.no_verify, "skip signature verification");
  node->add_option("--workers", na.workers, "signature verification threads");
  node->add_option("--accounts", na.accounts, "generated genesis accounts");
  node->add_option("--max-pending", na.max_pending, "client transactions held before new ones are rejected");
  node->add_option("--genesis", na.genesis, "genesis file: hex public key = balance");

  LoadgenOptions lo;
  std::string lg_peers, lg_kind = "transfer", lg_out, lg_rates = "1000";
  double lg_duration = 10, lg_drain = 5;
  auto* loadgen = app.add_subcommand("loadgen", "open-loop client load");
  loadgen->add_option("--peers", lg_peers, "replica endpoints")->required();
  loadgen->add_option("--rate", lg_rates, "tx/s, comma-separated for a sweep");
  loadgen->add_option("--duration", lg_duration, "seconds per rate");
  loadgen->add_option("--drain", lg_drain, "seconds to wait for commits after the last submission");
  loadgen->add_option("--tx-kind", lg_kind, "raw or transfer")->check(CLI::IsMember({"raw", "transfer"}));
  loadgen->add_option("--tx-size", lo.tx_size, "raw transaction size");
  loadgen->add_option("--accounts", lo.accounts, "accounts, must match the replicas");
  loadgen->add_option("--out", lg_out, "report CSV");
  loadgen->add_option("--tx-cache", lo.tx_cache, "file of pre-signed transfers, reused across runs");

  SimArgs sa;
  auto* sim = app.add_subcommand("sim", "run a scenario in the simulator");
  sim->add_option("--scenario", sa.scenario, "scenario file")->required();
  sim->add_option("--config", sa.config, "replica config file");
  sim->add_option("--bench-mode", sa.bench_mode, "pipelined, sequential or both")
      ->check(CLI::IsMember({"pipelined", "sequential", "both"}));
  sim->add_option("--warmup", sa.warmup, "seconds left out of the report");
  sim->add_option("--out", sa.out, "output directory");

  std::vector<std::string> report_files;
  std::string report_svg, report_series;
  auto* report = app.add_subcommand("report", "summarize report CSVs");
  report->add_option("files", report_files, "report CSV files")->required();
  report->add_option("--svg", report_svg, "write a commits-per-second chart");
  report->add_option("--series", report_series, "write the per-second series CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*node) return run_node(na);
    if (*sim) return run_sim(sa);
    if (*loadgen) {
      lo.replicas = parse_endpoints(lg_peers);
      lo.kind = parse_tx_kind(lg_kind);
      lo.duration = secs(lg_duration);
      lo.drain = secs(lg_drain);
      std::vector<BenchReport> reports;
      std::stringstream ss(lg_rates);
      for (std::string item; std::getline(ss, item, ',');) {
        lo.rate = std::stod(item);
        reports.push_back(run_loadgen(lo));
        // Later rates reuse the accounts, so nonces continue where the last run stopped.
        auto sent = static_cast<std::uint64_t>(lo.rate * lg_duration);
        lo.first_nonce += (sent + lo.accounts - 1) / lo.accounts;
      }
      print_reports(reports);
      if (!lg_out.empty()) write_file(lg_out, reports_to_csv(reports));
      return 0;
    }
    if (*report) {
      std::vector<BenchReport> all;
      for (const auto& f : report_files) {
        auto rs = reports_from_csv(read_file(f));
        all.insert(all.end(), rs.begin(), rs.end());
      }
      print_reports(all);
      if (!report_svg.empty()) write_file(report_svg, series_svg(all, "committed transactions per second"));
      if (!report_series.empty()) write_file(report_series, series_to_csv(all));
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
