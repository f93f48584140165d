#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "dispel/core.hpp"
#include "dispel/sim.hpp"

namespace dispel {

struct LatencySummary {
  std::size_t count = 0;
  double mean_s = 0;
  double p50_s = 0;
  double p99_s = 0;

  bool operator==(const LatencySummary&) const = default;
};

// Nearest-rank percentiles.
LatencySummary summarize_latencies(std::vector<double> seconds);

// One commit observation: when, how many transactions, how many payload bytes.
struct CommitObservation {
  double at_s = 0;
  std::uint64_t txs = 0;
  std::uint64_t bytes = 0;
};

struct BenchReport {
  std::string label;
  // Offered load in tx/s.
  double load = 0;
  double duration_s = 0;
  std::uint64_t submitted = 0;
  std::uint64_t rejected = 0;
  std::uint64_t committed_txs = 0;
  // Transaction payload bytes only.
  std::uint64_t committed_bytes = 0;
  double tx_per_s = 0;
  double mib_per_s = 0;
  LatencySummary latency;
  // Committed transactions in each whole second of the run.
  std::vector<std::uint64_t> per_second;

  bool operator==(const BenchReport&) const = default;
};

// Commits at or after duration_s still count towards the totals but not the series.
BenchReport make_report(std::string label, double load, double duration_s,
                        const std::vector<CommitObservation>& commits, std::vector<double> latencies_s,
                        std::uint64_t submitted = 0, std::uint64_t rejected = 0);

struct OperatingPoint {
  double load = 0;
  double throughput = 0;
  double latency_s = 0;

  bool operator==(const OperatingPoint&) const = default;
};

// Among reports within 90% of the best throughput, the lowest mean latency;
// ties go to the lower load, then the higher throughput. Throws
// std::invalid_argument on an empty list.
OperatingPoint select_operating_point(const std::vector<BenchReport>& reports);

std::string reports_to_csv(const std::vector<BenchReport>& reports);
// Throws DecodeError.
std::vector<BenchReport> reports_from_csv(std::string_view csv);

// second,<label>... one column per report.
std::string series_to_csv(const std::vector<BenchReport>& reports);
// Line chart of the per-second series.
std::string series_svg(const std::vector<BenchReport>& reports, std::string_view title);

enum class BenchMode { Pipelined, Sequential };

struct SimBenchResult {
  BenchReport report;
  EventTrace trace;
  std::size_t max_running = 0;
  std::uint64_t exceptions = 0;
  // Empty when the correct replicas agree and have contiguous logs.
  std::string log_problem;
  // Lowest-id replica that stayed correct; its commits feed the report.
  ReplicaId observer = 0;
  std::vector<CommitSample> observer_commits;
};

// Runs the scenario to its horizon. Sequential mode sets max_epochs = 1.
// Commits before `warmup` are left out of the report.
SimBenchResult sim_bench(const SimScenario& scenario, Config base, BenchMode mode, Duration warmup = Duration::zero());

}  // namespace dispel
