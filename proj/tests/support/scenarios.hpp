#pragma once

// Simulator scenarios and configurations shared by tests and acceptance runs.

#include <chrono>
#include <cmath>
#include <random>

#include "dispel/sim.hpp"

namespace dispel::check {

inline Duration seconds_f(double s) { return Duration(static_cast<std::int64_t>(std::ceil(s * 1e9))); }

// Small batches for fast runs.
inline Config small_base(const SimScenario& sc) {
  auto cfg = Config::for_cluster(sc.n, 0);
  cfg.batch_size_bytes = 20'000;
  cfg.set_rtt_estimate(2 * sc.latency);
  cfg.link_capacity_bytes_per_s = sc.bandwidth_bytes_per_s * static_cast<double>(sc.n - 1);
  return cfg;
}

// Default decision budget scaled from 600 MiB/s links down to the scenario's bandwidth.
inline Config desk_config(const SimScenario& sc) {
  auto cfg = Config::for_cluster(sc.n, 0);
  auto budget = static_cast<std::uint64_t>(static_cast<double>(kDefaultDecisionBudget) * sc.bandwidth_bytes_per_s /
                                           (600.0 * 1024 * 1024));
  cfg.batch_size_bytes = default_batch_size(sc.n, budget);
  Duration worst = sc.latency;
  for (const auto& row : sc.latency_matrix)
    for (auto d : row) worst = std::max(worst, d);
  cfg.set_rtt_estimate(2 * worst);
  cfg.link_capacity_bytes_per_s = sc.bandwidth_bytes_per_s * static_cast<double>(sc.n - 1);
  return cfg;
}

inline SimScenario random_scenario(std::mt19937_64& rng) {
  SimScenario sc;
  sc.n = rng() % 2 ? 4 : 7;
  sc.seed = rng();
  sc.latency = std::chrono::milliseconds(1 + rng() % 40);
  sc.jitter = std::chrono::milliseconds(rng() % 5);
  sc.bandwidth_bytes_per_s = (1 + rng() % 8) * 1024.0 * 1024.0;
  sc.loss_rate = (rng() % 3 == 0) ? 0.01 * static_cast<double>(rng() % 5) : 0.0;
  sc.horizon = 2s;
  sc.load.saturate = rng() % 2 == 0;
  sc.load.rate_tx_per_s = 2000;
  sc.load.tx_size = 100 + rng() % 300;
  sc.trace_deliveries = true;
  auto victim = static_cast<ReplicaId>(rng() % sc.n);
  switch (rng() % 4) {
    case 0: sc.faults.push_back({seconds_f(0.5), FaultSpec::crash(victim)}); break;
    case 1: sc.faults.push_back({Time{}, FaultSpec::byzantine(victim, static_cast<ByzBehavior>(rng() % 4))}); break;
    case 2: sc.faults.push_back({seconds_f(0.3), FaultSpec::partition({0}, {1, 2}, 400ms)}); break;
    default: break;
  }
  return sc;
}

}  // namespace dispel::check
