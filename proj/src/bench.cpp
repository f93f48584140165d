#include "dispel/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dispel/kvfile.hpp"

namespace dispel {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string clean_label(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = '_';
  return s;
}

double parse_double(std::string_view s) {
  std::string tmp(s);
  char* end = nullptr;
  double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) throw DecodeError("bad number: " + tmp);
  return v;
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw DecodeError("bad integer: " + std::string(s));
  return v;
}

constexpr std::string_view kReportHeader =
    "label,load,duration_s,submitted,rejected,committed_txs,committed_bytes,tx_per_s,mib_per_s,"
    "latency_count,latency_mean_s,latency_p50_s,latency_p99_s,per_second";

}  // namespace

LatencySummary summarize_latencies(std::vector<double> seconds) {
  LatencySummary s;
  s.count = seconds.size();
  if (seconds.empty()) return s;
  std::sort(seconds.begin(), seconds.end());
  s.mean_s = std::accumulate(seconds.begin(), seconds.end(), 0.0) / static_cast<double>(seconds.size());
  auto rank = [&](double p) {
    auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(seconds.size())));
    return seconds[std::clamp<std::size_t>(k, 1, seconds.size()) - 1];
  };
  s.p50_s = rank(0.50);
  s.p99_s = rank(0.99);
  return s;
}

BenchReport make_report(std::string label, double load, double duration_s,
                        const std::vector<CommitObservation>& commits, std::vector<double> latencies_s,
                        std::uint64_t submitted, std::uint64_t rejected) {
  BenchReport r;
  r.label = std::move(label);
  r.load = load;
  r.duration_s = duration_s;
  r.submitted = submitted;
  r.rejected = rejected;
  auto seconds = static_cast<std::size_t>(std::max(0.0, std::ceil(duration_s)));
  r.per_second.assign(seconds, 0);
  for (const auto& c : commits) {
    r.committed_txs += c.txs;
    r.committed_bytes += c.bytes;
    if (c.at_s >= 0 && c.at_s < duration_s) {
      auto b = static_cast<std::size_t>(c.at_s);
      if (b < r.per_second.size()) r.per_second[b] += c.txs;
    }
  }
  if (duration_s > 0) {
    r.tx_per_s = static_cast<double>(r.committed_txs) / duration_s;
    r.mib_per_s = static_cast<double>(r.committed_bytes) / (1024.0 * 1024.0) / duration_s;
  }
  r.latency = summarize_latencies(std::move(latencies_s));
  return r;
}

OperatingPoint select_operating_point(const std::vector<BenchReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("no reports to choose from");
  double best = 0;
  for (const auto& r : reports) best = std::max(best, r.tx_per_s);
  const BenchReport* pick = nullptr;
  auto better = [](const BenchReport& a, const BenchReport& b) {
    if (a.latency.mean_s != b.latency.mean_s) return a.latency.mean_s < b.latency.mean_s;
    if (a.load != b.load) return a.load < b.load;
    return a.tx_per_s > b.tx_per_s;
  };
  for (const auto& r : reports) {
    if (r.tx_per_s < 0.9 * best) continue;
    if (!pick || better(r, *pick)) pick = &r;
  }
  return OperatingPoint{pick->load, pick->tx_per_s, pick->latency.mean_s};
}

std::string reports_to_csv(const std::vector<BenchReport>& reports) {
  std::ostringstream out;
  out << kReportHeader << '\n';
  for (const auto& r : reports) {
    out << clean_label(r.label) << ',' << num(r.load) << ',' << num(r.duration_s) << ',' << r.submitted << ','
        << r.rejected << ',' << r.committed_txs << ',' << r.committed_bytes << ',' << num(r.tx_per_s) << ','
        << num(r.mib_per_s) << ',' << r.latency.count << ',' << num(r.latency.mean_s) << ','
        << num(r.latency.p50_s) << ',' << num(r.latency.p99_s) << ',';
    for (std::size_t i = 0; i < r.per_second.size(); ++i) out << (i ? ";" : "") << r.per_second[i];
    out << '\n';
  }
  return out.str();
}

std::vector<BenchReport> reports_from_csv(std::string_view csv) {
  std::vector<BenchReport> out;
  bool header = true;
  for (auto line : split(csv, '\n')) {
        if (line.empty()) continue;
    if (header) {
      if (line != kReportHeader) throw DecodeError("unexpected report header");
      header = false;
      continue;
    }
    auto f = split(line, ',');
    if (f.size() != 14) throw DecodeError("report row needs 14 fields");
    BenchReport r;
    r.label = std::string(f[0]);
    r.load = parse_double(f[1]);
    r.duration_s = parse_double(f[2]);
    r.submitted = parse_u64(f[3]);
    r.rejected = parse_u64(f[4]);
    r.committed_txs = parse_u64(f[5]);
    r.committed_bytes = parse_u64(f[6]);
    r.tx_per_s = parse_double(f[7]);
    r.mib_per_s = parse_double(f[8]);
    r.latency.count = parse_u64(f[9]);
    r.latency.mean_s = parse_double(f[10]);
    r.latency.p50_s = parse_double(f[11]);
    r.latency.p99_s = parse_double(f[12]);
    if (!f[13].empty())
      for (auto v : split(f[13], ';')) r.per_second.push_back(parse_u64(v));
    out.push_back(std::move(r));
  }
  if (header) throw DecodeError("empty report file");
  return out;
}

std::string series_to_csv(const std::vector<BenchReport>& reports) {
  std::ostringstream out;
  out << "second";
  std::size_t len = 0;
  for (const auto& r : reports) {
    out << ',' << clean_label(r.label);
    len = std::max(len, r.per_second.size());
  }
  out << '\n';
  for (std::size_t s = 0; s < len; ++s) {
    out << s;
    for (const auto& r : reports) {
      out << ',';
      if (s < r.per_second.size()) out << r.per_second[s];
    }
    out << '\n';
  }
  return out.str();
}

std::string series_svg(const std::vector<BenchReport>& reports, std::string_view title) {
  constexpr double W = 800, H = 400, L = 70, R = 20, T = 40, B = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::size_t len = 1;
  std::uint64_t peak = 1;
  for (const auto& r : reports) {
    len = std::max(len, r.per_second.size());
    for (auto v : r.per_second) peak = std::max(peak, v);
  }
  auto x = [&](double s) { return L + (W - L - R) * s / static_cast<double>(std::max<std::size_t>(len - 1, 1)); };
  auto y = [&](double v) { return H - B - (H - T - B) * v / static_cast<double>(peak); };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">time (s)</text>\n";
  out << "<text x=\"14\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << H / 2
      << ")\" text-anchor=\"middle\">committed tx/s</text>\n";
  for (int i = 0; i <= 4; ++i) {
    double v = static_cast<double>(peak) * i / 4;
    out << "<text x=\"" << L - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
        << static_cast<std::uint64_t>(v) << "</text>\n";
  }
  for (std::size_t s = 0; s < len; s += std::max<std::size_t>(1, len / 10)) {
    out << "<text x=\"" << x(static_cast<double>(s)) << "\" y=\"" << H - B + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << s << "</text>\n";
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const char* c = colors[i % std::size(colors)];
    out << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t s = 0; s < reports[i].per_second.size(); ++s)
      out << x(static_cast<double>(s)) << ',' << y(static_cast<double>(reports[i].per_second[s])) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (i + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
        << c << "\">" << clean_label(reports[i].label) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

SimBenchResult sim_bench(const SimScenario& scenario, Config base, BenchMode mode, Duration warmup) {
  if (mode == BenchMode::Sequential) base.max_epochs = 1;
  SimCluster cluster(scenario, base);
  cluster.run();

  SimBenchResult res;
  res.max_running = cluster.max_running();
  res.exceptions = cluster.exceptions();
  res.log_problem = cluster.check_agreement();
  if (res.log_problem.empty()) res.log_problem = cluster.check_contiguity();

  ReplicaId obs = 0;
  while (obs + 1u < cluster.size() && !cluster.correct(obs)) ++obs;
  res.observer = obs;
  res.observer_commits = cluster.commits(obs);

  double w = std::chrono::duration<double>(warmup).count();
  double horizon = std::chrono::duration<double>(scenario.horizon).count();
  std::vector<CommitObservation> commits;
  for (const auto& c : res.observer_commits) {
    double at = std::chrono::duration<double>(c.at).count();
    if (at < w) continue;
    commits.push_back({at - w, c.txs, c.bytes});
  }
  std::vector<double> lat;
  std::uint64_t submitted = 0;
  for (ReplicaId i = 0; i < cluster.size(); ++i) {
    if (!cluster.correct(i)) continue;
    lat.insert(lat.end(), cluster.latencies(i).begin(), cluster.latencies(i).end());
    submitted += cluster.submitted(i);
  }
  auto targets = scenario.load.targets.empty() ? scenario.n : scenario.load.targets.size();
  double load = scenario.load.saturate ? 0 : scenario.load.rate_tx_per_s * static_cast<double>(targets);
  res.report = make_report(mode == BenchMode::Pipelined ? "pipelined" : "sequential", load, horizon - w, commits,
                           std::move(lat), submitted);
  res.trace = cluster.sim().trace();
  return res;
}

}  // namespace dispel
