#include "dispel/kvfile.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dispel {

std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

namespace {

// Strips a trailing comment that is not inside quotes.
std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(std::string_view v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

}  // namespace

KvFile KvFile::parse(std::string_view text) {
  KvFile kv;
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    auto raw = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ++line_no;
    auto line = trim(strip_comment(raw));
    if (!line.empty()) {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
      } else {
        auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        auto key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
        kv.entries_.emplace_back(std::move(full), unquote(trim(line.substr(eq + 1))));
      }
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return kv;
}

KvFile KvFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool KvFile::has(std::string_view key) const { return get(key).has_value(); }

std::optional<std::string> KvFile::get(std::string_view key) const {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (it->first == key) return it->second;
  return std::nullopt;
}

std::vector<std::string> KvFile::get_all(std::string_view key) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (k == key) out.push_back(v);
  return out;
}

std::string KvFile::get_string(std::string_view key, std::string fallback) const {
  auto v = get(key);
  return v ? *v : std::move(fallback);
}

std::int64_t KvFile::get_int(std::string_view key, std::int64_t fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc{} || ptr != v->data() + v->size())
    throw ConfigError("key '" + std::string(key) + "' expects an integer, got '" + *v + "'");
  return out;
}

double KvFile::get_double(std::string_view key, double fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    double out = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + std::string(key) + "' expects a number, got '" + *v + "'");
  }
}

bool KvFile::get_bool(std::string_view key, bool fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("key '" + std::string(key) + "' expects a boolean, got '" + *v + "'");
}

void KvFile::set(std::string key, std::string value) { entries_.emplace_back(std::move(key), std::move(value)); }

namespace {

Duration millis(double ms) { return Duration(static_cast<std::int64_t>(std::llround(ms * 1e6))); }

double as_ms(Duration d) { return static_cast<double>(d.count()) / 1e6; }

std::size_t non_negative(const KvFile& kv, std::string_view key, std::size_t fallback) {
  auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ConfigError("key '" + std::string(key) + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

void apply_config(const KvFile& kv, Config& cfg) {
  cfg.n = non_negative(kv, "n", cfg.n);
  cfg.f = kv.has("f") ? non_negative(kv, "f", cfg.f) : default_fault_bound(cfg.n);
  cfg.replica_id = static_cast<ReplicaId>(non_negative(kv, "replica_id", cfg.replica_id));
  if (kv.has("batch_size_bytes")) {
    cfg.batch_size_bytes = non_negative(kv, "batch_size_bytes", cfg.batch_size_bytes);
  } else if (kv.has("decision_budget_bytes") || kv.has("n")) {
    cfg.batch_size_bytes = default_batch_size(
        cfg.n, static_cast<std::uint64_t>(kv.get_int("decision_budget_bytes", kDefaultDecisionBudget)));
  }
  cfg.max_epochs = non_negative(kv, "max_epochs", cfg.max_epochs);
  if (kv.has("memory_budget_mib"))
    cfg.memory_budget_bytes = static_cast<std::uint64_t>(kv.get_double("memory_budget_mib", 0) * 1024 * 1024);
  cfg.memory_budget_bytes = static_cast<std::uint64_t>(
      kv.get_int("memory_budget_bytes", static_cast<std::int64_t>(cfg.memory_budget_bytes)));
  cfg.pool_timeout = millis(kv.get_double("pool_timeout_ms", as_ms(cfg.pool_timeout)));
  cfg.idle_sample_period = millis(kv.get_double("idle_sample_period_ms", as_ms(cfg.idle_sample_period)));
  cfg.idle_sample_count = non_negative(kv, "idle_sample_count", cfg.idle_sample_count);
  cfg.idle_fraction = kv.get_double("idle_fraction", cfg.idle_fraction);
  cfg.link_capacity_bytes_per_s =
      kv.get_double("link_capacity_mib_s", cfg.link_capacity_bytes_per_s / (1024.0 * 1024.0)) * 1024.0 * 1024.0;
  if (kv.has("rtt_estimate_ms")) cfg.set_rtt_estimate(millis(kv.get_double("rtt_estimate_ms", 0)));
  cfg.round_timeout_initial = millis(kv.get_double("round_timeout_initial_ms", as_ms(cfg.round_timeout_initial)));
  cfg.round_timeout_factor = kv.get_double("round_timeout_factor", cfg.round_timeout_factor);
  cfg.batch_request_retry = millis(kv.get_double("batch_request_retry_ms", as_ms(cfg.batch_request_retry)));
  cfg.buffer_limit_per_epoch = non_negative(kv, "buffer_limit_per_epoch", cfg.buffer_limit_per_epoch);
  cfg.retained_epochs = non_negative(kv, "retained_epochs", cfg.retained_epochs);
  cfg.retain_blocks = kv.get_bool("retain_blocks", cfg.retain_blocks);
}

}  // namespace dispel
