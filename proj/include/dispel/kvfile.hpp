#pragma once

// Minimal TOML-style `key = value` files: one pair per line, `#` comments,
// optional `[section]` headers that prefix keys as `section.key`, quoted
// strings, repeated keys kept in order.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dispel/core.hpp"

namespace dispel {

class KvFile {
 public:
  static KvFile parse(std::string_view text);
  static KvFile load(const std::filesystem::path& path);

  bool has(std::string_view key) const;
  // Last value wins for single-valued lookups.
  std::optional<std::string> get(std::string_view key) const;
  std::vector<std::string> get_all(std::string_view key) const;

  std::string get_string(std::string_view key, std::string fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;

  void set(std::string key, std::string value);

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Applies every recognised key; unknown keys are ignored.
// Durations are `<name>_ms` keys holding milliseconds (fractions allowed).
void apply_config(const KvFile& kv, Config& cfg);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace dispel
