#pragma once

// Flat `key = value` documents. Blank lines and lines starting with '#' are
// ignored; whitespace around keys and values is trimmed.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace cadlab {

class KeyValueDoc {
 public:
  KeyValueDoc() = default;

  static KeyValueDoc parse(std::string_view text);
  static KeyValueDoc load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value);

  std::string get_string(const std::string& key, std::string fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ValidationError naming the first key not in `allowed`.
  void require_known(const std::set<std::string>& allowed) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Canonical text form: sorted `key=value` lines.
  std::string canonical() const;

 private:
  std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fingerprint(std::string_view text);

std::vector<std::int64_t> parse_int_list(std::string_view csv);

}  // namespace cadlab
