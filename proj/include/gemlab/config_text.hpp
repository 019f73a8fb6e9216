#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace gemlab {

/// key=value text block. Canonical form is the keys in sorted order, one
/// `key=value` per line, with surrounding whitespace trimmed.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::string& path);

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, std::size_t value) { values_[key] = std::to_string(value); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  std::string canonical() const;
  std::string hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// 64-bit FNV-1a digest.
std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t v);

/// Round-trip decimal formatting of a double (shortest representation).
std::string format_double(double v);
double parse_double(std::string_view s);
long long parse_int(std::string_view s);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

/// Deterministic named sub-stream of a master seed ("data", "init", "shuffle").
std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name);

}  // namespace gemlab
