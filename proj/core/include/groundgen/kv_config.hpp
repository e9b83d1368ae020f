#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace groundgen {

// Plain-text key-value configuration:
//
//   # comment
//   d_model = 64
//   grounding_mode = doha
//
// Keys keep their raw string values so a resolved config can be persisted
// exactly as written.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  // Later values win.
  void merge(const KeyValueConfig& other);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) const;

  // Fails with ConfigError naming the first key not in `known`.
  void require_known(const std::vector<std::string>& known, const std::string& what) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
};

std::int64_t parse_int(const std::string& key, const std::string& text);
double parse_double(const std::string& key, const std::string& text);

}  // namespace groundgen
