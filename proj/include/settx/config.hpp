#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

namespace settx {

/// Configuration problem tied to a key (or to a line, for syntax errors).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Flat `key = value` text with `#` comments.
///
/// Typed getters record which keys were read so that check_consumed() can
/// reject anything the caller did not understand.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::filesystem::path& path);

  bool has(std::string_view key) const;
  void set(const std::string& key, const std::string& value);
  void erase(const std::string& key);

  /// Throws ConfigError naming the key when absent.
  const std::string& require(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;

  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError for the first key never read through a getter.
  void check_consumed() const;

  /// One `key = value` line per entry, keys sorted.
  std::string to_text() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

}  // namespace settx
