#pragma once

#include "cvtrace/toy.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace cvtrace {

// Flat "key = value" text; '#' starts a comment, blank lines are ignored.
class KeyValueConfig {
public:
  KeyValueConfig() = default;
  static KeyValueConfig parse(std::string const& text);
  static KeyValueConfig load(std::filesystem::path const& path);

  bool has(std::string const& key) const { return values_.count(key) != 0; }
  std::optional<std::string> find(std::string const& key) const;

  std::string get_string(std::string const& key, std::string const& fallback) const;
  std::size_t get_size(std::string const& key, std::size_t fallback) const;
  std::uint64_t get_u64(std::string const& key, std::uint64_t fallback) const;
  double get_double(std::string const& key, double fallback) const;
  bool get_bool(std::string const& key, bool fallback) const;

  // Throws InputError naming the key when it is absent.
  std::string require(std::string const& key) const;

  void set(std::string const& key, std::string const& value) { values_[key] = value; }
  std::map<std::string, std::string> const& values() const { return values_; }

  // Canonical text: sorted "key = value" lines.
  std::string to_text() const;

private:
  std::map<std::string, std::string> values_;
};

ToyConfig toy_config_from(KeyValueConfig const& kv);
void write_toy_config(ToyConfig const& config, KeyValueConfig& kv);

// FNV-1a 64-bit hash, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view data);

} // namespace cvtrace
