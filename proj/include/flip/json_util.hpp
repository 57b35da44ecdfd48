#pragma once

// Strict reading of JSON objects: every key must be known, every value must
// have the expected type, and all problems are reported together with their
// dotted field path.

#include "flip/errors.hpp"

#include <json.hpp>

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace flip {

class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(where("") + "expected an object");
  }

  /// Reads `key` into `out` when present; leaves the default otherwise.
  template <typename T>
  void optional(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(where(key) + "expected " + type_name<T>() + ", got " + j_.at(key).dump());
    }
  }

  template <typename T>
  void required(const std::string& key, T& out) {
    if (j_.is_object() && !j_.contains(key)) {
      seen_.insert(key);
      errors_.push_back(where(key) + "missing required field");
      return;
    }
    optional(key, out);
  }

  /// Sub-object reader; absent keys yield an empty object.
  JsonReader child(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    const nlohmann::json& sub = j_.is_object() && j_.contains(key) ? j_.at(key) : empty;
    return JsonReader(sub, path_.empty() ? key : path_ + "." + key, errors_);
  }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }
  const nlohmann::json& raw() const { return j_; }

  /// Flags keys never asked for.
  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) errors_.push_back(where(key) + "unknown field");
    }
  }

  std::string where(const std::string& key) const {
    std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return (p.empty() ? std::string("config") : p) + ": ";
  }

  void error(const std::string& key, const std::string& msg) { errors_.push_back(where(key) + msg); }

 private:
  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "a value of the documented type";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

/// Throws one ConfigError listing every collected problem.
inline void throw_if_errors(const std::vector<std::string>& errors, const std::string& what) {
  if (errors.empty()) return;
  std::string msg = "invalid " + what + ":";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

/// 64-bit FNV-1a of the canonical (sorted-key, compact) dump, as hex.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

}  // namespace flip
