#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/errors.hpp"

namespace cascade {

/// Flat `key = value` settings. Lines starting with '#' are comments. Later
/// assignments win, so a config file can be overlaid by command-line values.
class Settings {
 public:
  Settings() = default;
  explicit Settings(std::map<std::string, std::string> defaults) : values_(std::move(defaults)) {}

  static Settings parse(const std::string& text, const std::string& origin = "config") {
    Settings s;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
      }
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": empty key");
      s.values_[key] = trim(t.substr(eq + 1));
    }
    return s;
  }

  static Settings load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Applies `other` on top of this; keys must already be known.
  void overlay(const Settings& other, const std::string& origin) {
    for (const auto& [k, v] : other.values_) {
      if (!values_.contains(k)) throw ConfigError(origin + ": unknown setting '" + k + "'");
      values_[k] = v;
    }
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.contains(key); }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing setting '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
    return out;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const { return parse_real(str(key), key); }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& item : split(str(key))) out.push_back(parse_real(item, key));
    return out;
  }

  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const std::string& item : split(str(key))) {
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size()) {
        throw ConfigError("setting '" + key + "' expects integers, got '" + item + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  static std::vector<std::string> split(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static double parse_real(const std::string& v, const std::string& key) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
  }

  std::map<std::string, std::string> values_;
};

}  // namespace cascade
