#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "vintk/error.hpp"

namespace vintk {

/// Plain `key = value` text with optional `[section]` headers; `#` starts a
/// comment. Keys are stored flattened as "section.key".
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text, const std::string& origin = "<config>") {
    KeyValueConfig cfg;
    std::string section;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
      if (line.front() == '[') {
        if (line.back() != ']') throw ParseError(where() + "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ParseError(where() + "empty section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(where() + "expected 'key = value'");
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError(where() + "missing key");
      const auto full = section.empty() ? key : section + "." + key;
      if (cfg.values_.count(full)) throw ParseError(where() + "duplicate key '" + full + "'");
      cfg.values_[full] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string get(const std::string& key, const char* fallback) const {
    return get(key, std::string(fallback));
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return convert<T>(key, it->second);
  }

  /// Fails on keys outside `known`, so typos do not pass silently.
  void check_keys(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw ParseError("unknown config key '" + k + "'");
  }

  template <class T>
  static T convert(const std::string& key, const std::string& s) {
    if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw ParseError("config key '" + key + "': expected true/false, got '" + s + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (s == "inf" || s == "infinity") return std::numeric_limits<T>::infinity();
      std::size_t used = 0;
      T v{};
      try {
        v = static_cast<T>(std::stod(s, &used));
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty())
        throw ParseError("config key '" + key + "': expected a number, got '" + s + "'");
      return v;
    } else {
      T v{};
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size())
        throw ParseError("config key '" + key + "': expected an integer, got '" + s + "'");
      return v;
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Comma-separated list; empty items are rejected.
inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = KeyValueConfig::trim(item);
    if (item.empty()) throw ParseError("empty item in list '" + s + "'");
    out.push_back(item);
  }
  return out;
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never see a partial file.
inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + tmp.string() + "'");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

}  // namespace vintk
