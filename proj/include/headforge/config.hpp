// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "headforge/error.hpp"

namespace headforge {

/// Scalar or numeric-array config value. Nested arrays are flattened.
using ConfigValue = std::variant<bool, double, std::string, std::vector<double>>;

/// Flat "section.key" -> value map read from a TOML subset: [section] and
/// [section.sub] headers, `key = value` lines, # comments, basic strings,
/// numbers, booleans, and numeric arrays (which may span lines).
class ConfigTable {
 public:
  static ConfigTable parse(std::istream& in) {
    ConfigTable t;
    std::string section, line, pending;
    int line_no = 0, start_line = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = strip_comment(line);
      if (!pending.empty()) {
        pending += ' ' + line;
        if (bracket_depth(pending) > 0) continue;
        t.assign(section, pending, start_line);
        pending.clear();
        continue;
      }
      const auto s = trim(line);
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']' || s.size() < 3) throw ParseError("malformed section header", line_no);
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      if (bracket_depth(s) > 0) {
        pending = s;
        start_line = line_no;
        continue;
      }
      t.assign(section, s, line_no);
    }
    if (!pending.empty()) throw ParseError("unterminated array", start_line);
    return t;
  }

  static ConfigTable parse(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  static ConfigTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    try {
      return parse(in);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, ConfigValue>& values() const { return values_; }
  void set(const std::string& key, ConfigValue v) { values_[key] = std::move(v); }

  template <class T>
  T get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    if (const T* v = std::get_if<T>(&it->second)) return *v;
    throw ConfigError("config key '" + key + "' has the wrong type");
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static int bracket_depth(const std::string& s) {
    int depth = 0;
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
      if (quoted) continue;
      if (s[i] == '[') ++depth;
      if (s[i] == ']') --depth;
    }
    const auto eq = s.find('=');
    return eq == std::string::npos ? 0 : depth;
  }

  void assign(const std::string& section, const std::string& s, int line_no) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    std::string key = trim(s.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
    if (key.empty()) throw ParseError("empty key", line_no);
    const std::string full = section.empty() ? key : section + "." + key;
    if (values_.count(full)) throw ParseError("duplicate key '" + full + "'", line_no);
    values_[full] = parse_value(trim(s.substr(eq + 1)), line_no);
  }

  static double parse_number(std::string tok, int line_no) {
    std::string clean;
    for (char c : tok)
      if (c != '_') clean += c;
    if (!clean.empty() && clean.front() == '+') clean.erase(0, 1);
    double v = 0;
    const auto* end = clean.data() + clean.size();
    const auto [ptr, ec] = std::from_chars(clean.data(), end, v);
    if (clean.empty() || ec != std::errc() || ptr != end) throw ParseError("invalid value '" + tok + "'", line_no);
    return v;
  }

  static ConfigValue parse_value(const std::string& v, int line_no) {
    if (v.empty()) throw ParseError("missing value", line_no);
    if (v == "true") return true;
    if (v == "false") return false;
    if (v.front() == '"') {
      if (v.size() < 2 || v.back() != '"') throw ParseError("unterminated string", line_no);
      std::string out;
      for (std::size_t i = 1; i + 1 < v.size(); ++i) {
        if (v[i] == '\\' && i + 2 < v.size()) {
          const char e = v[++i];
          out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
        } else {
          out += v[i];
        }
      }
      return out;
    }
    if (v.front() == '[') {
      std::vector<double> out;
      std::string tok;
      for (char c : v) {
        if (c == '[' || c == ']' || c == ',' || std::isspace(static_cast<unsigned char>(c))) {
          if (!tok.empty()) out.push_back(parse_number(tok, line_no));
          tok.clear();
        } else {
          tok += c;
        }
      }
      return out;
    }
    return parse_number(v, line_no);
  }

  std::map<std::string, ConfigValue> values_;
};

}  // namespace headforge
