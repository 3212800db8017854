#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vo2lgm/dataset.hpp"

namespace vo2lgm::csv {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

/// Shortest text that round-trips the double exactly.
inline std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> to_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long> to_long(const std::string& s) {
  if (s.empty()) return std::nullopt;
  long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

/// A header-indexed table. Lines starting with '#' and blank lines are skipped.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
  std::size_t require(const std::string& name, const std::string& path) const {
    auto c = column(name);
    if (!c) throw DataError(path + ": missing column '" + name + "'");
    return *c;
  }
};

inline Table read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file '" + path + "'");
  Table t;
  std::string line;
  bool have_header = false;
  long row = 0;
  while (std::getline(in, line)) {
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (!have_header) {
      t.header = split(s);
      have_header = true;
      continue;
    }
    ++row;
    auto fields = split(s);
    if (fields.size() != t.header.size())
      throw DataError(path + ": row " + std::to_string(row) + " has " +
                          std::to_string(fields.size()) + " fields, expected " +
                          std::to_string(t.header.size()),
                      row);
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw DataError(path + ": empty file");
  return t;
}

}  // namespace vo2lgm::csv
