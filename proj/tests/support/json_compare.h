#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

// Walks `expected` and collects every path where `actual` differs: numbers
// beyond `tol` absolute, anything else by value. Keys only in `actual` are
// allowed, so reports may carry extra metadata.
inline void json_diff(const nlohmann::json& expected, const nlohmann::json& actual,
                      double tol, const std::string& path, std::vector<std::string>& out) {
  if (expected.is_number() && actual.is_number()) {
    const double e = expected.get<double>();
    const double a = actual.get<double>();
    if (!(std::abs(e - a) <= tol)) out.push_back(path + ": " + expected.dump() + " vs " + actual.dump());
    return;
  }
  if (expected.is_object() && actual.is_object()) {
    for (const auto& [k, v] : expected.items()) {
      if (!actual.contains(k)) {
        out.push_back(path + "/" + k + ": missing");
        continue;
      }
      json_diff(v, actual.at(k), tol, path + "/" + k, out);
    }
    return;
  }
  if (expected.is_array() && actual.is_array()) {
    if (expected.size() != actual.size()) {
      out.push_back(path + ": length " + std::to_string(expected.size()) + " vs " +
                    std::to_string(actual.size()));
      return;
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      json_diff(expected[i], actual[i], tol, path + "/" + std::to_string(i), out);
    }
    return;
  }
  if (expected != actual) out.push_back(path + ": " + expected.dump() + " vs " + actual.dump());
}

inline std::vector<std::string> json_diff(const nlohmann::json& expected,
                                          const nlohmann::json& actual, double tol) {
  std::vector<std::string> out;
  json_diff(expected, actual, tol, "", out);
  return out;
}
