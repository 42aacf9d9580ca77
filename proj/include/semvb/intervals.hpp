#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semvb/common.hpp"

namespace semvb {

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule): h = (n - 1) q, result x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("quantile level must lie in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::span<const double> values, double q) {
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, q);
}

struct IntervalReport {
  std::string parameter;
  std::string method;  // mfvb | percentile | pivotal | jackknife | mcmc
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double alpha = 0.05;
  std::size_t count = 0;  // B for bootstrap, n for jackknife, draws for mcmc

  /// Method plus replicate count for bootstrap methods, e.g. "percentile-B100".
  [[nodiscard]] std::string label() const {
    if (method == "percentile" || method == "pivotal") return method + "-B" + std::to_string(count);
    return method;
  }
  [[nodiscard]] bool covers(double truth) const { return lower <= truth && truth <= upper; }
};

using IntervalSet = std::vector<IntervalReport>;

inline const IntervalReport& find_interval(const IntervalSet& set, std::string_view parameter) {
  for (const auto& r : set)
    if (r.parameter == parameter) return r;
  throw ValidationError("no interval for parameter '" + std::string(parameter) + "'");
}

inline void write_intervals_csv(std::ostream& out, const IntervalSet& set) {
  out << "parameter,method,point,lower,upper,alpha,count\n";
  for (const auto& r : set)
    out << r.parameter << ',' << r.method << ',' << format_double(r.point) << ',' << format_double(r.lower) << ','
        << format_double(r.upper) << ',' << format_double(r.alpha) << ',' << r.count << '\n';
}

inline nlohmann::json to_json(const IntervalReport& r) {
  return {{"parameter", r.parameter}, {"method", r.method}, {"point", r.point}, {"lower", r.lower},
          {"upper", r.upper},         {"alpha", r.alpha},   {"count", r.count}};
}

inline nlohmann::json to_json(const IntervalSet& set) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : set) a.push_back(to_json(r));
  return a;
}

inline IntervalSet interval_set_from_json(const nlohmann::json& j) {
  IntervalSet out;
  try {
    for (const auto& e : j) {
      IntervalReport r;
      r.parameter = e.at("parameter").get<std::string>();
      r.method = e.at("method").get<std::string>();
      r.point = e.at("point").get<double>();
      r.lower = e.at("lower").get<double>();
      r.upper = e.at("upper").get<double>();
      r.alpha = e.at("alpha").get<double>();
      r.count = e.at("count").get<std::size_t>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("interval set: ") + e.what());
  }
  return out;
}

inline void validate_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1), got " + format_double(alpha));
}

}  // namespace semvb
