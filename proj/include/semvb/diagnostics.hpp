#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "semvb/common.hpp"
#include "semvb/intervals.hpp"

namespace semvb {

/// Density tabulated on a strictly increasing grid.
struct DensityGrid {
  std::vector<double> x;
  std::vector<double> f;

  DensityGrid() = default;
  DensityGrid(std::vector<double> x_, std::vector<double> f_) : x(std::move(x_)), f(std::move(f_)) {
    if (x.empty() || x.size() != f.size()) throw ValidationError("density grid: x and f must be non-empty and equal length");
    for (std::size_t i = 1; i < x.size(); ++i)
      if (!(x[i] > x[i - 1])) throw ValidationError("density grid: x must be strictly increasing");
    for (double v : f)
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("density grid: densities must be finite and non-negative");
  }

  [[nodiscard]] double mass() const {
    double m = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) m += 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
    return m;
  }

  /// Linear interpolation, zero outside [x.front(), x.back()].
  [[nodiscard]] double at(double t) const {
    if (t < x.front() || t > x.back()) return 0.0;
    const auto it = std::lower_bound(x.begin(), x.end(), t);
    const auto i = static_cast<std::size_t>(it - x.begin());
    if (x[i] == t) return f[i];
    const double w = (t - x[i - 1]) / (x[i] - x[i - 1]);
    return f[i - 1] + w * (f[i] - f[i - 1]);
  }
};

inline void write_density_csv(std::ostream& out, const DensityGrid& g) {
  out << "x,f\n";
  for (std::size_t i = 0; i < g.x.size(); ++i) out << format_double(g.x[i]) << ',' << format_double(g.f[i]) << '\n';
}

inline std::vector<double> linspace(double lo, double hi, std::size_t count) {
  if (count == 0) return {};
  if (count == 1) return {lo};
  std::vector<double> out(count);
  const double step = (hi - lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) out[i] = lo + step * static_cast<double>(i);
  out.back() = hi;
  return out;
}

/// 0.9 min(sd, IQR / 1.34) n^{-1/5}; falls back to the sd when the IQR is 0.
inline double silverman_bandwidth(std::span<const double> samples) {
  const auto n = samples.size();
  if (n < 2) throw ValidationError("bandwidth needs at least 2 samples");
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) throw ValidationError("kernel density estimate needs samples with non-zero spread");
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

/// Gaussian kernel estimate evaluated at arbitrary points. Kernels further
/// than 8 bandwidths away are skipped (their contribution is below 1e-14).
inline std::vector<double> kde_evaluate(std::span<const double> samples, double h, std::span<const double> at) {
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double norm = 1.0 / (static_cast<double>(sorted.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out(at.size(), 0.0);
  for (std::size_t g = 0; g < at.size(); ++g) {
    const double t = at[g];
    auto lo = std::lower_bound(sorted.begin(), sorted.end(), t - 8.0 * h);
    auto hi = std::upper_bound(sorted.begin(), sorted.end(), t + 8.0 * h);
    double s = 0.0;
    for (auto it = lo; it != hi; ++it) {
      const double z = (t - *it) / h;
      s += std::exp(-0.5 * z * z);
    }
    out[g] = s * norm;
  }
  return out;
}

/// Gaussian KDE with Silverman's bandwidth on `grid_size` points spanning
/// [min - pad h, max + pad h].
inline DensityGrid kde(std::span<const double> samples, std::size_t grid_size = 1024, double pad = 3.0) {
  if (samples.size() < 10) throw ValidationError("kernel density estimate needs at least 10 samples");
  if (grid_size < 2) throw ValidationError("kernel density grid needs at least 2 points");
  const double h = silverman_bandwidth(samples);
  const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
  auto x = linspace(*mn - pad * h, *mx + pad * h, grid_size);
  auto f = kde_evaluate(samples, h, x);
  return DensityGrid(std::move(x), std::move(f));
}

namespace detail {

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& f) {
  double m = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) m += 0.5 * (f[i] + f[i - 1]) * (x[i] - x[i - 1]);
  return m;
}

}  // namespace detail

/// 100 (1 - L1 / 2) between two densities. Both are interpolated onto the
/// union of their grids and renormalized there, so the result lies in
/// [0, 100] and is symmetric in its arguments.
inline double accuracy(const DensityGrid& q, const DensityGrid& p) {
  std::vector<double> x;
  x.reserve(q.x.size() + p.x.size());
  std::merge(q.x.begin(), q.x.end(), p.x.begin(), p.x.end(), std::back_inserter(x));
  x.erase(std::unique(x.begin(), x.end()), x.end());
  if (x.size() < 2) throw ValidationError("accuracy needs grids spanning an interval");
  std::vector<double> fq(x.size()), fp(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fq[i] = q.at(x[i]);
    fp[i] = p.at(x[i]);
  }
  const double mq = detail::trapezoid(x, fq);
  const double mp = detail::trapezoid(x, fp);
  if (!(mq > 0.0) || !(mp > 0.0)) throw ValidationError("accuracy: a density has zero mass");
  std::vector<double> diff(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) diff[i] = std::abs(fq[i] / mq - fp[i] / mp);
  return 100.0 * (1.0 - 0.5 * detail::trapezoid(x, diff));
}

/// Densities of a callable on a grid.
template <class Density>
DensityGrid tabulate(Density&& density, std::vector<double> x) {
  std::vector<double> f;
  f.reserve(x.size());
  for (double t : x) f.push_back(density(t));
  return DensityGrid(std::move(x), std::move(f));
}

struct CoverageCell {
  std::string method;  // label, e.g. "mfvb" or "percentile-B100"
  std::string parameter;
  std::size_t covered = 0;
  std::size_t total = 0;

  [[nodiscard]] double coverage() const { return total ? static_cast<double>(covered) / static_cast<double>(total) : 0.0; }
  /// Binomial standard error sqrt{c (1 - c) / R}.
  [[nodiscard]] double standard_error() const {
    const double c = coverage();
    return total ? std::sqrt(c * (1.0 - c) / static_cast<double>(total)) : 0.0;
  }
};

struct CoverageTable {
  std::vector<std::string> methods;     // row order
  std::vector<std::string> parameters;  // column order
  std::vector<CoverageCell> cells;      // method-major

  [[nodiscard]] const CoverageCell& cell(std::string_view method, std::string_view parameter) const {
    for (const auto& c : cells)
      if (c.method == method && c.parameter == parameter) return c;
    throw ValidationError("coverage table has no cell (" + std::string(method) + ", " + std::string(parameter) + ")");
  }

  /// Mean coverage of a method across parameters.
  [[nodiscard]] double average(std::string_view method) const {
    double s = 0.0;
    std::size_t k = 0;
    for (const auto& c : cells)
      if (c.method == method) {
        s += c.coverage();
        ++k;
      }
    if (k == 0) throw ValidationError("coverage table has no method '" + std::string(method) + "'");
    return s / static_cast<double>(k);
  }
};

struct CoverageRun {
  IntervalSet intervals;  // any mix of methods
  ParameterMap truth;
};

/// Fraction of runs with lower <= truth <= upper, per (method label,
/// parameter). Every run must report the same (method, parameter) pairs.
inline CoverageTable coverage_table(const std::vector<CoverageRun>& runs) {
  if (runs.empty()) throw ValidationError("coverage table needs at least one run");
  CoverageTable t;
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : runs.front().intervals) {
    keys.emplace_back(r.label(), r.parameter);
    if (std::find(t.methods.begin(), t.methods.end(), r.label()) == t.methods.end()) t.methods.push_back(r.label());
    if (std::find(t.parameters.begin(), t.parameters.end(), r.parameter) == t.parameters.end())
      t.parameters.push_back(r.parameter);
  }
  auto sorted_keys = keys;
  std::sort(sorted_keys.begin(), sorted_keys.end());
  std::map<std::pair<std::string, std::string>, CoverageCell> acc;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::vector<std::pair<std::string, std::string>> mine;
    for (const auto& r : runs[i].intervals) mine.emplace_back(r.label(), r.parameter);
    std::sort(mine.begin(), mine.end());
    if (mine != sorted_keys)
      throw ValidationError("coverage table: run " + std::to_string(i + 1) + " reports a different parameter set");
    for (const auto& r : runs[i].intervals) {
      auto& c = acc[{r.label(), r.parameter}];
      c.method = r.label();
      c.parameter = r.parameter;
      ++c.total;
      if (r.covers(runs[i].truth.at(r.parameter))) ++c.covered;
    }
  }
  for (const auto& m : t.methods)
    for (const auto& p : t.parameters) {
      auto it = acc.find({m, p});
      if (it != acc.end()) t.cells.push_back(it->second);
    }
  return t;
}

/// Wide layout: one row per method, one column per parameter.
inline void write_coverage_csv(std::ostream& out, const CoverageTable& t) {
  out << "method";
  for (const auto& p : t.parameters) out << ',' << p;
  out << ",replicates\n";
  for (const auto& m : t.methods) {
    out << m;
    std::size_t total = 0;
    for (const auto& p : t.parameters) {
      const auto& c = t.cell(m, p);
      out << ',' << format_double(c.coverage());
      total = c.total;
    }
    out << ',' << total << '\n';
  }
}

/// Long layout with binomial standard errors.
inline void write_coverage_long_csv(std::ostream& out, const CoverageTable& t) {
  out << "method,parameter,covered,total,coverage,binomial_se\n";
  for (const auto& c : t.cells)
    out << c.method << ',' << c.parameter << ',' << c.covered << ',' << c.total << ',' << format_double(c.coverage())
        << ',' << format_double(c.standard_error()) << '\n';
}

inline nlohmann::json to_json(const CoverageTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : t.cells)
    rows.push_back({{"method", c.method},
                    {"parameter", c.parameter},
                    {"covered", c.covered},
                    {"total", c.total},
                    {"coverage", c.coverage()},
                    {"binomial_se", c.standard_error()}});
  return {{"methods", t.methods}, {"parameters", t.parameters}, {"cells", rows}};
}

}  // namespace semvb
