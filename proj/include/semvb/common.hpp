#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace semvb {

inline constexpr const char* kVersion = "1.0.0";

// Error hierarchy. Everything thrown by the library derives from Error so
// front ends can map it to a single exit path.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : Error {
  using Error::Error;
};
struct UndefinedMomentError : Error {
  using Error::Error;
};
struct LinearAlgebraError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct IngestError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct SamplerFault : Error {
  using Error::Error;
};
struct ResampleError : Error {
  using Error::Error;
};

/// Insertion-ordered name -> value map. Parameter sets are small (tens of
/// entries) and their order is part of every report, so a flat vector wins
/// over std::map.
class ParameterMap {
 public:
  using Entry = std::pair<std::string, double>;

  void set(std::string name, double value) {
    for (auto& e : entries_) {
      if (e.first == name) {
        e.second = value;
        return;
      }
    }
    entries_.emplace_back(std::move(name), value);
  }

  [[nodiscard]] bool contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry& e) { return e.first == name; });
  }

  [[nodiscard]] double at(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw ValidationError("unknown parameter '" + std::string(name) + "'");
  }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
  }

  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }
  [[nodiscard]] auto begin() const noexcept { return entries_.begin(); }
  [[nodiscard]] auto end() const noexcept { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

/// Shortest round-trip decimal representation; identical bits always give
/// identical text, which the reproducibility guarantees rely on.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view text, double& out) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r'))
    text.remove_suffix(1);
  if (text.empty()) return false;
  if (text.front() == '+') text.remove_prefix(1);
  auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  return res.ec == std::errc{} && res.ptr == text.data() + text.size() && std::isfinite(out);
}

}  // namespace semvb
