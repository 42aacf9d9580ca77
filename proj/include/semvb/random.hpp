#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string_view>

namespace semvb {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Random stream for a (seed, label, index) triple. Distinct labels give
/// unrelated streams, so a new consumer never perturbs an existing one.
inline Rng make_stream(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ fnv1a64(label));
  s = splitmix64(s ^ splitmix64(index + 0x51ed270b27a3c5b1ULL));
  std::array<std::uint32_t, 4> words{};
  std::uint64_t t = s;
  for (auto& w : words) {
    t = splitmix64(t);
    w = static_cast<std::uint32_t>(t >> 32);
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace semvb
