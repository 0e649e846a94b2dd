#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mvlab {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a over the label bytes.
inline std::uint64_t hash_label(std::string_view label) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Stream key for (master seed, module, index, sub-index):
///   k = splitmix64(splitmix64(splitmix64(seed ^ fnv1a(module)) ^ index) ^ sub)
/// Every random draw in the library comes from an engine seeded this way,
/// so results never depend on thread count or scheduling.
inline std::uint64_t stream_key(std::uint64_t seed, std::string_view module, std::uint64_t index,
                                std::uint64_t sub = 0) noexcept {
  std::uint64_t k = splitmix64(seed ^ hash_label(module));
  k = splitmix64(k ^ index);
  return splitmix64(k ^ sub);
}

inline Engine make_stream(std::uint64_t seed, std::string_view module, std::uint64_t index,
                          std::uint64_t sub = 0) {
  return Engine(stream_key(seed, module, index, sub));
}

/// Standard normal draws on a keyed engine.
class NormalSource {
 public:
  explicit NormalSource(Engine engine) : engine_(std::move(engine)) {}

  double operator()() { return dist_(engine_); }
  Engine& engine() noexcept { return engine_; }

 private:
  Engine engine_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace mvlab
