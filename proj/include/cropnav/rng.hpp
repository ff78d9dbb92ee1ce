#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cropnav {

using RandomStream = std::mt19937_64;

// FNV-1a; stable across platforms unlike std::hash.
constexpr std::uint64_t stable_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Independent named sub-stream of a master seed. Consumers never share a
// stream, so enabling one feature does not shift another's draws.
inline RandomStream make_stream(std::uint64_t master_seed, std::string_view name) {
  const std::uint64_t h = stable_hash(name);
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return RandomStream(seq);
}

}  // namespace cropnav
