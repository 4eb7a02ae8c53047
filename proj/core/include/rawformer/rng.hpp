#pragma once

#include <cstdint>
#include <string_view>

namespace rawformer {

/// splitmix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent sub-seed for stream `tag`, item `index` of a master seed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a over the tag
  for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001B3ull;
  return mix64(mix64(master ^ h) + index);
}

}  // namespace rawformer
