#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace b2p {

// 64-bit FNV-1a; stable across platforms, used for cache/config fingerprints.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Deterministic seed derivation for independent random streams.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws ValidationError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace b2p
