#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace selattack {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Remote transport failure after all retries; callers may retry the whole call.
struct TransportError : Error {
  using Error::Error;
};

// Remote endpoint answered, but not with the documented wire format.
struct ProtocolError : Error {
  using Error::Error;
};

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(std::string_view s);
uint64_t fnv1a64_file(const std::string& path);

// Mixes a base seed with a stream name so each consumer gets an
// independent, reproducible stream.
uint64_t mix_seed(uint64_t seed, std::string_view stream);
uint64_t mix_seed(uint64_t seed, uint64_t salt);
std::mt19937_64 named_rng(uint64_t seed, std::string_view stream);

// Rank correlation with average ranks for ties.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

std::string join(const std::vector<std::string>& parts, char sep);
std::string to_hex(uint64_t v);

}  // namespace selattack
