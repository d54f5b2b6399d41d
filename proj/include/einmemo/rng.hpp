#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace einmemo {

using Rng = std::mt19937_64;

// Independent stream per (seed, tag...) tuple.
inline Rng make_rng(std::initializer_list<uint64_t> keys) {
  std::vector<uint32_t> words;
  for (uint64_t k : keys) {
    words.push_back(static_cast<uint32_t>(k));
    words.push_back(static_cast<uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace einmemo
