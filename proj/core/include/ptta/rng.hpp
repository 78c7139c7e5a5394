#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ptta {

// Deterministic random stream. All draws are built from raw mt19937_64
// output so the bit stream does not depend on libstdc++ distribution
// internals.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t next_u64();

  // uniform in [0, 1)
  double uniform();
  // uniform in [lo, hi)
  double uniform(double lo, double hi);
  // uniform integer in [lo, hi], inclusive
  int uniform_int(int lo, int hi);
  bool bernoulli(double p);
  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double stddev);

  // Fisher-Yates
  void shuffle(std::vector<int>& v);

 private:
  std::mt19937_64 gen_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// Derives an independent substream from a run seed and a component tag.
RngStream derive_stream(std::uint64_t run_seed, std::string_view tag);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace ptta
