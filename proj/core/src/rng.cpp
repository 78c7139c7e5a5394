#include "ptta/rng.hpp"

#include <cmath>
#include <numbers>

namespace ptta {

RngStream::RngStream(std::uint64_t seed) : gen_(splitmix64(seed)) {}

std::uint64_t RngStream::next_u64() { return gen_(); }

double RngStream::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

int RngStream::uniform_int(int lo, int hi) {
  // rejection-free modulo is fine here: ranges are tiny vs 2^64
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

double RngStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

double RngStream::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

void RngStream::shuffle(std::vector<int>& v) {
  for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
    const int j = uniform_int(0, i);
    std::swap(v[i], v[j]);
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream derive_stream(std::uint64_t run_seed, std::string_view tag) {
  return RngStream(splitmix64(run_seed ^ fnv1a64(tag)));
}

}  // namespace ptta
