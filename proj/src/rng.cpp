#include "qstr/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace qstr {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng Rng::substream(std::uint64_t master, std::uint64_t trial, std::string_view purpose) {
  return Rng(master).split(trial).split(purpose);
}

Rng Rng::split(std::string_view tag) const { return split(hash_tag(tag)); }

Rng Rng::split(std::uint64_t tag) const {
  return Rng(mix64(key_ ^ mix64(tag + 0x3c6ef372fe94f82bULL)), true);
}

Rng::result_type Rng::operator()() {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c * 0xd1b54a32d192ed03ULL));
}

double Rng::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // rejection to avoid modulo bias
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x = (*this)();
  while (x >= limit) x = (*this)();
  return x % n;
}

}  // namespace qstr
