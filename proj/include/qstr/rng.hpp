// Counter-based splittable generator. A stream is (key, counter); output k is
// a keyed hash of k, so substreams never overlap and the state is a value.
#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace qstr {

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_tag(std::string_view tag);

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t key = 0) : key_(mix64(key ^ 0x6a09e667f3bcc909ULL)) {}

  // Stream for one (master seed, trial, purpose) triple.
  static Rng substream(std::uint64_t master, std::uint64_t trial, std::string_view purpose);

  Rng split(std::string_view tag) const;
  Rng split(std::uint64_t tag) const;

  result_type operator()();
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  double uniform();  // [0, 1), 53 bits
  double normal();   // Box-Muller, one draw per call
  std::uint64_t below(std::uint64_t n);  // uniform on {0..n-1}
  int sign() { return ((*this)() >> 63) ? 1 : -1; }

  std::uint64_t position() const { return counter_; }
  std::uint64_t key() const { return key_; }

 private:
  Rng(std::uint64_t raw_key, bool) : key_(raw_key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace qstr
