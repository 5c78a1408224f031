#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "qvae/tensor.hpp"

namespace qvae {

/// splitmix64 finalizer; also used to expand a 64-bit seed into generator state.
std::uint64_t splitmix64(std::uint64_t& state) noexcept;

/// Derives an independent sub-seed from a base seed and a stable textual tag
/// (FNV-1a of the tag mixed through splitmix64). Every random stream in the
/// toolkit is keyed this way off a single experiment seed.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) noexcept;
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) noexcept;

/// xoshiro256** seeded through splitmix64. Normal deviates come from the
/// Box-Muller transform in double precision; both outputs of each pair are used.
/// No OS entropy is consulted anywhere, so identical seeds give identical
/// streams on every platform with IEEE-754 doubles and a correctly rounded libm.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  double standard_normal() noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }
  result_type operator()() noexcept { return next_u64(); }

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// rows x cols matrix of i.i.d. N(0, 1) draws.
Matrix rng_normal(Rng& rng, std::size_t rows, std::size_t cols);

/// Deterministic Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(Rng& rng, std::size_t n);

}  // namespace qvae
