#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace cme {

/// xoshiro256++ seeded through splitmix64. We roll our own generator and
/// distributions because the standard library's distributions are
/// implementation-defined, and every logged number in a run must be
/// reproducible from the seed alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53-bit resolution.
  double next_double();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);

  /// Uniform integer in [lo, hi], both ends inclusive. Requires lo <= hi.
  int uniform_int(int lo, int hi);

  /// True with probability p.
  bool bernoulli(double p);

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

 private:
  std::array<std::uint64_t, 4> s_;
};

/// Deterministic seed derivation: every random stream in a run is a pure
/// function of the master seed, a purpose tag, and up to two indices.
/// Purpose tags in use: "weights", "base_episode", "finetune_episode",
/// "novel_pool", "eval_pool", "eval_episode", "augment", "disturb".
std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                          std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace cme
