// Copyright (c) 2026, the dgpaq authors.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace dgpaq {

// splitmix64 step; the workhorse for deriving independent substream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic seed derivation from (base seed, tag, indices...). Distinct
// argument lists give statistically independent streams, so parallel folds
// and grid combinations never share randomness.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t state = 0x8f1bbcdcbfa53e0bULL;
  std::uint64_t acc = 0;
  for (std::uint64_t p : parts) {
    state ^= p + 0x9e3779b97f4a7c15ULL + (acc << 6) + (acc >> 2);
    acc = splitmix64(state);
  }
  return acc;
}

// Seeded random stream. One instance per logical task; never shared across
// threads.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }

  // uniform integer in [0, bound)
  std::uint64_t integer(std::uint64_t bound) {
    std::uniform_int_distribution<std::uint64_t> d(0, bound - 1);
    return d(gen_);
  }

  void fill_normal(double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = normal();
  }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> v(n);
    fill_normal(v.data(), n);
    return v;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }

  std::mt19937_64& gen() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Source of standard-normal draws for the sampling path. Injected so tests
// can freeze or replay the randomness of a forward pass.
class EpsSource {
 public:
  virtual ~EpsSource() = default;
  virtual void fill(std::size_t n, double* out) = 0;

  std::vector<double> draw(std::size_t n) {
    std::vector<double> v(n);
    fill(n, v.data());
    return v;
  }
};

class GaussianEps : public EpsSource {
 public:
  explicit GaussianEps(std::uint64_t seed) : stream_(seed) {}
  void fill(std::size_t n, double* out) override { stream_.fill_normal(out, n); }

 private:
  RngStream stream_;
};

class ZeroEps : public EpsSource {
 public:
  void fill(std::size_t n, double* out) override {
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
  }
};

// Records every draw of an inner source so the exact same randomness can be
// replayed (finite-difference checks against a frozen sampling path).
class CapturingEps : public EpsSource {
 public:
  explicit CapturingEps(std::uint64_t seed) : inner_(seed) {}

  void fill(std::size_t n, double* out) override {
    inner_.fill(n, out);
    log_.emplace_back(out, out + n);
  }

  const std::vector<std::vector<double>>& log() const { return log_; }

 private:
  GaussianEps inner_;
  std::vector<std::vector<double>> log_;
};

class ReplayEps : public EpsSource {
 public:
  explicit ReplayEps(const std::vector<std::vector<double>>& log) : log_(&log) {}

  void rewind() { pos_ = 0; }

  void fill(std::size_t n, double* out) override;

 private:
  const std::vector<std::vector<double>>* log_;
  std::size_t pos_ = 0;
};

}  // namespace dgpaq
