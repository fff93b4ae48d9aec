// Copyright 2026 The mtlc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MTLC_RANDOM_HPP_
#define MTLC_RANDOM_HPP_

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "mtlc/tensor.hpp"

namespace mtlc {

// Seeded generator with distribution code of our own, so sequences are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  std::string serialize() const;
  void deserialize(const std::string& state);

  bool operator==(const Rng& o) const { return engine_ == o.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Independent streams so that an ablation can perturb one source of
// randomness without shifting the others.
enum class Stream { kWeights = 0, kGumbel = 1, kDropout = 2, kData = 3 };
inline constexpr std::size_t kNumStreams = 4;

class RngStreams {
 public:
  RngStreams() : RngStreams(0, 0, 0, 0) {}
  RngStreams(std::uint64_t weights, std::uint64_t gumbel, std::uint64_t dropout,
             std::uint64_t data);

  Rng& operator[](Stream s) { return streams_[static_cast<std::size_t>(s)]; }
  const Rng& operator[](Stream s) const { return streams_[static_cast<std::size_t>(s)]; }

 private:
  std::array<Rng, kNumStreams> streams_;
};

// Clamp bound keeping U away from {0, 1} before the double log.
inline constexpr double kGumbelEps = 1e-12;

double gumbel_from_uniform(double u);
Tensor gumbel_noise(const Dims& shape, Rng& rng);

}  // namespace mtlc

#endif  // MTLC_RANDOM_HPP_
