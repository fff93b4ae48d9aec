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

#include "mtlc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mtlc/errors.hpp"
#include "mtlc/random.hpp"

namespace mtlc {

std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Dims shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + to_string(shape_));
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Dims shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::add_(const Tensor& other) {
  if (other.size() != size()) {
    throw std::invalid_argument("add_: size mismatch " + to_string(shape_) + " vs " +
                                to_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_(double s) {
  for (double& v : data_) v *= s;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

// --- Rng ---

double Rng::uniform() {
  // 53 random mantissa bits, shifted by half an ulp so 0 is never produced.
  const std::uint64_t bits = engine_() >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; one value per call keeps the stream position simple.
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw InvalidConfig("corrupt RNG state");
}

RngStreams::RngStreams(std::uint64_t weights, std::uint64_t gumbel,
                       std::uint64_t dropout, std::uint64_t data)
    : streams_{Rng(weights), Rng(gumbel), Rng(dropout), Rng(data)} {}

double gumbel_from_uniform(double u) {
  u = std::clamp(u, kGumbelEps, 1.0 - kGumbelEps);
  return -std::log(-std::log(u));
}

Tensor gumbel_noise(const Dims& shape, Rng& rng) {
  Tensor g(shape);
  for (double& v : g.data()) v = gumbel_from_uniform(rng.uniform());
  return g;
}

}  // namespace mtlc
