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

#ifndef MTLC_TESTS_TEST_UTIL_HPP_
#define MTLC_TESTS_TEST_UTIL_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtlc/autograd.hpp"
#include "mtlc/random.hpp"

namespace mtlc::testing {

inline std::string fixture(const std::string& name) {
  return std::string(MTLC_FIXTURE_DIR) + "/" + name;
}

inline Tensor random_tensor(const Dims& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Same, but no entry closer than `gap` to zero (keeps ReLU-like kinks away
// from the finite-difference stencil).
inline Tensor random_away_from_zero(const Dims& shape, Rng& rng, double gap = 0.05) {
  Tensor t(shape);
  for (double& v : t.data()) {
    const double mag = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string where;
};

// Compares reverse-mode gradients of the scalar f(inputs) with central
// differences. The error of each input is max|a - n| / max(max|n|, 1e-8).
inline GradCheck grad_check(const std::function<ag::Var(const std::vector<ag::Var>&)>& f,
                            std::vector<Tensor> values, double eps = 1e-5) {
  std::vector<ag::Var> params;
  for (const Tensor& v : values) params.push_back(ag::Var::parameter(v));
  f(params).backward();
  GradCheck out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor numeric(values[i].shape());
    for (std::size_t k = 0; k < values[i].size(); ++k) {
      auto eval = [&](double delta) {
        std::vector<ag::Var> probe;
        for (std::size_t j = 0; j < values.size(); ++j) {
          Tensor v = values[j];
          if (j == i) v[k] += delta;
          probe.push_back(ag::Var::constant(v));
        }
        return f(probe).value()[0];
      };
      numeric[k] = (eval(eps) - eval(-eps)) / (2 * eps);
    }
    const Tensor analytic = params[i].has_grad() ? params[i].grad() : Tensor(values[i].shape());
    double diff = 0.0;
    double scale = 1e-8;
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
      scale = std::max(scale, std::abs(numeric[k]));
    }
    if (diff / scale > out.max_rel_error) {
      out.max_rel_error = diff / scale;
      out.where = "input " + std::to_string(i);
    }
  }
  return out;
}

// Projects a tensor-valued op to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
inline ag::Var project(const ag::Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return ag::sum(ag::mul(y, ag::Var::constant(w)));
}

}  // namespace mtlc::testing

#endif  // MTLC_TESTS_TEST_UTIL_HPP_
