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

#ifndef MTLC_OPTIM_HPP_
#define MTLC_OPTIM_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "mtlc/autograd.hpp"

namespace mtlc {

// lr_t = lr_0 * factor^floor(t / every).
struct StepDecay {
  double factor = 1.0;
  std::int64_t every = 0;  // 0 disables decay

  double multiplier(std::int64_t step) const;
};

enum class OptimizerKind { kSgdMomentum, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgdMomentum;
  double learning_rate = 0.001;
  double momentum = 0.9;  // SGD only
  double beta1 = 0.9;     // Adam only
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  StepDecay schedule;
};

// Updates a fixed list of parameter leaves in place. Parameters without a
// gradient are left untouched (their moment state does not advance).
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<ag::Var> params);

  void step();
  void zero_grad();

  // Learning rate that the next step() will use.
  double current_lr() const;
  std::int64_t step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<ag::Var>& params() const { return params_; }

  // Moment buffers, in parameter order; exposed for checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

 private:
  OptimizerConfig config_;
  std::vector<ag::Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t step_count_ = 0;
};

}  // namespace mtlc

#endif  // MTLC_OPTIM_HPP_
