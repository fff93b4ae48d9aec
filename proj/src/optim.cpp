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

#include "mtlc/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "mtlc/errors.hpp"

namespace mtlc {

double StepDecay::multiplier(std::int64_t step) const {
  if (every <= 0) return 1.0;
  return std::pow(factor, static_cast<double>(step / every));
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd_momentum";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::kSgdMomentum;
  throw InvalidConfig("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<ag::Var> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.learning_rate >= 0.0)) {
    throw InvalidConfig("learning rate must be non-negative");
  }
  if (config_.schedule.every > 0 &&
      !(config_.schedule.factor > 0.0 && config_.schedule.factor <= 1.0)) {
    throw InvalidConfig("lr decay factor must lie in (0, 1]");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const ag::Var& p : params_) {
    m_.push_back(Tensor::zeros_like(p.value()));
    if (config_.kind == OptimizerKind::kAdam) v_.push_back(Tensor::zeros_like(p.value()));
  }
}

double Optimizer::current_lr() const {
  return config_.learning_rate * config_.schedule.multiplier(step_count_);
}

void Optimizer::step() {
  const double lr = current_lr();
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ag::Var& p = params_[k];
    if (!p.has_grad()) continue;
    Tensor& value = p.mutable_value();
    const Tensor& grad = p.grad();
    Tensor& m = m_[k];
    if (config_.kind == OptimizerKind::kSgdMomentum) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i] + config_.weight_decay * value[i];
        m[i] = config_.momentum * m[i] + g;
        value[i] -= lr * m[i];
      }
    } else {
      Tensor& v = v_[k];
      const double c1 = 1.0 - std::pow(config_.beta1, t);
      const double c2 = 1.0 - std::pow(config_.beta2, t);
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i] + config_.weight_decay * value[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      }
    }
  }
}

void Optimizer::zero_grad() {
  for (ag::Var& p : params_) p.zero_grad();
}

}  // namespace mtlc
