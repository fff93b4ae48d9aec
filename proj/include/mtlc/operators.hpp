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

#ifndef MTLC_OPERATORS_HPP_
#define MTLC_OPERATORS_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtlc/autograd.hpp"
#include "mtlc/graph.hpp"

namespace mtlc {

struct ForwardContext {
  bool training = true;
  Rng* dropout_rng = nullptr;  // required when training through Dropout
};

// Executable instance of one backbone operator, owning its parameters and
// (for BatchNorm) running statistics.
class Operator {
 public:
  Operator() = default;
  // Allocates zero-valued parameters unless `materialize` is false, in which
  // case only the structure is kept (param_count stays exact).
  explicit Operator(const OperatorNode& node, bool materialize = true);

  // Kaiming-normal (fan-in) weights, zero biases, BatchNorm gamma=1 beta=0.
  void initialize(Rng& rng);

  ag::Var forward(std::span<const ag::Var> inputs, const ForwardContext& ctx);
  ag::Var forward(const ag::Var& input, const ForwardContext& ctx) {
    return forward(std::span<const ag::Var>(&input, 1), ctx);
  }

  // Deep copy: new parameter leaves with equal values, copied statistics.
  Operator clone() const;

  LayerKind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  const Shape3& out_shape() const { return out_shape_; }
  const std::vector<Shape3>& in_shapes() const { return in_shapes_; }
  std::int64_t param_count() const { return param_count_; }
  bool materialized() const { return materialized_; }

  std::vector<ag::Var>& parameters() { return params_; }
  const std::vector<ag::Var>& parameters() const { return params_; }
  ag::BatchNormState& bn_state() { return bn_state_; }
  const ag::BatchNormState& bn_state() const { return bn_state_; }

 private:
  std::string name_;
  LayerKind kind_ = LayerKind::kReLU;
  KindParams layer_;
  std::vector<Shape3> in_shapes_;
  Shape3 out_shape_;
  std::int64_t param_count_ = 0;
  bool materialized_ = false;
  std::vector<ag::Var> params_;
  ag::BatchNormState bn_state_;
};

// Parameter-free bypass: identity when shapes agree, otherwise strided
// average pooling to the target spatial size followed by channel zero-padding
// or truncation.
class SkipOp {
 public:
  SkipOp() = default;

  bool identity() const { return identity_; }
  std::size_t stride_h() const { return stride_h_; }
  std::size_t stride_w() const { return stride_w_; }
  const Shape3& in_shape() const { return in_; }
  const Shape3& out_shape() const { return out_; }
  std::int64_t param_count() const { return 0; }

  ag::Var forward(const ag::Var& x) const;

 private:
  friend SkipOp make_skip(const Shape3& in, const Shape3& out);
  Shape3 in_;
  Shape3 out_;
  std::size_t stride_h_ = 1;
  std::size_t stride_w_ = 1;
  bool identity_ = true;
};

// Throws IncompatibleShapes when the spatial ratio is not an integer >= 1.
SkipOp make_skip(const Shape3& in, const Shape3& out);

// --- tasks and heads ---

enum class LossKind { kCrossEntropy, kL1, kCosine };
std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

enum class HeadKind {
  kGlobalPoolLinear,  // global average pool, then InnerProduct
  kLinear,            // flatten, then InnerProduct
};
std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& name);

struct TaskSpec {
  std::string name;
  LossKind loss = LossKind::kCrossEntropy;
  std::size_t output_dim = 2;
  double weight = 1.0;  // lambda_i
  HeadKind head = HeadKind::kGlobalPoolLinear;
};

// Task-specific output head; never subject to the sharing policy.
class Head {
 public:
  Head() = default;
  Head(const TaskSpec& task, const Shape3& in_shape, bool materialize = true);

  void initialize(Rng& rng) { fc_.initialize(rng); }
  ag::Var forward(const ag::Var& x, const ForwardContext& ctx);
  Head clone() const;

  std::int64_t param_count() const { return fc_.param_count(); }
  std::vector<ag::Var>& parameters() { return fc_.parameters(); }
  const std::vector<ag::Var>& parameters() const { return fc_.parameters(); }
  HeadKind kind() const { return kind_; }

 private:
  HeadKind kind_ = HeadKind::kGlobalPoolLinear;
  Operator fc_;
};

}  // namespace mtlc

#endif  // MTLC_OPERATORS_HPP_
