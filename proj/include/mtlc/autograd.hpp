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

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every op builds a Node holding its value, its inputs, and a closure that
// pushes the node's gradient back into the inputs. Graphs are rebuilt each
// iteration; parameters are long-lived leaf nodes owned by operators.
//
// Image tensors are laid out (batch, channels, height, width).

#ifndef MTLC_AUTOGRAD_HPP_
#define MTLC_AUTOGRAD_HPP_

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mtlc/random.hpp"
#include "mtlc/tensor.hpp"

namespace mtlc::ag {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  // grad += g, allocating on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Dims& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }

  // Seeds d(self)/d(self) = 1; requires a single-element value.
  void backward() const;
  void backward(const Tensor& seed) const;

  // Same value, cut from the graph.
  Var detach() const { return constant(value()); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Running statistics kept as Caffe does: decayed sums plus the decayed
// weight, so the estimate is unbiased from the first batch on.
struct BatchNormState {
  Tensor mean_sum;
  Tensor var_sum;
  double weight = 0.0;

  // Estimates used in inference mode (0 / 1 before any training batch).
  double mean(std::size_t c) const { return weight > 0.0 ? mean_sum[c] / weight : 0.0; }
  double var(std::size_t c) const { return weight > 0.0 ? var_sum[c] / weight : 1.0; }
};

// --- elementwise / reductions ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_constant(const Var& a, const Tensor& c);
Var sum(const Var& a);
Var mean(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var clamp_min(const Var& a, double floor);
Var softplus(const Var& a);
Var relu(const Var& a);
// Along the last axis.
Var softmax(const Var& a);
Var log_softmax(const Var& a);
// Flattened element `index` as a {1} tensor.
Var pick(const Var& a, std::size_t index);
// Flattened elements [begin, begin + count) as a {count} tensor.
Var slice(const Var& a, std::size_t begin, std::size_t count);
// Concatenates flattened {1}-or-larger vars into one vector.
Var stack(std::span<const Var> parts);
// sum_k weights[k] * branches[k]; branches share a shape, weights is {K}.
Var weighted_sum(std::span<const Var> branches, const Var& weights);
// Forward value is one-hot at argmax(soft); gradient passes through as identity.
Var straight_through(const Var& soft);
// Sums a list of scalars.
Var add_all(std::span<const Var> scalars);

// --- network primitives ---
// x: (B, C, H, W); weight: (O, C, k, k); bias: (O) or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride,
           std::size_t pad);
// x: (B, ...) flattened to (B, D); weight: (O, D); bias: (O) or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);
// Per-channel normalization over (B, H, W); x may be (B, C) or (B, C, H, W).
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool training, double eps = 1e-5, double moving_average_fraction = 0.999);
Var max_pool2d(const Var& x, std::size_t kh, std::size_t kw, std::size_t stride_h,
               std::size_t stride_w, std::size_t pad);
// Divisor is always kh * kw (padding counts as zeros).
Var avg_pool2d(const Var& x, std::size_t kh, std::size_t kw, std::size_t stride_h,
               std::size_t stride_w, std::size_t pad);
Var global_avg_pool(const Var& x);
// Concatenate along the channel axis.
Var concat(std::span<const Var> xs);
Var dropout(const Var& x, double ratio, Rng& rng, bool training);
// Zero-pads or truncates axis 1 to `channels`.
Var channel_adjust(const Var& x, std::size_t channels);
Var reshape(const Var& x, Dims shape);

// --- losses (mean-reduced scalars) ---
// logits (B, K) with B labels, or (B, K, H, W) with B*H*W labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);
Var l1_loss(const Var& pred, const Tensor& target);
// 1 - cos(pred, target) over axis 1, averaged over the remaining positions.
Var cosine_inverse_loss(const Var& pred, const Tensor& target);

}  // namespace mtlc::ag

#endif  // MTLC_AUTOGRAD_HPP_
