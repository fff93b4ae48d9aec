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

#include "mtlc/operators.hpp"

#include <cmath>
#include <stdexcept>

#include "mtlc/errors.hpp"

namespace mtlc {

Operator::Operator(const OperatorNode& node, bool materialize)
    : name_(node.name),
      kind_(node.kind),
      layer_(node.params),
      in_shapes_(node.in_shapes),
      param_count_(count_params(node)),
      materialized_(materialize) {
  if (!node.out_shape) throw ShapesMissing("operator '" + node.name + "' has no shapes");
  out_shape_ = *node.out_shape;
  if (!materialize) return;
  switch (kind_) {
    case LayerKind::kConvolution: {
      const auto& p = std::get<ConvolutionParams>(layer_);
      const auto k = static_cast<std::size_t>(p.kernel_size);
      params_.push_back(ag::Var::parameter(
          Tensor({static_cast<std::size_t>(p.num_output), in_shapes_[0].channels, k, k})));
      if (p.bias_term) {
        params_.push_back(ag::Var::parameter(Tensor({static_cast<std::size_t>(p.num_output)})));
      }
      break;
    }
    case LayerKind::kInnerProduct: {
      const auto& p = std::get<InnerProductParams>(layer_);
      params_.push_back(ag::Var::parameter(
          Tensor({static_cast<std::size_t>(p.num_output), in_shapes_[0].numel()})));
      if (p.bias_term) {
        params_.push_back(ag::Var::parameter(Tensor({static_cast<std::size_t>(p.num_output)})));
      }
      break;
    }
    case LayerKind::kBatchNorm: {
      const std::size_t c = in_shapes_[0].channels;
      params_.push_back(ag::Var::parameter(Tensor({c}, 1.0)));
      params_.push_back(ag::Var::parameter(Tensor({c}, 0.0)));
      break;
    }
    default:
      break;
  }
}

void Operator::initialize(Rng& rng) {
  if (params_.empty()) return;
  if (kind_ == LayerKind::kBatchNorm) {
    params_[0].mutable_value().fill(1.0);
    params_[1].mutable_value().fill(0.0);
    bn_state_ = {};
    return;
  }
  Tensor& w = params_[0].mutable_value();
  const std::size_t fan_in = w.size() / w.dim(0);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.data()) v = stddev * rng.normal();
  if (params_.size() > 1) params_[1].mutable_value().fill(0.0);
}

ag::Var Operator::forward(std::span<const ag::Var> inputs, const ForwardContext& ctx) {
  if (inputs.size() != in_shapes_.size()) {
    throw ShapeMismatch(name_, std::to_string(inputs.size()) + " inputs, expected " +
                                   std::to_string(in_shapes_.size()));
  }
  const ag::Var& x = inputs[0];
  const ag::Var none;
  switch (kind_) {
    case LayerKind::kConvolution: {
      if (!materialized_) throw std::logic_error("operator '" + name_ + "' is not materialized");
      const auto& p = std::get<ConvolutionParams>(layer_);
      return ag::conv2d(x, params_[0], params_.size() > 1 ? params_[1] : none,
                        static_cast<std::size_t>(p.stride), static_cast<std::size_t>(p.pad));
    }
    case LayerKind::kInnerProduct: {
      if (!materialized_) throw std::logic_error("operator '" + name_ + "' is not materialized");
      ag::Var y = ag::linear(x, params_[0], params_.size() > 1 ? params_[1] : none);
      return ag::reshape(y, {y.shape()[0], out_shape_.channels, 1, 1});
    }
    case LayerKind::kBatchNorm: {
      if (!materialized_) throw std::logic_error("operator '" + name_ + "' is not materialized");
      const auto& p = std::get<BatchNormParams>(layer_);
      return ag::batch_norm(x, params_[0], params_[1], bn_state_, ctx.training, p.eps,
                            p.moving_average_fraction);
    }
    case LayerKind::kReLU:
      return ag::relu(x);
    case LayerKind::kPooling: {
      const auto& p = std::get<PoolingParams>(layer_);
      const Shape3& in = in_shapes_[0];
      const std::size_t kh = p.global_pooling ? in.height : static_cast<std::size_t>(p.kernel_size);
      const std::size_t kw = p.global_pooling ? in.width : static_cast<std::size_t>(p.kernel_size);
      const auto s = static_cast<std::size_t>(p.stride);
      const auto pad = static_cast<std::size_t>(p.pad);
      return p.mode == PoolMode::kMax ? ag::max_pool2d(x, kh, kw, s, s, pad)
                                      : ag::avg_pool2d(x, kh, kw, s, s, pad);
    }
    case LayerKind::kEltwise: {
      ag::Var acc = inputs[0];
      for (std::size_t i = 1; i < inputs.size(); ++i) acc = ag::add(acc, inputs[i]);
      return acc;
    }
    case LayerKind::kConcat:
      return ag::concat(inputs);
    case LayerKind::kDropout: {
      const auto& p = std::get<DropoutParams>(layer_);
      if (ctx.training && p.ratio > 0.0) {
        if (!ctx.dropout_rng) throw std::logic_error("Dropout in training needs a dropout stream");
        return ag::dropout(x, p.ratio, *ctx.dropout_rng, true);
      }
      return x;
    }
    case LayerKind::kInput:
      break;
  }
  throw std::logic_error("Input layers are not executable");
}

Operator Operator::clone() const {
  Operator copy = *this;
  for (ag::Var& p : copy.params_) p = ag::Var::parameter(p.value());
  return copy;
}

// --- skip ---

SkipOp make_skip(const Shape3& in, const Shape3& out) {
  SkipOp skip;
  skip.in_ = in;
  skip.out_ = out;
  skip.identity_ = in == out;
  if (skip.identity_) return skip;
  auto ratio = [&](std::size_t from, std::size_t to, const char* axis) {
    if (to == 0 || to > from || from % to != 0) {
      throw IncompatibleShapes("skip " + to_string(in) + " -> " + to_string(out) + ": " + axis +
                               " ratio " + std::to_string(from) + "/" + std::to_string(to) +
                               " is not an integer stride");
    }
    return from / to;
  };
  skip.stride_h_ = ratio(in.height, out.height, "height");
  skip.stride_w_ = ratio(in.width, out.width, "width");
  return skip;
}

ag::Var SkipOp::forward(const ag::Var& x) const {
  if (identity_) return x;
  ag::Var y = x;
  if (stride_h_ > 1 || stride_w_ > 1) {
    y = ag::avg_pool2d(y, stride_h_, stride_w_, stride_h_, stride_w_, 0);
  }
  if (in_.channels != out_.channels) y = ag::channel_adjust(y, out_.channels);
  return y;
}

// --- tasks / heads ---

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCrossEntropy: return "cross_entropy";
    case LossKind::kL1: return "l1";
    case LossKind::kCosine: return "cosine";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "cross_entropy" || name == "ce") return LossKind::kCrossEntropy;
  if (name == "l1") return LossKind::kL1;
  if (name == "cosine") return LossKind::kCosine;
  throw InvalidConfig("unknown loss kind '" + name + "'");
}

std::string to_string(HeadKind kind) {
  return kind == HeadKind::kLinear ? "linear" : "gap_linear";
}

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "linear") return HeadKind::kLinear;
  if (name == "gap_linear") return HeadKind::kGlobalPoolLinear;
  throw InvalidConfig("unknown head kind '" + name + "'");
}

Head::Head(const TaskSpec& task, const Shape3& in_shape, bool materialize) : kind_(task.head) {
  OperatorNode fc;
  fc.name = task.name + "/head";
  fc.kind = LayerKind::kInnerProduct;
  fc.params = InnerProductParams{static_cast<std::int64_t>(task.output_dim), true};
  fc.parameterized = true;
  const Shape3 fc_in = kind_ == HeadKind::kGlobalPoolLinear ? Shape3{in_shape.channels, 1, 1} : in_shape;
  fc.in_shapes = {fc_in};
  fc.out_shape = Shape3{task.output_dim, 1, 1};
  fc_ = Operator(fc, materialize);
}

ag::Var Head::forward(const ag::Var& x, const ForwardContext& ctx) {
  ag::Var in = kind_ == HeadKind::kGlobalPoolLinear ? ag::global_avg_pool(x) : x;
  ag::Var y = fc_.forward(in, ctx);
  return ag::reshape(y, {y.shape()[0], y.shape()[1]});
}

Head Head::clone() const {
  Head copy = *this;
  copy.fc_ = fc_.clone();
  return copy;
}

}  // namespace mtlc
