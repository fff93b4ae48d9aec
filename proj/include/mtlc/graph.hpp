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

#ifndef MTLC_GRAPH_HPP_
#define MTLC_GRAPH_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/prototxt.hpp"

namespace mtlc {

// Per-sample activation shape; the batch axis only exists inside the tensor
// engine.
struct Shape3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t numel() const { return channels * height * width; }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);
Shape3 shape3_from_dims(const Dims& dims);

// Where an operator reads a tensor from: a graph entry or another node.
struct ValueRef {
  enum class Source { kInput, kNode };
  Source source = Source::kNode;
  std::size_t index = 0;

  static ValueRef input(std::size_t i) { return {Source::kInput, i}; }
  static ValueRef node(std::size_t i) { return {Source::kNode, i}; }
  bool is_input() const { return source == Source::kInput; }
  bool operator==(const ValueRef&) const = default;
};

struct OperatorNode {
  std::size_t id = 0;
  std::string name;
  LayerKind kind = LayerKind::kReLU;
  std::vector<ValueRef> parents;
  KindParams params;
  std::vector<Shape3> in_shapes;  // one per parent once inferred
  std::optional<Shape3> out_shape;
  std::int64_t param_count = 0;
  bool parameterized = false;

  const Shape3& in_shape() const { return in_shapes.at(0); }
};

bool is_parameterized(LayerKind kind);

struct GraphInput {
  std::string name;
  std::optional<Shape3> shape;
};

struct OperatorGraph {
  std::string name;
  std::vector<GraphInput> inputs;
  std::vector<OperatorNode> nodes;  // topological (document) order
  std::vector<std::size_t> outputs;

  std::size_t l_param() const;
  std::size_t l_total() const { return nodes.size(); }
  bool shapes_inferred() const;
  // Sum of count_params over nodes; requires inferred shapes.
  std::int64_t total_params() const;
};

OperatorGraph build_graph(const NetworkSpec& spec);

// Fills in_shapes/out_shape/param_count. Entry shapes default to the ones
// declared in the network when `entry_shapes` is empty.
OperatorGraph infer_shapes(OperatorGraph graph, std::span<const Shape3> entry_shapes = {});
OperatorGraph infer_shapes(OperatorGraph graph, const Shape3& input_shape);

std::int64_t count_params(const OperatorNode& node);
std::vector<std::size_t> topo_order(const OperatorGraph& graph);

// Convenience: parse -> build -> infer.
OperatorGraph load_graph(const std::string& prototxt_path);

nlohmann::json to_json(const OperatorGraph& graph);

}  // namespace mtlc

#endif  // MTLC_GRAPH_HPP_
