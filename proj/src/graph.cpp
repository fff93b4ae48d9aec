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

#include "mtlc/graph.hpp"

#include <map>
#include <queue>
#include <set>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

std::size_t window_extent(const OperatorNode& node, std::size_t in, std::int64_t kernel,
                          std::int64_t stride, std::int64_t pad) {
  const std::int64_t span = static_cast<std::int64_t>(in) + 2 * pad - kernel;
  if (span < 0) {
    throw ShapeMismatch(node.name, "kernel " + std::to_string(kernel) +
                                       " exceeds padded extent " + std::to_string(in + 2 * pad));
  }
  return static_cast<std::size_t>(span / stride + 1);
}

Shape3 infer_node(const OperatorNode& node) {
  const Shape3& in = node.in_shape();
  switch (node.kind) {
    case LayerKind::kConvolution: {
      const auto& p = std::get<ConvolutionParams>(node.params);
      return {static_cast<std::size_t>(p.num_output),
              window_extent(node, in.height, p.kernel_size, p.stride, p.pad),
              window_extent(node, in.width, p.kernel_size, p.stride, p.pad)};
    }
    case LayerKind::kPooling: {
      const auto& p = std::get<PoolingParams>(node.params);
      if (p.global_pooling) return {in.channels, 1, 1};
      return {in.channels, window_extent(node, in.height, p.kernel_size, p.stride, p.pad),
              window_extent(node, in.width, p.kernel_size, p.stride, p.pad)};
    }
    case LayerKind::kInnerProduct: {
      const auto& p = std::get<InnerProductParams>(node.params);
      return {static_cast<std::size_t>(p.num_output), 1, 1};
    }
    case LayerKind::kEltwise: {
      for (const Shape3& s : node.in_shapes) {
        if (s != in) {
          throw ShapeMismatch(node.name, "Eltwise inputs differ: " + to_string(in) + " vs " +
                                             to_string(s));
        }
      }
      return in;
    }
    case LayerKind::kConcat: {
      Shape3 out{0, in.height, in.width};
      for (const Shape3& s : node.in_shapes) {
        if (s.height != in.height || s.width != in.width) {
          throw ShapeMismatch(node.name, "Concat spatial sizes differ: " + to_string(in) +
                                             " vs " + to_string(s));
        }
        out.channels += s.channels;
      }
      return out;
    }
    case LayerKind::kBatchNorm:
    case LayerKind::kReLU:
    case LayerKind::kDropout:
      return in;
    case LayerKind::kInput:
      break;
  }
  throw ShapeMismatch(node.name, "Input layers are not graph nodes");
}

}  // namespace

std::string to_string(const Shape3& s) {
  return "(" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
         std::to_string(s.width) + ")";
}

Shape3 shape3_from_dims(const Dims& dims) {
  switch (dims.size()) {
    case 4: return {dims[1], dims[2], dims[3]};
    case 3: return {dims[0], dims[1], dims[2]};
    case 2: return {dims[1], 1, 1};
    default: throw ShapeMismatch("input", "unsupported input rank " + to_string(dims));
  }
}

bool is_parameterized(LayerKind kind) {
  return kind == LayerKind::kConvolution || kind == LayerKind::kInnerProduct ||
         kind == LayerKind::kBatchNorm;
}

std::size_t OperatorGraph::l_param() const {
  std::size_t n = 0;
  for (const OperatorNode& node : nodes) n += node.parameterized;
  return n;
}

bool OperatorGraph::shapes_inferred() const {
  for (const OperatorNode& node : nodes) {
    if (!node.out_shape) return false;
  }
  return true;
}

std::int64_t OperatorGraph::total_params() const {
  std::int64_t total = 0;
  for (const OperatorNode& node : nodes) total += count_params(node);
  return total;
}

OperatorGraph build_graph(const NetworkSpec& spec) {
  OperatorGraph graph;
  graph.name = spec.name;
  std::map<std::string, ValueRef> producer;
  std::set<std::string> consumed;

  for (const InputDecl& in : spec.inputs) {
    producer[in.name] = ValueRef::input(graph.inputs.size());
    graph.inputs.push_back({in.name, shape3_from_dims(in.shape)});
  }
  for (const LayerSpec& layer : spec.layers) {
    if (layer.kind == LayerKind::kInput) {
      const auto& p = std::get<InputParams>(layer.params);
      for (std::size_t t = 0; t < layer.tops.size(); ++t) {
        producer[layer.tops[t]] = ValueRef::input(graph.inputs.size());
        std::optional<Shape3> shape;
        if (t < p.shapes.size()) shape = shape3_from_dims(p.shapes[t]);
        graph.inputs.push_back({layer.tops[t], shape});
      }
      continue;
    }
    OperatorNode node;
    node.id = graph.nodes.size();
    node.name = layer.name;
    node.kind = layer.kind;
    node.params = layer.params;
    node.parameterized = is_parameterized(layer.kind);
    for (const std::string& b : layer.bottoms) {
      auto it = producer.find(b);
      if (it == producer.end()) throw DanglingReference(b);
      node.parents.push_back(it->second);
      consumed.insert(b);
    }
    for (const std::string& t : layer.tops) producer[t] = ValueRef::node(node.id);
    graph.nodes.push_back(std::move(node));
  }

  // Outputs: nodes none of whose tops feed another layer.
  std::set<std::size_t> feeding;
  for (const OperatorNode& node : graph.nodes) {
    for (const ValueRef& p : node.parents) {
      if (!p.is_input()) feeding.insert(p.index);
    }
  }
  for (const OperatorNode& node : graph.nodes) {
    if (!feeding.count(node.id)) graph.outputs.push_back(node.id);
  }
  // Parents precede children by construction, so the document order is a
  // topological order; topo_order() double-checks acyclicity.
  topo_order(graph);
  return graph;
}

OperatorGraph infer_shapes(OperatorGraph graph, std::span<const Shape3> entry_shapes) {
  if (!entry_shapes.empty()) {
    if (entry_shapes.size() != graph.inputs.size()) {
      throw ShapesMissing(std::to_string(entry_shapes.size()) + " entry shapes for " +
                          std::to_string(graph.inputs.size()) + " graph inputs");
    }
    for (std::size_t i = 0; i < entry_shapes.size(); ++i) graph.inputs[i].shape = entry_shapes[i];
  }
  for (const GraphInput& in : graph.inputs) {
    if (!in.shape) throw ShapesMissing("no shape for graph input '" + in.name + "'");
    if (in.shape->numel() == 0) throw ShapeMismatch(in.name, "empty input shape");
  }
  for (std::size_t id : topo_order(graph)) {
    OperatorNode& node = graph.nodes[id];
    node.in_shapes.clear();
    for (const ValueRef& p : node.parents) {
      node.in_shapes.push_back(p.is_input() ? *graph.inputs[p.index].shape
                                            : *graph.nodes[p.index].out_shape);
    }
    const Shape3 out = infer_node(node);
    if (out.channels == 0 || out.height == 0 || out.width == 0) {
      throw ShapeMismatch(node.name, "non-positive output " + to_string(out));
    }
    node.out_shape = out;
    node.param_count = count_params(node);
  }
  return graph;
}

OperatorGraph infer_shapes(OperatorGraph graph, const Shape3& input_shape) {
  return infer_shapes(std::move(graph), std::span<const Shape3>(&input_shape, 1));
}

std::int64_t count_params(const OperatorNode& node) {
  if (!node.parameterized) return 0;
  if (node.in_shapes.empty() || !node.out_shape) {
    throw ShapesMissing("node '" + node.name + "' has no inferred shapes");
  }
  const auto in = static_cast<std::int64_t>(node.in_shape().channels);
  switch (node.kind) {
    case LayerKind::kConvolution: {
      const auto& p = std::get<ConvolutionParams>(node.params);
      return p.num_output * in * p.kernel_size * p.kernel_size + (p.bias_term ? p.num_output : 0);
    }
    case LayerKind::kInnerProduct: {
      const auto& p = std::get<InnerProductParams>(node.params);
      const auto fan_in = static_cast<std::int64_t>(node.in_shape().numel());
      return p.num_output * fan_in + (p.bias_term ? p.num_output : 0);
    }
    case LayerKind::kBatchNorm:
      return 2 * in;
    default:
      return 0;
  }
}

std::vector<std::size_t> topo_order(const OperatorGraph& graph) {
  const std::size_t n = graph.nodes.size();
  std::vector<std::size_t> indegree(n, 0);
  std::vector<std::vector<std::size_t>> children(n);
  for (const OperatorNode& node : graph.nodes) {
    for (const ValueRef& p : node.parents) {
      if (p.is_input()) continue;
      if (p.index >= n) throw CycleDetected("node '" + node.name + "' has an unknown parent");
      ++indegree[node.id];
      children[p.index].push_back(node.id);
    }
  }
  // Min-heap on id keeps the order stable with respect to the document.
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t id = ready.top();
    ready.pop();
    order.push_back(id);
    for (std::size_t c : children[id]) {
      if (--indegree[c] == 0) ready.push(c);
    }
  }
  if (order.size() != n) throw CycleDetected("operator graph contains a cycle");
  return order;
}

OperatorGraph load_graph(const std::string& prototxt_path) {
  return infer_shapes(build_graph(load_network(prototxt_path)));
}

nlohmann::json to_json(const OperatorGraph& graph) {
  using nlohmann::json;
  auto shape_json = [](const Shape3& s) { return json::array({s.channels, s.height, s.width}); };
  auto ref_json = [](const ValueRef& r) {
    return json{{"source", r.is_input() ? "input" : "node"}, {"index", r.index}};
  };
  json nodes = json::array();
  json edges = json::array();
  for (const OperatorNode& node : graph.nodes) {
    json parents = json::array();
    for (const ValueRef& p : node.parents) {
      parents.push_back(ref_json(p));
      edges.push_back({{"from", ref_json(p)}, {"to", node.id}});
    }
    json in_shapes = json::array();
    for (const Shape3& s : node.in_shapes) in_shapes.push_back(shape_json(s));
    nodes.push_back({{"id", node.id},
                     {"name", node.name},
                     {"kind", to_string(node.kind)},
                     {"parents", parents},
                     {"in_shapes", in_shapes},
                     {"out_shape", node.out_shape ? shape_json(*node.out_shape) : json()},
                     {"param_count", node.param_count},
                     {"parameterized", node.parameterized}});
  }
  json inputs = json::array();
  for (const GraphInput& in : graph.inputs) {
    inputs.push_back({{"name", in.name}, {"shape", in.shape ? shape_json(*in.shape) : json()}});
  }
  json out = {{"name", graph.name},
              {"inputs", inputs},
              {"nodes", nodes},
              {"edges", edges},
              {"outputs", graph.outputs},
              {"L_total", graph.l_total()},
              {"L_param", graph.l_param()}};
  if (graph.shapes_inferred()) out["total_params"] = graph.total_params();
  return out;
}

}  // namespace mtlc
