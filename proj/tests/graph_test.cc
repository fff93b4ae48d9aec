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

#include <gtest/gtest.h>

#include "mtlc/errors.hpp"
#include "mtlc/graph.hpp"
#include "test_util.hpp"

namespace mtlc {
namespace {

OperatorGraph graph_of(const std::string& body, Shape3 input = {3, 32, 32}) {
  const std::string text = R"(layer { name: "data" type: "Input" top: "data" })" + body;
  return infer_shapes(build_graph(parse_network(text)), input);
}

OperatorNode conv_node(std::int64_t out, std::int64_t k, bool bias, Shape3 in) {
  OperatorNode n;
  n.name = "c";
  n.kind = LayerKind::kConvolution;
  n.params = ConvolutionParams{out, k, 1, 0, bias};
  n.parameterized = true;
  n.in_shapes = {in};
  n.out_shape = Shape3{static_cast<std::size_t>(out), in.height - k + 1, in.width - k + 1};
  return n;
}

TEST(BuildGraphTest, ConvThenRelu) {
  const OperatorGraph g = graph_of(R"(
layer { name: "c" type: "Convolution" bottom: "data" top: "c" convolution_param { num_output: 2 kernel_size: 1 } }
layer { name: "r" type: "ReLU" bottom: "c" top: "c" }
)");
  ASSERT_EQ(g.nodes.size(), 2u);
  EXPECT_EQ(g.nodes[1].parents, std::vector<ValueRef>{ValueRef::node(0)});
  EXPECT_EQ(g.nodes[0].parents, std::vector<ValueRef>{ValueRef::input(0)});
  EXPECT_EQ(g.outputs, std::vector<std::size_t>{1});
}

TEST(BuildGraphTest, ResidualJoinHasTwoParents) {
  const OperatorGraph g = load_graph(testing::fixture("residual_small.prototxt"));
  for (const OperatorNode& n : g.nodes) {
    if (n.kind == LayerKind::kEltwise) EXPECT_EQ(n.parents.size(), 2u) << n.name;
  }
}

TEST(BuildGraphTest, NodeCountIsLayersMinusInputs) {
  for (const char* name : {"resnet34.prototxt", "resnet34_quarter.prototxt", "residual_small.prototxt",
                           "branchy.prototxt", "chain6.prototxt", "desk4.prototxt"}) {
    const NetworkSpec spec = load_network(testing::fixture(name));
    std::size_t inputs = 0;
    for (const LayerSpec& l : spec.layers) inputs += l.kind == LayerKind::kInput;
    EXPECT_EQ(build_graph(spec).nodes.size(), spec.layers.size() - inputs) << name;
  }
}

TEST(InferShapesTest, ConvolutionAndPoolingFormula) {
  const OperatorGraph g = graph_of(R"(
layer { name: "c" type: "Convolution" bottom: "data" top: "c"
  convolution_param { num_output: 16 kernel_size: 3 stride: 1 pad: 1 } }
layer { name: "p" type: "Pooling" bottom: "c" top: "p" pooling_param { pool: MAX kernel_size: 2 stride: 2 } }
)");
  EXPECT_EQ(*g.nodes[0].out_shape, (Shape3{16, 32, 32}));
  EXPECT_EQ(*g.nodes[1].out_shape, (Shape3{16, 16, 16}));
}

TEST(InferShapesTest, ResNetStem) {
  const OperatorGraph g = graph_of(R"(
layer { name: "c" type: "Convolution" bottom: "data" top: "c"
  convolution_param { num_output: 64 kernel_size: 7 stride: 2 pad: 3 } }
)",
                                   {3, 224, 224});
  // floor((224 + 6 - 7) / 2) + 1 = 112
  EXPECT_EQ(*g.nodes[0].out_shape, (Shape3{64, 112, 112}));
}

TEST(InferShapesTest, ConcatSumsChannels) {
  const OperatorGraph g = load_graph(testing::fixture("branchy.prototxt"));
  for (const OperatorNode& n : g.nodes) {
    if (n.kind == LayerKind::kConcat) EXPECT_EQ(*n.out_shape, (Shape3{5, 9, 9}));
  }
}

TEST(InferShapesTest, EltwiseMismatchIsAnError) {
  EXPECT_THROW(graph_of(R"(
layer { name: "a" type: "Convolution" bottom: "data" top: "a" convolution_param { num_output: 2 kernel_size: 1 } }
layer { name: "b" type: "Convolution" bottom: "data" top: "b" convolution_param { num_output: 3 kernel_size: 1 } }
layer { name: "s" type: "Eltwise" bottom: "a" bottom: "b" top: "s" }
)"),
               ShapeMismatch);
}

TEST(InferShapesTest, NonPositiveExtentIsAnError) {
  EXPECT_THROW(graph_of(R"(
layer { name: "c" type: "Convolution" bottom: "data" top: "c" convolution_param { num_output: 2 kernel_size: 5 } }
)",
                        {3, 4, 4}),
               ShapeMismatch);
}

TEST(InferShapesTest, MissingEntryShape) {
  const OperatorGraph g = build_graph(parse_network(R"(layer { name: "data" type: "Input" top: "data" }
layer { name: "r" type: "ReLU" bottom: "data" top: "r" })"));
  EXPECT_THROW(infer_shapes(g), ShapesMissing);
  EXPECT_THROW(count_params(conv_node(2, 1, true, {3, 4, 4}) = OperatorNode{.name = "x",
                                                                           .kind = LayerKind::kConvolution,
                                                                           .params = ConvolutionParams{2, 1},
                                                                           .parameterized = true}),
               ShapesMissing);
}

TEST(InferShapesTest, DeterministicAndParamCountInvariant) {
  const OperatorGraph raw = build_graph(load_network(testing::fixture("resnet34_quarter.prototxt")));
  const OperatorGraph a = infer_shapes(raw);
  const OperatorGraph b = infer_shapes(raw);
  EXPECT_EQ(raw.l_param(), a.l_param());
  ASSERT_EQ(a.nodes.size(), b.nodes.size());
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    EXPECT_EQ(a.nodes[i].out_shape, b.nodes[i].out_shape);
    EXPECT_EQ(a.nodes[i].param_count, b.nodes[i].param_count);
  }
}

TEST(CountParamsTest, Formulas) {
  EXPECT_EQ(count_params(conv_node(16, 3, true, {3, 8, 8})), 448);
  EXPECT_EQ(count_params(conv_node(16, 3, false, {3, 8, 8})), 432);
  OperatorNode relu{.name = "r", .kind = LayerKind::kReLU, .params = ReLUParams{}};
  EXPECT_EQ(count_params(relu), 0);
  OperatorNode bn{.name = "bn", .kind = LayerKind::kBatchNorm, .params = BatchNormParams{}, .parameterized = true};
  bn.in_shapes = {{64, 4, 4}};
  bn.out_shape = Shape3{64, 4, 4};
  EXPECT_EQ(count_params(bn), 128);
  OperatorNode fc{.name = "fc", .kind = LayerKind::kInnerProduct, .params = InnerProductParams{10, true},
                  .parameterized = true};
  fc.in_shapes = {{4, 2, 2}};
  fc.out_shape = Shape3{10, 1, 1};
  EXPECT_EQ(count_params(fc), 170);
}

TEST(CountParamsTest, FullResNet34MatchesReferenceCount) {
  // Reference: torchvision resnet34 reports 21,797,672 trainable parameters.
  const OperatorGraph g = load_graph(testing::fixture("resnet34.prototxt"));
  EXPECT_EQ(g.total_params(), 21797672);
  std::int64_t total = 0;
  for (const OperatorNode& n : g.nodes) {
    total += n.param_count;
    if (!n.parameterized) EXPECT_EQ(n.param_count, 0);
  }
  EXPECT_EQ(total, g.total_params());
  // 36 convolutions, 36 batch norms, 1 classifier.
  EXPECT_EQ(g.l_param(), 73u);
}

TEST(TopoOrderTest, ChainAndDiamond) {
  const OperatorGraph chain = graph_of(R"(
layer { name: "a" type: "ReLU" bottom: "data" top: "a" }
layer { name: "b" type: "ReLU" bottom: "a" top: "b" }
layer { name: "c" type: "ReLU" bottom: "b" top: "c" }
)");
  EXPECT_EQ(topo_order(chain), (std::vector<std::size_t>{0, 1, 2}));
  const OperatorGraph diamond = graph_of(R"(
layer { name: "fork" type: "ReLU" bottom: "data" top: "fork" }
layer { name: "l" type: "ReLU" bottom: "fork" top: "l" }
layer { name: "r" type: "ReLU" bottom: "fork" top: "r" }
layer { name: "join" type: "Eltwise" bottom: "l" bottom: "r" top: "join" }
)");
  EXPECT_EQ(topo_order(diamond), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(TopoOrderTest, ParentsPrecedeChildrenAndOrderIsStable) {
  const OperatorGraph g = load_graph(testing::fixture("residual_small.prototxt"));
  const auto order = topo_order(g);
  EXPECT_EQ(order, topo_order(g));
  std::vector<std::size_t> position(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = i;
  for (const OperatorNode& n : g.nodes) {
    for (const ValueRef& p : n.parents) {
      if (!p.is_input()) EXPECT_LT(position[p.index], position[n.id]);
    }
  }
}

TEST(TopoOrderTest, CycleIsDetected) {
  OperatorGraph g = graph_of(R"(
layer { name: "a" type: "ReLU" bottom: "data" top: "a" }
layer { name: "b" type: "ReLU" bottom: "a" top: "b" }
)");
  g.nodes[0].parents = {ValueRef::node(1)};
  EXPECT_THROW(topo_order(g), CycleDetected);
}

TEST(GraphJsonTest, DumpCarriesShapesAndCounts) {
  const OperatorGraph g = load_graph(testing::fixture("desk4.prototxt"));
  const auto j = to_json(g);
  EXPECT_EQ(j["L_param"], 4);
  EXPECT_EQ(j["L_total"], 8);
  EXPECT_EQ(j["nodes"][0]["out_shape"], nlohmann::json::array({8, 16, 16}));
  EXPECT_EQ(j["nodes"][0]["param_count"], 8 * 3 * 9 + 8);
  EXPECT_EQ(j["total_params"], g.total_params());
  EXPECT_EQ(j["edges"].size(), 8u);
}

}  // namespace
}  // namespace mtlc
