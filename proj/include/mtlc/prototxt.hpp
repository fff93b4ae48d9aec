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

// Frontend for the Caffe-style network definitions ("prototxt").
//
// The accepted text grammar is documented in docs/prototxt_grammar.md. Only
// nine layer kinds are supported; any other `type` is rejected rather than
// skipped so that compiled supermodels never silently drop operators.
//
// In-place layers (bottom == top, as Caffe writes ReLU and BatchNorm) are
// rewritten to fresh tensor names during parsing, so every tensor name in a
// NetworkSpec is produced exactly once.

#ifndef MTLC_PROTOTXT_HPP_
#define MTLC_PROTOTXT_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/tensor.hpp"

namespace mtlc {

// --- generic text-format tree ---

struct TextMessage;

struct TextField {
  enum class Kind { kString, kNumber, kIdent, kMessage };
  std::string name;
  Kind kind = Kind::kIdent;
  std::string scalar;                    // unquoted value for scalar kinds
  std::shared_ptr<TextMessage> message;  // set for kMessage
  int line = 0;
  int column = 0;
};

struct TextMessage {
  std::vector<TextField> fields;

  const TextField* find(std::string_view name) const;
  std::vector<const TextField*> find_all(std::string_view name) const;
};

// Tokenizes and parses the generic grammar; throws SyntaxError.
TextMessage parse_text_format(std::string_view text);

// --- network definition ---

enum class LayerKind {
  kInput,
  kConvolution,
  kBatchNorm,
  kReLU,
  kPooling,
  kInnerProduct,
  kEltwise,
  kConcat,
  kDropout,
};

std::string to_string(LayerKind kind);
std::optional<LayerKind> layer_kind_from_string(std::string_view name);

enum class PoolMode { kMax, kAverage };

struct InputParams {
  std::vector<Dims> shapes;  // one per top, full shape including batch
  bool operator==(const InputParams&) const = default;
};

struct ConvolutionParams {
  std::int64_t num_output = 0;
  std::int64_t kernel_size = 0;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  bool bias_term = true;
  bool operator==(const ConvolutionParams&) const = default;
};

struct BatchNormParams {
  double eps = 1e-5;
  double moving_average_fraction = 0.999;
  bool operator==(const BatchNormParams&) const = default;
};

struct ReLUParams {
  bool operator==(const ReLUParams&) const = default;
};

struct PoolingParams {
  PoolMode mode = PoolMode::kMax;
  std::int64_t kernel_size = 0;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  bool global_pooling = false;
  bool operator==(const PoolingParams&) const = default;
};

struct InnerProductParams {
  std::int64_t num_output = 0;
  bool bias_term = true;
  bool operator==(const InnerProductParams&) const = default;
};

struct EltwiseParams {
  // SUM is the only supported operation.
  bool operator==(const EltwiseParams&) const = default;
};

struct ConcatParams {
  bool operator==(const ConcatParams&) const = default;
};

struct DropoutParams {
  double ratio = 0.5;
  bool operator==(const DropoutParams&) const = default;
};

using KindParams = std::variant<InputParams, ConvolutionParams, BatchNormParams, ReLUParams,
                                PoolingParams, InnerProductParams, EltwiseParams,
                                ConcatParams, DropoutParams>;

KindParams default_params(LayerKind kind);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kReLU;
  std::vector<std::string> bottoms;
  std::vector<std::string> tops;
  KindParams params;
  bool operator==(const LayerSpec&) const = default;
};

// Legacy top-level `input:` declaration.
struct InputDecl {
  std::string name;
  Dims shape;
  bool operator==(const InputDecl&) const = default;
};

struct NetworkSpec {
  std::string name;
  std::vector<InputDecl> inputs;
  std::vector<LayerSpec> layers;
  bool operator==(const NetworkSpec&) const = default;
};

// Parses and validates; throws SyntaxError, UnsupportedLayer,
// DanglingReference, or InvalidLayer (when validate_spec reports errors).
NetworkSpec parse_network(std::string_view text);
// Same as parse_network but skips the validate_spec gate.
NetworkSpec parse_network_unchecked(std::string_view text);
NetworkSpec load_network(const std::string& path);

// --- validation ---

enum class FindingKind {
  kDuplicateName,
  kDuplicateTop,
  kArityMismatch,
  kMissingParam,
  kInvalidParam,
  kDanglingReference,
  kUnreferencedTop,  // warning
};

std::string to_string(FindingKind kind);

struct Finding {
  FindingKind kind;
  std::string layer;
  std::string detail;
  bool warning = false;
};

struct ValidationReport {
  std::vector<Finding> findings;

  bool ok() const;  // no error-severity findings
  std::size_t count(FindingKind kind) const;
};

ValidationReport validate_spec(const NetworkSpec& spec);

// --- output ---

// Canonical prototxt: every parameter written explicitly, fixed field order.
std::string print_network(const NetworkSpec& spec);
nlohmann::json to_json(const NetworkSpec& spec);

}  // namespace mtlc

#endif  // MTLC_PROTOTXT_HPP_
