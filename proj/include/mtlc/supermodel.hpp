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

#ifndef MTLC_SUPERMODEL_HPP_
#define MTLC_SUPERMODEL_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/graph.hpp"
#include "mtlc/operators.hpp"

namespace mtlc {

enum Branch : int { kShared = 0, kSpecific = 1, kSkip = 2 };
std::string branch_name(int branch);

// One node of the supermodel, mirroring one backbone operator. Parameterized
// operators become choice nodes carrying every branch for every task;
// everything else is a pass-through executed on each task path.
struct VirtualComputationNode {
  std::size_t node_id = 0;
  std::vector<ValueRef> parents;  // same indices as the backbone graph
  bool choice = false;
  std::size_t depth_index = 0;  // among choice nodes; meaningful when choice

  Operator shared_op;                   // also the pass-through operator
  std::vector<Operator> task_specific;  // one per task
  std::vector<SkipOp> skips;            // one per task, empty when disabled
  bool skip_enabled = false;
  std::vector<ag::Var> policy_logits;  // one {branch_count} vector per task

  std::size_t branch_count() const { return skip_enabled ? 3 : 2; }
};
using VCN = VirtualComputationNode;

struct CompileOptions {
  std::uint64_t weight_seed = 0;
  bool materialize_weights = true;
};

class Supermodel {
 public:
  const OperatorGraph& graph() const { return graph_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t num_tasks() const { return tasks_.size(); }
  // Number of choice nodes.
  std::size_t num_choices() const { return choice_ids_.size(); }

  std::vector<VCN>& vcns() { return vcns_; }
  const std::vector<VCN>& vcns() const { return vcns_; }
  // VCN ids of choice nodes ordered by depth_index.
  const std::vector<std::size_t>& choice_ids() const { return choice_ids_; }
  VCN& choice(std::size_t depth) { return vcns_[choice_ids_[depth]]; }
  const VCN& choice(std::size_t depth) const { return vcns_[choice_ids_[depth]]; }

  std::vector<Head>& heads() { return heads_; }
  const std::vector<Head>& heads() const { return heads_; }
  std::size_t output_node() const { return output_node_; }

  // Backbone capacity C: parameters of one copy of every backbone operator.
  std::int64_t backbone_capacity() const;
  std::int64_t head_params() const;

  // Weights of shared ops, task copies and heads (no logits).
  std::vector<ag::Var> weights() const;
  std::vector<ag::Var> logits() const;
  // Running statistics of every BatchNorm instance, in weights() order.
  std::vector<ag::BatchNormState*> bn_states();

  // Number of discrete architectures: product over choice nodes of
  // branch_count^N.
  double search_space_log3() const;
  std::string search_space_exact() const;
  std::size_t two_way_count() const;

  // Soft-routed forward. branch_weights[t][l] is a {branch_count} weighting
  // of choice node l for task t. Returns one head output per task.
  std::vector<ag::Var> forward(std::span<const ag::Var> inputs,
                               const std::vector<std::vector<ag::Var>>& branch_weights,
                               const ForwardContext& ctx);

  nlohmann::json summary() const;

 private:
  friend Supermodel compile_supermodel(const OperatorGraph&, const std::vector<TaskSpec>&,
                                       const CompileOptions&);
  OperatorGraph graph_;
  std::vector<TaskSpec> tasks_;
  std::vector<VCN> vcns_;
  std::vector<std::size_t> choice_ids_;
  std::vector<Head> heads_;
  std::size_t output_node_ = 0;
};

// The graph must have inferred shapes and a single output node; heads are
// attached to that output.
Supermodel compile_supermodel(const OperatorGraph& graph, const std::vector<TaskSpec>& tasks,
                              const CompileOptions& options = {});

struct CapacityBounds {
  std::int64_t min_params = 0;
  std::int64_t max_params = 0;
  std::int64_t all_shared = 0;
};

// min counts one shared copy at choice nodes whose skip is disabled.
CapacityBounds capacity_bounds(const Supermodel& model);

// choice[t][l] in {0,1,2} for task t, choice node l (depth order).
struct DiscretePolicy {
  std::vector<std::vector<int>> choice;

  std::size_t num_tasks() const { return choice.size(); }
  std::size_t num_choices() const { return choice.empty() ? 0 : choice[0].size(); }
  bool operator==(const DiscretePolicy&) const = default;

  static DiscretePolicy uniform(std::size_t tasks, std::size_t choices, int branch);
};

// Throws PolicyShapeMismatch on wrong dimensions or unavailable branches.
void check_policy(const Supermodel& model, const DiscretePolicy& policy);

struct ParamBreakdown {
  std::int64_t shared = 0;
  std::int64_t specific = 0;
  std::int64_t skip = 0;
  std::int64_t heads = 0;
  std::int64_t total() const { return shared + specific + skip + heads; }
};

// Pruned executable model. Each backbone position holds only the operators
// some task selected; a shared op is kept once however many tasks use it.
class MultiTaskModel {
 public:
  struct Position {
    std::size_t node_id = 0;
    std::vector<ValueRef> parents;
    bool choice = false;
    std::size_t depth_index = 0;
    std::vector<int> selected;  // per task, choice nodes only
    std::optional<Operator> op;  // shared op, or the pass-through op
    std::map<std::size_t, Operator> specific;  // keyed by task
    SkipOp skip;
    // Execution-instance ids used by the reuse cache and the counters.
    std::size_t op_instance = 0;
    std::map<std::size_t, std::size_t> specific_instance;
    std::size_t skip_instance = 0;
  };

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t num_tasks() const { return tasks_.size(); }
  const DiscretePolicy& policy() const { return policy_; }
  const std::vector<Position>& positions() const { return positions_; }
  std::vector<Head>& heads() { return heads_; }
  const std::vector<Head>& heads() const { return heads_; }
  std::size_t num_instances() const { return instance_names_.size(); }
  const std::vector<std::string>& instance_names() const { return instance_names_; }

  ParamBreakdown param_breakdown() const;
  std::int64_t param_count() const { return param_breakdown().total(); }
  std::vector<ag::Var> weights() const;
  std::vector<ag::BatchNormState*> bn_states();

  // Kaiming re-initialization of every retained operator and head.
  void reinitialize(Rng& rng);

  // Evaluates each distinct (instance, inputs) pair once. Counters receive
  // per-instance execution counts when non-null (sized num_instances()).
  std::vector<ag::Var> forward_multitask(std::span<const ag::Var> inputs, const ForwardContext& ctx,
                                         std::vector<std::size_t>* counters = nullptr);
  // Reference path: each task evaluated independently, no reuse.
  std::vector<ag::Var> forward_naive(std::span<const ag::Var> inputs, const ForwardContext& ctx,
                                     std::vector<std::size_t>* counters = nullptr);

  // Instance executed by task t at position p (the op, its copy, or skip).
  std::size_t instance_for(std::size_t position, std::size_t task) const;

 private:
  friend MultiTaskModel derive_model(const Supermodel&, const DiscretePolicy&);
  std::vector<ag::Var> run(std::span<const ag::Var> inputs, const ForwardContext& ctx,
                           std::vector<std::size_t>* counters, bool reuse);
  ag::Var execute(std::size_t position, std::size_t task, std::span<const ag::Var> args,
                  const ForwardContext& ctx);

  std::vector<TaskSpec> tasks_;
  DiscretePolicy policy_;
  std::vector<Position> positions_;
  std::vector<Head> heads_;
  std::size_t output_node_ = 0;
  std::vector<std::string> instance_names_;
};

// Weights are deep-copied, so training the result leaves the supermodel
// untouched.
MultiTaskModel derive_model(const Supermodel& model, const DiscretePolicy& policy);

}  // namespace mtlc

#endif  // MTLC_SUPERMODEL_HPP_
