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

#include "mtlc/supermodel.hpp"

#include <cmath>
#include <limits>

#include <boost/multiprecision/cpp_int.hpp>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

nlohmann::json shape_json(const Shape3& s) {
  return nlohmann::json::array({s.channels, s.height, s.width});
}

// Cache of already computed values, keyed by the executing instance and the
// identities of its arguments.
class ReuseCache {
 public:
  using Key = std::pair<const void*, std::vector<const void*>>;

  template <typename Fn>
  ag::Var get(const void* instance, std::span<const ag::Var> args, Fn&& compute) {
    Key key{instance, {}};
    for (const ag::Var& a : args) key.second.push_back(a.node());
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ag::Var out = compute();
    cache_.emplace(std::move(key), out);
    return out;
  }

 private:
  std::map<Key, ag::Var> cache_;
};

}  // namespace

std::string branch_name(int branch) {
  switch (branch) {
    case kShared: return "shared";
    case kSpecific: return "specific";
    case kSkip: return "skip";
  }
  return "?";
}

// --- Supermodel ---

std::int64_t Supermodel::backbone_capacity() const {
  std::int64_t c = 0;
  for (const VCN& v : vcns_) c += v.shared_op.param_count();
  return c;
}

std::int64_t Supermodel::head_params() const {
  std::int64_t h = 0;
  for (const Head& head : heads_) h += head.param_count();
  return h;
}

std::vector<ag::Var> Supermodel::weights() const {
  std::vector<ag::Var> out;
  for (const VCN& v : vcns_) {
    for (const ag::Var& p : v.shared_op.parameters()) out.push_back(p);
    for (const Operator& op : v.task_specific) {
      for (const ag::Var& p : op.parameters()) out.push_back(p);
    }
  }
  for (const Head& head : heads_) {
    for (const ag::Var& p : head.parameters()) out.push_back(p);
  }
  return out;
}

std::vector<ag::BatchNormState*> Supermodel::bn_states() {
  std::vector<ag::BatchNormState*> out;
  for (VCN& v : vcns_) {
    if (v.shared_op.kind() != LayerKind::kBatchNorm) continue;
    out.push_back(&v.shared_op.bn_state());
    for (Operator& op : v.task_specific) out.push_back(&op.bn_state());
  }
  return out;
}

std::vector<ag::Var> Supermodel::logits() const {
  std::vector<ag::Var> out;
  for (std::size_t id : choice_ids_) {
    for (const ag::Var& l : vcns_[id].policy_logits) out.push_back(l);
  }
  return out;
}

double Supermodel::search_space_log3() const {
  double total = 0.0;
  for (std::size_t id : choice_ids_) {
    total += static_cast<double>(num_tasks()) *
             (std::log(static_cast<double>(vcns_[id].branch_count())) / std::log(3.0));
  }
  return total;
}

std::string Supermodel::search_space_exact() const {
  boost::multiprecision::cpp_int n = 1;
  for (std::size_t id : choice_ids_) {
    for (std::size_t t = 0; t < num_tasks(); ++t) n *= vcns_[id].branch_count();
  }
  return n.str();
}

std::size_t Supermodel::two_way_count() const {
  std::size_t n = 0;
  for (std::size_t id : choice_ids_) n += !vcns_[id].skip_enabled;
  return n;
}

std::vector<ag::Var> Supermodel::forward(std::span<const ag::Var> inputs,
                                         const std::vector<std::vector<ag::Var>>& branch_weights,
                                         const ForwardContext& ctx) {
  const std::size_t n = num_tasks();
  if (inputs.size() != graph_.inputs.size()) {
    throw ShapeMismatch("input", std::to_string(inputs.size()) + " inputs for " +
                                     std::to_string(graph_.inputs.size()) + " graph entries");
  }
  if (branch_weights.size() != n) {
    throw PolicyShapeMismatch("branch weights for " + std::to_string(branch_weights.size()) +
                              " tasks, expected " + std::to_string(n));
  }
  for (const auto& row : branch_weights) {
    if (row.size() != num_choices()) {
      throw PolicyShapeMismatch("branch weights for " + std::to_string(row.size()) +
                                " choice nodes, expected " + std::to_string(num_choices()));
    }
  }

  ReuseCache cache;
  std::vector<std::vector<ag::Var>> values(n, std::vector<ag::Var>(vcns_.size()));
  std::vector<ag::Var> args;
  for (std::size_t t = 0; t < n; ++t) {
    for (VCN& v : vcns_) {
      args.clear();
      for (const ValueRef& p : v.parents) args.push_back(p.is_input() ? inputs[p.index] : values[t][p.index]);
      if (!v.choice) {
        values[t][v.node_id] = cache.get(&v.shared_op, args, [&] { return v.shared_op.forward(args, ctx); });
        continue;
      }
      const ag::Var& w = branch_weights[t][v.depth_index];
      if (w.shape() != Dims{v.branch_count()}) {
        throw PolicyShapeMismatch("choice node " + v.shared_op.name() + " expects " +
                                  std::to_string(v.branch_count()) + " branch weights");
      }
      std::vector<ag::Var> branches;
      branches.push_back(cache.get(&v.shared_op, args, [&] { return v.shared_op.forward(args, ctx); }));
      branches.push_back(v.task_specific[t].forward(args, ctx));
      if (v.skip_enabled) branches.push_back(v.skips[t].forward(args[0]));
      values[t][v.node_id] = ag::weighted_sum(branches, w);
    }
  }
  std::vector<ag::Var> outputs;
  for (std::size_t t = 0; t < n; ++t) outputs.push_back(heads_[t].forward(values[t][output_node_], ctx));
  return outputs;
}

nlohmann::json Supermodel::summary() const {
  using nlohmann::json;
  json nodes = json::array();
  for (const VCN& v : vcns_) {
    json parents = json::array();
    for (const ValueRef& p : v.parents) {
      parents.push_back({{"source", p.is_input() ? "input" : "node"}, {"index", p.index}});
    }
    json in_shapes = json::array();
    for (const Shape3& s : v.shared_op.in_shapes()) in_shapes.push_back(shape_json(s));
    json entry = {{"id", v.node_id},
                  {"name", v.shared_op.name()},
                  {"kind", to_string(v.shared_op.kind())},
                  {"parents", parents},
                  {"choice", v.choice},
                  {"in_shapes", in_shapes},
                  {"out_shape", shape_json(v.shared_op.out_shape())},
                  {"param_count", v.shared_op.param_count()}};
    if (v.choice) {
      json branches = json::array({"shared", "specific"});
      if (v.skip_enabled) branches.push_back("skip");
      entry["depth_index"] = v.depth_index;
      entry["branches"] = branches;
      entry["skip_enabled"] = v.skip_enabled;
    }
    nodes.push_back(entry);
  }
  json tasks = json::array();
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    tasks.push_back({{"name", tasks_[t].name},
                     {"loss", to_string(tasks_[t].loss)},
                     {"output_dim", tasks_[t].output_dim},
                     {"weight", tasks_[t].weight},
                     {"head", to_string(tasks_[t].head)},
                     {"head_params", heads_[t].param_count()}});
  }
  const CapacityBounds bounds = capacity_bounds(*this);
  return {{"name", graph_.name},
          {"N", num_tasks()},
          {"L", num_choices()},
          {"L_total", vcns_.size()},
          {"two_way_vcns", two_way_count()},
          {"backbone_capacity", backbone_capacity()},
          {"search_space", {{"log3", search_space_log3()}, {"exact", search_space_exact()}}},
          {"capacity_bounds",
           {{"min", bounds.min_params}, {"max", bounds.max_params}, {"all_shared", bounds.all_shared}}},
          {"tasks", tasks},
          {"vcns", nodes}};
}

Supermodel compile_supermodel(const OperatorGraph& graph, const std::vector<TaskSpec>& tasks,
                              const CompileOptions& options) {
  if (tasks.empty()) throw EmptyTaskList();
  if (!graph.shapes_inferred()) throw ShapesMissing("compile_supermodel needs inferred shapes");
  if (graph.outputs.size() != 1) {
    throw InvalidLayer("backbone must have exactly one output, found " +
                       std::to_string(graph.outputs.size()));
  }
  const std::size_t n = tasks.size();
  const bool materialize = options.materialize_weights;
  Rng rng(options.weight_seed);

  Supermodel model;
  model.graph_ = graph;
  model.tasks_ = tasks;
  model.output_node_ = graph.outputs[0];
  model.vcns_.reserve(graph.nodes.size());
  for (std::size_t id : topo_order(graph)) {
    const OperatorNode& node = graph.nodes[id];
    VCN v;
    v.node_id = node.id;
    v.parents = node.parents;
    v.shared_op = Operator(node, materialize);
    if (materialize) v.shared_op.initialize(rng);
    if (node.parameterized) {
      v.choice = true;
      v.depth_index = model.choice_ids_.size();
      model.choice_ids_.push_back(node.id);
      for (std::size_t t = 0; t < n; ++t) v.task_specific.push_back(v.shared_op.clone());
      try {
        const SkipOp skip = make_skip(node.in_shape(), *node.out_shape);
        v.skips.assign(n, skip);
        v.skip_enabled = true;
      } catch (const IncompatibleShapes&) {
        v.skip_enabled = false;
      }
      for (std::size_t t = 0; t < n; ++t) {
        v.policy_logits.push_back(ag::Var::parameter(Tensor({v.branch_count()}, 0.0)));
      }
    }
    model.vcns_.push_back(std::move(v));
  }
  // vcns_ is indexed by node id; topo_order of a built graph is the identity.
  for (std::size_t i = 0; i < model.vcns_.size(); ++i) {
    if (model.vcns_[i].node_id != i) throw CycleDetected("graph nodes are not in topological order");
  }
  const Shape3 feature = *graph.nodes[model.output_node_].out_shape;
  for (const TaskSpec& task : tasks) {
    Head head(task, feature, materialize);
    if (materialize) head.initialize(rng);
    model.heads_.push_back(std::move(head));
  }
  return model;
}

CapacityBounds capacity_bounds(const Supermodel& model) {
  const std::int64_t c = model.backbone_capacity();
  const std::int64_t h = model.head_params();
  const auto n = static_cast<std::int64_t>(model.num_tasks());
  CapacityBounds b;
  b.max_params = n * c + h;
  b.all_shared = c + h;
  b.min_params = h;
  for (std::size_t id : model.choice_ids()) {
    const VCN& v = model.vcns()[id];
    if (!v.skip_enabled) b.min_params += v.shared_op.param_count();
  }
  return b;
}

DiscretePolicy DiscretePolicy::uniform(std::size_t tasks, std::size_t choices, int branch) {
  return {std::vector<std::vector<int>>(tasks, std::vector<int>(choices, branch))};
}

void check_policy(const Supermodel& model, const DiscretePolicy& policy) {
  if (policy.choice.size() != model.num_tasks()) {
    throw PolicyShapeMismatch("policy has " + std::to_string(policy.choice.size()) +
                              " tasks, supermodel has " + std::to_string(model.num_tasks()));
  }
  for (std::size_t t = 0; t < policy.choice.size(); ++t) {
    const auto& row = policy.choice[t];
    if (row.size() != model.num_choices()) {
      throw PolicyShapeMismatch("policy row " + std::to_string(t) + " has " +
                                std::to_string(row.size()) + " entries, expected " +
                                std::to_string(model.num_choices()));
    }
    for (std::size_t l = 0; l < row.size(); ++l) {
      const auto k = static_cast<int>(model.choice(l).branch_count());
      if (row[l] < 0 || row[l] >= k) {
        throw PolicyShapeMismatch("branch " + std::to_string(row[l]) + " unavailable at choice " +
                                  std::to_string(l) + " for task " + std::to_string(t));
      }
    }
  }
}

// --- MultiTaskModel ---

MultiTaskModel derive_model(const Supermodel& model, const DiscretePolicy& policy) {
  check_policy(model, policy);
  MultiTaskModel out;
  out.tasks_ = model.tasks();
  out.policy_ = policy;
  out.output_node_ = model.output_node();
  auto add_instance = [&](std::string name) {
    out.instance_names_.push_back(std::move(name));
    return out.instance_names_.size() - 1;
  };
  for (const VCN& v : model.vcns()) {
    MultiTaskModel::Position pos;
    pos.node_id = v.node_id;
    pos.parents = v.parents;
    pos.choice = v.choice;
    pos.op_instance = kNone;
    pos.skip_instance = kNone;
    const std::string& name = v.shared_op.name();
    if (!v.choice) {
      pos.op = v.shared_op.clone();
      pos.op_instance = add_instance(name);
      out.positions_.push_back(std::move(pos));
      continue;
    }
    pos.depth_index = v.depth_index;
    for (std::size_t t = 0; t < model.num_tasks(); ++t) pos.selected.push_back(policy.choice[t][v.depth_index]);
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
      if (pos.selected[t] == kShared && !pos.op) {
        pos.op = v.shared_op.clone();
        pos.op_instance = add_instance(name + "/shared");
      }
    }
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
      if (pos.selected[t] == kSpecific) {
        pos.specific.emplace(t, v.task_specific[t].clone());
        pos.specific_instance[t] = add_instance(name + "/" + model.tasks()[t].name);
      }
    }
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
      if (pos.selected[t] == kSkip && pos.skip_instance == kNone) {
        pos.skip = v.skips[t];
        pos.skip_instance = add_instance(name + "/skip");
      }
    }
    out.positions_.push_back(std::move(pos));
  }
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    out.heads_.push_back(model.heads()[t].clone());
    add_instance("head/" + model.tasks()[t].name);
  }
  return out;
}

ParamBreakdown MultiTaskModel::param_breakdown() const {
  ParamBreakdown b;
  for (const Position& p : positions_) {
    if (!p.choice) continue;
    if (p.op) b.shared += p.op->param_count();
    for (const auto& [t, op] : p.specific) b.specific += op.param_count();
    b.skip += p.skip_instance == kNone ? 0 : p.skip.param_count();
  }
  for (const Head& h : heads_) b.heads += h.param_count();
  return b;
}

std::vector<ag::Var> MultiTaskModel::weights() const {
  std::vector<ag::Var> out;
  for (const Position& p : positions_) {
    if (p.op) {
      for (const ag::Var& w : p.op->parameters()) out.push_back(w);
    }
    for (const auto& [t, op] : p.specific) {
      for (const ag::Var& w : op.parameters()) out.push_back(w);
    }
  }
  for (const Head& h : heads_) {
    for (const ag::Var& w : h.parameters()) out.push_back(w);
  }
  return out;
}

std::vector<ag::BatchNormState*> MultiTaskModel::bn_states() {
  std::vector<ag::BatchNormState*> out;
  for (Position& p : positions_) {
    if (p.op && p.op->kind() == LayerKind::kBatchNorm) out.push_back(&p.op->bn_state());
    for (auto& [t, op] : p.specific) {
      if (op.kind() == LayerKind::kBatchNorm) out.push_back(&op.bn_state());
    }
  }
  return out;
}

void MultiTaskModel::reinitialize(Rng& rng) {
  for (Position& p : positions_) {
    if (p.op) p.op->initialize(rng);
    for (auto& [t, op] : p.specific) op.initialize(rng);
  }
  for (Head& h : heads_) h.initialize(rng);
}

std::size_t MultiTaskModel::instance_for(std::size_t position, std::size_t task) const {
  const Position& p = positions_.at(position);
  if (!p.choice) return p.op_instance;
  switch (p.selected.at(task)) {
    case kShared: return p.op_instance;
    case kSpecific: return p.specific_instance.at(task);
    default: return p.skip_instance;
  }
}

ag::Var MultiTaskModel::execute(std::size_t position, std::size_t task, std::span<const ag::Var> args,
                                const ForwardContext& ctx) {
  Position& p = positions_[position];
  if (!p.choice) return p.op->forward(args, ctx);
  switch (p.selected[task]) {
    case kShared: return p.op->forward(args, ctx);
    case kSpecific: return p.specific.at(task).forward(args, ctx);
    default: return p.skip.forward(args[0]);
  }
}

std::vector<ag::Var> MultiTaskModel::run(std::span<const ag::Var> inputs, const ForwardContext& ctx,
                                         std::vector<std::size_t>* counters, bool reuse) {
  if (counters) counters->assign(num_instances(), 0);
  const std::size_t n = num_tasks();
  // Values are numbered: graph entries first, then each fresh computation.
  std::vector<ag::Var> store(inputs.begin(), inputs.end());
  std::vector<std::vector<std::size_t>> ids(n, std::vector<std::size_t>(positions_.size(), kNone));
  std::map<std::pair<std::size_t, std::vector<std::size_t>>, std::size_t> memo;
  std::vector<ag::Var> args;
  for (std::size_t pi = 0; pi < positions_.size(); ++pi) {
    const Position& pos = positions_[pi];
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<std::size_t> arg_ids;
      for (const ValueRef& r : pos.parents) arg_ids.push_back(r.is_input() ? r.index : ids[t][r.index]);
      const std::size_t inst = instance_for(pi, t);
      if (reuse) {
        auto it = memo.find({inst, arg_ids});
        if (it != memo.end()) {
          ids[t][pi] = it->second;
          continue;
        }
      }
      args.clear();
      for (std::size_t a : arg_ids) args.push_back(store[a]);
      store.push_back(execute(pi, t, args, ctx));
      if (counters) ++(*counters)[inst];
      ids[t][pi] = store.size() - 1;
      if (reuse) memo.emplace(std::make_pair(inst, std::move(arg_ids)), ids[t][pi]);
    }
  }
  std::vector<ag::Var> outputs;
  const std::size_t head_base = num_instances() - n;
  for (std::size_t t = 0; t < n; ++t) {
    outputs.push_back(heads_[t].forward(store[ids[t][output_node_]], ctx));
    if (counters) ++(*counters)[head_base + t];
  }
  return outputs;
}

std::vector<ag::Var> MultiTaskModel::forward_multitask(std::span<const ag::Var> inputs,
                                                       const ForwardContext& ctx,
                                                       std::vector<std::size_t>* counters) {
  return run(inputs, ctx, counters, true);
}

std::vector<ag::Var> MultiTaskModel::forward_naive(std::span<const ag::Var> inputs,
                                                   const ForwardContext& ctx,
                                                   std::vector<std::size_t>* counters) {
  return run(inputs, ctx, counters, false);
}

}  // namespace mtlc
