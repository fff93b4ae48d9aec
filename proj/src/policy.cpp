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

#include "mtlc/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

std::vector<double> softmax_values(const Tensor& logits) {
  double mx = logits[0];
  for (double v : logits.data()) mx = std::max(mx, v);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) z += out[k] = std::exp(logits[k] - mx);
  for (double& v : out) v /= z;
  return out;
}

}  // namespace

ag::Var soft_policy(const ag::Var& logits, const Tensor& gumbels, double tau) {
  if (!(tau > 0.0)) throw InvalidConfig("temperature must be positive");
  const ag::Var log_pi = ag::clamp_min(ag::log_softmax(logits), kLogPiFloor);
  return ag::softmax(ag::scale(ag::add_constant(log_pi, gumbels), 1.0 / tau));
}

ag::Var policy_regularization(const std::vector<std::vector<ag::Var>>& soft) {
  std::vector<ag::Var> terms;
  for (const auto& row : soft) {
    const double depth = static_cast<double>(row.size());
    for (std::size_t l = 0; l < row.size(); ++l) {
      const ag::Var& p = row[l];
      const ag::Var p0 = ag::pick(p, 0);
      ag::Var term = ag::softplus(ag::sub(ag::pick(p, 1), p0));
      if (p.value().size() == 3) term = ag::add(term, ag::softplus(ag::sub(ag::pick(p, 2), p0)));
      terms.push_back(ag::scale(term, (depth - static_cast<double>(l)) / depth));
    }
  }
  if (terms.empty()) return ag::Var::constant(Tensor::scalar(0.0));
  return ag::add_all(terms);
}

ag::Var total_loss(std::span<const ag::Var> task_losses, std::span<const double> lambdas,
                   const ag::Var& l_reg, double lambda_reg) {
  if (task_losses.size() != lambdas.size()) {
    throw InvalidConfig("one loss weight per task is required");
  }
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < task_losses.size(); ++i) {
    if (lambdas[i] < 0.0) throw InvalidConfig("task loss weights must be non-negative");
    terms.push_back(ag::scale(task_losses[i], lambdas[i]));
  }
  if (lambda_reg < 0.0) throw InvalidConfig("lambda_reg must be non-negative");
  if (l_reg.defined()) terms.push_back(ag::scale(l_reg, lambda_reg));
  return ag::add_all(terms);
}

double temperature_schedule(std::size_t iter, std::size_t total_iters, double tau_start,
                            double tau_end) {
  if (!(tau_end > 0.0) || tau_start < tau_end) {
    throw InvalidConfig("temperature schedule needs tau_start >= tau_end > 0");
  }
  if (total_iters == 0) return tau_end;
  const double frac = std::min(1.0, static_cast<double>(iter) / static_cast<double>(total_iters));
  return tau_start * std::pow(tau_end / tau_start, frac);
}

std::vector<std::vector<std::vector<double>>> policy_probabilities(const Supermodel& model) {
  std::vector<std::vector<std::vector<double>>> out(model.num_tasks());
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      out[t].push_back(softmax_values(model.choice(l).policy_logits[t].value()));
    }
  }
  return out;
}

std::vector<std::vector<ag::Var>> uniform_branch_weights(const Supermodel& model) {
  std::vector<std::vector<ag::Var>> out(model.num_tasks());
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      const std::size_t k = model.choice(l).branch_count();
      out[t].push_back(ag::Var::constant(Tensor({k}, 1.0 / static_cast<double>(k))));
    }
  }
  return out;
}

std::vector<std::vector<ag::Var>> soft_branch_weights(const Supermodel& model, Rng& gumbel_rng,
                                                      double tau, bool straight_through) {
  std::vector<std::vector<ag::Var>> out(model.num_tasks());
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      const ag::Var& logits = model.choice(l).policy_logits[t];
      const Tensor g = gumbel_noise(logits.shape(), gumbel_rng);
      ag::Var p = soft_policy(logits, g, tau);
      out[t].push_back(straight_through ? ag::straight_through(p) : p);
    }
  }
  return out;
}

int sample_branch(std::span<const double> pi, Rng& rng) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < pi.size(); ++k) {
    const double log_pi = pi[k] > 0.0 ? std::max(std::log(pi[k]), kLogPiFloor) : kLogPiFloor;
    const double score = gumbel_from_uniform(rng.uniform()) + log_pi;
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(k);
    }
  }
  return best;
}

DiscretePolicy sample_policy(const Supermodel& model, std::uint64_t seed) {
  Rng rng(seed);
  const auto pi = policy_probabilities(model);
  DiscretePolicy out = DiscretePolicy::uniform(model.num_tasks(), model.num_choices(), kShared);
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (std::size_t l = 0; l < model.num_choices(); ++l) out.choice[t][l] = sample_branch(pi[t][l], rng);
  }
  return out;
}

DiscretePolicy argmax_policy(const Supermodel& model) {
  const auto pi = policy_probabilities(model);
  DiscretePolicy out = DiscretePolicy::uniform(model.num_tasks(), model.num_choices(), kShared);
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      const auto& p = pi[t][l];
      out.choice[t][l] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    }
  }
  return out;
}

std::vector<std::vector<double>> task_correlation(const std::vector<std::vector<double>>& vectors) {
  const std::size_t n = vectors.size();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (vectors[i].size() != vectors[0].size()) {
      throw DimensionMismatch("policy vectors differ in length");
    }
    for (double v : vectors[i]) norms[i] += v * v;
    norms[i] = std::sqrt(norms[i]);
    if (norms[i] == 0.0) throw ZeroVector("policy vector of task " + std::to_string(i) + " is zero");
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < vectors[i].size(); ++k) dot += vectors[i][k] * vectors[j][k];
      out[i][j] = out[j][i] = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
    }
  }
  return out;
}

std::vector<std::vector<double>> flatten_soft(const Supermodel& model) {
  const auto pi = policy_probabilities(model);
  std::vector<std::vector<double>> out(model.num_tasks());
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    for (const auto& p : pi[t]) {
      for (std::size_t k = 0; k < 3; ++k) out[t].push_back(k < p.size() ? p[k] : 0.0);
    }
  }
  return out;
}

std::vector<std::vector<double>> flatten_one_hot(const DiscretePolicy& policy) {
  std::vector<std::vector<double>> out;
  for (const auto& row : policy.choice) {
    std::vector<double> v(row.size() * 3, 0.0);
    for (std::size_t l = 0; l < row.size(); ++l) v[l * 3 + static_cast<std::size_t>(row[l])] = 1.0;
    out.push_back(std::move(v));
  }
  return out;
}

nlohmann::json to_json(const DiscretePolicy& policy) {
  return {{"choice", policy.choice}};
}

DiscretePolicy discrete_policy_from_json(const nlohmann::json& j) {
  DiscretePolicy p;
  p.choice = j.at("choice").get<std::vector<std::vector<int>>>();
  for (const auto& row : p.choice) {
    if (row.size() != p.choice[0].size()) throw PolicyShapeMismatch("ragged policy rows");
  }
  return p;
}

nlohmann::json export_policy(const Supermodel& model, double tau) {
  using nlohmann::json;
  const auto pi = policy_probabilities(model);
  json tasks = json::array();
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    json nodes = json::array();
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      const auto& p = pi[t][l];
      nodes.push_back({{"vcn", model.choice_ids()[l]},
                       {"name", model.choice(l).shared_op.name()},
                       {"depth_index", l},
                       {"pi", p},
                       {"argmax", std::max_element(p.begin(), p.end()) - p.begin()}});
    }
    tasks.push_back({{"task", model.tasks()[t].name}, {"nodes", nodes}});
  }
  return {{"tau", tau}, {"L", model.num_choices()}, {"N", model.num_tasks()}, {"tasks", tasks}};
}

void import_policy(Supermodel& model, const nlohmann::json& j) {
  const auto& tasks = j.at("tasks");
  if (tasks.size() != model.num_tasks()) throw DimensionMismatch("policy task count differs");
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    const auto& nodes = tasks[t].at("nodes");
    if (nodes.size() != model.num_choices()) throw DimensionMismatch("policy choice count differs");
    for (std::size_t l = 0; l < model.num_choices(); ++l) {
      const auto p = nodes[l].at("pi").get<std::vector<double>>();
      Tensor& logits = model.choice(l).policy_logits[t].mutable_value();
      if (p.size() != logits.size()) throw DimensionMismatch("branch count differs");
      for (std::size_t k = 0; k < p.size(); ++k) logits[k] = p[k] > 0.0 ? std::log(p[k]) : kLogPiFloor;
    }
  }
}

}  // namespace mtlc
