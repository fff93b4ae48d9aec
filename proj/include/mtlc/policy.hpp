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

// Differentiable sharing policy over the supermodel's choice nodes.

#ifndef MTLC_POLICY_HPP_
#define MTLC_POLICY_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/supermodel.hpp"

namespace mtlc {

// Floor applied to log(pi) before the Gumbel perturbation.
inline constexpr double kLogPiFloor = -50.0;

// P'(k) = softmax_k((G_k + log pi_k) / tau) with pi = softmax(logits).
ag::Var soft_policy(const ag::Var& logits, const Tensor& gumbels, double tau);

// sum_i sum_l ((L - l) / L) * [softplus(P'1 - P'0) + softplus(P'2 - P'0)],
// l the 0-based depth. soft[t][l] has 2 or 3 entries; with 2 the skip term
// is absent.
ag::Var policy_regularization(const std::vector<std::vector<ag::Var>>& soft);

// sum_i lambda_i * L_i + lambda_reg * L_reg. An undefined l_reg counts as 0.
ag::Var total_loss(std::span<const ag::Var> task_losses, std::span<const double> lambdas,
                   const ag::Var& l_reg, double lambda_reg);

// tau_start * (tau_end / tau_start)^(t / total).
double temperature_schedule(std::size_t iter, std::size_t total_iters, double tau_start = 5.0,
                            double tau_end = 0.5);

// Per-task, per-choice pi = softmax(logits).
std::vector<std::vector<std::vector<double>>> policy_probabilities(const Supermodel& model);

// Branch weights for the supermodel forward.
std::vector<std::vector<ag::Var>> uniform_branch_weights(const Supermodel& model);
// Draws fresh Gumbel noise for every (task, choice) from `gumbel_rng`. With
// straight_through the forward value is one-hot at the soft argmax.
std::vector<std::vector<ag::Var>> soft_branch_weights(const Supermodel& model, Rng& gumbel_rng,
                                                      double tau, bool straight_through = false);

// Gumbel-max draw: argmax_k (G_k + log pi_k).
int sample_branch(std::span<const double> pi, Rng& rng);
DiscretePolicy sample_policy(const Supermodel& model, std::uint64_t seed);
// Most probable branch; ties resolve to the lower index.
DiscretePolicy argmax_policy(const Supermodel& model);

// Cosine similarity between per-task policy vectors. Throws ZeroVector.
std::vector<std::vector<double>> task_correlation(const std::vector<std::vector<double>>& vectors);
// Concatenated pi triples per task.
std::vector<std::vector<double>> flatten_soft(const Supermodel& model);
// One-hot encoding (three slots per choice) per task.
std::vector<std::vector<double>> flatten_one_hot(const DiscretePolicy& policy);

nlohmann::json to_json(const DiscretePolicy& policy);
DiscretePolicy discrete_policy_from_json(const nlohmann::json& j);

// pi, argmax branch and depth per task and choice node, with tau.
nlohmann::json export_policy(const Supermodel& model, double tau);
// Loads logits back as log(pi) from an export_policy document.
void import_policy(Supermodel& model, const nlohmann::json& j);

}  // namespace mtlc

#endif  // MTLC_POLICY_HPP_
