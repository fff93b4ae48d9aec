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

// Three-stage search pipeline: pre-train, policy-train, post-train.

#ifndef MTLC_TRAINING_HPP_
#define MTLC_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/data.hpp"
#include "mtlc/optim.hpp"
#include "mtlc/policy.hpp"
#include "mtlc/supermodel.hpp"

namespace mtlc {

enum class PostTrainMode { kRetrain, kFineTune };
std::string to_string(PostTrainMode mode);
PostTrainMode post_train_mode_from_string(const std::string& name);

struct TrainConfig {
  std::string profile = "desk";
  std::size_t pre_iters = 500;
  std::size_t policy_iters = 1000;
  std::size_t post_iters = 1500;
  OptimizerKind weight_optimizer = OptimizerKind::kSgdMomentum;
  double weight_lr = 0.001;
  double momentum = 0.9;
  double policy_lr = 0.01;
  double lr_decay_factor = 0.5;
  std::int64_t lr_decay_every = 4000;
  std::vector<double> lambdas;  // empty: 1 for every task
  double lambda_reg = 0.0005;
  std::size_t batch_size = 32;
  double tau_start = 5.0;
  double tau_end = 0.5;
  std::size_t alternation_period = 1;
  double policy_split = 0.5;  // fraction of train used for weight phases
  bool straight_through = false;
  bool pretrain = true;  // false skips the warm-up stage entirely
  PostTrainMode post_mode = PostTrainMode::kRetrain;
  std::uint64_t weight_seed = 10;
  std::uint64_t gumbel_seed = 11;
  std::uint64_t data_seed = 12;
  std::uint64_t dropout_seed = 13;
  std::uint64_t sample_seed = 10;
  std::size_t val_every = 100;
  std::size_t checkpoint_every = 500;
  SyntheticConfig data;

  // Derives every seed from one run seed (sample seed = run seed).
  void set_seeds(std::uint64_t seed);
  std::vector<double> task_lambdas(std::size_t num_tasks) const;
};

// "desk", "cityscapes", "nyuv2" or "taskonomy".
TrainConfig profile_config(const std::string& profile);
std::vector<std::string> profile_names();

nlohmann::json to_json(const TrainConfig& c);
// Keys override `base` (by default the profile named in the document, if
// any). Throws InvalidConfig.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);
void validate(const TrainConfig& c);

struct MetricsRow {
  std::string stage;
  std::size_t iter = 0;
  std::string phase;  // "weights", "policy" or "" outside policy-train
  std::vector<double> losses;
  double l_reg = 0.0;
  double tau = 0.0;
  double lr = 0.0;
};

struct ValidationRow {
  std::string stage;
  std::size_t iter = 0;
  std::vector<double> losses;
  double weighted = 0.0;
};

// Mutable state of one run: random streams, logs and checkpoint settings.
struct TrainState {
  RngStreams rng;
  std::vector<MetricsRow> log;
  std::vector<ValidationRow> validation;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::optional<nlohmann::json> resume;  // consumed by the matching stage

  explicit TrainState(const TrainConfig& c);
};

void write_metrics_csv(const TrainState& state, std::size_t num_tasks, const std::filesystem::path& path);

// Random stream positions, for continuing a run in another process.
nlohmann::json stream_state(const TrainState& state);
void load_stream_state(TrainState& state, const nlohmann::json& j);

struct PolicyState {
  double tau = 0.0;
  std::size_t iterations = 0;
  std::vector<std::vector<std::vector<double>>> pi;  // [task][choice][branch]
};

// Branch-averaged warm-up; only weights move.
void pretrain(Supermodel& model, const SyntheticTaskSet& data, const TrainConfig& cfg, TrainState& state);
// Alternating weight / logit optimization on two fixed halves of train.
PolicyState policy_train(Supermodel& model, const SyntheticTaskSet& data, const TrainConfig& cfg,
                         TrainState& state);
// Derives the policy's model and trains it on the full train split,
// keeping the weights with the best weighted validation loss.
MultiTaskModel post_train(const Supermodel& model, const DiscretePolicy& policy, const SyntheticTaskSet& data,
                          const TrainConfig& cfg, TrainState& state);

struct TaskEval {
  std::string task;
  double loss = 0.0;
  double accuracy = 0.0;  // classification only
  double mae = 0.0;       // regression only
};

struct Evaluation {
  std::vector<TaskEval> tasks;
  double weighted_loss = 0.0;
};

nlohmann::json to_json(const Evaluation& e);
Evaluation evaluate(MultiTaskModel& model, const SyntheticTaskSet& data, const Split& split,
                    const std::vector<double>& lambdas, std::size_t batch_size = 256);

// Parameter leaves and BatchNorm statistics, bit-exact through JSON.
nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);
nlohmann::json model_state(Supermodel& model);
void load_model_state(Supermodel& model, const nlohmann::json& j);
nlohmann::json model_state(MultiTaskModel& model);
void load_model_state(MultiTaskModel& model, const nlohmann::json& j);

// Parses a backbone and infers shapes for the given input.
OperatorGraph load_backbone(const std::string& prototxt_path, const Shape3& input_shape);

struct PipelineResult {
  PolicyState policy_state;
  DiscretePolicy policy;  // drawn with cfg.sample_seed
  Evaluation evaluation;  // on the validation split
  std::int64_t params = 0;
};

// Pre-train (unless disabled), policy-train, sample, post-train, evaluate.
PipelineResult run_pipeline(const std::string& prototxt_path, const TrainConfig& cfg, TrainState& state);

}  // namespace mtlc

#endif  // MTLC_TRAINING_HPP_
