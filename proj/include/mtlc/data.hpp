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

// Procedural multi-task data: colored sinusoidal gratings whose latent
// orientation, frequency and color drive per-task teacher scores.

#ifndef MTLC_DATA_HPP_
#define MTLC_DATA_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/operators.hpp"
#include "mtlc/random.hpp"

namespace mtlc {

enum class Teacher { kOrientation, kFrequency, kColor, kDiagonal };
inline constexpr std::size_t kNumTeachers = 4;
std::string to_string(Teacher t);

struct SyntheticConfig {
  std::size_t num_tasks = 2;
  double rho = 1.0;  // 1: identical labels, 0: independent labels
  std::size_t num_samples = 2000;
  double val_fraction = 0.2;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double noise = 0.2;
  // Classification bins the blended score into equal-mass classes;
  // regression (l1) regresses the score itself.
  LossKind loss = LossKind::kCrossEntropy;
  std::size_t num_classes = 2;
};

nlohmann::json to_json(const SyntheticConfig& c);
// Missing keys keep their defaults. Throws InvalidConfig.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

struct Split {
  Tensor x;                            // (n, C, H, W)
  std::vector<std::vector<double>> y;  // [task][sample]: class id or target
  std::size_t size() const { return x.empty() ? 0 : x.shape()[0]; }
};

struct Batch {
  ag::Var x;
  std::vector<std::vector<int>> labels;  // classification tasks
  std::vector<Tensor> targets;           // regression tasks, (B, 1)
};

struct SyntheticTaskSet {
  SyntheticConfig config;
  std::vector<TaskSpec> tasks;
  std::vector<Teacher> teachers;  // independent teacher of each task
  Split train;
  Split val;

  Shape3 input_shape() const { return {config.channels, config.height, config.width}; }
};

SyntheticTaskSet make_synthetic_tasks(const SyntheticConfig& config, std::uint64_t seed);

Batch make_batch(const SyntheticTaskSet& data, const Split& split, std::span<const std::size_t> indices);
// Draws `size` indices uniformly with replacement from [begin, end).
std::vector<std::size_t> draw_indices(Rng& rng, std::size_t begin, std::size_t end, std::size_t size);

// Per-task loss of `outputs` on the batch.
std::vector<ag::Var> task_losses(const std::vector<TaskSpec>& tasks, std::span<const ag::Var> outputs,
                                 const Batch& batch);

// Pearson correlation of two equally sized sequences.
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace mtlc

#endif  // MTLC_DATA_HPP_
