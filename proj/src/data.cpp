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

#include "mtlc/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

struct Latents {
  double theta;   // orientation in [0, pi)
  double freq;    // cycles per image
  double phase;
  double contrast;
  std::array<double, 3> color;
};

constexpr double kFreqLo = 1.5;
constexpr double kFreqHi = 4.5;

double teacher_score(Teacher t, const Latents& z, double theta_ref) {
  switch (t) {
    case Teacher::kOrientation:
      return std::cos(2.0 * (z.theta - theta_ref));
    case Teacher::kFrequency:
      return (z.freq - 0.5 * (kFreqLo + kFreqHi)) / (0.5 * (kFreqHi - kFreqLo));
    case Teacher::kColor:
      return z.color[0] - z.color[2];
    case Teacher::kDiagonal:
      return std::sin(2.0 * (z.theta - theta_ref));
  }
  return 0.0;
}

void render(const Latents& z, const SyntheticConfig& c, Rng& rng, double* out) {
  const double cy = 0.5 * static_cast<double>(c.height - 1);
  const double cx = 0.5 * static_cast<double>(c.width - 1);
  const double k = 2.0 * std::numbers::pi * z.freq / static_cast<double>(std::max(c.height, c.width));
  const double ct = std::cos(z.theta), st = std::sin(z.theta);
  for (std::size_t ch = 0; ch < c.channels; ++ch) {
    const double gain = 0.5 + z.color[ch % 3];
    for (std::size_t y = 0; y < c.height; ++y) {
      for (std::size_t x = 0; x < c.width; ++x) {
        const double u = (static_cast<double>(x) - cx) * ct + (static_cast<double>(y) - cy) * st;
        *out++ = z.contrast * gain * std::sin(k * u + z.phase) + c.noise * rng.normal();
      }
    }
  }
}

// Cut points splitting `scores` into `classes` equal-mass bins.
std::vector<double> quantile_cuts(std::vector<double> scores, std::size_t classes) {
  std::sort(scores.begin(), scores.end());
  std::vector<double> cuts;
  for (std::size_t q = 1; q < classes; ++q) cuts.push_back(scores[q * scores.size() / classes]);
  return cuts;
}

}  // namespace

std::string to_string(Teacher t) {
  switch (t) {
    case Teacher::kOrientation:
      return "orientation";
    case Teacher::kFrequency:
      return "frequency";
    case Teacher::kColor:
      return "color";
    case Teacher::kDiagonal:
      return "diagonal";
  }
  return "?";
}

nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"num_tasks", c.num_tasks}, {"rho", c.rho},         {"num_samples", c.num_samples},
          {"val_fraction", c.val_fraction}, {"channels", c.channels}, {"height", c.height},
          {"width", c.width},         {"noise", c.noise},     {"loss", to_string(c.loss)},
          {"num_classes", c.num_classes}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  try {
    c.num_tasks = j.value("num_tasks", c.num_tasks);
    c.rho = j.value("rho", c.rho);
    c.num_samples = j.value("num_samples", c.num_samples);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.channels = j.value("channels", c.channels);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.noise = j.value("noise", c.noise);
    if (j.contains("loss")) c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("data config: ") + e.what());
  }
  if (c.num_tasks == 0) throw InvalidConfig("data config: num_tasks must be at least 1");
  if (!(c.rho >= 0.0 && c.rho <= 1.0)) throw InvalidConfig("data config: rho must lie in [0, 1]");
  if (c.num_samples < 2) throw InvalidConfig("data config: need at least 2 samples");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw InvalidConfig("data config: val_fraction in (0, 1)");
  if (c.channels == 0 || c.height == 0 || c.width == 0) throw InvalidConfig("data config: empty image");
  if (c.noise < 0.0) throw InvalidConfig("data config: noise must be non-negative");
  if (c.loss == LossKind::kCosine) throw InvalidConfig("data config: loss must be cross_entropy or l1");
  if (c.loss == LossKind::kCrossEntropy && c.num_classes < 2) throw InvalidConfig("data config: num_classes >= 2");
  return c;
}

SyntheticTaskSet make_synthetic_tasks(const SyntheticConfig& config, std::uint64_t seed) {
  SyntheticTaskSet set;
  set.config = config;
  Rng rng(seed);

  // The teacher of task 0 is shared by every task at weight rho.
  std::array<Teacher, kNumTeachers> order = {Teacher::kOrientation, Teacher::kFrequency, Teacher::kColor,
                                             Teacher::kDiagonal};
  for (std::size_t i = kNumTeachers - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const double theta_ref = rng.uniform(0.0, std::numbers::pi);
  for (std::size_t t = 0; t < config.num_tasks; ++t) {
    set.teachers.push_back(order[t % kNumTeachers]);
    TaskSpec spec;
    spec.name = "task" + std::to_string(t);
    spec.loss = config.loss;
    spec.output_dim = config.loss == LossKind::kCrossEntropy ? config.num_classes : 1;
    set.tasks.push_back(spec);
  }

  const std::size_t n = config.num_samples;
  const std::size_t pixels = config.channels * config.height * config.width;
  Tensor x({n, config.channels, config.height, config.width});
  std::vector<std::vector<double>> scores(config.num_tasks, std::vector<double>(n));
  for (std::size_t s = 0; s < n; ++s) {
    Latents z;
    z.theta = rng.uniform(0.0, std::numbers::pi);
    z.freq = rng.uniform(kFreqLo, kFreqHi);
    z.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    z.contrast = rng.uniform(0.6, 1.2);
    for (double& c : z.color) c = rng.uniform();
    render(z, config, rng, x.raw() + s * pixels);
    const double base = teacher_score(set.teachers[0], z, theta_ref);
    for (std::size_t t = 0; t < config.num_tasks; ++t) {
      scores[t][s] = config.rho * base + (1.0 - config.rho) * teacher_score(set.teachers[t], z, theta_ref);
    }
  }

  std::vector<std::vector<double>> y(config.num_tasks, std::vector<double>(n));
  for (std::size_t t = 0; t < config.num_tasks; ++t) {
    if (config.loss == LossKind::kL1) {
      y[t] = scores[t];
      continue;
    }
    const auto cuts = quantile_cuts(scores[t], config.num_classes);
    for (std::size_t s = 0; s < n; ++s) {
      y[t][s] = static_cast<double>(std::upper_bound(cuts.begin(), cuts.end(), scores[t][s]) - cuts.begin());
    }
  }

  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(n))), 1, n - 1);
  const std::size_t n_train = n - n_val;
  auto take = [&](std::size_t begin, std::size_t count) {
    Split split;
    split.x = Tensor({count, config.channels, config.height, config.width});
    std::copy(x.raw() + begin * pixels, x.raw() + (begin + count) * pixels, split.x.raw());
    for (std::size_t t = 0; t < config.num_tasks; ++t) {
      split.y.emplace_back(y[t].begin() + static_cast<std::ptrdiff_t>(begin),
                           y[t].begin() + static_cast<std::ptrdiff_t>(begin + count));
    }
    return split;
  };
  set.train = take(0, n_train);
  set.val = take(n_train, n_val);
  return set;
}

std::vector<std::size_t> draw_indices(Rng& rng, std::size_t begin, std::size_t end, std::size_t size) {
  std::vector<std::size_t> out(size);
  for (std::size_t& i : out) i = begin + rng.below(end - begin);
  return out;
}

Batch make_batch(const SyntheticTaskSet& data, const Split& split, std::span<const std::size_t> indices) {
  const auto& c = data.config;
  const std::size_t pixels = c.channels * c.height * c.width;
  Tensor x({indices.size(), c.channels, c.height, c.width});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy(split.x.raw() + indices[b] * pixels, split.x.raw() + (indices[b] + 1) * pixels,
              x.raw() + b * pixels);
  }
  Batch batch;
  batch.x = ag::Var::constant(std::move(x));
  batch.labels.resize(data.tasks.size());
  batch.targets.resize(data.tasks.size());
  for (std::size_t t = 0; t < data.tasks.size(); ++t) {
    if (data.tasks[t].loss == LossKind::kCrossEntropy) {
      for (std::size_t i : indices) batch.labels[t].push_back(static_cast<int>(split.y[t][i]));
    } else {
      Tensor target({indices.size(), 1});
      for (std::size_t b = 0; b < indices.size(); ++b) target[b] = split.y[t][indices[b]];
      batch.targets[t] = std::move(target);
    }
  }
  return batch;
}

std::vector<ag::Var> task_losses(const std::vector<TaskSpec>& tasks, std::span<const ag::Var> outputs,
                                 const Batch& batch) {
  std::vector<ag::Var> out;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    switch (tasks[t].loss) {
      case LossKind::kCrossEntropy:
        out.push_back(ag::cross_entropy(outputs[t], batch.labels[t]));
        break;
      case LossKind::kL1:
        out.push_back(ag::l1_loss(outputs[t], batch.targets[t]));
        break;
      case LossKind::kCosine:
        out.push_back(ag::cosine_inverse_loss(outputs[t], batch.targets[t]));
        break;
    }
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionMismatch("pearson: sequences differ in length");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw ZeroVector("pearson: constant sequence");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mtlc
