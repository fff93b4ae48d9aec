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

// Finite-difference checks of every differentiable primitive.

#include <gtest/gtest.h>

#include "mtlc/policy.hpp"
#include "test_util.hpp"

namespace mtlc {
namespace {

using ag::Var;
using testing::grad_check;
using testing::project;
using testing::random_away_from_zero;
using testing::random_tensor;

constexpr double kTol = 1e-4;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

using Builder = std::function<std::pair<std::function<Var(const std::vector<Var>&)>,
                                        std::vector<Tensor>>(Rng&)>;

void expect_gradients(const Builder& build) {
  for (std::uint64_t seed : kSeeds) {
    SCOPED_TRACE("seed " + std::to_string(seed));
    Rng rng(seed);
    auto [f, values] = build(rng);
    const auto result = grad_check(f, values);
    EXPECT_LT(result.max_rel_error, kTol) << result.where;
  }
}

TEST(GradientTest, Elementwise) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       Var y = ag::mul(ag::add(v[0], v[1]), ag::sub(v[0], v[1]));
                       y = ag::add_scalar(ag::scale(y, 1.7), -0.3);
                       y = ag::add_constant(y, Tensor({2, 3}, 0.25));
                       return ag::mean(ag::mul(y, y));
                     },
                     std::vector{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}};
  });
}

TEST(GradientTest, ExpLogSoftplus) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       Var y = ag::add(ag::exp(v[0]), ag::log(v[1]));
                       return project(ag::softplus(ag::scale(y, 2.0)));
                     },
                     std::vector{random_tensor({4}, rng, -2, 2), random_tensor({4}, rng, 0.2, 3)}};
  });
}

TEST(GradientTest, ClampMinAndRelu) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       return project(ag::add(ag::relu(v[0]), ag::clamp_min(v[1], 0.0)));
                     },
                     std::vector{random_away_from_zero({6}, rng), random_away_from_zero({6}, rng)}};
  });
}

TEST(GradientTest, SoftmaxAndLogSoftmax) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       return ag::add(project(ag::softmax(v[0]), 3), project(ag::log_softmax(v[0]), 4));
                     },
                     std::vector{random_tensor({3, 4}, rng, -3, 3)}};
  });
}

TEST(GradientTest, PickSliceStackAddAll) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       const Var parts[] = {ag::slice(v[0], 1, 3), ag::pick(v[0], 0), v[1]};
                       const Var scalars[] = {project(ag::stack(parts)), ag::sum(v[1]), ag::pick(v[0], 4)};
                       return ag::add_all(scalars);
                     },
                     std::vector{random_tensor({5}, rng), random_tensor({2}, rng)}};
  });
}

TEST(GradientTest, WeightedSum) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       const Var branches[] = {v[0], v[1], v[2]};
                       return project(ag::weighted_sum(branches, v[3]));
                     },
                     std::vector{random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng),
                                 random_tensor({2, 2, 3, 3}, rng), random_tensor({3}, rng, 0, 1)}};
  });
}

TEST(GradientTest, Conv2d) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       return project(ag::conv2d(v[0], v[1], v[2], 2, 1));
                     },
                     std::vector{random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng),
                                 random_tensor({4}, rng)}};
  });
}

TEST(GradientTest, Conv2dNoBiasUnitStride) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       return project(ag::conv2d(v[0], v[1], Var(), 1, 0));
                     },
                     std::vector{random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 2, 2, 2}, rng)}};
  });
}

TEST(GradientTest, Linear) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       return project(ag::linear(v[0], v[1], v[2]));
                     },
                     std::vector{random_tensor({3, 2, 2, 2}, rng), random_tensor({4, 8}, rng),
                                 random_tensor({4}, rng)}};
  });
}

TEST(GradientTest, BatchNormTraining) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       ag::BatchNormState state;
                       return project(ag::batch_norm(v[0], v[1], v[2], state, true));
                     },
                     std::vector{random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng, 0.5, 1.5),
                                 random_tensor({2}, rng)}};
  });
}

TEST(GradientTest, BatchNormTrainingRank2) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       ag::BatchNormState state;
                       return project(ag::batch_norm(v[0], v[1], v[2], state, true));
                     },
                     std::vector{random_tensor({5, 3}, rng), random_tensor({3}, rng, 0.5, 1.5),
                                 random_tensor({3}, rng)}};
  });
}

TEST(GradientTest, BatchNormInference) {
  expect_gradients([](Rng& rng) {
    ag::BatchNormState warm;
    const Var x = Var::constant(random_tensor({4, 2, 2, 2}, rng));
    ag::batch_norm(x, Var::constant(Tensor({2}, 1.0)), Var::constant(Tensor({2}, 0.0)), warm, true);
    return std::pair{[warm](const std::vector<Var>& v) {
                       ag::BatchNormState state = warm;
                       return project(ag::batch_norm(v[0], v[1], v[2], state, false));
                     },
                     std::vector{random_tensor({2, 2, 2, 2}, rng), random_tensor({2}, rng),
                                 random_tensor({2}, rng)}};
  });
}

TEST(GradientTest, Pooling) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       Var a = ag::max_pool2d(v[0], 3, 3, 2, 2, 1);
                       Var b = ag::avg_pool2d(v[0], 2, 2, 2, 2, 1);
                       return ag::add(project(a, 1), ag::add(project(b, 2), project(ag::global_avg_pool(v[0]), 3)));
                     },
                     std::vector{random_tensor({2, 2, 5, 5}, rng)}};
  });
}

TEST(GradientTest, ConcatChannelAdjustReshape) {
  expect_gradients([](Rng& rng) {
    return std::pair{[](const std::vector<Var>& v) {
                       const Var parts[] = {v[0], v[1]};
                       Var c = ag::concat(parts);
                       Var wide = ag::channel_adjust(c, 7);
                       Var narrow = ag::channel_adjust(c, 2);
                       return ag::add(project(ag::reshape(wide, {2, 7 * 4}), 5), project(narrow, 6));
                     },
                     std::vector{random_tensor({2, 2, 2, 2}, rng), random_tensor({2, 3, 2, 2}, rng)}};
  });
}

TEST(GradientTest, Dropout) {
  expect_gradients([](Rng& rng) {
    const std::uint64_t mask_seed = rng.next_u64();
    return std::pair{[mask_seed](const std::vector<Var>& v) {
                       Rng mask(mask_seed);
                       return project(ag::dropout(v[0], 0.4, mask, true));
                     },
                     std::vector{random_tensor({3, 4}, rng)}};
  });
}

TEST(GradientTest, CrossEntropy) {
  expect_gradients([](Rng& rng) {
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.below(3)));
    return std::pair{[labels](const std::vector<Var>& v) { return ag::cross_entropy(v[0], labels); },
                     std::vector{random_tensor({4, 3}, rng, -2, 2)}};
  });
}

TEST(GradientTest, CrossEntropyDense) {
  expect_gradients([](Rng& rng) {
    std::vector<int> labels;
    for (int i = 0; i < 2 * 2 * 3; ++i) labels.push_back(static_cast<int>(rng.below(4)));
    return std::pair{[labels](const std::vector<Var>& v) { return ag::cross_entropy(v[0], labels); },
                     std::vector{random_tensor({2, 4, 2, 3}, rng, -2, 2)}};
  });
}

TEST(GradientTest, L1Loss) {
  expect_gradients([](Rng& rng) {
    const Tensor pred = random_tensor({3, 2}, rng);
    Tensor target = pred;
    const Tensor offset = random_away_from_zero({3, 2}, rng, 0.1);
    target.add_(offset);
    return std::pair{[target](const std::vector<Var>& v) { return ag::l1_loss(v[0], target); },
                     std::vector{pred}};
  });
}

TEST(GradientTest, CosineInverseLoss) {
  expect_gradients([](Rng& rng) {
    const Tensor target = random_tensor({3, 2, 2, 2}, rng);
    return std::pair{[target](const std::vector<Var>& v) { return ag::cosine_inverse_loss(v[0], target); },
                     std::vector{random_tensor({3, 2, 2, 2}, rng)}};
  });
}

TEST(GradientTest, SoftPolicy) {
  expect_gradients([](Rng& rng) {
    const Tensor g = gumbel_noise({3}, rng);
    const double tau = rng.uniform(0.5, 5.0);
    return std::pair{[g, tau](const std::vector<Var>& v) { return project(soft_policy(v[0], g, tau)); },
                     std::vector{random_tensor({3}, rng, -2, 2)}};
  });
}

TEST(GradientTest, PolicyRegularization) {
  expect_gradients([](Rng& rng) {
    const Tensor g1 = gumbel_noise({3}, rng);
    const Tensor g2 = gumbel_noise({2}, rng);
    const Tensor g3 = gumbel_noise({3}, rng);
    return std::pair{[=](const std::vector<Var>& v) {
                       const std::vector<std::vector<Var>> soft = {
                           {soft_policy(v[0], g1, 1.3), soft_policy(v[1], g2, 1.3)},
                           {soft_policy(v[2], g3, 1.3), soft_policy(v[1], g2, 0.7)}};
                       return policy_regularization(soft);
                     },
                     std::vector{random_tensor({3}, rng, -2, 2), random_tensor({2}, rng, -2, 2),
                                 random_tensor({3}, rng, -2, 2)}};
  });
}

}  // namespace
}  // namespace mtlc
