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

#include <algorithm>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "mtlc/errors.hpp"
#include "mtlc/metrics.hpp"
#include "test_util.hpp"

namespace mtlc {
namespace {

TaskMetrics seg(double miou, double acc) {
  return {"seg", {{"miou", miou, false}, {"acc", acc, false}}};
}

nlohmann::json table_manifest() {
  std::ifstream in(testing::fixture("comparison_directions.json"));
  return nlohmann::json::parse(in);
}

Supermodel desk(std::size_t n = 2) {
  std::vector<TaskSpec> tasks;
  for (std::size_t i = 0; i < n; ++i) tasks.push_back({.name = "t" + std::to_string(i), .output_dim = 4});
  return compile_supermodel(load_graph(testing::fixture("desk4.prototxt")), tasks, {.weight_seed = 3});
}

TEST(RelativePerformanceTest, SegmentationExample) {
  const double d = relative_performance(seg(42.7, 68.1), seg(36.5, 73.8));
  EXPECT_NEAR(d, 4.631, 1e-3);
  EXPECT_EQ(format_signed(d), "+4.6");
}

TEST(RelativePerformanceTest, IdenticalToReferenceIsZero) {
  EXPECT_EQ(relative_performance(seg(36.5, 73.8), seg(36.5, 73.8)), 0.0);
}

TEST(RelativePerformanceTest, HalvedLowerBetterMetric) {
  const TaskMetrics stl{"depth", {{"err", 0.4, true}}};
  const TaskMetrics m{"depth", {{"err", 0.2, true}}};
  EXPECT_NEAR(relative_performance(m, stl), 50.0, 1e-12);
}

TEST(RelativePerformanceTest, Errors) {
  EXPECT_THROW(relative_performance(seg(1, 1), seg(0, 1)), ZeroReference);
  try {
    relative_performance(seg(1, 1), seg(1, 0));
  } catch (const ZeroReference& e) {
    EXPECT_EQ(e.metric(), "acc");
  }
  TaskMetrics flipped = seg(1, 1);
  flipped.metrics[1].lower_better = true;
  EXPECT_THROW(relative_performance(flipped, seg(1, 1)), DimensionMismatch);
  EXPECT_THROW(relative_performance(TaskMetrics{"seg", {{"miou", 1, false}}}, seg(1, 1)), DimensionMismatch);
  EXPECT_THROW(relative_performance(MetricSet{seg(1, 1)}, MetricSet{}), DimensionMismatch);
}

TEST(RelativePerformanceTest, InvariantUnderReordering) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    TaskMetrics a{"t", {}}, s{"t", {}};
    const int m = 1 + trial % 6;
    for (int j = 0; j < m; ++j) {
      const bool low = (j + trial) % 2 == 0;
      a.metrics.push_back({"m" + std::to_string(j), u(rng), low});
      s.metrics.push_back({"m" + std::to_string(j), u(rng), low});
    }
    const double base = relative_performance(a, s);
    std::shuffle(a.metrics.begin(), a.metrics.end(), rng);
    EXPECT_NEAR(relative_performance(a, s), base, 1e-12);

    // An extra metric equal in both sets contributes zero; only 1/|M| moves.
    a.metrics.push_back({"same", 3.0, false});
    s.metrics.push_back({"same", 3.0, false});
    EXPECT_NEAR(relative_performance(a, s), base * m / (m + 1), 1e-12);
  }
}

TEST(OverallDeltaTest, Examples) {
  const double a[] = {4.6, 1.5};
  EXPECT_NEAR(overall_delta(a), 3.05, 1e-12);
  EXPECT_EQ(format_signed(overall_delta(a)), "+3.1");
  const double b[] = {17.2, 5.5};
  EXPECT_EQ(format_signed(overall_delta(b)), "+11.4");
  const double one[] = {-2.5};
  EXPECT_EQ(overall_delta(one), -2.5);
  EXPECT_THROW(overall_delta({}), DimensionMismatch);
}

TEST(RoundingTest, HalfAwayFromZero) {
  EXPECT_EQ(round_display(0.05), 0.1);
  EXPECT_EQ(round_display(-0.05), -0.1);
  EXPECT_EQ(round_display(2.25), 2.3);
  EXPECT_EQ(round_display(-2.25), -2.3);
  EXPECT_EQ(round_display(1.04999), 1.0);
  EXPECT_EQ(round_display(11.35), 11.4);
  EXPECT_EQ(format_signed(-0.01), "+0.0");
  EXPECT_EQ(format_signed(-49.999), "-50.0");
  EXPECT_EQ(format_signed(1.234, 2), "+1.23");
}

TEST(ParamReportTest, TableExamples) {
  EXPECT_EQ(format_signed(relative_params(21.285, 42.569)), "-50.0");
  EXPECT_EQ(format_signed(relative_params(28.819, 42.569)), "-32.3");
  EXPECT_EQ(relative_params(42.569, 42.569), 0.0);
  EXPECT_THROW(relative_params(1, 0), InvalidConfig);
}

TEST(ParamReportTest, BreakdownSumsToAbsolute) {
  const Supermodel m = desk();
  const std::int64_t stl = single_task_total(m);
  EXPECT_EQ(stl, capacity_bounds(m).max_params);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    DiscretePolicy p = DiscretePolicy::uniform(2, m.num_choices(), 0);
    for (auto& row : p.choice) {
      for (int& b : row) b = static_cast<int>(rng.below(3));
    }
    const ParamReport r = param_report(derive_model(m, p), stl);
    EXPECT_EQ(r.breakdown.shared + r.breakdown.specific + r.breakdown.skip + r.breakdown.heads, r.absolute);
    EXPECT_EQ(r.breakdown.heads, m.head_params());
    EXPECT_NEAR(r.relative_percent, (r.absolute - stl) * 100.0 / stl, 1e-12);
  }
  const ParamReport all_specific = param_report(derive_model(m, DiscretePolicy::uniform(2, 4, kSpecific)), stl);
  EXPECT_EQ(all_specific.relative_percent, 0.0);
  const auto j = to_json(all_specific);
  EXPECT_EQ(j.at("relative_display"), "+0.0");
}

TEST(TableReproductionTest, EveryPublishedEntryWithinTolerance) {
  const auto rows = reproduce_table(testing::fixture("comparison.csv"), table_manifest());
  ASSERT_EQ(rows.size(), 8u);
  for (const TableRow& r : rows) {
    for (std::size_t i = 0; i < r.task_deltas.size(); ++i) {
      EXPECT_LE(std::abs(round_display(r.task_deltas[i]) - r.published_task_deltas[i]), 0.1 + 1e-9) << r.model << " " << i;
    }
    EXPECT_LE(std::abs(round_display(r.delta) - r.published_delta), 0.1 + 1e-9) << r.model;
    ASSERT_TRUE(r.param_relative.has_value());
    EXPECT_LE(std::abs(round_display(*r.param_relative) - *r.published_param_relative), 0.1 + 1e-9) << r.model;
  }
  const TableRow& mt = rows[0];
  EXPECT_EQ(mt.model, "Multi-Task");
  EXPECT_EQ(format_signed(mt.task_deltas[0]), "+4.6");
  EXPECT_EQ(format_signed(mt.task_deltas[1]), "+1.5");
  EXPECT_EQ(format_signed(mt.delta), "+3.1");
  const TableRow& cs = rows[1];
  EXPECT_EQ(format_signed(cs.task_deltas[0]), "+5.5");
  EXPECT_EQ(format_signed(cs.task_deltas[1]), "+17.2");
  EXPECT_EQ(format_signed(cs.delta), "+11.4");
  EXPECT_EQ(format_signed(*rows.back().param_relative), "-32.3");
}

TEST(TableReproductionTest, BadInputs) {
  auto manifest = table_manifest();
  manifest["reference"] = "Nobody";
  EXPECT_THROW(reproduce_table(testing::fixture("comparison.csv"), manifest), InvalidConfig);
  manifest = table_manifest();
  manifest["tasks"][0]["metrics"][0]["column"] = "mAP";
  EXPECT_THROW(reproduce_table(testing::fixture("comparison.csv"), manifest), InvalidConfig);
  EXPECT_THROW(reproduce_table("/nonexistent.csv", table_manifest()), InvalidConfig);
}

TEST(SharingStatisticsTest, AllShared) {
  const SharingStats s = sharing_statistics(DiscretePolicy::uniform(3, 4, kShared));
  EXPECT_EQ(s.overall.shared, 1.0);
  EXPECT_EQ(s.overall.specific, 0.0);
  EXPECT_EQ(s.overall.skip, 0.0);
  for (const auto& d : s.per_depth) EXPECT_EQ(d[0], 3u);
}

TEST(SharingStatisticsTest, OneSkippedNode) {
  DiscretePolicy p = DiscretePolicy::uniform(2, 4, kShared);
  p.choice[1][2] = kSkip;
  const SharingStats s = sharing_statistics(p);
  EXPECT_EQ(s.per_task[1].skip, 0.25);
  EXPECT_EQ(s.per_task[0].skip, 0.0);
  EXPECT_EQ(s.top[1].skip, 0.5);
  EXPECT_EQ(s.bottom[1].skip, 0.0);
  EXPECT_EQ(s.overall.skip, 0.125);
}

TEST(SharingStatisticsTest, OddDepthExcludesMiddle) {
  DiscretePolicy p = DiscretePolicy::uniform(1, 5, kShared);
  p.choice[0][2] = kSkip;
  const SharingStats s = sharing_statistics(p);
  EXPECT_EQ(s.bottom[0].count, 2u);
  EXPECT_EQ(s.top[0].count, 2u);
  EXPECT_EQ(s.bottom[0].skip + s.top[0].skip, 0.0);
  EXPECT_EQ(s.per_task[0].skip, 0.2);
}

TEST(SharingStatisticsTest, MatchesDirectCount) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 4, L = 1 + rng() % 9;
    DiscretePolicy p = DiscretePolicy::uniform(n, L, 0);
    for (auto& row : p.choice) {
      for (int& b : row) b = static_cast<int>(rng() % 3);
    }
    const SharingStats s = sharing_statistics(p);
    std::size_t shared = 0, bottom_spec = 0, top_spec = 0;
    for (std::size_t t = 0; t < n; ++t) {
      std::size_t task_skip = 0;
      for (std::size_t l = 0; l < L; ++l) {
        shared += p.choice[t][l] == kShared;
        task_skip += p.choice[t][l] == kSkip;
        if (2 * l + 1 < L && p.choice[t][l] == kSpecific) ++bottom_spec;
        if (2 * l + 1 > L && p.choice[t][l] == kSpecific) ++top_spec;
      }
      EXPECT_DOUBLE_EQ(s.per_task[t].skip, static_cast<double>(task_skip) / L);
      EXPECT_NEAR(s.per_task[t].shared + s.per_task[t].specific + s.per_task[t].skip, 1.0, 1e-12);
    }
    EXPECT_DOUBLE_EQ(s.overall.shared, static_cast<double>(shared) / (n * L));
    const std::size_t half = n * (L / 2);
    if (half > 0) {
      EXPECT_DOUBLE_EQ(s.overall_bottom.specific, static_cast<double>(bottom_spec) / half);
      EXPECT_DOUBLE_EQ(s.overall_top.specific, static_cast<double>(top_spec) / half);
    }
  }
}

TEST(PolicyVizTest, UniformLogitsGiveThirds) {
  const Supermodel m = desk();
  const PolicyViz v = make_policy_viz(m);
  ASSERT_EQ(v.heatmap.size(), 2u);
  for (const auto& task : v.heatmap) {
    for (const auto& cell : task) {
      for (double x : cell) EXPECT_DOUBLE_EQ(x, 1.0 / 3);
    }
  }
  EXPECT_EQ(v.nodes.size(), 4u);
}

TEST(PolicyVizTest, AllSharedPathsIdentical) {
  const Supermodel m = desk(3);
  const auto j = to_json(make_policy_viz(m, DiscretePolicy::uniform(3, 4, kShared)));
  for (const auto& task : j.at("tasks")) {
    EXPECT_EQ(task.at("nodes").size(), 4u);
    for (std::size_t l = 0; l < 4; ++l) {
      EXPECT_EQ(task["nodes"][l]["selected"], j["tasks"][0]["nodes"][l]["selected"]);
      EXPECT_EQ(task["nodes"][l]["selected"], "shared");
      EXPECT_EQ(task["nodes"][l]["unselected"], nlohmann::json({"specific", "skip"}));
    }
  }
}

TEST(PolicyVizTest, RoundTripIsLossless) {
  Supermodel m = compile_supermodel(load_graph(testing::fixture("branchy.prototxt")),
                                    {{.name = "a", .output_dim = 3}, {.name = "b", .output_dim = 3}});
  Rng rng(2);
  for (ag::Var l : m.logits()) {
    for (double& x : l.mutable_value().data()) x = rng.normal();
  }
  const PolicyViz v = make_policy_viz(m, std::optional<DiscretePolicy>(sample_policy(m, 10)));
  const PolicyViz back = policy_viz_from_json(nlohmann::json::parse(to_json(v).dump()));
  EXPECT_EQ(back, v);
  const PolicyViz plain = make_policy_viz(m);
  EXPECT_EQ(policy_viz_from_json(to_json(plain)), plain);
}

TEST(PolicyVizTest, DimensionChecks) {
  const Supermodel m = desk();
  auto pi = policy_probabilities(m);
  pi[1].pop_back();
  EXPECT_THROW(make_policy_viz(m, pi), DimensionMismatch);
  EXPECT_THROW(make_policy_viz(m, DiscretePolicy::uniform(3, 4, 0)), DimensionMismatch);
  EXPECT_THROW(make_policy_viz(m, DiscretePolicy::uniform(2, 3, 0)), DimensionMismatch);
  auto j = to_json(make_policy_viz(m));
  j["tasks"][0]["nodes"][0]["pi"] = {0.5, 0.5};
  EXPECT_THROW(policy_viz_from_json(j), DimensionMismatch);
  EXPECT_THROW(policy_viz_from_json({{"nodes", 3}}), DimensionMismatch);
}

TEST(PolicyVizTest, SvgMarksSelectedCells) {
  const Supermodel m = desk();
  DiscretePolicy p = DiscretePolicy::uniform(2, 4, kShared);
  p.choice[0][3] = kSkip;
  const std::string svg = render_svg(make_policy_viz(m, p));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  std::size_t marks = 0;
  for (std::size_t pos = 0; (pos = svg.find("stroke=\"red\"", pos)) != std::string::npos; ++pos) ++marks;
  EXPECT_EQ(marks, 8u);
  EXPECT_NE(svg.find("rgb(85,85,85)"), std::string::npos);
}

}  // namespace
}  // namespace mtlc
