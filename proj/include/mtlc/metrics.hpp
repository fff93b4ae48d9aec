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

// Relative performance, parameter accounting, sharing statistics and policy
// visualization.

#ifndef MTLC_METRICS_HPP_
#define MTLC_METRICS_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtlc/policy.hpp"
#include "mtlc/supermodel.hpp"

namespace mtlc {

struct Metric {
  std::string name;
  double value = 0.0;
  bool lower_better = false;
};

struct TaskMetrics {
  std::string task;
  std::vector<Metric> metrics;
};

using MetricSet = std::vector<TaskMetrics>;

// Mean over metrics of (-1)^s (M - M_stl) / M_stl * 100. Metrics are matched
// by name. Throws ZeroReference or DimensionMismatch.
double relative_performance(const TaskMetrics& method, const TaskMetrics& stl);
std::vector<double> relative_performance(const MetricSet& method, const MetricSet& stl);
// Mean of the per-task deltas. Throws DimensionMismatch when empty.
double overall_delta(std::span<const double> task_deltas);

// One decimal, ties away from zero.
double round_display(double v, int decimals = 1);
// "+3.1", "-50.0", "+0.0".
std::string format_signed(double v, int decimals = 1);

double relative_params(double absolute, double stl_total);

struct ParamReport {
  std::int64_t absolute = 0;
  std::int64_t stl_total = 0;
  double relative_percent = 0.0;
  ParamBreakdown breakdown;
};

// Throws InvalidConfig unless stl_total > 0.
ParamReport param_report(const MultiTaskModel& model, std::int64_t stl_total);
// N independent backbones with their heads.
std::int64_t single_task_total(const Supermodel& model);
nlohmann::json to_json(const ParamReport& r);

struct BranchFractions {
  std::size_t count = 0;  // decisions counted
  double shared = 0.0;
  double specific = 0.0;
  double skip = 0.0;
};

// Bottom half is the first floor(L/2) depths, top half the last floor(L/2);
// the middle depth of an odd L belongs to neither.
struct SharingStats {
  std::vector<BranchFractions> per_task;
  std::vector<BranchFractions> bottom;  // per task
  std::vector<BranchFractions> top;     // per task
  BranchFractions overall;
  BranchFractions overall_bottom;
  BranchFractions overall_top;
  std::vector<std::array<std::size_t, 3>> per_depth;  // tasks choosing each branch
};

SharingStats sharing_statistics(const DiscretePolicy& policy);
nlohmann::json to_json(const SharingStats& s);

// Heatmap of pi (task x choice x branch) plus an optional discrete pattern.
struct PolicyViz {
  std::vector<std::string> tasks;
  std::vector<std::string> nodes;  // choice nodes in depth order
  std::vector<std::size_t> branch_counts;
  std::vector<std::vector<std::vector<double>>> heatmap;
  std::optional<DiscretePolicy> pattern;

  bool operator==(const PolicyViz&) const = default;
};

// Throws DimensionMismatch when pi or the pattern does not fit the model.
PolicyViz make_policy_viz(const Supermodel& model, const std::vector<std::vector<std::vector<double>>>& pi,
                          const std::optional<DiscretePolicy>& pattern = std::nullopt);
PolicyViz make_policy_viz(const Supermodel& model, const std::optional<DiscretePolicy>& pattern = std::nullopt);

nlohmann::json to_json(const PolicyViz& v);
PolicyViz policy_viz_from_json(const nlohmann::json& j);
std::string render_svg(const PolicyViz& v);

// Comparison-table reproduction. The CSV has a header row and one row per
// method; the manifest names the reference row, the metric columns of each
// task with their directions, and the published columns to compare with.
struct TableRow {
  std::string model;
  std::vector<double> task_deltas;
  std::vector<double> published_task_deltas;
  double delta = 0.0;
  double published_delta = 0.0;
  std::optional<double> param_relative;
  std::optional<double> published_param_relative;
};

std::vector<TableRow> reproduce_table(const std::filesystem::path& csv, const nlohmann::json& manifest);
nlohmann::json to_json(const TableRow& r);

}  // namespace mtlc

#endif  // MTLC_METRICS_HPP_
