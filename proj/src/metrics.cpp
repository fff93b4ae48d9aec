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

#include "mtlc/metrics.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "mtlc/errors.hpp"

namespace mtlc {

using nlohmann::json;

double relative_performance(const TaskMetrics& method, const TaskMetrics& stl) {
  if (stl.metrics.empty()) throw DimensionMismatch("task '" + stl.task + "' has no metrics");
  if (method.metrics.size() != stl.metrics.size()) {
    throw DimensionMismatch("task '" + stl.task + "': metric count differs from the reference");
  }
  double sum = 0.0;
  for (const Metric& ref : stl.metrics) {
    auto it = std::find_if(method.metrics.begin(), method.metrics.end(),
                           [&](const Metric& m) { return m.name == ref.name; });
    if (it == method.metrics.end()) throw DimensionMismatch("metric '" + ref.name + "' missing");
    if (it->lower_better != ref.lower_better) throw DimensionMismatch("metric '" + ref.name + "' direction differs");
    if (ref.value == 0.0) throw ZeroReference(ref.name);
    const double rel = (it->value - ref.value) / ref.value * 100.0;
    sum += ref.lower_better ? -rel : rel;
  }
  return sum / static_cast<double>(stl.metrics.size());
}

std::vector<double> relative_performance(const MetricSet& method, const MetricSet& stl) {
  if (method.size() != stl.size()) throw DimensionMismatch("task count differs from the reference");
  std::vector<double> out;
  for (std::size_t i = 0; i < stl.size(); ++i) out.push_back(relative_performance(method[i], stl[i]));
  return out;
}

double overall_delta(std::span<const double> task_deltas) {
  if (task_deltas.empty()) throw DimensionMismatch("no task deltas");
  double s = 0.0;
  for (double d : task_deltas) s += d;
  return s / static_cast<double>(task_deltas.size());
}

double round_display(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double x = v * scale;
  const double fl = std::floor(x);
  // x * scale carries representation error; a value printed as ...5 is a tie.
  const double frac = x - fl;
  const double tol = 1e-9 * std::max(1.0, std::abs(x));
  double r;
  if (std::abs(frac - 0.5) <= tol) {
    r = x >= 0 ? fl + 1.0 : fl;
  } else {
    r = std::round(x);
  }
  return r / scale;
}

std::string format_signed(double v, int decimals) {
  double r = round_display(v, decimals);
  if (r == 0.0) r = 0.0;  // drop the sign of -0
  return fmt::format("{}{:.{}f}", r >= 0 ? "+" : "", r, decimals);
}

double relative_params(double absolute, double stl_total) {
  if (stl_total <= 0) throw InvalidConfig("single-task parameter total must be positive");
  return (absolute - stl_total) / stl_total * 100.0;
}

ParamReport param_report(const MultiTaskModel& model, std::int64_t stl_total) {
  ParamReport r;
  r.breakdown = model.param_breakdown();
  r.absolute = r.breakdown.total();
  r.stl_total = stl_total;
  r.relative_percent = relative_params(static_cast<double>(r.absolute), static_cast<double>(stl_total));
  return r;
}

std::int64_t single_task_total(const Supermodel& model) {
  return static_cast<std::int64_t>(model.num_tasks()) * model.backbone_capacity() + model.head_params();
}

json to_json(const ParamReport& r) {
  return {{"absolute", r.absolute},
          {"stl_total", r.stl_total},
          {"relative_percent", r.relative_percent},
          {"relative_display", format_signed(r.relative_percent)},
          {"breakdown",
           {{"shared", r.breakdown.shared},
            {"specific", r.breakdown.specific},
            {"skip", r.breakdown.skip},
            {"heads", r.breakdown.heads}}}};
}

namespace {

struct Counter {
  std::array<std::size_t, 3> n{};
  void add(int b) { ++n[static_cast<std::size_t>(b)]; }
  BranchFractions fractions() const {
    BranchFractions f;
    f.count = n[0] + n[1] + n[2];
    if (f.count == 0) return f;
    const double c = static_cast<double>(f.count);
    f.shared = static_cast<double>(n[0]) / c;
    f.specific = static_cast<double>(n[1]) / c;
    f.skip = static_cast<double>(n[2]) / c;
    return f;
  }
};

json fractions_json(const BranchFractions& f) {
  return {{"count", f.count}, {"shared", f.shared}, {"specific", f.specific}, {"skip", f.skip}};
}

}  // namespace

SharingStats sharing_statistics(const DiscretePolicy& policy) {
  const std::size_t n = policy.num_tasks(), L = policy.num_choices();
  const std::size_t half = L / 2;
  SharingStats s;
  s.per_depth.assign(L, {0, 0, 0});
  Counter all, all_bottom, all_top;
  for (std::size_t t = 0; t < n; ++t) {
    Counter task, bottom, top;
    for (std::size_t l = 0; l < L; ++l) {
      const int b = policy.choice[t][l];
      if (b < 0 || b > 2) throw PolicyShapeMismatch(fmt::format("branch {} out of range", b));
      task.add(b);
      all.add(b);
      ++s.per_depth[l][static_cast<std::size_t>(b)];
      if (l < half) {
        bottom.add(b);
        all_bottom.add(b);
      } else if (l >= L - half) {
        top.add(b);
        all_top.add(b);
      }
    }
    s.per_task.push_back(task.fractions());
    s.bottom.push_back(bottom.fractions());
    s.top.push_back(top.fractions());
  }
  s.overall = all.fractions();
  s.overall_bottom = all_bottom.fractions();
  s.overall_top = all_top.fractions();
  return s;
}

json to_json(const SharingStats& s) {
  json tasks = json::array();
  for (std::size_t t = 0; t < s.per_task.size(); ++t) {
    tasks.push_back(
        {{"all", fractions_json(s.per_task[t])}, {"bottom", fractions_json(s.bottom[t])}, {"top", fractions_json(s.top[t])}});
  }
  json depth = json::array();
  for (const auto& d : s.per_depth) depth.push_back({{"shared", d[0]}, {"specific", d[1]}, {"skip", d[2]}});
  return {{"tasks", tasks},
          {"overall", fractions_json(s.overall)},
          {"bottom", fractions_json(s.overall_bottom)},
          {"top", fractions_json(s.overall_top)},
          {"per_depth", depth}};
}

PolicyViz make_policy_viz(const Supermodel& model, const std::vector<std::vector<std::vector<double>>>& pi,
                          const std::optional<DiscretePolicy>& pattern) {
  PolicyViz v;
  for (const TaskSpec& t : model.tasks()) v.tasks.push_back(t.name);
  for (std::size_t l = 0; l < model.num_choices(); ++l) {
    v.nodes.push_back(model.choice(l).shared_op.name());
    v.branch_counts.push_back(model.choice(l).branch_count());
  }
  if (pi.size() != model.num_tasks()) throw DimensionMismatch("heatmap task count differs from the supermodel");
  for (std::size_t t = 0; t < pi.size(); ++t) {
    if (pi[t].size() != model.num_choices()) throw DimensionMismatch("heatmap depth differs from the supermodel");
    for (std::size_t l = 0; l < pi[t].size(); ++l) {
      if (pi[t][l].size() != v.branch_counts[l]) {
        throw DimensionMismatch(fmt::format("heatmap cell ({}, {}) has {} branches, node has {}", t, l,
                                            pi[t][l].size(), v.branch_counts[l]));
      }
    }
  }
  v.heatmap = pi;
  if (pattern) {
    if (pattern->num_tasks() != model.num_tasks() || pattern->num_choices() != model.num_choices()) {
      throw DimensionMismatch("sharing pattern dimensions differ from the supermodel");
    }
    for (std::size_t t = 0; t < pattern->num_tasks(); ++t) {
      for (std::size_t l = 0; l < pattern->num_choices(); ++l) {
        const int b = pattern->choice[t][l];
        if (b < 0 || static_cast<std::size_t>(b) >= v.branch_counts[l]) {
          throw DimensionMismatch(fmt::format("pattern branch {} unavailable at node {}", b, v.nodes[l]));
        }
      }
    }
    v.pattern = pattern;
  }
  return v;
}

PolicyViz make_policy_viz(const Supermodel& model, const std::optional<DiscretePolicy>& pattern) {
  return make_policy_viz(model, policy_probabilities(model), pattern);
}

json to_json(const PolicyViz& v) {
  json tasks = json::array();
  for (std::size_t t = 0; t < v.tasks.size(); ++t) {
    json cells = json::array();
    for (std::size_t l = 0; l < v.nodes.size(); ++l) {
      json cell = {{"node", v.nodes[l]}, {"depth_index", l}, {"pi", v.heatmap[t][l]}};
      if (v.pattern) {
        const int b = v.pattern->choice[t][l];
        json unselected = json::array();
        for (std::size_t k = 0; k < v.branch_counts[l]; ++k) {
          if (static_cast<int>(k) != b) unselected.push_back(branch_name(static_cast<int>(k)));
        }
        cell["selected"] = branch_name(b);
        cell["unselected"] = unselected;
      }
      cells.push_back(cell);
    }
    tasks.push_back({{"task", v.tasks[t]}, {"nodes", cells}});
  }
  json out = {{"nodes", v.nodes}, {"branch_counts", v.branch_counts}, {"tasks", tasks}};
  if (v.pattern) out["pattern"] = to_json(*v.pattern);
  return out;
}

PolicyViz policy_viz_from_json(const json& j) {
  try {
    PolicyViz v;
    v.nodes = j.at("nodes").get<std::vector<std::string>>();
    v.branch_counts = j.at("branch_counts").get<std::vector<std::size_t>>();
    if (v.branch_counts.size() != v.nodes.size()) throw DimensionMismatch("branch_counts and nodes differ in length");
    for (const json& t : j.at("tasks")) {
      v.tasks.push_back(t.at("task").get<std::string>());
      const json& cells = t.at("nodes");
      if (cells.size() != v.nodes.size()) throw DimensionMismatch("task '" + v.tasks.back() + "' depth differs");
      std::vector<std::vector<double>> rows;
      for (std::size_t l = 0; l < cells.size(); ++l) {
        rows.push_back(cells[l].at("pi").get<std::vector<double>>());
        if (rows.back().size() != v.branch_counts[l]) throw DimensionMismatch("heatmap cell width differs");
      }
      v.heatmap.push_back(std::move(rows));
    }
    if (j.contains("pattern")) {
      v.pattern = discrete_policy_from_json(j.at("pattern"));
      if (v.pattern->num_tasks() != v.tasks.size() || v.pattern->num_choices() != v.nodes.size()) {
        throw DimensionMismatch("pattern dimensions differ from the heatmap");
      }
    }
    return v;
  } catch (const json::exception& e) {
    throw DimensionMismatch(std::string("malformed policy visualization: ") + e.what());
  }
}

std::string render_svg(const PolicyViz& v) {
  constexpr int kCell = 18, kLabel = 90, kTitle = 20, kGap = 24;
  const int grid_w = 3 * kCell;
  const int width = kLabel + static_cast<int>(v.tasks.size()) * (grid_w + kGap);
  const int height = kTitle + 16 + static_cast<int>(v.nodes.size()) * kCell + 8;
  std::ostringstream s;
  s << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="10">)",
                   width, height)
    << '\n';
  s << fmt::format(R"(<rect width="{}" height="{}" fill="white"/>)", width, height) << '\n';
  const char* const letters[] = {"S", "T", "K"};
  for (std::size_t l = 0; l < v.nodes.size(); ++l) {
    const int y = kTitle + 16 + static_cast<int>(l) * kCell;
    s << fmt::format(R"(<text x="2" y="{}">{}</text>)", y + 12, v.nodes[l]) << '\n';
  }
  for (std::size_t t = 0; t < v.tasks.size(); ++t) {
    const int x0 = kLabel + static_cast<int>(t) * (grid_w + kGap);
    s << fmt::format(R"(<text x="{}" y="12">{}</text>)", x0, v.tasks[t]) << '\n';
    for (int k = 0; k < 3; ++k) {
      s << fmt::format(R"(<text x="{}" y="{}">{}</text>)", x0 + k * kCell + 5, kTitle + 10, letters[k]) << '\n';
    }
    for (std::size_t l = 0; l < v.nodes.size(); ++l) {
      const int y = kTitle + 16 + static_cast<int>(l) * kCell;
      for (std::size_t k = 0; k < 3; ++k) {
        const int x = x0 + static_cast<int>(k) * kCell;
        if (k >= v.branch_counts[l]) {
          s << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="#d0d0d0" stroke="white"/>)", x, y, kCell,
                           kCell)
            << '\n';
          continue;
        }
        const int level = static_cast<int>(std::lround(255.0 * std::clamp(v.heatmap[t][l][k], 0.0, 1.0)));
        s << fmt::format(R"svg(<rect x="{}" y="{}" width="{}" height="{}" fill="rgb({},{},{})" stroke="white"/>)svg", x, y,
                         kCell, kCell, level, level, level)
          << '\n';
        if (v.pattern && v.pattern->choice[t][l] == static_cast<int>(k)) {
          s << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="red" stroke-width="2"/>)",
                           x + 1, y + 1, kCell - 2, kCell - 2)
            << '\n';
        }
      }
    }
  }
  s << "</svg>\n";
  return s.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& s, const std::string& column) {
  if (s.empty() || s == "-") return std::nan("");
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InvalidConfig(fmt::format("column '{}': '{}' is not a number", column, s));
  }
}

}  // namespace

std::vector<TableRow> reproduce_table(const std::filesystem::path& csv, const json& manifest) {
  std::ifstream in(csv);
  if (!in) throw InvalidConfig("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidConfig(csv.string() + " is empty");
  const std::vector<std::string> header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(split_csv_line(line));
    if (rows.back().size() != header.size()) throw InvalidConfig(fmt::format("row {} has wrong width", rows.size()));
  }

  try {
    const std::string model_col = manifest.value("model_column", "model");
    auto index = [&](const std::string& name) {
      auto it = col.find(name);
      if (it == col.end()) throw InvalidConfig("column '" + name + "' not in " + csv.string());
      return it->second;
    };
    auto value = [&](const std::vector<std::string>& row, const std::string& name) {
      return parse_cell(row[index(name)], name);
    };
    const std::string reference = manifest.at("reference").get<std::string>();
    const auto ref_it = std::find_if(rows.begin(), rows.end(),
                                     [&](const auto& r) { return r[index(model_col)] == reference; });
    if (ref_it == rows.end()) throw InvalidConfig("reference row '" + reference + "' missing");

    auto metric_set = [&](const std::vector<std::string>& row) {
      MetricSet set;
      for (const json& task : manifest.at("tasks")) {
        TaskMetrics tm{task.at("task").get<std::string>(), {}};
        for (const json& m : task.at("metrics")) {
          const std::string name = m.at("column").get<std::string>();
          tm.metrics.push_back({name, value(row, name), m.at("lower_better").get<bool>()});
        }
        set.push_back(std::move(tm));
      }
      return set;
    };
    const MetricSet stl = metric_set(*ref_it);
    const json* params = manifest.contains("params") ? &manifest.at("params") : nullptr;

    std::vector<TableRow> out;
    for (const auto& row : rows) {
      if (&row == &*ref_it) continue;
      TableRow r;
      r.model = row[index(model_col)];
      r.task_deltas = relative_performance(metric_set(row), stl);
      r.delta = overall_delta(r.task_deltas);
      for (const json& task : manifest.at("tasks")) {
        r.published_task_deltas.push_back(value(row, task.at("published").get<std::string>()));
      }
      r.published_delta = value(row, manifest.at("published_overall").get<std::string>());
      if (params) {
        const std::string abs_col = params->at("absolute").get<std::string>();
        r.param_relative = relative_params(value(row, abs_col), value(*ref_it, abs_col));
        r.published_param_relative = value(row, params->at("published_relative").get<std::string>());
      }
      out.push_back(std::move(r));
    }
    return out;
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("malformed table manifest: ") + e.what());
  }
}

json to_json(const TableRow& r) {
  json j = {{"model", r.model},
            {"task_deltas", r.task_deltas},
            {"published_task_deltas", r.published_task_deltas},
            {"delta", r.delta},
            {"published_delta", r.published_delta}};
  json shown = json::array();
  for (double d : r.task_deltas) shown.push_back(format_signed(d));
  j["task_deltas_display"] = shown;
  j["delta_display"] = format_signed(r.delta);
  if (r.param_relative) {
    j["param_relative"] = *r.param_relative;
    j["param_relative_display"] = format_signed(*r.param_relative);
    j["published_param_relative"] = *r.published_param_relative;
  }
  return j;
}

}  // namespace mtlc
