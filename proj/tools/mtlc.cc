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

// mtlc: compile a backbone into a multi-task supermodel, search a sharing
// policy on synthetic tasks, and report on the result.
//
// Exit codes: 0 success, 1 domain error, 2 usage error.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <typeinfo>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mtlc/errors.hpp"
#include "mtlc/metrics.hpp"
#include "mtlc/training.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mtlc;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string proto;
  std::string run_dir = "run";
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  bool json = false;

  // Per-command.
  std::size_t tasks = 2;
  std::size_t classes = 4;
  std::string input;  // empty: shapes declared in the prototxt
  std::string policy_file;
  std::string all;
  std::string mode;
  std::string tag;
  std::string resume;
  std::string table;
  std::string directions;
  std::string out;
  bool svg = false;
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

fs::path resolve_run_dir(const std::string& s) {
  fs::path p(s);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MTLC_RUN_ROOT"); root != nullptr && *root != '\0') p = fs::path(root) / p;
  }
  return p;
}

// One writer per run directory.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0 && stale()) {
      fs::remove(path_);
      fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    }
    if (fd < 0) throw Error("run directory " + dir.string() + " is locked by another process (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  // The owner recorded in the lock file has exited.
  bool stale() const {
    std::ifstream in(path_);
    long pid = 0;
    if (!(in >> pid) || pid <= 0) return false;
    return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
  }

  fs::path path_;
};

struct Run {
  fs::path dir;
  std::string proto;
  TrainConfig cfg;

  SyntheticTaskSet data() const { return make_synthetic_tasks(cfg.data, cfg.data_seed); }
  Supermodel compile(const SyntheticTaskSet& d) const {
    return compile_supermodel(load_backbone(proto, d.input_shape()), d.tasks, {.weight_seed = cfg.weight_seed});
  }
};

bool has_config_options(const Options& o) {
  return !o.proto.empty() || !o.config.empty() || !o.profile.empty() || o.seed.has_value();
}

Run open_run(const Options& o, bool create) {
  Run r;
  r.dir = resolve_run_dir(o.run_dir);
  const fs::path snapshot = r.dir / "config.json";
  if (fs::exists(snapshot)) {
    if (has_config_options(o)) {
      throw UsageError("run directory " + r.dir.string() +
                       " is already configured; --proto/--config/--profile/--seed only apply to a new run");
    }
    const json j = read_json(snapshot);
    r.proto = j.at("proto").get<std::string>();
    r.cfg = train_config_from_json(j.at("train"));
    return r;
  }
  if (!create) throw Error("no run in " + r.dir.string() + "; start one with pretrain");
  if (o.proto.empty()) throw UsageError("--proto is required to start a run");
  if (!fs::exists(o.proto)) throw Error("cannot read " + o.proto);
  r.proto = fs::absolute(o.proto).string();
  const TrainConfig base = profile_config(o.profile.empty() ? "desk" : o.profile);
  r.cfg = o.config.empty() ? base : train_config_from_json(read_json(o.config), base);
  if (!o.profile.empty()) r.cfg.profile = o.profile;
  if (o.seed) r.cfg.set_seeds(*o.seed);
  validate(r.cfg);
  fs::create_directories(r.dir);
  write_json(snapshot, {{"proto", r.proto}, {"train", to_json(r.cfg)}});
  return r;
}

std::optional<json> resume_document(const Options& o) {
  if (o.resume.empty()) return std::nullopt;
  return read_json(o.resume);
}

void emit(const Options& o, const json& j, const std::string& text) {
  if (o.json) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << text;
  }
}

std::string policy_rows(const DiscretePolicy& p, const std::vector<TaskSpec>& tasks) {
  std::string s;
  for (std::size_t t = 0; t < p.num_tasks(); ++t) {
    s += fmt::format("  {:<10}", tasks[t].name);
    for (int b : p.choice[t]) s += fmt::format(" {}", branch_name(b).substr(0, 4));
    s += '\n';
  }
  return s;
}

Shape3 parse_input(const std::string& s) {
  Shape3 out;
  if (std::sscanf(s.c_str(), "%zu,%zu,%zu", &out.channels, &out.height, &out.width) != 3 || out.numel() == 0) {
    throw UsageError("--input must be C,H,W with positive entries");
  }
  return out;
}

// --- commands ---

int cmd_inspect(const Options& o) {
  const OperatorGraph g = load_graph(o.proto);
  std::string text = fmt::format("network {}: {} operators, {} parameterized, {} parameters\n", g.name, g.l_total(),
                                 g.l_param(), g.total_params());
  for (const OperatorNode& n : g.nodes) {
    text += fmt::format("  {:<16} {:<14} {:>12} -> {:<12} {:>10}\n", n.name, to_string(n.kind),
                        n.in_shapes.empty() ? "-" : to_string(n.in_shape()),
                        n.out_shape ? to_string(*n.out_shape) : "-", n.param_count);
  }
  emit(o, to_json(g), text);
  return 0;
}

int cmd_compile(const Options& o) {
  if (o.tasks == 0) throw EmptyTaskList();
  std::vector<TaskSpec> tasks;
  for (std::size_t i = 0; i < o.tasks; ++i) tasks.push_back({.name = "task" + std::to_string(i), .output_dim = o.classes});
  const auto t0 = std::chrono::steady_clock::now();
  const OperatorGraph g = o.input.empty() ? load_graph(o.proto) : load_backbone(o.proto, parse_input(o.input));
  const Supermodel m = compile_supermodel(g, tasks, {.materialize_weights = false});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json j = m.summary();
  j["compile_seconds"] = secs;
  const std::string exact = m.search_space_exact();
  const CapacityBounds b = capacity_bounds(m);
  std::string text = fmt::format("supermodel {}: L = {}, N = {}, two-way VCNs = {}\n", g.name, m.num_choices(),
                                 m.num_tasks(), m.two_way_count());
  text += fmt::format("search space: 3^{:.4f}", m.search_space_log3());
  if (exact.size() <= 40) text += " = " + exact;
  text += '\n';
  text += fmt::format("capacity: min {} / all-shared {} / max {} (backbone {})\n", b.min_params, b.all_shared,
                      b.max_params, m.backbone_capacity());
  text += fmt::format("compiled in {:.3f} s\n", secs);
  emit(o, j, text);
  return 0;
}

int cmd_pretrain(const Options& o) {
  Run run = open_run(o, true);
  RunLock lock(run.dir);
  const SyntheticTaskSet data = run.data();
  Supermodel model = run.compile(data);
  TrainState state(run.cfg);
  state.checkpoint_dir = run.dir / "checkpoints";
  fs::create_directories(state.checkpoint_dir);
  state.resume = resume_document(o);
  if (run.cfg.pretrain) pretrain(model, data, run.cfg, state);
  write_json(run.dir / "pretrain.json",
             {{"skipped", !run.cfg.pretrain}, {"model", model_state(model)}, {"streams", stream_state(state)}});
  write_metrics_csv(state, model.num_tasks(), run.dir / "metrics_pretrain.csv");
  json j = {{"run_dir", run.dir.string()}, {"iterations", state.log.size()}, {"skipped", !run.cfg.pretrain}};
  std::string text = run.cfg.pretrain ? fmt::format("pretrained {} iterations", state.log.size())
                                      : std::string("pre-training disabled; initial weights stored");
  if (!state.validation.empty()) {
    j["val_weighted_loss"] = state.validation.back().weighted;
    text += fmt::format(", validation loss {:.4f}", state.validation.back().weighted);
  }
  emit(o, j, text + "\n");
  return 0;
}

int cmd_search(const Options& o) {
  Run run = open_run(o, true);
  RunLock lock(run.dir);
  const SyntheticTaskSet data = run.data();
  Supermodel model = run.compile(data);
  TrainState state(run.cfg);
  if (run.cfg.pretrain) {
    if (!fs::exists(run.dir / "pretrain.json")) throw Error("run has no pre-trained weights; run pretrain first");
    const json pre = read_json(run.dir / "pretrain.json");
    load_model_state(model, pre.at("model"));
    load_stream_state(state, pre.at("streams"));
  }
  state.checkpoint_dir = run.dir / "checkpoints";
  fs::create_directories(state.checkpoint_dir);
  state.resume = resume_document(o);
  const PolicyState ps = policy_train(model, data, run.cfg, state);
  write_json(run.dir / "search.json", {{"model", model_state(model)},
                                       {"streams", stream_state(state)},
                                       {"tau", ps.tau},
                                       {"iterations", ps.iterations}});
  write_json(run.dir / "policy_soft.json", export_policy(model, ps.tau));
  const DiscretePolicy am = argmax_policy(model);
  write_json(run.dir / "policy_argmax.json", to_json(am));
  write_metrics_csv(state, model.num_tasks(), run.dir / "metrics_search.csv");
  const SharingStats s = sharing_statistics(am);
  json j = {{"run_dir", run.dir.string()}, {"tau", ps.tau}, {"iterations", ps.iterations}, {"pi", ps.pi},
            {"argmax", to_json(am)}, {"argmax_sharing", to_json(s)}};
  emit(o, j,
       fmt::format("policy-trained {} iterations (tau {:.3f})\nargmax policy:\n{}", ps.iterations, ps.tau,
                   policy_rows(am, data.tasks)));
  return 0;
}

Supermodel load_searched(const Run& run, const SyntheticTaskSet& data, TrainState* state) {
  if (!fs::exists(run.dir / "search.json")) throw Error("run has no searched policy; run search first");
  Supermodel model = run.compile(data);
  const json j = read_json(run.dir / "search.json");
  load_model_state(model, j.at("model"));
  if (state) load_stream_state(*state, j.at("streams"));
  return model;
}

int cmd_sample(const Options& o) {
  Options base = o;
  base.seed.reset();
  Run run = open_run(base, false);
  RunLock lock(run.dir);
  const SyntheticTaskSet data = run.data();
  const Supermodel model = load_searched(run, data, nullptr);
  const std::uint64_t seed = o.seed.value_or(run.cfg.sample_seed);
  const DiscretePolicy p = sample_policy(model, seed);
  fs::create_directories(run.dir / "policies");
  const fs::path file = run.dir / "policies" / fmt::format("seed_{}.json", seed);
  const std::int64_t params = derive_model(model, p).param_count();
  const double rel = relative_params(static_cast<double>(params), static_cast<double>(single_task_total(model)));
  write_json(file, {{"seed", seed}, {"policy", to_json(p)}, {"params", params}, {"params_relative", rel}});
  json j = {{"file", file.string()}, {"seed", seed}, {"policy", to_json(p)}, {"params", params},
            {"params_relative", rel}, {"sharing", to_json(sharing_statistics(p))}};
  emit(o, j,
       fmt::format("seed {} -> {}\n{}params {} ({}% vs single-task)\n", seed, file.string(),
                   policy_rows(p, data.tasks), params, format_signed(rel)));
  return 0;
}

DiscretePolicy policy_from_file(const fs::path& p) {
  const json j = read_json(p);
  return discrete_policy_from_json(j.contains("policy") ? j.at("policy") : j);
}

int cmd_posttrain(const Options& o) {
  Options base = o;
  base.seed.reset();
  Run run = open_run(base, false);
  RunLock lock(run.dir);
  const SyntheticTaskSet data = run.data();
  TrainState state(run.cfg);
  const Supermodel model = load_searched(run, data, &state);

  const int picked = (o.policy_file.empty() ? 0 : 1) + (o.all.empty() ? 0 : 1) + (o.seed ? 1 : 0);
  if (picked > 1) throw UsageError("choose at most one of --policy, --all, --seed");
  DiscretePolicy policy;
  std::string tag;
  if (!o.policy_file.empty()) {
    policy = policy_from_file(o.policy_file);
    tag = fs::path(o.policy_file).stem().string();
  } else if (!o.all.empty()) {
    const int b = o.all == "shared" ? kShared : o.all == "specific" ? kSpecific : -1;
    if (b < 0) throw UsageError("--all takes shared or specific");
    policy = DiscretePolicy::uniform(model.num_tasks(), model.num_choices(), b);
    tag = "all-" + o.all;
  } else {
    const std::uint64_t seed = o.seed.value_or(run.cfg.sample_seed);
    policy = sample_policy(model, seed);
    tag = fmt::format("seed_{}", seed);
  }
  if (!o.tag.empty()) tag = o.tag;
  check_policy(model, policy);

  TrainConfig cfg = run.cfg;
  if (!o.mode.empty()) cfg.post_mode = post_train_mode_from_string(o.mode);
  state.checkpoint_dir = run.dir / "checkpoints" / tag;
  fs::create_directories(state.checkpoint_dir);
  state.resume = resume_document(o);
  MultiTaskModel derived = post_train(model, policy, data, cfg, state);
  const Evaluation e = evaluate(derived, data, data.val, cfg.task_lambdas(model.num_tasks()));
  const ParamReport pr = param_report(derived, single_task_total(model));
  write_json(run.dir / fmt::format("posttrain_{}.json", tag), {{"tag", tag},
                                                             {"mode", to_string(cfg.post_mode)},
                                                             {"policy", to_json(policy)},
                                                             {"evaluation", to_json(e)},
                                                             {"params", to_json(pr)},
                                                             {"model", model_state(derived)}});
  write_metrics_csv(state, model.num_tasks(), run.dir / fmt::format("metrics_posttrain_{}.csv", tag));
  json j = {{"tag", tag}, {"mode", to_string(cfg.post_mode)}, {"policy", to_json(policy)},
            {"evaluation", to_json(e)}, {"params", to_json(pr)}};
  std::string text = fmt::format("post-trained '{}' ({}), {} iterations\n", tag, to_string(cfg.post_mode),
                                 state.log.size());
  for (const TaskEval& t : e.tasks) {
    text += fmt::format("  {:<10} loss {:.4f} accuracy {:.3f} mae {:.4f}\n", t.task, t.loss, t.accuracy, t.mae);
  }
  text += fmt::format("params {} ({}%)\n", pr.absolute, format_signed(pr.relative_percent));
  emit(o, j, text);
  return 0;
}

fs::path default_directions(const fs::path& csv) {
  return csv.parent_path() / (csv.stem().string() + "_directions.json");
}

int cmd_eval(const Options& o) {
  if (!o.table.empty()) {
    const fs::path csv = o.table;
    const fs::path manifest = o.directions.empty() ? default_directions(csv) : fs::path(o.directions);
    const auto rows = reproduce_table(csv, read_json(manifest));
    json j = json::array();
    std::string text = fmt::format("{:<14} {:>8} {:>8} {:>8} {:>8}  published\n", "model", "dt_1", "dt_2", "dt",
                                   "params");
    bool all_within = true;
    for (const TableRow& r : rows) {
      j.push_back(to_json(r));
      std::string cells;
      for (double d : r.task_deltas) cells += fmt::format(" {:>8}", format_signed(d));
      std::string published;
      for (double d : r.published_task_deltas) published += fmt::format(" {}", format_signed(d));
      auto within = [](double a, double b) { return std::abs(round_display(a) - b) <= 0.1 + 1e-9; };
      for (std::size_t i = 0; i < r.task_deltas.size(); ++i) all_within &= within(r.task_deltas[i], r.published_task_deltas[i]);
      all_within &= within(r.delta, r.published_delta);
      if (r.param_relative) all_within &= within(*r.param_relative, *r.published_param_relative);
      text += fmt::format("{:<14}{} {:>8} {:>8} {} / {} / {}\n", r.model, cells, format_signed(r.delta),
                          r.param_relative ? format_signed(*r.param_relative) : "-", published,
                          format_signed(r.published_delta),
                          r.published_param_relative ? format_signed(*r.published_param_relative) : "-");
    }
    text += all_within ? "all entries within 0.1 of the published values\n"
                       : "some entries differ from the published values by more than 0.1\n";
    emit(o, {{"rows", j}, {"within_tolerance", all_within}}, text);
    return all_within ? 0 : 1;
  }
  if (o.tag.empty()) throw UsageError("eval needs --table or --tag");
  Run run = open_run(o, false);
  const fs::path file = run.dir / fmt::format("posttrain_{}.json", o.tag);
  const json saved = read_json(file);
  const SyntheticTaskSet data = run.data();
  const Supermodel model = run.compile(data);
  MultiTaskModel derived = derive_model(model, discrete_policy_from_json(saved.at("policy")));
  load_model_state(derived, saved.at("model"));
  const Evaluation e = evaluate(derived, data, data.val, run.cfg.task_lambdas(model.num_tasks()));
  std::string text = fmt::format("'{}' on validation ({} samples)\n", o.tag, data.val.size());
  for (const TaskEval& t : e.tasks) {
    text += fmt::format("  {:<10} loss {:.4f} accuracy {:.3f} mae {:.4f}\n", t.task, t.loss, t.accuracy, t.mae);
  }
  emit(o, to_json(e), text);
  return 0;
}

// Synthetic tasks report accuracy (classification) or mae (regression) next
// to the loss; both enter the relative performance.
TaskMetrics eval_metrics(const json& task, bool regression) {
  TaskMetrics m{task.at("task").get<std::string>(), {}};
  m.metrics.push_back({"loss", task.at("loss").get<double>(), true});
  if (regression) {
    m.metrics.push_back({"mae", task.at("mae").get<double>(), true});
  } else {
    m.metrics.push_back({"accuracy", task.at("accuracy").get<double>(), false});
  }
  return m;
}

int cmd_report(const Options& o) {
  Run run = open_run(o, false);
  RunLock lock(run.dir);
  std::map<std::string, json> runs;
  for (const auto& entry : fs::directory_iterator(run.dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("posttrain_", 0) == 0 && entry.path().extension() == ".json") {
      json j = read_json(entry.path());
      j.erase("model");
      const std::string tag = j.at("tag").get<std::string>();
      runs[tag] = std::move(j);
    }
  }
  if (runs.empty()) throw Error("run has no post-trained models; run posttrain first");
  const std::string reference = o.tag.empty() ? "all-specific" : o.tag;
  const bool regression = run.cfg.data.loss == LossKind::kL1;
  const json* ref = runs.contains(reference) ? &runs.at(reference) : nullptr;

  json rows = json::array();
  std::string csv = "tag,mode,params,params_rel,shared,specific,skip";
  for (std::size_t t = 0; t < run.cfg.data.num_tasks; ++t) csv += fmt::format(",loss_{0},metric_{0},dt_{0}", t);
  csv += ",dt\n";
  std::string text = fmt::format("{:<14} {:<10} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "tag", "mode", "params",
                                 "rel%", "shared", "spec", "skip", "dt");
  for (auto& [tag, r] : runs) {
    const SharingStats s = sharing_statistics(discrete_policy_from_json(r.at("policy")));
    json row = {{"tag", tag}, {"mode", r.at("mode")}, {"params", r.at("params")}, {"sharing", to_json(s)},
                {"evaluation", r.at("evaluation")}};
    std::optional<double> dt;
    std::vector<double> deltas;
    if (ref) {
      MetricSet mine, stl;
      for (const json& t : r.at("evaluation").at("tasks")) mine.push_back(eval_metrics(t, regression));
      for (const json& t : ref->at("evaluation").at("tasks")) stl.push_back(eval_metrics(t, regression));
      deltas = relative_performance(mine, stl);
      dt = overall_delta(deltas);
      row["task_deltas"] = deltas;
      row["delta"] = *dt;
      row["reference"] = reference;
    }
    rows.push_back(row);
    const double rel = r.at("params").at("relative_percent").get<double>();
    csv += fmt::format("{},{},{},{},{},{},{}", tag, r.at("mode").get<std::string>(),
                       r.at("params").at("absolute").get<std::int64_t>(), rel, s.overall.shared, s.overall.specific,
                       s.overall.skip);
    const json& tasks = r.at("evaluation").at("tasks");
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      csv += fmt::format(",{},{},{}", tasks[t].at("loss").get<double>(),
                         tasks[t].at(regression ? "mae" : "accuracy").get<double>(),
                         dt ? fmt::format("{}", deltas[t]) : "");
    }
    csv += dt ? fmt::format(",{}\n", *dt) : ",\n";
    text += fmt::format("{:<14} {:<10} {:>9} {:>7} {:>7.2f} {:>7.2f} {:>7.2f} {:>7}\n", tag,
                        r.at("mode").get<std::string>(), r.at("params").at("absolute").get<std::int64_t>(),
                        format_signed(rel), s.overall.shared, s.overall.specific, s.overall.skip,
                        dt ? format_signed(*dt) : "-");
  }
  if (!ref) text += fmt::format("(no '{}' run; relative performance omitted)\n", reference);
  const json report = {{"reference", ref ? json(reference) : json()}, {"rows", rows}};
  write_json(run.dir / "report.json", report);
  write_text(run.dir / "report.csv", csv);
  emit(o, report, text);
  return 0;
}

int cmd_viz_export(const Options& o) {
  Run run = open_run(o, false);
  RunLock lock(run.dir);
  const SyntheticTaskSet data = run.data();
  const Supermodel model = load_searched(run, data, nullptr);
  std::optional<DiscretePolicy> pattern;
  if (!o.policy_file.empty()) pattern = policy_from_file(o.policy_file);
  const PolicyViz v = make_policy_viz(model, pattern);
  const fs::path out = o.out.empty() ? run.dir / "policy_viz.json" : fs::path(o.out);
  write_json(out, to_json(v));
  json j = {{"json", out.string()}};
  std::string text = "wrote " + out.string() + "\n";
  if (o.svg) {
    fs::path svg = out;
    svg.replace_extension(".svg");
    write_text(svg, render_svg(v));
    j["svg"] = svg.string();
    text += "wrote " + svg.string() + "\n";
  }
  emit(o, j, text);
  return 0;
}

std::string error_kind(const std::exception& e) {
#define MTLC_KIND(T) \
  if (dynamic_cast<const T*>(&e)) return #T;
  MTLC_KIND(SyntaxError)
  MTLC_KIND(UnsupportedLayer)
  MTLC_KIND(DanglingReference)
  MTLC_KIND(InvalidLayer)
  MTLC_KIND(ShapeMismatch)
  MTLC_KIND(ShapesMissing)
  MTLC_KIND(CycleDetected)
  MTLC_KIND(EmptyTaskList)
  MTLC_KIND(IncompatibleShapes)
  MTLC_KIND(PolicyShapeMismatch)
  MTLC_KIND(LabelOutOfRange)
  MTLC_KIND(ZeroVector)
  MTLC_KIND(ZeroReference)
  MTLC_KIND(DimensionMismatch)
  MTLC_KIND(Divergence)
  MTLC_KIND(InvalidConfig)
  MTLC_KIND(UsageError)
#undef MTLC_KIND
  return dynamic_cast<const Error*>(&e) ? "Error" : "InternalError";
}

void report_error(const Options& o, const std::exception& e) {
  if (o.json) {
    std::cerr << json{{"error", error_kind(e)}, {"message", e.what()}}.dump() << '\n';
  } else {
    std::cerr << "mtlc: " << error_kind(e) << ": " << e.what() << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Multi-task supermodel compiler and sharing-policy search"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  auto add_proto = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--proto", o.proto, "Backbone prototxt");
    if (required) opt->required()->check(CLI::ExistingFile);
  };
  auto add_run = [&](CLI::App* c) {
    c->add_option("--run-dir", o.run_dir, "Run directory (relative paths resolve under $MTLC_RUN_ROOT)")
        ->capture_default_str();
  };
  auto add_new_run = [&](CLI::App* c) {
    add_run(c);
    add_proto(c, false);
    c->add_option("--config", o.config, "Training configuration JSON")->check(CLI::ExistingFile);
    c->add_option("--profile", o.profile, "desk, cityscapes, nyuv2 or taskonomy");
    c->add_option("--seed", o.seed, "Run seed (weights, noise, data, sampling)");
    c->add_option("--resume", o.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  };
  auto add_json = [&](CLI::App* c) { c->add_flag("--json", o.json, "Machine-readable output"); };

  auto* inspect = app.add_subcommand("inspect", "Parse a backbone and list its operators");
  add_proto(inspect, true);
  add_json(inspect);

  auto* compile = app.add_subcommand("compile", "Compile a backbone into a supermodel and summarize it");
  add_proto(compile, true);
  compile->add_option("--tasks", o.tasks, "Number of tasks")->capture_default_str();
  compile->add_option("--classes", o.classes, "Outputs per task head")->capture_default_str()->check(CLI::PositiveNumber);
  compile->add_option("--input", o.input, "Input shape C,H,W (default: as declared)");
  add_json(compile);

  auto* pre = app.add_subcommand("pretrain", "Start a run and warm up the supermodel weights");
  add_new_run(pre);
  add_json(pre);

  auto* search = app.add_subcommand("search", "Alternate weight and policy training");
  add_new_run(search);
  add_json(search);

  auto* sample = app.add_subcommand("sample", "Draw a discrete policy from the searched distribution");
  add_run(sample);
  sample->add_option("--seed", o.seed, "Sampling seed (default: the run's sample seed)");
  add_json(sample);

  auto* post = app.add_subcommand("posttrain", "Train the model derived from a policy");
  add_run(post);
  post->add_option("--policy", o.policy_file, "Policy JSON (from sample)")->check(CLI::ExistingFile);
  post->add_option("--seed", o.seed, "Sample the policy with this seed");
  post->add_option("--all", o.all, "Use the all-shared or all-specific policy")
      ->check(CLI::IsMember({"shared", "specific"}));
  post->add_option("--mode", o.mode, "retrain or fine-tune")->check(CLI::IsMember({"retrain", "fine-tune"}));
  post->add_option("--tag", o.tag, "Name of the result");
  post->add_option("--resume", o.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  add_json(post);

  auto* eval = app.add_subcommand("eval", "Evaluate a post-trained model, or reproduce a comparison table");
  add_run(eval);
  eval->add_option("--table", o.table, "Comparison table CSV")->check(CLI::ExistingFile);
  eval->add_option("--directions", o.directions, "Metric direction manifest (default: <csv>_directions.json)")
      ->check(CLI::ExistingFile);
  eval->add_option("--tag", o.tag, "Post-trained result to evaluate");
  add_json(eval);

  auto* report = app.add_subcommand("report", "Summarize every post-trained model of a run");
  add_run(report);
  report->add_option("--reference", o.tag, "Reference result for relative performance (default: all-specific)");
  add_json(report);

  auto* viz = app.add_subcommand("viz-export", "Export the policy heatmap and sharing pattern");
  add_run(viz);
  viz->add_option("--policy", o.policy_file, "Discrete policy to overlay")->check(CLI::ExistingFile);
  viz->add_option("--out", o.out, "Output JSON path (default: <run>/policy_viz.json)");
  viz->add_flag("--svg", o.svg, "Also write an SVG next to the JSON");
  add_json(viz);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*inspect) return cmd_inspect(o);
    if (*compile) return cmd_compile(o);
    if (*pre) return cmd_pretrain(o);
    if (*search) return cmd_search(o);
    if (*sample) return cmd_sample(o);
    if (*post) return cmd_posttrain(o);
    if (*eval) return cmd_eval(o);
    if (*report) return cmd_report(o);
    if (*viz) return cmd_viz_export(o);
  } catch (const UsageError& e) {
    report_error(o, e);
    return 2;
  } catch (const std::exception& e) {
    report_error(o, e);
    return 1;
  }
  return 2;
}
