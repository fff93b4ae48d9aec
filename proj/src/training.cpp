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

#include "mtlc/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "mtlc/errors.hpp"

namespace mtlc {
namespace {

using nlohmann::json;

constexpr std::size_t kMaxNonFinite = 3;
// Retraining draws from a stream distinct from the supermodel's own init.
constexpr std::uint64_t kRetrainSalt = 0x9E3779B97F4A7C15ULL;

const char* kStagePre = "pretrain";
const char* kStagePolicy = "policy";
const char* kStagePost = "posttrain";

void set_requires_grad(std::vector<ag::Var>& vars, bool on) {
  for (ag::Var& v : vars) v.set_requires_grad(on);
}

void zero_grads(std::vector<ag::Var>& vars) {
  for (ag::Var& v : vars) v.zero_grad();
}

OptimizerConfig weight_optimizer(const TrainConfig& c) {
  OptimizerConfig o;
  o.kind = c.weight_optimizer;
  o.learning_rate = c.weight_lr;
  o.momentum = c.momentum;
  o.schedule = {c.lr_decay_factor, c.lr_decay_every};
  return o;
}

OptimizerConfig policy_optimizer(const TrainConfig& c) {
  OptimizerConfig o;
  o.kind = OptimizerKind::kAdam;
  o.learning_rate = c.policy_lr;
  return o;
}

json optimizer_state(Optimizer& opt) {
  json m = json::array(), v = json::array();
  for (const Tensor& t : opt.first_moments()) m.push_back(tensor_to_json(t));
  for (const Tensor& t : opt.second_moments()) v.push_back(tensor_to_json(t));
  return {{"step", opt.step_count()}, {"m", m}, {"v", v}};
}

void load_optimizer_state(Optimizer& opt, const json& j) {
  opt.set_step_count(j.at("step").get<std::int64_t>());
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  if (j.at("m").size() != m.size() || j.at("v").size() != v.size()) {
    throw InvalidConfig("checkpoint optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = tensor_from_json(j.at("m")[i]);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = tensor_from_json(j.at("v")[i]);
}

json rows_json(const std::vector<MetricsRow>& rows) {
  json out = json::array();
  for (const MetricsRow& r : rows) {
    out.push_back({{"stage", r.stage}, {"iter", r.iter}, {"phase", r.phase}, {"losses", r.losses},
                   {"l_reg", r.l_reg}, {"tau", r.tau}, {"lr", r.lr}});
  }
  return out;
}

std::vector<MetricsRow> rows_from_json(const json& j) {
  std::vector<MetricsRow> out;
  for (const json& r : j) {
    out.push_back({r.at("stage"), r.at("iter"), r.at("phase"), r.at("losses").get<std::vector<double>>(),
                   r.at("l_reg"), r.at("tau"), r.at("lr")});
  }
  return out;
}

json validation_json(const std::vector<ValidationRow>& rows) {
  json out = json::array();
  for (const ValidationRow& r : rows) {
    out.push_back({{"stage", r.stage}, {"iter", r.iter}, {"losses", r.losses}, {"weighted", r.weighted}});
  }
  return out;
}

std::vector<ValidationRow> validation_from_json(const json& j) {
  std::vector<ValidationRow> out;
  for (const json& r : j) {
    out.push_back({r.at("stage"), r.at("iter"), r.at("losses").get<std::vector<double>>(), r.at("weighted")});
  }
  return out;
}

json rng_state(const TrainState& s) {
  json out = json::array();
  for (std::size_t i = 0; i < kNumStreams; ++i) out.push_back(s.rng[static_cast<Stream>(i)].serialize());
  return out;
}

void load_rng_state(TrainState& s, const json& j) {
  for (std::size_t i = 0; i < kNumStreams; ++i) s.rng[static_cast<Stream>(i)].deserialize(j.at(i));
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

// Consumes state.resume when it belongs to `stage`.
std::optional<json> take_resume(TrainState& state, const char* stage) {
  if (!state.resume || state.resume->value("stage", "") != stage) return std::nullopt;
  std::optional<json> out = std::move(state.resume);
  state.resume.reset();
  return out;
}

void save_checkpoint(TrainState& state, const char* stage, std::size_t next_iter, json model,
                     std::vector<Optimizer*> opts, json extra = json::object()) {
  if (state.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(state.checkpoint_dir);
  json optimizers = json::array();
  for (Optimizer* o : opts) optimizers.push_back(optimizer_state(*o));
  json ckpt = {{"stage", stage},
               {"iter", next_iter},
               {"model", std::move(model)},
               {"optimizers", optimizers},
               {"rng", rng_state(state)},
               {"log", rows_json(state.log)},
               {"validation", validation_json(state.validation)},
               {"extra", std::move(extra)}};
  write_json(state.checkpoint_dir / (std::string(stage) + "_" + std::to_string(next_iter) + ".json"), ckpt);
  write_json(state.checkpoint_dir / "latest.json", ckpt);
}

std::size_t restore(TrainState& state, const json& ckpt, std::vector<Optimizer*> opts) {
  const json& o = ckpt.at("optimizers");
  if (o.size() != opts.size()) throw InvalidConfig("checkpoint has the wrong number of optimizers");
  for (std::size_t i = 0; i < opts.size(); ++i) load_optimizer_state(*opts[i], o[i]);
  load_rng_state(state, ckpt.at("rng"));
  state.log = rows_from_json(ckpt.at("log"));
  state.validation = validation_from_json(ckpt.at("validation"));
  return ckpt.at("iter").get<std::size_t>();
}

class DivergenceGuard {
 public:
  explicit DivergenceGuard(const char* stage) : stage_(stage) {}

  // True when the step may proceed.
  bool check(std::size_t iter, const std::vector<double>& losses, double total) {
    if (std::isfinite(total)) {
      streak_ = 0;
      return true;
    }
    if (++streak_ >= kMaxNonFinite) {
      std::ostringstream msg;
      msg << stage_ << ": loss non-finite for " << streak_ << " consecutive iterations (last at " << iter
          << ", task losses";
      for (double l : losses) msg << ' ' << l;
      msg << ")";
      throw Divergence(msg.str());
    }
    return false;
  }

 private:
  const char* stage_;
  std::size_t streak_ = 0;
};

std::vector<double> values_of(const std::vector<ag::Var>& losses) {
  std::vector<double> out;
  for (const ag::Var& l : losses) out.push_back(l.value()[0]);
  return out;
}

double weighted(const std::vector<double>& losses, const std::vector<double>& lambdas) {
  double s = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) s += lambdas[i] * losses[i];
  return s;
}

using OutputFn = std::function<std::vector<ag::Var>(const ag::Var&)>;

// Mean per-task losses over a split in inference mode.
std::vector<double> split_losses(const SyntheticTaskSet& data, const Split& split, std::size_t batch_size,
                                 const OutputFn& forward) {
  std::vector<double> sums(data.tasks.size(), 0.0);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(split.size(), begin + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, split, idx);
    const auto outputs = forward(batch.x);
    const auto losses = task_losses(data.tasks, outputs, batch);
    for (std::size_t t = 0; t < sums.size(); ++t) sums[t] += losses[t].value()[0] * static_cast<double>(idx.size());
  }
  for (double& s : sums) s /= static_cast<double>(split.size());
  return sums;
}

void record_validation(TrainState& state, const char* stage, std::size_t iter, std::vector<double> losses,
                       const std::vector<double>& lambdas) {
  const double w = weighted(losses, lambdas);
  state.validation.push_back({stage, iter, std::move(losses), w});
}

void require_matching(const Supermodel& model, const SyntheticTaskSet& data, const TrainConfig& cfg) {
  if (model.num_tasks() != data.tasks.size()) {
    throw DimensionMismatch("supermodel has " + std::to_string(model.num_tasks()) + " tasks, data has " +
                            std::to_string(data.tasks.size()));
  }
  if (!cfg.lambdas.empty() && cfg.lambdas.size() != model.num_tasks()) {
    throw InvalidConfig("lambdas has " + std::to_string(cfg.lambdas.size()) + " entries for " +
                        std::to_string(model.num_tasks()) + " tasks");
  }
}

}  // namespace

std::string to_string(PostTrainMode mode) { return mode == PostTrainMode::kRetrain ? "retrain" : "fine-tune"; }

PostTrainMode post_train_mode_from_string(const std::string& name) {
  if (name == "retrain") return PostTrainMode::kRetrain;
  if (name == "fine-tune" || name == "finetune") return PostTrainMode::kFineTune;
  throw InvalidConfig("unknown post-train mode '" + name + "'");
}

void TrainConfig::set_seeds(std::uint64_t seed) {
  weight_seed = seed;
  gumbel_seed = seed + 1;
  data_seed = seed + 2;
  dropout_seed = seed + 3;
  sample_seed = seed;
}

std::vector<double> TrainConfig::task_lambdas(std::size_t num_tasks) const {
  if (lambdas.empty()) return std::vector<double>(num_tasks, 1.0);
  if (lambdas.size() != num_tasks) {
    throw InvalidConfig("lambdas has " + std::to_string(lambdas.size()) + " entries for " +
                        std::to_string(num_tasks) + " tasks");
  }
  return lambdas;
}

std::vector<std::string> profile_names() { return {"desk", "cityscapes", "nyuv2", "taskonomy"}; }

TrainConfig profile_config(const std::string& profile) {
  TrainConfig c;
  c.profile = profile;
  if (profile == "desk") return c;
  if (profile == "cityscapes") {
    c.pre_iters = 10000;
    c.policy_iters = 20000;
    c.post_iters = 30000;
    c.lambdas = {1, 1};
    c.lambda_reg = 0.0005;
  } else if (profile == "nyuv2") {
    c.pre_iters = 10000;
    c.policy_iters = 20000;
    c.post_iters = 30000;
    c.lambdas = {5, 20, 5};
    c.lambda_reg = 0.001;
  } else if (profile == "taskonomy") {
    c.pre_iters = 20000;
    c.policy_iters = 30000;
    c.post_iters = 50000;
    c.weight_lr = 0.0001;
    c.lr_decay_factor = 0.3;
    c.lr_decay_every = 10000;
    c.lambdas = {1, 3, 2, 7, 7};
    c.lambda_reg = 0.0005;
  } else {
    throw InvalidConfig("unknown profile '" + profile + "'");
  }
  c.data.num_tasks = c.lambdas.size();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"profile", c.profile},
          {"pre_iters", c.pre_iters},
          {"policy_iters", c.policy_iters},
          {"post_iters", c.post_iters},
          {"weight_optimizer", to_string(c.weight_optimizer)},
          {"weight_lr", c.weight_lr},
          {"momentum", c.momentum},
          {"policy_lr", c.policy_lr},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_every", c.lr_decay_every},
          {"lambdas", c.lambdas},
          {"lambda_reg", c.lambda_reg},
          {"batch_size", c.batch_size},
          {"tau_start", c.tau_start},
          {"tau_end", c.tau_end},
          {"alternation_period", c.alternation_period},
          {"policy_split", c.policy_split},
          {"straight_through", c.straight_through},
          {"pretrain", c.pretrain},
          {"post_mode", to_string(c.post_mode)},
          {"weight_seed", c.weight_seed},
          {"gumbel_seed", c.gumbel_seed},
          {"data_seed", c.data_seed},
          {"dropout_seed", c.dropout_seed},
          {"sample_seed", c.sample_seed},
          {"val_every", c.val_every},
          {"checkpoint_every", c.checkpoint_every},
          {"data", to_json(c.data)}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
  return train_config_from_json(j, profile_config(j.value("profile", std::string("desk"))));
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  static const std::vector<std::string> kKeys = {
      "profile",      "pre_iters",    "policy_iters",     "post_iters",   "weight_optimizer", "weight_lr",
      "momentum",     "policy_lr",    "lr_decay_factor",  "lr_decay_every", "lambdas",        "lambda_reg",
      "batch_size",   "tau_start",    "tau_end",          "alternation_period", "policy_split", "straight_through",
      "pretrain",     "post_mode",    "weight_seed",      "gumbel_seed",  "data_seed",        "dropout_seed",
      "sample_seed",  "val_every",    "checkpoint_every", "data"};
  if (!j.is_object()) throw InvalidConfig("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) throw InvalidConfig("unknown config key '" + key + "'");
  }
  try {
    c.profile = j.value("profile", c.profile);
    c.pre_iters = j.value("pre_iters", c.pre_iters);
    c.policy_iters = j.value("policy_iters", c.policy_iters);
    c.post_iters = j.value("post_iters", c.post_iters);
    if (j.contains("weight_optimizer")) c.weight_optimizer = optimizer_kind_from_string(j.at("weight_optimizer"));
    c.weight_lr = j.value("weight_lr", c.weight_lr);
    c.momentum = j.value("momentum", c.momentum);
    c.policy_lr = j.value("policy_lr", c.policy_lr);
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.lambdas = j.value("lambdas", c.lambdas);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.tau_start = j.value("tau_start", c.tau_start);
    c.tau_end = j.value("tau_end", c.tau_end);
    c.alternation_period = j.value("alternation_period", c.alternation_period);
    c.policy_split = j.value("policy_split", c.policy_split);
    c.straight_through = j.value("straight_through", c.straight_through);
    c.pretrain = j.value("pretrain", c.pretrain);
    if (j.contains("post_mode")) c.post_mode = post_train_mode_from_string(j.at("post_mode"));
    c.weight_seed = j.value("weight_seed", c.weight_seed);
    c.gumbel_seed = j.value("gumbel_seed", c.gumbel_seed);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.dropout_seed = j.value("dropout_seed", c.dropout_seed);
    c.sample_seed = j.value("sample_seed", c.sample_seed);
    c.val_every = j.value("val_every", c.val_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("data")) {
      json merged = to_json(c.data);
      merged.update(j.at("data"));
      c.data = synthetic_config_from_json(merged);
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidConfig("config: " + what);
  };
  require(c.policy_iters > 0, "policy_iters must be positive");
  require(c.post_iters > 0, "post_iters must be positive");
  require(c.weight_lr >= 0.0 && c.policy_lr >= 0.0, "learning rates must be non-negative");
  require(c.lr_decay_factor > 0.0 && c.lr_decay_factor <= 1.0, "lr_decay_factor must lie in (0, 1]");
  require(c.lr_decay_every >= 0, "lr_decay_every must be non-negative");
  for (double l : c.lambdas) require(l >= 0.0, "lambdas must be non-negative");
  require(c.lambda_reg >= 0.0, "lambda_reg must be non-negative");
  require(c.batch_size > 0, "batch_size must be positive");
  require(c.tau_start > 0.0 && c.tau_end > 0.0, "temperatures must be positive");
  require(c.alternation_period >= 1, "alternation_period must be at least 1");
  require(c.policy_split > 0.0 && c.policy_split < 1.0, "policy_split must lie in (0, 1)");
  require(c.val_every > 0 && c.checkpoint_every > 0, "val_every and checkpoint_every must be positive");
  require(c.lambdas.empty() || c.lambdas.size() == c.data.num_tasks, "lambdas must have one entry per task");
}

TrainState::TrainState(const TrainConfig& c)
    : rng(c.weight_seed, c.gumbel_seed, c.dropout_seed, c.data_seed + 1) {}

void write_metrics_csv(const TrainState& state, std::size_t num_tasks, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "stage,iter,phase";
  for (std::size_t t = 0; t < num_tasks; ++t) out << ",loss_" << t;
  out << ",l_reg,tau,lr\n";
  out.precision(17);
  for (const MetricsRow& r : state.log) {
    out << r.stage << ',' << r.iter << ',' << r.phase;
    for (double l : r.losses) out << ',' << l;
    out << ',' << r.l_reg << ',' << r.tau << ',' << r.lr << '\n';
  }
}

// --- stages ---

void pretrain(Supermodel& model, const SyntheticTaskSet& data, const TrainConfig& cfg, TrainState& state) {
  require_matching(model, data, cfg);
  const auto lambdas = cfg.task_lambdas(model.num_tasks());
  std::vector<ag::Var> weights = model.weights();
  std::vector<ag::Var> logits = model.logits();
  Optimizer opt(weight_optimizer(cfg), weights);
  std::size_t start = 0;
  if (auto ckpt = take_resume(state, kStagePre)) {
    load_model_state(model, ckpt->at("model"));
    start = restore(state, *ckpt, {&opt});
  }
  set_requires_grad(logits, false);
  const auto branch = uniform_branch_weights(model);
  const ForwardContext ctx{.training = true, .dropout_rng = &state.rng[Stream::kDropout]};
  DivergenceGuard guard(kStagePre);
  const std::size_t n = data.train.size();
  for (std::size_t it = start; it < cfg.pre_iters; ++it) {
    const auto idx = draw_indices(state.rng[Stream::kData], 0, n, cfg.batch_size);
    const Batch batch = make_batch(data, data.train, idx);
    const ag::Var inputs[] = {batch.x};
    const auto outputs = model.forward(inputs, branch, ctx);
    const auto losses = task_losses(data.tasks, outputs, batch);
    const ag::Var total = total_loss(losses, lambdas, ag::Var(), 0.0);
    const auto values = values_of(losses);
    state.log.push_back({kStagePre, it, "", values, 0.0, 0.0, opt.current_lr()});
    if (guard.check(it, values, total.value()[0])) {
      zero_grads(weights);
      total.backward();
      opt.step();
    }
    if ((it + 1) % cfg.val_every == 0) {
      const auto val = split_losses(data, data.val, 256, [&](const ag::Var& x) {
        const ag::Var in[] = {x};
        return model.forward(in, branch, {.training = false});
      });
      record_validation(state, kStagePre, it + 1, val, lambdas);
    }
    if ((it + 1) % cfg.checkpoint_every == 0) save_checkpoint(state, kStagePre, it + 1, model_state(model), {&opt});
  }
  set_requires_grad(logits, true);
  zero_grads(weights);
}

PolicyState policy_train(Supermodel& model, const SyntheticTaskSet& data, const TrainConfig& cfg,
                         TrainState& state) {
  require_matching(model, data, cfg);
  const auto lambdas = cfg.task_lambdas(model.num_tasks());
  std::vector<ag::Var> weights = model.weights();
  std::vector<ag::Var> logits = model.logits();
  Optimizer wopt(weight_optimizer(cfg), weights);
  Optimizer popt(policy_optimizer(cfg), logits);
  std::size_t start = 0;
  if (auto ckpt = take_resume(state, kStagePolicy)) {
    load_model_state(model, ckpt->at("model"));
    start = restore(state, *ckpt, {&wopt, &popt});
  }
  const ForwardContext ctx{.training = true, .dropout_rng = &state.rng[Stream::kDropout]};
  DivergenceGuard guard(kStagePolicy);
  const std::size_t n = data.train.size();
  const std::size_t split_at =
      std::clamp<std::size_t>(static_cast<std::size_t>(cfg.policy_split * static_cast<double>(n)), 1, n - 1);
  double tau = cfg.tau_start;
  for (std::size_t it = start; it < cfg.policy_iters; ++it) {
    tau = temperature_schedule(it, cfg.policy_iters, cfg.tau_start, cfg.tau_end);
    const bool weight_phase = (it / cfg.alternation_period) % 2 == 0;
    set_requires_grad(weights, weight_phase);
    set_requires_grad(logits, !weight_phase);
    const auto idx = weight_phase ? draw_indices(state.rng[Stream::kData], 0, split_at, cfg.batch_size)
                                  : draw_indices(state.rng[Stream::kData], split_at, n, cfg.batch_size);
    const Batch batch = make_batch(data, data.train, idx);

    std::vector<std::vector<ag::Var>> soft(model.num_tasks());
    std::vector<std::vector<ag::Var>> route(model.num_tasks());
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
      for (std::size_t l = 0; l < model.num_choices(); ++l) {
        const ag::Var& lg = model.choice(l).policy_logits[t];
        const Tensor g = gumbel_noise(lg.shape(), state.rng[Stream::kGumbel]);
        soft[t].push_back(soft_policy(lg, g, tau));
        route[t].push_back(cfg.straight_through ? ag::straight_through(soft[t].back()) : soft[t].back());
      }
    }
    const ag::Var inputs[] = {batch.x};
    const auto outputs = model.forward(inputs, route, ctx);
    const auto losses = task_losses(data.tasks, outputs, batch);
    const ag::Var reg = policy_regularization(soft);
    const ag::Var total = total_loss(losses, lambdas, reg, cfg.lambda_reg);
    const auto values = values_of(losses);
    Optimizer& opt = weight_phase ? wopt : popt;
    state.log.push_back({kStagePolicy, it, weight_phase ? "weights" : "policy", values, reg.value()[0], tau,
                         opt.current_lr()});
    if (guard.check(it, values, total.value()[0])) {
      zero_grads(weights);
      zero_grads(logits);
      total.backward();
      opt.step();
    }
    if ((it + 1) % cfg.val_every == 0) {
      std::vector<std::vector<ag::Var>> expected(model.num_tasks());
      for (std::size_t t = 0; t < model.num_tasks(); ++t) {
        for (std::size_t l = 0; l < model.num_choices(); ++l) {
          const ag::Var& lg = model.choice(l).policy_logits[t];
          expected[t].push_back(ag::Var::constant(soft_policy(lg, Tensor(lg.shape(), 0.0), tau).value()));
        }
      }
      const auto val = split_losses(data, data.val, 256, [&](const ag::Var& x) {
        const ag::Var in[] = {x};
        return model.forward(in, expected, {.training = false});
      });
      record_validation(state, kStagePolicy, it + 1, val, lambdas);
    }
    if ((it + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(state, kStagePolicy, it + 1, model_state(model), {&wopt, &popt});
    }
  }
  set_requires_grad(weights, true);
  set_requires_grad(logits, true);
  zero_grads(weights);
  zero_grads(logits);
  return {tau, cfg.policy_iters, policy_probabilities(model)};
}

MultiTaskModel post_train(const Supermodel& model, const DiscretePolicy& policy, const SyntheticTaskSet& data,
                          const TrainConfig& cfg, TrainState& state) {
  require_matching(model, data, cfg);
  const auto lambdas = cfg.task_lambdas(model.num_tasks());
  MultiTaskModel derived = derive_model(model, policy);
  if (cfg.post_mode == PostTrainMode::kRetrain) {
    Rng init(cfg.weight_seed ^ kRetrainSalt);
    derived.reinitialize(init);
  }
  std::vector<ag::Var> weights = derived.weights();
  Optimizer opt(weight_optimizer(cfg), weights);
  std::size_t start = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  json best_state;
  if (auto ckpt = take_resume(state, kStagePost)) {
    load_model_state(derived, ckpt->at("model"));
    start = restore(state, *ckpt, {&opt});
    const json& extra = ckpt->at("extra");
    if (extra.contains("best_state")) {
      best_loss = extra.at("best_loss");
      best_state = extra.at("best_state");
    }
  }
  const ForwardContext ctx{.training = true, .dropout_rng = &state.rng[Stream::kDropout]};
  DivergenceGuard guard(kStagePost);
  const std::size_t n = data.train.size();
  for (std::size_t it = start; it < cfg.post_iters; ++it) {
    const auto idx = draw_indices(state.rng[Stream::kData], 0, n, cfg.batch_size);
    const Batch batch = make_batch(data, data.train, idx);
    const ag::Var inputs[] = {batch.x};
    const auto outputs = derived.forward_multitask(inputs, ctx);
    const auto losses = task_losses(data.tasks, outputs, batch);
    const ag::Var total = total_loss(losses, lambdas, ag::Var(), 0.0);
    const auto values = values_of(losses);
    state.log.push_back({kStagePost, it, "", values, 0.0, 0.0, opt.current_lr()});
    if (guard.check(it, values, total.value()[0])) {
      zero_grads(weights);
      total.backward();
      opt.step();
    }
    if ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.post_iters) {
      const auto val = split_losses(data, data.val, 256, [&](const ag::Var& x) {
        const ag::Var in[] = {x};
        return derived.forward_multitask(in, {.training = false});
      });
      record_validation(state, kStagePost, it + 1, val, lambdas);
      if (state.validation.back().weighted < best_loss) {
        best_loss = state.validation.back().weighted;
        best_state = model_state(derived);
      }
    }
    if ((it + 1) % cfg.checkpoint_every == 0) {
      json extra = json::object();
      if (!best_state.is_null()) extra = {{"best_loss", best_loss}, {"best_state", best_state}};
      save_checkpoint(state, kStagePost, it + 1, model_state(derived), {&opt}, extra);
    }
  }
  if (!best_state.is_null()) load_model_state(derived, best_state);
  zero_grads(weights);
  return derived;
}

// --- evaluation ---

json to_json(const Evaluation& e) {
  json tasks = json::array();
  for (const TaskEval& t : e.tasks) {
    tasks.push_back({{"task", t.task}, {"loss", t.loss}, {"accuracy", t.accuracy}, {"mae", t.mae}});
  }
  return {{"tasks", tasks}, {"weighted_loss", e.weighted_loss}};
}

Evaluation evaluate(MultiTaskModel& model, const SyntheticTaskSet& data, const Split& split,
                    const std::vector<double>& lambdas, std::size_t batch_size) {
  const std::size_t n_tasks = data.tasks.size();
  Evaluation e;
  e.tasks.resize(n_tasks);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(split.size(), begin + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, split, idx);
    const ag::Var inputs[] = {batch.x};
    const auto outputs = model.forward_multitask(inputs, {.training = false});
    const auto losses = task_losses(data.tasks, outputs, batch);
    for (std::size_t t = 0; t < n_tasks; ++t) {
      const double b = static_cast<double>(idx.size());
      e.tasks[t].loss += losses[t].value()[0] * b;
      const Tensor& out = outputs[t].value();
      if (data.tasks[t].loss == LossKind::kCrossEntropy) {
        const std::size_t k = out.shape()[1];
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < k; ++c) {
            if (out[i * k + c] > out[i * k + best]) best = c;
          }
          e.tasks[t].accuracy += static_cast<double>(static_cast<int>(best) == batch.labels[t][i]);
        }
      } else {
        for (std::size_t i = 0; i < idx.size(); ++i) e.tasks[t].mae += std::abs(out[i] - batch.targets[t][i]);
      }
    }
  }
  const double n = static_cast<double>(split.size());
  for (std::size_t t = 0; t < n_tasks; ++t) {
    e.tasks[t].task = data.tasks[t].name;
    e.tasks[t].loss /= n;
    e.tasks[t].accuracy /= n;
    e.tasks[t].mae /= n;
    e.weighted_loss += lambdas[t] * e.tasks[t].loss;
  }
  return e;
}

// --- state serialization ---

json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from_json(const json& j) {
  if (j.is_null()) return Tensor();
  return Tensor(j.at("shape").get<Dims>(), j.at("data").get<std::vector<double>>());
}

namespace {

json state_of(const std::vector<ag::Var>& params, const std::vector<ag::BatchNormState*>& bn) {
  json p = json::array(), b = json::array();
  for (const ag::Var& v : params) p.push_back(tensor_to_json(v.value()));
  for (const ag::BatchNormState* s : bn) {
    b.push_back({{"mean_sum", tensor_to_json(s->mean_sum)}, {"var_sum", tensor_to_json(s->var_sum)},
                 {"weight", s->weight}});
  }
  return {{"params", p}, {"bn", b}};
}

void load_state(std::vector<ag::Var> params, const std::vector<ag::BatchNormState*>& bn, const json& j) {
  const json& p = j.at("params");
  const json& b = j.at("bn");
  if (p.size() != params.size() || b.size() != bn.size()) {
    throw InvalidConfig("saved state does not match the model structure");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = tensor_from_json(p[i]);
    if (t.shape() != params[i].value().shape()) throw InvalidConfig("saved parameter has the wrong shape");
    params[i].mutable_value() = std::move(t);
  }
  for (std::size_t i = 0; i < bn.size(); ++i) {
    bn[i]->mean_sum = tensor_from_json(b[i].at("mean_sum"));
    bn[i]->var_sum = tensor_from_json(b[i].at("var_sum"));
    bn[i]->weight = b[i].at("weight");
  }
}

}  // namespace

json model_state(Supermodel& model) {
  json j = state_of(model.weights(), model.bn_states());
  json logits = json::array();
  for (const ag::Var& l : model.logits()) logits.push_back(tensor_to_json(l.value()));
  j["logits"] = logits;
  return j;
}

void load_model_state(Supermodel& model, const json& j) {
  load_state(model.weights(), model.bn_states(), j);
  std::vector<ag::Var> logits = model.logits();
  const json& l = j.at("logits");
  if (l.size() != logits.size()) throw InvalidConfig("saved logits do not match the model");
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i].mutable_value() = tensor_from_json(l[i]);
}

json model_state(MultiTaskModel& model) { return state_of(model.weights(), model.bn_states()); }

void load_model_state(MultiTaskModel& model, const json& j) { load_state(model.weights(), model.bn_states(), j); }

json stream_state(const TrainState& state) { return rng_state(state); }

void load_stream_state(TrainState& state, const json& j) { load_rng_state(state, j); }

OperatorGraph load_backbone(const std::string& prototxt_path, const Shape3& input_shape) {
  return infer_shapes(build_graph(load_network(prototxt_path)), input_shape);
}

PipelineResult run_pipeline(const std::string& prototxt_path, const TrainConfig& cfg, TrainState& state) {
  validate(cfg);
  const SyntheticTaskSet data = make_synthetic_tasks(cfg.data, cfg.data_seed);
  Supermodel model = compile_supermodel(load_backbone(prototxt_path, data.input_shape()), data.tasks,
                                        {.weight_seed = cfg.weight_seed});
  if (cfg.pretrain) pretrain(model, data, cfg, state);
  PipelineResult r;
  r.policy_state = policy_train(model, data, cfg, state);
  r.policy = sample_policy(model, cfg.sample_seed);
  MultiTaskModel derived = post_train(model, r.policy, data, cfg, state);
  r.evaluation = evaluate(derived, data, data.val, cfg.task_lambdas(model.num_tasks()));
  r.params = derived.param_count();
  return r;
}

}  // namespace mtlc
