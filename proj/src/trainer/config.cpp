#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtclip/error.hpp"
#include "mtclip/trainer.hpp"

namespace mtclip {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& name, const std::array<E, N>& values, const char* field) {
  for (E v : values)
    if (name == to_string(v)) return v;
  throw ConfigError(std::string("field '") + field + "': unknown value '" + name + "'");
}

constexpr std::array<ScheduleKind, 2> kScheduleKinds{ScheduleKind::kCosineWarmup,
                                                     ScheduleKind::kMultiStep};
constexpr std::array<Phase, 2> kPhases{Phase::kPretrain, Phase::kProbe};
constexpr std::array<ProbeTask, 4> kProbeTasks{ProbeTask::kSegmentation, ProbeTask::kDepth,
                                               ProbeTask::kSurfaceNormal,
                                               ProbeTask::kClassification};
constexpr std::array<ProbeHead, 2> kProbeHeads{ProbeHead::kLinear, ProbeHead::kPsp};

std::string task_list(const std::vector<Task>& tasks) {
  std::string s = "[";
  for (std::size_t i = 0; i < tasks.size(); ++i) s += (i ? "," : "") + std::string(to_string(tasks[i]));
  return s + "]";
}

}  // namespace

const char* to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kCosineWarmup ? "cosine_warmup" : "multi_step";
}

const char* to_string(Phase phase) { return phase == Phase::kPretrain ? "pretrain" : "probe"; }

const char* to_string(ProbeTask task) {
  switch (task) {
    case ProbeTask::kSegmentation: return "segmentation";
    case ProbeTask::kDepth: return "depth";
    case ProbeTask::kSurfaceNormal: return "surface_normal";
    case ProbeTask::kClassification: return "classification";
  }
  return "?";
}

const char* to_string(ProbeHead head) { return head == ProbeHead::kLinear ? "linear" : "psp"; }

ProbeTask parse_probe_task(const std::string& name) {
  return parse_enum(name, kProbeTasks, "probe.task");
}

ProbeHead parse_probe_head(const std::string& name) {
  return parse_enum(name, kProbeHeads, "probe.head");
}

void ScheduleConfig::validate() const {
  auto fail = [](const char* field, const std::string& why) {
    throw ConfigError(std::string("field 'schedule.") + field + "': " + why);
  };
  if (!(warmup_init_lr >= 0.0)) fail("warmup_init_lr", "must be >= 0");
  if (!(max_lr > 0.0)) fail("max_lr", "must be > 0");
  if (!(min_lr >= 0.0)) fail("min_lr", "must be >= 0");
  if (warmup_init_lr > max_lr) fail("warmup_init_lr", "must not exceed max_lr");
  if (min_lr > max_lr) fail("min_lr", "must not exceed max_lr");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1]) fail("milestones", "must be strictly increasing");
  if (!(gamma > 0.0)) fail("gamma", "must be > 0");
}

double lr_at_step(const ScheduleConfig& s, std::size_t step, std::size_t total_steps,
                  std::size_t steps_per_epoch) {
  if (step > total_steps)
    throw ArgumentError("lr_at_step: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  if (steps_per_epoch == 0) throw ArgumentError("lr_at_step: steps_per_epoch must be positive");
  if (step < s.warmup_steps) {
    const double f = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    return s.warmup_init_lr + (s.max_lr - s.warmup_init_lr) * f;
  }
  if (s.kind == ScheduleKind::kMultiStep) {
    const std::size_t epoch = step / steps_per_epoch;
    double lr = s.max_lr;
    for (std::size_t m : s.milestones)
      if (epoch >= m) lr *= s.gamma;
    return lr;
  }
  if (total_steps <= s.warmup_steps) return s.max_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void OptimizerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("field 'optimizer.beta1': must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("field 'optimizer.beta2': must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("field 'optimizer.eps': must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("field 'optimizer.weight_decay': must be >= 0");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("field 'epochs': must be positive");
  if (batch_size == 0) throw ConfigError("field 'batch_size': must be positive");
  schedule.validate();
  optimizer.validate();
  weights.validate();
  for (std::size_t i = 0; i < enabled_experts.size(); ++i)
    for (std::size_t j = i + 1; j < enabled_experts.size(); ++j)
      if (enabled_experts[i] == enabled_experts[j])
        throw ConfigError("field 'enabled_experts': duplicate task");
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  for (Task t : all_tasks())
    if (std::find(enabled_experts.begin(), enabled_experts.end(), t) == enabled_experts.end())
      w.task[t] = 0.0;
  return w;
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv = weights.to_kv();
  kv.set("phase", to_string(phase));
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("schedule.kind", to_string(schedule.kind));
  kv.set("schedule.warmup_steps", std::to_string(schedule.warmup_steps));
  kv.set("schedule.warmup_init_lr", format_double(schedule.warmup_init_lr));
  kv.set("schedule.max_lr", format_double(schedule.max_lr));
  kv.set("schedule.min_lr", format_double(schedule.min_lr));
  kv.set("schedule.milestones", join_sizes(schedule.milestones));
  kv.set("schedule.gamma", format_double(schedule.gamma));
  kv.set("optimizer.kind", "adamw");
  kv.set("optimizer.beta1", format_double(optimizer.beta1));
  kv.set("optimizer.beta2", format_double(optimizer.beta2));
  kv.set("optimizer.eps", format_double(optimizer.eps));
  kv.set("optimizer.weight_decay", format_double(optimizer.weight_decay));
  kv.set("enabled_experts", task_list(enabled_experts));
  kv.set("probe.task", to_string(probe_task));
  kv.set("probe.head", to_string(probe_head));
  kv.set("seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  // Unset fields fall back to the desk preset for the phase (and probe task).
  const Phase phase = parse_enum(kv.get_string("phase", "pretrain"), kPhases, "phase");
  TrainConfig c = phase == Phase::kPretrain
                      ? desk_pretrain()
                      : desk_probe(parse_probe_task(kv.get_string("probe.task", "segmentation")));
  c.epochs = kv.get_uint("epochs", c.epochs);
  c.batch_size = kv.get_uint("batch_size", c.batch_size);
  c.schedule.kind =
      parse_enum(kv.get_string("schedule.kind", to_string(c.schedule.kind)), kScheduleKinds,
                 "schedule.kind");
  c.schedule.warmup_steps = kv.get_uint("schedule.warmup_steps", c.schedule.warmup_steps);
  c.schedule.warmup_init_lr = kv.get_double("schedule.warmup_init_lr", c.schedule.warmup_init_lr);
  c.schedule.max_lr = kv.get_double("schedule.max_lr", c.schedule.max_lr);
  c.schedule.min_lr = kv.get_double("schedule.min_lr", c.schedule.min_lr);
  c.schedule.milestones = kv.get_size_list("schedule.milestones", c.schedule.milestones);
  c.schedule.gamma = kv.get_double("schedule.gamma", c.schedule.gamma);
  if (kv.get_string("optimizer.kind", "adamw") != "adamw")
    throw ConfigError("field 'optimizer.kind': only 'adamw' is supported");
  c.optimizer.beta1 = kv.get_double("optimizer.beta1", c.optimizer.beta1);
  c.optimizer.beta2 = kv.get_double("optimizer.beta2", c.optimizer.beta2);
  c.optimizer.eps = kv.get_double("optimizer.eps", c.optimizer.eps);
  c.optimizer.weight_decay = kv.get_double("optimizer.weight_decay", c.optimizer.weight_decay);
  c.weights = LossWeights::from_kv(kv);
  if (kv.has("enabled_experts")) {
    c.enabled_experts.clear();
    for (const auto& name : kv.get_string_list("enabled_experts", {}))
      c.enabled_experts.push_back(parse_task(name));
  }
  c.probe_task = parse_enum(kv.get_string("probe.task", to_string(c.probe_task)), kProbeTasks,
                            "probe.task");
  c.probe_head = parse_enum(kv.get_string("probe.head", to_string(c.probe_head)), kProbeHeads,
                            "probe.head");
  c.seed = kv.get_uint("seed", c.seed);
  c.validate();
  return c;
}

TrainConfig TrainConfig::paper_pretrain() {
  TrainConfig c;
  c.epochs = 30;
  c.batch_size = 32;
  c.schedule = {ScheduleKind::kCosineWarmup, 1000, 1e-6, 3e-5, 1e-6, {}, 0.1};
  return c;
}

TrainConfig TrainConfig::desk_pretrain() {
  TrainConfig c = paper_pretrain();
  c.schedule.warmup_steps = 500;
  c.schedule.max_lr = 1e-3;
  c.schedule.min_lr = 1e-5;
  return c;
}

TrainConfig TrainConfig::paper_probe(ProbeTask task) {
  TrainConfig c;
  c.phase = Phase::kProbe;
  c.probe_task = task;
  c.weights = LossWeights{};
  switch (task) {
    case ProbeTask::kSegmentation:
      c.epochs = 50;
      c.batch_size = 32;
      c.schedule = {ScheduleKind::kCosineWarmup, 500, 1e-6, 3e-5, 3e-6, {}, 0.1};
      break;
    case ProbeTask::kDepth:
      c.epochs = 50;
      c.batch_size = 16;
      c.schedule = {ScheduleKind::kCosineWarmup, 1000, 1e-6, 1e-4, 1e-6, {}, 0.1};
      break;
    case ProbeTask::kSurfaceNormal:
      c.epochs = 50;
      c.batch_size = 16;
      c.schedule = {ScheduleKind::kCosineWarmup, 1000, 1e-6, 1e-5, 1e-6, {}, 0.1};
      break;
    case ProbeTask::kClassification:
      c.epochs = 40;
      c.batch_size = 128;
      c.schedule = {ScheduleKind::kCosineWarmup, 1000, 1e-6, 3e-5, 1e-6, {}, 0.1};
      break;
  }
  return c;
}

TrainConfig TrainConfig::desk_probe(ProbeTask task) {
  TrainConfig c = paper_probe(task);
  c.schedule.warmup_steps = 50;
  c.schedule.max_lr = 1e-2;
  c.schedule.min_lr = 1e-4;
  return c;
}

}  // namespace mtclip
