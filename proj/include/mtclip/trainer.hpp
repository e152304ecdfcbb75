#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mtclip/keyvalue.hpp"
#include "mtclip/losses.hpp"
#include "mtclip/metrics.hpp"
#include "mtclip/models.hpp"
#include "mtclip/synthdata.hpp"

namespace mtclip {

enum class ScheduleKind { kCosineWarmup, kMultiStep };
enum class Phase { kPretrain, kProbe };
enum class ProbeTask { kSegmentation, kDepth, kSurfaceNormal, kClassification };
enum class ProbeHead { kLinear, kPsp };

const char* to_string(ScheduleKind kind);
const char* to_string(Phase phase);
const char* to_string(ProbeTask task);
const char* to_string(ProbeHead head);
ProbeTask parse_probe_task(const std::string& name);
ProbeHead parse_probe_head(const std::string& name);

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::kCosineWarmup;
  std::size_t warmup_steps = 1000;
  double warmup_init_lr = 1e-6;
  double max_lr = 3e-5;
  double min_lr = 1e-6;
  std::vector<std::size_t> milestones;  // epochs, multi_step only
  double gamma = 0.1;

  void validate() const;
};

// Linear warmup to max_lr, then cosine decay to min_lr at total_steps, or
// max_lr * gamma^(milestones passed) for multi_step. Milestones count epochs
// of `steps_per_epoch` steps.
double lr_at_step(const ScheduleConfig& schedule, std::size_t step, std::size_t total_steps,
                  std::size_t steps_per_epoch = 1);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

// Decoupled weight decay on tensors with two or more dimensions. Parameters
// that received no gradient in a step are left untouched.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig config = {}) : config_(config) {}

  void step(ParamMap& params, double lr);

 private:
  struct Slot {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };
  OptimizerConfig config_;
  std::map<std::string, Slot> slots_;
};

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  LossWeights weights;
  std::vector<Task> enabled_experts{Task::kSegmentation, Task::kDepth, Task::kSurfaceNormal};
  ProbeTask probe_task = ProbeTask::kSegmentation;
  ProbeHead probe_head = ProbeHead::kLinear;
  std::uint64_t seed = 0;

  void validate() const;
  // Task weight with experts outside enabled_experts forced to zero.
  LossWeights effective_weights() const;
  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv);

  // Training hyper-parameters as published for the full-scale runs.
  static TrainConfig paper_pretrain();
  // Defaults for from-scratch training on the synthetic scenes.
  static TrainConfig desk_pretrain();
  static TrainConfig paper_probe(ProbeTask task);
  static TrainConfig desk_probe(ProbeTask task);
};

// Mean/std normalization applied to u8 RGB before the encoder.
Tensor images_to_tensor(const ShardData& data, std::span<const std::size_t> indices);

struct Batch {
  std::size_t size = 0;
  std::size_t image_size = 0;
  Tensor images;                      // [B x 3 x S x S]
  std::vector<std::int64_t> tokens;   // [B x ctx]
  std::vector<std::int32_t> seg;      // B*S*S
  Tensor disparity;                   // [B x 1 x S x S]
  Tensor normals;                     // [B x 3 x S x S]
  std::vector<std::uint8_t> valid;    // B*S*S
};

// Builds a batch with captions and pseudo-labels for `tasks`.
Batch make_batch(const ShardData& data, std::span<const std::size_t> indices,
                 const Vocab& vocab, std::size_t context_length, std::span<const Task> tasks);

// One AdamW step on the combined loss. Task heads with zero weight are not
// evaluated.
LossReport pretrain_step(ModelBundle& model, AdamW& optimizer, const Batch& batch,
                         const LossWeights& weights, double lr);

// Seed-determined permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  std::map<std::string, double> components;
};

struct PretrainResult {
  ModelBundle model;
  std::size_t steps = 0;
  std::vector<double> step_totals;
  std::vector<std::map<std::string, double>> step_components;
  std::vector<EpochRecord> epochs;
};

struct RunOptions {
  std::ostream* log = nullptr;  // line-delimited JSON records
  std::size_t max_steps = 0;    // 0 runs the full schedule
  bool log_steps = false;
};

// The model's task list is replaced by config.enabled_experts.
PretrainResult run_pretraining(const TrainConfig& config, ModelConfig model_config,
                               const ShardData& data, const Vocab& vocab,
                               const RunOptions& options = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::uint64_t digest = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path,
                     std::uint64_t step = 0, std::uint64_t seed = 0);
std::string encode_checkpoint(const ModelBundle& model, std::uint64_t step, std::uint64_t seed);
// Rejects a file whose digest differs from `expected` when given.
ModelBundle load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected = std::nullopt,
                            CheckpointInfo* info = nullptr);
ModelBundle decode_checkpoint(std::string_view bytes,
                              const std::optional<ModelConfig>& expected = std::nullopt,
                              CheckpointInfo* info = nullptr);

// Label of a scene for classification: shape of the object owning the most
// pixels; -1 for background-only scenes.
std::int32_t dominant_shape(const Sample& sample);

struct ProbeResult {
  MetricReport report;
  ParamMap head;
  std::size_t head_param_count = 0;
  bool encoder_unchanged = false;
  double encoder_grad_norm = 0.0;
  std::vector<double> epoch_losses;
};

// Trains a fresh head on frozen encoder features of `train` and evaluates on
// `eval` against exact ground truth.
ProbeResult run_probe(const TrainConfig& config, const ModelBundle& frozen,
                      const ShardData& train, const ShardData& eval,
                      const RunOptions& options = {});

}  // namespace mtclip
