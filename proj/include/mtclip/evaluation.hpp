#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mtclip/metrics.hpp"
#include "mtclip/models.hpp"
#include "mtclip/synthdata.hpp"
#include "mtclip/trainer.hpp"

namespace mtclip {

inline constexpr const char* kZeroShotTemplate = "a photo of a {}";

// Replaces every "{}" in the template with the class name.
std::string fill_template(const std::string& tmpl, const std::string& name);

// Unit-norm text embeddings [C x shared_dim] for the filled templates.
// Words outside the vocabulary become UNK; `unk_count` receives how many.
Tensor class_text_embeddings(const ModelBundle& model, std::span<const std::string> class_names,
                             const std::string& tmpl, const Vocab& vocab,
                             std::size_t* unk_count = nullptr);

// Cosine similarity of every image embedding against every class embedding.
Tensor similarity_scores(const Tensor& image_embs, const Tensor& class_embs);

struct ZeroShotResult {
  std::vector<std::size_t> predictions;
  double top1 = 0.0;
  std::size_t evaluated = 0;  // images with a label >= 0
  std::size_t unk_tokens = 0;
};

// Labels < 0 are predicted but left out of the accuracy.
ZeroShotResult zero_shot_classify(const ModelBundle& model,
                                  std::span<const std::string> class_names,
                                  const std::string& tmpl, const Tensor& images,
                                  std::span<const std::int32_t> labels, const Vocab& vocab);

// Shape names as classes, each scene labeled with its dominant shape.
ZeroShotResult zero_shot_eval(const ModelBundle& model, const ShardData& data,
                              const Vocab& vocab,
                              const std::string& tmpl = kZeroShotTemplate);

// Image and caption embeddings for every sample with a non-empty caption.
struct PairEmbeddings {
  Tensor images;
  Tensor texts;
};
PairEmbeddings embed_pairs(const ModelBundle& model, const ShardData& data, const Vocab& vocab);

RecallResult retrieval_eval(const ModelBundle& model, const ShardData& data, const Vocab& vocab,
                            std::size_t k);

std::vector<std::string> seg_class_names(std::size_t num_classes);

struct DeltaRow {
  std::size_t class_id = 0;
  std::string name;
  double iou_a = 0.0;
  double iou_b = 0.0;
  double delta = 0.0;  // b - a; NaN when either side is undefined
  std::uint64_t frequency = 0;
};

// Per-class IoU differences b - a alongside pseudo-label pixel counts.
std::vector<DeltaRow> classwise_delta_report(const MetricReport& a, const MetricReport& b,
                                             std::span<const std::uint64_t> class_pixels);
std::string delta_report_csv(const std::vector<DeltaRow>& rows);

// Per-class pixel counts read back from a shard manifest.
std::vector<std::uint64_t> manifest_class_pixels(const std::filesystem::path& manifest);

// One pretrain run followed by frozen probes and zero-shot checks.
struct ExperimentConfig {
  GenConfig gen;
  OracleConfig oracle;
  ModelConfig model;
  TrainConfig pretrain = TrainConfig::desk_pretrain();
  std::size_t pretrain_scenes = 5000;
  std::size_t probe_train_scenes = 1000;
  std::size_t probe_eval_scenes = 500;
  std::vector<ProbeTask> probes = {ProbeTask::kSegmentation, ProbeTask::kDepth,
                                   ProbeTask::kSurfaceNormal, ProbeTask::kClassification};
  ProbeHead probe_head = ProbeHead::kLinear;

  void validate() const;
  KeyValues to_kv() const;
  static ExperimentConfig from_kv(const KeyValues& kv);
  // Also covers the probe presets, so changing them invalidates caches.
  std::uint64_t digest() const;
};

struct ExperimentResult {
  std::uint64_t seed = 0;
  std::uint64_t digest = 0;
  std::size_t steps = 0;
  std::vector<double> epoch_totals;
  std::vector<MetricReport> probes;
  double zero_shot_top1 = 0.0;
  RecallResult recall1;
  RecallResult recall5;

  // Probe value for a task name, or NaN when it was not run.
  double probe_value(const std::string& task) const;
  std::string to_json() const;
  static ExperimentResult from_json(const std::string& text);
};

struct ExperimentData {
  ShardData pretrain;
  ShardData probe_train;
  ShardData probe_eval;
};
ExperimentData experiment_data(const ExperimentConfig& config, std::uint64_t seed);

// Results are cached as JSON under `cache_dir` keyed by config digest and
// seed; an empty path disables caching.
ExperimentResult run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::filesystem::path& cache_dir,
                                std::ostream* log = nullptr);

struct AblationRow {
  std::string label;
  std::vector<Task> experts;
  std::size_t head_layers = 1;
};
// The eight expert subsets followed by the head-depth variants.
std::vector<AblationRow> expert_grid();
std::vector<AblationRow> head_depth_grid();
std::string experts_label(std::span<const Task> experts);

}  // namespace mtclip
