#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mtclip/tensor.hpp"

namespace mtclip {

// Dataset-level confusion counts; accumulators merge by addition, so the
// order in which batches or shards are added does not matter.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes, std::int32_t ignore_id = 255);

  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return n_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  std::uint64_t total() const;

  // Per-class IoU; NaN where the class is absent from both pred and gt.
  std::vector<double> per_class_iou() const;
  double mean_iou() const;

 private:
  std::size_t n_;
  std::int32_t ignore_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  std::vector<double> per_class;  // NaN for excluded classes
  double mean = 0.0;
};

MiouResult miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
                std::size_t num_classes, std::int32_t ignore_id = 255);

// Sum/count pair so partial results combine exactly.
struct MeanAccumulator {
  double sum = 0.0;
  std::uint64_t count = 0;

  void merge(const MeanAccumulator& o) {
    sum += o.sum;
    count += o.count;
  }
};

inline constexpr double kMinDisparity = 1e-4;

// Per-image least-squares scale and shift mapping pred onto gt over valid
// pixels; (0, mean gt) when the system is degenerate.
std::pair<double, double> ssi_align(std::span<const double> pred, std::span<const double> gt,
                                    std::span<const std::uint8_t> valid);

// Mean |pred - gt| / gt over valid pixels of depth maps already aligned.
MeanAccumulator depth_abs_rel_accumulate(std::span<const double> pred_depth,
                                         std::span<const double> gt_depth,
                                         std::span<const std::uint8_t> valid);
// Maps are `images` consecutive H*W blocks. Each image is SSI-aligned before
// conversion to depth = 1 / max(disparity, 1e-4).
MeanAccumulator abs_rel_accumulate(std::span<const double> pred, std::span<const double> gt,
                                   std::span<const std::uint8_t> valid, std::size_t images);
double abs_rel(std::span<const double> pred, std::span<const double> gt,
               std::span<const std::uint8_t> valid, std::size_t images);

// Normal maps are `images` blocks of 3 x H*W channel-major values.
MeanAccumulator angular_accuracy_accumulate(std::span<const double> pred,
                                            std::span<const double> gt,
                                            std::span<const std::uint8_t> valid,
                                            std::size_t images, double threshold_deg = 30.0);
double angular_accuracy(std::span<const double> pred, std::span<const double> gt,
                        std::span<const std::uint8_t> valid, std::size_t images,
                        double threshold_deg = 30.0);

// Row-wise argmax with ties going to the lowest class index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);
double top1(const Tensor& logits, std::span<const std::int32_t> labels);

struct RecallResult {
  double text_retrieval = 0.0;   // image queries ranking texts
  double image_retrieval = 0.0;  // text queries ranking images
};

// Row i of each matrix is a matched pair. A query's match is ranked after
// every strictly more similar candidate and after equally similar
// candidates with a lower index.
RecallResult recall_at_k(const Tensor& image_embs, const Tensor& text_embs, std::size_t k);

struct MetricReport {
  std::string task;
  std::string metric;
  double value = 0.0;
  std::vector<double> per_class;  // empty unless per-class values apply
  std::uint64_t sample_count = 0;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& line);
};

}  // namespace mtclip
