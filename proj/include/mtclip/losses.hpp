#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "mtclip/keyvalue.hpp"
#include "mtclip/models.hpp"
#include "mtclip/tensor.hpp"

namespace mtclip {

inline constexpr const char* kClipComponent = "clip";

struct LossWeights {
  double clip = 1.0;
  std::map<Task, double> task{
      {Task::kSegmentation, 0.1}, {Task::kDepth, 1.0}, {Task::kSurfaceNormal, 1.0}};

  // Throws ConfigError unless at least one weight is positive and none is negative.
  void validate() const;
  double weight(Task t) const;
  // Tasks with a strictly positive weight.
  std::vector<Task> active_tasks() const;
  KeyValues to_kv() const;
  static LossWeights from_kv(const KeyValues& kv);
};

struct LossReport {
  Tensor total;
  std::map<std::string, double> per_component;  // unweighted values
};

// A mean over a possibly empty set; `empty` flags the defined-as-zero case.
struct MaskedLoss {
  Tensor value;
  bool empty = false;
};

Tensor clip_contrastive_loss(const Tensor& image_embs, const Tensor& text_embs,
                             const Tensor& logit_scale);

MaskedLoss segmentation_ce(const Tensor& logits, std::span<const std::int32_t> mask,
                           std::int32_t ignore_id = -1);

// `valid` holds B*H*W flags; a valid pixel contributes all its channels.
MaskedLoss l1_dense(const Tensor& pred, const Tensor& target,
                    std::span<const std::uint8_t> valid);

// Same values and gradients as segmentation_ce / l1_dense applied to
// nearest_upsample(grid, H, W), where H x W is the label resolution. The
// segmentation form reduces each cell to a label histogram.
MaskedLoss segmentation_ce_upsampled(const Tensor& grid_logits, std::span<const std::int32_t> mask,
                                     std::size_t out_h, std::size_t out_w,
                                     std::int32_t ignore_id = -1);
MaskedLoss l1_dense_upsampled(const Tensor& grid_pred, const Tensor& target,
                              std::span<const std::uint8_t> valid);

// `components` maps "clip" and task names to unweighted scalar losses.
LossReport combined_loss(const std::map<std::string, Tensor>& components,
                         const LossWeights& weights);

MaskedLoss ssi_probe_loss(const Tensor& pred_disparity, const Tensor& gt_disparity,
                          std::span<const std::uint8_t> valid);

// Mean angle in radians between unit normal fields [B x 3 x H x W].
MaskedLoss angular_probe_loss(const Tensor& pred_normals, const Tensor& gt_normals,
                              std::span<const std::uint8_t> valid);

}  // namespace mtclip
