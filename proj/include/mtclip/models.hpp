#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtclip/keyvalue.hpp"
#include "mtclip/tensor.hpp"

namespace mtclip {

enum class EncoderKind { kVitTiny, kCnnTiny };
enum class Task { kSegmentation, kDepth, kSurfaceNormal };

const char* to_string(EncoderKind kind);
const char* to_string(Task task);
EncoderKind parse_encoder_kind(const std::string& name);
Task parse_task(const std::string& name);
const std::vector<Task>& all_tasks();

struct ModelConfig {
  EncoderKind encoder_kind = EncoderKind::kVitTiny;
  std::size_t image_size = 64;
  std::size_t patch_size = 8;  // vit only
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t text_vocab_size = 32;
  std::size_t text_context_length = 16;
  std::size_t shared_dim = 32;
  std::vector<std::size_t> psp_bin_sizes{1, 2, 4};
  std::size_t head_layers = 1;
  std::vector<Task> tasks;
  std::size_t num_seg_classes = 9;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  bool has_task(Task task) const;
  // Side length of the encoder's spatial feature grid.
  std::size_t feature_grid() const;
  std::size_t task_channels(Task task) const;

  KeyValues to_kv() const;
  static ModelConfig from_kv(const KeyValues& kv);
  // Hash of the canonical key=value form; identifies checkpoint layouts.
  std::uint64_t digest() const;
};

// Named parameter arrays, iterated in name order.
using ParamMap = std::map<std::string, Tensor>;

class ModelBundle {
 public:
  explicit ModelBundle(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }
  void add_param(const std::string& name, Tensor value);

  // Names of the encoder-side parameters (image, text, logit scale).
  std::vector<std::string> encoder_param_names() const;
  std::size_t param_count(const std::string& prefix) const;

  const Tensor& logit_scale() const { return param("logit_scale"); }
  void clamp_logit_scale();

  // Drops the multi-scale module and all task heads; the embedding path is
  // untouched. The config's task list is cleared to match.
  void discard_heads();

  void set_requires_grad(bool flag);
  void zero_grad();

 private:
  ModelConfig config_;
  ParamMap params_;
};

inline constexpr double kLogitScaleMin = 0.0;           // ln(1)
inline constexpr double kLogitScaleMax = 4.605170185988092;  // ln(100)

ModelBundle build_model(const ModelConfig& config, std::uint64_t seed);

struct ImageEncoding {
  Tensor embedding;  // [B x shared_dim], unit rows
  Tensor features;   // [B x embed_dim x g x g]
};

ImageEncoding encode_image(const ModelBundle& model, const Tensor& images);

// Token ids are row-major [B x text_context_length].
Tensor encode_text(const ModelBundle& model, std::span<const std::int64_t> tokens,
                   std::size_t batch);

Tensor psp_forward(const ModelBundle& model, const Tensor& features);
Tensor task_head_forward(const ModelBundle& model, Task task, const Tensor& fused,
                         std::size_t out_h, std::size_t out_w);
// Head output at the feature grid, before nearest upsampling.
Tensor task_head_grid(const ModelBundle& model, Task task, const Tensor& fused);

// Building blocks shared with the probe heads. Parameters live under
// `prefix` in `params`.
void init_psp_params(ParamMap& params, const std::string& prefix, std::size_t channels,
                     std::size_t num_bins, std::uint64_t seed);
Tensor psp_apply(const ParamMap& params, const std::string& prefix,
                 const std::vector<std::size_t>& bins, const Tensor& features);
void init_conv_head_params(ParamMap& params, const std::string& prefix, std::size_t in_ch,
                           std::size_t out_ch, std::size_t layers, std::uint64_t seed);
Tensor conv_head_apply(const ParamMap& params, const std::string& prefix,
                       std::size_t layers, const Tensor& x);

// Truncated-normal(0.02) tensor seeded by (seed, name).
Tensor init_weight(const Shape& shape, std::uint64_t seed, const std::string& name);

}  // namespace mtclip
