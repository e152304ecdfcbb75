#include <algorithm>
#include <cmath>

#include "mtclip/error.hpp"
#include "mtclip/models.hpp"
#include "mtclip/ops.hpp"
#include "mtclip/rng.hpp"

namespace mtclip {

namespace {

using namespace ops;

const char* kSegName = "segmentation";
const char* kDepthName = "depth";
const char* kNormalName = "surface_normal";

Tensor p(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("missing parameter '" + name + "'");
  return it->second;
}

void add_linear(ParamMap& params, const std::string& name, std::size_t in, std::size_t out,
                std::uint64_t seed, bool bias = true) {
  params[name + ".w"] = init_weight({in, out}, seed, name + ".w");
  if (bias) params[name + ".b"] = Tensor::zeros({out}, true);
}

void add_layer_norm(ParamMap& params, const std::string& name, std::size_t d) {
  params[name + ".g"] = Tensor::full({d}, 1.0, true);
  params[name + ".b"] = Tensor::zeros({d}, true);
}

void add_conv(ParamMap& params, const std::string& name, std::size_t in, std::size_t out,
              std::size_t k, std::uint64_t seed) {
  params[name + ".w"] = init_weight({out, in, k, k}, seed, name + ".w");
  params[name + ".b"] = Tensor::zeros({out}, true);
}

void add_transformer_block(ParamMap& params, const std::string& name, std::size_t d,
                           std::size_t mlp_ratio, std::uint64_t seed) {
  add_layer_norm(params, name + ".ln1", d);
  add_linear(params, name + ".attn.qkv", d, 3 * d, seed);
  add_linear(params, name + ".attn.proj", d, d, seed);
  add_layer_norm(params, name + ".ln2", d);
  add_linear(params, name + ".mlp.fc1", d, mlp_ratio * d, seed);
  add_linear(params, name + ".mlp.fc2", mlp_ratio * d, d, seed);
}

Tensor lin(const ParamMap& params, const std::string& name, const Tensor& x) {
  auto b = params.find(name + ".b");
  return linear(x, p(params, name + ".w"), b == params.end() ? Tensor() : b->second);
}

Tensor ln(const ParamMap& params, const std::string& name, const Tensor& x) {
  return layer_norm(x, p(params, name + ".g"), p(params, name + ".b"));
}

// Layer norm over the channel axis of an NCHW map.
Tensor channel_ln(const ParamMap& params, const std::string& name, const Tensor& x) {
  Tensor t = permute(x, {0, 2, 3, 1});
  t = ln(params, name, t);
  return permute(t, {0, 3, 1, 2});
}

Tensor conv(const ParamMap& params, const std::string& name, const Tensor& x,
            std::size_t stride) {
  const Tensor& w = p(params, name + ".w");
  const std::size_t k = w.shape()[2];
  return conv2d(x, w, p(params, name + ".b"), stride, (k - 1) / 2);
}

// Pre-norm transformer block over [B x T x D].
Tensor transformer_block(const ParamMap& params, const std::string& name, const Tensor& x,
                         std::size_t heads, bool causal) {
  const std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  const std::size_t dh = d / heads;
  Tensor h = ln(params, name + ".ln1", x);
  Tensor qkv = lin(params, name + ".attn.qkv", h);
  qkv = permute(reshape(qkv, {b, t, 3, heads, dh}), {2, 0, 3, 1, 4});
  auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, 1), {b, heads, t, dh}); };
  Tensor att = scaled_dot_product_attention(part(0), part(1), part(2), causal);
  att = reshape(permute(att, {0, 2, 1, 3}), {b, t, d});
  Tensor y = add(x, lin(params, name + ".attn.proj", att));
  h = ln(params, name + ".ln2", y);
  h = lin(params, name + ".mlp.fc2", gelu(lin(params, name + ".mlp.fc1", h)));
  return add(y, h);
}

std::size_t branch_channels(std::size_t channels, std::size_t bins) { return channels / bins; }

}  // namespace

const char* to_string(EncoderKind kind) {
  return kind == EncoderKind::kVitTiny ? "vit_tiny" : "cnn_tiny";
}

const char* to_string(Task task) {
  switch (task) {
    case Task::kSegmentation: return kSegName;
    case Task::kDepth: return kDepthName;
    case Task::kSurfaceNormal: return kNormalName;
  }
  return "?";
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "vit_tiny") return EncoderKind::kVitTiny;
  if (name == "cnn_tiny") return EncoderKind::kCnnTiny;
  throw ConfigError("field 'encoder_kind': unknown encoder '" + name + "'");
}

Task parse_task(const std::string& name) {
  if (name == kSegName) return Task::kSegmentation;
  if (name == kDepthName) return Task::kDepth;
  if (name == kNormalName) return Task::kSurfaceNormal;
  throw ConfigError("unknown task '" + name + "'");
}

const std::vector<Task>& all_tasks() {
  static const std::vector<Task> tasks{Task::kSegmentation, Task::kDepth, Task::kSurfaceNormal};
  return tasks;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("field '" + field + "': " + why);
  };
  if (image_size == 0) fail("image_size", "must be positive");
  if (embed_dim == 0) fail("embed_dim", "must be positive");
  if (shared_dim == 0) fail("shared_dim", "must be positive");
  if (text_vocab_size < 4) fail("text_vocab_size", "must hold the special tokens");
  if (text_context_length < 2) fail("text_context_length", "must be at least 2");
  if (encoder_kind == EncoderKind::kVitTiny) {
    if (patch_size == 0 || image_size % patch_size != 0)
      fail("patch_size", "image_size must be divisible by patch_size");
    if (num_heads == 0 || embed_dim % num_heads != 0)
      fail("num_heads", "must divide embed_dim");
  } else {
    if (image_size % 8 != 0) fail("image_size", "cnn_tiny needs a multiple of 8");
    if (embed_dim % 4 != 0) fail("embed_dim", "cnn_tiny needs a multiple of 4");
  }
  if (num_heads == 0 || embed_dim % num_heads != 0) fail("num_heads", "must divide embed_dim");
  if (mlp_ratio == 0) fail("mlp_ratio", "must be positive");
  if (head_layers != 1 && head_layers != 3) fail("head_layers", "must be 1 or 3");
  if (psp_bin_sizes.empty()) fail("psp_bin_sizes", "must not be empty");
  if (embed_dim / psp_bin_sizes.size() == 0) fail("psp_bin_sizes", "too many bins for embed_dim");
  for (auto b : psp_bin_sizes) {
    if (b == 0 || b > feature_grid()) fail("psp_bin_sizes", "bins must lie in [1, feature grid]");
  }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i + 1; j < tasks.size(); ++j)
      if (tasks[i] == tasks[j]) fail("tasks", "duplicate task");
  if (has_task(Task::kSegmentation) && num_seg_classes < 2) fail("num_seg_classes", "need >= 2");
}

bool ModelConfig::has_task(Task task) const {
  return std::find(tasks.begin(), tasks.end(), task) != tasks.end();
}

std::size_t ModelConfig::feature_grid() const {
  if (encoder_kind == EncoderKind::kVitTiny) return patch_size ? image_size / patch_size : 0;
  return image_size / 8;
}

std::size_t ModelConfig::task_channels(Task task) const {
  switch (task) {
    case Task::kSegmentation: return num_seg_classes;
    case Task::kDepth: return 1;
    case Task::kSurfaceNormal: return 3;
  }
  return 0;
}

KeyValues ModelConfig::to_kv() const {
  KeyValues kv;
  kv.set("encoder_kind", to_string(encoder_kind));
  kv.set("image_size", std::to_string(image_size));
  kv.set("patch_size", std::to_string(patch_size));
  kv.set("embed_dim", std::to_string(embed_dim));
  kv.set("depth", std::to_string(depth));
  kv.set("num_heads", std::to_string(num_heads));
  kv.set("mlp_ratio", std::to_string(mlp_ratio));
  kv.set("text_vocab_size", std::to_string(text_vocab_size));
  kv.set("text_context_length", std::to_string(text_context_length));
  kv.set("shared_dim", std::to_string(shared_dim));
  kv.set("psp_bin_sizes", join_sizes(psp_bin_sizes));
  kv.set("head_layers", std::to_string(head_layers));
  std::string t = "[";
  for (std::size_t i = 0; i < tasks.size(); ++i) t += (i ? "," : "") + std::string(to_string(tasks[i]));
  kv.set("tasks", t + "]");
  kv.set("num_seg_classes", std::to_string(num_seg_classes));
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
  ModelConfig c;
  c.encoder_kind = parse_encoder_kind(kv.get_string("encoder_kind", to_string(c.encoder_kind)));
  c.image_size = kv.get_uint("image_size", c.image_size);
  c.patch_size = kv.get_uint("patch_size", c.patch_size);
  c.embed_dim = kv.get_uint("embed_dim", c.embed_dim);
  c.depth = kv.get_uint("depth", c.depth);
  c.num_heads = kv.get_uint("num_heads", c.num_heads);
  c.mlp_ratio = kv.get_uint("mlp_ratio", c.mlp_ratio);
  c.text_vocab_size = kv.get_uint("text_vocab_size", c.text_vocab_size);
  c.text_context_length = kv.get_uint("text_context_length", c.text_context_length);
  c.shared_dim = kv.get_uint("shared_dim", c.shared_dim);
  c.psp_bin_sizes = kv.get_size_list("psp_bin_sizes", c.psp_bin_sizes);
  c.head_layers = kv.get_uint("head_layers", c.head_layers);
  c.tasks.clear();
  for (const auto& name : kv.get_string_list("tasks", {})) c.tasks.push_back(parse_task(name));
  c.num_seg_classes = kv.get_uint("num_seg_classes", c.num_seg_classes);
  return c;
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(to_kv().to_string()); }

const Tensor& ModelBundle::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("model has no parameter '" + name + "'");
  return it->second;
}

void ModelBundle::add_param(const std::string& name, Tensor value) {
  if (!params_.emplace(name, std::move(value)).second) {
    throw UsageError("duplicate parameter name '" + name + "'");
  }
}

std::vector<std::string> ModelBundle::encoder_param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_) {
    if (name.rfind("image.", 0) == 0 || name.rfind("text.", 0) == 0 || name == "logit_scale") {
      out.push_back(name);
    }
  }
  return out;
}

std::size_t ModelBundle::param_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_)
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  return n;
}

void ModelBundle::clamp_logit_scale() {
  auto it = params_.find("logit_scale");
  if (it == params_.end()) return;
  auto v = it->second.mutable_data();
  v[0] = std::clamp(v[0], kLogitScaleMin, kLogitScaleMax);
}

void ModelBundle::discard_heads() {
  for (auto it = params_.begin(); it != params_.end();) {
    if (it->first.rfind("psp.", 0) == 0 || it->first.rfind("head.", 0) == 0) {
      it = params_.erase(it);
    } else {
      ++it;
    }
  }
  config_.tasks.clear();
}

void ModelBundle::set_requires_grad(bool flag) {
  for (auto& [name, t] : params_) t.set_requires_grad(flag);
}

void ModelBundle::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

Tensor init_weight(const Shape& shape, std::uint64_t seed, const std::string& name) {
  Rng rng(derive_seed(seed, name));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = truncated_normal(rng, 0.02);
  return Tensor::from_vector(shape, std::move(v), true);
}

void init_psp_params(ParamMap& params, const std::string& prefix, std::size_t channels,
                     std::size_t num_bins, std::uint64_t seed) {
  const std::size_t bc = branch_channels(channels, num_bins);
  for (std::size_t j = 0; j < num_bins; ++j) {
    add_conv(params, prefix + ".branch" + std::to_string(j), channels, bc, 1, seed);
  }
  add_conv(params, prefix + ".fuse", channels + num_bins * bc, channels, 1, seed);
}

Tensor psp_apply(const ParamMap& params, const std::string& prefix,
                 const std::vector<std::size_t>& bins, const Tensor& features) {
  if (features.dim() != 4) {
    throw DimensionError("psp: expected [B x C x h x w], got " + shape_str(features.shape()));
  }
  const std::size_t h = features.shape()[2], w = features.shape()[3];
  std::vector<Tensor> parts{features};
  for (std::size_t j = 0; j < bins.size(); ++j) {
    Tensor pooled = adaptive_avg_pool2d(features, bins[j], bins[j]);
    Tensor branch = gelu(conv(params, prefix + ".branch" + std::to_string(j), pooled, 1));
    parts.push_back(nearest_upsample(branch, h, w));
  }
  return gelu(conv(params, prefix + ".fuse", concat(parts, 1), 1));
}

void init_conv_head_params(ParamMap& params, const std::string& prefix, std::size_t in_ch,
                           std::size_t out_ch, std::size_t layers, std::uint64_t seed) {
  if (layers == 1) {
    add_conv(params, prefix + ".conv0", in_ch, out_ch, 1, seed);
    return;
  }
  if (layers != 3) throw ConfigError("field 'head_layers': must be 1 or 3");
  add_conv(params, prefix + ".conv0", in_ch, in_ch, 3, seed);
  add_conv(params, prefix + ".conv1", in_ch, in_ch, 3, seed);
  add_conv(params, prefix + ".conv2", in_ch, out_ch, 1, seed);
}

Tensor conv_head_apply(const ParamMap& params, const std::string& prefix, std::size_t layers,
                       const Tensor& x) {
  if (layers == 1) return conv(params, prefix + ".conv0", x, 1);
  Tensor h = gelu(conv(params, prefix + ".conv0", x, 1));
  h = gelu(conv(params, prefix + ".conv1", h, 1));
  return conv(params, prefix + ".conv2", h, 1);
}

ModelBundle build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle model(config);
  ParamMap& ps = model.params();
  const std::size_t d = config.embed_dim;

  if (config.encoder_kind == EncoderKind::kVitTiny) {
    const std::size_t patch_dim = 3 * config.patch_size * config.patch_size;
    const std::size_t tokens = config.feature_grid() * config.feature_grid();
    add_linear(ps, "image.patch", patch_dim, d, seed);
    ps["image.pos"] = init_weight({tokens, d}, seed, "image.pos");
    for (std::size_t i = 0; i < config.depth; ++i) {
      add_transformer_block(ps, "image.block" + std::to_string(i), d, config.mlp_ratio, seed);
    }
    add_layer_norm(ps, "image.ln_f", d);
  } else {
    const std::size_t widths[3] = {d / 4, d / 2, d};
    std::size_t in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
      add_conv(ps, "image.stem" + std::to_string(i), in, widths[i], 3, seed);
      add_layer_norm(ps, "image.stem" + std::to_string(i) + ".ln", widths[i]);
      in = widths[i];
    }
    for (std::size_t i = 0; i < config.depth; ++i) {
      add_layer_norm(ps, "image.block" + std::to_string(i) + ".ln", d);
      add_conv(ps, "image.block" + std::to_string(i) + ".conv", d, d, 3, seed);
    }
    add_layer_norm(ps, "image.ln_f", d);
  }
  add_linear(ps, "image.proj", d, config.shared_dim, seed, false);

  ps["text.tok_emb"] = init_weight({config.text_vocab_size, d}, seed, "text.tok_emb");
  ps["text.pos"] = init_weight({config.text_context_length, d}, seed, "text.pos");
  for (std::size_t i = 0; i < config.depth; ++i) {
    add_transformer_block(ps, "text.block" + std::to_string(i), d, config.mlp_ratio, seed);
  }
  add_layer_norm(ps, "text.ln_f", d);
  add_linear(ps, "text.proj", d, config.shared_dim, seed, false);

  ps["logit_scale"] = Tensor::scalar(std::log(1.0 / 0.07), true);

  if (!config.tasks.empty()) {
    init_psp_params(ps, "psp", d, config.psp_bin_sizes.size(), seed);
    for (Task task : config.tasks) {
      init_conv_head_params(ps, std::string("head.") + to_string(task), d,
                            config.task_channels(task), config.head_layers, seed);
    }
  }
  return model;
}

ImageEncoding encode_image(const ModelBundle& model, const Tensor& images) {
  const ModelConfig& c = model.config();
  const ParamMap& ps = model.params();
  if (images.dim() != 4 || images.shape()[1] != 3 || images.shape()[2] != c.image_size ||
      images.shape()[3] != c.image_size) {
    throw DimensionError("encode_image: expected [B x 3 x " + std::to_string(c.image_size) +
                         " x " + std::to_string(c.image_size) + "], got " +
                         shape_str(images.shape()));
  }
  const std::size_t b = images.shape()[0], d = c.embed_dim, g = c.feature_grid();
  Tensor features;
  if (c.encoder_kind == EncoderKind::kVitTiny) {
    Tensor x = lin(ps, "image.patch", patchify(images, c.patch_size));
    x = add(x, p(ps, "image.pos"));
    for (std::size_t i = 0; i < c.depth; ++i) {
      x = transformer_block(ps, "image.block" + std::to_string(i), x, c.num_heads, false);
    }
    x = ln(ps, "image.ln_f", x);
    features = reshape(permute(x, {0, 2, 1}), {b, d, g, g});
  } else {
    Tensor x = images;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string name = "image.stem" + std::to_string(i);
      x = gelu(channel_ln(ps, name + ".ln", conv(ps, name, x, 2)));
    }
    for (std::size_t i = 0; i < c.depth; ++i) {
      const std::string name = "image.block" + std::to_string(i);
      x = add(x, conv(ps, name + ".conv", gelu(channel_ln(ps, name + ".ln", x)), 1));
    }
    features = channel_ln(ps, "image.ln_f", x);
  }
  Tensor pooled = mean_axis(reshape(features, {b, d, g * g}), 2);
  Tensor emb = l2_normalize(lin(ps, "image.proj", pooled), 1);
  return {emb, features};
}

Tensor encode_text(const ModelBundle& model, std::span<const std::int64_t> tokens,
                   std::size_t batch) {
  const ModelConfig& c = model.config();
  const ParamMap& ps = model.params();
  const std::size_t len = c.text_context_length;
  if (tokens.size() != batch * len) {
    throw DimensionError("encode_text: expected " + std::to_string(batch) + " x " +
                         std::to_string(len) + " token ids, got " +
                         std::to_string(tokens.size()));
  }
  // End-of-sequence id is fixed by the tokenizer layout (PAD, BOS, EOS, UNK).
  constexpr std::int64_t kEos = 2;
  std::vector<std::size_t> eos(batch, len - 1);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < len; ++j)
      if (tokens[i * len + j] == kEos) {
        eos[i] = j;
        break;
      }
  Tensor x = embedding(p(ps, "text.tok_emb"), tokens, {batch, len});
  x = add(x, p(ps, "text.pos"));
  for (std::size_t i = 0; i < c.depth; ++i) {
    x = transformer_block(ps, "text.block" + std::to_string(i), x, c.num_heads, true);
  }
  x = ln(ps, "text.ln_f", x);
  return l2_normalize(lin(ps, "text.proj", gather_rows(x, eos)), 1);
}

Tensor psp_forward(const ModelBundle& model, const Tensor& features) {
  const ModelConfig& c = model.config();
  if (features.dim() != 4 || features.shape()[1] != c.embed_dim) {
    throw DimensionError("psp_forward: expected [B x " + std::to_string(c.embed_dim) +
                         " x h x w], got " + shape_str(features.shape()));
  }
  if (!model.has_param("psp.fuse.w")) throw UsageError("model has no multi-scale module");
  return psp_apply(model.params(), "psp", c.psp_bin_sizes, features);
}

Tensor task_head_forward(const ModelBundle& model, Task task, const Tensor& fused,
                         std::size_t out_h, std::size_t out_w) {
  return nearest_upsample(task_head_grid(model, task, fused), out_h, out_w);
}

Tensor task_head_grid(const ModelBundle& model, Task task, const Tensor& fused) {
  const ModelConfig& c = model.config();
  if (!c.has_task(task)) {
    throw UsageError(std::string("task '") + to_string(task) + "' is not enabled in this model");
  }
  Tensor y = conv_head_apply(model.params(), std::string("head.") + to_string(task),
                             c.head_layers, fused);
  if (task == Task::kSurfaceNormal) y = l2_normalize(y, 1);
  return y;
}

}  // namespace mtclip
