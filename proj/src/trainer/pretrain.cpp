#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/trainer.hpp"

namespace mtclip {

namespace {

using namespace ops;

constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

bool has_pseudo(const ShardData& data, Task t) {
  if (data.pseudo.size() != data.samples.size() || data.pseudo.empty()) return false;
  const DenseLabels& p = data.pseudo.front();
  switch (t) {
    case Task::kSegmentation: return !p.mask.empty();
    case Task::kDepth: return !p.disparity.empty();
    case Task::kSurfaceNormal: return !p.normals.empty();
  }
  return false;
}

void check_finite(const std::string& name, const Tensor& value) {
  if (!std::isfinite(value.item()))
    throw NumericError("non-finite loss in component '" + name + "' (" +
                       std::to_string(value.item()) + ")");
}

}  // namespace

Tensor images_to_tensor(const ShardData& data, std::span<const std::size_t> indices) {
  const std::size_t s = data.image_size, per = 3 * s * s;
  std::vector<double> v(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = data.samples.at(indices[b]).image;
    for (std::size_t i = 0; i < per; ++i)
      v[b * per + i] = (static_cast<double>(img[i]) / 255.0 - kPixelMean) / kPixelStd;
  }
  return Tensor::from_vector({indices.size(), 3, s, s}, std::move(v));
}

Batch make_batch(const ShardData& data, std::span<const std::size_t> indices,
                 const Vocab& vocab, std::size_t context_length, std::span<const Task> tasks) {
  Batch batch;
  batch.size = indices.size();
  batch.image_size = data.image_size;
  const std::size_t s = data.image_size, hw = s * s, b = indices.size();
  batch.images = images_to_tensor(data, indices);
  batch.tokens.reserve(b * context_length);
  for (std::size_t i : indices) {
    const auto ids = tokenize(data.samples[i].caption, vocab, context_length);
    batch.tokens.insert(batch.tokens.end(), ids.begin(), ids.end());
  }
  batch.valid.assign(b * hw, 1);
  for (Task t : tasks) {
    if (!has_pseudo(data, t))
      throw ConfigError(std::string("shard has no pseudo-labels for task '") + to_string(t) + "'");
    if (t == Task::kSegmentation) {
      batch.seg.resize(b * hw);
      for (std::size_t k = 0; k < b; ++k) {
        const auto& m = data.pseudo[indices[k]].mask;
        std::copy(m.begin(), m.end(), batch.seg.begin() + static_cast<std::ptrdiff_t>(k * hw));
      }
    } else if (t == Task::kDepth) {
      std::vector<double> v(b * hw);
      for (std::size_t k = 0; k < b; ++k) {
        const auto& d = data.pseudo[indices[k]].disparity;
        std::copy(d.begin(), d.end(), v.begin() + static_cast<std::ptrdiff_t>(k * hw));
      }
      batch.disparity = Tensor::from_vector({b, 1, s, s}, std::move(v));
    } else {
      std::vector<double> v(b * 3 * hw);
      for (std::size_t k = 0; k < b; ++k) {
        const auto& n = data.pseudo[indices[k]].normals;
        std::copy(n.begin(), n.end(), v.begin() + static_cast<std::ptrdiff_t>(k * 3 * hw));
      }
      batch.normals = Tensor::from_vector({b, 3, s, s}, std::move(v));
    }
  }
  return batch;
}

LossReport pretrain_step(ModelBundle& model, AdamW& optimizer, const Batch& batch,
                         const LossWeights& weights, double lr) {
  model.zero_grad();
  std::map<std::string, Tensor> components;
  const ImageEncoding enc = encode_image(model, batch.images);
  const Tensor txt = encode_text(model, batch.tokens, batch.size);
  components[kClipComponent] = clip_contrastive_loss(enc.embedding, txt, model.logit_scale());

  Tensor fused;
  for (Task t : all_tasks()) {
    if (weights.weight(t) <= 0.0) continue;
    if (!model.config().has_task(t))
      throw ConfigError(std::string("field 'lambda_") + to_string(t) +
                        "': positive weight but the model has no such head");
    if (!fused.defined()) fused = psp_forward(model, enc.features);
    // Losses read the grid output against full-resolution labels, which is
    // the same objective as upsampling first.
    const Tensor out = task_head_grid(model, t, fused);
    switch (t) {
      case Task::kSegmentation:
        components[to_string(t)] =
            segmentation_ce_upsampled(out, batch.seg, batch.image_size, batch.image_size).value;
        break;
      case Task::kDepth:
        components[to_string(t)] = l1_dense_upsampled(out, batch.disparity, batch.valid).value;
        break;
      case Task::kSurfaceNormal:
        components[to_string(t)] = l1_dense_upsampled(out, batch.normals, batch.valid).value;
        break;
    }
  }
  check_finite(kClipComponent, components[kClipComponent]);
  for (Task t : all_tasks())
    if (components.count(to_string(t))) check_finite(to_string(t), components[to_string(t)]);

  LossReport report = combined_loss(components, weights);
  report.total.backward();
  optimizer.step(model.params(), lr);
  model.clamp_logit_scale();
  return report;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(derive_seed(seed, "epoch_order"), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

PretrainResult run_pretraining(const TrainConfig& config, ModelConfig model_config,
                               const ShardData& data, const Vocab& vocab,
                               const RunOptions& options) {
  config.validate();
  model_config.tasks.clear();
  for (Task t : all_tasks())
    if (std::find(config.enabled_experts.begin(), config.enabled_experts.end(), t) !=
        config.enabled_experts.end())
      model_config.tasks.push_back(t);
  model_config.validate();
  const LossWeights weights = config.effective_weights();
  weights.validate();

  if (data.samples.empty()) throw InputError("pretraining shard is empty");
  if (data.image_size != model_config.image_size)
    throw ConfigError("field 'image_size': model expects " + std::to_string(model_config.image_size) +
                      " but shard holds " + std::to_string(data.image_size));
  if (vocab.size() > model_config.text_vocab_size)
    throw ConfigError("field 'text_vocab_size': vocabulary has " + std::to_string(vocab.size()) +
                      " tokens");
  std::vector<Task> supervised;
  for (Task t : weights.active_tasks()) {
    if (!has_pseudo(data, t))
      throw ConfigError(std::string("enabled expert '") + to_string(t) +
                        "' has no pseudo-labels in the shard");
    supervised.push_back(t);
  }

  PretrainResult result{build_model(model_config, config.seed), 0, {}, {}, {}};
  AdamW optimizer(config.optimizer);
  const std::size_t n = data.samples.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * per_epoch;
  const std::size_t ctx = model_config.text_context_length;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(n, config.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t in_epoch = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      if (options.max_steps && step >= options.max_steps) break;
      const std::size_t len = std::min(config.batch_size, n - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const Batch batch = make_batch(data, idx, vocab, ctx, supervised);
      const double lr = lr_at_step(config.schedule, step, total, per_epoch);
      const LossReport report = pretrain_step(result.model, optimizer, batch, weights, lr);
      const double total_loss = report.total.item();
      result.step_totals.push_back(total_loss);
      result.step_components.push_back(report.per_component);
      rec.lr = lr;
      rec.total += total_loss;
      for (const auto& [k, v] : report.per_component) rec.components[k] += v;
      ++in_epoch;
      if (options.log && options.log_steps) {
        nlohmann::json j{{"step", step}, {"lr", lr}, {"total", total_loss}};
        for (const auto& [k, v] : report.per_component) j[k] = v;
        *options.log << j.dump() << '\n';
      }
      ++step;
    }
    if (in_epoch == 0) break;
    rec.total /= static_cast<double>(in_epoch);
    for (auto& [k, v] : rec.components) v /= static_cast<double>(in_epoch);
    if (options.log) {
      nlohmann::json j{{"epoch", epoch}, {"step", step}, {"lr", rec.lr}, {"total", rec.total}};
      for (const auto& [k, v] : rec.components) j[k] = v;
      *options.log << j.dump() << std::endl;
    }
    result.epochs.push_back(std::move(rec));
  }
  result.model.zero_grad();
  result.steps = step;
  return result;
}

}  // namespace mtclip
