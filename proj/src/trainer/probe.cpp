#include <algorithm>
#include <cmath>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/trainer.hpp"

namespace mtclip {

namespace {

using namespace ops;

constexpr std::size_t kFeatureChunk = 64;
constexpr std::int32_t kNoLabel = -1;

struct FrozenFeatures {
  std::size_t count = 0;
  std::size_t channels = 0, grid = 0, embed = 0;
  std::vector<double> maps;        // count x channels x grid x grid
  std::vector<double> embeddings;  // count x embed

  Tensor gather(std::span<const std::size_t> idx, bool global) const {
    const std::size_t per = global ? embed : channels * grid * grid;
    const auto& src = global ? embeddings : maps;
    std::vector<double> v(idx.size() * per);
    for (std::size_t b = 0; b < idx.size(); ++b)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[b] * per), per,
                  v.begin() + static_cast<std::ptrdiff_t>(b * per));
    if (global) return Tensor::from_vector({idx.size(), embed}, std::move(v));
    return Tensor::from_vector({idx.size(), channels, grid, grid}, std::move(v));
  }
};

FrozenFeatures extract(const ModelBundle& model, const ShardData& data) {
  NoGradGuard guard;
  FrozenFeatures f;
  f.count = data.samples.size();
  f.channels = model.config().embed_dim;
  f.grid = model.config().feature_grid();
  f.embed = model.config().shared_dim;
  f.maps.reserve(f.count * f.channels * f.grid * f.grid);
  f.embeddings.reserve(f.count * f.embed);
  for (std::size_t start = 0; start < f.count; start += kFeatureChunk) {
    std::vector<std::size_t> idx(std::min(kFeatureChunk, f.count - start));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const ImageEncoding enc = encode_image(model, images_to_tensor(data, idx));
    f.maps.insert(f.maps.end(), enc.features.data().begin(), enc.features.data().end());
    f.embeddings.insert(f.embeddings.end(), enc.embedding.data().begin(),
                        enc.embedding.data().end());
  }
  return f;
}

std::vector<std::vector<double>> snapshot(const ModelBundle& model) {
  std::vector<std::vector<double>> out;
  for (const auto& name : model.encoder_param_names()) {
    const auto d = model.param(name).data();
    out.emplace_back(d.begin(), d.end());
  }
  return out;
}

std::size_t output_channels(ProbeTask task, const ShardData& data) {
  switch (task) {
    case ProbeTask::kSegmentation: return data.num_classes;
    case ProbeTask::kDepth: return 1;
    case ProbeTask::kSurfaceNormal: return 3;
    case ProbeTask::kClassification: return kNumShapes;
  }
  return 0;
}

// Exact ground truth gathered for a set of samples.
struct Targets {
  std::vector<std::int32_t> labels;  // seg pixels or class ids
  Tensor dense;                      // disparity or normals
  std::vector<std::uint8_t> valid;
};

Targets targets(ProbeTask task, const ShardData& data, std::span<const std::size_t> idx) {
  const std::size_t s = data.image_size, hw = s * s, b = idx.size();
  Targets t;
  switch (task) {
    case ProbeTask::kSegmentation:
      t.labels.reserve(b * hw);
      for (std::size_t i : idx)
        t.labels.insert(t.labels.end(), data.samples[i].gt.mask.begin(),
                        data.samples[i].gt.mask.end());
      break;
    case ProbeTask::kClassification:
      for (std::size_t i : idx) t.labels.push_back(dominant_shape(data.samples[i]));
      break;
    case ProbeTask::kDepth:
    case ProbeTask::kSurfaceNormal: {
      const bool depth = task == ProbeTask::kDepth;
      const std::size_t c = depth ? 1 : 3;
      std::vector<double> v;
      v.reserve(b * c * hw);
      for (std::size_t i : idx) {
        const auto& src = depth ? data.samples[i].gt.disparity : data.samples[i].gt.normals;
        v.insert(v.end(), src.begin(), src.end());
      }
      t.dense = Tensor::from_vector({b, c, s, s}, std::move(v));
      t.valid.assign(b * hw, 1);
      break;
    }
  }
  return t;
}

class ProbeHeadModel {
 public:
  ProbeHeadModel(const TrainConfig& config, const ModelConfig& mc, std::size_t out_ch)
      : task_(config.probe_task), kind_(config.probe_head), bins_(mc.psp_bin_sizes) {
    const std::uint64_t seed = derive_seed(config.seed, "probe");
    if (task_ == ProbeTask::kClassification) {
      params_["probe.cls.w"] = init_weight({mc.shared_dim, out_ch}, seed, "probe.cls.w");
      params_["probe.cls.b"] = Tensor::zeros({out_ch}, true);
      return;
    }
    if (kind_ == ProbeHead::kPsp)
      init_psp_params(params_, "probe.psp", mc.embed_dim, bins_.size(), seed);
    init_conv_head_params(params_, "probe.head", mc.embed_dim, out_ch, 1, seed);
  }

  // Dense outputs stay at the feature grid; callers upsample.
  Tensor forward(const Tensor& x) const {
    if (task_ == ProbeTask::kClassification)
      return linear(x, params_.at("probe.cls.w"), params_.at("probe.cls.b"));
    Tensor h = kind_ == ProbeHead::kPsp ? psp_apply(params_, "probe.psp", bins_, x) : x;
    Tensor y = conv_head_apply(params_, "probe.head", 1, h);
    if (task_ == ProbeTask::kSurfaceNormal) y = l2_normalize(y, 1);
    return y;
  }

  ParamMap& params() { return params_; }

 private:
  ProbeTask task_;
  ProbeHead kind_;
  std::vector<std::size_t> bins_;
  ParamMap params_;
};

Tensor probe_loss(ProbeTask task, const Tensor& out, const Targets& t, std::size_t size) {
  switch (task) {
    case ProbeTask::kClassification:
      return softmax_cross_entropy(out, t.labels, kNoLabel);
    case ProbeTask::kSegmentation:
      return segmentation_ce_upsampled(out, t.labels, size, size).value;
    case ProbeTask::kDepth:
      return ssi_probe_loss(nearest_upsample(out, size, size), t.dense, t.valid).value;
    case ProbeTask::kSurfaceNormal:
      return angular_probe_loss(nearest_upsample(out, size, size), t.dense, t.valid).value;
  }
  return {};
}

}  // namespace

std::int32_t dominant_shape(const Sample& sample) {
  std::array<std::size_t, kNumSegClasses> area{};
  for (std::uint8_t c : sample.gt.mask)
    if (c < area.size()) ++area[c];
  std::int32_t best = kNoLabel;
  std::size_t best_area = 0;
  for (std::size_t c = 1; c < area.size(); ++c)
    if (area[c] > best_area) {
      best_area = area[c];
      best = static_cast<std::int32_t>(c - 1);
    }
  return best;
}

ProbeResult run_probe(const TrainConfig& config, const ModelBundle& frozen,
                      const ShardData& train, const ShardData& eval, const RunOptions& options) {
  config.validate();
  if (train.samples.empty() || eval.samples.empty()) throw InputError("probe split is empty");
  const ModelConfig& mc = frozen.config();
  for (const ShardData* d : {&train, &eval})
    if (d->image_size != mc.image_size)
      throw ConfigError("field 'image_size': probe data does not match the encoder");

  const auto before = snapshot(frozen);
  const FrozenFeatures ftrain = extract(frozen, train);
  const FrozenFeatures feval = extract(frozen, eval);
  const ProbeTask task = config.probe_task;
  const bool global = task == ProbeTask::kClassification;
  const std::size_t size = train.image_size;

  ProbeHeadModel head(config, mc, output_channels(task, train));
  ProbeResult result;
  for (const auto& [name, t] : head.params()) result.head_param_count += t.numel();

  AdamW optimizer(config.optimizer);
  const std::size_t n = train.samples.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * per_epoch;
  const std::uint64_t order_seed = derive_seed(config.seed, "probe_order");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(n, order_seed, epoch);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      if (options.max_steps && step >= options.max_steps) break;
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(config.batch_size, n - start));
      for (auto& [name, p] : head.params()) p.zero_grad();
      const Tensor loss = probe_loss(task, head.forward(ftrain.gather(idx, global)),
                                     targets(task, train, idx), size);
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite probe loss at step " + std::to_string(step));
      loss.backward();
      optimizer.step(head.params(), lr_at_step(config.schedule, step, total, per_epoch));
      epoch_loss += loss.item();
      ++batches;
      ++step;
    }
    if (batches == 0) break;
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
    if (options.log)
      *options.log << "{\"probe_epoch\":" << epoch << ",\"loss\":" << result.epoch_losses.back()
                   << "}\n";
  }

  // Evaluation against exact ground truth of the held-out split.
  NoGradGuard guard;
  ConfusionMatrix cm(eval.num_classes);
  MeanAccumulator acc;
  std::vector<double> logits;
  std::vector<std::int32_t> labels;
  for (std::size_t start = 0; start < eval.samples.size(); start += kFeatureChunk) {
    std::vector<std::size_t> idx(std::min(kFeatureChunk, eval.samples.size() - start));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor out = head.forward(feval.gather(idx, global));
    const Targets t = targets(task, eval, idx);
    if (task == ProbeTask::kClassification) {
      logits.insert(logits.end(), out.data().begin(), out.data().end());
      labels.insert(labels.end(), t.labels.begin(), t.labels.end());
      continue;
    }
    out = nearest_upsample(out, size, size);
    if (task == ProbeTask::kSegmentation) {
      const std::size_t c = out.size(1), hw = size * size;
      std::vector<std::int32_t> pred(idx.size() * hw);
      const auto d = out.data();
      for (std::size_t b = 0; b < idx.size(); ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          std::size_t best = 0;
          for (std::size_t k = 1; k < c; ++k)
            if (d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p]) best = k;
          pred[b * hw + p] = static_cast<std::int32_t>(best);
        }
      cm.add(pred, t.labels);
    } else if (task == ProbeTask::kDepth) {
      acc.merge(abs_rel_accumulate(out.data(), t.dense.data(), t.valid, idx.size()));
    } else {
      acc.merge(angular_accuracy_accumulate(out.data(), t.dense.data(), t.valid, idx.size()));
    }
  }

  MetricReport& rep = result.report;
  rep.task = to_string(task);
  rep.sample_count = eval.samples.size();
  rep.config_digest = mc.digest();
  rep.seed = config.seed;
  switch (task) {
    case ProbeTask::kSegmentation: {
      rep.metric = "miou";
      for (double v : cm.per_class_iou()) rep.per_class.push_back(100.0 * v);
      rep.value = 100.0 * cm.mean_iou();
      break;
    }
    case ProbeTask::kDepth:
      if (acc.count == 0) throw MetricError("abs_rel: no valid pixels");
      rep.metric = "abs_rel";
      rep.value = acc.sum / static_cast<double>(acc.count);
      break;
    case ProbeTask::kSurfaceNormal:
      if (acc.count == 0) throw MetricError("angular_accuracy: no valid pixels");
      rep.metric = "a30";
      rep.value = 100.0 * acc.sum / static_cast<double>(acc.count);
      break;
    case ProbeTask::kClassification: {
      rep.metric = "top1";
      // Background-only scenes carry no class and are skipped.
      std::vector<double> kept;
      std::vector<std::int32_t> kept_labels;
      const std::size_t c = kNumShapes;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kNoLabel) continue;
        kept.insert(kept.end(), logits.begin() + static_cast<std::ptrdiff_t>(i * c),
                    logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
        kept_labels.push_back(labels[i]);
      }
      rep.value = top1(Tensor::from_vector({kept_labels.size(), c}, std::move(kept)), kept_labels);
      rep.sample_count = kept_labels.size();
      break;
    }
  }

  result.encoder_unchanged = snapshot(frozen) == before;
  double g2 = 0.0;
  for (const auto& name : frozen.encoder_param_names()) {
    const Tensor& p = frozen.param(name);
    if (!p.has_grad()) continue;
    for (double g : p.grad()) g2 += g * g;
  }
  result.encoder_grad_norm = std::sqrt(g2);
  result.head = head.params();
  return result;
}

}  // namespace mtclip
