#include "mtclip/losses.hpp"

#include <cmath>
#include <vector>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"

namespace mtclip {

namespace {

using namespace ops;

// Tolerance on the SSI normal-equation determinant.
constexpr double kSsiDetTolerance = 1e-12;

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_valid_size(std::span<const std::uint8_t> valid, std::size_t expected,
                        const char* op) {
  if (valid.size() != expected)
    throw DimensionError(std::string(op) + ": valid map has " + std::to_string(valid.size()) +
                         " entries, expected " + std::to_string(expected));
}

}  // namespace

void LossWeights::validate() const {
  if (!(clip >= 0.0)) throw ConfigError("field 'lambda_clip': must be >= 0");
  bool any = clip > 0.0;
  for (const auto& [t, w] : task) {
    if (!(w >= 0.0))
      throw ConfigError(std::string("field 'lambda_") + to_string(t) + "': must be >= 0");
    any = any || w > 0.0;
  }
  if (!any) throw ConfigError("field 'lambda_clip': at least one loss weight must be positive");
}

double LossWeights::weight(Task t) const {
  const auto it = task.find(t);
  return it == task.end() ? 0.0 : it->second;
}

std::vector<Task> LossWeights::active_tasks() const {
  std::vector<Task> out;
  for (Task t : all_tasks())
    if (weight(t) > 0.0) out.push_back(t);
  return out;
}

KeyValues LossWeights::to_kv() const {
  KeyValues kv;
  kv.set("lambda_clip", format_double(clip));
  for (Task t : all_tasks()) kv.set(std::string("lambda_") + to_string(t), format_double(weight(t)));
  return kv;
}

LossWeights LossWeights::from_kv(const KeyValues& kv) {
  LossWeights w;
  w.clip = kv.get_double("lambda_clip", w.clip);
  for (Task t : all_tasks()) {
    const std::string key = std::string("lambda_") + to_string(t);
    w.task[t] = kv.get_double(key, w.weight(t));
  }
  w.validate();
  return w;
}

Tensor clip_contrastive_loss(const Tensor& image_embs, const Tensor& text_embs,
                             const Tensor& logit_scale) {
  if (image_embs.dim() != 2) throw DimensionError("clip loss: embeddings must be [B x d]");
  require_same(image_embs, text_embs, "clip loss");
  const std::size_t b = image_embs.shape()[0];
  if (b == 0) throw InputError("clip loss: empty batch");
  Tensor logits = mul(matmul(image_embs, transpose_last2(text_embs)), exp(logit_scale));
  std::vector<std::int32_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = static_cast<std::int32_t>(i);
  Tensor rows = softmax_cross_entropy(logits, diag);
  Tensor cols = softmax_cross_entropy(transpose_last2(logits), diag);
  return scale(add(rows, cols), 0.5);
}

MaskedLoss segmentation_ce(const Tensor& logits, std::span<const std::int32_t> mask,
                           std::int32_t ignore_id) {
  std::size_t counted = 0;
  MaskedLoss out;
  out.value = softmax_cross_entropy(logits, mask, ignore_id, &counted);
  out.empty = counted == 0;
  return out;
}

MaskedLoss l1_dense(const Tensor& pred, const Tensor& target,
                    std::span<const std::uint8_t> valid) {
  require_same(pred, target, "l1_dense");
  if (pred.dim() != 4) throw DimensionError("l1_dense: expected [B x C x H x W]");
  const auto& s = pred.shape();
  const std::size_t b = s[0], c = s[1], hw = s[2] * s[3];
  require_valid_size(valid, b * hw, "l1_dense");
  std::size_t count = 0;
  std::vector<double> m(b * hw);
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = valid[i] ? 1.0 : 0.0;
    count += valid[i] ? 1 : 0;
  }
  MaskedLoss out;
  if (count == 0) {
    out.value = mul(sum(pred), Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  Tensor mask = Tensor::from_vector({b, 1, s[2], s[3]}, std::move(m));
  Tensor err = sum(mul(abs(sub(pred, target)), mask));
  out.value = scale(err, 1.0 / static_cast<double>(count * c));
  return out;
}

namespace {

// Source cell of each output row/column under nearest upsampling.
std::vector<std::size_t> nearest_index(std::size_t in, std::size_t out) {
  std::vector<std::size_t> idx(out);
  for (std::size_t i = 0; i < out; ++i) idx[i] = i * in / out;
  return idx;
}

}  // namespace

MaskedLoss segmentation_ce_upsampled(const Tensor& grid_logits, std::span<const std::int32_t> mask,
                                     std::size_t out_h, std::size_t out_w,
                                     std::int32_t ignore_id) {
  if (grid_logits.dim() != 4)
    throw DimensionError("segmentation_ce_upsampled: expected [B x C x h x w], got " +
                         shape_str(grid_logits.shape()));
  const auto& s = grid_logits.shape();
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  if (out_h < h || out_w < w)
    throw ArgumentError("segmentation_ce_upsampled: label map smaller than the grid");
  if (mask.size() != b * out_h * out_w)
    throw DimensionError("segmentation_ce_upsampled: mask has " + std::to_string(mask.size()) +
                         " entries, expected " + std::to_string(b * out_h * out_w));
  const auto sy = nearest_index(h, out_h), sx = nearest_index(w, out_w);
  std::vector<double> hist(b * c * h * w, 0.0);
  std::size_t counted = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const std::int32_t label = mask[(n * out_h + y) * out_w + x];
        if (label == ignore_id) continue;
        if (label < 0 || static_cast<std::size_t>(label) >= c)
          throw ArgumentError("segmentation_ce_upsampled: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(c) + ")");
        hist[((n * c + static_cast<std::size_t>(label)) * h + sy[y]) * w + sx[x]] += 1.0;
        ++counted;
      }
  MaskedLoss out;
  if (counted == 0) {
    out.value = mul(sum(grid_logits), Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  Tensor weights = Tensor::from_vector(s, std::move(hist));
  Tensor nll = sum(mul(log_softmax(grid_logits, 1), weights));
  out.value = scale(nll, -1.0 / static_cast<double>(counted));
  return out;
}

MaskedLoss l1_dense_upsampled(const Tensor& grid_pred, const Tensor& target,
                              std::span<const std::uint8_t> valid) {
  if (grid_pred.dim() != 4 || target.dim() != 4 || grid_pred.shape()[0] != target.shape()[0] ||
      grid_pred.shape()[1] != target.shape()[1])
    throw DimensionError("l1_dense_upsampled: " + shape_str(grid_pred.shape()) + " vs " +
                         shape_str(target.shape()));
  const auto& gs = grid_pred.shape();
  const auto& ts = target.shape();
  const std::size_t b = gs[0], c = gs[1], h = gs[2], w = gs[3], oh = ts[2], ow = ts[3];
  if (oh < h || ow < w) throw ArgumentError("l1_dense_upsampled: target smaller than the grid");
  require_valid_size(valid, b * oh * ow, "l1_dense_upsampled");
  std::size_t count = 0;
  for (std::uint8_t v : valid) count += v ? 1 : 0;
  MaskedLoss out;
  if (count == 0) {
    out.value = mul(sum(grid_pred), Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  const auto sy = nearest_index(h, oh), sx = nearest_index(w, ow);
  const double inv = 1.0 / static_cast<double>(count * c);
  const auto p = grid_pred.data();
  const auto t = target.data();
  // Per-cell sum of sign(pred - target) over valid pixels, kept for backward.
  std::vector<double> signs(grid_pred.numel(), 0.0);
  double total = 0.0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          if (!valid[(n * oh + y) * ow + x]) continue;
          const std::size_t cell = ((n * c + ch) * h + sy[y]) * w + sx[x];
          const double d = p[cell] - t[((n * c + ch) * oh + y) * ow + x];
          total += std::abs(d);
          signs[cell] += d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        }
  out.value = Tensor::make_result({}, {total * inv}, {grid_pred},
                                  [signs = std::move(signs), inv](detail::Node& self) {
                                    auto& g = self.parents[0]->grad_buffer();
                                    const double up = self.grad[0] * inv;
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += signs[i] * up;
                                  });
  return out;
}

LossReport combined_loss(const std::map<std::string, Tensor>& components,
                         const LossWeights& weights) {
  weights.validate();
  std::vector<std::pair<std::string, double>> terms;
  terms.emplace_back(kClipComponent, weights.clip);
  for (Task t : all_tasks()) terms.emplace_back(to_string(t), weights.weight(t));

  LossReport report;
  for (const auto& [name, value] : components) {
    if (value.numel() != 1)
      throw DimensionError("combined_loss: component '" + name + "' is not a scalar");
    report.per_component[name] = value.item();
  }
  Tensor total;
  for (const auto& [name, w] : terms) {
    if (w <= 0.0) continue;
    const auto it = components.find(name);
    if (it == components.end())
      throw ConfigError("combined_loss: weight for '" + name + "' is positive but the component is missing");
    Tensor term = scale(reshape(it->second, {}), w);
    total = total.defined() ? add(total, term) : term;
  }
  report.total = total;
  return report;
}

MaskedLoss ssi_probe_loss(const Tensor& pred_disparity, const Tensor& gt_disparity,
                          std::span<const std::uint8_t> valid) {
  require_same(pred_disparity, gt_disparity, "ssi_probe_loss");
  const auto& s = pred_disparity.shape();
  if (s.size() != 4 || s[1] != 1) throw DimensionError("ssi_probe_loss: expected [B x 1 x H x W]");
  const std::size_t b = s[0], hw = s[2] * s[3];
  require_valid_size(valid, b * hw, "ssi_probe_loss");

  std::vector<double> m(b * hw), n(b, 0.0);
  for (std::size_t i = 0; i < b * hw; ++i) {
    m[i] = valid[i] ? 1.0 : 0.0;
    n[i / hw] += m[i];
  }
  Tensor mask = Tensor::from_vector({b, hw}, m);
  Tensor p = reshape(pred_disparity, {b, hw});
  Tensor g = reshape(gt_disparity, {b, hw});
  Tensor pm = mul(p, mask);
  Tensor sp = sum_axis(pm, 1, true);
  Tensor spp = sum_axis(mul(pm, p), 1, true);
  Tensor spg = sum_axis(mul(pm, g), 1, true);
  Tensor sg = sum_axis(mul(g, mask), 1, true);
  Tensor cnt = Tensor::from_vector({b, 1}, n);
  Tensor det = sub(mul(cnt, spp), mul(sp, sp));

  // Degenerate images fall back to s = 0, t = mean(gt).
  std::vector<double> keep(b), fallback_det(b), mean_g(b, 0.0);
  std::size_t images = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const bool ok = det.data()[i] >= kSsiDetTolerance;
    keep[i] = ok ? 1.0 : 0.0;
    fallback_det[i] = ok ? 0.0 : 1.0;
    if (n[i] > 0.0) {
      mean_g[i] = sg.data()[i] / n[i];
      ++images;
    }
  }
  MaskedLoss out;
  if (images == 0) {
    out.value = mul(sum(pred_disparity), Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  Tensor keep_t = Tensor::from_vector({b, 1}, keep);
  Tensor safe_det = add(det, Tensor::from_vector({b, 1}, fallback_det));
  Tensor sc = mul(div(sub(mul(cnt, spg), mul(sp, sg)), safe_det), keep_t);
  Tensor sh = add(mul(div(sub(mul(spp, sg), mul(sp, spg)), safe_det), keep_t),
                  mul(Tensor::from_vector({b, 1}, mean_g),
                      Tensor::from_vector({b, 1}, fallback_det)));
  Tensor resid = mul(abs(sub(add(mul(sc, p), sh), g)), mask);
  std::vector<double> inv(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    inv[i] = n[i] > 0.0 ? 1.0 / (n[i] * static_cast<double>(images)) : 0.0;
  out.value = sum(mul(sum_axis(resid, 1, true), Tensor::from_vector({b, 1}, inv)));
  return out;
}

MaskedLoss angular_probe_loss(const Tensor& pred_normals, const Tensor& gt_normals,
                              std::span<const std::uint8_t> valid) {
  require_same(pred_normals, gt_normals, "angular_probe_loss");
  const auto& s = pred_normals.shape();
  if (s.size() != 4 || s[1] != 3)
    throw DimensionError("angular_probe_loss: expected [B x 3 x H x W]");
  const std::size_t b = s[0], hw = s[2] * s[3];
  require_valid_size(valid, b * hw, "angular_probe_loss");
  std::vector<double> m(b * hw);
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = valid[i] ? 1.0 : 0.0;
    count += valid[i] ? 1 : 0;
  }
  MaskedLoss out;
  if (count == 0) {
    out.value = mul(sum(pred_normals), Tensor::scalar(0.0));
    out.empty = true;
    return out;
  }
  Tensor cosine = sum_axis(mul(pred_normals, gt_normals), 1);
  Tensor angle = acos_clamped(cosine);
  Tensor mask = Tensor::from_vector({b, s[2], s[3]}, std::move(m));
  out.value = scale(sum(mul(angle, mask)), 1.0 / static_cast<double>(count));
  return out;
}

}  // namespace mtclip
