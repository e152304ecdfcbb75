#include "mtclip/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "mtclip/error.hpp"

namespace mtclip {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kAlignDetTolerance = 1e-12;

void require_sizes(std::size_t pred, std::size_t gt, std::size_t valid, std::size_t per_pixel,
                   std::size_t images, const char* op) {
  if (images == 0) throw ArgumentError(std::string(op) + ": zero images");
  if (pred != gt)
    throw DimensionError(std::string(op) + ": pred has " + std::to_string(pred) +
                         " values, gt has " + std::to_string(gt));
  if (valid * per_pixel != pred || valid % images != 0)
    throw DimensionError(std::string(op) + ": valid map of " + std::to_string(valid) +
                         " pixels does not match " + std::to_string(pred) + " values over " +
                         std::to_string(images) + " images");
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes, std::int32_t ignore_id)
    : n_(num_classes), ignore_(ignore_id), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ArgumentError("confusion matrix: zero classes");
}

void ConfusionMatrix::add(std::span<const std::int32_t> pred,
                          std::span<const std::int32_t> gt) {
  if (pred.size() != gt.size())
    throw DimensionError("miou: pred has " + std::to_string(pred.size()) + " pixels, gt has " +
                         std::to_string(gt.size()));
  const auto n = static_cast<std::int32_t>(n_);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_) continue;
    if (gt[i] < 0 || gt[i] >= n || pred[i] < 0 || pred[i] >= n)
      throw ArgumentError("miou: class id out of range at pixel " + std::to_string(i));
    ++counts_[static_cast<std::size_t>(gt[i]) * n_ + static_cast<std::size_t>(pred[i])];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ArgumentError("confusion matrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(n_, kNaN);
  for (std::size_t c = 0; c < n_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n_; ++k) {
      row += at(c, k);
      col += at(k, c);
    }
    const std::uint64_t tp = at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return iou;
}

double ConfusionMatrix::mean_iou() const {
  double s = 0.0;
  std::size_t k = 0;
  for (double v : per_class_iou()) {
    if (std::isnan(v)) continue;
    s += v;
    ++k;
  }
  return k == 0 ? kNaN : s / static_cast<double>(k);
}

MiouResult miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
                std::size_t num_classes, std::int32_t ignore_id) {
  ConfusionMatrix cm(num_classes, ignore_id);
  cm.add(pred, gt);
  return {cm.per_class_iou(), cm.mean_iou()};
}

std::pair<double, double> ssi_align(std::span<const double> pred, std::span<const double> gt,
                                    std::span<const std::uint8_t> valid) {
  double n = 0, sp = 0, spp = 0, sg = 0, spg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    n += 1;
    sp += pred[i];
    spp += pred[i] * pred[i];
    sg += gt[i];
    spg += pred[i] * gt[i];
  }
  if (n == 0) return {0.0, 0.0};
  const double det = n * spp - sp * sp;
  if (det < kAlignDetTolerance) return {0.0, sg / n};
  return {(n * spg - sp * sg) / det, (spp * sg - sp * spg) / det};
}

MeanAccumulator depth_abs_rel_accumulate(std::span<const double> pred_depth,
                                         std::span<const double> gt_depth,
                                         std::span<const std::uint8_t> valid) {
  if (pred_depth.size() != gt_depth.size() || valid.size() != gt_depth.size())
    throw DimensionError("abs_rel: depth maps and mask differ in size");
  MeanAccumulator acc;
  for (std::size_t i = 0; i < gt_depth.size(); ++i) {
    if (!valid[i]) continue;
    acc.sum += std::abs(pred_depth[i] - gt_depth[i]) / gt_depth[i];
    ++acc.count;
  }
  return acc;
}

MeanAccumulator abs_rel_accumulate(std::span<const double> pred, std::span<const double> gt,
                                   std::span<const std::uint8_t> valid, std::size_t images) {
  require_sizes(pred.size(), gt.size(), valid.size(), 1, images, "abs_rel");
  const std::size_t hw = pred.size() / images;
  MeanAccumulator acc;
  for (std::size_t b = 0; b < images; ++b) {
    const auto p = pred.subspan(b * hw, hw);
    const auto g = gt.subspan(b * hw, hw);
    const auto v = valid.subspan(b * hw, hw);
    const auto [s, t] = ssi_align(p, g, v);
    std::vector<double> dp(hw), dg(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      if (!v[i]) continue;
      if (!(g[i] > 0.0)) throw ArgumentError("abs_rel: non-positive gt disparity");
      dp[i] = 1.0 / std::max(s * p[i] + t, kMinDisparity);
      dg[i] = 1.0 / std::max(g[i], kMinDisparity);
    }
    acc.merge(depth_abs_rel_accumulate(dp, dg, v));
  }
  return acc;
}

double abs_rel(std::span<const double> pred, std::span<const double> gt,
               std::span<const std::uint8_t> valid, std::size_t images) {
  const MeanAccumulator acc = abs_rel_accumulate(pred, gt, valid, images);
  if (acc.count == 0) throw MetricError("abs_rel: no valid pixels");
  return acc.sum / static_cast<double>(acc.count);
}

MeanAccumulator angular_accuracy_accumulate(std::span<const double> pred,
                                            std::span<const double> gt,
                                            std::span<const std::uint8_t> valid,
                                            std::size_t images, double threshold_deg) {
  require_sizes(pred.size(), gt.size(), valid.size(), 3, images, "angular_accuracy");
  const std::size_t hw = valid.size() / images;
  const double limit = threshold_deg * std::numbers::pi / 180.0;
  MeanAccumulator acc;
  for (std::size_t b = 0; b < images; ++b) {
    const double* p = pred.data() + b * 3 * hw;
    const double* g = gt.data() + b * 3 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      if (!valid[b * hw + i]) continue;
      double dot = 0, np = 0, ng = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        dot += p[c * hw + i] * g[c * hw + i];
        np += p[c * hw + i] * p[c * hw + i];
        ng += g[c * hw + i] * g[c * hw + i];
      }
      const double denom = std::sqrt(np * ng);
      const double cosang = denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : -1.0;
      if (std::acos(cosang) < limit) acc.sum += 1.0;
      ++acc.count;
    }
  }
  return acc;
}

double angular_accuracy(std::span<const double> pred, std::span<const double> gt,
                        std::span<const std::uint8_t> valid, std::size_t images,
                        double threshold_deg) {
  const MeanAccumulator acc =
      angular_accuracy_accumulate(pred, gt, valid, images, threshold_deg);
  if (acc.count == 0) throw MetricError("angular_accuracy: no valid pixels");
  return 100.0 * acc.sum / static_cast<double>(acc.count);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.dim() != 2) throw DimensionError("top1: logits must be [N x C]");
  const std::size_t n = logits.size(0), c = logits.size(1);
  if (c == 0) throw DimensionError("top1: zero classes");
  const auto d = logits.data();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (d[i * c + k] > d[i * c + best]) best = k;
    out[i] = best;
  }
  return out;
}

double top1(const Tensor& logits, std::span<const std::int32_t> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size())
    throw DimensionError("top1: " + std::to_string(pred.size()) + " rows vs " +
                         std::to_string(labels.size()) + " labels");
  if (pred.empty()) throw MetricError("top1: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    hits += static_cast<std::int64_t>(pred[i]) == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

// Fraction of rows whose diagonal entry ranks within the top k.
double diagonal_recall(const std::vector<double>& sim, std::size_t n, bool by_row,
                       std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    auto s = [&](std::size_t j) { return by_row ? sim[q * n + j] : sim[j * n + q]; };
    const double target = s(q);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = s(j);
      if (v > target || (v == target && j < q)) ++rank;
    }
    hits += rank < k ? 1 : 0;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

RecallResult recall_at_k(const Tensor& image_embs, const Tensor& text_embs, std::size_t k) {
  if (image_embs.dim() != 2 || image_embs.shape() != text_embs.shape())
    throw DimensionError("recall_at_k: expected matching [N x d] embeddings, got " +
                         shape_str(image_embs.shape()) + " and " + shape_str(text_embs.shape()));
  const std::size_t n = image_embs.size(0), d = image_embs.size(1);
  if (k == 0 || k > n)
    throw ArgumentError("recall_at_k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(n) + "]");
  auto unit_rows = [&](std::span<const double> x) {
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
      const double inv = s > 0 ? 1.0 / std::sqrt(s) : 0.0;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv;
    }
    return out;
  };
  const auto a = unit_rows(image_embs.data());
  const auto b = unit_rows(text_embs.data());
  std::vector<double> sim(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < d; ++t) s += a[i * d + t] * b[j * d + t];
      sim[i * n + j] = s;
    }
  return {diagonal_recall(sim, n, true, k), diagonal_recall(sim, n, false, k)};
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["metric"] = metric;
  j["value"] = value;
  nlohmann::json pc = nlohmann::json::array();
  for (double v : per_class) pc.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j["per_class"] = pc;
  j["sample_count"] = sample_count;
  j["config_digest"] = config_digest;
  j["seed"] = seed;
  return j.dump();
}

MetricReport MetricReport::from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ReportError(std::string("metric report: ") + e.what());
  }
  MetricReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    for (const auto& v : j.at("per_class"))
      r.per_class.push_back(v.is_null() ? kNaN : v.get<double>());
    r.sample_count = j.at("sample_count").get<std::uint64_t>();
    r.config_digest = j.at("config_digest").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ReportError(std::string("metric report: ") + e.what());
  }
  return r;
}

}  // namespace mtclip
