#pragma once

// Brute-force reference metrics written without the library's accumulators,
// and a random-instance comparison against the library versions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mtclip/metrics.hpp"

namespace mtclip::testing {

inline double oracle_miou(const std::vector<std::int32_t>& pred,
                          const std::vector<std::int32_t>& gt, std::size_t classes,
                          std::int32_t ignore) {
  std::set<std::int32_t> seen;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    seen.insert(gt[i]);
    seen.insert(pred[i]);
  }
  double total = 0.0;
  for (std::int32_t c : seen) {
    if (c < 0 || static_cast<std::size_t>(c) >= classes) continue;
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (pred[i] == c && gt[i] == c) tp += 1;
      if (pred[i] == c && gt[i] != c) fp += 1;
      if (pred[i] != c && gt[i] == c) fn += 1;
    }
    total += tp / (tp + fp + fn);
  }
  return total / static_cast<double>(seen.size());
}

// Scale and shift from centered moments rather than normal equations.
inline double oracle_abs_rel(const std::vector<double>& pred, const std::vector<double>& gt,
                             const std::vector<std::uint8_t>& valid, std::size_t images) {
  const std::size_t hw = gt.size() / images;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < images; ++b) {
    std::vector<double> p, g;
    for (std::size_t i = b * hw; i < (b + 1) * hw; ++i)
      if (valid[i]) {
        p.push_back(pred[i]);
        g.push_back(gt[i]);
      }
    if (p.empty()) continue;
    const double n = static_cast<double>(p.size());
    const double mp = std::accumulate(p.begin(), p.end(), 0.0) / n;
    const double mg = std::accumulate(g.begin(), g.end(), 0.0) / n;
    double cov = 0.0, var = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      cov += (p[i] - mp) * (g[i] - mg);
      var += (p[i] - mp) * (p[i] - mp);
    }
    const double s = cov / var, t = mg - s * mp;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double dp = 1.0 / std::max(s * p[i] + t, 1e-4);
      const double dg = 1.0 / g[i];
      sum += std::abs(dp - dg) / dg;
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

// Angle from atan2 of cross and dot products.
inline double oracle_a30(const std::vector<double>& pred, const std::vector<double>& gt,
                         const std::vector<std::uint8_t>& valid, std::size_t images) {
  const std::size_t hw = valid.size() / images;
  double hits = 0, count = 0;
  for (std::size_t b = 0; b < images; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      if (!valid[b * hw + i]) continue;
      double p[3], g[3];
      for (std::size_t c = 0; c < 3; ++c) {
        p[c] = pred[(b * 3 + c) * hw + i];
        g[c] = gt[(b * 3 + c) * hw + i];
      }
      const double cx = p[1] * g[2] - p[2] * g[1];
      const double cy = p[2] * g[0] - p[0] * g[2];
      const double cz = p[0] * g[1] - p[1] * g[0];
      const double dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
      const double deg = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / M_PI;
      hits += deg < 30.0 ? 1 : 0;
      count += 1;
    }
  return 100.0 * hits / count;
}

inline double oracle_top1(const std::vector<double>& logits, std::size_t n, std::size_t c,
                          const std::vector<std::int32_t>& labels) {
  double hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.begin() + static_cast<std::ptrdiff_t>(i * c);
    const auto best = std::max_element(row, row + static_cast<std::ptrdiff_t>(c)) - row;
    hits += best == labels[i] ? 1 : 0;
  }
  return 100.0 * hits / static_cast<double>(n);
}

// Stable sort of candidates by descending cosine similarity.
inline std::pair<double, double> oracle_recall(const std::vector<double>& img,
                                               const std::vector<double>& txt, std::size_t n,
                                               std::size_t d, std::size_t k) {
  auto cosine = [&](std::size_t i, std::size_t j) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t t = 0; t < d; ++t) {
      dot += img[i * d + t] * txt[j * d + t];
      na += img[i * d + t] * img[i * d + t];
      nb += txt[j * d + t] * txt[j * d + t];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };
  auto recall = [&](bool image_query) {
    double hits = 0;
    for (std::size_t q = 0; q < n; ++q) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::vector<double> sim(n);
      for (std::size_t j = 0; j < n; ++j) sim[j] = image_query ? cosine(q, j) : cosine(j, q);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
      const auto pos = std::find(order.begin(), order.end(), q) - order.begin();
      hits += static_cast<std::size_t>(pos) < k ? 1 : 0;
    }
    return 100.0 * hits / static_cast<double>(n);
  };
  return {recall(true), recall(false)};
}

struct OracleComparison {
  std::string metric;
  double worst = 0.0;  // largest |library - oracle| over all instances
};

inline std::vector<OracleComparison> compare_metric_oracles(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto idx = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  OracleComparison m{"miou", 0}, a{"abs_rel", 0}, n{"a30", 0}, t{"top1", 0}, r{"recall_at_k", 0};
  for (int it = 0; it < instances; ++it) {
    {
      const std::size_t classes = idx(2, 6), px = idx(4, 60);
      std::vector<std::int32_t> pred(px), gt(px);
      for (std::size_t i = 0; i < px; ++i) {
        pred[i] = static_cast<std::int32_t>(idx(0, classes - 1));
        gt[i] = idx(0, 9) == 0 ? 255 : static_cast<std::int32_t>(idx(0, classes - 1));
      }
      gt[0] = 0;
      m.worst = std::max(m.worst, std::abs(miou(pred, gt, classes, 255).mean -
                                           oracle_miou(pred, gt, classes, 255)));
    }
    {
      const std::size_t images = idx(1, 3), hw = idx(3, 25);
      std::vector<double> pred(images * hw), gt(images * hw);
      std::vector<std::uint8_t> valid(images * hw);
      for (std::size_t i = 0; i < gt.size(); ++i) {
        gt[i] = uni(0.05, 1.0);
        pred[i] = uni(-0.5, 0.5) * gt[i] + uni(-0.1, 0.1);
        valid[i] = idx(0, 4) != 0;
      }
      for (std::size_t b = 0; b < images; ++b) valid[b * hw] = valid[b * hw + 1] = 1;
      const double lib = abs_rel(pred, gt, valid, images);
      const double ref = oracle_abs_rel(pred, gt, valid, images);
      a.worst = std::max(a.worst, std::abs(lib - ref) / std::max(1.0, std::abs(ref)));
    }
    {
      const std::size_t images = idx(1, 3), hw = idx(2, 20);
      std::vector<double> pred(images * 3 * hw), gt(images * 3 * hw);
      std::vector<std::uint8_t> valid(images * hw);
      for (std::size_t i = 0; i < gt.size(); ++i) {
        gt[i] = uni(-1, 1);
        pred[i] = gt[i] + uni(-0.6, 0.6);
      }
      for (auto& v : valid) v = idx(0, 5) != 0;
      valid[0] = 1;
      n.worst = std::max(n.worst, std::abs(angular_accuracy(pred, gt, valid, images) -
                                           oracle_a30(pred, gt, valid, images)));
    }
    {
      const std::size_t rows = idx(1, 12), c = idx(2, 6);
      std::vector<double> logits(rows * c);
      std::vector<std::int32_t> labels(rows);
      // Coarse values so ties occur.
      for (auto& v : logits) v = static_cast<double>(idx(0, 3));
      for (auto& l : labels) l = static_cast<std::int32_t>(idx(0, c - 1));
      const Tensor lt = Tensor::from_vector({rows, c}, logits);
      t.worst = std::max(t.worst, std::abs(top1(lt, labels) - oracle_top1(logits, rows, c, labels)));
    }
    {
      const std::size_t rows = idx(2, 12), d = idx(2, 5), k = idx(1, rows);
      std::vector<double> img(rows * d), txt(rows * d);
      for (auto& v : img) v = uni(-1, 1);
      for (auto& v : txt) v = uni(-1, 1);
      const auto lib = recall_at_k(Tensor::from_vector({rows, d}, img),
                                   Tensor::from_vector({rows, d}, txt), k);
      const auto ref = oracle_recall(img, txt, rows, d, k);
      r.worst = std::max({r.worst, std::abs(lib.text_retrieval - ref.first),
                          std::abs(lib.image_retrieval - ref.second)});
    }
  }
  return {m, a, n, t, r};
}

}  // namespace mtclip::testing
