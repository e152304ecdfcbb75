#include <algorithm>
#include <cmath>
#include <numeric>

#include "mtclip/error.hpp"
#include "mtclip/evaluation.hpp"

namespace mtclip {

namespace {

constexpr std::size_t kChunk = 64;

std::vector<double> unit_rows(const Tensor& m) {
  const std::size_t n = m.size(0), d = m.size(1);
  const auto src = m.data();
  std::vector<double> out(src.begin(), src.end());
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += out[i * d + j] * out[i * d + j];
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
  }
  return out;
}

// Stacks per-chunk [b x d] results into one [n x d] tensor.
Tensor stack_rows(const std::vector<Tensor>& parts) {
  std::size_t n = 0, d = 0;
  std::vector<double> v;
  for (const auto& p : parts) {
    n += p.size(0);
    d = p.size(1);
    v.insert(v.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from_vector({n, d}, std::move(v));
}

Tensor embed_images(const ModelBundle& model, const ShardData& data,
                    std::span<const std::size_t> indices) {
  NoGradGuard guard;
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < indices.size(); s += kChunk) {
    const auto idx = indices.subspan(s, std::min(kChunk, indices.size() - s));
    parts.push_back(encode_image(model, images_to_tensor(data, idx)).embedding);
  }
  return stack_rows(parts);
}

}  // namespace

std::string fill_template(const std::string& tmpl, const std::string& name) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
      out += name;
      ++i;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

Tensor class_text_embeddings(const ModelBundle& model, std::span<const std::string> class_names,
                             const std::string& tmpl, const Vocab& vocab,
                             std::size_t* unk_count) {
  if (class_names.empty()) throw ArgumentError("zero-shot: empty class list");
  const std::size_t ctx = model.config().text_context_length;
  std::vector<std::int64_t> tokens;
  std::size_t unk = 0;
  for (const auto& name : class_names) {
    const auto ids = tokenize(fill_template(tmpl, name), vocab, ctx);
    unk += static_cast<std::size_t>(std::count(ids.begin(), ids.end(), Vocab::kUnk));
    tokens.insert(tokens.end(), ids.begin(), ids.end());
  }
  if (unk_count) *unk_count = unk;
  NoGradGuard guard;
  return encode_text(model, tokens, class_names.size());
}

Tensor similarity_scores(const Tensor& image_embs, const Tensor& class_embs) {
  if (image_embs.dim() != 2 || class_embs.dim() != 2 || image_embs.size(1) != class_embs.size(1))
    throw DimensionError("similarity: expected [N x d] and [C x d], got " +
                         shape_str(image_embs.shape()) + " and " + shape_str(class_embs.shape()));
  const std::size_t n = image_embs.size(0), c = class_embs.size(0), d = image_embs.size(1);
  const auto a = unit_rows(image_embs), b = unit_rows(class_embs);
  std::vector<double> s(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += a[i * d + j] * b[k * d + j];
      s[i * c + k] = acc;
    }
  return Tensor::from_vector({n, c}, std::move(s));
}

namespace {

ZeroShotResult score_predictions(const Tensor& image_embs, const Tensor& classes,
                                 std::span<const std::int32_t> labels) {
  ZeroShotResult r;
  r.predictions = argmax_rows(similarity_scores(image_embs, classes));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    ++r.evaluated;
    hits += static_cast<std::int64_t>(r.predictions[i]) == labels[i] ? 1 : 0;
  }
  if (r.evaluated == 0) throw MetricError("zero-shot: no labeled images");
  r.top1 = 100.0 * static_cast<double>(hits) / static_cast<double>(r.evaluated);
  return r;
}

}  // namespace

ZeroShotResult zero_shot_classify(const ModelBundle& model,
                                  std::span<const std::string> class_names,
                                  const std::string& tmpl, const Tensor& images,
                                  std::span<const std::int32_t> labels, const Vocab& vocab) {
  if (images.dim() != 4 || images.size(0) != labels.size())
    throw DimensionError("zero-shot: " + shape_str(images.shape()) + " images vs " +
                         std::to_string(labels.size()) + " labels");
  std::size_t unk = 0;
  const Tensor classes = class_text_embeddings(model, class_names, tmpl, vocab, &unk);
  Tensor embs;
  {
    NoGradGuard guard;
    embs = encode_image(model, images).embedding;
  }
  ZeroShotResult r = score_predictions(embs, classes, labels);
  r.unk_tokens = unk;
  return r;
}

ZeroShotResult zero_shot_eval(const ModelBundle& model, const ShardData& data,
                              const Vocab& vocab, const std::string& tmpl) {
  const std::vector<std::string> names(shape_names().begin(), shape_names().end());
  std::size_t unk = 0;
  const Tensor classes = class_text_embeddings(model, names, tmpl, vocab, &unk);
  std::vector<std::size_t> all(data.samples.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::int32_t> labels;
  for (const auto& s : data.samples) labels.push_back(dominant_shape(s));
  ZeroShotResult r = score_predictions(embed_images(model, data, all), classes, labels);
  r.unk_tokens = unk;
  return r;
}

PairEmbeddings embed_pairs(const ModelBundle& model, const ShardData& data, const Vocab& vocab) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    if (!data.samples[i].caption.empty()) idx.push_back(i);
  if (idx.empty()) throw InputError("retrieval: no captioned samples");
  const std::size_t ctx = model.config().text_context_length;
  PairEmbeddings out;
  out.images = embed_images(model, data, idx);
  std::vector<Tensor> parts;
  NoGradGuard guard;
  for (std::size_t s = 0; s < idx.size(); s += kChunk) {
    const std::size_t len = std::min(kChunk, idx.size() - s);
    std::vector<std::int64_t> tokens;
    for (std::size_t k = 0; k < len; ++k) {
      const auto ids = tokenize(data.samples[idx[s + k]].caption, vocab, ctx);
      tokens.insert(tokens.end(), ids.begin(), ids.end());
    }
    parts.push_back(encode_text(model, tokens, len));
  }
  out.texts = stack_rows(parts);
  return out;
}

RecallResult retrieval_eval(const ModelBundle& model, const ShardData& data, const Vocab& vocab,
                            std::size_t k) {
  const PairEmbeddings p = embed_pairs(model, data, vocab);
  return recall_at_k(p.images, p.texts, k);
}

}  // namespace mtclip
