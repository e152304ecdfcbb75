#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "mtclip/error.hpp"
#include "mtclip/evaluation.hpp"
#include "support/metric_oracles.hpp"

using namespace mtclip;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 1;
  c.num_heads = 2;
  c.shared_dim = 8;
  c.text_context_length = 12;
  c.psp_bin_sizes = {1, 2};
  return c;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.gen.image_size = 32;
  c.gen.min_caption_area = 4;
  c.model = tiny_model();
  c.pretrain.epochs = 1;
  c.pretrain.batch_size = 8;
  c.pretrain.schedule.warmup_steps = 1;
  c.pretrain_scenes = 16;
  c.probe_train_scenes = 12;
  c.probe_eval_scenes = 10;
  return c;
}

// Unit normals rotated by `deg` about an axis orthogonal to each.
void rotated_normals(double deg, std::vector<double>& pred, std::vector<double>& gt,
                     std::size_t hw) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  pred.assign(3 * hw, 0);
  gt.assign(3 * hw, 0);
  const double a = deg * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < hw; ++i) {
    double g[3] = {u(rng), u(rng), u(rng)};
    double ng = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    for (double& v : g) v /= ng;
    // Any vector orthogonal to g.
    double o[3] = {g[1], -g[0], 0.0};
    if (std::abs(g[2]) > 0.9) o[0] = 0, o[1] = g[2], o[2] = -g[1];
    const double no = std::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
    for (std::size_t c = 0; c < 3; ++c) {
      gt[c * hw + i] = g[c];
      pred[c * hw + i] = std::cos(a) * g[c] + std::sin(a) * o[c] / no;
    }
  }
}

}  // namespace

TEST_CASE("metrics match brute-force oracles on random instances") {
  for (const auto& c : testing::compare_metric_oracles(50, 2024)) {
    INFO(c.metric << " worst " << c.worst);
    CHECK(c.worst < 1e-9);
  }
}

TEST_CASE("miou worked examples") {
  const std::vector<std::int32_t> gt{0, 0, 1, 1};
  CHECK(miou(gt, gt, 3).mean == doctest::Approx(1.0));
  const auto r = miou(std::vector<std::int32_t>{0, 0, 0, 0}, gt, 3);
  CHECK(r.per_class[0] == doctest::Approx(0.5));
  CHECK(r.per_class[1] == doctest::Approx(0.0));
  CHECK(std::isnan(r.per_class[2]));
  CHECK(r.mean == doctest::Approx(0.25));
}

TEST_CASE("streaming confusion accumulation equals the concatenated split") {
  std::mt19937_64 rng(9);
  std::vector<std::int32_t> pred(300), gt(300);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred[i] = static_cast<std::int32_t>(rng() % 5);
    gt[i] = rng() % 7 == 0 ? 255 : static_cast<std::int32_t>(rng() % 5);
  }
  ConfusionMatrix whole(5), a(5), b(5), c(5);
  whole.add(pred, gt);
  const std::span<const std::int32_t> p(pred), g(gt);
  a.add(p.subspan(0, 70), g.subspan(0, 70));
  b.add(p.subspan(70, 150), g.subspan(70, 150));
  c.add(p.subspan(220), g.subspan(220));
  ConfusionMatrix merged(5);
  merged.merge(c);
  merged.merge(a);
  merged.merge(b);
  CHECK(merged.total() == whole.total());
  CHECK(merged.mean_iou() == whole.mean_iou());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(merged.at(i, j) == whole.at(i, j));

  std::vector<double> dp(200), dg(200);
  std::vector<std::uint8_t> v(200, 1);
  for (std::size_t i = 0; i < 200; ++i) {
    dg[i] = 0.1 + static_cast<double>(rng() % 90) / 100.0;
    dp[i] = dg[i] * 0.7 + 0.05 * static_cast<double>(rng() % 3);
  }
  auto first = abs_rel_accumulate(std::span(dp).subspan(0, 100), std::span(dg).subspan(0, 100),
                                  std::span(v).subspan(0, 100), 2);
  first.merge(abs_rel_accumulate(std::span(dp).subspan(100), std::span(dg).subspan(100),
                                 std::span(v).subspan(100), 2));
  const auto all = abs_rel_accumulate(dp, dg, v, 4);
  CHECK(first.count == all.count);
  CHECK(first.sum == doctest::Approx(all.sum).epsilon(1e-12));
}

TEST_CASE("abs_rel worked examples") {
  const std::vector<double> gt{0.2, 0.5, 0.9, 0.4};
  const std::vector<std::uint8_t> valid(4, 1);
  CHECK(abs_rel(gt, gt, valid, 1) == doctest::Approx(0.0));
  const std::vector<double> depth{5.0, 2.0, 1.25, 2.5};
  std::vector<double> doubled;
  for (double d : depth) doubled.push_back(2.0 * d);
  const auto acc = depth_abs_rel_accumulate(doubled, depth, valid);
  CHECK(acc.sum / static_cast<double>(acc.count) == doctest::Approx(1.0));
  // Affine disparity errors vanish after alignment.
  std::vector<double> affine;
  for (double d : gt) affine.push_back(3.0 * d - 0.4);
  CHECK(abs_rel(affine, gt, valid, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(abs_rel(gt, gt, std::vector<std::uint8_t>(4, 0), 1), MetricError);
}

TEST_CASE("angular accuracy on constructed rotations") {
  std::vector<double> pred, gt;
  const std::size_t hw = 64;
  const std::vector<std::uint8_t> valid(hw, 1);
  rotated_normals(0.0, pred, gt, hw);
  CHECK(angular_accuracy(gt, gt, valid, 1) == doctest::Approx(100.0));
  std::vector<double> neg;
  for (double v : gt) neg.push_back(-v);
  CHECK(angular_accuracy(neg, gt, valid, 1) == doctest::Approx(0.0));
  rotated_normals(29.0, pred, gt, hw);
  CHECK(angular_accuracy(pred, gt, valid, 1) == doctest::Approx(100.0));
  rotated_normals(31.0, pred, gt, hw);
  CHECK(angular_accuracy(pred, gt, valid, 1) == doctest::Approx(0.0));
  CHECK_THROWS_AS(angular_accuracy(pred, gt, std::vector<std::uint8_t>(hw, 0), 1), MetricError);
}

TEST_CASE("top1 worked examples and tie rule") {
  const std::vector<std::int32_t> labels{2, 0, 1};
  std::vector<double> hot(9, 0.0), wrong(9, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    hot[i * 3 + static_cast<std::size_t>(labels[i])] = 1.0;
    wrong[i * 3 + (static_cast<std::size_t>(labels[i]) + 1) % 3] = 1.0;
  }
  CHECK(top1(Tensor::from_vector({3, 3}, hot), labels) == doctest::Approx(100.0));
  CHECK(top1(Tensor::from_vector({3, 3}, wrong), labels) == doctest::Approx(0.0));
  const std::vector<std::int32_t> zero{0};
  CHECK(top1(Tensor::from_vector({1, 4}, {0.3, 0.3, 0.3, 0.3}), zero) == doctest::Approx(100.0));
}

TEST_CASE("recall_at_k worked examples") {
  const std::size_t n = 6;
  std::vector<double> eye(n * n, 0.0), neg(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    eye[i * n + i] = 1.0;
    neg[i * n + i] = -1.0;
  }
  const Tensor img = Tensor::from_vector({n, n}, eye);
  const auto same = recall_at_k(img, img, 1);
  CHECK(same.text_retrieval == doctest::Approx(100.0));
  CHECK(same.image_retrieval == doctest::Approx(100.0));
  // Every match is the least similar candidate.
  const Tensor rev = Tensor::from_vector({n, n}, neg);
  for (std::size_t k : {1, 5}) {
    CHECK(recall_at_k(img, rev, k).text_retrieval == doctest::Approx(0.0));
    CHECK(recall_at_k(img, rev, k).image_retrieval == doctest::Approx(0.0));
  }
  CHECK(recall_at_k(img, rev, n).text_retrieval == doctest::Approx(100.0));
  CHECK_THROWS_AS(recall_at_k(img, rev, n + 1), ArgumentError);
  CHECK_THROWS_AS(recall_at_k(img, rev, 0), ArgumentError);
}

TEST_CASE("recall_at_k is monotone in k") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> a(12 * 4), b(12 * 4);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    const Tensor ta = Tensor::from_vector({12, 4}, a), tb = Tensor::from_vector({12, 4}, b);
    RecallResult prev;
    for (std::size_t k = 1; k <= 12; ++k) {
      const auto r = recall_at_k(ta, tb, k);
      CHECK(r.text_retrieval >= prev.text_retrieval);
      CHECK(r.image_retrieval >= prev.image_retrieval);
      prev = r;
    }
  }
}

TEST_CASE("zero-shot classification symmetries") {
  const ModelBundle model = build_model(tiny_model(), 3);
  const Vocab vocab = Vocab::builtin();
  GenConfig gen;
  gen.image_size = 32;
  const ShardData data = generate_dataset(gen, OracleConfig{}, 12, 4);
  std::vector<std::size_t> idx(12);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor images = images_to_tensor(data, idx);
  std::vector<std::int32_t> labels;
  for (const auto& s : data.samples) labels.push_back(dominant_shape(s));

  const std::vector<std::string> names(shape_names().begin(), shape_names().end());
  const auto base = zero_shot_classify(model, names, kZeroShotTemplate, images, labels, vocab);
  CHECK(base.unk_tokens == 0);

  SUBCASE("class-list permutation relabels predictions") {
    const std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
    std::vector<std::string> shuffled;
    for (std::size_t p : perm) shuffled.push_back(names[p]);
    std::vector<std::int32_t> dummy(12, -1);
    dummy[0] = 0;
    const auto r = zero_shot_classify(model, shuffled, kZeroShotTemplate, images, dummy, vocab);
    for (std::size_t i = 0; i < 12; ++i) CHECK(perm[r.predictions[i]] == base.predictions[i]);
  }
  SUBCASE("argmax ignores positive rescaling of scores") {
    const Tensor classes = class_text_embeddings(model, names, kZeroShotTemplate, vocab);
    Tensor embs;
    {
      NoGradGuard guard;
      embs = encode_image(model, images).embedding;
    }
    const Tensor s = similarity_scores(embs, classes);
    std::vector<double> scaled(s.data().begin(), s.data().end());
    for (double& v : scaled) v *= 7.5;
    CHECK(argmax_rows(Tensor::from_vector(s.shape(), scaled)) == base.predictions);
  }
  SUBCASE("duplicate class names tie toward the lower index") {
    const std::vector<std::string> dup{"circle", "circle", "square"};
    const Tensor e = class_text_embeddings(model, dup, kZeroShotTemplate, vocab);
    for (std::size_t j = 0; j < e.size(1); ++j) CHECK(e.at({0, j}) == e.at({1, j}));
    const auto r = zero_shot_classify(model, dup, kZeroShotTemplate, images, labels, vocab);
    for (std::size_t p : r.predictions) CHECK(p != 1);
  }
  SUBCASE("unknown class words go through UNK") {
    const std::vector<std::string> odd{"circle", "pentagon"};
    const auto r = zero_shot_classify(model, odd, kZeroShotTemplate, images, labels, vocab);
    CHECK(r.unk_tokens == 1);
  }
  CHECK(fill_template("a photo of a {}", "star") == "a photo of a star");
}

TEST_CASE("class-wise delta report") {
  MetricReport a;
  a.task = "segmentation";
  a.metric = "miou";
  a.per_class = {50.0, 20.0, std::nan(""), 10.0};
  MetricReport b = a;
  const std::vector<std::uint64_t> freq{100, 20, 0, 5};

  for (const auto& r : classwise_delta_report(a, a, freq))
    if (!std::isnan(r.iou_a)) CHECK(r.delta == 0.0);

  b.per_class = {55.5, 12.0, std::nan(""), 10.25};
  const auto rows = classwise_delta_report(a, b, freq);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].delta == doctest::Approx(5.5));
  CHECK(rows[1].delta == doctest::Approx(-8.0));
  CHECK(std::isnan(rows[2].delta));
  CHECK(rows[3].delta == doctest::Approx(0.25));
  CHECK(rows[1].name == "circle");
  const std::string csv = delta_report_csv(rows);
  CHECK(csv.rfind("class_id,class,iou_a,iou_b,delta,frequency\n", 0) == 0);
  CHECK(csv.find("2,square,,,,0\n") != std::string::npos);

  MetricReport c = b;
  c.per_class.pop_back();
  CHECK_THROWS_AS(classwise_delta_report(a, c, freq), ReportError);
  c = b;
  c.task = "depth";
  CHECK_THROWS_AS(classwise_delta_report(a, c, freq), ReportError);
  CHECK_THROWS_AS(classwise_delta_report(a, b, std::vector<std::uint64_t>{1, 2}), ReportError);
}

TEST_CASE("frequency column sums to the labeled pixel total") {
  GenConfig gen;
  gen.image_size = 24;
  const ShardData data = generate_dataset(gen, OracleConfig{}, 9, 31);
  const auto dir = std::filesystem::temp_directory_path() / "mtclip_eval_freq";
  std::filesystem::create_directories(dir);
  const auto shard = dir / "s.bin";
  write_shard(data, shard);
  write_manifest(shard, gen, OracleConfig{}, 31, data);
  const auto freq = manifest_class_pixels(manifest_path(shard));
  REQUIRE(freq.size() == kNumSegClasses);
  MetricReport a;
  a.task = "segmentation";
  a.metric = "miou";
  a.per_class.assign(kNumSegClasses, 1.0);
  const auto rows = classwise_delta_report(a, a, freq);
  std::uint64_t sum = 0;
  for (const auto& r : rows) sum += r.frequency;
  CHECK(sum == 9u * 24u * 24u);
  std::filesystem::remove_all(dir);
}

TEST_CASE("experiment config round trip and digest") {
  const ExperimentConfig c = tiny_experiment();
  const ExperimentConfig back = ExperimentConfig::from_kv(KeyValues::parse(c.to_kv().to_string()));
  CHECK(back.to_kv().to_string() == c.to_kv().to_string());
  CHECK(back.digest() == c.digest());
  ExperimentConfig d = c;
  d.pretrain.enabled_experts = {Task::kDepth};
  CHECK(d.digest() != c.digest());
  d = c;
  d.model.head_layers = 3;
  CHECK(d.digest() != c.digest());
  d = c;
  d.model.image_size = 64;
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("experiment runs, caches and replays") {
  const auto dir = std::filesystem::temp_directory_path() / "mtclip_eval_cache";
  std::filesystem::remove_all(dir);
  const ExperimentConfig c = tiny_experiment();
  const auto first = run_experiment(c, 5, dir);
  CHECK(first.steps == 2);
  CHECK(first.probes.size() == 4);
  CHECK(std::isfinite(first.probe_value("segmentation")));
  CHECK(std::isfinite(first.probe_value("classification")));
  CHECK(std::isnan(first.probe_value("unknown")));
  CHECK(first.zero_shot_top1 >= 0.0);
  CHECK(first.recall5.text_retrieval >= first.recall1.text_retrieval);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.is_regular_file();
  CHECK(files == 1);
  const auto again = run_experiment(c, 5, dir);
  CHECK(again.to_json() == first.to_json());
  const auto fresh = run_experiment(c, 5, {});
  CHECK(fresh.probe_value("depth") == doctest::Approx(first.probe_value("depth")).epsilon(1e-12));
  CHECK(ExperimentResult::from_json(first.to_json()).to_json() == first.to_json());
  CHECK_THROWS_AS(ExperimentResult::from_json("{}"), ReportError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation grids") {
  const auto rows = expert_grid();
  REQUIRE(rows.size() == 8);
  CHECK(rows.front().label == "none");
  CHECK(rows.back().label == "segmentation+depth+surface_normal");
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) CHECK(rows[i].experts != rows[j].experts);
  const auto heads = head_depth_grid();
  REQUIRE(heads.size() == 2);
  CHECK(heads[0].head_layers == 1);
  CHECK(heads[1].head_layers == 3);
}

TEST_CASE("metric report JSON keeps undefined classes") {
  MetricReport r;
  r.task = "segmentation";
  r.metric = "miou";
  r.value = 12.5;
  r.per_class = {25.0, std::nan(""), 0.0};
  r.sample_count = 40;
  r.config_digest = 0xfeedbeefcafeULL;
  r.seed = 3;
  const MetricReport back = MetricReport::from_json(r.to_json());
  CHECK(back.value == r.value);
  CHECK(std::isnan(back.per_class[1]));
  CHECK(back.config_digest == r.config_digest);
  CHECK_THROWS_AS(MetricReport::from_json("not json"), ReportError);
}
