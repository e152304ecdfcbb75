#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mtclip/error.hpp"
#include "mtclip/evaluation.hpp"
#include "mtclip/rng.hpp"

namespace mtclip {

namespace {

using nlohmann::json;

std::string join_names(const std::vector<std::string>& names) {
  std::string out = "[";
  for (std::size_t i = 0; i < names.size(); ++i) out += (i ? "," : "") + names[i];
  return out + "]";
}

json recall_json(const RecallResult& r) {
  return {{"text_retrieval", r.text_retrieval}, {"image_retrieval", r.image_retrieval}};
}

RecallResult recall_from(const json& j) {
  return {j.at("text_retrieval").get<double>(), j.at("image_retrieval").get<double>()};
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  gen.validate();
  oracle.validate();
  model.validate();
  pretrain.validate();
  if (pretrain.phase != Phase::kPretrain)
    throw ConfigError("field 'phase': experiment pretraining must use phase=pretrain");
  if (gen.image_size != model.image_size)
    throw ConfigError("field 'image_size': model expects " + std::to_string(model.image_size) +
                      " but gen.image_size is " + std::to_string(gen.image_size));
  if (pretrain_scenes == 0 || probe_train_scenes == 0 || probe_eval_scenes == 0)
    throw ConfigError("field 'experiment.*_scenes': scene counts must be positive");
}

KeyValues ExperimentConfig::to_kv() const {
  KeyValues kv = gen.to_kv();
  kv.merge(oracle.to_kv());
  kv.merge(model.to_kv());
  kv.merge(pretrain.to_kv());
  kv.set("experiment.pretrain_scenes", std::to_string(pretrain_scenes));
  kv.set("experiment.probe_train_scenes", std::to_string(probe_train_scenes));
  kv.set("experiment.probe_eval_scenes", std::to_string(probe_eval_scenes));
  std::vector<std::string> names;
  for (ProbeTask t : probes) names.push_back(to_string(t));
  kv.set("experiment.probes", join_names(names));
  kv.set("experiment.probe_head", to_string(probe_head));
  return kv;
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValues& kv) {
  ExperimentConfig c;
  c.gen = GenConfig::from_kv(kv);
  c.oracle = OracleConfig::from_kv(kv);
  c.model = ModelConfig::from_kv(kv);
  if (!kv.has("image_size")) c.model.image_size = c.gen.image_size;
  c.pretrain = TrainConfig::from_kv(kv);
  c.pretrain_scenes = kv.get_uint("experiment.pretrain_scenes", c.pretrain_scenes);
  c.probe_train_scenes = kv.get_uint("experiment.probe_train_scenes", c.probe_train_scenes);
  c.probe_eval_scenes = kv.get_uint("experiment.probe_eval_scenes", c.probe_eval_scenes);
  if (kv.has("experiment.probes")) {
    c.probes.clear();
    for (const auto& n : kv.get_string_list("experiment.probes", {}))
      c.probes.push_back(parse_probe_task(n));
  }
  c.probe_head = parse_probe_head(kv.get_string("experiment.probe_head", to_string(c.probe_head)));
  return c;
}

std::uint64_t ExperimentConfig::digest() const {
  std::string text = to_kv().to_string();
  for (ProbeTask t : probes) text += TrainConfig::desk_probe(t).to_kv().to_string();
  return fnv1a64(text);
}

double ExperimentResult::probe_value(const std::string& task) const {
  for (const auto& r : probes)
    if (r.task == task) return r.value;
  return std::numeric_limits<double>::quiet_NaN();
}

std::string ExperimentResult::to_json() const {
  json j;
  j["seed"] = seed;
  j["digest"] = digest;
  j["steps"] = steps;
  j["epoch_totals"] = epoch_totals;
  j["probes"] = json::array();
  for (const auto& r : probes) j["probes"].push_back(json::parse(r.to_json()));
  j["zero_shot_top1"] = zero_shot_top1;
  j["recall1"] = recall_json(recall1);
  j["recall5"] = recall_json(recall5);
  return j.dump();
}

ExperimentResult ExperimentResult::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ExperimentResult r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.digest = j.at("digest").get<std::uint64_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.epoch_totals = j.at("epoch_totals").get<std::vector<double>>();
    for (const auto& p : j.at("probes")) r.probes.push_back(MetricReport::from_json(p.dump()));
    r.zero_shot_top1 = j.at("zero_shot_top1").get<double>();
    r.recall1 = recall_from(j.at("recall1"));
    r.recall5 = recall_from(j.at("recall5"));
    return r;
  } catch (const json::exception& e) {
    throw ReportError(std::string("malformed experiment result: ") + e.what());
  }
}

ExperimentData experiment_data(const ExperimentConfig& config, std::uint64_t seed) {
  return {generate_dataset(config.gen, config.oracle, config.pretrain_scenes,
                           derive_seed(seed, "pretrain_data")),
          generate_dataset(config.gen, config.oracle, config.probe_train_scenes,
                           derive_seed(seed, "probe_train_data")),
          generate_dataset(config.gen, config.oracle, config.probe_eval_scenes,
                           derive_seed(seed, "probe_eval_data"))};
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::filesystem::path& cache_dir, std::ostream* log) {
  config.validate();
  const std::uint64_t digest = config.digest();
  std::filesystem::path cache_file;
  if (!cache_dir.empty()) {
    cache_file = cache_dir / ("exp_" + hex(digest) + "_s" + std::to_string(seed) + ".json");
    std::ifstream in(cache_file);
    if (in) {
      std::stringstream buf;
      buf << in.rdbuf();
      try {
        ExperimentResult cached = ExperimentResult::from_json(buf.str());
        if (cached.digest == digest && cached.seed == seed) return cached;
      } catch (const ReportError&) {
        // Unreadable cache entries are recomputed.
      }
    }
  }

  const ExperimentData data = experiment_data(config, seed);
  const Vocab vocab = Vocab::builtin();
  TrainConfig train = config.pretrain;
  train.seed = seed;
  RunOptions options;
  options.log = log;
  PretrainResult pre = run_pretraining(train, config.model, data.pretrain, vocab, options);
  pre.model.discard_heads();

  ExperimentResult result;
  result.seed = seed;
  result.digest = digest;
  result.steps = pre.steps;
  for (const auto& e : pre.epochs) result.epoch_totals.push_back(e.total);
  for (ProbeTask t : config.probes) {
    TrainConfig pc = TrainConfig::desk_probe(t);
    pc.probe_head = config.probe_head;
    pc.seed = seed;
    ProbeResult pr = run_probe(pc, pre.model, data.probe_train, data.probe_eval);
    pr.report.config_digest = digest;
    if (log) *log << pr.report.to_json() << std::endl;
    result.probes.push_back(std::move(pr.report));
  }
  result.zero_shot_top1 = zero_shot_eval(pre.model, data.probe_eval, vocab).top1;
  const PairEmbeddings pairs = embed_pairs(pre.model, data.probe_eval, vocab);
  result.recall1 = recall_at_k(pairs.images, pairs.texts, 1);
  result.recall5 = recall_at_k(pairs.images, pairs.texts, 5);

  if (!cache_file.empty()) {
    std::filesystem::create_directories(cache_dir);
    const auto tmp = cache_file.string() + ".tmp";
    {
      std::ofstream out(tmp);
      out << result.to_json() << '\n';
    }
    std::filesystem::rename(tmp, cache_file);
  }
  return result;
}

std::string experts_label(std::span<const Task> experts) {
  if (experts.empty()) return "none";
  std::string out;
  for (Task t : experts) out += (out.empty() ? "" : "+") + std::string(to_string(t));
  return out;
}

std::vector<AblationRow> expert_grid() {
  using T = Task;
  const std::vector<std::vector<Task>> subsets = {
      {},
      {T::kSegmentation},
      {T::kDepth},
      {T::kSurfaceNormal},
      {T::kSegmentation, T::kDepth},
      {T::kSegmentation, T::kSurfaceNormal},
      {T::kDepth, T::kSurfaceNormal},
      {T::kSegmentation, T::kDepth, T::kSurfaceNormal}};
  std::vector<AblationRow> rows;
  for (const auto& s : subsets) rows.push_back({experts_label(s), s, 1});
  return rows;
}

std::vector<AblationRow> head_depth_grid() {
  std::vector<AblationRow> rows;
  for (std::size_t layers : {1, 3})
    rows.push_back({"head_layers=" + std::to_string(layers), all_tasks(), layers});
  return rows;
}

}  // namespace mtclip
