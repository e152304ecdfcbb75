#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mtclip/error.hpp"
#include "mtclip/evaluation.hpp"

using namespace mtclip;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string vocab;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", o.config, "key=value config file");
    cmd->add_option("--set", o.overrides, "override a config entry (key=value)");
  }
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_option("--vocab", o.vocab, "vocabulary file (default: builtin)");
}

KeyValues load_config(const CommonOptions& o) {
  KeyValues kv;
  if (!o.config.empty()) kv = KeyValues::load(o.config);
  for (const auto& entry : o.overrides) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--set expects key=value, got '" + entry + "'");
    kv.set(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return kv;
}

Vocab load_vocab(const CommonOptions& o) {
  return o.vocab.empty() ? Vocab::builtin() : Vocab::load(o.vocab);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out << text;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// gen-data

struct GenArgs {
  CommonOptions common;
  std::size_t count = 100;
  std::string out;
};

int gen_data(const GenArgs& a) {
  const KeyValues kv = load_config(a.common);
  const GenConfig gen = GenConfig::from_kv(kv);
  const OracleConfig oracle = OracleConfig::from_kv(kv);
  const std::uint64_t seed = a.common.seed.value_or(0);
  const ShardData data = generate_dataset(gen, oracle, a.count, seed);
  write_shard(data, a.out);
  write_manifest(a.out, gen, oracle, seed, data);
  std::size_t captioned = 0;
  for (const auto& s : data.samples) captioned += s.caption.empty() ? 0 : 1;
  std::cout << json{{"command", "gen-data"},
                    {"shard", a.out},
                    {"manifest", manifest_path(a.out).string()},
                    {"count", data.samples.size()},
                    {"captioned", captioned},
                    {"image_size", data.image_size},
                    {"pseudo_class_pixels", pseudo_class_counts(data)},
                    {"seed", seed}}
                   .dump()
            << '\n';
  return 0;
}

// pretrain

struct PretrainArgs {
  CommonOptions common;
  std::string data;
  std::string out;
  bool log_steps = false;
  std::size_t max_steps = 0;
};

int pretrain(const PretrainArgs& a) {
  const KeyValues kv = load_config(a.common);
  TrainConfig train = TrainConfig::from_kv(kv);
  if (train.phase != Phase::kPretrain) throw ConfigError("field 'phase': pretrain needs phase=pretrain");
  if (a.common.seed) train.seed = *a.common.seed;
  ModelConfig model = ModelConfig::from_kv(kv);
  const ShardData data = read_shard(a.data);
  if (!kv.has("image_size")) model.image_size = data.image_size;
  RunOptions options;
  options.log = &std::cout;
  options.log_steps = a.log_steps;
  options.max_steps = a.max_steps;
  PretrainResult r = run_pretraining(train, model, data, load_vocab(a.common), options);
  save_checkpoint(r.model, a.out, r.steps, train.seed);
  std::cout << json{{"command", "pretrain"},
                    {"checkpoint", a.out},
                    {"steps", r.steps},
                    {"config_digest", r.model.config().digest()},
                    {"seed", train.seed}}
                   .dump()
            << '\n';
  return 0;
}

// probe

struct ProbeArgs {
  CommonOptions common;
  std::string checkpoint;
  std::string train;
  std::string eval;
  std::string report_out;
  std::string csv;
};

int probe(const ProbeArgs& a) {
  KeyValues kv = load_config(a.common);
  if (!kv.has("phase")) kv.set("phase", "probe");
  TrainConfig config = TrainConfig::from_kv(kv);
  if (config.phase != Phase::kProbe) throw ConfigError("field 'phase': probe needs phase=probe");
  if (a.common.seed) config.seed = *a.common.seed;
  ModelBundle model = load_checkpoint(a.checkpoint);
  model.discard_heads();
  const ProbeResult r = run_probe(config, model, read_shard(a.train), read_shard(a.eval));
  const std::string line = r.report.to_json();
  std::cout << line << '\n';
  if (!a.report_out.empty()) write_text(a.report_out, line + "\n");
  if (!a.csv.empty()) {
    std::ostringstream out;
    out << "class_id,class,value\n";
    const auto names = seg_class_names(r.report.per_class.size());
    for (std::size_t c = 0; c < r.report.per_class.size(); ++c) {
      out << c << ',' << names[c] << ',';
      if (std::isfinite(r.report.per_class[c])) out << format_double(r.report.per_class[c]);
      out << '\n';
    }
    write_text(a.csv, out.str());
  }
  return 0;
}

// zeroshot / retrieval

struct ZeroShotArgs {
  CommonOptions common;
  std::string checkpoint;
  std::string data;
  std::string tmpl = kZeroShotTemplate;
  std::vector<std::string> classes;
};

int zeroshot(const ZeroShotArgs& a) {
  ModelBundle model = load_checkpoint(a.checkpoint);
  model.discard_heads();
  const ShardData data = read_shard(a.data);
  const Vocab vocab = load_vocab(a.common);
  std::vector<std::string> classes = a.classes;
  if (classes.empty()) classes.assign(shape_names().begin(), shape_names().end());
  // Scenes are labeled by their dominant shape, matched to the class list by name.
  std::vector<std::int32_t> labels;
  for (const auto& s : data.samples) {
    const std::int32_t shape = dominant_shape(s);
    std::int32_t label = -1;
    for (std::size_t c = 0; shape >= 0 && c < classes.size(); ++c)
      if (classes[c] == shape_names()[static_cast<std::size_t>(shape)]) {
        label = static_cast<std::int32_t>(c);
        break;
      }
    labels.push_back(label);
  }
  std::vector<std::size_t> idx(data.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto r =
      zero_shot_classify(model, classes, a.tmpl, images_to_tensor(data, idx), labels, vocab);
  if (r.unk_tokens > 0)
    std::cerr << "warning: " << r.unk_tokens << " class-prompt tokens are outside the vocabulary\n";
  std::cout << json{{"command", "zeroshot"},
                    {"template", a.tmpl},
                    {"classes", classes},
                    {"top1", r.top1},
                    {"evaluated", r.evaluated},
                    {"unk_tokens", r.unk_tokens},
                    {"config_digest", model.config().digest()},
                    {"seed", a.common.seed.value_or(0)}}
                   .dump()
            << '\n';
  return 0;
}

struct RetrievalArgs {
  CommonOptions common;
  std::string checkpoint;
  std::string data;
  std::vector<std::size_t> ks = {1, 5, 10};
};

int retrieval(const RetrievalArgs& a) {
  ModelBundle model = load_checkpoint(a.checkpoint);
  model.discard_heads();
  const PairEmbeddings pairs = embed_pairs(model, read_shard(a.data), load_vocab(a.common));
  for (std::size_t k : a.ks) {
    const RecallResult r = recall_at_k(pairs.images, pairs.texts, k);
    std::cout << json{{"command", "retrieval"},
                      {"k", k},
                      {"pairs", pairs.images.size(0)},
                      {"text_retrieval", r.text_retrieval},
                      {"image_retrieval", r.image_retrieval},
                      {"seed", a.common.seed.value_or(0)}}
                     .dump()
              << '\n';
  }
  return 0;
}

// report-delta

struct DeltaArgs {
  CommonOptions common;
  std::string a;
  std::string b;
  std::string manifest;
  std::string out;
};

MetricReport read_report(const std::string& path) {
  std::string text = read_text(path);
  const auto nl = text.find('\n');
  if (nl != std::string::npos) text.resize(nl);
  return MetricReport::from_json(text);
}

int report_delta(const DeltaArgs& a) {
  const auto rows = classwise_delta_report(read_report(a.a), read_report(a.b),
                                           manifest_class_pixels(a.manifest));
  write_text(a.out, delta_report_csv(rows));
  return 0;
}

// ablate

struct AblateArgs {
  CommonOptions common;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string grid = "all";
  std::string cache = "mtclip_cache";
  std::string out_dir = ".";
};

const std::vector<std::pair<std::string, std::string>> kColumns = {
    {"segmentation", "seg_miou"},
    {"depth", "depth_abs_rel"},
    {"surface_normal", "normal_a30"},
    {"classification", "cls_top1"}};

std::map<std::string, double> row_metrics(const ExperimentResult& r) {
  std::map<std::string, double> m;
  for (const auto& [task, col] : kColumns) m[col] = r.probe_value(task);
  m["zeroshot_top1"] = r.zero_shot_top1;
  m["text_r1"] = r.recall1.text_retrieval;
  m["image_r1"] = r.recall1.image_retrieval;
  return m;
}

std::string run_grid(const std::string& name, const std::vector<AblationRow>& rows,
                     const ExperimentConfig& base, const AblateArgs& a) {
  std::vector<std::string> cols;
  for (const auto& [task, col] : kColumns) cols.push_back(col);
  for (const char* c : {"zeroshot_top1", "text_r1", "image_r1"}) cols.push_back(c);
  std::ostringstream csv;
  csv << "row,experts,head_layers,seeds";
  for (const auto& c : cols) csv << ',' << c;
  csv << '\n';
  for (const auto& row : rows) {
    ExperimentConfig cfg = base;
    cfg.pretrain.enabled_experts = row.experts;
    cfg.model.head_layers = row.head_layers;
    std::map<std::string, double> sums;
    std::map<std::string, std::size_t> counts;
    for (std::uint64_t seed : a.seeds) {
      const ExperimentResult r = run_experiment(cfg, seed, a.cache, &std::cerr);
      const auto m = row_metrics(r);
      json j{{"grid", name},   {"row", row.label}, {"head_layers", row.head_layers},
             {"seed", seed},   {"steps", r.steps}, {"config_digest", r.digest}};
      for (const auto& [k, v] : m) {
        j[k] = finite_or_null(v);
        if (std::isfinite(v)) {
          sums[k] += v;
          ++counts[k];
        }
      }
      std::cout << j.dump() << std::endl;
    }
    csv << row.label << ',' << experts_label(row.experts) << ',' << row.head_layers << ','
        << a.seeds.size();
    for (const auto& c : cols) {
      csv << ',';
      if (counts[c]) csv << format_double(sums[c] / static_cast<double>(counts[c]));
    }
    csv << '\n';
  }
  return csv.str();
}

int ablate(const AblateArgs& a) {
  const ExperimentConfig base = ExperimentConfig::from_kv(load_config(a.common));
  base.validate();
  std::filesystem::create_directories(a.out_dir);
  if (a.grid == "experts" || a.grid == "all") {
    const auto path = std::filesystem::path(a.out_dir) / "ablation_experts.csv";
    write_text(path.string(), run_grid("experts", expert_grid(), base, a));
    std::cerr << "wrote " << path.string() << '\n';
  }
  if (a.grid == "heads" || a.grid == "all") {
    const auto path = std::filesystem::path(a.out_dir) / "ablation_head_depth.csv";
    write_text(path.string(), run_grid("head_depth", head_depth_grid(), base, a));
    std::cerr << "wrote " << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task CLIP training and evaluation at desk scale"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "render scenes and oracle pseudo-labels into a shard");
  add_common(g, gen.common);
  g->add_option("--count", gen.count, "number of scenes");
  g->add_option("--out", gen.out, "output shard path")->required();

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "train CLIP with the enabled task experts");
  add_common(p, pre.common);
  p->add_option("--data", pre.data, "pretraining shard")->required();
  p->add_option("--out", pre.out, "checkpoint path")->required();
  p->add_flag("--log-steps", pre.log_steps, "log every optimizer step");
  p->add_option("--max-steps", pre.max_steps, "stop after this many steps");

  ProbeArgs pr;
  auto* pc = app.add_subcommand("probe", "train a probe on frozen features and report its metric");
  add_common(pc, pr.common);
  pc->add_option("--checkpoint", pr.checkpoint, "pretrained checkpoint")->required();
  pc->add_option("--train", pr.train, "probe training shard")->required();
  pc->add_option("--eval", pr.eval, "probe evaluation shard")->required();
  pc->add_option("--report-out", pr.report_out, "write the metric report here");
  pc->add_option("--csv", pr.csv, "per-class values as CSV");

  ZeroShotArgs zs;
  auto* z = app.add_subcommand("zeroshot", "prompt-based classification by dominant shape");
  add_common(z, zs.common, false);
  z->add_option("--checkpoint", zs.checkpoint, "pretrained checkpoint")->required();
  z->add_option("--data", zs.data, "evaluation shard")->required();
  z->add_option("--template", zs.tmpl, "prompt template with {} for the class name");
  z->add_option("--classes", zs.classes, "class names (default: all shapes)")->delimiter(',');

  RetrievalArgs rt;
  auto* r = app.add_subcommand("retrieval", "image-caption recall@k");
  add_common(r, rt.common, false);
  r->add_option("--checkpoint", rt.checkpoint, "pretrained checkpoint")->required();
  r->add_option("--data", rt.data, "evaluation shard")->required();
  r->add_option("--k", rt.ks, "k values")->delimiter(',');

  DeltaArgs dl;
  auto* d = app.add_subcommand("report-delta", "class-wise IoU differences b - a");
  add_common(d, dl.common, false);
  d->add_option("--a", dl.a, "baseline metric report")->required();
  d->add_option("--b", dl.b, "compared metric report")->required();
  d->add_option("--manifest", dl.manifest, "shard manifest with pseudo-label class counts")
      ->required();
  d->add_option("--out", dl.out, "CSV path (default: stdout)");

  AblateArgs ab;
  auto* ac = app.add_subcommand("ablate", "expert-subset and head-depth grids");
  add_common(ac, ab.common);
  ac->add_option("--seeds", ab.seeds, "seeds to average")->delimiter(',');
  ac->add_option("--grid", ab.grid, "experts, heads or all")
      ->check(CLI::IsMember({"experts", "heads", "all"}));
  ac->add_option("--cache", ab.cache, "experiment result cache directory");
  ac->add_option("--out-dir", ab.out_dir, "directory for the CSV tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[usage]: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*g) return gen_data(gen);
    if (*p) return pretrain(pre);
    if (*pc) return probe(pr);
    if (*z) return zeroshot(zs);
    if (*r) return retrieval(rt);
    if (*d) return report_delta(dl);
    if (*ac) {
      if (ab.common.seed) ab.seeds = {*ab.common.seed};
      return ablate(ab);
    }
  } catch (const Error& e) {
    std::cerr << "error[" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
