#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrvit/checkpoint.hpp"
#include "nrvit/data.hpp"
#include "nrvit/eval.hpp"
#include "nrvit/pipeline.hpp"
#include "nrvit/synthetic.hpp"

namespace nrvit {

struct TextTowerConfig {
  int hidden = 64;
  int intermediate = 128;
  int layers = 2;
  int heads = 4;
  int head_dim = 16;
};

// Everything one training or evaluation run needs, loadable from a JSON
// preset. Field names match the JSON schema in configs/.
struct RunConfig {
  EncoderConfig encoder = encoder_config_tiny();
  TextTowerConfig text;
  int embed_dim = 64;
  std::optional<EncoderConfig> teacher;  // defaults to the encoder config

  std::string data_kind = "synthetic";  // "synthetic" | "manifest"
  SyntheticSpec synthetic;
  std::string train_manifest;
  std::string holdout_manifest;

  double scale = 1.0;
  long global_batch_override = 0;  // 0 keeps the plan's value
  long video_batch_override = 0;
  nlohmann::json stage_overrides = nlohmann::json::array();

  TrainOptions train;
  std::uint64_t seed = 1234;
  std::string eval_mode = "native";  // native | fixed:<S> | aspect:<L>
};

namespace detail {

inline void parse_encoder(const nlohmann::json& j, EncoderConfig& cfg) {
  cfg.hidden = j.value("hidden", cfg.hidden);
  cfg.intermediate = j.value("intermediate", cfg.intermediate);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.head_dim = j.value("head_dim", cfg.head_dim);
  cfg.patch = j.value("patch", cfg.patch);
  cfg.temporal_patch = j.value("temporal_patch", cfg.temporal_patch);
  cfg.rope_base = j.value("rope_base", cfg.rope_base);
  cfg.layerscale_init = j.value("layerscale_init", cfg.layerscale_init);
  cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
}

}  // namespace detail

// Parses a RunConfig, appending every problem found to `errors` instead of
// stopping at the first (the CLI reports them all before any compute).
inline RunConfig parse_run_config(const nlohmann::json& j,
                                  std::vector<std::string>& errors) {
  RunConfig cfg;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("encoder")) detail::parse_encoder(m.at("encoder"), cfg.encoder);
      if (m.contains("text")) {
        const auto& t = m.at("text");
        cfg.text.hidden = t.value("hidden", cfg.text.hidden);
        cfg.text.intermediate = t.value("intermediate", cfg.text.intermediate);
        cfg.text.layers = t.value("layers", cfg.text.layers);
        cfg.text.heads = t.value("heads", cfg.text.heads);
        cfg.text.head_dim = t.value("head_dim", cfg.text.head_dim);
      }
      cfg.embed_dim = m.value("embed_dim", cfg.embed_dim);
      if (m.contains("teacher")) {
        EncoderConfig t = cfg.encoder;
        detail::parse_encoder(m.at("teacher"), t);
        cfg.teacher = t;
      }
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      cfg.data_kind = d.value("kind", cfg.data_kind);
      cfg.synthetic.n_train_images =
          d.value("train_images", cfg.synthetic.n_train_images);
      cfg.synthetic.n_holdout = d.value("holdout", cfg.synthetic.n_holdout);
      cfg.synthetic.n_videos = d.value("videos", cfg.synthetic.n_videos);
      cfg.synthetic.min_side = d.value("min_side", cfg.synthetic.min_side);
      cfg.synthetic.max_side = d.value("max_side", cfg.synthetic.max_side);
      cfg.synthetic.seed = d.value("seed", cfg.synthetic.seed);
      cfg.train_manifest = d.value("train", cfg.train_manifest);
      cfg.holdout_manifest = d.value("holdout", cfg.holdout_manifest);
    }
    if (j.contains("stages")) {
      const auto& s = j.at("stages");
      cfg.scale = s.value("scale", cfg.scale);
      cfg.global_batch_override =
          s.value("global_batch", cfg.global_batch_override);
      cfg.video_batch_override =
          s.value("video_batch", cfg.video_batch_override);
      if (s.contains("overrides")) cfg.stage_overrides = s.at("overrides");
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      cfg.train.frames_max = t.value("frames_max", cfg.train.frames_max);
      cfg.train.tau = t.value("tau", cfg.train.tau);
      cfg.train.grad_clip = t.value("grad_clip", cfg.train.grad_clip);
      if (t.contains("pixel_mean"))
        for (int c = 0; c < 3; ++c)
          cfg.train.pixel_mean[static_cast<std::size_t>(c)] =
              t.at("pixel_mean").at(c).get<double>();
      if (t.contains("pixel_std"))
        for (int c = 0; c < 3; ++c)
          cfg.train.pixel_std[static_cast<std::size_t>(c)] =
              t.at("pixel_std").at(c).get<double>();
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_mode = j.value("eval_mode", cfg.eval_mode);
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string("config parse error: ") + e.what());
    return cfg;
  }

  try {
    cfg.encoder.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("encoder config: ") + e.what());
  }
  if (cfg.text.heads * cfg.text.head_dim != cfg.text.hidden)
    errors.push_back("text config: heads * head_dim must equal hidden");
  if (cfg.embed_dim < 1) errors.push_back("embed_dim must be >= 1");
  if (cfg.data_kind != "synthetic" && cfg.data_kind != "manifest")
    errors.push_back("data.kind must be 'synthetic' or 'manifest'");
  if (cfg.data_kind == "manifest" && cfg.train_manifest.empty())
    errors.push_back("data.train manifest path is required for manifest data");
  if (!(cfg.scale > 0.0 && cfg.scale <= 1.0))
    errors.push_back("stages.scale must be in (0, 1]");
  if (!cfg.stage_overrides.is_array())
    errors.push_back("stages.overrides must be an array");
  return cfg;
}

inline ResizeMode parse_resize_mode(const std::string& text) {
  if (text == "native") return ResizeNative{};
  if (text.rfind("fixed:", 0) == 0)
    return ResizeFixed{std::stoi(text.substr(6))};
  if (text.rfind("aspect:", 0) == 0)
    return ResizeNativeAspect{std::stol(text.substr(7))};
  throw std::invalid_argument(
      "unknown resize mode '" + text +
      "' (expected native, fixed:<S> or aspect:<L>)");
}

inline StagePlan build_stage_plan(const RunConfig& cfg) {
  StagePlan plan = default_stage_plan(cfg.scale);
  for (auto& s : plan.stages) {
    if (cfg.global_batch_override > 0) s.global_batch = cfg.global_batch_override;
    if (cfg.video_batch_override > 0 && s.index == 4)
      s.video_batch = cfg.video_batch_override;
  }
  for (const auto& ov : cfg.stage_overrides) {
    const int idx = ov.at("stage").get<int>();
    NRVIT_CHECK(idx >= 1 && idx <= static_cast<int>(plan.stages.size()),
                "stage override index out of range");
    auto& s = plan.stages[static_cast<std::size_t>(idx - 1)];
    s.seen_samples = ov.value("seen_samples", s.seen_samples);
    s.peak_lr = ov.value("peak_lr", s.peak_lr);
    s.min_lr = ov.value("min_lr", s.min_lr);
    s.warmup_steps = ov.value("warmup_steps", s.warmup_steps);
    s.patch_dropout = ov.value("patch_dropout", s.patch_dropout);
    s.global_batch = ov.value("global_batch", s.global_batch);
    s.video_batch = ov.value("video_batch", s.video_batch);
    s.token_min = ov.value("token_min", s.token_min);
    s.token_max = ov.value("token_max", s.token_max);
    s.lambda0 = ov.value("lambda0", s.lambda0);
    s.lambda_decay_point = ov.value("lambda_decay_point", s.lambda_decay_point);
    s.text_lr_scale = ov.value("text_lr_scale", s.text_lr_scale);
  }
  plan.validate();
  return plan;
}

template <typename T>
std::unique_ptr<CorpusInterface<T>> build_corpus(const RunConfig& cfg) {
  if (cfg.data_kind == "synthetic")
    return std::make_unique<SyntheticCorpus<T>>(cfg.synthetic);
  return std::make_unique<ManifestCorpus<T>>(cfg.train_manifest);
}

template <typename T>
const Vocabulary& corpus_vocab(const CorpusInterface<T>& corpus) {
  if (const auto* s = dynamic_cast<const SyntheticCorpus<T>*>(&corpus))
    return s->vocab();
  return dynamic_cast<const ManifestCorpus<T>&>(corpus).vocab();
}

template <typename T>
ModelState<T> build_model(const RunConfig& cfg, const Vocabulary& vocab,
                          bool with_teacher) {
  ModelState<T> m;
  Rng enc_rng(derive_seed(cfg.seed, 0xe0c));
  m.vision = init_encoder<T>(cfg.encoder, enc_rng);
  Rng txt_rng(derive_seed(cfg.seed, 0x7e7));
  m.text = init_text_tower<T>(vocab.size(), vocab.eos_id(), cfg.text.hidden,
                              cfg.text.intermediate, cfg.text.layers,
                              cfg.text.heads, cfg.text.head_dim, txt_rng);
  Rng head_rng(derive_seed(cfg.seed, 0x4ead));
  m.head = init_alignment_head<T>(cfg.encoder.hidden, cfg.text.hidden,
                                  cfg.embed_dim, head_rng);
  if (with_teacher) {
    Rng teach_rng(derive_seed(cfg.seed, 0x7eac));
    m.teacher = init_teacher<T>(cfg.teacher.value_or(cfg.encoder),
                                cfg.encoder.hidden, teach_rng);
  }
  return m;
}

inline std::string stage_checkpoint_path(const std::string& out_dir, int stage) {
  return (std::filesystem::path(out_dir) /
          ("stage" + std::to_string(stage) + ".ckpt"))
      .string();
}

// Runs the selected stages in order. Stage 1 starts from a fresh Xavier
// initialization; any other entry stage loads the previous stage's checkpoint
// from out_dir. A checkpoint and the cumulative metrics CSV are written after
// every stage boundary.
template <typename T>
std::vector<StepMetrics> run_training(const RunConfig& cfg,
                                      const std::vector<int>& stages,
                                      const std::string& out_dir) {
  NRVIT_CHECK(!stages.empty(), "run_training: no stages selected");
  for (std::size_t i = 0; i + 1 < stages.size(); ++i)
    NRVIT_CHECK(stages[i + 1] == stages[i] + 1,
                "run_training: stages must be consecutive");
  std::filesystem::create_directories(out_dir);

  const StagePlan plan = build_stage_plan(cfg);
  NRVIT_CHECK(stages.back() <= static_cast<int>(plan.stages.size()),
              "run_training: stage index beyond plan");
  auto corpus = build_corpus<T>(cfg);
  const Vocabulary& vocab = corpus_vocab<T>(*corpus);

  ModelState<T> model = build_model<T>(cfg, vocab, stages.front() == 1);
  if (stages.front() > 1) {
    const std::string prior =
        stage_checkpoint_path(out_dir, stages.front() - 1);
    if (!std::filesystem::exists(prior))
      throw std::runtime_error("missing prior checkpoint: " + prior);
    load_model(prior, model);
    NRVIT_CHECK(model.trained_through_stage == stages.front() - 1,
                "run_training: checkpoint stage does not match selection");
  }

  nlohmann::json meta;
  meta["vocab"] = vocab.words();
  meta["embed_dim"] = cfg.embed_dim;

  std::vector<StepMetrics> all_metrics;
  for (const int k : stages) {
    const StageEntry& st = plan.stages[static_cast<std::size_t>(k - 1)];
    AdamW<T> opt;  // fresh optimizer state per stage, like the staged recipe
    auto metrics = run_stage(st, model, *corpus, opt,
                             derive_seed(cfg.seed, 0x57a9e + k), cfg.train,
                             cfg.encoder);
    all_metrics.insert(all_metrics.end(), metrics.begin(), metrics.end());
    save_model(stage_checkpoint_path(out_dir, k), model, meta);
    write_metrics_csv(
        (std::filesystem::path(out_dir) / "metrics.csv").string(),
        all_metrics);
    if (k == 1) model.teacher.reset();  // distillation ends with stage 1
  }
  return all_metrics;
}

// ---------------------------------------------------------------------------
// Evaluation suites

template <typename T>
struct EvalData {
  std::vector<VisualSample<T>> images;
  std::vector<std::vector<int>> captions;
  std::vector<long> labels;  // shape class when known, else -1
  std::vector<std::string> ids;
};

template <typename T>
EvalData<T> holdout_data(const RunConfig& cfg, const Vocabulary& vocab) {
  EvalData<T> data;
  if (cfg.data_kind == "synthetic") {
    SyntheticCorpus<T> corpus(cfg.synthetic);
    for (const auto& id : corpus.holdout_ids()) {
      data.images.push_back(corpus.load(id));
      data.captions.push_back(corpus.caption_tokens(id));
      data.labels.push_back(corpus.shape_label(id));
      data.ids.push_back(id);
    }
  } else {
    NRVIT_CHECK(!cfg.holdout_manifest.empty(),
                "eval: data.holdout manifest path is required");
    ManifestCorpus<T> corpus(read_manifest(cfg.holdout_manifest), vocab);
    for (const auto& e : corpus.entries()) {
      data.images.push_back(corpus.load(e.id));
      data.captions.push_back(corpus.caption_tokens(e.id));
      data.labels.push_back(-1);
      data.ids.push_back(e.id);
    }
  }
  return data;
}

struct EvalRow {
  std::string suite;
  std::string metric;
  double value = 0.0;
};

inline void write_eval_csv(const std::string& path,
                           const std::vector<EvalRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open results file " + path);
  f << "suite,metric,value\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.10g\n", r.suite.c_str(),
                  r.metric.c_str(), r.value);
    f << buf;
  }
}

struct SweepRow {
  std::string mode;
  long requested = 0;
  long tokens_min = 0;
  long tokens_max = 0;
  double accuracy = 0.0;
};

inline void write_sweep_csv(const std::string& path,
                            const std::vector<SweepRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open sweep file " + path);
  f << "mode,requested_tokens,tokens_min,tokens_max,zero_shot_accuracy\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%ld,%ld,%ld,%.10g\n", r.mode.c_str(),
                  r.requested, r.tokens_min, r.tokens_max, r.accuracy);
    f << buf;
  }
}

}  // namespace nrvit
