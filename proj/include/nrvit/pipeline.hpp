#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nrvit/checkpoint.hpp"
#include "nrvit/ingest.hpp"
#include "nrvit/model.hpp"
#include "nrvit/objectives.hpp"
#include "nrvit/packing.hpp"

namespace nrvit {

enum class ResolutionPolicy { Fixed224, Native };

// One row of the four-stage training strategy: data modality, resolution
// policy, token range, freeze flags, loss set, sample budget and LR schedule.
struct StageEntry {
  int index = 1;
  bool uses_images = true;
  bool uses_videos = false;
  ResolutionPolicy resolution = ResolutionPolicy::Fixed224;
  long token_min = 256;
  long token_max = 256;
  bool vision_trainable = true;
  bool text_trainable = false;
  bool has_teacher = false;
  long seen_samples = 0;
  double peak_lr = 1e-3;
  double min_lr = 0.0;
  double text_lr_scale = 1.0;
  long warmup_steps = 2000;
  double patch_dropout = 0.0;
  long global_batch = 32768;
  long video_batch = 0;
  double lambda0 = 1.0;
  long lambda_decay_point = 0;
};

struct StagePlan {
  std::vector<StageEntry> stages;

  void validate() const {
    NRVIT_CHECK(!stages.empty(), "StagePlan: no stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      NRVIT_CHECK(s.index == static_cast<int>(i) + 1,
                  "StagePlan: stages must be ordered 1..N");
      NRVIT_CHECK(!s.has_teacher || s.index == 1,
                  "StagePlan: only stage 1 carries a teacher");
      NRVIT_CHECK(!s.text_trainable || s.index == 2,
                  "StagePlan: text is trainable only in stage 2");
      NRVIT_CHECK(!s.uses_videos || s.index == 4,
                  "StagePlan: only stage 4 uses videos");
      NRVIT_CHECK(s.seen_samples > 0 && s.global_batch > 0,
                  "StagePlan: budgets and batch sizes must be positive");
    }
  }
};

// Reference four-stage plan with sample budgets (and the stage-1 lambda decay
// point) multiplied by scale_factor. Warmup shrinks with the schedule length
// so scaled-down runs still reach their peak learning rate; at scale 1 the
// effective warmup equals the nominal value.
inline StagePlan default_stage_plan(double scale_factor = 1.0) {
  NRVIT_CHECK(scale_factor > 0.0 && scale_factor <= 1.0,
              "default_stage_plan: scale factor must be in (0, 1]");
  auto scaled = [&](double samples) {
    return std::max<long>(1, static_cast<long>(std::llround(samples * scale_factor)));
  };
  StagePlan plan;
  StageEntry s1;
  s1.index = 1;
  s1.resolution = ResolutionPolicy::Fixed224;
  s1.token_min = 256;
  s1.token_max = 256;
  s1.has_teacher = true;
  s1.seen_samples = scaled(12e9);
  s1.peak_lr = 1e-3;
  s1.min_lr = 1e-6;
  s1.warmup_steps = 2000;
  s1.patch_dropout = 0.5;
  s1.lambda0 = 1.0;
  s1.lambda_decay_point = scaled(8e9);

  StageEntry s2 = s1;
  s2.index = 2;
  s2.has_teacher = false;
  s2.text_trainable = true;
  s2.text_lr_scale = 0.1;  // text LR runs at one tenth of the vision LR
  s2.seen_samples = scaled(1e9);
  s2.peak_lr = 1e-5;
  s2.min_lr = 0.0;
  s2.patch_dropout = 0.0;

  StageEntry s3 = s2;
  s3.index = 3;
  s3.text_trainable = false;
  s3.text_lr_scale = 1.0;
  s3.resolution = ResolutionPolicy::Native;
  s3.token_min = 64;
  s3.token_max = 16384;
  s3.patch_dropout = 0.5;

  StageEntry s4 = s3;
  s4.index = 4;
  s4.uses_videos = true;
  s4.seen_samples = scaled(0.6e9);
  s4.peak_lr = 4e-6;
  s4.warmup_steps = 1000;
  s4.global_batch = 26624;
  s4.video_batch = 4096;

  plan.stages = {s1, s2, s3, s4};
  return plan;
}

// Linear warmup to the peak, then cosine decay to the floor; clamped at the
// floor past `total`.
inline double cosine_lr(long step, long warmup, long total, double peak,
                        double floor_lr) {
  NRVIT_CHECK(total > 0, "cosine_lr: total must be positive");
  NRVIT_CHECK(warmup >= 0 && warmup < total,
              "cosine_lr: requires 0 <= warmup < total");
  if (step <= warmup)
    return warmup == 0 ? peak
                       : peak * static_cast<double>(step) /
                             static_cast<double>(warmup);
  if (step >= total) return floor_lr;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total - warmup);
  return floor_lr + 0.5 * (peak - floor_lr) * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// Batch scheduling

enum class TicketModality { Image, Video, Mixed };

struct BatchTicket {
  TicketModality modality = TicketModality::Image;
  std::vector<std::string> ids;
  long epoch = 0;
  long step = 0;
};

namespace detail {

inline std::vector<std::vector<std::string>> shuffled_batches(
    std::vector<std::string> ids, long batch, std::uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(ids);
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(ids.size(), i + static_cast<std::size_t>(batch));
    out.emplace_back(ids.begin() + static_cast<long>(i),
                     ids.begin() + static_cast<long>(end));
  }
  return out;
}

}  // namespace detail

// One epoch of modality-pure batches. Both pools are reshuffled with an
// epoch-derived seed, split into homogeneous batches, and video batches are
// interleaved at evenly spaced ranks (video batch k, 1-indexed rank
// ceil((k+1) * total / n_video)).
inline std::vector<BatchTicket> alternating_scheduler_epoch(
    const std::vector<std::string>& image_ids,
    const std::vector<std::string>& video_ids, long global_batch_image,
    long global_batch_video, std::uint64_t seed, long epoch) {
  NRVIT_CHECK(!image_ids.empty() || !video_ids.empty(),
              "alternating_scheduler: both pools empty");
  if (!image_ids.empty())
    NRVIT_CHECK(global_batch_image >= 1 &&
                    global_batch_image <= static_cast<long>(image_ids.size()),
                "alternating_scheduler: image batch larger than pool");
  if (!video_ids.empty())
    NRVIT_CHECK(global_batch_video >= 1 &&
                    global_batch_video <= static_cast<long>(video_ids.size()),
                "alternating_scheduler: video batch larger than pool");

  auto img_batches = image_ids.empty()
                         ? std::vector<std::vector<std::string>>{}
                         : detail::shuffled_batches(
                               image_ids, global_batch_image,
                               derive_seed(seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
  auto vid_batches = video_ids.empty()
                         ? std::vector<std::vector<std::string>>{}
                         : detail::shuffled_batches(
                               video_ids, global_batch_video,
                               derive_seed(seed, 0x2000 + static_cast<std::uint64_t>(epoch)));

  const long n_i = static_cast<long>(img_batches.size());
  const long n_v = static_cast<long>(vid_batches.size());
  const long total = n_i + n_v;
  std::vector<bool> is_video(static_cast<std::size_t>(total), false);
  for (long k = 0; k < n_v; ++k) {
    const long rank = (  // ceil((k+1) * total / n_v), 1-indexed
        (k + 1) * total + n_v - 1) / n_v;
    is_video[static_cast<std::size_t>(rank - 1)] = true;
  }
  std::vector<BatchTicket> tickets;
  tickets.reserve(static_cast<std::size_t>(total));
  long ii = 0, vi = 0;
  for (long pos = 0; pos < total; ++pos) {
    BatchTicket t;
    t.epoch = epoch;
    t.step = pos;
    if (is_video[static_cast<std::size_t>(pos)]) {
      t.modality = TicketModality::Video;
      t.ids = std::move(vid_batches[static_cast<std::size_t>(vi++)]);
    } else {
      t.modality = TicketModality::Image;
      t.ids = std::move(img_batches[static_cast<std::size_t>(ii++)]);
    }
    tickets.push_back(std::move(t));
  }
  return tickets;
}

// Ablation-harness variant: one pooled shuffle, batches may mix modalities.
inline std::vector<BatchTicket> mixed_scheduler_epoch(
    const std::vector<std::string>& image_ids,
    const std::vector<std::string>& video_ids, long global_batch,
    std::uint64_t seed, long epoch,
    const std::function<bool(const std::string&)>& is_video_id) {
  NRVIT_CHECK(!image_ids.empty() || !video_ids.empty(),
              "mixed_scheduler: both pools empty");
  std::vector<std::string> pool = image_ids;
  pool.insert(pool.end(), video_ids.begin(), video_ids.end());
  NRVIT_CHECK(global_batch >= 1 && global_batch <= static_cast<long>(pool.size()),
              "mixed_scheduler: batch larger than pool");
  auto batches = detail::shuffled_batches(
      pool, global_batch, derive_seed(seed, 0x3000 + static_cast<std::uint64_t>(epoch)));
  std::vector<BatchTicket> tickets;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    BatchTicket t;
    t.epoch = epoch;
    t.step = static_cast<long>(b);
    bool any_img = false, any_vid = false;
    for (const auto& id : batches[b]) (is_video_id(id) ? any_vid : any_img) = true;
    t.modality = any_img && any_vid
                     ? TicketModality::Mixed
                     : (any_vid ? TicketModality::Video : TicketModality::Image);
    t.ids = std::move(batches[b]);
    tickets.push_back(std::move(t));
  }
  return tickets;
}

// ---------------------------------------------------------------------------
// Optimizer

// Decoupled weight-decay Adam with bias correction. Moment buffers are keyed
// by parameter name, so freeze flags simply exclude groups from step().
template <typename T>
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.95, double eps = 1e-8,
                 double weight_decay = 0.05)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Applies one update at learning rate `lr` to every view in `params`, with
  // `grads` aligned by position. Norm-gain and scalar groups are excluded
  // from weight decay.
  void step(const std::vector<ParamView<T>>& params,
            const std::vector<ParamView<T>>& grads, double lr) {
    NRVIT_CHECK(params.size() == grads.size(), "AdamW: param/grad mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      NRVIT_CHECK(params[p].name == grads[p].name && params[p].size == grads[p].size,
                  "AdamW: param/grad views out of order");
      auto& m = moments_[params[p].name];
      if (m.first.size() != params[p].size) {
        m.first = Vec<T>::Zero(params[p].size);
        m.second = Vec<T>::Zero(params[p].size);
      }
      const bool decay = decay_eligible(params[p]);
      T* w = params[p].data;
      const T* g = grads[p].data;
      for (long i = 0; i < params[p].size; ++i) {
        m.first(i) = static_cast<T>(beta1_) * m.first(i) +
                     static_cast<T>(1.0 - beta1_) * g[i];
        m.second(i) = static_cast<T>(beta2_) * m.second(i) +
                      static_cast<T>(1.0 - beta2_) * g[i] * g[i];
        const double mhat = m.first(i) / bc1;
        const double vhat = m.second(i) / bc2;
        double update = mhat / (std::sqrt(vhat) + eps_);
        if (decay) update += weight_decay_ * static_cast<double>(w[i]);
        w[i] -= static_cast<T>(lr * update);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  static bool decay_eligible(const ParamView<T>& p) {
    // Matrices decay; gains, LayerScale diagonals, biases and loss scalars
    // do not.
    return p.shape.size() == 2;
  }

  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::map<std::string, std::pair<Vec<T>, Vec<T>>> moments_;
};

// Scales gradients in place so their global L2 norm is at most `max_norm`.
template <typename T>
double clip_global_norm(const std::vector<ParamView<T>>& grads,
                        double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (long i = 0; i < g.size; ++i)
      sq += static_cast<double>(g.data[i]) * static_cast<double>(g.data[i]);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (const auto& g : grads)
      for (long i = 0; i < g.size; ++i) g.data[i] *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training step shared by run_stage and the gradient audit.

template <typename T>
struct StepLosses {
  T contrastive = T(0);
  T distill = T(0);
};

// Forward both towers on an already-packed visual batch plus captions,
// evaluate the hybrid objective, and (optionally) accumulate gradients for
// every trainable array. The teacher contributes targets only.
template <typename T>
StepLosses<T> compute_losses_and_grads(
    ModelState<T>& model, const PackedBatch<T>& vis_batch,
    const std::vector<std::vector<int>>& captions, double lambda, double tau,
    ModelGrads<T>* grads) {
  NRVIT_CHECK(static_cast<long>(captions.size()) == vis_batch.segments(),
              "compute_losses: one caption required per visual sample");
  EncoderCache<T> vis_cache;
  const auto vis_out =
      forward_encoder(vis_batch, model.vision, grads ? &vis_cache : nullptr);
  TextCache<T> txt_cache;
  const Mat<T> txt_feat =
      encode_text(captions, model.text, grads ? &txt_cache : nullptr);

  const Mat<T> img_raw = vis_out.pooled * model.head.w_v;
  const Mat<T> txt_raw = txt_feat * model.head.w_t;
  const RowNorm<T> img_n = normalize_rows(img_raw);
  const RowNorm<T> txt_n = normalize_rows(txt_raw);
  const T temp = model.head.temperature();

  StepLosses<T> losses;
  SigmoidLossGrads<T> sg;
  losses.contrastive = sigmoid_contrastive_loss(
      img_n.normalized, txt_n.normalized, temp, model.head.bias,
      grads ? &sg : nullptr);

  Mat<T> d_pooled_kl;
  if (lambda > 0.0) {
    NRVIT_CHECK(model.teacher.has_value(),
                "compute_losses: lambda > 0 requires a teacher");
    const Mat<T> teacher = teacher_features(vis_batch, *model.teacher);
    losses.distill = kl_distillation_loss(vis_out.pooled, teacher,
                                          static_cast<T>(tau),
                                          grads ? &d_pooled_kl : nullptr);
  }

  if (grads) {
    const Mat<T> d_img_raw = normalize_rows_backward(img_n, sg.d_img);
    const Mat<T> d_txt_raw = normalize_rows_backward(txt_n, sg.d_txt);
    grads->w_v.noalias() += vis_out.pooled.transpose() * d_img_raw;
    grads->w_t.noalias() += txt_feat.transpose() * d_txt_raw;
    Mat<T> d_pooled = d_img_raw * model.head.w_v.transpose();
    if (lambda > 0.0) d_pooled += static_cast<T>(lambda) * d_pooled_kl;
    const Mat<T> d_txt_feat = d_txt_raw * model.head.w_t.transpose();
    grads->log_temp += sg.d_temp * temp;
    grads->bias += sg.d_bias;
    backward_encoder(vis_cache, model.vision, Mat<T>(), d_pooled,
                     grads->vision);
    backward_text(txt_cache, model.text, d_txt_feat, grads->text);
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Stage execution

template <typename T>
struct CorpusInterface {
  virtual ~CorpusInterface() = default;
  virtual std::vector<std::string> image_ids() const = 0;
  virtual std::vector<std::string> video_ids() const = 0;
  virtual VisualSample<T> load(const std::string& id) const = 0;
  virtual std::vector<int> caption_tokens(const std::string& id) const = 0;
};

struct StepMetrics {
  long step = 0;
  int stage = 0;
  double lr = 0.0;
  double loss_contrastive = 0.0;
  double loss_distill = 0.0;
  double lambda = 0.0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<StepMetrics>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open metrics file " + path);
  f << "step,stage,lr,loss_contrastive,loss_distill,lambda\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%ld,%d,%.10g,%.10g,%.10g,%.10g\n", r.step,
                  r.stage, r.lr, r.loss_contrastive, r.loss_distill, r.lambda);
    f << buf;
  }
}

struct TrainOptions {
  int frames_max = 32;
  double tau = 1.0;
  double grad_clip = 1.0;
  std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std{0.5, 0.5, 0.5};
  bool use_mixed_scheduler = false;  // stage-4 ablation harness
};

// Runs one stage loop: ingest -> resolution policy -> patch dropout -> pack ->
// dual-tower forward -> stage losses -> clipped AdamW step under freeze flags.
template <typename T>
std::vector<StepMetrics> run_stage(const StageEntry& stage,
                                   ModelState<T>& model,
                                   const CorpusInterface<T>& corpus,
                                   AdamW<T>& optimizer, std::uint64_t seed,
                                   const TrainOptions& opts,
                                   const EncoderConfig& enc_cfg) {
  NRVIT_CHECK(model.trained_through_stage == stage.index - 1,
              "run_stage: prior stage checkpoint not loaded");
  NRVIT_CHECK(!stage.has_teacher || model.teacher.has_value(),
              "run_stage: stage requires a teacher branch");
  const int p = enc_cfg.patch;
  const int pt = enc_cfg.temporal_patch;

  const long budget = stage.seen_samples;
  const long approx_batch =
      stage.uses_videos && stage.video_batch > 0
          ? std::min(stage.global_batch, stage.video_batch)
          : stage.global_batch;
  const long total_steps = (budget + approx_batch - 1) / approx_batch;
  // Warmup cannot consume the whole schedule at desk scale; cap it at a tenth
  // of the stage (the nominal value always wins at full scale).
  const long warmup = std::min(stage.warmup_steps,
                               std::max<long>(total_steps / 10, 1));

  auto all_params = collect_params(model);
  std::vector<ParamView<T>> trainable;
  for (const auto& pv : all_params) {
    const bool vision_group = name_has_prefix(pv, "vision.");
    const bool text_group = name_has_prefix(pv, "text.");
    const bool head_group = name_has_prefix(pv, "head.");
    if ((vision_group && stage.vision_trainable) ||
        (text_group && stage.text_trainable) || head_group)
      trainable.push_back(pv);
  }

  std::vector<StepMetrics> metrics;
  long seen = 0;
  long step = 0;
  for (long epoch = 0; seen < budget; ++epoch) {
    std::vector<BatchTicket> tickets;
    if (opts.use_mixed_scheduler && stage.uses_videos) {
      const auto videos = corpus.video_ids();
      std::set<std::string> vid_set(videos.begin(), videos.end());
      tickets = mixed_scheduler_epoch(
          corpus.image_ids(), videos, stage.global_batch, seed, epoch,
          [&](const std::string& id) { return vid_set.count(id) > 0; });
    } else {
      tickets = alternating_scheduler_epoch(
          stage.uses_images ? corpus.image_ids() : std::vector<std::string>{},
          stage.uses_videos ? corpus.video_ids() : std::vector<std::string>{},
          stage.global_batch, stage.video_batch, seed, epoch);
    }
    for (const auto& ticket : tickets) {
      if (seen >= budget) break;

      // --- ingest
      std::vector<VisualSample<T>> samples;
      std::vector<std::vector<int>> captions;
      samples.reserve(ticket.ids.size());
      for (const auto& id : ticket.ids) {
        samples.push_back(corpus.load(id));
        captions.push_back(corpus.caption_tokens(id));
      }
      std::vector<VisualSample<T>> prepared;
      prepared.reserve(samples.size());
      if (stage.resolution == ResolutionPolicy::Fixed224) {
        for (auto& s : samples)
          prepared.push_back(resize_modes(s, ResizeFixed{224}, p, pt));
      } else {
        std::vector<VisualSample<T>> staged;
        bool any_video = false;
        for (auto& s : samples) {
          if (s.modality == Modality::Video) {
            any_video = true;
            staged.push_back(sample_frames(s, opts.frames_max, pt));
          } else {
            staged.push_back(s);
          }
        }
        if (any_video) {
          // Video clips are ranged individually.
          for (auto& s : staged)
            prepared.push_back(clamp_clip_to_budget(
                s, {stage.token_max, stage.token_min}, p, pt));
        } else {
          prepared = resize_to_budget(staged, {stage.token_max, stage.token_min},
                                      p, pt);
        }
      }

      // --- lift, normalize, patchify, dropout, pack
      std::vector<TokenSequence<T>> seqs;
      seqs.reserve(prepared.size());
      for (std::size_t i = 0; i < prepared.size(); ++i) {
        VisualSample<T> s = std::move(prepared[i]);
        if (s.frames == 1) s = image_to_video(s);
        if (s.frames % pt != 0) s = sample_frames(s, opts.frames_max, pt);
        s = normalize(s, opts.pixel_mean, opts.pixel_std);
        auto [grid, patches] = patchify(s, p, pt);
        TokenSequence<T> seq(grid, std::move(patches));
        if (stage.patch_dropout > 0.0) {
          const std::uint64_t tag =
              derive_seed(static_cast<std::uint64_t>(stage.index) * 0x9000 + i,
                          static_cast<std::uint64_t>(step));
          Rng drop(derive_seed(seed, tag));
          seq = patch_dropout(seq, stage.patch_dropout, drop);
        }
        seqs.push_back(std::move(seq));
      }
      PackedBatch<T> batch = pack(seqs);

      // --- losses and gradients
      const double lambda =
          stage.has_teacher
              ? lambda_schedule(seen, stage.lambda_decay_point, stage.lambda0)
              : 0.0;
      ModelGrads<T> grads(model);
      const auto losses = compute_losses_and_grads(model, batch, captions,
                                                   lambda, opts.tau, &grads);

      // --- optimizer step on the stage's trainable groups
      auto all_grads = collect_grads(grads);
      std::map<std::string, ParamView<T>> grad_by_name;
      for (auto& g : all_grads) grad_by_name[g.name] = g;
      std::vector<ParamView<T>> step_params, step_grads;
      std::vector<ParamView<T>> text_params, text_grads;
      for (const auto& pv : trainable) {
        const auto& g = grad_by_name.at(pv.name);
        if (stage.text_lr_scale != 1.0 && name_has_prefix(pv, "text.")) {
          text_params.push_back(pv);
          text_grads.push_back(g);
        } else {
          step_params.push_back(pv);
          step_grads.push_back(g);
        }
      }
      std::vector<ParamView<T>> clip_view = step_grads;
      clip_view.insert(clip_view.end(), text_grads.begin(), text_grads.end());
      clip_global_norm(clip_view, opts.grad_clip);

      const double lr =
          cosine_lr(step + 1, warmup, std::max<long>(total_steps, warmup + 1),
                    stage.peak_lr, stage.min_lr);
      optimizer.step(step_params, step_grads, lr);
      if (!text_params.empty())
        optimizer.step(text_params, text_grads, lr * stage.text_lr_scale);

      metrics.push_back({step, stage.index, lr,
                         static_cast<double>(losses.contrastive),
                         static_cast<double>(losses.distill), lambda});
      seen += static_cast<long>(ticket.ids.size());
      ++step;
    }
  }
  model.trained_through_stage = stage.index;
  return metrics;
}

}  // namespace nrvit
