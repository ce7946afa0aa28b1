#pragma once

#include <string>
#include <vector>

#include "nrvit/data.hpp"
#include "nrvit/model.hpp"
#include "nrvit/packing.hpp"
#include "nrvit/pipeline.hpp"

namespace nrvit {

// ---------------------------------------------------------------------------
// Embedding helpers (read-only over the model; no dropout at eval time).

template <typename T>
struct EvalPreprocess {
  ResizeMode mode = ResizeNative{};
  std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std{0.5, 0.5, 0.5};
  int frames_max = 32;
  // Video eval clips are ranged like the training stage-4 path.
  TokenBudget video_budget{16384, 576};
  long group = 16;  // samples packed per forward pass
};

template <typename T>
TokenSequence<T> eval_tokenize(const VisualSample<T>& raw,
                               const EncoderConfig& cfg,
                               const EvalPreprocess<T>& pre) {
  VisualSample<T> s = raw;
  if (s.modality == Modality::Video) {
    s = sample_frames(s, pre.frames_max, cfg.temporal_patch);
    s = clamp_clip_to_budget(s, pre.video_budget, cfg.patch,
                             cfg.temporal_patch);
  } else {
    s = resize_modes(s, pre.mode, cfg.patch, cfg.temporal_patch);
  }
  if (s.frames == 1) s = image_to_video(s);
  if (s.frames % cfg.temporal_patch != 0)
    s = sample_frames(s, pre.frames_max, cfg.temporal_patch);
  s = normalize(s, pre.pixel_mean, pre.pixel_std);
  auto [grid, patches] = patchify(s, cfg.patch, cfg.temporal_patch);
  return TokenSequence<T>(grid, std::move(patches));
}

// Pooled, projected, row-normalized image embeddings [M, D_e].
template <typename T>
Mat<T> embed_images(const ModelState<T>& model,
                    const std::vector<VisualSample<T>>& samples,
                    const EvalPreprocess<T>& pre,
                    std::vector<long>* token_counts = nullptr) {
  NRVIT_CHECK(!samples.empty(), "embed_images: empty sample list");
  const auto& cfg = model.vision.cfg;
  Mat<T> out(static_cast<long>(samples.size()), model.head.w_v.cols());
  for (std::size_t at = 0; at < samples.size();
       at += static_cast<std::size_t>(pre.group)) {
    const std::size_t end =
        std::min(samples.size(), at + static_cast<std::size_t>(pre.group));
    std::vector<TokenSequence<T>> seqs;
    for (std::size_t i = at; i < end; ++i) {
      seqs.push_back(eval_tokenize(samples[i], cfg, pre));
      if (token_counts) token_counts->push_back(seqs.back().tokens.rows());
    }
    const auto enc = forward_encoder(pack(seqs), model.vision);
    const Mat<T> raw = enc.pooled * model.head.w_v;
    out.middleRows(static_cast<long>(at), static_cast<long>(end - at)) =
        normalize_rows(raw).normalized;
  }
  return out;
}

template <typename T>
Mat<T> embed_texts(const ModelState<T>& model,
                   const std::vector<std::vector<int>>& captions) {
  const Mat<T> feat = encode_text(captions, model.text);
  return normalize_rows(Mat<T>(feat * model.head.w_t)).normalized;
}

// Pooled backbone features [M, D_v] before the alignment projection (the
// "last feature layer" the probes train on).
template <typename T>
Mat<T> pooled_features(const ModelState<T>& model,
                       const std::vector<VisualSample<T>>& samples,
                       const EvalPreprocess<T>& pre) {
  NRVIT_CHECK(!samples.empty(), "pooled_features: empty sample list");
  const auto& cfg = model.vision.cfg;
  Mat<T> out(static_cast<long>(samples.size()), cfg.hidden);
  for (std::size_t at = 0; at < samples.size();
       at += static_cast<std::size_t>(pre.group)) {
    const std::size_t end =
        std::min(samples.size(), at + static_cast<std::size_t>(pre.group));
    std::vector<TokenSequence<T>> seqs;
    for (std::size_t i = at; i < end; ++i)
      seqs.push_back(eval_tokenize(samples[i], cfg, pre));
    out.middleRows(static_cast<long>(at), static_cast<long>(end - at)) =
        forward_encoder(pack(seqs), model.vision).pooled;
  }
  return out;
}

// Per-sample token feature matrices (frozen backbone) for the attentive
// probe.
template <typename T>
std::vector<Mat<T>> token_features(const ModelState<T>& model,
                                   const std::vector<VisualSample<T>>& samples,
                                   const EvalPreprocess<T>& pre) {
  const auto& cfg = model.vision.cfg;
  std::vector<Mat<T>> out;
  for (std::size_t at = 0; at < samples.size();
       at += static_cast<std::size_t>(pre.group)) {
    const std::size_t end =
        std::min(samples.size(), at + static_cast<std::size_t>(pre.group));
    std::vector<TokenSequence<T>> seqs;
    for (std::size_t i = at; i < end; ++i)
      seqs.push_back(eval_tokenize(samples[i], cfg, pre));
    const auto batch = pack(seqs);
    const auto enc = forward_encoder(batch, model.vision);
    for (long k = 0; k < batch.segments(); ++k)
      out.push_back(enc.features.middleRows(
          batch.boundaries[static_cast<std::size_t>(k)],
          batch.segment_length(k)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Zero-shot classification

template <typename T>
struct ClassPromptSet {
  std::string name;
  std::vector<std::string> prompts;
  Vec<T> embedding;  // mean of prompt embeddings, re-normalized
};

// "a photo of a {name}" plus two paraphrases, averaged then normalized.
template <typename T>
std::vector<ClassPromptSet<T>> build_class_prompts(
    const std::vector<std::string>& names, const ModelState<T>& model,
    const Vocabulary& vocab) {
  std::vector<ClassPromptSet<T>> out;
  for (const auto& name : names) {
    ClassPromptSet<T> c;
    c.name = name;
    c.prompts = {"a photo of a " + name, "an image of a " + name,
                 "a picture of a " + name};
    std::vector<std::vector<int>> toks;
    for (const auto& p : c.prompts) toks.push_back(vocab.tokenize(p));
    const Mat<T> embs = embed_texts(model, toks);
    Vec<T> mean = embs.colwise().mean().transpose();
    const T n = mean.norm();
    NRVIT_CHECK(n > T(0), "build_class_prompts: degenerate prompt embedding");
    c.embedding = mean / n;
    out.push_back(std::move(c));
  }
  return out;
}

struct ZeroShotResult {
  std::vector<long> predicted;
  double accuracy = 0.0;
};

// Argmax of cosine similarity per image; ties break to the lowest class
// index. Similarity is computed on normalized directions, so any positive
// rescaling of the inputs leaves predictions unchanged.
template <typename T>
ZeroShotResult zero_shot_classify(const Mat<T>& image_embs,
                                  const std::vector<ClassPromptSet<T>>& classes,
                                  const std::vector<long>& labels = {}) {
  NRVIT_CHECK(!classes.empty(), "zero_shot_classify: empty class list");
  NRVIT_CHECK(image_embs.rows() >= 1, "zero_shot_classify: no images");
  Mat<T> class_mat(static_cast<long>(classes.size()), image_embs.cols());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    NRVIT_CHECK(classes[c].embedding.size() == image_embs.cols(),
                "zero_shot_classify: embedding width mismatch");
    class_mat.row(static_cast<long>(c)) = classes[c].embedding.transpose();
  }
  ZeroShotResult res;
  long correct = 0;
  for (long i = 0; i < image_embs.rows(); ++i) {
    Vec<T> dir = image_embs.row(i).transpose();
    const T n = dir.norm();
    NRVIT_CHECK(n > T(0), "zero_shot_classify: zero image embedding");
    dir /= n;
    const Vec<T> sims = class_mat * dir;
    long best = 0;
    for (long c = 1; c < sims.size(); ++c)
      if (sims(c) > sims(best)) best = c;
    res.predicted.push_back(best);
    if (!labels.empty() && labels[static_cast<std::size_t>(i)] == best)
      ++correct;
  }
  if (!labels.empty())
    res.accuracy = static_cast<double>(correct) /
                   static_cast<double>(image_embs.rows());
  return res;
}

// ---------------------------------------------------------------------------
// Retrieval

struct RecallAtOne {
  double text_to_image = 0.0;
  double image_to_text = 0.0;
};

// Row i of both matrices is a matched pair; recall@1 counts rows whose
// nearest neighbour (by cosine, strict argmax with first-index ties) is the
// pair partner.
template <typename T>
RecallAtOne retrieval_recall_at_1(const Mat<T>& img_embs,
                                  const Mat<T>& txt_embs) {
  const long m = img_embs.rows();
  NRVIT_CHECK(m >= 1, "retrieval_recall_at_1: empty batch");
  NRVIT_CHECK(txt_embs.rows() == m && txt_embs.cols() == img_embs.cols(),
              "retrieval_recall_at_1: shape mismatch");
  const Mat<T> sims = img_embs * txt_embs.transpose();  // [image, text]
  long t2i = 0, i2t = 0;
  for (long t = 0; t < m; ++t) {
    long best = 0;
    for (long i = 1; i < m; ++i)
      if (sims(i, t) > sims(best, t)) best = i;
    if (best == t) ++t2i;
  }
  for (long i = 0; i < m; ++i) {
    long best = 0;
    for (long t = 1; t < m; ++t)
      if (sims(i, t) > sims(i, best)) best = t;
    if (best == i) ++i2t;
  }
  return {static_cast<double>(t2i) / static_cast<double>(m),
          static_cast<double>(i2t) / static_cast<double>(m)};
}

// ---------------------------------------------------------------------------
// Frozen-backbone probes

template <typename T>
struct LinearProbe {
  Mat<T> w;  // [D, classes]
  Vec<T> b;

  std::vector<long> predict(const Mat<T>& features) const {
    Mat<T> logits = features * w;
    logits.rowwise() += b.transpose();
    std::vector<long> out;
    for (long i = 0; i < logits.rows(); ++i) {
      long best = 0;
      for (long c = 1; c < logits.cols(); ++c)
        if (logits(i, c) > logits(i, best)) best = c;
      out.push_back(best);
    }
    return out;
  }

  double accuracy(const Mat<T>& features, const std::vector<long>& labels) const {
    const auto pred = predict(features);
    long correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
  }
};

namespace detail {

// Softmax cross-entropy over logits; returns mean loss and writes d_logits.
template <typename T>
T softmax_xent(const Mat<T>& logits, const std::vector<long>& labels,
               Mat<T>& d_logits) {
  const long m = logits.rows(), c = logits.cols();
  d_logits.resize(m, c);
  T loss = T(0);
  for (long i = 0; i < m; ++i) {
    const T mx = logits.row(i).maxCoeff();
    Vec<T> p = (logits.row(i).array() - mx).exp().transpose();
    p /= p.sum();
    const long y = labels[static_cast<std::size_t>(i)];
    loss -= std::log(std::max(p(y), T(1e-30)));
    d_logits.row(i) = p.transpose() / static_cast<T>(m);
    d_logits(i, y) -= T(1) / static_cast<T>(m);
  }
  return loss / static_cast<T>(m);
}

}  // namespace detail

// Single affine layer on frozen pooled features, trained with full-batch
// AdamW on a softmax cross-entropy.
template <typename T>
LinearProbe<T> train_linear_probe(const Mat<T>& features,
                                  const std::vector<long>& labels,
                                  long num_classes, long epochs, double lr,
                                  std::uint64_t seed = 7) {
  NRVIT_CHECK(features.rows() >= 1, "linear_probe: no features");
  NRVIT_CHECK(static_cast<long>(labels.size()) == features.rows(),
              "linear_probe: labels do not match features");
  for (const long y : labels)
    NRVIT_CHECK(y >= 0 && y < num_classes, "linear_probe: label out of range");
  LinearProbe<T> probe;
  Rng rng(seed);
  probe.w.resize(features.cols(), num_classes);
  nn::xavier_uniform(probe.w, features.cols(), num_classes, rng);
  probe.b = Vec<T>::Zero(num_classes);

  Mat<T> gw(features.cols(), num_classes);
  Vec<T> gb(num_classes);
  std::vector<ParamView<T>> params{
      {"probe.w", probe.w.data(), probe.w.size(), {features.cols(), num_classes}},
      {"probe.b", probe.b.data(), probe.b.size(), {num_classes}}};
  std::vector<ParamView<T>> grads{
      {"probe.w", gw.data(), gw.size(), {features.cols(), num_classes}},
      {"probe.b", gb.data(), gb.size(), {num_classes}}};
  AdamW<T> opt(0.9, 0.999, 1e-8, 0.0);
  for (long e = 0; e < epochs; ++e) {
    Mat<T> logits = features * probe.w;
    logits.rowwise() += probe.b.transpose();
    Mat<T> dl;
    detail::softmax_xent(logits, labels, dl);
    gw.noalias() = features.transpose() * dl;
    gb = dl.colwise().sum().transpose();
    opt.step(params, grads, lr);
  }
  return probe;
}

// Learnable-query cross-attention pooler over per-sample token features,
// followed by an affine classifier; both trained jointly.
template <typename T>
struct AttentiveProbe {
  Mat<T> queries;  // [n_queries, D]
  Mat<T> w;        // [n_queries * D, classes]
  Vec<T> b;

  Vec<T> pool(const Mat<T>& tokens) const {
    const long d = tokens.cols();
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    Vec<T> z(queries.rows() * d);
    for (long q = 0; q < queries.rows(); ++q) {
      Vec<T> s = tokens * queries.row(q).transpose() * scale;
      const T mx = s.maxCoeff();
      Vec<T> p = (s.array() - mx).exp();
      p /= p.sum();
      z.segment(q * d, d) = tokens.transpose() * p;
    }
    return z;
  }

  long predict(const Mat<T>& tokens) const {
    const Vec<T> z = pool(tokens);
    Vec<T> logits = w.transpose() * z + b;
    long best = 0;
    for (long c = 1; c < logits.size(); ++c)
      if (logits(c) > logits(best)) best = c;
    return best;
  }

  double accuracy(const std::vector<Mat<T>>& samples,
                  const std::vector<long>& labels) const {
    long correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (predict(samples[i]) == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
  }
};

template <typename T>
AttentiveProbe<T> train_attentive_probe(const std::vector<Mat<T>>& samples,
                                        const std::vector<long>& labels,
                                        long num_classes, long epochs,
                                        double lr, long n_queries = 1,
                                        std::uint64_t seed = 9) {
  NRVIT_CHECK(!samples.empty(), "attentive_probe: no samples");
  NRVIT_CHECK(samples.size() == labels.size(),
              "attentive_probe: labels do not match samples");
  const long d = samples.front().cols();
  for (const auto& s : samples)
    NRVIT_CHECK(s.rows() >= 1 && s.cols() == d,
                "attentive_probe: empty or mismatched token set");
  for (const long y : labels)
    NRVIT_CHECK(y >= 0 && y < num_classes,
                "attentive_probe: label out of range");

  AttentiveProbe<T> probe;
  Rng rng(seed);
  probe.queries.resize(n_queries, d);
  nn::xavier_uniform(probe.queries, d, d, rng);
  probe.w.resize(n_queries * d, num_classes);
  nn::xavier_uniform(probe.w, n_queries * d, num_classes, rng);
  probe.b = Vec<T>::Zero(num_classes);

  const long m = static_cast<long>(samples.size());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  Mat<T> gq(n_queries, d), gw(n_queries * d, num_classes);
  Vec<T> gb(num_classes);
  std::vector<ParamView<T>> params{
      {"probe.q", probe.queries.data(), probe.queries.size(), {n_queries, d}},
      {"probe.w", probe.w.data(), probe.w.size(), {n_queries * d, num_classes}},
      {"probe.b", probe.b.data(), probe.b.size(), {num_classes}}};
  std::vector<ParamView<T>> grads{
      {"probe.q", gq.data(), gq.size(), {n_queries, d}},
      {"probe.w", gw.data(), gw.size(), {n_queries * d, num_classes}},
      {"probe.b", gb.data(), gb.size(), {num_classes}}};
  AdamW<T> opt(0.9, 0.999, 1e-8, 0.0);

  for (long e = 0; e < epochs; ++e) {
    gq.setZero();
    gw.setZero();
    gb.setZero();
    Mat<T> z(m, n_queries * d);
    std::vector<std::vector<Vec<T>>> probs(
        static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i) {
      const Mat<T>& x = samples[static_cast<std::size_t>(i)];
      for (long q = 0; q < n_queries; ++q) {
        Vec<T> s = x * probe.queries.row(q).transpose() * scale;
        const T mx = s.maxCoeff();
        Vec<T> p = (s.array() - mx).exp();
        p /= p.sum();
        z.row(i).segment(q * d, d) = (x.transpose() * p).transpose();
        probs[static_cast<std::size_t>(i)].push_back(std::move(p));
      }
    }
    Mat<T> logits = z * probe.w;
    logits.rowwise() += probe.b.transpose();
    Mat<T> dl;
    detail::softmax_xent(logits, labels, dl);
    gw.noalias() += z.transpose() * dl;
    gb += dl.colwise().sum().transpose();
    const Mat<T> dz = dl * probe.w.transpose();
    for (long i = 0; i < m; ++i) {
      const Mat<T>& x = samples[static_cast<std::size_t>(i)];
      for (long q = 0; q < n_queries; ++q) {
        const Vec<T>& p = probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(q)];
        const Vec<T> dpooled = dz.row(i).segment(q * d, d).transpose();
        Vec<T> dp = x * dpooled;
        const T dot = dp.dot(p);
        const Vec<T> ds = p.cwiseProduct(dp - Vec<T>::Constant(p.size(), dot));
        gq.row(q) += (x.transpose() * ds).transpose() * scale;
      }
    }
    opt.step(params, grads, lr);
  }
  return probe;
}

}  // namespace nrvit
