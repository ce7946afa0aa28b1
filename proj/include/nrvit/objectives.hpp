#pragma once

#include <cmath>
#include <vector>

#include "nrvit/common.hpp"
#include "nrvit/encoder.hpp"

namespace nrvit {

// Dual-tower projection head. The temperature is stored as log t so it stays
// positive under unconstrained updates.
template <typename T>
struct AlignmentHead {
  Mat<T> w_v;  // vision features -> shared space [D_v, D_e]
  Mat<T> w_t;  // text features -> shared space [D_t, D_e]
  T log_temp = T(0);
  T bias = T(0);

  T temperature() const { return std::exp(log_temp); }
};

template <typename T>
AlignmentHead<T> init_alignment_head(int d_vision, int d_text, int d_embed,
                                     Rng& rng) {
  NRVIT_CHECK(d_embed >= 1, "AlignmentHead: embed width must be >= 1");
  AlignmentHead<T> h;
  h.w_v.resize(d_vision, d_embed);
  h.w_t.resize(d_text, d_embed);
  nn::xavier_uniform(h.w_v, d_vision, d_embed, rng);
  nn::xavier_uniform(h.w_t, d_text, d_embed, rng);
  h.log_temp = static_cast<T>(std::log(10.0));
  h.bias = static_cast<T>(-10.0);
  return h;
}

// Row-wise L2 normalization with the pieces needed for its backward pass.
template <typename T>
struct RowNorm {
  Mat<T> normalized;
  Vec<T> norms;
};

template <typename T>
RowNorm<T> normalize_rows(const Mat<T>& x) {
  RowNorm<T> out;
  out.normalized.resize(x.rows(), x.cols());
  out.norms.resize(x.rows());
  for (long i = 0; i < x.rows(); ++i) {
    const T n = x.row(i).norm();
    NRVIT_CHECK(n > T(0), "normalize_rows: zero row");
    out.norms(i) = n;
    out.normalized.row(i) = x.row(i) / n;
  }
  return out;
}

template <typename T>
Mat<T> normalize_rows_backward(const RowNorm<T>& fwd, const Mat<T>& dy) {
  Mat<T> dx(dy.rows(), dy.cols());
  for (long i = 0; i < dy.rows(); ++i) {
    const auto y = fwd.normalized.row(i);
    dx.row(i) = (dy.row(i) - y * y.dot(dy.row(i))) / fwd.norms(i);
  }
  return dx;
}

namespace detail {

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void check_unit_rows(const Mat<T>& m, const char* what) {
  for (long i = 0; i < m.rows(); ++i)
    NRVIT_CHECK(std::abs(m.row(i).norm() - T(1)) <= T(1e-3), what);
}

}  // namespace detail

template <typename T>
struct SigmoidLossGrads {
  Mat<T> d_img;
  Mat<T> d_txt;
  T d_temp = T(0);  // with respect to t itself, not log t
  T d_bias = T(0);
};

// Pairwise sigmoid contrastive loss over all B^2 image/text pairs:
//   loss = -(1/B) sum_ij log sigmoid(z_ij * (t * <x_i, y_j> + b)),
// z = +1 on the diagonal and -1 elsewhere. Both embedding matrices must be
// row-normalized.
template <typename T>
T sigmoid_contrastive_loss(const Mat<T>& img_emb, const Mat<T>& txt_emb,
                           T temp, T bias,
                           SigmoidLossGrads<T>* grads = nullptr) {
  const long b = img_emb.rows();
  NRVIT_CHECK(b >= 1, "sigmoid_contrastive_loss: empty batch");
  NRVIT_CHECK(txt_emb.rows() == b && txt_emb.cols() == img_emb.cols(),
              "sigmoid_contrastive_loss: embedding shape mismatch");
  detail::check_unit_rows(img_emb,
                          "sigmoid_contrastive_loss: image rows not unit norm");
  detail::check_unit_rows(txt_emb,
                          "sigmoid_contrastive_loss: text rows not unit norm");
  Mat<T> sim = img_emb * txt_emb.transpose();
  T loss = T(0);
  Mat<T> m;
  if (grads) m.setZero(b, b);
  T d_temp = T(0), d_bias = T(0);
  for (long i = 0; i < b; ++i) {
    for (long j = 0; j < b; ++j) {
      const T z = (i == j) ? T(1) : T(-1);
      const T a = z * (temp * sim(i, j) + bias);
      loss += detail::softplus(-a);
      if (grads) {
        const T c = -detail::sigmoid(-a) * z / static_cast<T>(b);
        m(i, j) = c;
        d_temp += c * sim(i, j);
        d_bias += c;
      }
    }
  }
  loss /= static_cast<T>(b);
  if (grads) {
    grads->d_img = (m * temp) * txt_emb;
    grads->d_txt = (m * temp).transpose() * img_emb;
    grads->d_temp = d_temp;
    grads->d_bias = d_bias;
  }
  return loss;
}

// Mean over samples of KL(p_teacher || p_student) where both distributions
// come from a temperature softmax over the feature dimension. Only the
// student side receives gradients; the teacher is frozen by contract.
template <typename T>
T kl_distillation_loss(const Mat<T>& student, const Mat<T>& teacher, T tau,
                       Mat<T>* d_student = nullptr) {
  NRVIT_CHECK(tau > T(0), "kl_distillation_loss: temperature must be > 0");
  const long k = student.rows();
  NRVIT_CHECK(k >= 1, "kl_distillation_loss: empty batch");
  NRVIT_CHECK(teacher.rows() == k && teacher.cols() == student.cols(),
              "kl_distillation_loss: shape mismatch");
  const long d = student.cols();
  T loss = T(0);
  if (d_student) d_student->resize(k, d);
  Vec<T> p(d), q(d);
  for (long i = 0; i < k; ++i) {
    auto softmax_row = [&](const auto& row, Vec<T>& out) {
      const T mx = row.maxCoeff();
      out = ((row.transpose() / tau).array() - mx / tau).exp();
      out /= out.sum();
    };
    softmax_row(teacher.row(i), p);
    softmax_row(student.row(i), q);
    for (long j = 0; j < d; ++j)
      loss += p(j) * (std::log(p(j)) - std::log(q(j)));
    if (d_student)
      d_student->row(i) = ((q - p) / (tau * static_cast<T>(k))).transpose();
  }
  return loss / static_cast<T>(k);
}

template <typename T>
T hybrid_loss(T contrastive, T distill, T lambda) {
  NRVIT_CHECK(lambda >= T(0), "hybrid_loss: lambda must be >= 0");
  return contrastive + lambda * distill;
}

// Step schedule for the distillation weight: full strength before the decay
// point, zero at and after it.
inline double lambda_schedule(long seen_samples, long decay_point,
                              double lambda0) {
  NRVIT_CHECK(decay_point > 0, "lambda_schedule: decay_point must be > 0");
  return seen_samples < decay_point ? lambda0 : 0.0;
}

// ---------------------------------------------------------------------------
// Stand-in towers. Both expose the interfaces of their full-scale
// counterparts so every staging decision can be exercised end to end.

// Small causal transformer over a word vocabulary; the caption feature is the
// hidden state at the final (<EOS>) token.
template <typename T>
struct TextTower {
  int vocab = 0;
  int hidden = 0;
  int eos_id = 0;
  Mat<T> embed;  // [vocab, hidden]
  BlockStack<T> trunk;
};

template <typename T>
TextTower<T> init_text_tower(int vocab, int eos_id, int hidden,
                             int intermediate, int layers, int heads,
                             int head_dim, Rng& rng) {
  NRVIT_CHECK(vocab >= 1 && eos_id >= 0 && eos_id < vocab,
              "TextTower: eos id out of vocabulary");
  TextTower<T> t;
  t.vocab = vocab;
  t.hidden = hidden;
  t.eos_id = eos_id;
  t.embed.resize(vocab, hidden);
  nn::xavier_uniform(t.embed, vocab, hidden, rng);
  t.trunk = init_block_stack<T>(hidden, intermediate, layers, heads, head_dim,
                                10000.0, 1.0, 1e-6, rng);
  return t;
}

template <typename T>
struct TextCache {
  StackCache<T> stack;
  std::vector<int> token_ids;   // flattened
  std::vector<long> boundaries;
};

// captions -> [B, D_t] features taken at each caption's final position.
template <typename T>
Mat<T> encode_text(const std::vector<std::vector<int>>& captions,
                   const TextTower<T>& tower, TextCache<T>* cache = nullptr) {
  NRVIT_CHECK(!captions.empty(), "encode_text: empty caption list");
  std::vector<long> boundaries{0};
  std::vector<int> flat;
  for (const auto& c : captions) {
    NRVIT_CHECK(!c.empty(), "encode_text: empty caption");
    NRVIT_CHECK(c.back() == tower.eos_id,
                "encode_text: caption does not end with <EOS>");
    for (int id : c) {
      NRVIT_CHECK(id >= 0 && id < tower.vocab,
                  "encode_text: token id out of vocabulary");
      flat.push_back(id);
    }
    boundaries.push_back(static_cast<long>(flat.size()));
  }
  const long n = static_cast<long>(flat.size());
  Mat<T> x0(n, tower.hidden);
  std::vector<std::array<int, 2>> axes(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k + 1 < boundaries.size(); ++k) {
    for (long i = boundaries[k]; i < boundaries[k + 1]; ++i) {
      x0.row(i) = tower.embed.row(flat[static_cast<std::size_t>(i)]);
      axes[static_cast<std::size_t>(i)] = {static_cast<int>(i - boundaries[k]),
                                           0};
    }
  }
  StackCache<T> scratch;
  StackCache<T>* sc = cache ? &cache->stack : nullptr;
  Mat<T> normed = forward_blocks(x0, boundaries, axes, /*causal=*/true,
                                 tower.trunk, sc);
  Mat<T> features(static_cast<long>(captions.size()), tower.hidden);
  for (std::size_t k = 0; k + 1 < boundaries.size(); ++k)
    features.row(static_cast<long>(k)) = normed.row(boundaries[k + 1] - 1);
  if (cache) {
    cache->token_ids = std::move(flat);
    cache->boundaries = std::move(boundaries);
  }
  return features;
}

template <typename T>
struct TextGrads {
  Mat<T> embed;
  BlockStackGrads<T> trunk;

  explicit TextGrads(const TextTower<T>& t)
      : embed(Mat<T>::Zero(t.embed.rows(), t.embed.cols())), trunk(t.trunk) {}
};

template <typename T>
void backward_text(const TextCache<T>& cache, const TextTower<T>& tower,
                   const Mat<T>& d_features, TextGrads<T>& grads) {
  const long n = cache.stack.x0.rows();
  Mat<T> d_normed = Mat<T>::Zero(n, tower.hidden);
  for (std::size_t k = 0; k + 1 < cache.boundaries.size(); ++k)
    d_normed.row(cache.boundaries[k + 1] - 1) =
        d_features.row(static_cast<long>(k));
  Mat<T> d_x0 = backward_blocks(cache.stack, tower.trunk, d_normed,
                                grads.trunk);
  for (long i = 0; i < n; ++i)
    grads.embed.row(cache.token_ids[static_cast<std::size_t>(i)]) +=
        d_x0.row(i);
}

// Frozen randomly-initialized encoder with the same interface as the student,
// plus a projection into the student's feature width.
template <typename T>
struct TeacherStub {
  EncoderState<T> encoder;
  Mat<T> proj;  // [D_teacher, D_student]
};

template <typename T>
TeacherStub<T> init_teacher(const EncoderConfig& cfg, int d_student, Rng& rng) {
  TeacherStub<T> t;
  t.encoder = init_encoder<T>(cfg, rng);
  t.proj.resize(cfg.hidden, d_student);
  nn::xavier_uniform(t.proj, cfg.hidden, d_student, rng);
  return t;
}

// Pooled teacher features projected into the student width. No cache: the
// teacher never receives gradients.
template <typename T>
Mat<T> teacher_features(const PackedBatch<T>& batch,
                        const TeacherStub<T>& teacher) {
  return forward_encoder(batch, teacher.encoder).pooled * teacher.proj;
}

}  // namespace nrvit
