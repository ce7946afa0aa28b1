#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "nrvit/common.hpp"
#include "nrvit/packing.hpp"

namespace nrvit {

struct EncoderConfig {
  int hidden = 0;        // D
  int intermediate = 0;  // I
  int layers = 0;
  int heads = 0;
  int head_dim = 0;
  int patch = 14;
  int temporal_patch = 2;
  int channels = 3;
  double rope_base = 10000.0;
  double layerscale_init = 1e-5;
  double norm_eps = 1e-6;

  long patch_vector_size() const {
    return static_cast<long>(temporal_patch) * patch * patch * channels;
  }

  void validate() const {
    NRVIT_CHECK(hidden >= 1 && intermediate >= 1 && layers >= 1 &&
                    heads >= 1 && head_dim >= 1 && patch >= 1 &&
                    temporal_patch >= 1 && channels >= 1,
                "EncoderConfig: all counts must be >= 1");
    NRVIT_CHECK(heads * head_dim == hidden,
                "EncoderConfig: heads * head_dim must equal hidden");
    NRVIT_CHECK(head_dim % 4 == 0,
                "EncoderConfig: head_dim must be divisible by 4");
  }
};

inline EncoderConfig encoder_config_0_3b() {
  EncoderConfig c;
  c.hidden = 1024; c.intermediate = 4224; c.layers = 24;
  c.heads = 16; c.head_dim = 64;
  return c;
}
inline EncoderConfig encoder_config_0_6b() {
  EncoderConfig c;
  c.hidden = 1280; c.intermediate = 5184; c.layers = 32;
  c.heads = 16; c.head_dim = 80;
  return c;
}
inline EncoderConfig encoder_config_1b() {
  EncoderConfig c;
  c.hidden = 1920; c.intermediate = 7680; c.layers = 32;
  c.heads = 24; c.head_dim = 80;
  return c;
}
// Small enough for exhaustive gradient and equivalence checks.
inline EncoderConfig encoder_config_tiny() {
  EncoderConfig c;
  c.hidden = 64; c.intermediate = 128; c.layers = 2;
  c.heads = 4; c.head_dim = 16;
  return c;
}

template <typename T>
struct BlockLayer {
  Vec<T> norm1_g, q_g, k_g, ls_attn;
  Mat<T> wq, wk, wv, wo;
  Vec<T> norm2_g, ffn_norm_g, ls_ffn;
  Mat<T> w_gate, w_up, w_down;
};

// The transformer trunk shared by the vision encoder and the text tower:
// pre-norm blocks with QK-normed 2D-RoPE attention, SwiGLU FFN with an inner
// RMSNorm, LayerScale on both residual branches, and a final RMSNorm.
// There is no class token and no absolute position table.
template <typename T>
struct BlockStack {
  int hidden = 0;
  int intermediate = 0;
  int heads = 0;
  int head_dim = 0;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  std::vector<BlockLayer<T>> layers;
  Vec<T> final_g;
};

template <typename T>
struct EncoderState {
  EncoderConfig cfg;
  Mat<T> patch_w;  // [S, D]
  Vec<T> patch_b;  // [D]
  BlockStack<T> blocks;
};

namespace nn {

template <typename T>
void xavier_uniform(Mat<T>& m, long fan_in, long fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
}

// y.row(i) = x.row(i) * inv_rms_i ⊙ g; returns inv_rms per row.
template <typename T>
Vec<T> rmsnorm_rows(const Mat<T>& x, const Vec<T>& g, T eps, Mat<T>& y) {
  const long n = x.rows(), d = x.cols();
  Vec<T> inv(n);
  y.resize(n, d);
  for (long i = 0; i < n; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    inv(i) = T(1) / std::sqrt(ms + eps);
    y.row(i) = (x.row(i) * inv(i)).cwiseProduct(g.transpose());
  }
  return inv;
}

template <typename T>
void rmsnorm_rows_backward(const Mat<T>& x, const Vec<T>& g, const Vec<T>& inv,
                           const Mat<T>& dy, Mat<T>& dx, Vec<T>& dg) {
  const long n = x.rows(), d = x.cols();
  dx.resize(n, d);
  for (long i = 0; i < n; ++i) {
    const auto w = dy.row(i).cwiseProduct(g.transpose());
    const T dot = w.dot(x.row(i));
    dx.row(i) = w * inv(i) -
                x.row(i) * (inv(i) * inv(i) * inv(i) * dot / static_cast<T>(d));
    dg += (dy.row(i).cwiseProduct(x.row(i)) * inv(i)).transpose();
  }
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

}  // namespace nn

// Per-token rotation indices: the first half of every head rotates by a
// combined (t, row) raster index, the second half by the column index. For
// images (t = 0) the raster index reduces to the plain row.
template <typename T>
std::vector<std::array<int, 2>> rope_axes(const PackedBatch<T>& batch) {
  std::vector<std::array<int, 2>> axes;
  axes.reserve(static_cast<std::size_t>(batch.total_tokens()));
  for (long k = 0; k < batch.segments(); ++k) {
    const int rows = batch.grids[static_cast<std::size_t>(k)].rows;
    for (long i = batch.boundaries[static_cast<std::size_t>(k)];
         i < batch.boundaries[static_cast<std::size_t>(k) + 1]; ++i) {
      const Pos& p = batch.positions[static_cast<std::size_t>(i)];
      axes.push_back({p.t * rows + p.row, p.col});
    }
  }
  return axes;
}

namespace detail {

// cos/sin tables per token: d/4 pair frequencies for the (t,row) half
// followed by d/4 for the column half.
template <typename T>
void rope_tables(const std::vector<std::array<int, 2>>& axes, int head_dim,
                 double base, Mat<T>& cos_t, Mat<T>& sin_t) {
  const int half = head_dim / 2;
  const int pairs = half / 2;
  const long n = static_cast<long>(axes.size());
  cos_t.resize(n, 2 * pairs);
  sin_t.resize(n, 2 * pairs);
  std::vector<double> freq(static_cast<std::size_t>(pairs));
  for (int j = 0; j < pairs; ++j)
    freq[static_cast<std::size_t>(j)] =
        std::pow(base, -2.0 * j / static_cast<double>(half));
  for (long i = 0; i < n; ++i) {
    for (int j = 0; j < pairs; ++j) {
      const double a = axes[static_cast<std::size_t>(i)][0] *
                       freq[static_cast<std::size_t>(j)];
      const double b = axes[static_cast<std::size_t>(i)][1] *
                       freq[static_cast<std::size_t>(j)];
      cos_t(i, j) = static_cast<T>(std::cos(a));
      sin_t(i, j) = static_cast<T>(std::sin(a));
      cos_t(i, pairs + j) = static_cast<T>(std::cos(b));
      sin_t(i, pairs + j) = static_cast<T>(std::sin(b));
    }
  }
}

// In-place rotation of one head slice [N, d]. sign=-1 applies the inverse
// rotation (used for gradients).
template <typename T>
void rope_apply(Eigen::Block<Mat<T>> block, const Mat<T>& cos_t,
                const Mat<T>& sin_t, int sign) {
  const long n = block.rows();
  const int d = static_cast<int>(block.cols());
  const int half = d / 2;
  const int pairs = half / 2;
  for (long i = 0; i < n; ++i) {
    for (int hsel = 0; hsel < 2; ++hsel) {
      const int lane0 = hsel * half;
      for (int j = 0; j < pairs; ++j) {
        const T c = cos_t(i, hsel * pairs + j);
        const T s = static_cast<T>(sign) * sin_t(i, hsel * pairs + j);
        const T a = block(i, lane0 + 2 * j);
        const T b = block(i, lane0 + 2 * j + 1);
        block(i, lane0 + 2 * j) = c * a - s * b;
        block(i, lane0 + 2 * j + 1) = s * a + c * b;
      }
    }
  }
}

}  // namespace detail

// Standalone 2D rotary embedding over [N, heads, d] laid out as [N, D];
// norm-preserving per lane pair.
template <typename T>
Mat<T> rope_2d(const Mat<T>& qk, const std::vector<std::array<int, 2>>& axes,
               int heads, int head_dim, double base) {
  NRVIT_CHECK(head_dim % 4 == 0, "rope_2d: head_dim must be divisible by 4");
  NRVIT_CHECK(static_cast<long>(axes.size()) == qk.rows(),
              "rope_2d: position count does not match rows");
  NRVIT_CHECK(qk.cols() == static_cast<long>(heads) * head_dim,
              "rope_2d: width does not match heads * head_dim");
  Mat<T> cos_t, sin_t;
  detail::rope_tables(axes, head_dim, base, cos_t, sin_t);
  Mat<T> out = qk;
  for (int h = 0; h < heads; ++h)
    detail::rope_apply<T>(out.middleCols(h * head_dim, head_dim), cos_t, sin_t,
                          +1);
  return out;
}

template <typename T>
struct LayerCache {
  Mat<T> x;             // block input
  Vec<T> rms1;          // pre-attention norm inverse RMS
  Mat<T> u;             // normed input
  Mat<T> q, k, v;       // projections before QK-Norm
  Mat<T> qn, kn;        // after QK-Norm and RoPE
  Mat<T> q_inv, k_inv;  // per-row per-head inverse RMS [N, heads]
  std::vector<Mat<T>> probs;  // softmax matrices, indexed seg * heads + h
  Mat<T> attn_cat;      // concatenated head outputs
  Mat<T> x1;            // after attention residual
  Vec<T> rms2;
  Mat<T> f;             // normed x1
  Mat<T> g, uu, h;      // SwiGLU intermediates [N, I]
  Vec<T> h_inv;         // inner norm inverse RMS
  Mat<T> hn;            // normed h
  Mat<T> z;             // down projection output
};

template <typename T>
struct StackCache {
  Mat<T> x0;
  std::vector<long> boundaries;
  std::vector<std::array<int, 2>> axes;
  Mat<T> cos_t, sin_t;
  bool causal = false;
  std::vector<LayerCache<T>> layers;
  Mat<T> pre_final;
  Vec<T> final_inv;
  Mat<T> normed;
};

template <typename T>
struct BlockLayerGrads {
  Vec<T> norm1_g, q_g, k_g, ls_attn;
  Mat<T> wq, wk, wv, wo;
  Vec<T> norm2_g, ffn_norm_g, ls_ffn;
  Mat<T> w_gate, w_up, w_down;
};

template <typename T>
struct BlockStackGrads {
  std::vector<BlockLayerGrads<T>> layers;
  Vec<T> final_g;

  explicit BlockStackGrads(const BlockStack<T>& s) {
    layers.resize(s.layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& p = s.layers[l];
      auto& g = layers[l];
      g.norm1_g = Vec<T>::Zero(p.norm1_g.size());
      g.q_g = Vec<T>::Zero(p.q_g.size());
      g.k_g = Vec<T>::Zero(p.k_g.size());
      g.ls_attn = Vec<T>::Zero(p.ls_attn.size());
      g.wq = Mat<T>::Zero(p.wq.rows(), p.wq.cols());
      g.wk = Mat<T>::Zero(p.wk.rows(), p.wk.cols());
      g.wv = Mat<T>::Zero(p.wv.rows(), p.wv.cols());
      g.wo = Mat<T>::Zero(p.wo.rows(), p.wo.cols());
      g.norm2_g = Vec<T>::Zero(p.norm2_g.size());
      g.ffn_norm_g = Vec<T>::Zero(p.ffn_norm_g.size());
      g.ls_ffn = Vec<T>::Zero(p.ls_ffn.size());
      g.w_gate = Mat<T>::Zero(p.w_gate.rows(), p.w_gate.cols());
      g.w_up = Mat<T>::Zero(p.w_up.rows(), p.w_up.cols());
      g.w_down = Mat<T>::Zero(p.w_down.rows(), p.w_down.cols());
    }
    final_g = Vec<T>::Zero(s.final_g.size());
  }
};

template <typename T>
BlockStack<T> init_block_stack(int hidden, int intermediate, int layers,
                               int heads, int head_dim, double rope_base,
                               double layerscale_init, double norm_eps,
                               Rng& rng) {
  BlockStack<T> s;
  s.hidden = hidden;
  s.intermediate = intermediate;
  s.heads = heads;
  s.head_dim = head_dim;
  s.rope_base = rope_base;
  s.norm_eps = norm_eps;
  s.layers.resize(static_cast<std::size_t>(layers));
  for (auto& l : s.layers) {
    l.norm1_g = Vec<T>::Ones(hidden);
    l.q_g = Vec<T>::Ones(head_dim);
    l.k_g = Vec<T>::Ones(head_dim);
    l.ls_attn = Vec<T>::Constant(hidden, static_cast<T>(layerscale_init));
    l.wq.resize(hidden, hidden);
    l.wk.resize(hidden, hidden);
    l.wv.resize(hidden, hidden);
    l.wo.resize(hidden, hidden);
    nn::xavier_uniform(l.wq, hidden, hidden, rng);
    nn::xavier_uniform(l.wk, hidden, hidden, rng);
    nn::xavier_uniform(l.wv, hidden, hidden, rng);
    nn::xavier_uniform(l.wo, hidden, hidden, rng);
    l.norm2_g = Vec<T>::Ones(hidden);
    l.ffn_norm_g = Vec<T>::Ones(intermediate);
    l.ls_ffn = Vec<T>::Constant(hidden, static_cast<T>(layerscale_init));
    l.w_gate.resize(hidden, intermediate);
    l.w_up.resize(hidden, intermediate);
    l.w_down.resize(intermediate, hidden);
    nn::xavier_uniform(l.w_gate, hidden, intermediate, rng);
    nn::xavier_uniform(l.w_up, hidden, intermediate, rng);
    nn::xavier_uniform(l.w_down, intermediate, hidden, rng);
  }
  s.final_g = Vec<T>::Ones(hidden);
  return s;
}

template <typename T>
EncoderState<T> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderState<T> st;
  st.cfg = cfg;
  const long s = cfg.patch_vector_size();
  st.patch_w.resize(s, cfg.hidden);
  nn::xavier_uniform(st.patch_w, s, cfg.hidden, rng);
  st.patch_b = Vec<T>::Zero(cfg.hidden);
  st.blocks = init_block_stack<T>(cfg.hidden, cfg.intermediate, cfg.layers,
                                  cfg.heads, cfg.head_dim, cfg.rope_base,
                                  cfg.layerscale_init, cfg.norm_eps, rng);
  return st;
}

// Runs the trunk over a packed token matrix. Attention is confined to
// [boundary_k, boundary_{k+1}) segments; with causal=true token i additionally
// only sees j <= i (text tower path). Returns features after the final norm.
template <typename T>
Mat<T> forward_blocks(const Mat<T>& x0, const std::vector<long>& boundaries,
                      const std::vector<std::array<int, 2>>& axes, bool causal,
                      const BlockStack<T>& stack, StackCache<T>* cache) {
  const long n = x0.rows();
  const int heads = stack.heads;
  const int d = stack.head_dim;
  const T eps = static_cast<T>(stack.norm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  NRVIT_CHECK(x0.cols() == stack.hidden, "forward_blocks: width mismatch");
  NRVIT_CHECK(static_cast<long>(axes.size()) == n,
              "forward_blocks: position count mismatch");
  NRVIT_CHECK(!boundaries.empty() && boundaries.front() == 0 &&
                  boundaries.back() == n,
              "forward_blocks: invalid boundaries");

  Mat<T> cos_t, sin_t;
  detail::rope_tables(axes, d, stack.rope_base, cos_t, sin_t);
  const long segs = static_cast<long>(boundaries.size()) - 1;

  if (cache) {
    cache->x0 = x0;
    cache->boundaries = boundaries;
    cache->axes = axes;
    cache->cos_t = cos_t;
    cache->sin_t = sin_t;
    cache->causal = causal;
    cache->layers.assign(stack.layers.size(), {});
  }

  Mat<T> x = x0;
  for (std::size_t li = 0; li < stack.layers.size(); ++li) {
    const auto& L = stack.layers[li];
    LayerCache<T> scratch;
    LayerCache<T>& lc = cache ? cache->layers[li] : scratch;
    lc.x = x;

    lc.rms1 = nn::rmsnorm_rows(x, L.norm1_g, eps, lc.u);
    lc.q.noalias() = lc.u * L.wq;
    lc.k.noalias() = lc.u * L.wk;
    lc.v.noalias() = lc.u * L.wv;

    // QK-Norm: per-head RMS over head_dim with one shared gain per projection.
    lc.qn.resize(n, stack.hidden);
    lc.kn.resize(n, stack.hidden);
    lc.q_inv.resize(n, heads);
    lc.k_inv.resize(n, heads);
    for (int h = 0; h < heads; ++h) {
      for (long i = 0; i < n; ++i) {
        const auto qrow = lc.q.row(i).segment(h * d, d);
        const auto krow = lc.k.row(i).segment(h * d, d);
        const T qi = T(1) / std::sqrt(qrow.squaredNorm() / static_cast<T>(d) + eps);
        const T ki = T(1) / std::sqrt(krow.squaredNorm() / static_cast<T>(d) + eps);
        lc.q_inv(i, h) = qi;
        lc.k_inv(i, h) = ki;
        lc.qn.row(i).segment(h * d, d) =
            (qrow * qi).cwiseProduct(L.q_g.transpose());
        lc.kn.row(i).segment(h * d, d) =
            (krow * ki).cwiseProduct(L.k_g.transpose());
      }
      detail::rope_apply<T>(lc.qn.middleCols(h * d, d), cos_t, sin_t, +1);
      detail::rope_apply<T>(lc.kn.middleCols(h * d, d), cos_t, sin_t, +1);
    }

    lc.attn_cat.setZero(n, stack.hidden);
    lc.probs.assign(static_cast<std::size_t>(segs * heads), Mat<T>());
    for (long k = 0; k < segs; ++k) {
      const long b = boundaries[static_cast<std::size_t>(k)];
      const long len = boundaries[static_cast<std::size_t>(k) + 1] - b;
      for (int h = 0; h < heads; ++h) {
        const auto qs = lc.qn.block(b, h * d, len, d);
        const auto ks = lc.kn.block(b, h * d, len, d);
        const auto vs = lc.v.block(b, h * d, len, d);
        Mat<T> logits = (qs * ks.transpose()) * scale;
        if (causal) {
          for (long i = 0; i < len; ++i)
            for (long j = i + 1; j < len; ++j)
              logits(i, j) = -std::numeric_limits<T>::infinity();
        }
        // Max-subtracted softmax; every row can at least see itself.
        for (long i = 0; i < len; ++i) {
          const T mx = logits.row(i).maxCoeff();
          logits.row(i) = (logits.row(i).array() - mx).exp();
          const T sum = logits.row(i).sum();
          if (!(sum > T(0)))
            throw std::runtime_error("attention: fully masked row");
          logits.row(i) /= sum;
        }
        lc.attn_cat.block(b, h * d, len, d).noalias() = logits * vs;
        lc.probs[static_cast<std::size_t>(k * heads + h)] = std::move(logits);
      }
    }

    Mat<T> proj = lc.attn_cat * L.wo;
    lc.x1 = lc.x + proj.cwiseProduct(L.ls_attn.transpose().replicate(n, 1));

    lc.rms2 = nn::rmsnorm_rows(lc.x1, L.norm2_g, eps, lc.f);
    lc.g.noalias() = lc.f * L.w_gate;
    lc.uu.noalias() = lc.f * L.w_up;
    lc.h = lc.g.unaryExpr([](T v) { return nn::silu(v); }).cwiseProduct(lc.uu);
    lc.h_inv = nn::rmsnorm_rows(lc.h, L.ffn_norm_g, eps, lc.hn);
    lc.z.noalias() = lc.hn * L.w_down;
    x = lc.x1 + lc.z.cwiseProduct(L.ls_ffn.transpose().replicate(n, 1));
  }

  Mat<T> normed;
  Vec<T> final_inv = nn::rmsnorm_rows(x, stack.final_g, eps, normed);
  if (cache) {
    cache->pre_final = std::move(x);
    cache->final_inv = std::move(final_inv);
    cache->normed = normed;
  }
  return normed;
}

// Reverse pass matching forward_blocks; accumulates parameter gradients and
// returns the gradient with respect to the trunk input.
template <typename T>
Mat<T> backward_blocks(const StackCache<T>& cache, const BlockStack<T>& stack,
                       const Mat<T>& d_normed, BlockStackGrads<T>& grads) {
  const long n = cache.x0.rows();
  const int heads = stack.heads;
  const int d = stack.head_dim;
  const T eps = static_cast<T>(stack.norm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const auto& boundaries = cache.boundaries;
  const long segs = static_cast<long>(boundaries.size()) - 1;

  Mat<T> dx;
  nn::rmsnorm_rows_backward(cache.pre_final, stack.final_g, cache.final_inv,
                            d_normed, dx, grads.final_g);

  for (long li = static_cast<long>(stack.layers.size()) - 1; li >= 0; --li) {
    const auto& L = stack.layers[static_cast<std::size_t>(li)];
    const auto& lc = cache.layers[static_cast<std::size_t>(li)];
    auto& G = grads.layers[static_cast<std::size_t>(li)];

    // FFN branch: x2 = x1 + ls_ffn ⊙ z
    G.ls_ffn += dx.cwiseProduct(lc.z).colwise().sum().transpose();
    Mat<T> dz = dx.cwiseProduct(L.ls_ffn.transpose().replicate(n, 1));
    G.w_down.noalias() += lc.hn.transpose() * dz;
    Mat<T> dhn = dz * L.w_down.transpose();
    Mat<T> dh;
    nn::rmsnorm_rows_backward(lc.h, L.ffn_norm_g, lc.h_inv, dhn, dh,
                              G.ffn_norm_g);
    Mat<T> silu_g = lc.g.unaryExpr([](T v) { return nn::silu(v); });
    Mat<T> dg = dh.cwiseProduct(lc.uu).cwiseProduct(
        lc.g.unaryExpr([](T v) { return nn::silu_grad(v); }));
    Mat<T> duu = dh.cwiseProduct(silu_g);
    G.w_gate.noalias() += lc.f.transpose() * dg;
    G.w_up.noalias() += lc.f.transpose() * duu;
    Mat<T> df = dg * L.w_gate.transpose() + duu * L.w_up.transpose();
    Mat<T> dx1;
    nn::rmsnorm_rows_backward(lc.x1, L.norm2_g, lc.rms2, df, dx1, G.norm2_g);
    dx1 += dx;  // residual

    // Attention branch: x1 = x + ls_attn ⊙ (attn_cat * wo)
    Mat<T> proj = lc.attn_cat * L.wo;
    G.ls_attn += dx1.cwiseProduct(proj).colwise().sum().transpose();
    Mat<T> dproj = dx1.cwiseProduct(L.ls_attn.transpose().replicate(n, 1));
    G.wo.noalias() += lc.attn_cat.transpose() * dproj;
    Mat<T> dattn = dproj * L.wo.transpose();

    Mat<T> dqn = Mat<T>::Zero(n, stack.hidden);
    Mat<T> dkn = Mat<T>::Zero(n, stack.hidden);
    Mat<T> dv = Mat<T>::Zero(n, stack.hidden);
    for (long k = 0; k < segs; ++k) {
      const long b = boundaries[static_cast<std::size_t>(k)];
      const long len = boundaries[static_cast<std::size_t>(k) + 1] - b;
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& p = lc.probs[static_cast<std::size_t>(k * heads + h)];
        const auto dout = dattn.block(b, h * d, len, d);
        const auto qs = lc.qn.block(b, h * d, len, d);
        const auto ks = lc.kn.block(b, h * d, len, d);
        const auto vs = lc.v.block(b, h * d, len, d);
        dv.block(b, h * d, len, d).noalias() += p.transpose() * dout;
        Mat<T> dp = dout * vs.transpose();
        Vec<T> rowdot = dp.cwiseProduct(p).rowwise().sum();
        Mat<T> ds = p.cwiseProduct(dp - rowdot.replicate(1, len));
        dqn.block(b, h * d, len, d).noalias() += (ds * ks) * scale;
        dkn.block(b, h * d, len, d).noalias() += (ds.transpose() * qs) * scale;
      }
    }

    // Invert RoPE, then QK-Norm backward per head with shared gains.
    Mat<T> dq(n, stack.hidden), dk(n, stack.hidden);
    for (int h = 0; h < heads; ++h) {
      detail::rope_apply<T>(dqn.middleCols(h * d, d), cache.cos_t, cache.sin_t,
                            -1);
      detail::rope_apply<T>(dkn.middleCols(h * d, d), cache.cos_t, cache.sin_t,
                            -1);
      for (long i = 0; i < n; ++i) {
        const auto qrow = lc.q.row(i).segment(h * d, d);
        const auto krow = lc.k.row(i).segment(h * d, d);
        const auto dqh = dqn.row(i).segment(h * d, d);
        const auto dkh = dkn.row(i).segment(h * d, d);
        const T qi = lc.q_inv(i, h);
        const T ki = lc.k_inv(i, h);
        const auto wq = dqh.cwiseProduct(L.q_g.transpose());
        const auto wk = dkh.cwiseProduct(L.k_g.transpose());
        const T qdot = wq.dot(qrow);
        const T kdot = wk.dot(krow);
        dq.row(i).segment(h * d, d) =
            wq * qi - qrow * (qi * qi * qi * qdot / static_cast<T>(d));
        dk.row(i).segment(h * d, d) =
            wk * ki - krow * (ki * ki * ki * kdot / static_cast<T>(d));
        G.q_g += (dqh.cwiseProduct(qrow) * qi).transpose();
        G.k_g += (dkh.cwiseProduct(krow) * ki).transpose();
      }
    }

    G.wq.noalias() += lc.u.transpose() * dq;
    G.wk.noalias() += lc.u.transpose() * dk;
    G.wv.noalias() += lc.u.transpose() * dv;
    Mat<T> du = dq * L.wq.transpose() + dk * L.wk.transpose() +
                dv * L.wv.transpose();
    Mat<T> dx_in;
    nn::rmsnorm_rows_backward(lc.x, L.norm1_g, lc.rms1, du, dx_in, G.norm1_g);
    dx = dx1 + dx_in;
  }
  return dx;
}

template <typename T>
struct EncoderOutput {
  Mat<T> features;  // [L_total, D]
  Mat<T> pooled;    // [K, D], mean of each segment's features
};

template <typename T>
struct EncoderCache {
  Mat<T> patches;
  StackCache<T> stack;
  std::vector<long> boundaries;
};

template <typename T>
struct EncoderGrads {
  Mat<T> patch_w;
  Vec<T> patch_b;
  BlockStackGrads<T> blocks;

  explicit EncoderGrads(const EncoderState<T>& st)
      : patch_w(Mat<T>::Zero(st.patch_w.rows(), st.patch_w.cols())),
        patch_b(Vec<T>::Zero(st.patch_b.size())),
        blocks(st.blocks) {}
};

// Per-patch affine map; a 3D convolution whose stride equals its kernel is
// exactly this.
template <typename T>
Mat<T> patch_embed(const Mat<T>& patches, const EncoderState<T>& state) {
  NRVIT_CHECK(patches.cols() == state.patch_w.rows(),
              "patch_embed: patch width mismatch");
  Mat<T> out = patches * state.patch_w;
  out.rowwise() += state.patch_b.transpose();
  return out;
}

// Full encoder forward over a packed batch of raw patch vectors.
template <typename T>
EncoderOutput<T> forward_encoder(const PackedBatch<T>& batch,
                                 const EncoderState<T>& state,
                                 EncoderCache<T>* cache = nullptr) {
  batch.validate();
  Mat<T> embedded = patch_embed(batch.tokens, state);
  const auto axes = rope_axes(batch);
  StackCache<T> scratch;
  StackCache<T>* sc = cache ? &cache->stack : nullptr;
  EncoderOutput<T> out;
  out.features = forward_blocks(embedded, batch.boundaries, axes, false,
                                state.blocks, sc);
  const long k = batch.segments();
  out.pooled.resize(k, state.cfg.hidden);
  for (long s = 0; s < k; ++s) {
    const long b = batch.boundaries[static_cast<std::size_t>(s)];
    const long len = batch.segment_length(s);
    out.pooled.row(s) =
        out.features.middleRows(b, len).colwise().mean();
  }
  if (cache) {
    cache->patches = batch.tokens;
    cache->boundaries = batch.boundaries;
  }
  return out;
}

// d_features and d_pooled may each be empty (zero-size) when unused.
template <typename T>
void backward_encoder(const EncoderCache<T>& cache, const EncoderState<T>& state,
                      const Mat<T>& d_features, const Mat<T>& d_pooled,
                      EncoderGrads<T>& grads) {
  const long n = cache.patches.rows();
  Mat<T> dfeat = d_features.size() > 0
                     ? Mat<T>(d_features)
                     : Mat<T>(Mat<T>::Zero(n, state.cfg.hidden));
  if (d_pooled.size() > 0) {
    for (long s = 0; s + 1 < static_cast<long>(cache.boundaries.size()); ++s) {
      const long b = cache.boundaries[static_cast<std::size_t>(s)];
      const long len = cache.boundaries[static_cast<std::size_t>(s) + 1] - b;
      dfeat.middleRows(b, len).rowwise() +=
          d_pooled.row(s) / static_cast<T>(len);
    }
  }
  Mat<T> d_embedded =
      backward_blocks(cache.stack, state.blocks, dfeat, grads.blocks);
  grads.patch_w.noalias() += cache.patches.transpose() * d_embedded;
  grads.patch_b += d_embedded.colwise().sum().transpose();
}

struct ParameterCount {
  long exact = 0;          // every learnable scalar in this parameterization
  double paper_approx = 0; // L * (4*D^2 + 2*D*I)
};

inline ParameterCount count_parameters(const EncoderConfig& cfg) {
  cfg.validate();
  const long d = cfg.hidden, i = cfg.intermediate, hd = cfg.head_dim;
  const long s = cfg.patch_vector_size();
  const long per_layer = 4 * d * d + 3 * d * i  // attention + SwiGLU matrices
                         + 4 * d                // two pre-norm gains, two LayerScales
                         + 2 * hd               // QK-Norm gains
                         + i;                   // inner FFN norm gain
  ParameterCount out;
  out.exact = s * d + d + cfg.layers * per_layer + d;
  out.paper_approx =
      static_cast<double>(cfg.layers) *
      (4.0 * static_cast<double>(d) * d + 2.0 * static_cast<double>(d) * i);
  return out;
}

}  // namespace nrvit
