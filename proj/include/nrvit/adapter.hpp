#pragma once

#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nrvit/encoder.hpp"
#include "nrvit/ingest.hpp"

namespace nrvit {

// ---------------------------------------------------------------------------
// Width-wise 2x pixel-unshuffle over an [h, w, D] token grid, stored as an
// [h*w, D] row-major matrix.

// Output token (r, c) concatenates inputs (r, 2c) and (r, 2c+1); lossless.
template <typename T>
Mat<T> pixel_unshuffle_width(const Mat<T>& tokens, int h, int w) {
  NRVIT_CHECK(h >= 1 && w >= 1 && tokens.rows() == static_cast<long>(h) * w,
              "pixel_unshuffle_width: grid does not match token count");
  NRVIT_CHECK(w % 2 == 0, "pixel_unshuffle_width: width must be even");
  const long d = tokens.cols();
  Mat<T> out(static_cast<long>(h) * (w / 2), 2 * d);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w / 2; ++c) {
      const long o = static_cast<long>(r) * (w / 2) + c;
      out.row(o).segment(0, d) = tokens.row(static_cast<long>(r) * w + 2 * c);
      out.row(o).segment(d, d) =
          tokens.row(static_cast<long>(r) * w + 2 * c + 1);
    }
  return out;
}

template <typename T>
Mat<T> pixel_shuffle_width(const Mat<T>& merged, int h, int half_w) {
  NRVIT_CHECK(h >= 1 && half_w >= 1 &&
                  merged.rows() == static_cast<long>(h) * half_w,
              "pixel_shuffle_width: grid does not match token count");
  NRVIT_CHECK(merged.cols() % 2 == 0,
              "pixel_shuffle_width: odd channel width");
  const long d = merged.cols() / 2;
  Mat<T> out(static_cast<long>(h) * half_w * 2, d);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < half_w; ++c) {
      const long i = static_cast<long>(r) * half_w + c;
      out.row(static_cast<long>(r) * half_w * 2 + 2 * c) =
          merged.row(i).segment(0, d);
      out.row(static_cast<long>(r) * half_w * 2 + 2 * c + 1) =
          merged.row(i).segment(d, d);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary markers and line anchors

struct VisionToken {
  int row = 0;  // 1-based
  int col = 0;
  bool operator==(const VisionToken&) const = default;
};

struct Marker {
  std::string text;
  bool operator==(const Marker&) const = default;
};

using ArrangedElement = std::variant<VisionToken, Marker>;

struct ArrangedSequence {
  std::vector<ArrangedElement> elements;

  long size() const { return static_cast<long>(elements.size()); }
};

// <image_start>, row 1 tokens, <line-1>, row 2 tokens, ..., <line-h>,
// <image_end>. Markers are plain strings, never tokenizer-special ids; the
// element count is h*w + h + 2.
inline ArrangedSequence arrange_with_markers(int h, int w) {
  NRVIT_CHECK(h >= 1 && w >= 1, "arrange_with_markers: degenerate grid");
  ArrangedSequence seq;
  seq.elements.reserve(static_cast<std::size_t>(h) * w + h + 2);
  seq.elements.push_back(Marker{"<image_start>"});
  for (int r = 1; r <= h; ++r) {
    for (int c = 1; c <= w; ++c) seq.elements.push_back(VisionToken{r, c});
    seq.elements.push_back(Marker{"<line-" + std::to_string(r) + ">"});
  }
  seq.elements.push_back(Marker{"<image_end>"});
  return seq;
}

// Vision tokens in original row-major order, markers removed.
inline std::vector<VisionToken> strip_markers(const ArrangedSequence& seq) {
  std::vector<VisionToken> out;
  for (const auto& e : seq.elements)
    if (std::holds_alternative<VisionToken>(e))
      out.push_back(std::get<VisionToken>(e));
  return out;
}

// Serialization for downstream tooling: markers as strings, tokens as
// [row, col] pairs.
inline nlohmann::json arranged_to_json(const ArrangedSequence& seq) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : seq.elements) {
    if (std::holds_alternative<Marker>(e))
      arr.push_back(std::get<Marker>(e).text);
    else
      arr.push_back({std::get<VisionToken>(e).row,
                     std::get<VisionToken>(e).col});
  }
  return arr;
}

inline ArrangedSequence arranged_from_json(const nlohmann::json& arr) {
  ArrangedSequence seq;
  for (const auto& e : arr) {
    if (e.is_string())
      seq.elements.push_back(Marker{e.get<std::string>()});
    else
      seq.elements.push_back(VisionToken{e.at(0).get<int>(),
                                         e.at(1).get<int>()});
  }
  return seq;
}

// ---------------------------------------------------------------------------
// MLLM-facing resize: each side rounds to the nearest multiple of 28 (the
// patch size times the 2x width merge), ties rounding down, minimum one unit.

inline int round_to_28(int v) {
  const int down = (v / 28) * 28;
  const int up = down + 28;
  const int chosen = (v - down <= up - v) ? down : up;
  return std::max(28, chosen);
}

template <typename T>
VisualSample<T> mllm_resize(const VisualSample<T>& image) {
  image.validate();
  NRVIT_CHECK(image.height >= 28 && image.width >= 28,
              "mllm_resize: input below the 28px minimum");
  return bilinear_resize(image, round_to_28(image.height),
                         round_to_28(image.width));
}

// ---------------------------------------------------------------------------
// Three-layer projector with pre-normalization (shape-testing stub for the
// language-model bridge).

template <typename T>
struct MllmProjector {
  Vec<T> norm_g;
  Mat<T> w1, w2, w3;
};

template <typename T>
MllmProjector<T> init_projector(int d_in, int d_hidden, int d_out, Rng& rng) {
  MllmProjector<T> p;
  p.norm_g = Vec<T>::Ones(d_in);
  p.w1.resize(d_in, d_hidden);
  p.w2.resize(d_hidden, d_hidden);
  p.w3.resize(d_hidden, d_out);
  nn::xavier_uniform(p.w1, d_in, d_hidden, rng);
  nn::xavier_uniform(p.w2, d_hidden, d_hidden, rng);
  nn::xavier_uniform(p.w3, d_hidden, d_out, rng);
  return p;
}

template <typename T>
Mat<T> project_tokens(const Mat<T>& tokens, const MllmProjector<T>& p) {
  Mat<T> normed;
  nn::rmsnorm_rows<T>(tokens, p.norm_g, T(1e-6), normed);
  Mat<T> h1 = (normed * p.w1).unaryExpr([](T v) { return nn::silu(v); });
  Mat<T> h2 = (h1 * p.w2).unaryExpr([](T v) { return nn::silu(v); });
  return h2 * p.w3;
}

}  // namespace nrvit
