#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "nrvit/common.hpp"

namespace nrvit {

enum class Modality { Image, Video };

// Universal input unit: a stack of frames in (frame, channel, y, x) layout.
// Pixel intensities live in [0,1] until normalize() is applied.
template <typename T>
struct VisualSample {
  int frames = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;  // frames*channels*height*width, row-major
  Modality modality = Modality::Image;
  std::string id;

  T& at(int t, int c, int y, int x) {
    return data[static_cast<std::size_t>(
        ((static_cast<long>(t) * channels + c) * height + y) * width + x)];
  }
  const T& at(int t, int c, int y, int x) const {
    return data[static_cast<std::size_t>(
        ((static_cast<long>(t) * channels + c) * height + y) * width + x)];
  }

  void validate() const {
    NRVIT_CHECK(frames >= 1 && channels >= 1 && height >= 1 && width >= 1,
                "VisualSample: all dimensions must be >= 1");
    NRVIT_CHECK(modality != Modality::Image || frames <= 2,
                "VisualSample: image modality implies a single (possibly "
                "duplicated) frame");
    NRVIT_CHECK(data.size() == static_cast<std::size_t>(frames) * channels *
                                   height * width,
                "VisualSample: data size does not match dimensions");
  }
};

template <typename T>
VisualSample<T> make_sample(int frames, int channels, int height, int width,
                            Modality modality, std::string id, T fill = T(0)) {
  VisualSample<T> s;
  s.frames = frames;
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.modality = modality;
  s.id = std::move(id);
  s.data.assign(
      static_cast<std::size_t>(frames) * channels * height * width, fill);
  return s;
}

// Patch layout of one sample after patchification.
struct PatchGrid {
  int t_patches = 0;
  int rows = 0;
  int cols = 0;
  int patch = 0;
  int temporal_patch = 0;
  std::string sample_id;

  long token_count() const {
    return static_cast<long>(t_patches) * rows * cols;
  }
};

struct TokenBudget {
  long l_max = 0;
  long l_min = 1;

  void validate() const {
    NRVIT_CHECK(l_min >= 1 && l_min <= l_max,
                "TokenBudget: requires 1 <= l_min <= l_max");
  }
};

// (t, row, col) coordinate of a token inside its sample grid.
struct Pos {
  int t = 0;
  int row = 0;
  int col = 0;
  bool operator==(const Pos&) const = default;
};

namespace detail {

// floor(x) robust to values sitting a hair below an integer.
inline long floor_eps(double x) {
  return static_cast<long>(std::floor(x * (1.0 + 1e-12) + 1e-9));
}

}  // namespace detail

inline long temporal_patches(int frames, int temporal_patch) {
  return (static_cast<long>(frames) + temporal_patch - 1) / temporal_patch;
}

// Scales (height, width) by a common factor and quantizes to patch multiples.
// The smaller axis is floored directly; the larger one follows the floored
// anchor through the original aspect ratio, which keeps the quantized aspect
// error within one patch while never rounding a dimension up past its scaled
// size (so token budgets stay hard bounds).
inline std::pair<int, int> plan_scaled_dims(int height, int width, double s,
                                            int patch) {
  const bool anchor_h = height <= width;
  const double a = anchor_h ? height : width;
  const double b = anchor_h ? width : height;
  const long ap = detail::floor_eps(s * a / patch);
  NRVIT_CHECK(ap >= 1, "budget too small for sample count");
  const long bp = detail::floor_eps((b / a) * static_cast<double>(ap));
  NRVIT_CHECK(bp >= 1, "budget too small for sample count");
  const int a_px = static_cast<int>(ap) * patch;
  const int b_px = static_cast<int>(bp) * patch;
  return anchor_h ? std::make_pair(a_px, b_px) : std::make_pair(b_px, a_px);
}

// Dimension arithmetic of resize_to_budget, exposed separately so the budget
// and aspect laws can be exercised cheaply without touching pixels.
// Each entry of dims is (frames, height, width).
inline std::vector<std::pair<int, int>> plan_resize_to_budget(
    const std::vector<std::array<int, 3>>& dims, const TokenBudget& budget,
    int patch, int temporal_patch) {
  budget.validate();
  NRVIT_CHECK(!dims.empty(), "resize_to_budget: empty sample list");
  double l_total = 0.0;
  for (const auto& d : dims) {
    NRVIT_CHECK(d[0] >= 1 && d[1] >= 1 && d[2] >= 1,
                "resize_to_budget: degenerate sample");
    l_total += static_cast<double>(temporal_patches(d[0], temporal_patch)) *
               d[1] * d[2] / (static_cast<double>(patch) * patch);
  }
  const double s = std::sqrt(static_cast<double>(budget.l_max) / l_total);
  std::vector<std::pair<int, int>> out;
  out.reserve(dims.size());
  for (const auto& d : dims) out.push_back(plan_scaled_dims(d[1], d[2], s, patch));
  return out;
}

template <typename T>
VisualSample<T> bilinear_resize(const VisualSample<T>& in, int out_h,
                                int out_w) {
  NRVIT_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: degenerate target");
  if (out_h == in.height && out_w == in.width) return in;
  VisualSample<T> out = make_sample<T>(in.frames, in.channels, out_h, out_w,
                                       in.modality, in.id);
  const double sy = static_cast<double>(in.height) / out_h;
  const double sx = static_cast<double>(in.width) / out_w;
  for (int t = 0; t < in.frames; ++t) {
    for (int c = 0; c < in.channels; ++c) {
      for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(in.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, in.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
          double fx = (x + 0.5) * sx - 0.5;
          fx = std::clamp(fx, 0.0, static_cast<double>(in.width - 1));
          const int x0 = static_cast<int>(fx);
          const int x1 = std::min(x0 + 1, in.width - 1);
          const double wx = fx - x0;
          const double v =
              (1 - wy) * ((1 - wx) * in.at(t, c, y0, x0) +
                          wx * in.at(t, c, y0, x1)) +
              wy * ((1 - wx) * in.at(t, c, y1, x0) + wx * in.at(t, c, y1, x1));
          out.at(t, c, y, x) = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

// Rescales every sample by the single factor s = sqrt(L_max / L_total), where
// L_total is the un-quantized token count of the whole batch, then quantizes
// each sample to patch multiples. The resulting total never exceeds l_max.
template <typename T>
std::vector<VisualSample<T>> resize_to_budget(
    const std::vector<VisualSample<T>>& samples, const TokenBudget& budget,
    int patch, int temporal_patch) {
  std::vector<std::array<int, 3>> dims;
  dims.reserve(samples.size());
  for (const auto& s : samples) {
    s.validate();
    dims.push_back({s.frames, s.height, s.width});
  }
  const auto plans = plan_resize_to_budget(dims, budget, patch, temporal_patch);
  std::vector<VisualSample<T>> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(bilinear_resize(samples[i], plans[i].first, plans[i].second));
  }
  return out;
}

// Scales one clip so its token count lands inside [l_min, l_max]; clips that
// already fit are returned unchanged.
template <typename T>
VisualSample<T> clamp_clip_to_budget(const VisualSample<T>& clip,
                                     const TokenBudget& budget, int patch,
                                     int temporal_patch) {
  budget.validate();
  clip.validate();
  const double tokens =
      static_cast<double>(temporal_patches(clip.frames, temporal_patch)) *
      clip.height * clip.width / (static_cast<double>(patch) * patch);
  double s = 1.0;
  if (tokens > static_cast<double>(budget.l_max)) {
    s = std::sqrt(static_cast<double>(budget.l_max) / tokens);
  } else if (tokens < static_cast<double>(budget.l_min)) {
    s = std::sqrt(static_cast<double>(budget.l_min) / tokens);
  }
  auto [h, w] = plan_scaled_dims(clip.height, clip.width, s, patch);
  if (s > 1.0) {
    // Enlarging floors back below l_min for small clips; bump the anchored
    // axis until the minimum is met (stays within l_max by construction).
    const long tp = temporal_patches(clip.frames, temporal_patch);
    while (static_cast<long>(h / patch) * (w / patch) * tp < budget.l_min) {
      if (h <= w) {
        h += patch;
        w = static_cast<int>(detail::floor_eps(
                static_cast<double>(clip.width) / clip.height * (h / patch))) *
            patch;
      } else {
        w += patch;
        h = static_cast<int>(detail::floor_eps(
                static_cast<double>(clip.height) / clip.width * (w / patch))) *
            patch;
      }
      NRVIT_CHECK(static_cast<long>(h / patch) * (w / patch) * tp <=
                      budget.l_max,
                  "clamp_clip_to_budget: token range is infeasible for this "
                  "aspect ratio");
    }
  }
  return bilinear_resize(clip, h, w);
}

// Slices a sample into non-overlapping (temporal_patch, patch, patch) blocks.
// Patch n = (t, row, col) in temporal-major order; each patch flattens its
// pixels in (frame, channel, y, x) order, so S = pt*p*p*C.
template <typename T>
std::pair<PatchGrid, Mat<T>> patchify(const VisualSample<T>& sample, int patch,
                                      int temporal_patch) {
  sample.validate();
  NRVIT_CHECK(sample.height % patch == 0,
              "patchify: height is not a multiple of patch_size");
  NRVIT_CHECK(sample.width % patch == 0,
              "patchify: width is not a multiple of patch_size");
  NRVIT_CHECK(sample.frames % temporal_patch == 0,
              "patchify: frames is not a multiple of temporal_patch_size");
  PatchGrid grid;
  grid.t_patches = sample.frames / temporal_patch;
  grid.rows = sample.height / patch;
  grid.cols = sample.width / patch;
  grid.patch = patch;
  grid.temporal_patch = temporal_patch;
  grid.sample_id = sample.id;

  const long n = grid.token_count();
  const long s = static_cast<long>(temporal_patch) * patch * patch *
                 sample.channels;
  Mat<T> patches(n, s);
  long row_idx = 0;
  for (int tp = 0; tp < grid.t_patches; ++tp) {
    for (int r = 0; r < grid.rows; ++r) {
      for (int c = 0; c < grid.cols; ++c, ++row_idx) {
        long col_idx = 0;
        for (int f = 0; f < temporal_patch; ++f) {
          for (int ch = 0; ch < sample.channels; ++ch) {
            for (int y = 0; y < patch; ++y) {
              for (int x = 0; x < patch; ++x, ++col_idx) {
                patches(row_idx, col_idx) = sample.at(
                    tp * temporal_patch + f, ch, r * patch + y, c * patch + x);
              }
            }
          }
        }
      }
    }
  }
  return {grid, std::move(patches)};
}

// Exact inverse of patchify for divisible shapes.
template <typename T>
VisualSample<T> unpatchify(const PatchGrid& grid, const Mat<T>& patches,
                           int channels, Modality modality = Modality::Image) {
  const int pt = grid.temporal_patch;
  const int p = grid.patch;
  NRVIT_CHECK(patches.rows() == grid.token_count(),
              "unpatchify: patch count does not match grid");
  NRVIT_CHECK(patches.cols() == static_cast<long>(pt) * p * p * channels,
              "unpatchify: patch width does not match grid");
  VisualSample<T> out =
      make_sample<T>(grid.t_patches * pt, channels, grid.rows * p,
                     grid.cols * p, modality, grid.sample_id);
  long row_idx = 0;
  for (int tp = 0; tp < grid.t_patches; ++tp) {
    for (int r = 0; r < grid.rows; ++r) {
      for (int c = 0; c < grid.cols; ++c, ++row_idx) {
        long col_idx = 0;
        for (int f = 0; f < pt; ++f) {
          for (int ch = 0; ch < channels; ++ch) {
            for (int y = 0; y < p; ++y) {
              for (int x = 0; x < p; ++x, ++col_idx) {
                out.at(tp * pt + f, ch, r * p + y, c * p + x) =
                    patches(row_idx, col_idx);
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Enumerates a grid in patchify order.
inline std::vector<Pos> grid_positions(const PatchGrid& grid) {
  std::vector<Pos> out;
  out.reserve(static_cast<std::size_t>(grid.token_count()));
  for (int t = 0; t < grid.t_patches; ++t)
    for (int r = 0; r < grid.rows; ++r)
      for (int c = 0; c < grid.cols; ++c) out.push_back({t, r, c});
  return out;
}

// Uniformly samples up to f_max frames. Videos at or under the limit keep all
// frames (padded by repeating the last one up to a temporal-patch multiple);
// longer ones are thinned with indices round(i*(T-1)/(f_max-1)), which always
// keeps the first and last frame.
template <typename T>
VisualSample<T> sample_frames(const VisualSample<T>& video, int f_max,
                              int temporal_patch = 2) {
  video.validate();
  NRVIT_CHECK(f_max >= 2, "sample_frames: f_max must be >= 2");
  NRVIT_CHECK(f_max % temporal_patch == 0,
              "sample_frames: f_max must be a multiple of temporal_patch");
  std::vector<int> indices;
  if (video.frames <= f_max) {
    for (int i = 0; i < video.frames; ++i) indices.push_back(i);
    while (indices.size() % static_cast<std::size_t>(temporal_patch) != 0)
      indices.push_back(video.frames - 1);
  } else {
    indices.reserve(static_cast<std::size_t>(f_max));
    for (int i = 0; i < f_max; ++i) {
      indices.push_back(static_cast<int>(std::lround(
          static_cast<double>(i) * (video.frames - 1) / (f_max - 1))));
    }
  }
  if (indices.size() == static_cast<std::size_t>(video.frames)) {
    bool identity = true;
    for (std::size_t i = 0; i < indices.size(); ++i)
      identity = identity && indices[i] == static_cast<int>(i);
    if (identity) return video;
  }
  VisualSample<T> out = make_sample<T>(static_cast<int>(indices.size()),
                                       video.channels, video.height,
                                       video.width, video.modality, video.id);
  const std::size_t frame_sz = static_cast<std::size_t>(video.channels) *
                               video.height * video.width;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(video.data.begin() + indices[i] * frame_sz, frame_sz,
                out.data.begin() + i * frame_sz);
  }
  return out;
}

// Duplicates a single-frame image into a two-frame clip so images and videos
// share the temporal patch path. Representation change only: the modality tag
// stays Image.
template <typename T>
VisualSample<T> image_to_video(const VisualSample<T>& image) {
  image.validate();
  NRVIT_CHECK(image.modality == Modality::Image,
              "image_to_video: sample is not an image");
  NRVIT_CHECK(image.frames == 1, "image_to_video: sample already has T > 1");
  VisualSample<T> out = make_sample<T>(2, image.channels, image.height,
                                       image.width, Modality::Image, image.id);
  const std::size_t frame_sz = image.data.size();
  std::copy(image.data.begin(), image.data.end(), out.data.begin());
  std::copy(image.data.begin(), image.data.end(),
            out.data.begin() + frame_sz);
  return out;
}

struct ResizeFixed {
  int size = 224;
};
struct ResizeNativeAspect {
  long target_tokens = 0;
};
struct ResizeNative {};
using ResizeMode = std::variant<ResizeFixed, ResizeNativeAspect, ResizeNative>;

namespace detail {

template <typename T>
VisualSample<T> center_crop(const VisualSample<T>& in, int out_h, int out_w) {
  NRVIT_CHECK(out_h <= in.height && out_w <= in.width,
              "center_crop: crop larger than image");
  if (out_h == in.height && out_w == in.width) return in;
  VisualSample<T> out = make_sample<T>(in.frames, in.channels, out_h, out_w,
                                       in.modality, in.id);
  const int oy = (in.height - out_h) / 2;
  const int ox = (in.width - out_w) / 2;
  for (int t = 0; t < in.frames; ++t)
    for (int c = 0; c < in.channels; ++c)
      for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
          out.at(t, c, y, x) = in.at(t, c, y + oy, x + ox);
  return out;
}

}  // namespace detail

// Grid planning for ResizeNativeAspect: the largest aspect-true quantized
// grid whose token count stays at or under the target.
inline std::pair<int, int> plan_native_aspect(int height, int width,
                                              long target_tokens, int patch,
                                              long t_patches) {
  NRVIT_CHECK(target_tokens >= 1, "resize_modes: target length must be >= 1");
  const double s = std::sqrt(static_cast<double>(target_tokens) * patch *
                             patch / (static_cast<double>(height) * width *
                                      static_cast<double>(t_patches)));
  const bool anchor_h = height <= width;
  const double a = anchor_h ? height : width;
  const double ratio = (anchor_h ? width : height) / a;
  const long base = std::max<long>(1, detail::floor_eps(s * a / patch));
  long best_a = -1, best_b = -1;
  long best_count = -1;
  double best_err = 0.0;
  for (long ap : {base, base + 1}) {
    const double exact = ratio * static_cast<double>(ap);
    for (long bp : {detail::floor_eps(exact),
                    static_cast<long>(std::ceil(exact - 1e-9))}) {
      if (ap < 1 || bp < 1) continue;
      const long count = ap * bp * t_patches;
      if (count > target_tokens) continue;
      const double err = std::abs(static_cast<double>(bp) / ap - ratio);
      if (count > best_count || (count == best_count && err < best_err)) {
        best_count = count;
        best_err = err;
        best_a = ap;
        best_b = bp;
      }
    }
  }
  NRVIT_CHECK(best_count >= 1, "resize_modes: degenerate result (0 patches)");
  const int a_px = static_cast<int>(best_a) * patch;
  const int b_px = static_cast<int>(best_b) * patch;
  return anchor_h ? std::make_pair(a_px, b_px) : std::make_pair(b_px, a_px);
}

// Fixed(S): shorter-edge resize plus center crop, exactly (S/p)^2 tokens per
// temporal patch. NativeAspect(L): aspect-preserving scale to at most L
// tokens. Native: center crop to the enclosing patch multiple.
template <typename T>
VisualSample<T> resize_modes(const VisualSample<T>& sample,
                             const ResizeMode& mode, int patch,
                             int temporal_patch = 2) {
  sample.validate();
  const long tp = temporal_patches(sample.frames, temporal_patch);
  if (std::holds_alternative<ResizeFixed>(mode)) {
    const int s = std::get<ResizeFixed>(mode).size;
    NRVIT_CHECK(s >= patch && s % patch == 0,
                "resize_modes: Fixed size must be a positive patch multiple");
    const double scale =
        static_cast<double>(s) / std::min(sample.height, sample.width);
    const int h =
        std::max<int>(s, static_cast<int>(std::lround(sample.height * scale)));
    const int w =
        std::max<int>(s, static_cast<int>(std::lround(sample.width * scale)));
    return detail::center_crop(bilinear_resize(sample, h, w), s, s);
  }
  if (std::holds_alternative<ResizeNativeAspect>(mode)) {
    const long target = std::get<ResizeNativeAspect>(mode).target_tokens;
    auto [h, w] =
        plan_native_aspect(sample.height, sample.width, target, patch, tp);
    return bilinear_resize(sample, h, w);
  }
  const int h = (sample.height / patch) * patch;
  const int w = (sample.width / patch) * patch;
  NRVIT_CHECK(h >= patch && w >= patch,
              "resize_modes: degenerate result (0 patches)");
  return detail::center_crop(sample, h, w);
}

// Per-channel (x - mean) / std, applied after pixels are scaled to [0,1].
template <typename T>
VisualSample<T> normalize(const VisualSample<T>& sample,
                          const std::array<double, 3>& mean = {0.5, 0.5, 0.5},
                          const std::array<double, 3>& stddev = {0.5, 0.5,
                                                                 0.5}) {
  sample.validate();
  NRVIT_CHECK(sample.channels <= 3, "normalize: expects at most 3 channels");
  VisualSample<T> out = sample;
  for (int t = 0; t < out.frames; ++t)
    for (int c = 0; c < out.channels; ++c) {
      const T m = static_cast<T>(mean[static_cast<std::size_t>(c)]);
      const T inv = static_cast<T>(1.0 / stddev[static_cast<std::size_t>(c)]);
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
          out.at(t, c, y, x) = (out.at(t, c, y, x) - m) * inv;
    }
  return out;
}

}  // namespace nrvit
