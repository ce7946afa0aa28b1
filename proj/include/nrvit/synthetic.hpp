#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "nrvit/data.hpp"
#include "nrvit/pipeline.hpp"

namespace nrvit {

// Procedurally generated image-caption pairs: one colored shape per canvas,
// placed in a 3x3 position grid at one of two sizes, with templated captions
// ("a photo of a large red circle in the top left"). Holdout pairs cover 200+
// distinct attribute combinations so retrieval has unique targets.
namespace synthetic {

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v{"circle", "square", "triangle",
                                          "ring",   "cross",  "diamond"};
  return v;
}

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v{"red",     "green", "blue", "yellow",
                                          "magenta", "cyan",  "white"};
  return v;
}

inline const std::vector<std::array<double, 3>>& color_values() {
  static const std::vector<std::array<double, 3>> v{
      {0.95, 0.15, 0.15}, {0.15, 0.9, 0.2},  {0.2, 0.3, 0.95},
      {0.95, 0.9, 0.15},  {0.9, 0.2, 0.9},   {0.15, 0.9, 0.9},
      {0.95, 0.95, 0.95}};
  return v;
}

inline const std::vector<std::string>& position_names() {
  static const std::vector<std::string> v{
      "top left",    "top center",    "top right",
      "middle left", "center",        "middle right",
      "bottom left", "bottom center", "bottom right"};
  return v;
}

inline const std::vector<std::string>& size_names() {
  static const std::vector<std::string> v{"small", "large"};
  return v;
}

inline const std::vector<std::string>& direction_names() {
  static const std::vector<std::string> v{"left", "right", "up", "down"};
  return v;
}

struct Combo {
  int shape = 0;
  int color = 0;
  int position = 0;  // row-major cell of the 3x3 grid
  int size = 0;
};

inline long combo_count() {
  return static_cast<long>(shape_names().size() * color_names().size() *
                           position_names().size() * size_names().size());
}

inline Combo combo_from_index(long idx) {
  Combo c;
  c.size = static_cast<int>(idx % 2);
  idx /= 2;
  c.position = static_cast<int>(idx % 9);
  idx /= 9;
  c.color = static_cast<int>(idx % static_cast<long>(color_names().size()));
  idx /= static_cast<long>(color_names().size());
  c.shape = static_cast<int>(idx);
  return c;
}

inline std::string image_caption(const Combo& c) {
  return "a photo of a " + size_names()[static_cast<std::size_t>(c.size)] +
         " " + color_names()[static_cast<std::size_t>(c.color)] + " " +
         shape_names()[static_cast<std::size_t>(c.shape)] + " in the " +
         position_names()[static_cast<std::size_t>(c.position)];
}

inline bool inside_shape(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case 2:  // triangle (apex up)
      return dy >= -r && dy <= 0.8 * r && std::abs(dx) <= 0.55 * (dy + r);
    case 3: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * 0.45 * r * r;
    }
    case 4:  // cross
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    default:  // diamond
      return std::abs(dx) + std::abs(dy) <= r;
  }
}

template <typename T>
VisualSample<T> render_image(const Combo& c, int height, int width,
                             std::uint64_t noise_seed, std::string id,
                             double jitter_x = 0.0, double jitter_y = 0.0) {
  Rng noise(noise_seed);
  auto img = make_sample<T>(1, 3, height, width, Modality::Image,
                            std::move(id));
  const auto& rgb = color_values()[static_cast<std::size_t>(c.color)];
  const int cell_r = c.position / 3, cell_c = c.position % 3;
  const double cx = width * (cell_c + 0.5) / 3.0 + jitter_x;
  const double cy = height * (cell_r + 0.5) / 3.0 + jitter_y;
  const double r =
      (c.size == 0 ? 0.09 : 0.155) * std::min(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const bool in = inside_shape(c.shape, x - cx, y - cy, r);
      for (int ch = 0; ch < 3; ++ch) {
        const double base = in ? rgb[static_cast<std::size_t>(ch)] : 0.12;
        img.at(0, ch, y, x) =
            static_cast<T>(std::clamp(base + 0.03 * noise.uniform(), 0.0, 1.0));
      }
    }
  return img;
}

struct VideoSpec {
  Combo combo;       // position field unused for videos
  int direction = 0;
  int frames = 8;
};

inline std::string video_caption(const VideoSpec& v) {
  return "a video of a " + color_names()[static_cast<std::size_t>(v.combo.color)] +
         " " + shape_names()[static_cast<std::size_t>(v.combo.shape)] +
         " moving " + direction_names()[static_cast<std::size_t>(v.direction)];
}

template <typename T>
VisualSample<T> render_video(const VideoSpec& spec, int height, int width,
                             std::uint64_t noise_seed, std::string id) {
  Rng noise(noise_seed);
  auto video = make_sample<T>(spec.frames, 3, height, width, Modality::Video,
                              std::move(id));
  const auto& rgb = color_values()[static_cast<std::size_t>(spec.combo.color)];
  const double r = 0.13 * std::min(height, width);
  const double span = 0.5 * std::min(height, width) - r;
  for (int t = 0; t < spec.frames; ++t) {
    const double progress =
        spec.frames == 1 ? 0.0 : 2.0 * t / (spec.frames - 1.0) - 1.0;
    double cx = width / 2.0, cy = height / 2.0;
    switch (spec.direction) {
      case 0: cx -= progress * span; break;  // left
      case 1: cx += progress * span; break;  // right
      case 2: cy -= progress * span; break;  // up
      default: cy += progress * span; break; // down
    }
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const bool in = inside_shape(spec.combo.shape, x - cx, y - cy, r);
        for (int ch = 0; ch < 3; ++ch) {
          const double base = in ? rgb[static_cast<std::size_t>(ch)] : 0.12;
          video.at(t, ch, y, x) = static_cast<T>(
              std::clamp(base + 0.03 * noise.uniform(), 0.0, 1.0));
        }
      }
  }
  return video;
}

}  // namespace synthetic

struct SyntheticSpec {
  long n_train_images = 2000;
  long n_holdout = 200;
  long n_videos = 64;
  std::uint64_t seed = 1234;
  // Canvas sides are drawn from this range (native resolutions vary).
  int min_side = 42;
  int max_side = 70;
};

// Deterministic in-memory corpus: every sample is re-rendered on demand from
// its id, so epochs never pay for storage.
template <typename T>
class SyntheticCorpus : public CorpusInterface<T> {
 public:
  explicit SyntheticCorpus(const SyntheticSpec& spec = {}) : spec_(spec) {
    std::set<std::string> words;
    auto add_words = [&words](const std::string& s) {
      std::istringstream ss(s);
      std::string w;
      while (ss >> w) words.insert(w);
    };
    // Vocabulary covers the full template space, not just sampled captions.
    for (long i = 0; i < synthetic::combo_count(); ++i)
      add_words(synthetic::image_caption(synthetic::combo_from_index(i)));
    for (int d = 0; d < 4; ++d) {
      synthetic::VideoSpec v;
      v.combo = synthetic::combo_from_index(0);
      v.direction = d;
      add_words(synthetic::video_caption(v));
    }
    for (const auto& s : synthetic::shape_names()) add_words(s);
    for (const auto& c : synthetic::color_names()) add_words(c);
    add_words("an image of a picture");
    vocab_ = Vocabulary(words);

    for (long i = 0; i < spec_.n_train_images; ++i)
      image_ids_.push_back("img" + std::to_string(i));
    for (long i = 0; i < spec_.n_videos; ++i)
      video_ids_.push_back("vid" + std::to_string(i));

    // Holdout combos are distinct so every held-out caption is unique.
    std::vector<long> all(static_cast<std::size_t>(synthetic::combo_count()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<long>(i);
    Rng rng(derive_seed(spec_.seed, 0x801d));
    rng.shuffle(all);
    NRVIT_CHECK(spec_.n_holdout <= static_cast<long>(all.size()),
                "SyntheticCorpus: holdout larger than combination space");
    holdout_combos_.assign(all.begin(), all.begin() + spec_.n_holdout);
  }

  std::vector<std::string> image_ids() const override { return image_ids_; }
  std::vector<std::string> video_ids() const override { return video_ids_; }

  VisualSample<T> load(const std::string& id) const override {
    if (id.rfind("img", 0) == 0) {
      const long i = std::stol(id.substr(3));
      return render_train_image(i);
    }
    if (id.rfind("vid", 0) == 0) {
      const long i = std::stol(id.substr(3));
      return render_train_video(i);
    }
    if (id.rfind("ho", 0) == 0) {
      const long i = std::stol(id.substr(2));
      return holdout_image(i);
    }
    throw std::invalid_argument("SyntheticCorpus: unknown id '" + id + "'");
  }

  std::vector<int> caption_tokens(const std::string& id) const override {
    return vocab_.tokenize(caption_text(id));
  }

  std::string caption_text(const std::string& id) const {
    if (id.rfind("img", 0) == 0) {
      const long i = std::stol(id.substr(3));
      return synthetic::image_caption(train_combo(i));
    }
    if (id.rfind("vid", 0) == 0) {
      const long i = std::stol(id.substr(3));
      return synthetic::video_caption(video_spec(i));
    }
    if (id.rfind("ho", 0) == 0) {
      const long i = std::stol(id.substr(2));
      return synthetic::image_caption(holdout_combo(i));
    }
    throw std::invalid_argument("SyntheticCorpus: unknown id '" + id + "'");
  }

  std::vector<std::string> holdout_ids() const {
    std::vector<std::string> out;
    for (long i = 0; i < spec_.n_holdout; ++i)
      out.push_back("ho" + std::to_string(i));
    return out;
  }

  synthetic::Combo holdout_combo(long i) const {
    return synthetic::combo_from_index(
        holdout_combos_[static_cast<std::size_t>(i)]);
  }

  VisualSample<T> holdout_image(long i) const {
    auto geo = geometry(derive_seed(spec_.seed, 0xa000 + i));
    return synthetic::render_image<T>(holdout_combo(i), geo.first, geo.second,
                                      derive_seed(spec_.seed, 0xb000 + i),
                                      "ho" + std::to_string(i));
  }

  // Shape index of a sample, used as the probe/classification label.
  int shape_label(const std::string& id) const {
    if (id.rfind("img", 0) == 0) return train_combo(std::stol(id.substr(3))).shape;
    if (id.rfind("ho", 0) == 0) return holdout_combo(std::stol(id.substr(2))).shape;
    if (id.rfind("vid", 0) == 0)
      return video_spec(std::stol(id.substr(3))).combo.shape;
    throw std::invalid_argument("SyntheticCorpus: unknown id '" + id + "'");
  }

  const Vocabulary& vocab() const { return vocab_; }
  const SyntheticSpec& spec() const { return spec_; }

 private:
  std::pair<int, int> geometry(std::uint64_t seed) const {
    Rng rng(seed);
    auto side = [&] {
      const int span = spec_.max_side - spec_.min_side + 1;
      return spec_.min_side + static_cast<int>(rng.uniform_int(span));
    };
    return {side(), side()};
  }

  synthetic::Combo train_combo(long i) const {
    Rng rng(derive_seed(spec_.seed, 0x1000 + i));
    return synthetic::combo_from_index(
        rng.uniform_int(synthetic::combo_count()));
  }

  VisualSample<T> render_train_image(long i) const {
    auto geo = geometry(derive_seed(spec_.seed, 0x2000 + i));
    Rng rng(derive_seed(spec_.seed, 0x3000 + i));
    const double jx = rng.uniform(-2.0, 2.0);
    const double jy = rng.uniform(-2.0, 2.0);
    return synthetic::render_image<T>(train_combo(i), geo.first, geo.second,
                                      derive_seed(spec_.seed, 0x4000 + i),
                                      "img" + std::to_string(i), jx, jy);
  }

  synthetic::VideoSpec video_spec(long i) const {
    Rng rng(derive_seed(spec_.seed, 0x5000 + i));
    synthetic::VideoSpec v;
    v.combo = synthetic::combo_from_index(
        rng.uniform_int(synthetic::combo_count()));
    v.direction = static_cast<int>(rng.uniform_int(4));
    static const int lengths[] = {4, 6, 8, 10, 12, 16};
    v.frames = lengths[rng.uniform_int(6)];
    return v;
  }

  VisualSample<T> render_train_video(long i) const {
    const auto spec = video_spec(i);
    // Videos stay at or above 56px so natural clips meet the token floor.
    Rng rng(derive_seed(spec_.seed, 0x6000 + i));
    const int h = 56 + static_cast<int>(rng.uniform_int(15));
    const int w = 56 + static_cast<int>(rng.uniform_int(15));
    return synthetic::render_video<T>(spec, h, w,
                                      derive_seed(spec_.seed, 0x7000 + i),
                                      "vid" + std::to_string(i));
  }

  SyntheticSpec spec_;
  Vocabulary vocab_;
  std::vector<std::string> image_ids_, video_ids_;
  std::vector<long> holdout_combos_;
};

}  // namespace nrvit
