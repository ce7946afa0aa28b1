#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nrvit/ingest.hpp"

namespace nrvit {

namespace detail {

inline int ppm_next_value(std::istream& in) {
  // Skips whitespace and '#' comments between header fields.
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  return v;
}

}  // namespace detail

// Binary PPM (P6) and PGM (P5); grayscale is replicated to three channels.
template <typename T>
VisualSample<T> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5")
    throw std::runtime_error("read_ppm: unsupported magic '" + magic + "' in " +
                             path);
  const int w = detail::ppm_next_value(in);
  const int h = detail::ppm_next_value(in);
  const int maxval = detail::ppm_next_value(in);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw std::runtime_error("read_ppm: bad header in " + path);
  in.get();  // single whitespace before raster
  const int src_ch = magic == "P6" ? 3 : 1;
  const int bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * src_ch *
                                 bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("read_ppm: truncated raster in " + path);

  auto out = make_sample<T>(1, 3, h, w, Modality::Image,
                            std::filesystem::path(path).stem().string());
  const double scale = 1.0 / maxval;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int sc = src_ch == 3 ? c : 0;
        const std::size_t idx =
            (static_cast<std::size_t>(y) * w + x) * src_ch + sc;
        int v;
        if (bytes_per == 2)
          v = raw[idx * 2] << 8 | raw[idx * 2 + 1];  // big-endian per PPM spec
        else
          v = raw[idx];
        out.at(0, c, y, x) = static_cast<T>(v * scale);
      }
    }
  }
  return out;
}

template <typename T>
void write_ppm(const std::string& path, const VisualSample<T>& img,
               int frame = 0) {
  NRVIT_CHECK(img.channels == 3, "write_ppm: expects 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img.at(frame, c, y, x)),
                                    0.0, 1.0);
        out.put(static_cast<char>(std::lround(v * 255.0)));
      }
}

template <typename T>
VisualSample<T> read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng init failed");
  }
  std::vector<png_bytep> rows;
  std::vector<unsigned char> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: failed to decode " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  // Normalize everything to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  data.resize(rowbytes * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  auto out = make_sample<T>(1, 3, static_cast<int>(h), static_cast<int>(w),
                            Modality::Image,
                            std::filesystem::path(path).stem().string());
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(0, c, static_cast<int>(y), static_cast<int>(x)) =
            static_cast<T>(data[y * rowbytes + x * 3 +
                                static_cast<std::size_t>(c)] / 255.0);
  return out;
}

template <typename T>
void write_png(const std::string& path, const VisualSample<T>& img,
               int frame = 0) {
  NRVIT_CHECK(img.channels == 3, "write_png: expects 3 channels");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng init failed");
  }
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: failed to encode " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img.at(frame, c, y, x)),
                                    0.0, 1.0);
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

template <typename T>
VisualSample<T> load_image(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".png") return read_png<T>(path);
  if (ext == ".ppm" || ext == ".pgm") return read_ppm<T>(path);
  throw std::runtime_error("load_image: unsupported extension '" + ext +
                           "' for " + path);
}

// A video is a directory of numbered frame images; frames are ordered by the
// numeric value embedded in their filenames.
template <typename T>
VisualSample<T> load_video_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  NRVIT_CHECK(fs::is_directory(dir), "load_video_dir: not a directory");
  std::vector<std::pair<long, fs::path>> frames;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (ext != ".png" && ext != ".ppm" && ext != ".pgm") continue;
    const std::string stem = e.path().stem().string();
    long num = 0;
    bool any_digit = false;
    for (char ch : stem)
      if (std::isdigit(static_cast<unsigned char>(ch))) {
        num = num * 10 + (ch - '0');
        any_digit = true;
      }
    frames.emplace_back(any_digit ? num : 0, e.path());
  }
  if (frames.empty())
    throw std::runtime_error("load_video_dir: no frames in " + dir);
  std::sort(frames.begin(), frames.end(),
            [](const auto& a, const auto& b) {
              return a.first != b.first ? a.first < b.first
                                        : a.second < b.second;
            });
  VisualSample<T> first = load_image<T>(frames.front().second.string());
  auto out = make_sample<T>(static_cast<int>(frames.size()), 3, first.height,
                            first.width, Modality::Video,
                            std::filesystem::path(dir).stem().string());
  const std::size_t frame_sz = first.data.size();
  std::copy(first.data.begin(), first.data.end(), out.data.begin());
  for (std::size_t i = 1; i < frames.size(); ++i) {
    VisualSample<T> f = load_image<T>(frames[i].second.string());
    NRVIT_CHECK(f.height == first.height && f.width == first.width,
                "load_video_dir: frames disagree on dimensions");
    std::copy(f.data.begin(), f.data.end(),
              out.data.begin() + static_cast<long>(i * frame_sz));
  }
  return out;
}

}  // namespace nrvit
