#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "anomalyfactory/errors.hpp"
#include "anomalyfactory/raster.hpp"

namespace af::png {

struct Pixels8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<std::uint8_t> bytes;  // interleaved
};

inline Pixels8 read(const std::filesystem::path& path, int channels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Pixels8 out;
  out.height = static_cast<int>(image.height);
  out.width = static_cast<int>(image.width);
  out.channels = channels;
  out.bytes.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  return out;
}

inline void write(const std::filesystem::path& path, const Pixels8& px) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(px.width);
  image.height = static_cast<png_uint_32>(px.height);
  image.format = px.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, px.bytes.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

template <typename Tag>
Raster<Tag> read_raster(const std::filesystem::path& path, int channels) {
  const Pixels8 px = read(path, channels);
  Raster<Tag> out(px.height, px.width, channels);
  for (int y = 0; y < px.height; ++y)
    for (int x = 0; x < px.width; ++x)
      for (int c = 0; c < channels; ++c)
        out.at(c, y, x) = px.bytes[(static_cast<std::size_t>(y) * px.width + x) * channels + c] / 255.0f;
  return out;
}

template <typename Tag>
void write_raster(const std::filesystem::path& path, const Raster<Tag>& r) {
  if (r.channels() != 1 && r.channels() != 3) throw ContractError("write_raster: need 1 or 3 channels");
  Pixels8 px{r.height(), r.width(), r.channels(), {}};
  px.bytes.resize(r.size());
  for (int y = 0; y < r.height(); ++y)
    for (int x = 0; x < r.width(); ++x)
      for (int c = 0; c < r.channels(); ++c)
        px.bytes[(static_cast<std::size_t>(y) * r.width() + x) * r.channels() + c] = quantize(r.at(c, y, x));
  write(path, px);
}

inline ImageTensor read_image(const std::filesystem::path& p) { return read_raster<RgbTag>(p, 3); }
inline EdgeMap read_edge(const std::filesystem::path& p) { return read_raster<EdgeTag>(p, 1); }

// Label image: value k marks region k, 0 is background.
inline std::vector<RegionMask> read_label_regions(const std::filesystem::path& path) {
  const Pixels8 px = read(path, 1);
  int max_label = 0;
  for (auto b : px.bytes) max_label = std::max<int>(max_label, b);
  std::vector<RegionMask> masks;
  for (int k = 1; k <= max_label; ++k) {
    RegionMask m = make_mask(px.height, px.width);
    bool any = false;
    for (std::size_t i = 0; i < px.bytes.size(); ++i)
      if (px.bytes[i] == k) {
        m.pixels()[i] = 1.0f;
        any = true;
      }
    if (any) masks.push_back(std::move(m));
  }
  return masks;
}

// Later regions overwrite earlier ones where they overlap; at most 255 regions.
inline void write_label_regions(const std::filesystem::path& path, int height, int width,
                                const std::vector<RegionMask>& regions) {
  if (regions.size() > 255) throw ContractError("write_label_regions: more than 255 regions");
  Pixels8 px{height, width, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0)};
  for (std::size_t k = 0; k < regions.size(); ++k) {
    if (!regions[k].same_size(height, width)) throw ContractError("write_label_regions: size mismatch");
    for (std::size_t i = 0; i < px.bytes.size(); ++i)
      if (regions[k].pixels()[i] > 0.5f) px.bytes[i] = static_cast<std::uint8_t>(k + 1);
  }
  write(path, px);
}

inline std::pair<int, int> dimensions(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw IoError("cannot decode PNG '" + path.string() + "': " + image.message);
  const std::pair<int, int> dims{static_cast<int>(image.height), static_cast<int>(image.width)};
  png_image_free(&image);
  return dims;
}

}  // namespace af::png
