#pragma once

// Planar float rasters for images, edge maps, region masks and heatmaps.
// Each kind is its own type so an EdgeMap cannot be passed where a RegionMask
// is expected; `retag` converts explicitly when that is intended.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "anomalyfactory/errors.hpp"
#include "anomalyfactory/tensor.hpp"

namespace af {

struct RgbTag {};
struct EdgeTag {};
struct MaskTag {};
struct HeatTag {};

template <typename Tag>
class Raster {
 public:
  using tag = Tag;

  Raster() = default;
  Raster(int height, int width, int channels, float fill = 0.0f)
      : height_(height),
        width_(width),
        channels_(channels),
        px_(static_cast<std::size_t>(height) * width * channels, fill) {
    if (height < 0 || width < 0 || channels <= 0) throw ContractError("Raster: bad dimensions");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const noexcept { return px_.size(); }
  bool empty() const noexcept { return px_.empty(); }

  float& at(int c, int y, int x) noexcept { return px_[(c * plane()) + static_cast<std::size_t>(y) * width_ + x]; }
  float at(int c, int y, int x) const noexcept {
    return px_[(c * plane()) + static_cast<std::size_t>(y) * width_ + x];
  }
  float& operator()(int y, int x) noexcept { return at(0, y, x); }
  float operator()(int y, int x) const noexcept { return at(0, y, x); }

  std::vector<float>& pixels() noexcept { return px_; }
  const std::vector<float>& pixels() const noexcept { return px_; }

  bool same_size(int height, int width) const noexcept { return height_ == height && width_ == width; }
  template <typename U>
  bool aligned_with(const Raster<U>& o) const noexcept {
    return height_ == o.height() && width_ == o.width();
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.channels_ == b.channels_ &&
           a.px_ == b.px_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<float> px_;
};

using ImageTensor = Raster<RgbTag>;
using EdgeMap = Raster<EdgeTag>;
using RegionMask = Raster<MaskTag>;
using Heatmap = Raster<HeatTag>;

inline ImageTensor make_image(int height, int width, float fill = 0.0f) {
  return ImageTensor(height, width, 3, fill);
}
inline EdgeMap make_edge(int height, int width, float fill = 0.0f) { return EdgeMap(height, width, 1, fill); }
inline RegionMask make_mask(int height, int width, float fill = 0.0f) {
  return RegionMask(height, width, 1, fill);
}
inline Heatmap make_heatmap(int height, int width, float fill = 0.0f) {
  return Heatmap(height, width, 1, fill);
}

template <typename To, typename From>
Raster<To> retag(const Raster<From>& r) {
  Raster<To> out(r.height(), r.width(), r.channels());
  out.pixels() = r.pixels();
  return out;
}

template <typename Tag>
void require_aligned(const char* op, const ImageTensor& image, const Raster<Tag>& other) {
  if (!image.aligned_with(other))
    throw ContractError(std::string(op) + ": inputs are not spatially aligned");
}

// Fraction of ones in a mask.
inline double area_fraction(const RegionMask& m) {
  if (m.empty()) return 0.0;
  std::size_t ones = 0;
  for (float v : m.pixels()) ones += v > 0.5f ? 1 : 0;
  return static_cast<double>(ones) / static_cast<double>(m.plane());
}

inline std::size_t area_pixels(const RegionMask& m) {
  std::size_t ones = 0;
  for (float v : m.pixels()) ones += v > 0.5f ? 1 : 0;
  return ones;
}

inline RegionMask mask_union(const RegionMask& a, const RegionMask& b) {
  if (!a.aligned_with(b)) throw ContractError("mask_union: size mismatch");
  RegionMask out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels()[i] = std::max(a.pixels()[i], b.pixels()[i]);
  return out;
}

inline double mask_iou(const RegionMask& a, const RegionMask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.pixels()[i] > 0.5f, y = b.pixels()[i] > 0.5f;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <typename Tag>
void clamp_unit(Raster<Tag>& r) {
  for (auto& v : r.pixels()) v = std::clamp(v, 0.0f, 1.0f);
}

template <typename Tag>
bool in_unit_range(const Raster<Tag>& r) {
  return std::all_of(r.pixels().begin(), r.pixels().end(),
                     [](float v) { return v >= 0.0f && v <= 1.0f; });
}

// Raster <-> 1xCxHxW tensor conversion.
template <typename T, typename Tag>
Tensor<T> to_tensor(const Raster<Tag>& r) {
  Tensor<T> t(1, r.channels(), r.height(), r.width());
  for (std::size_t i = 0; i < r.size(); ++i) t[i] = static_cast<T>(r.pixels()[i]);
  return t;
}

template <typename Tag, typename T>
Raster<Tag> from_tensor(const Tensor<T>& t, int sample = 0) {
  Raster<Tag> r(t.h(), t.w(), t.c());
  const std::size_t stride = static_cast<std::size_t>(t.c()) * t.plane();
  for (std::size_t i = 0; i < stride; ++i)
    r.pixels()[i] = static_cast<float>(t[static_cast<std::size_t>(sample) * stride + i]);
  return r;
}

// Bilinear sample with border clamping.
template <typename Tag>
float sample_bilinear(const Raster<Tag>& r, int c, double y, double x) {
  const double yc = std::clamp(y, 0.0, static_cast<double>(r.height() - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(r.width() - 1));
  const int y0 = static_cast<int>(std::floor(yc));
  const int x0 = static_cast<int>(std::floor(xc));
  const int y1 = std::min(y0 + 1, r.height() - 1);
  const int x1 = std::min(x0 + 1, r.width() - 1);
  const double fy = yc - y0, fx = xc - x0;
  if (fy == 0.0 && fx == 0.0) return r.at(c, y0, x0);
  const double v = r.at(c, y0, x0) * (1 - fy) * (1 - fx) + r.at(c, y0, x1) * (1 - fy) * fx +
                   r.at(c, y1, x0) * fy * (1 - fx) + r.at(c, y1, x1) * fy * fx;
  return static_cast<float>(v);
}

// Bilinear resize (pixel-centre aligned).
template <typename Tag>
Raster<Tag> resize_bilinear(const Raster<Tag>& src, int height, int width) {
  if (src.same_size(height, width)) return src;
  Raster<Tag> out(height, width, src.channels());
  const double sy = static_cast<double>(src.height()) / height;
  const double sx = static_cast<double>(src.width()) / width;
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        out.at(c, y, x) = sample_bilinear(src, c, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
  return out;
}

template <typename Tag>
Raster<Tag> resize_nearest(const Raster<Tag>& src, int height, int width) {
  if (src.same_size(height, width)) return src;
  Raster<Tag> out(height, width, src.channels());
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < height; ++y) {
      const int sy = std::min(src.height() - 1, static_cast<int>((y + 0.5) * src.height() / height));
      for (int x = 0; x < width; ++x) {
        const int sx = std::min(src.width() - 1, static_cast<int>((x + 0.5) * src.width() / width));
        out.at(c, y, x) = src.at(c, sy, sx);
      }
    }
  return out;
}

}  // namespace af
