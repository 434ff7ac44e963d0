#pragma once

// Geometric augmentations used to build BootGenerator training triplets.
// Every augmentation is a backward coordinate map applied with bilinear
// sampling, and the image and its edge map always go through the same map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "anomalyfactory/errors.hpp"
#include "anomalyfactory/raster.hpp"
#include "anomalyfactory/seeding.hpp"

namespace af {

enum class FlipMode { none, top_bottom, left_right };

struct AugmentParams {
  int tps_grid = 3;
  double tps_patch_fraction = 0.5;
  double tps_max_shift = 0.1;
  std::pair<double, double> rtp_scale_range{0.6, 1.0};
  std::pair<double, double> rtp_translate_range{-0.15, 0.15};
  float pad_value = 0.0f;
  std::vector<FlipMode> flip_modes{FlipMode::none, FlipMode::top_bottom, FlipMode::left_right};
  // Per-augmentation application probabilities inside a sampled chain.
  double p_tps = 0.5;
  double p_rtp = 0.5;
  double p_flip = 0.5;
  bool use_local_tps = true;

  void validate() const {
    if (tps_grid < 2) throw ParameterError("AugmentParams: tps_grid must be >= 2");
    if (tps_max_shift < 0.0 || tps_max_shift > 0.5)
      throw ParameterError("AugmentParams: tps_max_shift must lie in [0, 0.5]");
    if (tps_patch_fraction <= 0.0) throw ParameterError("AugmentParams: tps_patch_fraction must be > 0");
    if (rtp_scale_range.first <= 0.0 || rtp_scale_range.second < rtp_scale_range.first)
      throw ParameterError("AugmentParams: rtp scale range must be positive and ordered");
  }
};

// Backward map from output pixel (y, x) to a source position; positions outside
// the image read `pad` (when padding is enabled) instead of clamping.
struct CoordinateMap {
  int height = 0, width = 0;
  std::vector<double> src_y, src_x;  // per output pixel
  bool pad_outside = false;

  bool identity_at(std::size_t i) const {
    return src_y[i] == static_cast<double>(i / width) && src_x[i] == static_cast<double>(i % width);
  }
};

inline CoordinateMap identity_map(int height, int width) {
  CoordinateMap m{height, width, {}, {}, false};
  m.src_y.resize(static_cast<std::size_t>(height) * width);
  m.src_x.resize(m.src_y.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      m.src_y[static_cast<std::size_t>(y) * width + x] = y;
      m.src_x[static_cast<std::size_t>(y) * width + x] = x;
    }
  return m;
}

template <typename Tag>
Raster<Tag> apply_map(const Raster<Tag>& src, const CoordinateMap& map, float pad) {
  Raster<Tag> out(src.height(), src.width(), src.channels());
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < src.height(); ++y)
      for (int x = 0; x < src.width(); ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * src.width() + x;
        const double sy = map.src_y[i], sx = map.src_x[i];
        if (map.pad_outside && (sy < -0.5 || sy > src.height() - 0.5 || sx < -0.5 || sx > src.width() - 0.5)) {
          out.at(c, y, x) = pad;
          continue;
        }
        out.at(c, y, x) = sample_bilinear(src, c, sy, sx);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Thin-plate spline

// Interpolating TPS with radial basis r^2 log r, fitted independently per axis.
class ThinPlateSpline {
 public:
  ThinPlateSpline(std::vector<std::pair<double, double>> points, const std::vector<double>& values_y,
                  const std::vector<double>& values_x)
      : points_(std::move(points)) {
    const int n = static_cast<int>(points_.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 3, n + 3);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) a(i, j) = kernel(points_[i], points_[j]);
      a(i, n) = 1.0;
      a(i, n + 1) = points_[i].first;
      a(i, n + 2) = points_[i].second;
      a(n, i) = 1.0;
      a(n + 1, i) = points_[i].first;
      a(n + 2, i) = points_[i].second;
    }
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
    for (int i = 0; i < n; ++i) {
      rhs(i, 0) = values_y[i];
      rhs(i, 1) = values_x[i];
    }
    coef_ = a.fullPivLu().solve(rhs);
  }

  std::pair<double, double> operator()(double y, double x) const {
    const int n = static_cast<int>(points_.size());
    double fy = coef_(n, 0) + coef_(n + 1, 0) * y + coef_(n + 2, 0) * x;
    double fx = coef_(n, 1) + coef_(n + 1, 1) * y + coef_(n + 2, 1) * x;
    for (int i = 0; i < n; ++i) {
      const double u = kernel(points_[i], {y, x});
      fy += coef_(i, 0) * u;
      fx += coef_(i, 1) * u;
    }
    return {fy, fx};
  }

  static double kernel(std::pair<double, double> a, std::pair<double, double> b) {
    const double r2 = (a.first - b.first) * (a.first - b.first) + (a.second - b.second) * (a.second - b.second);
    return r2 <= 0.0 ? 0.0 : 0.5 * r2 * std::log(r2);  // r^2 log r
  }

 private:
  std::vector<std::pair<double, double>> points_;
  Eigen::MatrixXd coef_;
};

// A grid x grid set of interior control points inside a square patch is shifted
// by seeded offsets; the patch boundary is pinned so the warp stays local.
inline CoordinateMap local_tps_map(int height, int width, const AugmentParams& params, std::uint64_t seed) {
  params.validate();
  const int side = static_cast<int>(std::lround(params.tps_patch_fraction * std::min(height, width)));
  if (params.tps_patch_fraction > 1.0 || side > std::min(height, width))
    throw ParameterError("local_tps_warp: patch larger than image");
  CoordinateMap map = identity_map(height, width);
  if (side < 2 || params.tps_max_shift == 0.0) return map;

  std::mt19937_64 rng(seed);
  const int top = std::uniform_int_distribution<int>(0, height - side)(rng);
  const int left = std::uniform_int_distribution<int>(0, width - side)(rng);
  const double max_shift = params.tps_max_shift * side;
  std::uniform_real_distribution<double> shift(-max_shift, max_shift);

  const int g = params.tps_grid;
  const double span = side - 1;
  std::vector<std::pair<double, double>> pts;
  std::vector<double> dy, dx;
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) {
      pts.emplace_back(top + span * (i + 1) / (g + 1), left + span * (j + 1) / (g + 1));
      dy.push_back(shift(rng));
      dx.push_back(shift(rng));
    }
  for (int k = 0; k <= g + 1; ++k) {
    const double t = span * k / (g + 1);
    for (auto p : {std::pair{top + t, static_cast<double>(left)}, std::pair{top + t, left + span},
                   std::pair{static_cast<double>(top), left + t}, std::pair{top + span, left + t}}) {
      if (std::find(pts.begin(), pts.end(), p) != pts.end()) continue;
      pts.push_back(p);
      dy.push_back(0.0);
      dx.push_back(0.0);
    }
  }
  const ThinPlateSpline tps(std::move(pts), dy, dx);
  for (int y = top; y < top + side; ++y)
    for (int x = left; x < left + side; ++x) {
      const auto [oy, ox] = tps(y, x);
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      map.src_y[i] = y + oy;
      map.src_x[i] = x + ox;
    }
  return map;
}

inline std::pair<ImageTensor, EdgeMap> local_tps_warp(const ImageTensor& image, const EdgeMap& edge,
                                                      const AugmentParams& params, std::uint64_t seed) {
  require_aligned("local_tps_warp", image, edge);
  const CoordinateMap map = local_tps_map(image.height(), image.width(), params, seed);
  return {apply_map(image, map, params.pad_value), apply_map(edge, map, 0.0f)};
}

// ---------------------------------------------------------------------------
// Resize - translate - pad

inline CoordinateMap rtp_map(int height, int width, double scale, double ty, double tx) {
  if (scale <= 0.0) throw ParameterError("resize_translate_pad: scale must be > 0");
  CoordinateMap map{height, width, {}, {}, true};
  map.src_y.resize(static_cast<std::size_t>(height) * width);
  map.src_x.resize(map.src_y.size());
  const double cy = height / 2.0, cx = width / 2.0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      map.src_y[i] = (y + 0.5 - cy - ty) / scale + cy - 0.5;
      map.src_x[i] = (x + 0.5 - cx - tx) / scale + cx - 0.5;
    }
  return map;
}

struct RtpDraw {
  double scale = 1.0, ty = 0.0, tx = 0.0;  // translation in pixels
};

inline RtpDraw sample_rtp(int height, int width, const AugmentParams& params, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto [s0, s1] = params.rtp_scale_range;
  const auto [t0, t1] = params.rtp_translate_range;
  RtpDraw d;
  d.scale = s0 + (s1 - s0) * unit(rng);
  d.ty = (t0 + (t1 - t0) * unit(rng)) * height;
  d.tx = (t0 + (t1 - t0) * unit(rng)) * width;
  return d;
}

inline std::pair<ImageTensor, EdgeMap> resize_translate_pad(const ImageTensor& image, const EdgeMap& edge,
                                                            const RtpDraw& draw, float pad_value) {
  require_aligned("resize_translate_pad", image, edge);
  const CoordinateMap map = rtp_map(image.height(), image.width(), draw.scale, draw.ty, draw.tx);
  return {apply_map(image, map, pad_value), apply_map(edge, map, 0.0f)};
}

inline std::pair<ImageTensor, EdgeMap> resize_translate_pad(const ImageTensor& image, const EdgeMap& edge,
                                                            const AugmentParams& params, std::uint64_t seed) {
  return resize_translate_pad(image, edge, sample_rtp(image.height(), image.width(), params, seed),
                              params.pad_value);
}

// ---------------------------------------------------------------------------
// Flip

template <typename Tag>
Raster<Tag> flip_raster(const Raster<Tag>& r, FlipMode mode) {
  if (mode == FlipMode::none) return r;
  Raster<Tag> out(r.height(), r.width(), r.channels());
  for (int c = 0; c < r.channels(); ++c)
    for (int y = 0; y < r.height(); ++y)
      for (int x = 0; x < r.width(); ++x)
        out.at(c, y, x) = mode == FlipMode::top_bottom ? r.at(c, r.height() - 1 - y, x)
                                                       : r.at(c, y, r.width() - 1 - x);
  return out;
}

inline std::pair<ImageTensor, EdgeMap> flip(const ImageTensor& image, const EdgeMap& edge, FlipMode mode) {
  require_aligned("flip", image, edge);
  return {flip_raster(image, mode), flip_raster(edge, mode)};
}

// ---------------------------------------------------------------------------
// Chains and triplets

// One sampled composition TPS -> RTP -> flip; each step may be skipped.
struct AugmentChain {
  bool tps = false;
  std::uint64_t tps_seed = 0;
  bool rtp = false;
  RtpDraw rtp_draw;
  FlipMode flip = FlipMode::none;

  bool is_identity() const { return !tps && !rtp && flip == FlipMode::none; }
};

inline AugmentChain sample_chain(int height, int width, const AugmentParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentChain chain;
  chain.tps = params.use_local_tps && unit(rng) < params.p_tps;
  chain.tps_seed = rng();
  chain.rtp = unit(rng) < params.p_rtp;
  chain.rtp_draw = sample_rtp(height, width, params, rng());
  const bool do_flip = unit(rng) < params.p_flip;
  if (do_flip && !params.flip_modes.empty())
    chain.flip = params.flip_modes[std::uniform_int_distribution<std::size_t>(0, params.flip_modes.size() - 1)(rng)];
  return chain;
}

inline std::pair<ImageTensor, EdgeMap> apply_chain(const AugmentChain& chain, const ImageTensor& image,
                                                   const EdgeMap& edge, const AugmentParams& params) {
  std::pair<ImageTensor, EdgeMap> cur{image, edge};
  if (chain.tps) cur = local_tps_warp(cur.first, cur.second, params, chain.tps_seed);
  if (chain.rtp) cur = resize_translate_pad(cur.first, cur.second, chain.rtp_draw, params.pad_value);
  if (chain.flip != FlipMode::none) cur = flip(cur.first, cur.second, chain.flip);
  return cur;
}

struct BootTriplet {
  EdgeMap target_edge;      // E_t = A(edge)
  ImageTensor reference;    // I_r = B(image)
  ImageTensor target;       // I_t = A(image)
};

inline BootTriplet build_boot_triplet(const EdgeMap& edge, const ImageTensor& image, const AugmentParams& params,
                                      std::uint64_t seed) {
  require_aligned("build_boot_triplet", image, edge);
  const AugmentChain a = sample_chain(image.height(), image.width(), params, derive_seed(seed, {1}));
  const AugmentChain b = sample_chain(image.height(), image.width(), params, derive_seed(seed, {2}));
  auto [target, target_edge] = apply_chain(a, image, edge, params);
  auto reference = apply_chain(b, image, edge, params).first;
  return {std::move(target_edge), std::move(reference), std::move(target)};
}

}  // namespace af
