#pragma once

// Edge extraction, candidate-region proposal and refinement, region
// selection, and edge editing. Together these forge the anomaly edge maps the
// generators are trained and driven with.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "anomalyfactory/errors.hpp"
#include "anomalyfactory/raster.hpp"

namespace af {

// ---------------------------------------------------------------------------
// Edge extraction

struct EdgeExtractorConfig {
  std::string name = "sobel-hysteresis";
  float high = 0.3f;  // strong threshold on normalised gradient magnitude
  float low = 0.1f;   // weak threshold, kept only when connected to a strong pixel
};

namespace detail {

// Per-pixel Sobel magnitude, max over channels, normalised so a unit step gives 1.
inline std::vector<float> sobel_magnitude(const ImageTensor& image) {
  const int h = image.height(), w = image.width();
  std::vector<float> mag(static_cast<std::size_t>(h) * w, 0.0f);
  auto px = [&](int c, int y, int x) {
    return image.at(c, std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1));
  };
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float gx = (px(c, y - 1, x + 1) + 2 * px(c, y, x + 1) + px(c, y + 1, x + 1)) -
                         (px(c, y - 1, x - 1) + 2 * px(c, y, x - 1) + px(c, y + 1, x - 1));
        const float gy = (px(c, y + 1, x - 1) + 2 * px(c, y + 1, x) + px(c, y + 1, x + 1)) -
                         (px(c, y - 1, x - 1) + 2 * px(c, y - 1, x) + px(c, y - 1, x + 1));
        float& m = mag[static_cast<std::size_t>(y) * w + x];
        m = std::max(m, std::min(1.0f, std::sqrt(gx * gx + gy * gy) / 4.0f));
      }
  return mag;
}

inline EdgeMap hysteresis(const std::vector<float>& mag, int h, int w, float high, float low) {
  EdgeMap out = make_edge(h, w);
  std::queue<std::pair<int, int>> frontier;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mag[static_cast<std::size_t>(y) * w + x] >= high) {
        out(y, x) = 1.0f;
        frontier.emplace(y, x);
      }
  while (!frontier.empty()) {
    const auto [y, x] = frontier.front();
    frontier.pop();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w || out(ny, nx) > 0.0f) continue;
        if (mag[static_cast<std::size_t>(ny) * w + nx] >= low) {
          out(ny, nx) = 1.0f;
          frontier.emplace(ny, nx);
        }
      }
  }
  return out;
}

}  // namespace detail

using EdgeExtractorFn = std::function<EdgeMap(const ImageTensor&, const EdgeExtractorConfig&)>;

// Named extractors. A learned extractor can be registered at startup and then
// selected through EdgeExtractorConfig::name.
inline std::map<std::string, EdgeExtractorFn>& edge_extractor_registry() {
  static std::map<std::string, EdgeExtractorFn> registry{
      {"sobel-hysteresis",
       [](const ImageTensor& img, const EdgeExtractorConfig& cfg) {
         return detail::hysteresis(detail::sobel_magnitude(img), img.height(), img.width(), cfg.high,
                                   cfg.low);
       }},
      {"sobel",
       [](const ImageTensor& img, const EdgeExtractorConfig&) {
         EdgeMap out = make_edge(img.height(), img.width());
         out.pixels() = detail::sobel_magnitude(img);
         return out;
       }},
  };
  return registry;
}

inline EdgeMap extract_edges(const ImageTensor& image, const EdgeExtractorConfig& config = {}) {
  const auto& reg = edge_extractor_registry();
  const auto it = reg.find(config.name);
  if (it == reg.end()) throw ConfigError("unknown edge extractor '" + config.name + "'");
  return it->second(image, config);
}

// ---------------------------------------------------------------------------
// Candidate regions

enum class RegionSource { semantic, stochastic };

struct CandidateRegionMap {
  std::vector<RegionMask> regions;
  RegionSource source = RegionSource::semantic;
};

struct RegionProposerConfig {
  std::string name = "kmeans-components";
  int clusters = 4;
  int iterations = 10;
  int min_pixels = 4;
};

namespace detail {

// 4-connected component labelling of pixels where label[i] == value.
inline std::vector<std::vector<int>> components_of(const std::vector<int>& label, int h, int w, int value) {
  std::vector<std::vector<int>> comps;
  std::vector<char> seen(label.size(), 0);
  for (int start = 0; start < h * w; ++start) {
    if (seen[start] || label[start] != value) continue;
    std::vector<int> comp;
    std::queue<int> q;
    q.push(start);
    seen[start] = 1;
    while (!q.empty()) {
      const int i = q.front();
      q.pop();
      comp.push_back(i);
      const int y = i / w, x = i % w;
      const std::array<std::pair<int, int>, 4> nbrs{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
      for (auto [ny, nx] : nbrs) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        if (!seen[j] && label[j] == value) {
          seen[j] = 1;
          q.push(j);
        }
      }
    }
    comps.push_back(std::move(comp));
  }
  return comps;
}

inline std::vector<int> kmeans_labels(const ImageTensor& image, int k, int iterations) {
  const int n = static_cast<int>(image.plane());
  auto color = [&](int i, int c) { return image.pixels()[static_cast<std::size_t>(c) * n + i]; };
  auto dist2 = [&](int i, const std::array<double, 3>& ctr) {
    double d = 0;
    for (int c = 0; c < 3; ++c) d += (color(i, c) - ctr[c]) * (color(i, c) - ctr[c]);
    return d;
  };
  // Deterministic farthest-point initialisation.
  std::vector<std::array<double, 3>> centres{{color(0, 0), color(0, 1), color(0, 2)}};
  while (static_cast<int>(centres.size()) < k) {
    double best = 0;
    int arg = -1;
    for (int i = 0; i < n; ++i) {
      double d = std::numeric_limits<double>::max();
      for (const auto& ctr : centres) d = std::min(d, dist2(i, ctr));
      if (d > best) {
        best = d;
        arg = i;
      }
    }
    if (arg < 0 || best < 1e-12) break;
    centres.push_back({color(arg, 0), color(arg, 1), color(arg, 2)});
  }
  std::vector<int> label(n, 0);
  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (int j = 0; j < static_cast<int>(centres.size()); ++j) {
        const double d = dist2(i, centres[j]);
        if (d < best) {
          best = d;
          label[i] = j;
        }
      }
    }
    std::vector<std::array<double, 3>> acc(centres.size(), {0, 0, 0});
    std::vector<int> count(centres.size(), 0);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) acc[label[i]][c] += color(i, c);
      ++count[label[i]];
    }
    for (std::size_t j = 0; j < centres.size(); ++j)
      if (count[j] > 0)
        for (int c = 0; c < 3; ++c) centres[j][c] = acc[j][c] / count[j];
  }
  return label;
}

}  // namespace detail

// Colour-quantised connected components: every 4-connected component of every
// colour cluster becomes a candidate, except tiny ones and whole-image ones.
inline CandidateRegionMap propose_regions(const ImageTensor& image, const RegionProposerConfig& config = {}) {
  if (config.name != "kmeans-components") throw ConfigError("unknown region proposer '" + config.name + "'");
  CandidateRegionMap out;
  out.source = RegionSource::semantic;
  const int h = image.height(), w = image.width();
  if (image.plane() == 0) return out;
  const auto label = detail::kmeans_labels(image, std::max(1, config.clusters), config.iterations);
  const int max_label = *std::max_element(label.begin(), label.end());
  for (int v = 0; v <= max_label; ++v)
    for (const auto& comp : detail::components_of(label, h, w, v)) {
      if (static_cast<int>(comp.size()) < config.min_pixels ||
          comp.size() == static_cast<std::size_t>(h) * w)
        continue;
      RegionMask m = make_mask(h, w);
      for (int i : comp) m.pixels()[i] = 1.0f;
      out.regions.push_back(std::move(m));
    }
  return out;
}

namespace detail {

// Fills holes: pixels not in the mask and not reachable from the image border.
inline RegionMask fill_holes(const RegionMask& m) {
  const int h = m.height(), w = m.width();
  std::vector<int> outside(m.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) outside[i] = m.pixels()[i] > 0.5f ? 0 : 1;
  std::vector<char> reach(m.size(), 0);
  std::queue<int> q;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (y != 0 && y != h - 1 && x != 0 && x != w - 1) continue;
      const int i = y * w + x;
      if (outside[i] && !reach[i]) {
        reach[i] = 1;
        q.push(i);
      }
    }
  while (!q.empty()) {
    const int i = q.front();
    q.pop();
    const int y = i / w, x = i % w;
    const std::array<std::pair<int, int>, 4> nbrs{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
    for (auto [ny, nx] : nbrs) {
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      const int j = ny * w + nx;
      if (outside[j] && !reach[j]) {
        reach[j] = 1;
        q.push(j);
      }
    }
  }
  RegionMask out = m;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!reach[i]) out.pixels()[i] = 1.0f;
  return out;
}

}  // namespace detail

// Fraction of the outer perimeter (pixel sides, holes filled) lying on the image border.
inline double border_perimeter_fraction(const RegionMask& region) {
  const RegionMask m = detail::fill_holes(region);
  const int h = m.height(), w = m.width();
  std::size_t perimeter = 0, border = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (m(y, x) <= 0.5f) continue;
      const std::array<std::pair<int, int>, 4> nbrs{{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
      for (auto [ny, nx] : nbrs) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) {
          ++perimeter;
          ++border;
        } else if (m(ny, nx) <= 0.5f) {
          ++perimeter;
        }
      }
    }
  return perimeter == 0 ? 0.0 : static_cast<double>(border) / static_cast<double>(perimeter);
}

inline std::pair<double, double> mask_centroid(const RegionMask& m) {
  double sy = 0, sx = 0, n = 0;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m(y, x) > 0.5f) {
        sy += y;
        sx += x;
        n += 1;
      }
  return n == 0 ? std::pair{0.0, 0.0} : std::pair{sy / n, sx / n};
}

// Removes background-like regions, groups small regions into their nearest
// (centroid distance) surviving region, and merges overlapping pairs, until
// nothing changes. Every pass either shrinks the region list or stops.
inline CandidateRegionMap refine_regions(const CandidateRegionMap& candidates, double min_area = 0.005,
                                         double overlap_merge_iou = 0.5,
                                         double background_border_fraction = 0.5) {
  for (double t : {min_area, overlap_merge_iou, background_border_fraction})
    if (t < 0.0 || t > 1.0) throw ParameterError("refine_regions: thresholds must lie in [0,1]");
  std::vector<RegionMask> regions;
  for (const auto& r : candidates.regions)
    if (area_pixels(r) > 0) regions.push_back(r);

  bool changed = true;
  while (changed) {
    changed = false;
    // background removal
    const std::size_t before = regions.size();
    std::erase_if(regions, [&](const RegionMask& r) {
      return border_perimeter_fraction(r) > background_border_fraction;
    });
    changed = changed || regions.size() != before;

    // small-region grouping
    std::vector<std::size_t> small, large;
    for (std::size_t i = 0; i < regions.size(); ++i)
      (area_fraction(regions[i]) < min_area ? small : large).push_back(i);
    if (!small.empty() && !large.empty()) {
      std::vector<RegionMask> merged;
      for (auto li : large) merged.push_back(regions[li]);
      for (auto si : small) {
        const auto [sy, sx] = mask_centroid(regions[si]);
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::max();
        for (std::size_t j = 0; j < large.size(); ++j) {
          const auto [ly, lx] = mask_centroid(regions[large[j]]);
          const double d = (ly - sy) * (ly - sy) + (lx - sx) * (lx - sx);
          if (d < best_d) {
            best_d = d;
            best = j;
          }
        }
        merged[best] = mask_union(merged[best], regions[si]);
      }
      regions = std::move(merged);
      changed = true;
    }

    // overlap merging, one pair per pass
    bool merged_pair = false;
    for (std::size_t i = 0; i < regions.size() && !merged_pair; ++i)
      for (std::size_t j = i + 1; j < regions.size() && !merged_pair; ++j)
        if (mask_iou(regions[i], regions[j]) > overlap_merge_iou) {
          regions[i] = mask_union(regions[i], regions[j]);
          regions.erase(regions.begin() + static_cast<std::ptrdiff_t>(j));
          merged_pair = true;
        }
    changed = changed || merged_pair;
  }
  return {std::move(regions), candidates.source};
}

// ---------------------------------------------------------------------------
// Region selection

enum class PrimitiveKind { rectangle, ellipse };

struct ShapeParams {
  double area_min = 0.01;  // accepted band for the union's area fraction
  double area_max = 0.4;
  double primitive_area_min = 0.01;  // per-primitive area fraction range
  double primitive_area_max = 0.2;
  double aspect_min = 1.0 / 3.0;
  double aspect_max = 3.0;
  bool rectangles = true;
  bool ellipses = true;
  bool rotate = true;
  int max_retries = 32;
};

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::rectangle;
  double cy = 0, cx = 0;        // centre
  double height = 0, width = 0;  // full extents before rotation
  double angle = 0;              // radians
  bool axis_aligned = false;     // integer-aligned rectangle: top/left/height/width exact
  int top = 0, left = 0;
};

struct StochasticDraw {
  std::vector<Primitive> primitives;
  RegionMask mask;
  bool fell_back = false;
};

namespace detail {

inline void rasterize(const Primitive& p, RegionMask& m) {
  if (p.axis_aligned) {
    for (int y = p.top; y < p.top + static_cast<int>(p.height); ++y)
      for (int x = p.left; x < p.left + static_cast<int>(p.width); ++x) m(y, x) = 1.0f;
    return;
  }
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      const double dy = y + 0.5 - p.cy, dx = x + 0.5 - p.cx;
      const double u = c * dx + s * dy;   // along width
      const double v = -s * dx + c * dy;  // along height
      const double a = p.width / 2, b = p.height / 2;
      const bool inside = p.kind == PrimitiveKind::rectangle
                              ? (std::abs(u) <= a && std::abs(v) <= b)
                              : (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      if (inside) m(y, x) = 1.0f;
    }
}

}  // namespace detail

inline StochasticDraw draw_stochastic_region(int height, int width, std::pair<int, int> count_range,
                                             const ShapeParams& params, std::uint64_t seed) {
  if (count_range.first < 1 || count_range.second < count_range.first)
    throw ParameterError("select_stochastic_region: count_range must satisfy 1 <= min <= max");
  if (!params.rectangles && !params.ellipses) throw ParameterError("select_stochastic_region: no primitive kinds");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double total = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < params.max_retries; ++attempt) {
    StochasticDraw draw;
    draw.mask = make_mask(height, width);
    const int count = std::uniform_int_distribution<int>(count_range.first, count_range.second)(rng);
    for (int k = 0; k < count; ++k) {
      Primitive p;
      const bool rect = params.rectangles && (!params.ellipses || unit(rng) < 0.5);
      p.kind = rect ? PrimitiveKind::rectangle : PrimitiveKind::ellipse;
      const double area = params.primitive_area_min +
                          (params.primitive_area_max - params.primitive_area_min) * unit(rng);
      const double aspect = std::exp(std::log(params.aspect_min) +
                                     (std::log(params.aspect_max) - std::log(params.aspect_min)) * unit(rng));
      const double pixels = area * total * (rect ? 1.0 : 4.0 / std::numbers::pi);
      p.width = std::sqrt(pixels * aspect);
      p.height = std::sqrt(pixels / aspect);
      if (rect && !params.rotate) {
        p.axis_aligned = true;
        p.width = std::clamp(std::round(p.width), 1.0, static_cast<double>(width));
        p.height = std::clamp(std::round(p.height), 1.0, static_cast<double>(height));
        p.left = std::uniform_int_distribution<int>(0, width - static_cast<int>(p.width))(rng);
        p.top = std::uniform_int_distribution<int>(0, height - static_cast<int>(p.height))(rng);
        p.cx = p.left + p.width / 2;
        p.cy = p.top + p.height / 2;
      } else {
        p.cx = width * unit(rng);
        p.cy = height * unit(rng);
        p.angle = params.rotate ? std::numbers::pi * unit(rng) : 0.0;
      }
      detail::rasterize(p, draw.mask);
      draw.primitives.push_back(p);
    }
    const double frac = area_fraction(draw.mask);
    if (frac >= params.area_min && frac <= params.area_max) return draw;
  }
  StochasticDraw fallback;
  fallback.fell_back = true;
  fallback.mask = make_mask(height, width);
  const double target = 0.5 * (params.area_min + params.area_max) * total;
  Primitive p;
  p.axis_aligned = true;
  p.width = std::clamp(std::round(std::sqrt(target)), 1.0, static_cast<double>(width));
  p.height = std::clamp(std::round(target / p.width), 1.0, static_cast<double>(height));
  p.left = (width - static_cast<int>(p.width)) / 2;
  p.top = (height - static_cast<int>(p.height)) / 2;
  p.cx = p.left + p.width / 2;
  p.cy = p.top + p.height / 2;
  detail::rasterize(p, fallback.mask);
  fallback.primitives.push_back(p);
  std::clog << "[edgeops] stochastic region: area band not met after " << params.max_retries
            << " retries (seed " << seed << "), using centred rectangle\n";
  return fallback;
}

inline RegionMask select_stochastic_region(int height, int width, std::pair<int, int> count_range,
                                           const ShapeParams& params, std::uint64_t seed) {
  return draw_stochastic_region(height, width, count_range, params, seed).mask;
}

// Union of a seeded sample of candidates; the count is clipped to the number available.
inline RegionMask select_semantic_region(const CandidateRegionMap& candidates, std::pair<int, int> count_range,
                                         std::uint64_t seed) {
  if (candidates.regions.empty()) throw SelectionError("select_semantic_region: no candidate regions");
  if (count_range.first < 1 || count_range.second < count_range.first)
    throw ParameterError("select_semantic_region: count_range must satisfy 1 <= min <= max");
  const int available = static_cast<int>(candidates.regions.size());
  const int lo = std::min(count_range.first, available);
  const int hi = std::min(count_range.second, available);
  std::mt19937_64 rng(seed);
  const int count = std::uniform_int_distribution<int>(lo, hi)(rng);
  std::vector<int> order(available);
  for (int i = 0; i < available; ++i) order[i] = i;
  for (int i = 0; i < count; ++i) std::swap(order[i], order[std::uniform_int_distribution<int>(i, available - 1)(rng)]);
  RegionMask out = candidates.regions[order[0]];
  for (int i = 1; i < count; ++i) out = mask_union(out, candidates.regions[order[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Edge editing

enum class EditKind { remove, replace, merge };

struct EdgeDonor {
  EdgeMap edge;
  RegionMask region;
};

struct EditStrategy {
  EditKind kind = EditKind::remove;
  std::optional<EdgeDonor> donor;

  static EditStrategy remove() { return {EditKind::remove, std::nullopt}; }
  static EditStrategy replace(EdgeDonor d) { return {EditKind::replace, std::move(d)}; }
  static EditStrategy merge(EdgeDonor d) { return {EditKind::merge, std::move(d)}; }
};

inline const char* to_string(EditKind k) {
  switch (k) {
    case EditKind::remove: return "remove";
    case EditKind::replace: return "replace";
    case EditKind::merge: return "merge";
  }
  return "?";
}

struct BoundingBox {
  int top = 0, left = 0, bottom = -1, right = -1;  // inclusive
  bool empty() const { return bottom < top || right < left; }
  int height() const { return bottom - top + 1; }
  int width() const { return right - left + 1; }
};

inline BoundingBox bounding_box(const RegionMask& m) {
  BoundingBox b{m.height(), m.width(), -1, -1};
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m(y, x) > 0.5f) {
        b.top = std::min(b.top, y);
        b.left = std::min(b.left, x);
        b.bottom = std::max(b.bottom, y);
        b.right = std::max(b.right, x);
      }
  return b;
}

// Crops donor edges to the donor region's box and resamples them (nearest) into
// the target region's box; zero outside the target region.
inline EdgeMap fit_donor(const EdgeDonor& donor, const RegionMask& target) {
  const BoundingBox src = bounding_box(donor.region);
  if (src.empty()) throw EditError("edit_edges: donor region is empty");
  EdgeMap out = make_edge(target.height(), target.width());
  const BoundingBox dst = bounding_box(target);
  if (dst.empty()) return out;
  for (int y = dst.top; y <= dst.bottom; ++y)
    for (int x = dst.left; x <= dst.right; ++x) {
      if (target(y, x) <= 0.5f) continue;
      const int sy = src.top + std::min(src.height() - 1, (y - dst.top) * src.height() / dst.height());
      const int sx = src.left + std::min(src.width() - 1, (x - dst.left) * src.width() / dst.width());
      out(y, x) = donor.edge(sy, sx);
    }
  return out;
}

inline std::pair<EdgeMap, RegionMask> edit_edges(const EdgeMap& edge, const RegionMask& region,
                                                 const EditStrategy& strategy) {
  if (!edge.aligned_with(region)) throw ContractError("edit_edges: edge map and region not aligned");
  const bool needs_donor = strategy.kind != EditKind::remove;
  if (needs_donor != strategy.donor.has_value())
    throw ContractError(std::string("edit_edges: strategy '") + to_string(strategy.kind) +
                        (needs_donor ? "' requires a donor" : "' forbids a donor"));
  EdgeMap out = edge;
  if (strategy.kind == EditKind::remove) {
    for (std::size_t i = 0; i < out.size(); ++i)
      if (region.pixels()[i] > 0.5f) out.pixels()[i] = 0.0f;
    return {std::move(out), region};
  }
  if (!strategy.donor->edge.aligned_with(strategy.donor->region))
    throw ContractError("edit_edges: donor edge and region not aligned");
  const EdgeMap fitted = fit_donor(*strategy.donor, region);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (region.pixels()[i] <= 0.5f) continue;
    out.pixels()[i] = strategy.kind == EditKind::replace ? fitted.pixels()[i]
                                                         : std::max(out.pixels()[i], fitted.pixels()[i]);
  }
  return {std::move(out), region};
}

}  // namespace af
