#pragma once

// Synthetic desk-scale corpus: every category is a fixed layout of coloured
// primitives on a flat background, jittered per image. A held-out split carries
// known defects (a missing part or a pasted foreign patch) with ground-truth
// masks for localisation scoring.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "anomalyfactory/datamodel.hpp"
#include "anomalyfactory/edgeops.hpp"
#include "anomalyfactory/png_io.hpp"
#include "anomalyfactory/seeding.hpp"

namespace af {

enum class ShapeKind { disk, ring, square, bar };

struct ToyShape {
  ShapeKind kind = ShapeKind::disk;
  double cy = 0.5, cx = 0.5;  // fraction of side
  double size = 0.1;          // radius / half-side, fraction of side
  std::array<float, 3> color{1, 1, 1};
};

struct ToyLayout {
  std::array<float, 3> background{0, 0, 0};
  std::vector<ToyShape> shapes;
};

struct ToyCorpusOptions {
  int heldout_per_category = 25;
  double position_jitter = 0.015;
  double size_jitter = 0.05;
  float color_jitter = 0.04f;
  float pixel_noise = 0.01f;
  EdgeExtractorConfig edges;
  RegionProposerConfig proposer;
  double min_area = 0.005;
  double overlap_merge_iou = 0.5;
  double background_border_fraction = 0.5;
};

struct ToyCorpus {
  DatasetManifest train;    // normal images
  DatasetManifest heldout;  // defective images; regions_path holds the defect mask
};

namespace detail {

inline ToyLayout category_layout(int category, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0x70, static_cast<std::uint64_t>(category)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ToyLayout layout;
  for (auto& c : layout.background) c = static_cast<float>(0.05 + 0.25 * u(rng));
  const int count = 3 + category % 2;
  const std::array<ShapeKind, 4> kinds{ShapeKind::disk, ShapeKind::ring, ShapeKind::square, ShapeKind::bar};
  for (int i = 0; i < count; ++i) {
    ToyShape s;
    s.kind = kinds[(static_cast<std::size_t>(category) + i) % kinds.size()];
    const double angle = 2.0 * 3.14159265358979 * (i + 0.25 * u(rng)) / count;
    const double radius = 0.16 + 0.06 * u(rng);
    s.cy = 0.5 + radius * std::sin(angle);
    s.cx = 0.5 + radius * std::cos(angle);
    s.size = 0.09 + 0.05 * u(rng);
    // Bright, saturated colours well separated from the dark background.
    for (auto& c : s.color) c = static_cast<float>(0.35 + 0.65 * u(rng));
    s.color[static_cast<std::size_t>(i % 3)] = 1.0f;
    layout.shapes.push_back(s);
  }
  return layout;
}

inline ToyLayout jitter_layout(const ToyLayout& base, const ToyCorpusOptions& opt, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ToyLayout l = base;
  for (auto& c : l.background) c = std::clamp(c + opt.color_jitter * static_cast<float>(u(rng)), 0.0f, 1.0f);
  for (auto& s : l.shapes) {
    s.cy += opt.position_jitter * u(rng);
    s.cx += opt.position_jitter * u(rng);
    s.size *= 1.0 + opt.size_jitter * u(rng);
    for (auto& c : s.color) c = std::clamp(c + opt.color_jitter * static_cast<float>(u(rng)), 0.0f, 1.0f);
  }
  return l;
}

inline bool shape_contains(const ToyShape& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  switch (s.kind) {
    case ShapeKind::disk: return dy * dy + dx * dx <= s.size * s.size;
    case ShapeKind::ring: {
      const double r2 = dy * dy + dx * dx;
      return r2 <= s.size * s.size && r2 >= 0.36 * s.size * s.size;
    }
    case ShapeKind::square: return std::abs(dy) <= s.size * 0.85 && std::abs(dx) <= s.size * 0.85;
    case ShapeKind::bar: return std::abs(dy) <= s.size * 0.4 && std::abs(dx) <= s.size * 1.2;
  }
  return false;
}

// Renders the layout; `extra` shapes are drawn last. Pixel noise comes from noise_seed.
inline ImageTensor render_layout(const ToyLayout& l, const std::vector<ToyShape>& extra, int resolution,
                                 float pixel_noise, std::uint64_t noise_seed) {
  ImageTensor img = make_image(resolution, resolution);
  std::mt19937_64 rng(noise_seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      const double fy = (y + 0.5) / resolution, fx = (x + 0.5) / resolution;
      std::array<float, 3> c = l.background;
      for (const auto* list : {&l.shapes, &extra})
        for (const auto& s : *list)
          if (shape_contains(s, fy, fx)) c = s.color;
      for (int k = 0; k < 3; ++k) img.at(k, y, x) = std::clamp(c[k] + pixel_noise * u(rng), 0.0f, 1.0f);
    }
  return img;
}

inline RegionMask difference_mask(const ImageTensor& a, const ImageTensor& b, float threshold) {
  RegionMask m = make_mask(a.height(), a.width());
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x)
      for (int c = 0; c < 3; ++c)
        if (std::abs(a.at(c, y, x) - b.at(c, y, x)) > threshold) m(y, x) = 1.0f;
  return m;
}

}  // namespace detail

inline std::string category_name(int k) { return "cat" + std::to_string(k); }

inline ToyCorpus build_toy_corpus(const std::filesystem::path& out_dir, int n_per_category, int categories,
                                  int resolution, std::int64_t seed, const ToyCorpusOptions& opt = {}) {
  if (categories < 2) throw ParameterError("build_toy_corpus: need at least 2 categories");
  if (n_per_category < 1 || resolution < 8) throw ParameterError("build_toy_corpus: bad size parameters");
  std::error_code ec;
  for (const char* sub : {"normal", "heldout"}) std::filesystem::create_directories(out_dir / sub, ec);
  if (ec || !std::filesystem::is_directory(out_dir / "normal"))
    throw IoError("cannot create corpus directory '" + out_dir.string() + "'");
  const auto useed = static_cast<std::uint64_t>(seed);

  auto write_triplet = [&](const std::string& stem, const ImageTensor& img, const std::vector<RegionMask>& regions,
                           const std::string& category, const std::string& dataset) {
    const std::string image_rel = stem + ".png";
    const std::string edge_rel = stem + "_edge.png";
    const std::string regions_rel = stem + "_regions.png";
    png::write_raster(out_dir / image_rel, img);
    png::write_raster(out_dir / edge_rel, extract_edges(img, opt.edges));
    png::write_label_regions(out_dir / regions_rel, resolution, resolution, regions);
    return SampleRecord{image_rel, edge_rel, regions_rel, category, dataset};
  };

  std::vector<SampleRecord> train, heldout;
  for (int k = 0; k < categories; ++k) {
    const ToyLayout base = detail::category_layout(k, useed);
    std::mt19937_64 rng(derive_seed(useed, {0x71, static_cast<std::uint64_t>(k)}));
    for (int i = 0; i < n_per_category; ++i) {
      const ToyLayout l = detail::jitter_layout(base, opt, rng);
      const ImageTensor img = detail::render_layout(l, {}, resolution, opt.pixel_noise, rng());
      const auto regions =
          refine_regions(propose_regions(img, opt.proposer), opt.min_area, opt.overlap_merge_iou,
                         opt.background_border_fraction)
              .regions;
      const std::string stem = "normal/" + category_name(k) + "_" + std::to_string(i);
      train.push_back(write_triplet(stem, img, std::vector<RegionMask>(regions.begin(),
                                                                       regions.begin() + std::min<std::size_t>(regions.size(), 255)),
                                    category_name(k), "toy"));
    }

    std::mt19937_64 hrng(derive_seed(useed, {0x72, static_cast<std::uint64_t>(k)}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < opt.heldout_per_category; ++i) {
      const bool missing = i % 2 == 0;
      for (int attempt = 0;; ++attempt) {
        const ToyLayout l = detail::jitter_layout(base, opt, hrng);
        const std::uint64_t noise_seed = hrng();
        const ImageTensor normal = detail::render_layout(l, {}, resolution, opt.pixel_noise, noise_seed);
        ToyLayout broken = l;
        std::vector<ToyShape> extra;
        if (missing) {
          const auto idx = static_cast<std::ptrdiff_t>(hrng() % broken.shapes.size());
          broken.shapes.erase(broken.shapes.begin() + idx);
        } else {
          const ToyShape& host = l.shapes[hrng() % l.shapes.size()];
          ToyShape patch;
          patch.kind = u(hrng) < 0.5 ? ShapeKind::disk : ShapeKind::square;
          patch.cy = host.cy + (u(hrng) - 0.5) * host.size;
          patch.cx = host.cx + (u(hrng) - 0.5) * host.size;
          patch.size = 0.04 + 0.04 * u(hrng);
          for (std::size_t c = 0; c < 3; ++c) patch.color[c] = 1.0f - host.color[c] * 0.9f;
          extra.push_back(patch);
        }
        const ImageTensor defect = detail::render_layout(broken, extra, resolution, opt.pixel_noise, noise_seed);
        const RegionMask gt = detail::difference_mask(normal, defect, 0.08f);
        if (area_pixels(gt) == 0 && attempt < 16) continue;
        const std::string stem = "heldout/" + category_name(k) + "_" + std::to_string(i);
        heldout.push_back(write_triplet(stem, defect, {gt}, category_name(k),
                                        missing ? "toy-defect-missing" : "toy-defect-patch"));
        break;
      }
    }
  }
  ToyCorpus corpus{make_manifest(std::move(train), seed, out_dir), make_manifest(std::move(heldout), seed, out_dir)};
  write_manifest(out_dir / "manifest.tsv", corpus.train);
  write_manifest(out_dir / "heldout.tsv", corpus.heldout);
  return corpus;
}

}  // namespace af
