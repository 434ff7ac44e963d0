#include <gtest/gtest.h>

#include <queue>
#include <set>

#include "test_support.hpp"

using namespace af;
using aftest::rect_mask;

namespace {

// Independent 4-connected flood fill; true when the mask's ones form one piece.
bool is_connected(const RegionMask& m) {
  const int h = m.height(), w = m.width();
  int start = -1, ones = 0;
  for (int i = 0; i < h * w; ++i)
    if (m.pixels()[i] > 0.5f) {
      ++ones;
      if (start < 0) start = i;
    }
  if (ones == 0) return false;
  std::vector<bool> seen(h * w, false);
  std::queue<int> q;
  q.push(start);
  seen[start] = true;
  int reached = 0;
  while (!q.empty()) {
    const int i = q.front();
    q.pop();
    ++reached;
    const int y = i / w, x = i % w;
    const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
      const int j = ny[k] * w + nx[k];
      if (!seen[j] && m.pixels()[j] > 0.5f) {
        seen[j] = true;
        q.push(j);
      }
    }
  }
  return reached == ones;
}

bool intersects(const RegionMask& a, const RegionMask& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.pixels()[i] > 0.5f && b.pixels()[i] > 0.5f) return true;
  return false;
}

ImageTensor three_blobs() {
  ImageTensor img = make_image(32, 32, 0.5f);
  auto paint = [&](int top, int left, int side, float r, float g, float b) {
    for (int y = top; y < top + side; ++y)
      for (int x = left; x < left + side; ++x) {
        img.at(0, y, x) = r;
        img.at(1, y, x) = g;
        img.at(2, y, x) = b;
      }
  };
  paint(4, 4, 8, 1, 0, 0);
  paint(4, 20, 8, 0, 1, 0);
  paint(20, 12, 8, 0, 0, 1);
  return img;
}

// Disjoint rectangular tiles of random sizes covering the frame.
CandidateRegionMap random_tiles(int h, int w, std::mt19937_64& rng) {
  std::vector<int> rows{0}, cols{0};
  std::uniform_int_distribution<int> step(1, 9);
  while (rows.back() < h) rows.push_back(std::min(h, rows.back() + step(rng)));
  while (cols.back() < w) cols.push_back(std::min(w, cols.back() + step(rng)));
  CandidateRegionMap c;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i)
    for (std::size_t j = 0; j + 1 < cols.size(); ++j)
      c.regions.push_back(rect_mask(h, w, rows[i], cols[j], rows[i + 1] - rows[i], cols[j + 1] - cols[j]));
  return c;
}

}  // namespace

TEST(Sobel, VerticalStepMarksTwoColumns) {
  ImageTensor img = make_image(12, 32);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 12; ++y)
      for (int x = 16; x < 32; ++x) img.at(c, y, x) = 1.0f;
  const EdgeMap e = extract_edges(img);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 32; ++x) EXPECT_EQ(e(y, x), (x == 15 || x == 16) ? 1.0f : 0.0f) << y << "," << x;
}

TEST(Sobel, ConstantImageHasNoEdges) {
  const EdgeMap e = extract_edges(make_image(16, 16, 0.7f));
  for (float v : e.pixels()) EXPECT_EQ(v, 0.0f);
}

TEST(Sobel, OutputShapeAndRange) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto img = aftest::random_image(17, 23, rng);
    const EdgeMap e = extract_edges(img);
    EXPECT_TRUE(e.aligned_with(img));
    for (float v : e.pixels()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  }
}

TEST(Sobel, UnknownExtractorIsConfigError) {
  EdgeExtractorConfig cfg;
  cfg.name = "holistic";
  EXPECT_THROW(extract_edges(make_image(4, 4), cfg), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Proposals, RegionsAreDisjointConnectedPieces) {
  const auto c = propose_regions(three_blobs());
  ASSERT_EQ(c.regions.size(), 4u);  // three squares + the background
  for (std::size_t i = 0; i < c.regions.size(); ++i) {
    EXPECT_TRUE(is_connected(c.regions[i]));
    for (std::size_t j = i + 1; j < c.regions.size(); ++j) EXPECT_FALSE(intersects(c.regions[i], c.regions[j]));
  }
}

TEST(Proposals, UniformImageYieldsNothing) {
  EXPECT_TRUE(propose_regions(make_image(16, 16, 0.2f)).regions.empty());
}

TEST(Proposals, RefinedBlobsDropTheBackground) {
  const auto r = refine_regions(propose_regions(three_blobs()));
  ASSERT_EQ(r.regions.size(), 3u);
  for (const auto& m : r.regions) EXPECT_EQ(area_pixels(m), 64u);
}

TEST(Perimeter, FractionMatchesEdgeCount) {
  // corner rectangle: half its outline lies on the frame
  EXPECT_DOUBLE_EQ(border_perimeter_fraction(rect_mask(20, 20, 0, 0, 4, 6)), 0.5);
  // touching the top only: 6 of 2*(4+6) unit edges
  EXPECT_DOUBLE_EQ(border_perimeter_fraction(rect_mask(20, 20, 0, 7, 4, 6)), 6.0 / 20.0);
  EXPECT_DOUBLE_EQ(border_perimeter_fraction(rect_mask(20, 20, 5, 5, 4, 6)), 0.0);
  // a frame-shaped ring fills to the whole image
  RegionMask ring = make_mask(10, 10, 1.0f);
  for (int y = 2; y < 8; ++y)
    for (int x = 2; x < 8; ++x) ring(y, x) = 0.0f;
  EXPECT_DOUBLE_EQ(border_perimeter_fraction(ring), 1.0);
}

TEST(Refine, OverlappingPairIsMerged) {
  CandidateRegionMap c;
  c.regions = {rect_mask(20, 20, 5, 5, 8, 8), rect_mask(20, 20, 5, 6, 8, 8)};
  const auto r = refine_regions(c);
  ASSERT_EQ(r.regions.size(), 1u);
  EXPECT_EQ(r.regions[0], mask_union(c.regions[0], c.regions[1]));
}

TEST(Refine, ThresholdsOutsideUnitIntervalRejected) {
  EXPECT_THROW(refine_regions({}, -0.1), ParameterError);
  EXPECT_THROW(refine_regions({}, 0.1, 1.5), ParameterError);
}

// Each refined region is exactly the union of the candidates it touches, and
// the result is a fixed point of all three refinement rules.
TEST(Refine, OutputIsUnionOfInputsAndStable) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 100; ++t) {
    const auto c = random_tiles(24, 24, rng);
    const auto r = refine_regions(c, 0.02, 0.5, 0.5);
    for (std::size_t i = 0; i < r.regions.size(); ++i) {
      RegionMask expect = make_mask(24, 24);
      for (const auto& in : c.regions)
        if (intersects(in, r.regions[i])) expect = mask_union(expect, in);
      EXPECT_EQ(r.regions[i], expect);
      EXPECT_LE(border_perimeter_fraction(r.regions[i]), 0.5);
      for (std::size_t j = i + 1; j < r.regions.size(); ++j) {
        EXPECT_FALSE(intersects(r.regions[i], r.regions[j]));
        EXPECT_LE(mask_iou(r.regions[i], r.regions[j]), 0.5);
      }
    }
    int small = 0;
    for (const auto& m : r.regions) small += area_fraction(m) < 0.02;
    EXPECT_TRUE(small == 0 || small == static_cast<int>(r.regions.size()));
  }
}

// ---------------------------------------------------------------------------

TEST(Stochastic, AreaStaysInBandOverManySeeds) {
  const ShapeParams p;
  int fallbacks = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto d = draw_stochastic_region(32, 32, {1, 3}, p, s);
    const double a = area_fraction(d.mask);
    ASSERT_GE(a, p.area_min) << "seed " << s;
    ASSERT_LE(a, p.area_max) << "seed " << s;
    fallbacks += d.fell_back;
  }
  EXPECT_LT(fallbacks, 10);
}

TEST(Stochastic, AxisAlignedRectangleHasExactArea) {
  ShapeParams p;
  p.ellipses = false;
  p.rotate = false;
  p.area_min = 0.0;
  p.area_max = 1.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto d = draw_stochastic_region(40, 40, {1, 1}, p, s);
    ASSERT_EQ(d.primitives.size(), 1u);
    const auto& r = d.primitives[0];
    EXPECT_EQ(area_pixels(d.mask), static_cast<std::size_t>(r.height * r.width));
    EXPECT_EQ(d.mask, rect_mask(40, 40, r.top, r.left, static_cast<int>(r.height), static_cast<int>(r.width)));
  }
}

TEST(Stochastic, UnreachableBandFallsBackToCentredRectangle) {
  ShapeParams p;
  p.primitive_area_min = p.primitive_area_max = 0.01;
  p.area_min = 0.3;
  p.area_max = 0.4;
  p.max_retries = 4;
  const auto d = draw_stochastic_region(20, 20, {1, 1}, p, 5);
  EXPECT_TRUE(d.fell_back);
  const double a = area_fraction(d.mask);
  EXPECT_GE(a, p.area_min);
  EXPECT_LE(a, p.area_max);
}

TEST(Stochastic, BadCountRangeRejected) {
  EXPECT_THROW(select_stochastic_region(8, 8, {0, 2}, {}, 1), ParameterError);
  EXPECT_THROW(select_stochastic_region(8, 8, {3, 2}, {}, 1), ParameterError);
}

TEST(Semantic, NoCandidatesIsSelectionError) {
  EXPECT_THROW(select_semantic_region({}, {1, 2}, 0), SelectionError);
}

TEST(Semantic, ResultIsUnionOfAllowedCount) {
  CandidateRegionMap c;
  for (int k = 0; k < 4; ++k) c.regions.push_back(rect_mask(16, 16, 4 * k, 0, 4, 16));
  std::set<int> counts;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const RegionMask m = select_semantic_region(c, {1, 2}, s);
    int used = 0;
    RegionMask expect = make_mask(16, 16);
    for (const auto& r : c.regions)
      if (intersects(r, m)) {
        ++used;
        expect = mask_union(expect, r);
      }
    EXPECT_EQ(m, expect);
    counts.insert(used);
  }
  EXPECT_EQ(counts, (std::set<int>{1, 2}));
}

TEST(Semantic, CountClipsToAvailable) {
  CandidateRegionMap c;
  c.regions = {rect_mask(8, 8, 0, 0, 2, 2)};
  EXPECT_EQ(select_semantic_region(c, {2, 3}, 9), c.regions[0]);
}

// ---------------------------------------------------------------------------

TEST(Edit, RemoveClearsRegionAndNothingElse) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 50; ++t) {
    const auto e = aftest::random_edges(20, 20, rng, 0.5);
    const auto m = aftest::random_mask(20, 20, rng);
    const auto [out, mask] = edit_edges(e, m, EditStrategy::remove());
    EXPECT_EQ(mask, m);
    for (std::size_t i = 0; i < e.size(); ++i)
      EXPECT_EQ(out.pixels()[i], m.pixels()[i] > 0.5f ? 0.0f : e.pixels()[i]);
    EXPECT_EQ(edit_edges(out, m, EditStrategy::remove()).first, out);
  }
}

TEST(Edit, ReplaceWithBlankDonorEqualsRemove) {
  std::mt19937_64 rng(32);
  for (int t = 0; t < 50; ++t) {
    const auto e = aftest::random_edges(20, 20, rng, 0.5);
    const auto m = rect_mask(20, 20, 3, 4, 7, 9);
    const EdgeDonor blank{make_edge(20, 20), rect_mask(20, 20, 10, 10, 5, 5)};
    EXPECT_EQ(edit_edges(e, m, EditStrategy::replace(blank)).first, edit_edges(e, m, EditStrategy::remove()).first);
  }
}

TEST(Edit, ReplaceAndMergeOnlyTouchRegion) {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 50; ++t) {
    const auto e = aftest::random_edges(24, 24, rng);
    const auto m = aftest::random_mask(24, 24, rng, 0.2);
    if (area_pixels(m) == 0) continue;
    const EdgeDonor donor{aftest::random_edges(24, 24, rng), rect_mask(24, 24, 2, 2, 10, 12)};
    for (const auto& s : {EditStrategy::replace(donor), EditStrategy::merge(donor)}) {
      const auto out = edit_edges(e, m, s).first;
      for (std::size_t i = 0; i < e.size(); ++i) {
        if (m.pixels()[i] <= 0.5f) {
          ASSERT_EQ(out.pixels()[i], e.pixels()[i]);
        }
      }
    }
    const auto merged = edit_edges(e, m, EditStrategy::merge(donor)).first;
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_GE(merged.pixels()[i], e.pixels()[i]);
  }
}

TEST(Edit, MergeOrReplaceWithSelfIsIdentity) {
  std::mt19937_64 rng(34);
  const auto e = aftest::random_edges(16, 16, rng);
  const auto m = rect_mask(16, 16, 2, 3, 6, 5);
  const EdgeDonor self{e, m};
  EXPECT_EQ(edit_edges(e, m, EditStrategy::merge(self)).first, e);
  EXPECT_EQ(edit_edges(e, m, EditStrategy::replace(self)).first, e);
}

TEST(Edit, DonorRequirementsEnforced) {
  const auto e = make_edge(8, 8);
  const auto m = rect_mask(8, 8, 0, 0, 2, 2);
  EXPECT_THROW(edit_edges(e, m, EditStrategy{EditKind::replace, std::nullopt}), ContractError);
  EXPECT_THROW(edit_edges(e, m, EditStrategy{EditKind::remove, EdgeDonor{e, m}}), ContractError);
  EXPECT_THROW(edit_edges(e, make_mask(8, 9), EditStrategy::remove()), ContractError);
  EXPECT_THROW(edit_edges(e, m, EditStrategy::replace(EdgeDonor{e, make_mask(8, 8)})), EditError);
}
