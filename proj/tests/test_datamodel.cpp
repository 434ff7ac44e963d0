#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "test_support.hpp"

using namespace af;
using aftest::TempDir;

namespace {

DatasetManifest six_record_manifest(const TempDir& dir) {
  std::vector<SampleRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(aftest::write_record(dir.path(), "b" + std::to_string(i), "zeta", 8, 8));
  for (int i = 0; i < 3; ++i) recs.push_back(aftest::write_record(dir.path(), "a" + std::to_string(i), "alpha", 8, 8));
  return make_manifest(recs, 11, dir.path());
}

}  // namespace

TEST(Manifest, LoadsRecordsAndSortsCategories) {
  TempDir dir("manifest");
  const auto m = six_record_manifest(dir);
  write_manifest(dir / "m.tsv", m);
  const auto loaded = load_manifest(dir / "m.tsv");
  EXPECT_EQ(loaded.records.size(), 6u);
  EXPECT_EQ(loaded.categories, (std::vector<std::string>{"alpha", "zeta"}));
  EXPECT_EQ(loaded.seed, 11);
}

TEST(Manifest, RoundTripIsEqual) {
  TempDir dir("roundtrip");
  const auto m = six_record_manifest(dir);
  write_manifest(dir / "m.tsv", m);
  EXPECT_EQ(load_manifest(dir / "m.tsv"), m);
}

TEST(Manifest, EmptyFileGivesEmptyManifest) {
  TempDir dir("empty");
  std::ofstream(dir / "m.tsv").close();
  const auto m = load_manifest(dir / "m.tsv");
  EXPECT_TRUE(m.records.empty());
  EXPECT_TRUE(m.categories.empty());
}

TEST(Manifest, MissingFileIsLoadError) {
  TempDir dir("missing");
  EXPECT_THROW(load_manifest(dir / "nope.tsv"), LoadError);
}

TEST(Manifest, MalformedLineNamesLineNumber) {
  TempDir dir("malformed");
  const auto m = six_record_manifest(dir);
  write_manifest(dir / "m.tsv", m);
  std::ofstream(dir / "m.tsv", std::ios::app) << "only\ttwo\n";
  try {
    load_manifest(dir / "m.tsv");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 8);  // seed header + 6 records + bad line
    EXPECT_NE(std::string(e.what()).find("line 8"), std::string::npos);
  }
}

TEST(Manifest, MissingImageNamesRecord) {
  TempDir dir("unresolved");
  auto m = six_record_manifest(dir);
  std::filesystem::remove(dir / "a1.png");
  write_manifest(dir / "m.tsv", m);
  try {
    load_manifest(dir / "m.tsv");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("a1.png"), std::string::npos);
  }
}

TEST(Manifest, MismatchedDimensionsRejected) {
  TempDir dir("dims");
  auto rec = aftest::write_record(dir.path(), "x", "c", 8, 8);
  png::write_raster(dir / rec.edge_path, make_edge(8, 9));
  write_manifest(dir / "m.tsv", make_manifest({rec}, 0, dir.path()));
  EXPECT_THROW(load_manifest(dir / "m.tsv"), ValidationError);
}

// ---------------------------------------------------------------------------

namespace {

DatasetManifest synthetic_manifest(const std::vector<std::pair<std::string, int>>& counts) {
  std::vector<SampleRecord> recs;
  for (const auto& [cat, n] : counts)
    for (int i = 0; i < n; ++i) recs.push_back({cat + std::to_string(i), "e", "r", cat, "d"});
  return make_manifest(recs, 0, "");
}

}  // namespace

TEST(BalancedSample, CapsEachCategory) {
  const auto m = synthetic_manifest({{"a", 10}, {"b", 10}, {"c", 10}});
  const auto out = balanced_sample(m, 4, 7);
  ASSERT_EQ(out.size(), 12u);
  std::map<std::string, int> per;
  for (const auto& r : out) ++per[r.category];
  for (const auto& [cat, n] : per) EXPECT_EQ(n, 4) << cat;
}

TEST(BalancedSample, CategoriesAppearInSortedOrder) {
  const auto m = synthetic_manifest({{"zz", 5}, {"aa", 5}});
  const auto out = balanced_sample(m, 3, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i].category, "aa");
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(out[i].category, "zz");
}

TEST(BalancedSample, SmallCategoryReturnsEverything) {
  const auto m = synthetic_manifest({{"a", 150}});
  EXPECT_EQ(balanced_sample(m, 200, 3).size(), 150u);
}

TEST(BalancedSample, DeterministicAndDuplicateFree) {
  const auto m = synthetic_manifest({{"a", 20}, {"b", 7}});
  for (std::int64_t seed = 0; seed < 50; ++seed) {
    const auto x = balanced_sample(m, 5, seed);
    EXPECT_EQ(x, balanced_sample(m, 5, seed));
    std::set<std::string> seen;
    for (const auto& r : x) EXPECT_TRUE(seen.insert(r.image_path).second);
  }
}

TEST(BalancedSample, RejectsNonPositiveCap) {
  EXPECT_THROW(balanced_sample(synthetic_manifest({{"a", 3}}), 0, 1), ParameterError);
}

// Every draw must be one of the C(5,2) subsets; over many seeds all ten appear
// with roughly equal frequency, and seeds 7 and 8 both land inside the set.
TEST(BalancedSample, DrawsAreUniformOverSubsets) {
  const auto m = synthetic_manifest({{"a", 5}});
  std::set<std::set<std::string>> all;
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) all.insert({"a" + std::to_string(i), "a" + std::to_string(j)});
  ASSERT_EQ(all.size(), 10u);

  auto as_set = [](const std::vector<SampleRecord>& v) {
    std::set<std::string> s;
    for (const auto& r : v) s.insert(r.image_path);
    return s;
  };
  EXPECT_TRUE(all.count(as_set(balanced_sample(m, 2, 7))));
  EXPECT_TRUE(all.count(as_set(balanced_sample(m, 2, 8))));

  std::map<std::set<std::string>, int> freq;
  const int trials = 5000;
  for (int s = 0; s < trials; ++s) {
    const auto subset = as_set(balanced_sample(m, 2, s));
    ASSERT_TRUE(all.count(subset));
    ++freq[subset];
  }
  ASSERT_EQ(freq.size(), 10u);
  double chi2 = 0;
  for (const auto& [k, n] : freq) chi2 += (n - trials / 10.0) * (n - trials / 10.0) / (trials / 10.0);
  EXPECT_LT(chi2, 27.9);  // 9 dof, p = 0.001
}

// ---------------------------------------------------------------------------

TEST(LoadSample, ResizesToResolution) {
  TempDir dir("sample");
  auto rec = aftest::write_record(dir.path(), "big", "c", 32, 32);
  const auto m = make_manifest({rec}, 0, dir.path());
  const auto s = load_sample(m, rec, 16);
  EXPECT_TRUE(s.image.same_size(16, 16));
  EXPECT_EQ(s.image.channels(), 3);
  EXPECT_TRUE(s.edge.same_size(16, 16));
  EXPECT_EQ(s.edge.channels(), 1);
  ASSERT_EQ(s.regions.size(), 1u);
  EXPECT_TRUE(s.regions[0].same_size(16, 16));
}

TEST(LoadSample, MasksStayBinaryAndRangesHold) {
  TempDir dir("binary");
  std::mt19937_64 rng(5);
  png::write_raster(dir / "i.png", aftest::random_image(40, 40, rng));
  png::write_raster(dir / "e.png", aftest::random_edges(40, 40, rng));
  png::write_label_regions(dir / "r.png", 40, 40, {aftest::random_mask(40, 40, rng), aftest::random_mask(40, 40, rng)});
  const SampleRecord rec{"i.png", "e.png", "r.png", "c", "d"};
  const auto m = make_manifest({rec}, 0, dir.path());
  const auto s = load_sample(m, rec, 24);
  EXPECT_TRUE(in_unit_range(s.image));
  EXPECT_TRUE(in_unit_range(s.edge));
  for (const auto& r : s.regions) {
    EXPECT_TRUE(r.aligned_with(s.image));
    for (float v : r.pixels()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  }
}

TEST(LoadSample, BlackImageLoadsAsZeros) {
  TempDir dir("black");
  auto rec = aftest::write_record(dir.path(), "k", "c", 16, 16, 0.0f);
  const auto s = load_sample(make_manifest({rec}, 0, dir.path()), rec, 16);
  for (float v : s.image.pixels()) EXPECT_EQ(v, 0.0f);
}

TEST(LabelRegions, RoundTripPreservesDisjointMasks) {
  TempDir dir("labels");
  const auto a = aftest::rect_mask(12, 12, 0, 0, 4, 4);
  const auto b = aftest::rect_mask(12, 12, 6, 6, 5, 3);
  png::write_label_regions(dir / "r.png", 12, 12, {a, b});
  const auto back = png::read_label_regions(dir / "r.png");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], a);
  EXPECT_EQ(back[1], b);
}

TEST(RegionMaskType, AreaFractionCountsOnes) {
  const auto m = aftest::rect_mask(10, 10, 2, 2, 5, 4);
  EXPECT_DOUBLE_EQ(area_fraction(m), 0.2);
  EXPECT_EQ(area_pixels(m), 20u);
}
