#pragma once

// Dataset manifests: line-delimited records of (image, edge, regions, category,
// dataset), tab separated. Relative paths resolve against the manifest's
// directory. An optional leading "# seed: N" line carries the manifest seed.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "anomalyfactory/errors.hpp"
#include "anomalyfactory/png_io.hpp"
#include "anomalyfactory/raster.hpp"

namespace af {

namespace fs = std::filesystem;

struct SampleRecord {
  std::string image_path;
  std::string edge_path;
  std::string regions_path;
  std::string category;
  std::string dataset;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::vector<std::string> categories;  // sorted, unique
  std::int64_t seed = 0;
  fs::path base_dir;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.records == b.records && a.categories == b.categories && a.seed == b.seed;
  }
};

inline std::vector<std::string> sorted_categories(const std::vector<SampleRecord>& records) {
  std::set<std::string> cats;
  for (const auto& r : records) cats.insert(r.category);
  return {cats.begin(), cats.end()};
}

inline DatasetManifest make_manifest(std::vector<SampleRecord> records, std::int64_t seed,
                                     fs::path base_dir) {
  DatasetManifest m;
  m.categories = sorted_categories(records);
  m.records = std::move(records);
  m.seed = seed;
  m.base_dir = std::move(base_dir);
  return m;
}

// Checks that every file of a record exists and that all three share dimensions.
inline void validate_record(const DatasetManifest& m, std::size_t index) {
  const auto& r = m.records[index];
  const std::string who = "record " + std::to_string(index) + " (" + r.image_path + ")";
  std::pair<int, int> dims{-1, -1};
  for (const auto* p : {&r.image_path, &r.edge_path, &r.regions_path}) {
    const fs::path path = m.resolve(*p);
    if (!fs::is_regular_file(path)) throw ValidationError(who + ": missing file '" + path.string() + "'");
    std::pair<int, int> d;
    try {
      d = png::dimensions(path);
    } catch (const IoError& e) {
      throw ValidationError(who + ": " + e.what());
    }
    if (dims.first >= 0 && d != dims) throw ValidationError(who + ": files have mismatched dimensions");
    dims = d;
  }
}

inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest '" + path.string() + "'");
  std::vector<SampleRecord> records;
  std::int64_t seed = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const std::string key = "# seed:";
      if (line.rfind(key, 0) == 0) {
        try {
          seed = std::stoll(line.substr(key.size()));
        } catch (const std::exception&) {
          throw ParseError("manifest line " + std::to_string(line_no) + ": bad seed", line_no);
        }
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5 ||
        std::any_of(fields.begin(), fields.end(), [](const std::string& f) { return f.empty(); }))
      throw ParseError("manifest line " + std::to_string(line_no) + ": expected 5 tab-separated fields",
                       line_no);
    records.push_back({fields[0], fields[1], fields[2], fields[3], fields[4]});
  }
  DatasetManifest m = make_manifest(std::move(records), seed, path.parent_path());
  for (std::size_t i = 0; i < m.records.size(); ++i) validate_record(m, i);
  return m;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << "# seed: " << m.seed << '\n';
  for (const auto& r : m.records)
    out << r.image_path << '\t' << r.edge_path << '\t' << r.regions_path << '\t' << r.category << '\t'
        << r.dataset << '\n';
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

// Up to `per_category_cap` records per category, drawn uniformly without
// replacement; categories in sorted order, records within a category in
// manifest order.
inline std::vector<SampleRecord> balanced_sample(const DatasetManifest& m, int per_category_cap,
                                                 std::int64_t seed) {
  if (per_category_cap < 1) throw ParameterError("balanced_sample: cap must be >= 1");
  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < m.records.size(); ++i) by_cat[m.records[i].category].push_back(i);
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  std::vector<SampleRecord> out;
  for (const auto& cat : m.categories) {
    auto idx = by_cat[cat];
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(per_category_cap), idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.push_back(m.records[i]);
  }
  return out;
}

struct Sample {
  ImageTensor image;
  EdgeMap edge;
  std::vector<RegionMask> regions;
};

inline Sample load_sample(const DatasetManifest& m, const SampleRecord& record, int resolution) {
  Sample s;
  s.image = resize_bilinear(png::read_image(m.resolve(record.image_path)), resolution, resolution);
  s.edge = resize_nearest(png::read_edge(m.resolve(record.edge_path)), resolution, resolution);
  for (auto& r : png::read_label_regions(m.resolve(record.regions_path)))
    s.regions.push_back(resize_nearest(r, resolution, resolution));
  clamp_unit(s.image);
  if (!s.image.aligned_with(s.edge)) throw ContractError("load_sample: internal size mismatch");
  for (const auto& r : s.regions)
    if (!s.image.aligned_with(r)) throw ContractError("load_sample: internal size mismatch");
  return s;
}

}  // namespace af
