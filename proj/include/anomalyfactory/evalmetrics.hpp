#pragma once

// Generation-quality metrics (IS, cluster-grouped perceptual distance) and
// pixel-level localisation scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "anomalyfactory/losses.hpp"
#include "anomalyfactory/raster.hpp"

namespace af {

struct EvalProtocol {
  int gen_list_size = 1000;
  int n_groups = 100;
  int is_splits = 10;
  std::int64_t fixed_seed = 0;

  void validate() const {
    if (gen_list_size < 1 || n_groups < 1 || is_splits < 1)
      throw ProtocolError("EvalProtocol: sizes must be positive");
    if (gen_list_size % n_groups != 0)
      throw ProtocolError("EvalProtocol: gen_list_size " + std::to_string(gen_list_size) +
                          " is not divisible by n_groups " + std::to_string(n_groups));
  }
};

inline void to_json(nlohmann::json& j, const EvalProtocol& p) {
  j = {{"gen_list_size", p.gen_list_size}, {"n_groups", p.n_groups}, {"is_splits", p.is_splits},
       {"fixed_seed", p.fixed_seed}};
}

inline void from_json(const nlohmann::json& j, EvalProtocol& p) {
  const EvalProtocol d;
  p.gen_list_size = j.value("gen_list_size", d.gen_list_size);
  p.n_groups = j.value("n_groups", d.n_groups);
  p.is_splits = j.value("is_splits", d.is_splits);
  p.fixed_seed = j.value("fixed_seed", d.fixed_seed);
}

// ---------------------------------------------------------------------------
// Inception score

struct ScoreSummary {
  double mean = 0;
  double std = 0;
};

using Distribution = std::vector<double>;

inline void require_simplex(const Distribution& p, std::size_t index) {
  double s = 0;
  for (double v : p) {
    if (!(v >= -1e-9) || !std::isfinite(v))
      throw ContractError("inception_score: output " + std::to_string(index) + " has a negative or non-finite entry");
    s += v;
  }
  if (p.empty() || std::abs(s - 1.0) > 1e-6)
    throw ContractError("inception_score: output " + std::to_string(index) + " does not sum to 1");
}

// exp(mean KL(p(y|x) || p(y))) per contiguous split; mean and population std over splits.
inline ScoreSummary inception_score(const std::vector<Distribution>& probs, int splits) {
  if (probs.empty()) throw ContractError("inception_score: no images");
  if (splits < 1 || static_cast<std::size_t>(splits) > probs.size())
    throw ParameterError("inception_score: splits must lie in [1, number of images]");
  const std::size_t k = probs.front().size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != k) throw ContractError("inception_score: inconsistent class counts");
    require_simplex(probs[i], i);
  }
  std::vector<double> scores;
  const std::size_t n = probs.size();
  for (int s = 0; s < splits; ++s) {
    const std::size_t lo = n * static_cast<std::size_t>(s) / static_cast<std::size_t>(splits);
    const std::size_t hi = n * static_cast<std::size_t>(s + 1) / static_cast<std::size_t>(splits);
    std::vector<double> marginal(k, 0.0);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c) marginal[c] += probs[i][c];
    for (auto& m : marginal) m /= static_cast<double>(hi - lo);
    double kl = 0;
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c)
        if (probs[i][c] > 0) kl += probs[i][c] * (std::log(probs[i][c]) - std::log(marginal[c]));
    scores.push_back(std::exp(kl / static_cast<double>(hi - lo)));
  }
  ScoreSummary out;
  out.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  for (double v : scores) out.std += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(out.std / static_cast<double>(scores.size()));
  return out;
}

using Classifier = std::function<Distribution(const ImageTensor&)>;

inline ScoreSummary inception_score(const std::vector<ImageTensor>& images, const Classifier& classifier, int splits) {
  std::vector<Distribution> probs;
  probs.reserve(images.size());
  for (const auto& img : images) probs.push_back(classifier(img));
  return inception_score(probs, splits);
}

// ---------------------------------------------------------------------------
// Perceptual distance

// Per-tap features with unit-normalised channel vectors at every position.
using PerceptualFeatures = std::vector<Tensor<float>>;

inline PerceptualFeatures perceptual_features(const ImageTensor& image, const FeatureExtractor<float>& fx) {
  NoGradGuard guard;
  PerceptualFeatures out;
  for (const auto& f : fx.features(Var<float>(to_tensor<float>(image)))) {
    Tensor<float> t = f.value();
    for (std::size_t i = 0; i < t.plane(); ++i) {
      double norm = 0;
      for (int c = 0; c < t.c(); ++c) norm += static_cast<double>(t[c * t.plane() + i]) * t[c * t.plane() + i];
      const double inv = 1.0 / (std::sqrt(norm) + 1e-10);
      for (int c = 0; c < t.c(); ++c) t[c * t.plane() + i] = static_cast<float>(t[c * t.plane() + i] * inv);
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Sum over taps of the spatial mean of squared normalised-feature differences.
inline double perceptual_distance(const PerceptualFeatures& a, const PerceptualFeatures& b) {
  if (a.size() != b.size()) throw ContractError("perceptual_distance: feature lists differ");
  double total = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!a[k].same_shape(b[k])) throw ContractError("perceptual_distance: feature shapes differ");
    double acc = 0;
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      const double d = static_cast<double>(a[k][i]) - b[k][i];
      acc += d * d;
    }
    total += acc / static_cast<double>(a[k].plane());
  }
  return total;
}

inline double perceptual_distance(const ImageTensor& a, const ImageTensor& b, const FeatureExtractor<float>& fx) {
  if (!a.aligned_with(b) || a.channels() != b.channels()) throw ContractError("perceptual_distance: shape mismatch");
  return perceptual_distance(perceptual_features(a, fx), perceptual_features(b, fx));
}

// ---------------------------------------------------------------------------
// Cluster-grouped diversity

struct ClusterResult {
  double score = 0;
  std::vector<std::vector<std::size_t>> groups;
};

// Greedy grouping over a symmetric distance matrix: seed each group with the
// first unassigned index and fill it with that seed's nearest unassigned
// neighbours (ties by index). Score: mean over groups of mean pairwise distance.
inline ClusterResult cluster_groups(const std::vector<std::vector<double>>& dist, int n_groups) {
  const std::size_t n = dist.size();
  if (n_groups < 1 || n == 0 || n % static_cast<std::size_t>(n_groups) != 0)
    throw ProtocolError("cluster_lpips: " + std::to_string(n) + " images cannot form " + std::to_string(n_groups) +
                        " equal groups");
  const std::size_t size = n / static_cast<std::size_t>(n_groups);
  std::vector<bool> used(n, false);
  ClusterResult out;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (used[seed]) continue;
    used[seed] = true;
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < n; ++j)
      if (!used[j]) rest.push_back(j);
    std::stable_sort(rest.begin(), rest.end(),
                     [&](std::size_t x, std::size_t y) { return dist[seed][x] < dist[seed][y]; });
    std::vector<std::size_t> group{seed};
    for (std::size_t j = 0; j + 1 < size; ++j) {
      group.push_back(rest[j]);
      used[rest[j]] = true;
    }
    out.groups.push_back(std::move(group));
  }
  double acc = 0;
  for (const auto& g : out.groups) {
    double s = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j, ++pairs) s += dist[g[i]][g[j]];
    acc += pairs == 0 ? 0.0 : s / static_cast<double>(pairs);
  }
  out.score = acc / static_cast<double>(out.groups.size());
  return out;
}

using DistanceFn = std::function<double(std::size_t, std::size_t)>;

inline std::vector<std::vector<double>> distance_matrix(std::size_t n, const DistanceFn& dist) {
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i][j] = m[j][i] = dist(i, j);
  return m;
}

inline double cluster_lpips(const std::vector<ImageTensor>& images, int n_groups, const FeatureExtractor<float>& fx) {
  if (n_groups < 1 || images.empty() || images.size() % static_cast<std::size_t>(n_groups) != 0)
    throw ProtocolError("cluster_lpips: " + std::to_string(images.size()) + " images cannot form " +
                        std::to_string(n_groups) + " equal groups");
  std::vector<PerceptualFeatures> feats;
  feats.reserve(images.size());
  for (const auto& img : images) feats.push_back(perceptual_features(img, fx));
  const auto m = distance_matrix(images.size(), [&](std::size_t i, std::size_t j) {
    return perceptual_distance(feats[i], feats[j]);
  });
  return cluster_groups(m, n_groups).score;
}

// ---------------------------------------------------------------------------
// Localisation

// Pooled pixel ROC AUC via the rank-sum statistic, ties given average rank.
inline double pixel_auroc(const std::vector<Heatmap>& heatmaps, const std::vector<RegionMask>& masks) {
  if (heatmaps.size() != masks.size()) throw ContractError("pixel_auroc: list lengths differ");
  std::vector<std::pair<float, bool>> px;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    if (!heatmaps[i].aligned_with(masks[i])) throw ContractError("pixel_auroc: heatmap/mask " + std::to_string(i) + " not aligned");
    for (std::size_t k = 0; k < heatmaps[i].size(); ++k)
      px.emplace_back(heatmaps[i].pixels()[k], masks[i].pixels()[k] > 0.5f);
  }
  const auto positives = static_cast<double>(std::count_if(px.begin(), px.end(), [](auto& p) { return p.second; }));
  const double negatives = static_cast<double>(px.size()) - positives;
  if (positives == 0 || negatives == 0)
    throw UndefinedScoreError("pixel_auroc: ground truth is all-" + std::string(positives == 0 ? "negative" : "positive"));
  std::sort(px.begin(), px.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < px.size();) {
    std::size_t j = i;
    while (j < px.size() && px[j].first == px[i].first) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (px[k].second) rank_sum += avg_rank;
    i = j;
  }
  return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives);
}

// ---------------------------------------------------------------------------
// Desk-scale classifier for the inception score

// Nearest-centroid classifier over globally pooled frozen features; posteriors
// are a softmax of negative squared distances scaled by the mean within-class spread.
class CentroidClassifier {
 public:
  CentroidClassifier(const FeatureExtractor<float>& fx, const std::vector<ImageTensor>& images,
                     const std::vector<int>& labels, int classes)
      : fx_(&fx) {
    if (images.size() != labels.size() || images.empty() || classes < 2)
      throw ParameterError("CentroidClassifier: need aligned images/labels and at least 2 classes");
    std::vector<std::vector<double>> feats;
    for (const auto& img : images) feats.push_back(embed(img));
    const std::size_t d = feats.front().size();
    centroids_.assign(static_cast<std::size_t>(classes), std::vector<double>(d, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      if (labels[i] < 0 || c >= centroids_.size()) throw ParameterError("CentroidClassifier: label out of range");
      ++counts[c];
      for (std::size_t k = 0; k < d; ++k) centroids_[c][k] += feats[i][k];
    }
    for (std::size_t c = 0; c < centroids_.size(); ++c) {
      if (counts[c] == 0) throw ParameterError("CentroidClassifier: class " + std::to_string(c) + " has no examples");
      for (auto& v : centroids_[c]) v /= counts[c];
    }
    double spread = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) spread += sq(feats[i], centroids_[static_cast<std::size_t>(labels[i])]);
    temperature_ = std::max(spread / static_cast<double>(feats.size()), 1e-12);
  }

  Distribution operator()(const ImageTensor& image) const {
    const auto f = embed(image);
    Distribution logits;
    for (const auto& c : centroids_) logits.push_back(-sq(f, c) / temperature_);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (auto& v : logits) z += (v = std::exp(v - mx));
    for (auto& v : logits) v /= z;
    return logits;
  }

 private:
  std::vector<double> embed(const ImageTensor& image) const {
    NoGradGuard guard;
    std::vector<double> out;
    for (const auto& f : fx_->features(Var<float>(to_tensor<float>(image)))) {
      const auto& t = f.value();
      for (int c = 0; c < t.c(); ++c) {
        double s = 0;
        for (std::size_t i = 0; i < t.plane(); ++i) s += t[c * t.plane() + i];
        out.push_back(s / static_cast<double>(t.plane()));
      }
    }
    return out;
  }

  static double sq(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  }

  const FeatureExtractor<float>* fx_;
  std::vector<std::vector<double>> centroids_;
  double temperature_ = 1.0;
};

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string category;
  std::optional<ScoreSummary> is;
  std::optional<double> lpips;
  std::optional<double> auroc;
};

inline nlohmann::json to_json(const MetricRow& r) {
  nlohmann::json j = {{"category", r.category}};
  if (r.is) {
    j["is_mean"] = r.is->mean;
    j["is_std"] = r.is->std;
  }
  if (r.lpips) {
    j["lpips"] = *r.lpips;
    j["lpips_x10"] = *r.lpips * 10.0;
  }
  if (r.auroc) j["pixel_auroc"] = *r.auroc;
  return j;
}

inline std::string report_jsonl(const std::vector<MetricRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += to_json(r).dump() + "\n";
  return out;
}

inline std::string report_text(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  std::size_t width = 8;
  for (const auto& r : rows) width = std::max(width, r.category.size());
  auto cell = [&](std::optional<double> v) {
    std::ostringstream c;
    if (v) c << std::fixed << std::setprecision(4) << *v;
    else c << "-";
    return c.str();
  };
  os << std::left << std::setw(static_cast<int>(width)) << "category" << std::right << std::setw(10) << "IS"
     << std::setw(10) << "IS std" << std::setw(10) << "LPIPS" << std::setw(10) << "LPIPSx10" << std::setw(12)
     << "pixelAUROC" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.category << std::right << std::setw(10)
       << cell(r.is ? std::optional(r.is->mean) : std::nullopt) << std::setw(10)
       << cell(r.is ? std::optional(r.is->std) : std::nullopt) << std::setw(10) << cell(r.lpips) << std::setw(10)
       << cell(r.lpips ? std::optional(*r.lpips * 10.0) : std::nullopt) << std::setw(12) << cell(r.auroc) << '\n';
  }
  return os.str();
}

}  // namespace af
