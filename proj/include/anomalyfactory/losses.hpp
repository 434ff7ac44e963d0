#pragma once

// Training objectives. Scalar losses are graph values (Var) so every stage
// total can be back-propagated; total_loss is also usable on plain doubles.
//
// Sign conventions:
//   d_objective  = log D(real) + log(1 - D(fake)), averaged over patches and
//                  scales (maximised by the discriminator, always <= 0)
//   d_loss       = -d_objective (what the discriminator actually minimises)
//   g_adversarial = -log D(fake) (non-saturating generator counterpart, >= 0)

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "anomalyfactory/netarch.hpp"
#include "anomalyfactory/ops.hpp"

namespace af {

struct LossWeights {
  double w_fh = 10.0;
  double w_bh = 10.0;
  std::vector<double> perceptual_layer_weights{0.25, 0.25, 0.25, 0.25};
  double logit_clamp = 15.0;

  void validate() const {
    if (w_fh < 0.0 || w_bh < 0.0) throw ConfigError("LossWeights: heatmap weights must be >= 0");
  }
};

struct FeatureExtractorConfig {
  std::string kind = "fixed-random-conv";  // or "pretrained-perceptual"
  std::vector<int> taps{1, 2, 3, 4};       // 0 = raw pixels, k = after conv block k
  std::uint64_t seed = 1234;
  std::vector<int> channels{16, 32, 64, 64};

  friend bool operator==(const FeatureExtractorConfig&, const FeatureExtractorConfig&) = default;
};

// Frozen conv feature pyramid: block k = [avg-pool if k > 1] conv3x3 + ReLU.
template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const FeatureExtractorConfig& cfg = {}) : cfg_(cfg) {
    for (int t : cfg.taps)
      if (t < 0 || t > static_cast<int>(cfg.channels.size()))
        throw ConfigError("FeatureExtractor: tap index " + std::to_string(t) + " out of range");
    std::mt19937_64 rng(cfg.seed);
    int cin = 3;
    for (int cout : cfg.channels) {
      Tensor<T> w(cout, cin, 3, 3);
      std::normal_distribution<double> init(0.0, std::sqrt(2.0 / (cin * 9)));
      for (auto& v : w.values()) v = static_cast<T>(init(rng));
      convs_.push_back({Var<T>(std::move(w), false), Var<T>(Tensor<T>(1, cout, 1, 1), false), 1, 1});
      cin = cout;
    }
    if (cfg.kind == "pretrained-perceptual") {
      load_pretrained();
    } else if (cfg.kind != "fixed-random-conv") {
      throw ConfigError("unknown feature extractor kind '" + cfg.kind + "'");
    }
  }

  // Features at every configured tap, in tap order.
  std::vector<Var<T>> features(const Var<T>& image) const {
    std::vector<Var<T>> levels{image};
    Var<T> h = image;
    for (std::size_t k = 0; k < convs_.size(); ++k) {
      if (k > 0 && h.shape()[2] >= 2 && h.shape()[3] >= 2) h = ops::avg_pool2(h);
      h = ops::relu(convs_[k](h));
      levels.push_back(h);
    }
    std::vector<Var<T>> out;
    for (int t : cfg_.taps) out.push_back(levels[static_cast<std::size_t>(t)]);
    return out;
  }

  const FeatureExtractorConfig& config() const { return cfg_; }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& c : convs_) {
      h = fnv1a(c.weight.value().data(), c.weight.value().size() * sizeof(T), h);
      h = fnv1a(c.bias.value().data(), c.bias.value().size() * sizeof(T), h);
    }
    return h;
  }

  // Raw float32 weight dump in layer order (weights then bias), as read by
  // the pretrained-perceptual kind.
  void save_weights(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    for (const auto& c : convs_)
      for (const auto* t : {&c.weight.value(), &c.bias.value()})
        for (T v : t->values()) {
          const float f = static_cast<float>(v);
          out.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    if (!out) throw IoError("cannot write feature weights '" + path.string() + "'");
  }

 private:
  void load_pretrained() {
    const char* cache = std::getenv("ANOMALYFACTORY_CACHE");
    if (!cache) throw ConfigError("pretrained-perceptual extractor needs ANOMALYFACTORY_CACHE to be set");
    const std::filesystem::path path = std::filesystem::path(cache) / "perceptual.bin";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("pretrained perceptual weights not found at '" + path.string() + "'");
    for (auto& c : convs_)
      for (auto* var : {&c.weight, &c.bias})
        for (auto& v : var->mutable_value().values()) {
          float f = 0;
          in.read(reinterpret_cast<char*>(&f), sizeof(f));
          v = static_cast<T>(f);
        }
    if (!in) throw ConfigError("pretrained perceptual weights at '" + path.string() + "' are truncated");
  }

  FeatureExtractorConfig cfg_;
  std::vector<Conv<T>> convs_;
};

// Weighted sum over taps of the mean absolute feature difference.
template <typename T>
Var<T> perceptual_loss(const Var<T>& generated, const Var<T>& target, const FeatureExtractor<T>& fx,
                       const LossWeights& weights) {
  const auto& lw = weights.perceptual_layer_weights;
  if (lw.size() != fx.config().taps.size())
    throw ConfigError("perceptual_layer_weights must have one entry per feature tap");
  const auto fg = fx.features(generated);
  const auto ft = fx.features(target);
  Var<T> total(Tensor<T>::scalar(T(0)));
  for (std::size_t i = 0; i < fg.size(); ++i)
    total = ops::add(total, ops::scale(ops::mean_abs_diff(fg[i], ft[i]), static_cast<T>(lw[i])));
  return total;
}

template <typename T>
Var<T> heatmap_loss(const Var<T>& heatmap, const Var<T>& target) {
  return ops::mean_squared_diff(heatmap, target);
}

inline double heatmap_loss(const Heatmap& h, const RegionMask& m) {
  if (!h.aligned_with(m)) throw ContractError("heatmap_loss: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double d = static_cast<double>(h.pixels()[i]) - m.pixels()[i];
    acc += d * d;
  }
  return h.size() == 0 ? 0.0 : acc / static_cast<double>(h.size());
}

// log D(real) + log(1 - D(fake)), averaged over patches then scales.
template <typename T>
Var<T> discriminator_objective(const std::vector<Var<T>>& real_logits, const std::vector<Var<T>>& fake_logits,
                               double clamp) {
  if (real_logits.size() != fake_logits.size() || real_logits.empty())
    throw ContractError("discriminator_objective: mismatched scale lists");
  Var<T> acc(Tensor<T>::scalar(T(0)));
  const T c = static_cast<T>(clamp);
  for (std::size_t s = 0; s < real_logits.size(); ++s) {
    acc = ops::add(acc, ops::mean_softplus(real_logits[s], T(-1), c));
    acc = ops::add(acc, ops::mean_softplus(fake_logits[s], T(1), c));
  }
  return ops::scale(acc, T(-1) / static_cast<T>(real_logits.size()));
}

// -log D(fake), averaged over patches then scales.
template <typename T>
Var<T> generator_adversarial(const std::vector<Var<T>>& fake_logits, double clamp) {
  if (fake_logits.empty()) throw ContractError("generator_adversarial: no logits");
  Var<T> acc(Tensor<T>::scalar(T(0)));
  for (const auto& f : fake_logits) acc = ops::add(acc, ops::mean_softplus(f, T(-1), static_cast<T>(clamp)));
  return ops::scale(acc, T(1) / static_cast<T>(fake_logits.size()));
}

template <typename T>
struct AdversarialLosses {
  Var<T> d_objective;  // maximisation form
  Var<T> d_loss;       // -d_objective
  Var<T> g_loss;       // non-saturating
};

// The discriminator terms see a detached copy of the generated image; the
// generator term keeps the graph into the generator.
template <typename T>
AdversarialLosses<T> adversarial_losses(const Var<T>& edge, const Var<T>& reference, const Var<T>& real,
                                        const Var<T>& generated, const StageWeights<T>& disc,
                                        double clamp = 15.0) {
  const auto real_logits = disc.discriminator.forward(edge, reference, real);
  const auto fake_detached = disc.discriminator.forward(edge, reference, generated.detach());
  AdversarialLosses<T> out;
  out.d_objective = discriminator_objective(real_logits, fake_detached, clamp);
  out.d_loss = ops::scale(out.d_objective, T(-1));
  out.g_loss = generator_adversarial(disc.discriminator.forward(edge, reference, generated), clamp);
  return out;
}

template <typename S>
struct LossComponents {
  S generator;    // L_G (perceptual)
  S adversarial;  // L_D term entering the stage total
  std::optional<S> heatmap;  // L_FH (flare) or L_BH (blaze); absent for boot
};

namespace detail {
inline double weighted(double v, double w) { return v * w; }
template <typename T>
Var<T> weighted(const Var<T>& v, double w) { return ops::scale(v, static_cast<T>(w)); }
inline double plus(double a, double b) { return a + b; }
template <typename T>
Var<T> plus(const Var<T>& a, const Var<T>& b) { return ops::add(a, b); }
}  // namespace detail

// boot: L_G + L_D;  flare: W_FH * L_FH + L_G + L_D;  blaze: W_BH * L_BH + L_G + L_D
template <typename S>
S total_loss(Stage stage, const LossComponents<S>& c, const LossWeights& w) {
  S base = detail::plus(c.generator, c.adversarial);
  switch (stage) {
    case Stage::boot:
      if (c.heatmap) throw ContractError("total_loss: the boot stage takes no heatmap term");
      return base;
    case Stage::flare:
    case Stage::blaze: {
      if (!c.heatmap) throw ContractError(std::string("total_loss: the ") + to_string(stage) + " stage needs a heatmap term");
      const double weight = stage == Stage::flare ? w.w_fh : w.w_bh;
      return detail::plus(detail::weighted(*c.heatmap, weight), base);
    }
  }
  throw ContractError("total_loss: unknown stage");
}

}  // namespace af
