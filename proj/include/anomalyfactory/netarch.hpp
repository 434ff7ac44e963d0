#pragma once

// The single architecture shared by all three stages: a generator with one
// encoder and two decoders (texture T and heatmap H) followed by the fusion
// out = I_in * (1 - H) + T * H, and a multi-scale conditional patch
// discriminator.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "anomalyfactory/autograd.hpp"
#include "anomalyfactory/ops.hpp"
#include "anomalyfactory/raster.hpp"
#include "anomalyfactory/seeding.hpp"

namespace af {

enum class Stage { boot, flare, blaze };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::boot: return "boot";
    case Stage::flare: return "flare";
    case Stage::blaze: return "blaze";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "boot") return Stage::boot;
  if (s == "flare") return Stage::flare;
  if (s == "blaze") return Stage::blaze;
  throw ConfigError("unknown stage '" + s + "' (expected boot, flare or blaze)");
}

struct GeneratorConfig {
  int base_channels = 32;
  int num_scales = 4;  // stride-2 encoder steps, mirrored by each decoder
  int num_resblocks = 4;
  int noise_dim = 16;  // bottleneck channels receiving noise
  double noise_scale = 0.1;  // noise amplitude relative to the bottleneck feature std
  std::string heatmap_activation = "sigmoid";
  int disc_channels = 32;
  int disc_layers = 3;
  int disc_scales = 2;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;

  int bottleneck_channels() const { return base_channels << num_scales; }

  void validate() const {
    if (num_scales < 2) throw ConfigError("GeneratorConfig: num_scales must be >= 2");
    if (noise_dim < 0) throw ConfigError("GeneratorConfig: noise_dim must be >= 0");
    if (base_channels < 1 || disc_channels < 1) throw ConfigError("GeneratorConfig: channels must be >= 1");
    if (num_resblocks < 0) throw ConfigError("GeneratorConfig: num_resblocks must be >= 0");
    if (disc_layers < 1 || disc_scales < 1) throw ConfigError("GeneratorConfig: discriminator depth must be >= 1");
    if (noise_dim > bottleneck_channels())
      throw ConfigError("GeneratorConfig: noise_dim exceeds bottleneck channels");
    if (heatmap_activation != "sigmoid") throw ConfigError("GeneratorConfig: heatmap_activation must be 'sigmoid'");
  }

  void check_resolution(int height, int width) const {
    const int f = 1 << num_scales;
    if (height % f != 0 || width % f != 0 || height == 0 || width == 0)
      throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by 2^num_scales = " + std::to_string(f));
  }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"base_channels", c.base_channels}, {"num_scales", c.num_scales},
       {"num_resblocks", c.num_resblocks}, {"noise_dim", c.noise_dim},
       {"noise_scale", c.noise_scale},     {"heatmap_activation", c.heatmap_activation},
       {"disc_channels", c.disc_channels}, {"disc_layers", c.disc_layers},
       {"disc_scales", c.disc_scales}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  const GeneratorConfig d;
  c.base_channels = j.value("base_channels", d.base_channels);
  c.num_scales = j.value("num_scales", d.num_scales);
  c.num_resblocks = j.value("num_resblocks", d.num_resblocks);
  c.noise_dim = j.value("noise_dim", d.noise_dim);
  c.noise_scale = j.value("noise_scale", d.noise_scale);
  c.heatmap_activation = j.value("heatmap_activation", d.heatmap_activation);
  c.disc_channels = j.value("disc_channels", d.disc_channels);
  c.disc_layers = j.value("disc_layers", d.disc_layers);
  c.disc_scales = j.value("disc_scales", d.disc_scales);
}

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  static Conv make(int cin, int cout, int k, int stride, int pad, std::mt19937_64& rng) {
    std::normal_distribution<double> init(0.0, 0.02);
    Tensor<T> w(cout, cin, k, k);
    for (auto& v : w.values()) v = static_cast<T>(init(rng));
    return {Var<T>(std::move(w), true), Var<T>(Tensor<T>(1, cout, 1, 1), true), stride, pad};
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

  void collect(std::vector<NamedParam<T>>& out, const std::string& name) const {
    out.push_back({name + ".weight", weight});
    out.push_back({name + ".bias", bias});
  }
};

template <typename T>
struct ResBlock {
  Conv<T> first, second;

  Var<T> operator()(const Var<T>& x) const {
    const Var<T> h = ops::relu(ops::instance_norm(first(x)));
    return ops::add(x, ops::instance_norm(second(h)));
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& name) const {
    first.collect(out, name + ".0");
    second.collect(out, name + ".1");
  }
};

template <typename T>
struct Decoder {
  std::vector<Conv<T>> up;  // deepest first
  Conv<T> head;

  Var<T> operator()(Var<T> h) const {
    for (const auto& c : up) h = ops::relu(ops::instance_norm(c(ops::upsample2(h))));
    return ops::sigmoid(head(h));
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& name) const {
    for (std::size_t i = 0; i < up.size(); ++i) up[i].collect(out, name + ".up" + std::to_string(i));
    head.collect(out, name + ".head");
  }
};

template <typename T>
struct GeneratorOutput {
  Var<T> texture;  // T
  Var<T> heatmap;  // H
  Var<T> image;    // fused output
};

template <typename T>
class Generator {
 public:
  static constexpr int kEdgeChannels = 1;
  static constexpr int kImageChannels = 3;

  Generator() = default;
  Generator(const GeneratorConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    const int c0 = cfg.base_channels;
    stem_ = Conv<T>::make(kEdgeChannels + kImageChannels, c0, 7, 1, 3, rng);
    for (int i = 0; i < cfg.num_scales; ++i) down_.push_back(Conv<T>::make(c0 << i, c0 << (i + 1), 3, 2, 1, rng));
    const int cb = cfg.bottleneck_channels();
    for (int i = 0; i < cfg.num_resblocks; ++i)
      res_.push_back({Conv<T>::make(cb, cb, 3, 1, 1, rng), Conv<T>::make(cb, cb, 3, 1, 1, rng)});
    auto make_decoder = [&](int out_channels) {
      Decoder<T> d;
      for (int i = cfg.num_scales - 1; i >= 0; --i) d.up.push_back(Conv<T>::make(c0 << (i + 1), c0 << i, 3, 1, 1, rng));
      d.head = Conv<T>::make(c0, out_channels, 7, 1, 3, rng);
      return d;
    };
    texture_ = make_decoder(kImageChannels);
    heat_ = make_decoder(1);
  }

  // Shared encoder: stem, stride-2 steps, residual blocks.
  Var<T> encode(const Var<T>& edge, const Var<T>& reference) const {
    Var<T> h = ops::relu(ops::instance_norm(stem_(ops::concat_channels<T>({edge, reference}))));
    for (const auto& d : down_) h = ops::relu(ops::instance_norm(d(h)));
    for (const auto& r : res_) h = r(h);
    return h;
  }

  GeneratorOutput<T> forward(const Var<T>& edge, const Var<T>& reference,
                             std::optional<std::uint64_t> noise_seed) const {
    const auto& es = edge.shape();
    const auto& rs = reference.shape();
    if (es[1] != kEdgeChannels || rs[1] != kImageChannels || es[0] != rs[0] || es[2] != rs[2] || es[3] != rs[3])
      throw ContractError("generator_forward: edge/reference shapes are not aligned");
    cfg_.check_resolution(rs[2], rs[3]);
    Var<T> h = encode(edge, reference);
    if (noise_seed && cfg_.noise_dim > 0 && cfg_.noise_scale > 0.0)
      h = ops::add_constant(h, bottleneck_noise(h.value(), *noise_seed));
    GeneratorOutput<T> out;
    out.texture = texture_(h);
    out.heatmap = heat_(h);
    out.image = ops::fuse(reference, out.texture, out.heatmap);
    return out;
  }

  void collect(std::vector<NamedParam<T>>& out) const {
    stem_.collect(out, "gen.stem");
    for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(out, "gen.down" + std::to_string(i));
    for (std::size_t i = 0; i < res_.size(); ++i) res_[i].collect(out, "gen.res" + std::to_string(i));
    texture_.collect(out, "gen.texture");
    heat_.collect(out, "gen.heat");
  }

  const GeneratorConfig& config() const { return cfg_; }

 private:
  // Seeded Gaussian noise on the first noise_dim channels, scaled by each
  // sample's bottleneck feature std (treated as a constant).
  Tensor<T> bottleneck_noise(const Tensor<T>& h, std::uint64_t seed) const {
    Tensor<T> noise(h.shape());
    const std::size_t per_sample = static_cast<std::size_t>(h.c()) * h.plane();
    for (int n = 0; n < h.n(); ++n) {
      const T* src = h.data() + n * per_sample;
      double m = 0, v = 0;
      for (std::size_t i = 0; i < per_sample; ++i) m += src[i];
      m /= static_cast<double>(per_sample);
      for (std::size_t i = 0; i < per_sample; ++i) v += (src[i] - m) * (src[i] - m);
      const double amp = cfg_.noise_scale * std::sqrt(v / static_cast<double>(per_sample));
      std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(n)}));
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (int c = 0; c < cfg_.noise_dim; ++c)
        for (std::size_t i = 0; i < h.plane(); ++i)
          noise[(static_cast<std::size_t>(n) * h.c() + c) * h.plane() + i] = static_cast<T>(amp * gauss(rng));
    }
    return noise;
  }

  GeneratorConfig cfg_;
  Conv<T> stem_;
  std::vector<Conv<T>> down_;
  std::vector<ResBlock<T>> res_;
  Decoder<T> texture_;
  Decoder<T> heat_;
};

template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const GeneratorConfig& cfg, std::mt19937_64& rng) {
    const int cin = Generator<T>::kEdgeChannels + 2 * Generator<T>::kImageChannels;
    for (int s = 0; s < cfg.disc_scales; ++s) {
      Scale net;
      int c = cfg.disc_channels;
      net.convs.push_back(Conv<T>::make(cin, c, 4, 2, 1, rng));
      for (int l = 1; l < cfg.disc_layers; ++l) {
        net.convs.push_back(Conv<T>::make(c, c * 2, 4, 2, 1, rng));
        c *= 2;
      }
      net.convs.push_back(Conv<T>::make(c, c, 3, 1, 1, rng));
      net.convs.push_back(Conv<T>::make(c, 1, 3, 1, 1, rng));
      scales_.push_back(std::move(net));
    }
  }

  // One patch-logit map per scale; scale k sees the input average-pooled k times.
  std::vector<Var<T>> forward(const Var<T>& edge, const Var<T>& reference, const Var<T>& candidate) const {
    if (reference.shape() != candidate.shape() || edge.shape()[2] != reference.shape()[2] ||
        edge.shape()[3] != reference.shape()[3] || edge.shape()[0] != reference.shape()[0])
      throw ContractError("discriminator_forward: inputs are not aligned");
    Var<T> x = ops::concat_channels<T>({edge, reference, candidate});
    std::vector<Var<T>> logits;
    for (std::size_t s = 0; s < scales_.size(); ++s) {
      if (s > 0) x = ops::avg_pool2(x);
      const auto& convs = scales_[s].convs;
      Var<T> h = ops::leaky_relu(convs[0](x), T(0.2));
      for (std::size_t i = 1; i + 1 < convs.size(); ++i)
        h = ops::leaky_relu(ops::instance_norm(convs[i](h)), T(0.2));
      logits.push_back(convs.back()(h));
    }
    return logits;
  }

  void collect(std::vector<NamedParam<T>>& out) const {
    for (std::size_t s = 0; s < scales_.size(); ++s)
      for (std::size_t i = 0; i < scales_[s].convs.size(); ++i)
        scales_[s].convs[i].collect(out, "disc.s" + std::to_string(s) + ".c" + std::to_string(i));
  }

 private:
  struct Scale {
    std::vector<Conv<T>> convs;
  };
  std::vector<Scale> scales_;
};

template <typename T>
struct StageWeights {
  Stage stage = Stage::boot;
  GeneratorConfig config;
  Generator<T> generator;
  Discriminator<T> discriminator;

  static StageWeights create(const GeneratorConfig& cfg, Stage stage, std::uint64_t seed) {
    StageWeights w;
    w.stage = stage;
    w.config = cfg;
    std::mt19937_64 rng(seed);
    w.generator = Generator<T>(cfg, rng);
    w.discriminator = Discriminator<T>(cfg, rng);
    return w;
  }

  std::vector<NamedParam<T>> generator_params() const {
    std::vector<NamedParam<T>> out;
    generator.collect(out);
    return out;
  }
  std::vector<NamedParam<T>> discriminator_params() const {
    std::vector<NamedParam<T>> out;
    discriminator.collect(out);
    return out;
  }
  std::vector<NamedParam<T>> all_params() const {
    auto out = generator_params();
    for (auto& p : discriminator_params()) out.push_back(std::move(p));
    return out;
  }

  // Architecture signature: ordered (name, shape) list.
  std::vector<std::pair<std::string, std::array<int, 4>>> shape_list() const {
    std::vector<std::pair<std::string, std::array<int, 4>>> out;
    for (const auto& p : all_params()) out.emplace_back(p.name, p.var.shape());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : all_params()) n += p.var.value().size();
    return n;
  }

  // Deep copy with a new stage tag; parameter nodes are not shared.
  StageWeights clone_as(Stage new_stage) const {
    StageWeights w = create(config, new_stage, 0);
    auto dst = w.all_params();
    const auto src = all_params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].var.mutable_value() = src[i].var.value();
    return w;
  }

  void set_trainable(bool trainable) {
    for (auto& p : all_params()) p.var.set_requires_grad(trainable);
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : all_params()) h = fnv1a(p.var.value().data(), p.var.value().size() * sizeof(T), h);
    return h;
  }
};

template <typename T>
GeneratorOutput<T> generator_forward(const Var<T>& edge, const Var<T>& reference,
                                     std::optional<std::uint64_t> noise_seed, const StageWeights<T>& weights) {
  return weights.generator.forward(edge, reference, noise_seed);
}

template <typename T>
std::vector<Var<T>> discriminator_forward(const Var<T>& edge, const Var<T>& reference, const Var<T>& candidate,
                                          const StageWeights<T>& weights) {
  return weights.discriminator.forward(edge, reference, candidate);
}

struct GeneratedRasters {
  ImageTensor texture;
  Heatmap heatmap;
  ImageTensor image;
};

// Single-image inference convenience; builds no graph.
template <typename T>
GeneratedRasters generator_forward(const EdgeMap& edge, const ImageTensor& reference,
                                   std::optional<std::uint64_t> noise_seed, const StageWeights<T>& weights) {
  require_aligned("generator_forward", reference, edge);
  NoGradGuard guard;
  const auto out = weights.generator.forward(Var<T>(to_tensor<T>(edge)), Var<T>(to_tensor<T>(reference)), noise_seed);
  return {from_tensor<RgbTag>(out.texture.value()), from_tensor<HeatTag>(out.heatmap.value()),
          from_tensor<RgbTag>(out.image.value())};
}

// out = base * (1 - h) + texture * h on rasters.
inline ImageTensor fuse(const ImageTensor& base, const ImageTensor& texture, const Heatmap& h) {
  if (!base.aligned_with(texture) || !base.aligned_with(h) || base.channels() != texture.channels() ||
      h.channels() != 1)
    throw ContractError("fuse: shape mismatch");
  ImageTensor out(base.height(), base.width(), base.channels());
  for (int c = 0; c < base.channels(); ++c)
    for (int y = 0; y < base.height(); ++y)
      for (int x = 0; x < base.width(); ++x) {
        const float w = h(y, x);
        out.at(c, y, x) = base.at(c, y, x) * (1.0f - w) + texture.at(c, y, x) * w;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "AFCKPT01", u64 header length, JSON header, float32 payload.

inline constexpr char kCheckpointMagic[8] = {'A', 'F', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const StageWeights<T>& w) {
  nlohmann::json header;
  header["stage"] = to_string(w.stage);
  header["config"] = w.config;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, shape] : w.shape_list()) params.push_back({{"name", name}, {"shape", shape}});
  header["params"] = params;
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : w.all_params())
      for (T v : p.var.value().values()) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), sizeof(f));
      }
    if (!out) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

template <typename T = float>
StageWeights<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw LoadError("'" + path.string() + "' is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  auto w = StageWeights<T>::create(header.at("config").get<GeneratorConfig>(),
                                   parse_stage(header.at("stage").get<std::string>()), 0);
  const auto shapes = w.shape_list();
  if (header.at("params").size() != shapes.size())
    throw LoadError("checkpoint parameter list does not match its config");
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (header["params"][i].at("shape").get<std::array<int, 4>>() != shapes[i].second)
      throw LoadError("checkpoint parameter '" + shapes[i].first + "' has an unexpected shape");
  for (auto& p : w.all_params())
    for (auto& v : p.var.mutable_value().values()) {
      float f = 0;
      in.read(reinterpret_cast<char*>(&f), sizeof(f));
      v = static_cast<T>(f);
    }
  if (!in) throw LoadError("checkpoint '" + path.string() + "' is truncated");
  return w;
}

// Stage hand-off precondition: the upstream weights carry the expected tag and
// the downstream architecture matches.
template <typename T>
void require_stage(const StageWeights<T>& w, Stage expected, const GeneratorConfig* downstream = nullptr) {
  if (w.stage != expected)
    throw ContractError(std::string("expected ") + to_string(expected) + " weights, got " + to_string(w.stage));
  if (downstream && !(*downstream == w.config))
    throw ContractError("architecture mismatch between stages");
}

}  // namespace af
