#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

using namespace af;
using aftest::TempDir;

namespace {

GeneratorConfig tiny() {
  GeneratorConfig c;
  c.base_channels = 4;
  c.num_scales = 2;
  c.num_resblocks = 1;
  c.noise_dim = 4;
  c.disc_channels = 4;
  c.disc_layers = 2;
  c.disc_scales = 2;
  return c;
}

Tensor<float> random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
  Tensor<float> t(n, c, h, w);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST(Fuse, ExtremesAndMidpoint) {
  std::mt19937_64 rng(1);
  const auto base = aftest::random_image(6, 7, rng);
  const auto tex = aftest::random_image(6, 7, rng);
  EXPECT_EQ(fuse(base, tex, make_heatmap(6, 7, 0.0f)), base);
  EXPECT_EQ(fuse(base, tex, make_heatmap(6, 7, 1.0f)), tex);
  const auto mid = fuse(base, tex, make_heatmap(6, 7, 0.5f));
  for (std::size_t i = 0; i < mid.size(); ++i)
    EXPECT_FLOAT_EQ(mid.pixels()[i], 0.5f * (base.pixels()[i] + tex.pixels()[i]));
}

TEST(Fuse, TensorAndRasterVersionsAgree) {
  std::mt19937_64 rng(2);
  const auto base = aftest::random_image(5, 5, rng);
  const auto tex = aftest::random_image(5, 5, rng);
  Heatmap h = make_heatmap(5, 5);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : h.pixels()) v = u(rng);
  const auto var = ops::fuse(Var<float>(to_tensor<float>(base)), Var<float>(to_tensor<float>(tex)),
                             Var<float>(to_tensor<float>(h)));
  const auto raster = fuse(base, tex, h);
  const auto back = from_tensor<RgbTag>(var.value());
  for (std::size_t i = 0; i < raster.size(); ++i) EXPECT_NEAR(back.pixels()[i], raster.pixels()[i], 1e-6);
}

TEST(Fuse, ShapeMismatchRejected) {
  EXPECT_THROW(fuse(make_image(4, 4), make_image(4, 5), make_heatmap(4, 4)), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Config, ValidationCatchesBadFields) {
  auto c = tiny();
  c.num_scales = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.noise_dim = c.bottleneck_channels() + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.heatmap_activation = "tanh";
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(tiny().check_resolution(18, 16), ConfigError);
  EXPECT_NO_THROW(tiny().check_resolution(20, 16));
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny();
  c.noise_scale = 0.25;
  EXPECT_EQ(nlohmann::json(c).get<GeneratorConfig>(), c);
}

TEST(Config, StageNames) {
  for (Stage s : {Stage::boot, Stage::flare, Stage::blaze}) EXPECT_EQ(parse_stage(to_string(s)), s);
  EXPECT_THROW(parse_stage("ember"), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Generator, OutputShapesFollowInput) {
  const auto w = StageWeights<float>::create(tiny(), Stage::boot, 3);
  std::mt19937_64 rng(3);
  for (auto [n, h, wd] : {std::tuple{1, 16, 16}, std::tuple{2, 8, 12}}) {
    const Var<float> edge(random_tensor(n, 1, h, wd, rng)), ref(random_tensor(n, 3, h, wd, rng));
    const auto out = generator_forward(edge, ref, std::nullopt, w);
    EXPECT_EQ(out.texture.shape(), (std::array<int, 4>{n, 3, h, wd}));
    EXPECT_EQ(out.heatmap.shape(), (std::array<int, 4>{n, 1, h, wd}));
    EXPECT_EQ(out.image.shape(), (std::array<int, 4>{n, 3, h, wd}));
  }
}

TEST(Generator, OutputsStayInUnitRange) {
  std::mt19937_64 rng(4);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto w = StageWeights<float>::create(tiny(), Stage::boot, s);
    const auto g = generator_forward(aftest::random_edges(8, 8, rng), aftest::random_image(8, 8, rng), s, w);
    EXPECT_TRUE(in_unit_range(g.heatmap));
    EXPECT_TRUE(in_unit_range(g.texture));
    EXPECT_TRUE(in_unit_range(g.image));
  }
}

TEST(Generator, NoiseSeedControlsOutput) {
  const auto w = StageWeights<float>::create(tiny(), Stage::boot, 5);
  std::mt19937_64 rng(5);
  const auto edge = aftest::random_edges(16, 16, rng);
  const auto ref = aftest::random_image(16, 16, rng);
  const auto a = generator_forward(edge, ref, 1u, w);
  const auto b = generator_forward(edge, ref, 2u, w);
  EXPECT_EQ(a.image, generator_forward(edge, ref, 1u, w).image);
  EXPECT_FALSE(a.image == b.image);
  EXPECT_EQ(generator_forward(edge, ref, std::nullopt, w).image,
            generator_forward(edge, ref, std::nullopt, w).image);
}

TEST(Generator, ZeroNoiseDimIgnoresSeed) {
  auto c = tiny();
  c.noise_dim = 0;
  const auto w = StageWeights<float>::create(c, Stage::boot, 6);
  std::mt19937_64 rng(6);
  const auto edge = aftest::random_edges(8, 8, rng);
  const auto ref = aftest::random_image(8, 8, rng);
  EXPECT_EQ(generator_forward(edge, ref, 1u, w).image, generator_forward(edge, ref, std::nullopt, w).image);
}

TEST(Generator, MisalignedInputsRejected) {
  const auto w = StageWeights<float>::create(tiny(), Stage::boot, 7);
  EXPECT_THROW(generator_forward(Var<float>(Tensor<float>(1, 1, 8, 8)), Var<float>(Tensor<float>(1, 3, 8, 12)),
                                 std::nullopt, w),
               ContractError);
  EXPECT_THROW(generator_forward(Var<float>(Tensor<float>(1, 1, 6, 6)), Var<float>(Tensor<float>(1, 3, 6, 6)),
                                 std::nullopt, w),
               ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Discriminator, OneLogitMapPerScale) {
  auto c = tiny();
  c.disc_scales = 3;
  const auto w = StageWeights<float>::create(c, Stage::boot, 8);
  std::mt19937_64 rng(8);
  const Var<float> e(random_tensor(2, 1, 32, 32, rng)), r(random_tensor(2, 3, 32, 32, rng)),
      x(random_tensor(2, 3, 32, 32, rng));
  const auto logits = discriminator_forward(e, r, x, w);
  ASSERT_EQ(logits.size(), 3u);
  for (int s = 0; s < 3; ++s) {
    const int side = 32 >> (s + c.disc_layers);
    EXPECT_EQ(logits[s].shape(), (std::array<int, 4>{2, 1, side, side})) << "scale " << s;
  }
}

TEST(Discriminator, RespondsToEveryInput) {
  const auto w = StageWeights<float>::create(tiny(), Stage::boot, 9);
  std::mt19937_64 rng(9);
  const Tensor<float> e = random_tensor(1, 1, 16, 16, rng), r = random_tensor(1, 3, 16, 16, rng),
                      x = random_tensor(1, 3, 16, 16, rng);
  auto run = [&](const Tensor<float>& ee, const Tensor<float>& rr, const Tensor<float>& xx) {
    return discriminator_forward(Var<float>(ee), Var<float>(rr), Var<float>(xx), w)[0].value();
  };
  const auto base = run(e, r, x);
  EXPECT_FALSE(run(random_tensor(1, 1, 16, 16, rng), r, x) == base);
  EXPECT_FALSE(run(e, random_tensor(1, 3, 16, 16, rng), x) == base);
  EXPECT_FALSE(run(e, r, random_tensor(1, 3, 16, 16, rng)) == base);
}

TEST(Discriminator, MisalignedInputsRejected) {
  const auto w = StageWeights<float>::create(tiny(), Stage::boot, 10);
  EXPECT_THROW(discriminator_forward(Var<float>(Tensor<float>(1, 1, 8, 8)), Var<float>(Tensor<float>(1, 3, 8, 8)),
                                     Var<float>(Tensor<float>(1, 3, 8, 4)), w),
               ContractError);
}

// ---------------------------------------------------------------------------

TEST(Weights, AllStagesShareArchitecture) {
  const auto b = StageWeights<float>::create(tiny(), Stage::boot, 1);
  const auto f = StageWeights<float>::create(tiny(), Stage::flare, 2);
  const auto z = StageWeights<float>::create(tiny(), Stage::blaze, 3);
  EXPECT_EQ(b.shape_list(), f.shape_list());
  EXPECT_EQ(b.shape_list(), z.shape_list());
  EXPECT_NE(b.fingerprint(), f.fingerprint());
}

TEST(Weights, ParameterCountMatchesLayerArithmetic) {
  const auto c = tiny();
  const auto w = StageWeights<float>::create(c, Stage::boot, 1);
  auto conv = [](int ci, int co, int k) { return static_cast<std::size_t>(ci * co * k * k + co); };
  const int c0 = c.base_channels, cb = c.bottleneck_channels();
  std::size_t gen = conv(4, c0, 7);
  for (int i = 0; i < c.num_scales; ++i) gen += conv(c0 << i, c0 << (i + 1), 3);
  gen += 2 * c.num_resblocks * conv(cb, cb, 3);
  for (int out : {3, 1}) {
    for (int i = 0; i < c.num_scales; ++i) gen += conv(c0 << (i + 1), c0 << i, 3);
    gen += conv(c0, out, 7);
  }
  std::size_t disc = conv(7, c.disc_channels, 4);
  int ch = c.disc_channels;
  for (int l = 1; l < c.disc_layers; ++l, ch *= 2) disc += conv(ch, ch * 2, 4);
  disc += conv(ch, ch, 3) + conv(ch, 1, 3);
  EXPECT_EQ(w.parameter_count(), gen + c.disc_scales * disc);
}

TEST(Weights, CloneIsDeepAndRetagged) {
  auto b = StageWeights<float>::create(tiny(), Stage::boot, 11);
  const auto fp = b.fingerprint();
  auto f = b.clone_as(Stage::flare);
  EXPECT_EQ(f.stage, Stage::flare);
  EXPECT_EQ(f.fingerprint(), fp);
  f.all_params()[0].var.mutable_value()[0] += 1.0f;
  EXPECT_EQ(b.fingerprint(), fp);
  EXPECT_NE(f.fingerprint(), fp);
}

TEST(Weights, RequireStageChecksTagAndArchitecture) {
  const auto b = StageWeights<float>::create(tiny(), Stage::boot, 12);
  EXPECT_NO_THROW(require_stage(b, Stage::boot));
  EXPECT_THROW(require_stage(b, Stage::flare), ContractError);
  auto other = tiny();
  other.base_channels = 8;
  EXPECT_THROW(require_stage(b, Stage::boot, &other), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripPreservesEverything) {
  TempDir dir("ckpt");
  const auto w = StageWeights<float>::create(tiny(), Stage::flare, 13);
  save_checkpoint(dir / "f.ckpt", w);
  const auto back = load_checkpoint(dir / "f.ckpt");
  EXPECT_EQ(back.stage, Stage::flare);
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(back.fingerprint(), w.fingerprint());
  std::mt19937_64 rng(13);
  const auto edge = aftest::random_edges(8, 8, rng);
  const auto ref = aftest::random_image(8, 8, rng);
  EXPECT_EQ(generator_forward(edge, ref, 4u, back).image, generator_forward(edge, ref, 4u, w).image);
}

TEST(Checkpoint, BadFilesAreLoadErrors) {
  TempDir dir("badckpt");
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), LoadError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), LoadError);

  save_checkpoint(dir / "full.ckpt", StageWeights<float>::create(tiny(), Stage::boot, 14));
  const auto size = std::filesystem::file_size(dir / "full.ckpt");
  std::filesystem::copy_file(dir / "full.ckpt", dir / "cut.ckpt");
  std::filesystem::resize_file(dir / "cut.ckpt", size - 8);
  EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), LoadError);
}
