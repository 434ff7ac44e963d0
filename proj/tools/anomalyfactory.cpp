// anomalyfactory: corpus building, staged training, generation, detection and
// evaluation from one binary.
//
// Exit codes: 0 success, 2 usage or contract violation, 1 runtime failure.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anomalyfactory.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::int64_t> seed;
  std::string out;
  std::string manifest;
  std::optional<int> resolution;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "global seed (overrides the config)");
  app->add_option("--out", c.out, "output directory (overrides the config)");
  app->add_option("--manifest", c.manifest, "dataset manifest (overrides the config)");
  app->add_option("--resolution", c.resolution, "square working resolution for every stage");
}

af::RunConfig resolve(const Common& c) {
  af::RunConfig cfg = c.config.empty() ? af::RunConfig::desk() : af::load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.manifest.empty()) cfg.manifest = c.manifest;
  if (c.resolution)
    for (af::Stage s : {af::Stage::boot, af::Stage::flare, af::Stage::blaze}) cfg.schedule(s).resolution = *c.resolution;
  cfg.validate();
  return cfg;
}

fs::path subdir(const af::RunConfig& cfg, const char* name) {
  const fs::path p = fs::path(cfg.out_dir) / name;
  fs::create_directories(p);
  return p;
}

fs::path checkpoint_path(const af::RunConfig& cfg, af::Stage s) {
  return fs::path(cfg.out_dir) / "checkpoints" / (std::string(af::to_string(s)) + ".ckpt");
}

// Loads the checkpoint of `stage`, failing with a usage-class error naming it.
af::StageWeights<af::Real> require_checkpoint(const af::RunConfig& cfg, af::Stage stage) {
  const fs::path p = checkpoint_path(cfg, stage);
  if (!fs::exists(p))
    throw af::ContractError(std::string("missing ") + af::to_string(stage) + " checkpoint at '" + p.string() +
                            "'; run `train --stage " + af::to_string(stage) + "` first");
  auto w = af::load_checkpoint<af::Real>(p);
  af::require_stage(w, stage);
  return w;
}

af::DatasetManifest require_manifest(const af::RunConfig& cfg) {
  if (cfg.manifest.empty()) throw af::ConfigError("no manifest given (use --manifest or the config's 'manifest')");
  return af::load_manifest(cfg.manifest);
}

af::TrainOptions train_options(const af::RunConfig& cfg) {
  af::TrainOptions opt;
  opt.weights = cfg.losses;
  opt.features = cfg.features;
  opt.augment = cfg.augment;
  opt.manipulation = cfg.manipulation;
  opt.blaze_recompute_edges = cfg.blaze_recompute_edges;
  return opt;
}

af::ImageTensor gray_to_rgb(const af::Raster<af::MaskTag>& m) {
  af::ImageTensor out = af::make_image(m.height(), m.width());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < m.height(); ++y)
      for (int x = 0; x < m.width(); ++x) out.at(c, y, x) = m(y, x);
  return out;
}

template <typename Tag>
af::ImageTensor as_rgb(const af::Raster<Tag>& r) {
  if (r.channels() == 3) return af::retag<af::RgbTag>(r);
  return gray_to_rgb(af::retag<af::MaskTag>(r));
}

// Rows of equally sized tiles laid out left to right.
af::ImageTensor contact_sheet(const std::vector<std::vector<af::ImageTensor>>& rows) {
  if (rows.empty() || rows.front().empty()) return af::make_image(1, 1);
  const int th = rows.front().front().height(), tw = rows.front().front().width();
  const int cols = static_cast<int>(rows.front().size());
  af::ImageTensor sheet = af::make_image(static_cast<int>(rows.size()) * th, cols * tw);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < rows[r].size(); ++k)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < th; ++y)
          for (int x = 0; x < tw; ++x)
            sheet.at(c, static_cast<int>(r) * th + y, static_cast<int>(k) * tw + x) = rows[r][k].at(c, y, x);
  return sheet;
}

int cmd_build_corpus(const std::string& out, int n, int categories, int resolution, int heldout, std::int64_t seed) {
  af::ToyCorpusOptions opt;
  opt.heldout_per_category = heldout;
  const auto corpus = af::build_toy_corpus(out, n, categories, resolution, seed, opt);
  std::cout << "wrote " << corpus.train.records.size() << " normal records in " << corpus.train.categories.size()
            << " categories to " << (fs::path(out) / "manifest.tsv").string() << '\n'
            << "wrote " << corpus.heldout.records.size() << " held-out defect records to "
            << (fs::path(out) / "heldout.tsv").string() << '\n';
  return 0;
}

int cmd_train(af::RunConfig cfg, af::Stage stage, std::optional<int> epochs, std::optional<long> max_steps) {
  auto& schedule = cfg.schedule(stage);
  if (epochs) schedule.epochs = *epochs;
  if (max_steps) schedule.max_steps = *max_steps;
  cfg.validate();
  std::optional<af::StageWeights<af::Real>> upstream;
  if (stage == af::Stage::flare) upstream = require_checkpoint(cfg, af::Stage::boot);
  if (stage == af::Stage::blaze) upstream = require_checkpoint(cfg, af::Stage::flare);
  const auto manifest = require_manifest(cfg);
  if (upstream && !(upstream->config == cfg.generator))
    throw af::ContractError("upstream checkpoint architecture differs from the configured generator");

  subdir(cfg, "checkpoints");
  const fs::path logs = subdir(cfg, "logs");
  af::save_run_config(fs::path(cfg.out_dir) / (std::string("config_") + af::to_string(stage) + ".json"), cfg);
  auto opt = train_options(cfg);
  opt.log_path = logs / (std::string(af::to_string(stage)) + "_loss.jsonl");
  opt.checkpoint_dir = fs::path(cfg.out_dir) / "checkpoints";
  af::StepLog last;
  long seen = 0;
  opt.on_step = [&](const af::StepLog& s) {
    last = s;
    ++seen;
    if (s.step % 25 == 0)
      std::cout << af::to_string(s.stage) << " step " << s.step << "  lr " << s.lr << "  L_G " << s.loss_g
                << "  total " << s.total << '\n';
  };

  af::StageWeights<af::Real> w;
  switch (stage) {
    case af::Stage::boot: w = af::train_boot(manifest, schedule, cfg.generator, cfg.seed, opt); break;
    case af::Stage::flare: w = af::train_flare(manifest, schedule, *upstream, cfg.seed, opt); break;
    case af::Stage::blaze: w = af::train_blaze(manifest, schedule, *upstream, cfg.seed, opt); break;
  }
  const fs::path ckpt = checkpoint_path(cfg, stage);
  af::save_checkpoint(ckpt, w);
  std::cout << "trained " << af::to_string(stage) << " for " << seen << " steps; checkpoint " << ckpt.string() << '\n';
  if (seen > 0) {
    std::cout << "final losses: L_G " << last.loss_g << "  adversarial " << last.loss_adv << "  d_objective "
              << last.d_objective;
    if (last.loss_heatmap) std::cout << "  heatmap " << *last.loss_heatmap;
    std::cout << "  total " << last.total << '\n';
  }
  return 0;
}

int cmd_generate(const af::RunConfig& cfg, int count, bool no_edit) {
  const auto flare = require_checkpoint(cfg, af::Stage::flare);
  const auto manifest = require_manifest(cfg);
  if (manifest.records.empty()) throw af::ContractError("generate: manifest has no records");
  const int res = cfg.flare.resolution;
  const fs::path dir = subdir(cfg, "samples") / "generate";
  fs::create_directories(dir);
  af::ManipulationParams p = cfg.manipulation;
  p.p_no_edit = 0.0;
  const auto useed = static_cast<std::uint64_t>(cfg.seed);
  std::mt19937_64 rng(af::derive_seed(useed, {0x67}));
  std::vector<std::vector<af::ImageTensor>> rows;
  for (int i = 0; i < count; ++i) {
    const auto& rec = manifest.records[rng() % manifest.records.size()];
    const auto& drec = manifest.records[rng() % manifest.records.size()];
    const auto s = af::load_sample(manifest, rec, res);
    const auto d = af::load_sample(manifest, drec, res);
    const auto spec = no_edit ? af::EditSpec::none() : af::sample_edit(s, d, p, rng());
    const auto out = af::generate_anomaly(flare, s.edge, s.image, spec, rng());
    const std::string stem = (dir / ("sample_" + std::to_string(i))).string();
    af::png::write_raster(stem + "_anomaly.png", out.image);
    af::png::write_raster(stem + "_heatmap.png", out.heatmap);
    af::png::write_raster(stem + "_mask.png", out.mask);
    af::png::write_raster(stem + "_edge.png", out.edge);
    if (rows.size() < 16)
      rows.push_back({s.image, gray_to_rgb(out.mask), as_rgb(out.edge), out.image, as_rgb(out.heatmap)});
  }
  af::png::write_raster(dir / "grid.png", contact_sheet(rows));
  std::cout << "generated " << count << " samples in " << dir.string() << '\n';
  return 0;
}

int cmd_detect(const af::RunConfig& cfg) {
  const auto blaze = require_checkpoint(cfg, af::Stage::blaze);
  const auto manifest = require_manifest(cfg);
  const int res = cfg.blaze.resolution;
  const fs::path dir = subdir(cfg, "samples") / "detect";
  fs::create_directories(dir);
  std::vector<std::vector<af::ImageTensor>> rows;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto s = af::load_sample(manifest, manifest.records[i], res);
    const auto out = af::detect(blaze, s.edge, s.image);
    const std::string stem = (dir / ("detect_" + std::to_string(i))).string();
    af::png::write_raster(stem + "_reconstruction.png", out.reconstruction);
    af::png::write_raster(stem + "_heatmap.png", out.heatmap);
    if (rows.size() < 16) rows.push_back({s.image, out.reconstruction, as_rgb(out.heatmap)});
  }
  af::png::write_raster(dir / "grid.png", contact_sheet(rows));
  std::cout << "detected " << manifest.records.size() << " images into " << dir.string() << '\n';
  return 0;
}

std::vector<af::ImageTensor> read_image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw af::LoadError("image directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<af::ImageTensor> out;
  for (const auto& p : paths) out.push_back(af::png::read_image(p));
  return out;
}

int cmd_evaluate(af::RunConfig cfg, const std::string& images_dir, const std::string& heldout,
                 std::optional<int> groups, std::optional<int> gen_size, std::optional<int> splits) {
  if (groups) cfg.eval.n_groups = *groups;
  if (gen_size) cfg.eval.gen_list_size = *gen_size;
  if (splits) cfg.eval.is_splits = *splits;
  const af::FeatureExtractor<float> fx(cfg.features);
  std::optional<af::DatasetManifest> manifest;
  if (!cfg.manifest.empty()) manifest = af::load_manifest(cfg.manifest);

  std::vector<af::ImageTensor> generated;
  if (!images_dir.empty()) {
    generated = read_image_dir(images_dir);
  } else {
    cfg.eval.validate();
    const auto flare = require_checkpoint(cfg, af::Stage::flare);
    if (!manifest || manifest->records.empty()) throw af::ConfigError("evaluate: generating needs a manifest");
    // Fixed list of normal images drawn with the protocol seed.
    std::mt19937_64 rng(static_cast<std::uint64_t>(cfg.eval.fixed_seed));
    af::ManipulationParams p = cfg.manipulation;
    p.p_no_edit = 0.0;
    for (int i = 0; i < cfg.eval.gen_list_size; ++i) {
      const auto& rec = manifest->records[rng() % manifest->records.size()];
      const auto& drec = manifest->records[rng() % manifest->records.size()];
      const auto s = af::load_sample(*manifest, rec, cfg.flare.resolution);
      const auto d = af::load_sample(*manifest, drec, cfg.flare.resolution);
      generated.push_back(af::generate_anomaly(flare, s.edge, s.image, af::sample_edit(s, d, p, rng()), rng()).image);
    }
  }
  if (generated.empty()) throw af::ContractError("evaluate: no images to score");

  af::MetricRow row{"all", std::nullopt, std::nullopt, std::nullopt};
  row.lpips = af::cluster_lpips(generated, cfg.eval.n_groups, fx);
  if (manifest && manifest->categories.size() >= 2) {
    std::vector<af::ImageTensor> imgs;
    std::vector<int> labels;
    const int res = generated.front().height();
    for (const auto& r : manifest->records) {
      imgs.push_back(af::load_sample(*manifest, r, res).image);
      const auto it = std::find(manifest->categories.begin(), manifest->categories.end(), r.category);
      labels.push_back(static_cast<int>(it - manifest->categories.begin()));
    }
    const af::CentroidClassifier clf(fx, imgs, labels, static_cast<int>(manifest->categories.size()));
    row.is = af::inception_score(generated, clf, std::min<int>(cfg.eval.is_splits, static_cast<int>(generated.size())));
  }
  if (!heldout.empty()) {
    const auto blaze = require_checkpoint(cfg, af::Stage::blaze);
    const auto list = af::load_manifest(heldout);
    std::vector<af::Heatmap> maps;
    std::vector<af::RegionMask> masks;
    for (const auto& r : list.records) {
      const auto s = af::load_sample(list, r, cfg.blaze.resolution);
      maps.push_back(af::detect(blaze, s.edge, s.image).heatmap);
      af::RegionMask gt = af::make_mask(cfg.blaze.resolution, cfg.blaze.resolution);
      for (const auto& m : s.regions) gt = af::mask_union(gt, m);
      masks.push_back(std::move(gt));
    }
    row.auroc = af::pixel_auroc(maps, masks);
  }

  const fs::path reports = subdir(cfg, "reports");
  const std::vector<af::MetricRow> rows{row};
  std::ofstream(reports / "metrics.jsonl") << af::report_jsonl(rows);
  std::ofstream(reports / "metrics.txt") << af::report_text(rows);
  std::cout << af::report_text(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anomaly generation and localization toolkit"};
  app.require_subcommand(1);

  auto* build = app.add_subcommand("build-corpus", "render the synthetic toy corpus");
  std::string corpus_out;
  int n = 100, categories = 2, corpus_res = 64, heldout_n = 25;
  std::int64_t corpus_seed = 0;
  build->add_option("--out", corpus_out, "corpus directory")->required();
  build->add_option("--n", n, "normal images per category");
  build->add_option("--categories", categories, "number of categories");
  build->add_option("--resolution", corpus_res, "image side in pixels");
  build->add_option("--heldout", heldout_n, "defective held-out images per category");
  build->add_option("--seed", corpus_seed, "corpus seed");

  Common tc, gc, dc, ec;
  auto* train = app.add_subcommand("train", "train one stage");
  add_common(train, tc);
  std::string stage_name;
  std::optional<int> epochs;
  std::optional<long> max_steps;
  train->add_option("--stage", stage_name, "boot, flare or blaze")->required();
  train->add_option("--epochs", epochs, "override the stage's epoch count");
  train->add_option("--max-steps", max_steps, "cap the number of optimisation steps");

  auto* generate = app.add_subcommand("generate", "synthesise anomalies with the flare stage");
  add_common(generate, gc);
  int count = 8;
  bool no_edit = false;
  generate->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);
  generate->add_flag("--no-edit", no_edit, "skip edge manipulation (M is all zero)");

  auto* detect = app.add_subcommand("detect", "localise anomalies with the blaze stage");
  add_common(detect, dc);

  auto* evaluate = app.add_subcommand("evaluate", "score generated images and detections");
  add_common(evaluate, ec);
  std::string images_dir, heldout;
  std::optional<int> groups, gen_size, splits;
  evaluate->add_option("--images", images_dir, "score the PNG files in this directory instead of generating");
  evaluate->add_option("--heldout", heldout, "defect manifest for pixel AUROC with the blaze stage");
  evaluate->add_option("--groups", groups, "number of diversity groups");
  evaluate->add_option("--gen-size", gen_size, "number of generated images");
  evaluate->add_option("--splits", splits, "inception score splits");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*build) return cmd_build_corpus(corpus_out, n, categories, corpus_res, heldout_n, corpus_seed);
    if (*train) return cmd_train(resolve(tc), af::parse_stage(stage_name), epochs, max_steps);
    if (*generate) return cmd_generate(resolve(gc), count, no_edit);
    if (*detect) return cmd_detect(resolve(dc));
    if (*evaluate) return cmd_evaluate(resolve(ec), images_dir, heldout, groups, gen_size, splits);
  } catch (const af::ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
