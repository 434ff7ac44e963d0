#pragma once

// Progressive three-stage training and the inference entry points.
//
//   boot  : augmented (E_t, I_r) -> I_t
//   flare : (manipulated E, I) -> frozen boot output; H supervised by the edit mask M
//   blaze : (manipulated E, frozen flare output A) -> I; H supervised by flare's heatmap

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "anomalyfactory/augment.hpp"
#include "anomalyfactory/datamodel.hpp"
#include "anomalyfactory/edgeops.hpp"
#include "anomalyfactory/losses.hpp"
#include "anomalyfactory/netarch.hpp"
#include "anomalyfactory/optim.hpp"

namespace af {

using Real = float;

struct StageSchedule {
  Stage stage = Stage::boot;
  int epochs = 30;
  int batch_size = 32;
  int resolution = 256;
  double lr = 2e-4;
  std::string lr_decay = "linear";
  std::string optimizer = "adam";
  bool use_local_tps = true;
  int per_category_cap = 200;
  long max_steps = -1;  // < 0: no cap

  static StageSchedule defaults(Stage stage) {
    StageSchedule s;
    s.stage = stage;
    if (stage != Stage::boot) {
      s.epochs = 5;
      s.use_local_tps = false;
    }
    return s;
  }

  void validate() const {
    if (epochs < 0) throw ConfigError("StageSchedule: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("StageSchedule: batch_size must be >= 1");
    if (resolution < 1) throw ConfigError("StageSchedule: resolution must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("StageSchedule: lr must be > 0");
    if (lr_decay != "linear") throw ConfigError("StageSchedule: lr_decay must be 'linear'");
    if (optimizer != "adam") throw ConfigError("StageSchedule: optimizer must be 'adam'");
    if (per_category_cap < 1) throw ConfigError("StageSchedule: per_category_cap must be >= 1");
  }

  long steps_per_epoch(std::size_t list_size) const {
    return static_cast<long>((list_size + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
  }

  long total_steps(std::size_t list_size) const {
    const long n = static_cast<long>(epochs) * steps_per_epoch(list_size);
    return max_steps >= 0 ? std::min(n, max_steps) : n;
  }
};

inline void to_json(nlohmann::json& j, const StageSchedule& s) {
  j = {{"stage", to_string(s.stage)},   {"epochs", s.epochs},         {"batch_size", s.batch_size},
       {"resolution", s.resolution},     {"lr", s.lr},                 {"lr_decay", s.lr_decay},
       {"optimizer", s.optimizer},       {"use_local_tps", s.use_local_tps},
       {"per_category_cap", s.per_category_cap}, {"max_steps", s.max_steps}};
}

inline void from_json(const nlohmann::json& j, StageSchedule& s) {
  const Stage stage = parse_stage(j.at("stage").get<std::string>());
  const StageSchedule d = StageSchedule::defaults(stage);
  s.stage = stage;
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.resolution = j.value("resolution", d.resolution);
  s.lr = j.value("lr", d.lr);
  s.lr_decay = j.value("lr_decay", d.lr_decay);
  s.optimizer = j.value("optimizer", d.optimizer);
  s.use_local_tps = j.value("use_local_tps", d.use_local_tps);
  s.per_category_cap = j.value("per_category_cap", d.per_category_cap);
  s.max_steps = j.value("max_steps", d.max_steps);
}

// ---------------------------------------------------------------------------
// Edge manipulation sampling

struct ManipulationParams {
  double p_no_edit = 0.2;   // fraction of clean cases (M = 0)
  double p_semantic = 0.5;  // semantic vs stochastic region selection
  std::pair<int, int> semantic_count{1, 2};
  std::pair<int, int> stochastic_count{1, 3};
  ShapeParams shape{};
  double p_remove = 1.0 / 3.0;
  double p_replace = 1.0 / 3.0;  // merge takes the rest
  double p_flip = 0.5;           // joint flip of image, edges and regions

  void validate() const {
    for (double p : {p_no_edit, p_semantic, p_remove, p_replace, p_flip})
      if (p < 0.0 || p > 1.0) throw ConfigError("ManipulationParams: probabilities must lie in [0, 1]");
    if (p_remove + p_replace > 1.0 + 1e-12) throw ConfigError("ManipulationParams: p_remove + p_replace exceeds 1");
  }
};

struct EditSpec {
  std::optional<RegionMask> region;  // absent: no manipulation
  EditStrategy strategy = EditStrategy::remove();

  bool empty() const { return !region.has_value(); }
  static EditSpec none() { return {}; }
};

// Draws a concrete edit for `sample`; donors come from `donor` (any category).
inline EditSpec sample_edit(const Sample& sample, const Sample& donor, const ManipulationParams& p,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < p.p_no_edit) return EditSpec::none();
  const int h = sample.edge.height(), w = sample.edge.width();
  EditSpec spec;
  const bool semantic = unit(rng) < p.p_semantic;
  const std::uint64_t region_seed = rng();
  if (semantic && !sample.regions.empty())
    spec.region = select_semantic_region({sample.regions, RegionSource::semantic}, p.semantic_count, region_seed);
  else
    spec.region = select_stochastic_region(h, w, p.stochastic_count, p.shape, region_seed);

  const double k = unit(rng);
  const std::uint64_t donor_seed = rng();
  if (k < p.p_remove) return spec;
  RegionMask donor_region = donor.regions.empty()
                                ? select_stochastic_region(h, w, {1, 1}, p.shape, donor_seed)
                                : donor.regions[donor_seed % donor.regions.size()];
  if (area_pixels(donor_region) == 0) return spec;
  EdgeDonor d{donor.edge, std::move(donor_region)};
  spec.strategy = k < p.p_remove + p.p_replace ? EditStrategy::replace(std::move(d)) : EditStrategy::merge(std::move(d));
  return spec;
}

inline std::pair<EdgeMap, RegionMask> apply_edit(const EdgeMap& edge, const EditSpec& spec) {
  if (spec.empty()) return {edge, make_mask(edge.height(), edge.width())};
  return edit_edges(edge, *spec.region, spec.strategy);
}

// ---------------------------------------------------------------------------
// Logging

struct StepLog {
  long step = 0;
  Stage stage = Stage::boot;
  double lr = 0;
  double loss_g = 0;          // perceptual L_G
  double loss_adv = 0;        // generator adversarial term
  double d_objective = 0;     // discriminator objective (maximisation form)
  std::optional<double> loss_heatmap;
  double total = 0;           // stage total seen by the generator
};

inline nlohmann::json to_json(const StepLog& s) {
  nlohmann::json j = {{"step", s.step},          {"stage", to_string(s.stage)}, {"lr", s.lr},
                      {"loss_g", s.loss_g},      {"loss_adv", s.loss_adv},      {"d_objective", s.d_objective},
                      {"total", s.total}};
  if (s.loss_heatmap) j["loss_heatmap"] = *s.loss_heatmap;
  return j;
}

struct TrainOptions {
  LossWeights weights{};
  FeatureExtractorConfig features{};
  AugmentParams augment{};
  ManipulationParams manipulation{};
  bool blaze_recompute_edges = false;  // feed blaze extract_edges(A) instead of the manipulated map
  EdgeExtractorConfig edges{};
  std::optional<std::filesystem::path> log_path;        // JSONL, one record per step
  std::optional<std::filesystem::path> checkpoint_dir;  // receives <stage>_nonfinite.ckpt on abort
  std::function<void(const StepLog&)> on_step;
};

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

struct Batch {
  Var<Real> edge;       // conditioning edges
  Var<Real> reference;  // conditioning image
  Var<Real> target;     // image the output is compared with
  std::optional<Var<Real>> heat_target;
};

// Produces the batch for one step from its records.
using BatchBuilder = std::function<Batch(const std::vector<const SampleRecord*>&, long step)>;

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

template <typename S>
Var<Real> stacked(const std::vector<Raster<S>>& items) {
  std::vector<Tensor<Real>> ts;
  ts.reserve(items.size());
  for (const auto& r : items) ts.push_back(to_tensor<Real>(r));
  return Var<Real>(stack(ts), false);
}

inline void write_failure(const TrainOptions& opt, const StageWeights<Real>& w, const std::string& what) {
  std::string where;
  if (opt.checkpoint_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*opt.checkpoint_dir, ec);
    const auto path = *opt.checkpoint_dir / (std::string(to_string(w.stage)) + "_nonfinite.ckpt");
    save_checkpoint(path, w);
    where = "; weights saved to " + path.string();
  }
  throw NumericalError(what + where);
}

inline void run_stage(StageWeights<Real>& w, const std::vector<SampleRecord>& list, const StageSchedule& schedule,
                      const TrainOptions& opt, std::uint64_t seed, const BatchBuilder& build) {
  std::ofstream log;
  if (opt.log_path) {
    log.open(*opt.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open loss log '" + opt.log_path->string() + "'");
  }

  const long total = schedule.total_steps(list.size());
  if (total <= 0 || list.empty()) return;
  const FeatureExtractor<Real> fx(opt.features);
  Adam<Real> opt_g(w.generator_params());
  Adam<Real> opt_d(w.discriminator_params());
  const long per_epoch = schedule.steps_per_epoch(list.size());
  const auto bs = static_cast<std::size_t>(schedule.batch_size);

  std::vector<std::size_t> order;
  for (long step = 0; step < total; ++step) {
    const long epoch = step / per_epoch;
    const long within = step % per_epoch;
    if (within == 0) order = epoch_order(list.size(), derive_seed(seed, {0x65, static_cast<std::uint64_t>(epoch)}));
    std::vector<const SampleRecord*> records;
    for (std::size_t i = static_cast<std::size_t>(within) * bs; i < std::min(list.size(), (within + 1) * bs); ++i)
      records.push_back(&list[order[i]]);

    const Batch batch = build(records, step);
    const double lr = linear_lr(schedule.lr, step, total);
    StepLog entry;
    entry.step = step;
    entry.stage = w.stage;
    entry.lr = lr;
    try {
      const auto out = w.generator.forward(batch.edge, batch.reference,
                                           derive_seed(seed, {0x6e, static_cast<std::uint64_t>(step)}));
      const Var<Real> perceptual = perceptual_loss(out.image, batch.target, fx, opt.weights);
      const auto adv = adversarial_losses(batch.edge, batch.reference, batch.target, out.image, w,
                                          opt.weights.logit_clamp);
      LossComponents<Var<Real>> parts{perceptual, adv.g_loss, std::nullopt};
      if (batch.heat_target) parts.heatmap = heatmap_loss(out.heatmap, *batch.heat_target);
      const Var<Real> g_total = total_loss(w.stage, parts, opt.weights);

      entry.loss_g = perceptual.item();
      entry.loss_adv = adv.g_loss.item();
      entry.d_objective = adv.d_objective.item();
      if (parts.heatmap) entry.loss_heatmap = parts.heatmap->item();
      entry.total = g_total.item();
      if (!std::isfinite(entry.total) || !std::isfinite(entry.d_objective))
        write_failure(opt, w, "non-finite loss at " + std::string(to_string(w.stage)) + " step " +
                                  std::to_string(step) + " (total " + std::to_string(entry.total) +
                                  ", d_objective " + std::to_string(entry.d_objective) + ")");

      // Generator update first, then the discriminator on the same (detached) fake.
      opt_g.zero_grad();
      opt_d.zero_grad();
      g_total.backward();
      opt_g.step(lr);
      opt_d.zero_grad();
      adv.d_loss.backward();
      opt_d.step(lr);
    } catch (const NumericalError& e) {
      if (std::string(e.what()).find("weights saved") != std::string::npos) throw;
      write_failure(opt, w, std::string(to_string(w.stage)) + " step " + std::to_string(step) + ": " + e.what());
    }
    if (log) log << to_json(entry).dump() << '\n';
    if (opt.on_step) opt.on_step(entry);
  }
}

inline std::vector<Sample> load_batch(const DatasetManifest& m, const std::vector<const SampleRecord*>& records,
                                      int resolution) {
  std::vector<Sample> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back(load_sample(m, *r, resolution));
  return out;
}

inline Sample flip_sample(Sample s, FlipMode mode) {
  if (mode == FlipMode::none) return s;
  s.image = flip_raster(s.image, mode);
  s.edge = flip_raster(s.edge, mode);
  for (auto& r : s.regions) r = flip_raster(r, mode);
  return s;
}

// One manipulated case per sample: (edited edge, mask, normal image).
struct ManipulatedBatch {
  std::vector<EdgeMap> edges;
  std::vector<RegionMask> masks;
  std::vector<ImageTensor> images;
};

inline ManipulatedBatch manipulate_batch(const std::vector<Sample>& samples, const ManipulationParams& p,
                                         std::uint64_t seed) {
  ManipulatedBatch out;
  const std::size_t n = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(i)});
    std::mt19937_64 rng(s);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    FlipMode mode = FlipMode::none;
    if (unit(rng) < p.p_flip) mode = unit(rng) < 0.5 ? FlipMode::left_right : FlipMode::top_bottom;
    const Sample cur = flip_sample(samples[i], mode);
    const Sample& donor = samples[(i + 1 + rng() % std::max<std::size_t>(1, n - 1)) % n];
    auto [edge, mask] = apply_edit(cur.edge, sample_edit(cur, donor, p, rng()));
    out.edges.push_back(std::move(edge));
    out.masks.push_back(std::move(mask));
    out.images.push_back(cur.image);
  }
  return out;
}

}  // namespace detail

inline void check_schedule(const StageSchedule& schedule, Stage expected, const GeneratorConfig& config) {
  schedule.validate();
  if (schedule.stage != expected)
    throw ContractError(std::string("schedule is for stage ") + to_string(schedule.stage) + ", expected " +
                        to_string(expected));
  config.check_resolution(schedule.resolution, schedule.resolution);
}

inline StageWeights<Real> train_boot(const DatasetManifest& manifest, const StageSchedule& schedule,
                                     const GeneratorConfig& config, std::int64_t seed,
                                     const TrainOptions& opt = {}) {
  config.validate();
  check_schedule(schedule, Stage::boot, config);
  const auto useed = static_cast<std::uint64_t>(seed);
  auto w = StageWeights<Real>::create(config, Stage::boot, derive_seed(useed, {0x77}));
  const auto list = balanced_sample(manifest, schedule.per_category_cap, seed);
  AugmentParams aug = opt.augment;
  aug.use_local_tps = schedule.use_local_tps;
  aug.validate();

  detail::run_stage(w, list, schedule, opt, derive_seed(useed, {0x62}), [&](const auto& records, long step) {
    std::vector<EdgeMap> edges;
    std::vector<ImageTensor> refs, targets;
    const auto samples = detail::load_batch(manifest, records, schedule.resolution);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto t = build_boot_triplet(samples[i].edge, samples[i].image, aug,
                                        derive_seed(useed, {0x74, static_cast<std::uint64_t>(step), i}));
      edges.push_back(t.target_edge);
      refs.push_back(t.reference);
      targets.push_back(t.target);
    }
    return detail::Batch{detail::stacked(edges), detail::stacked(refs), detail::stacked(targets), std::nullopt};
  });
  return w;
}

inline StageWeights<Real> train_flare(const DatasetManifest& manifest, const StageSchedule& schedule,
                                      const StageWeights<Real>& boot, std::int64_t seed,
                                      const TrainOptions& opt = {}) {
  require_stage(boot, Stage::boot);
  check_schedule(schedule, Stage::flare, boot.config);
  opt.manipulation.validate();
  const auto useed = static_cast<std::uint64_t>(seed);
  auto w = boot.clone_as(Stage::flare);
  const auto list = balanced_sample(manifest, schedule.per_category_cap, seed);

  detail::run_stage(w, list, schedule, opt, derive_seed(useed, {0x66}), [&](const auto& records, long step) {
    const auto samples = detail::load_batch(manifest, records, schedule.resolution);
    const auto m = detail::manipulate_batch(samples, opt.manipulation,
                                            derive_seed(useed, {0x6d, static_cast<std::uint64_t>(step)}));
    const Var<Real> edge = detail::stacked(m.edges);
    const Var<Real> normal = detail::stacked(m.images);
    Var<Real> target;
    {
      // Frozen teacher, fresh noise per batch.
      NoGradGuard guard;
      target = Var<Real>(boot.generator.forward(edge, normal, derive_seed(useed, {0x54, static_cast<std::uint64_t>(step)}))
                             .image.value(),
                         false);
    }
    return detail::Batch{edge, normal, target, detail::stacked(m.masks)};
  });
  return w;
}

inline StageWeights<Real> train_blaze(const DatasetManifest& manifest, const StageSchedule& schedule,
                                      const StageWeights<Real>& flare, std::int64_t seed,
                                      const TrainOptions& opt = {}) {
  require_stage(flare, Stage::flare);
  check_schedule(schedule, Stage::blaze, flare.config);
  opt.manipulation.validate();
  const auto useed = static_cast<std::uint64_t>(seed);
  auto w = flare.clone_as(Stage::blaze);
  const auto list = balanced_sample(manifest, schedule.per_category_cap, seed);

  detail::run_stage(w, list, schedule, opt, derive_seed(useed, {0x7a}), [&](const auto& records, long step) {
    const auto samples = detail::load_batch(manifest, records, schedule.resolution);
    const auto m = detail::manipulate_batch(samples, opt.manipulation,
                                            derive_seed(useed, {0x6d, static_cast<std::uint64_t>(step)}));
    Var<Real> edge = detail::stacked(m.edges);
    const Var<Real> normal = detail::stacked(m.images);
    Var<Real> anomaly, fh;
    {
      NoGradGuard guard;
      const auto out = flare.generator.forward(edge, normal, derive_seed(useed, {0x54, static_cast<std::uint64_t>(step)}));
      anomaly = Var<Real>(out.image.value(), false);
      fh = Var<Real>(out.heatmap.value(), false);
    }
    if (opt.blaze_recompute_edges) {
      std::vector<EdgeMap> edges;
      for (int i = 0; i < anomaly.value().n(); ++i)
        edges.push_back(extract_edges(from_tensor<RgbTag>(anomaly.value(), i), opt.edges));
      edge = detail::stacked(edges);
    }
    return detail::Batch{edge, anomaly, normal, fh};
  });
  return w;
}

// ---------------------------------------------------------------------------
// Inference

struct AnomalyTriple {
  ImageTensor image;   // anomaly image
  Heatmap heatmap;     // FH
  RegionMask mask;     // M
  EdgeMap edge;        // manipulated edges fed to the generator
};

inline AnomalyTriple generate_anomaly(const StageWeights<Real>& flare, const EdgeMap& edge, const ImageTensor& ref,
                                      const EditSpec& spec, std::uint64_t noise_seed) {
  require_stage(flare, Stage::flare);
  require_aligned("generate_anomaly", ref, edge);
  auto [edited, mask] = apply_edit(edge, spec);
  auto out = generator_forward(edited, ref, noise_seed, flare);
  return {std::move(out.image), std::move(out.heatmap), std::move(mask), std::move(edited)};
}

struct Detection {
  ImageTensor reconstruction;
  Heatmap heatmap;  // BH
};

inline Detection detect(const StageWeights<Real>& blaze, const EdgeMap& edge, const ImageTensor& image) {
  require_stage(blaze, Stage::blaze);
  auto out = generator_forward(edge, image, std::nullopt, blaze);
  return {std::move(out.image), std::move(out.heatmap)};
}

// ---------------------------------------------------------------------------
// Fixed manipulation cases for before/after comparisons

struct ManipulationCase {
  EdgeMap edge;       // manipulated (or untouched) edges
  ImageTensor image;  // normal reference
  RegionMask mask;
  bool edited = false;
  std::uint64_t noise_seed = 0;
};

// `count` cases drawn from the manifest; with `edited` false every case is clean.
inline std::vector<ManipulationCase> fixed_cases(const DatasetManifest& manifest, int count, int resolution,
                                                 const ManipulationParams& params, bool edited, std::uint64_t seed) {
  if (manifest.records.empty()) throw ContractError("fixed_cases: empty manifest");
  ManipulationParams p = params;
  p.p_no_edit = edited ? 0.0 : 1.0;
  std::vector<ManipulationCase> out;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    const auto& rec = manifest.records[rng() % manifest.records.size()];
    const auto& drec = manifest.records[rng() % manifest.records.size()];
    const Sample s = load_sample(manifest, rec, resolution);
    const Sample d = load_sample(manifest, drec, resolution);
    auto [edge, mask] = apply_edit(s.edge, sample_edit(s, d, p, rng()));
    out.push_back({std::move(edge), s.image, std::move(mask), edited, rng()});
  }
  return out;
}

// Mean heatmap_loss(H, M) of a generator over fixed cases.
inline double mean_case_heatmap_loss(const StageWeights<Real>& w, const std::vector<ManipulationCase>& cases) {
  if (cases.empty()) throw ContractError("mean_case_heatmap_loss: no cases");
  double acc = 0;
  for (const auto& c : cases) acc += heatmap_loss(generator_forward(c.edge, c.image, c.noise_seed, w).heatmap, c.mask);
  return acc / static_cast<double>(cases.size());
}

inline double mean_value(const Heatmap& h) {
  double acc = 0;
  for (float v : h.pixels()) acc += v;
  return h.size() == 0 ? 0.0 : acc / static_cast<double>(h.size());
}

// Mean heatmap value of a generator over fixed cases.
inline double mean_case_heatmap(const StageWeights<Real>& w, const std::vector<ManipulationCase>& cases) {
  if (cases.empty()) throw ContractError("mean_case_heatmap: no cases");
  double acc = 0;
  for (const auto& c : cases) acc += mean_value(generator_forward(c.edge, c.image, c.noise_seed, w).heatmap);
  return acc / static_cast<double>(cases.size());
}

}  // namespace af
