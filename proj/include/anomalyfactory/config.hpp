#pragma once

// Serializable run configuration. Everything that influences a run lives here
// so a saved copy reproduces it.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "anomalyfactory/evalmetrics.hpp"
#include "anomalyfactory/trainpipe.hpp"

namespace af {

struct RunConfig {
  std::string manifest;
  std::string out_dir = "runs/default";
  std::int64_t seed = 0;
  StageSchedule boot = StageSchedule::defaults(Stage::boot);
  StageSchedule flare = StageSchedule::defaults(Stage::flare);
  StageSchedule blaze = StageSchedule::defaults(Stage::blaze);
  GeneratorConfig generator{};
  AugmentParams augment{};
  LossWeights losses{};
  FeatureExtractorConfig features{};
  ManipulationParams manipulation{};
  EvalProtocol eval{};
  bool blaze_recompute_edges = false;

  StageSchedule& schedule(Stage s) { return s == Stage::boot ? boot : s == Stage::flare ? flare : blaze; }
  const StageSchedule& schedule(Stage s) const {
    return s == Stage::boot ? boot : s == Stage::flare ? flare : blaze;
  }

  // Desk-scale defaults: 64x64 everywhere.
  static RunConfig desk() {
    RunConfig c;
    for (Stage s : {Stage::boot, Stage::flare, Stage::blaze}) {
      c.schedule(s).resolution = 64;
      c.schedule(s).batch_size = 4;
    }
    return c;
  }

  void validate() const {
    for (Stage s : {Stage::boot, Stage::flare, Stage::blaze}) {
      schedule(s).validate();
      if (schedule(s).stage != s) throw ConfigError(std::string("schedule '") + to_string(s) + "' has the wrong stage");
      generator.check_resolution(schedule(s).resolution, schedule(s).resolution);
    }
    generator.validate();
    augment.validate();
    losses.validate();
    manipulation.validate();
    eval.validate();
  }
};

namespace detail {

inline nlohmann::json pair_json(const std::pair<double, double>& p) { return {p.first, p.second}; }
inline nlohmann::json pair_json(const std::pair<int, int>& p) { return {p.first, p.second}; }

inline const char* flip_name(FlipMode m) {
  switch (m) {
    case FlipMode::none: return "none";
    case FlipMode::top_bottom: return "top_bottom";
    case FlipMode::left_right: return "left_right";
  }
  return "none";
}

inline FlipMode parse_flip(const std::string& s) {
  if (s == "none") return FlipMode::none;
  if (s == "top_bottom") return FlipMode::top_bottom;
  if (s == "left_right") return FlipMode::left_right;
  throw ConfigError("unknown flip mode '" + s + "'");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const AugmentParams& a) {
  nlohmann::json flips = nlohmann::json::array();
  for (auto m : a.flip_modes) flips.push_back(detail::flip_name(m));
  j = {{"tps_grid", a.tps_grid},
       {"tps_patch_fraction", a.tps_patch_fraction},
       {"tps_max_shift", a.tps_max_shift},
       {"rtp_scale_range", detail::pair_json(a.rtp_scale_range)},
       {"rtp_translate_range", detail::pair_json(a.rtp_translate_range)},
       {"pad_value", a.pad_value},
       {"flip_modes", flips},
       {"p_tps", a.p_tps},
       {"p_rtp", a.p_rtp},
       {"p_flip", a.p_flip},
       {"use_local_tps", a.use_local_tps}};
}

inline void from_json(const nlohmann::json& j, AugmentParams& a) {
  const AugmentParams d;
  a.tps_grid = j.value("tps_grid", d.tps_grid);
  a.tps_patch_fraction = j.value("tps_patch_fraction", d.tps_patch_fraction);
  a.tps_max_shift = j.value("tps_max_shift", d.tps_max_shift);
  a.rtp_scale_range = j.value("rtp_scale_range", d.rtp_scale_range);
  a.rtp_translate_range = j.value("rtp_translate_range", d.rtp_translate_range);
  a.pad_value = j.value("pad_value", d.pad_value);
  a.flip_modes = d.flip_modes;
  if (j.contains("flip_modes")) {
    a.flip_modes.clear();
    for (const auto& m : j["flip_modes"]) a.flip_modes.push_back(detail::parse_flip(m.get<std::string>()));
  }
  a.p_tps = j.value("p_tps", d.p_tps);
  a.p_rtp = j.value("p_rtp", d.p_rtp);
  a.p_flip = j.value("p_flip", d.p_flip);
  a.use_local_tps = j.value("use_local_tps", d.use_local_tps);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"w_fh", w.w_fh},
       {"w_bh", w.w_bh},
       {"perceptual_layer_weights", w.perceptual_layer_weights},
       {"logit_clamp", w.logit_clamp}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.w_fh = j.value("w_fh", d.w_fh);
  w.w_bh = j.value("w_bh", d.w_bh);
  w.perceptual_layer_weights = j.value("perceptual_layer_weights", d.perceptual_layer_weights);
  w.logit_clamp = j.value("logit_clamp", d.logit_clamp);
}

inline void to_json(nlohmann::json& j, const FeatureExtractorConfig& f) {
  j = {{"kind", f.kind}, {"taps", f.taps}, {"seed", f.seed}, {"channels", f.channels}};
}

inline void from_json(const nlohmann::json& j, FeatureExtractorConfig& f) {
  const FeatureExtractorConfig d;
  f.kind = j.value("kind", d.kind);
  f.taps = j.value("taps", d.taps);
  f.seed = j.value("seed", d.seed);
  f.channels = j.value("channels", d.channels);
}

inline void to_json(nlohmann::json& j, const ShapeParams& s) {
  j = {{"area_min", s.area_min},
       {"area_max", s.area_max},
       {"primitive_area_min", s.primitive_area_min},
       {"primitive_area_max", s.primitive_area_max},
       {"aspect_min", s.aspect_min},
       {"aspect_max", s.aspect_max},
       {"rectangles", s.rectangles},
       {"ellipses", s.ellipses},
       {"rotate", s.rotate},
       {"max_retries", s.max_retries}};
}

inline void from_json(const nlohmann::json& j, ShapeParams& s) {
  const ShapeParams d;
  s.area_min = j.value("area_min", d.area_min);
  s.area_max = j.value("area_max", d.area_max);
  s.primitive_area_min = j.value("primitive_area_min", d.primitive_area_min);
  s.primitive_area_max = j.value("primitive_area_max", d.primitive_area_max);
  s.aspect_min = j.value("aspect_min", d.aspect_min);
  s.aspect_max = j.value("aspect_max", d.aspect_max);
  s.rectangles = j.value("rectangles", d.rectangles);
  s.ellipses = j.value("ellipses", d.ellipses);
  s.rotate = j.value("rotate", d.rotate);
  s.max_retries = j.value("max_retries", d.max_retries);
}

inline void to_json(nlohmann::json& j, const ManipulationParams& m) {
  j = {{"p_no_edit", m.p_no_edit},
       {"p_semantic", m.p_semantic},
       {"semantic_count", detail::pair_json(m.semantic_count)},
       {"stochastic_count", detail::pair_json(m.stochastic_count)},
       {"shape", m.shape},
       {"p_remove", m.p_remove},
       {"p_replace", m.p_replace},
       {"p_flip", m.p_flip}};
}

inline void from_json(const nlohmann::json& j, ManipulationParams& m) {
  const ManipulationParams d;
  m.p_no_edit = j.value("p_no_edit", d.p_no_edit);
  m.p_semantic = j.value("p_semantic", d.p_semantic);
  m.semantic_count = j.value("semantic_count", d.semantic_count);
  m.stochastic_count = j.value("stochastic_count", d.stochastic_count);
  m.shape = j.value("shape", d.shape);
  m.p_remove = j.value("p_remove", d.p_remove);
  m.p_replace = j.value("p_replace", d.p_replace);
  m.p_flip = j.value("p_flip", d.p_flip);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"manifest", c.manifest},
       {"out_dir", c.out_dir},
       {"seed", c.seed},
       {"schedules", {{"boot", c.boot}, {"flare", c.flare}, {"blaze", c.blaze}}},
       {"generator", c.generator},
       {"augment", c.augment},
       {"losses", c.losses},
       {"features", c.features},
       {"manipulation", c.manipulation},
       {"eval", c.eval},
       {"blaze_recompute_edges", c.blaze_recompute_edges}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d = RunConfig::desk();
  c.manifest = j.value("manifest", d.manifest);
  c.out_dir = j.value("out_dir", d.out_dir);
  c.seed = j.value("seed", d.seed);
  c.boot = d.boot;
  c.flare = d.flare;
  c.blaze = d.blaze;
  if (j.contains("schedules")) {
    const auto& s = j["schedules"];
    // Missing keys inside a schedule fall back to that stage's defaults.
    auto read = [&](const char* name, StageSchedule& dst) {
      if (!s.contains(name)) return;
      nlohmann::json body = s[name];
      body["stage"] = name;
      dst = body.get<StageSchedule>();
    };
    read("boot", c.boot);
    read("flare", c.flare);
    read("blaze", c.blaze);
  }
  c.generator = j.value("generator", d.generator);
  c.augment = j.value("augment", d.augment);
  c.losses = j.value("losses", d.losses);
  c.features = j.value("features", d.features);
  c.manipulation = j.value("manipulation", d.manipulation);
  c.eval = j.value("eval", d.eval);
  c.blaze_recompute_edges = j.value("blaze_recompute_edges", d.blaze_recompute_edges);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid config '" + path.string() + "': " + e.what());
  }
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  out << nlohmann::json(c).dump(2) << '\n';
  if (!out) throw IoError("cannot write config '" + path.string() + "'");
}

}  // namespace af
