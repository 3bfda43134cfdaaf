#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "kalmeta/adapt.hpp"
#include "kalmeta/data.hpp"
#include "kalmeta/experiment.hpp"
#include "kalmeta/fileio.hpp"
#include "kalmeta/train.hpp"

namespace kalmeta {

// Everything a run needs, assembled from a JSON file with full defaulting:
// absent keys keep their defaults, unknown keys are rejected so typos cannot
// silently fall back.
struct ExperimentConfig {
  std::string mode = "offline";  // evaluation protocol: offline | online
  std::string preset;            // optional bundled experiment setup
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  int scenes = 8;
  int segment_len = 6;  // filtered transitions per training episode
  int anchor = 3;       // rollout anchor inside the segment
  ModelConfig model;
  TrainConfig train;
  AdaptationConfig adapt;
  EvalConfig eval;
  DomainSpec source;
  DomainSpec target;
  std::string dataset;     // optional input records file
  std::string checkpoint;  // optional input checkpoint

  void validate() const {
    require(mode == "offline" || mode == "online",
            "ExperimentConfig: mode must be offline or online");
    require(scenes >= 1, "ExperimentConfig: need at least one scene");
    require(segment_len >= 1 && anchor >= 0 && anchor <= segment_len,
            "ExperimentConfig: anchor must sit inside the segment");
    model.check();
    adapt.check();
    eval.check();
    source.check();
    target.check();
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object())
    throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void get_opt(const nlohmann::json& j, const char* key, T& v,
             const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(v);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"enc_hidden", c.enc_hidden},   {"dec_hidden", c.dec_hidden},
       {"embed_dim", c.embed_dim},     {"att_dim", c.att_dim},
       {"feat_dim", c.feat_dim},       {"out_dim", c.out_dim},
       {"context_dim", c.context_dim}, {"sigma2_floor", c.sigma2_floor},
       {"sigma2_ceil", c.sigma2_ceil}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::check_keys(j,
                     {"enc_hidden", "dec_hidden", "embed_dim", "att_dim",
                      "feat_dim", "out_dim", "context_dim", "sigma2_floor",
                      "sigma2_ceil"},
                     "model");
  detail::get_opt(j, "enc_hidden", c.enc_hidden, "model");
  detail::get_opt(j, "dec_hidden", c.dec_hidden, "model");
  detail::get_opt(j, "embed_dim", c.embed_dim, "model");
  detail::get_opt(j, "att_dim", c.att_dim, "model");
  detail::get_opt(j, "feat_dim", c.feat_dim, "model");
  detail::get_opt(j, "out_dim", c.out_dim, "model");
  detail::get_opt(j, "context_dim", c.context_dim, "model");
  detail::get_opt(j, "sigma2_floor", c.sigma2_floor, "model");
  detail::get_opt(j, "sigma2_ceil", c.sigma2_ceil, "model");
}

inline void to_json(nlohmann::json& j, const RolloutOptions& r) {
  j = {{"particles", r.particles},
       {"horizon", r.horizon},
       {"noise_free", r.noise_free},
       {"detach_diffusion", r.detach_diffusion}};
}

inline void from_json(const nlohmann::json& j, RolloutOptions& r) {
  detail::check_keys(
      j, {"particles", "horizon", "noise_free", "detach_diffusion"}, "rollout");
  detail::get_opt(j, "particles", r.particles, "rollout");
  detail::get_opt(j, "horizon", r.horizon, "rollout");
  detail::get_opt(j, "noise_free", r.noise_free, "rollout");
  detail::get_opt(j, "detach_diffusion", r.detach_diffusion, "rollout");
}

inline void to_json(nlohmann::json& j, const EpisodeOptions& e) {
  j = {{"lambda_filter", e.lambda_filter},
       {"lambda_kde", e.lambda_kde},
       {"rollout", e.rollout}};
}

inline void from_json(const nlohmann::json& j, EpisodeOptions& e) {
  detail::check_keys(j, {"lambda_filter", "lambda_kde", "rollout"}, "episode");
  detail::get_opt(j, "lambda_filter", e.lambda_filter, "episode");
  detail::get_opt(j, "lambda_kde", e.lambda_kde, "episode");
  detail::get_opt(j, "rollout", e.rollout, "episode");
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"epochs", t.epochs},
       {"lr", t.lr},
       {"beta1", t.beta1},
       {"beta2", t.beta2},
       {"adam_eps", t.adam_eps},
       {"clip_norm", t.clip_norm},
       {"episode", t.episode},
       {"seed", t.seed},
       {"frozen_groups", t.frozen_groups},
       {"scope_groups", t.scope_groups},
       {"divergence_threshold", t.divergence_threshold}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  detail::check_keys(j,
                     {"epochs", "lr", "beta1", "beta2", "adam_eps", "clip_norm",
                      "episode", "seed", "frozen_groups", "scope_groups",
                      "divergence_threshold"},
                     "train");
  detail::get_opt(j, "epochs", t.epochs, "train");
  detail::get_opt(j, "lr", t.lr, "train");
  detail::get_opt(j, "beta1", t.beta1, "train");
  detail::get_opt(j, "beta2", t.beta2, "train");
  detail::get_opt(j, "adam_eps", t.adam_eps, "train");
  detail::get_opt(j, "clip_norm", t.clip_norm, "train");
  detail::get_opt(j, "episode", t.episode, "train");
  detail::get_opt(j, "seed", t.seed, "train");
  detail::get_opt(j, "frozen_groups", t.frozen_groups, "train");
  detail::get_opt(j, "scope_groups", t.scope_groups, "train");
  detail::get_opt(j, "divergence_threshold", t.divergence_threshold, "train");
}

inline std::string adapt_mode_name(AdaptMode m) {
  switch (m) {
    case AdaptMode::online: return "online";
    case AdaptMode::offline: return "offline";
    case AdaptMode::k0: return "k0";
    case AdaptMode::finetune: return "finetune";
    case AdaptMode::hybrid: return "hybrid";
  }
  throw InvalidInput("adapt_mode_name: bad enum value");
}

inline AdaptMode adapt_mode_from_name(const std::string& s) {
  if (s == "online") return AdaptMode::online;
  if (s == "offline") return AdaptMode::offline;
  if (s == "k0") return AdaptMode::k0;
  if (s == "finetune") return AdaptMode::finetune;
  if (s == "hybrid") return AdaptMode::hybrid;
  throw ConfigError("adapt.mode: unknown mode '" + s + "'");
}

inline void to_json(nlohmann::json& j, const AdaptationConfig& a) {
  j = {{"mode", adapt_mode_name(a.mode)},
       {"switch_count", a.switch_count},
       {"finetune_lr", a.finetune_lr},
       {"last_layer_only", a.last_layer_only},
       {"finetune_epochs", a.finetune_epochs},
       {"seed", a.seed},
       {"episode", a.episode}};
}

inline void from_json(const nlohmann::json& j, AdaptationConfig& a) {
  detail::check_keys(j,
                     {"mode", "switch_count", "finetune_lr", "last_layer_only",
                      "finetune_epochs", "seed", "episode"},
                     "adapt");
  if (j.contains("mode"))
    a.mode = adapt_mode_from_name(j.at("mode").get<std::string>());
  detail::get_opt(j, "switch_count", a.switch_count, "adapt");
  detail::get_opt(j, "finetune_lr", a.finetune_lr, "adapt");
  detail::get_opt(j, "last_layer_only", a.last_layer_only, "adapt");
  detail::get_opt(j, "finetune_epochs", a.finetune_epochs, "adapt");
  detail::get_opt(j, "seed", a.seed, "adapt");
  detail::get_opt(j, "episode", a.episode, "adapt");
}

inline void to_json(nlohmann::json& j, const EvalConfig& e) {
  j = {{"history_len", e.history_len},
       {"horizon", e.horizon},
       {"particles", e.particles},
       {"update_counts", e.update_counts},
       {"levels", e.levels},
       {"rank_samples", e.rank_samples},
       {"resamples", e.resamples}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& e) {
  detail::check_keys(j,
                     {"history_len", "horizon", "particles", "update_counts",
                      "levels", "rank_samples", "resamples"},
                     "eval");
  detail::get_opt(j, "history_len", e.history_len, "eval");
  detail::get_opt(j, "horizon", e.horizon, "eval");
  detail::get_opt(j, "particles", e.particles, "eval");
  detail::get_opt(j, "update_counts", e.update_counts, "eval");
  detail::get_opt(j, "levels", e.levels, "eval");
  detail::get_opt(j, "rank_samples", e.rank_samples, "eval");
  detail::get_opt(j, "resamples", e.resamples, "eval");
}

inline void to_json(nlohmann::json& j, const DomainSpec& d) {
  j = {{"name", d.name},
       {"dt", d.dt},
       {"steps", d.steps},
       {"speed_scale", d.speed_scale},
       {"nominal_speed", d.nominal_speed},
       {"turn_bias", d.turn_bias},
       {"interaction_radius", d.interaction_radius},
       {"interaction_gain", d.interaction_gain},
       {"goal_distance", d.goal_distance},
       {"goal_spread", d.goal_spread},
       {"area", d.area},
       {"min_agents", d.min_agents},
       {"max_agents", d.max_agents},
       {"accel_noise", d.accel_noise},
       {"position_noise", d.position_noise},
       {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
  detail::check_keys(
      j,
      {"name", "dt", "steps", "speed_scale", "nominal_speed", "turn_bias",
       "interaction_radius", "interaction_gain", "goal_distance", "goal_spread",
       "area", "min_agents", "max_agents", "accel_noise", "position_noise",
       "seed"},
      "domain");
  detail::get_opt(j, "name", d.name, "domain");
  detail::get_opt(j, "dt", d.dt, "domain");
  detail::get_opt(j, "steps", d.steps, "domain");
  detail::get_opt(j, "speed_scale", d.speed_scale, "domain");
  detail::get_opt(j, "nominal_speed", d.nominal_speed, "domain");
  detail::get_opt(j, "turn_bias", d.turn_bias, "domain");
  detail::get_opt(j, "interaction_radius", d.interaction_radius, "domain");
  detail::get_opt(j, "interaction_gain", d.interaction_gain, "domain");
  detail::get_opt(j, "goal_distance", d.goal_distance, "domain");
  detail::get_opt(j, "goal_spread", d.goal_spread, "domain");
  detail::get_opt(j, "area", d.area, "domain");
  detail::get_opt(j, "min_agents", d.min_agents, "domain");
  detail::get_opt(j, "max_agents", d.max_agents, "domain");
  detail::get_opt(j, "accel_noise", d.accel_noise, "domain");
  detail::get_opt(j, "position_noise", d.position_noise, "domain");
  detail::get_opt(j, "seed", d.seed, "domain");
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"mode", c.mode},
       {"preset", c.preset},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"scenes", c.scenes},
       {"segment_len", c.segment_len},
       {"anchor", c.anchor},
       {"model", c.model},
       {"train", c.train},
       {"adapt", c.adapt},
       {"eval", c.eval},
       {"source", c.source},
       {"target", c.target},
       {"dataset", c.dataset},
       {"checkpoint", c.checkpoint}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::check_keys(j,
                     {"mode", "preset", "seed", "output_dir", "scenes",
                      "segment_len", "anchor", "model", "train", "adapt",
                      "eval", "source", "target", "dataset", "checkpoint"},
                     "config");
  detail::get_opt(j, "mode", c.mode, "config");
  detail::get_opt(j, "preset", c.preset, "config");
  detail::get_opt(j, "seed", c.seed, "config");
  detail::get_opt(j, "output_dir", c.output_dir, "config");
  detail::get_opt(j, "scenes", c.scenes, "config");
  detail::get_opt(j, "segment_len", c.segment_len, "config");
  detail::get_opt(j, "anchor", c.anchor, "config");
  detail::get_opt(j, "model", c.model, "config");
  detail::get_opt(j, "train", c.train, "config");
  detail::get_opt(j, "adapt", c.adapt, "config");
  detail::get_opt(j, "eval", c.eval, "config");
  detail::get_opt(j, "source", c.source, "config");
  detail::get_opt(j, "target", c.target, "config");
  detail::get_opt(j, "dataset", c.dataset, "config");
  detail::get_opt(j, "checkpoint", c.checkpoint, "config");
}

// A preset fills in mode and domains; explicit config keys still win because
// the preset is applied before the file's own values.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("preset") && j.at("preset").get<std::string>() != "") {
    ExperimentPreset p = experiment_preset(j.at("preset").get<std::string>());
    c.preset = p.name;
    c.mode = p.eval_mode;
    c.source = p.domains.source;
    c.target = p.domains.target;
  }
  from_json(j, c);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_config(j);
}

// Applies one "dotted.path=value" override onto the raw JSON. The value is
// parsed as a JSON literal when possible, otherwise taken as a string, so
// train.lr=0.01 and adapt.mode=hybrid both work.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + spec + "' is not key=value");
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (key.empty()) throw ConfigError("override '" + spec + "': empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

// Canonical resolved form: every field present, keys sorted by the JSON
// library. Hashing this, not the input file, makes the hash insensitive to
// formatting and key order but sensitive to every effective value.
inline nlohmann::json resolved_config(const ExperimentConfig& c) {
  nlohmann::json j;
  to_json(j, c);
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  return fnv1a64_hex(resolved_config(c).dump());
}

// Parameter initialization used before training; factored out so a
// zero-epoch checkpoint is reconstructible from the experiment seed alone.
inline TrainState initial_state(const ExperimentConfig& c) {
  return TrainState::init(c.model, RandomStream(c.seed).child(0x11));
}

}  // namespace kalmeta
