#pragma once

// JSON run configuration. Every section is optional; unknown keys are
// rejected so that typos do not silently fall back to defaults.
// The schema is documented in docs/config.md.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mugstan/model.hpp"
#include "mugstan/synth.hpp"

namespace mugstan {

enum class DataMode { Synthetic, File };

struct DataConfig {
  DataMode mode = DataMode::Synthetic;
  SynthConfig synth;
  std::filesystem::path path;  // MGSV file when mode = File
};

struct OptimConfig {
  double lr_backbone = 1e-3;
  double lr_stan = 1e-2;
  double weight_decay = 1e-3;
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
};

struct EvalConfig {
  std::size_t chunk = 0;
  std::size_t workers = 1;
  std::size_t encode_batch = 64;
  double audit_scale = 1.0;
  double audit_threshold = 0.5;
};

struct Variant {
  std::string name;
  nlohmann::json model_patch = nlohmann::json::object();  // merged over the base "model" section
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  DataConfig data;
  OptimConfig optim;
  EvalConfig eval;
  std::filesystem::path output_dir = "runs/default";
  std::vector<Variant> variants;
  std::vector<std::uint64_t> ablation_seeds;
  nlohmann::json source = nlohmann::json::object();  // the parsed document, for hashing and sidecars

  bool feature_mode() const { return data.mode == DataMode::Synthetic && data.synth.mode == SynthMode::Feature; }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in config section '" + section + "'");
  }
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + section + "." + key + "': " + e.what());
  }
}

template <class E>
E read_enum(const nlohmann::json& j, const char* key, E fallback, const std::string& section,
            std::initializer_list<std::pair<const char*, E>> names) {
  if (!j.contains(key)) return fallback;
  const auto s = j.at(key).get<std::string>();
  for (const auto& [n, e] : names)
    if (s == n) return e;
  throw ConfigError("config '" + section + "." + key + "': unknown value '" + s + "'");
}

inline AttentionScale read_scaling(const nlohmann::json& j, AttentionScale fallback, const std::string& section) {
  return read_enum(j, "attention_scale", fallback, section,
                   {{"per_head", AttentionScale::PerHead}, {"full_width", AttentionScale::FullWidth}});
}

inline void parse_visual(const nlohmann::json& j, VisualEncoderConfig& c) {
  const std::string s = "model.visual";
  check_keys(j, s, {"d_in", "width", "heads", "layers", "patches", "mlp_ratio", "attention_scale"});
  read(j, "d_in", c.d_in, s);
  read(j, "width", c.width, s);
  read(j, "heads", c.heads, s);
  read(j, "layers", c.layers, s);
  read(j, "patches", c.patches, s);
  read(j, "mlp_ratio", c.mlp_ratio, s);
  c.scaling = read_scaling(j, c.scaling, s);
}

inline void parse_text(const nlohmann::json& j, TextEncoderConfig& c) {
  const std::string s = "model.text";
  check_keys(j, s, {"vocab", "width", "heads", "layers", "max_tokens", "mlp_ratio", "joint_dim", "summary",
                    "attention_scale"});
  read(j, "vocab", c.vocab, s);
  read(j, "width", c.width, s);
  read(j, "heads", c.heads, s);
  read(j, "layers", c.layers, s);
  read(j, "max_tokens", c.max_tokens, s);
  read(j, "mlp_ratio", c.mlp_ratio, s);
  read(j, "joint_dim", c.joint_dim, s);
  c.summary = read_enum(j, "summary", c.summary, s, {{"last", SummaryPosition::Last}, {"first", SummaryPosition::First}});
  c.scaling = read_scaling(j, c.scaling, s);
}

inline void parse_stan(const nlohmann::json& j, StanConfig& c) {
  const std::string s = "model.stan";
  check_keys(j, s, {"layers", "start_level", "interval", "heads", "dropout", "temporal", "residual",
                    "pos_init_std", "in_proj_init_std", "max_frames", "attention_scale"});
  read(j, "layers", c.layers, s);
  if (j.contains("start_level") && !j.at("start_level").is_null()) c.start_level = j.at("start_level").get<std::size_t>();
  read(j, "interval", c.interval, s);
  read(j, "heads", c.heads, s);
  read(j, "dropout", c.dropout, s);
  c.temporal = read_enum(j, "temporal", c.temporal, s,
                         {{"self_attention", TemporalStrategy::SelfAttention},
                          {"depthwise_conv", TemporalStrategy::DepthwiseConv}});
  c.residual = read_enum(j, "residual", c.residual, s,
                         {{"outside", ResidualPlacement::Outside}, {"inside", ResidualPlacement::Inside}});
  read(j, "pos_init_std", c.pos_init_std, s);
  read(j, "in_proj_init_std", c.in_proj_init_std, s);
  read(j, "max_frames", c.max_frames, s);
  c.scaling = read_scaling(j, c.scaling, s);
}

inline void parse_mug(const nlohmann::json& j, MugConfig& c) {
  const std::string s = "model.mug";
  check_keys(j, s, {"tau", "granularity", "selection", "top_k", "selection_scope", "include_summary_token",
                    "tau_frame_to_token", "tau_frame_weights", "tau_token_to_frame", "tau_token_weights"});
  read(j, "tau", c.tau, s);
  c.granularity = read_enum(j, "granularity", c.granularity, s,
                            {{"frame_token", Granularity::FrameToken},
                             {"frame_text", Granularity::FrameText},
                             {"video_token", Granularity::VideoToken}});
  c.selection = read_enum(j, "selection", c.selection, s,
                          {{"softmax", Selection::Softmax}, {"top_k", Selection::TopK}, {"max", Selection::Max}});
  read(j, "top_k", c.top_k, s);
  c.scope = read_enum(j, "selection_scope", c.scope, s,
                      {{"all", SelectionScope::All}, {"aggregation_only", SelectionScope::AggregationOnly}});
  read(j, "include_summary_token", c.include_summary_token, s);
  for (auto [key, slot] : {std::pair{"tau_frame_to_token", &c.tau_frame_to_token},
                           std::pair{"tau_frame_weights", &c.tau_frame_weights},
                           std::pair{"tau_token_to_frame", &c.tau_token_to_frame},
                           std::pair{"tau_token_weights", &c.tau_token_weights}}) {
    if (j.contains(key) && !j.at(key).is_null()) *slot = j.at(key).get<double>();
  }
}

inline void parse_model(const nlohmann::json& j, ModelConfig& c) {
  const std::string s = "model";
  check_keys(j, s, {"visual", "text", "stan", "mug", "use_stan", "frame_source", "head", "logit_scale_init",
                    "logit_scale_max", "learnable_logit_scale"});
  if (j.contains("visual")) parse_visual(j.at("visual"), c.visual);
  if (j.contains("text")) parse_text(j.at("text"), c.text);
  if (j.contains("stan")) parse_stan(j.at("stan"), c.stan);
  if (j.contains("mug")) parse_mug(j.at("mug"), c.mug);
  read(j, "use_stan", c.use_stan, s);
  c.frame_source = read_enum(j, "frame_source", c.frame_source, s,
                             {{"cls", FrameSource::Cls}, {"mean_patches", FrameSource::MeanPatches}});
  c.head = read_enum(j, "head", c.head, s,
                     {{"mug", SimilarityHead::Mug}, {"mean_pool", SimilarityHead::MeanPool},
                      {"cls_pool", SimilarityHead::ClsPool}});
  read(j, "logit_scale_init", c.logit_scale_init, s);
  read(j, "logit_scale_max", c.logit_scale_max, s);
  read(j, "learnable_logit_scale", c.learnable_logit_scale, s);
}

inline void parse_synth(const nlohmann::json& j, SynthConfig& c) {
  const std::string s = "data.synth";
  check_keys(j, s, {"n_pairs", "frames", "tokens", "dim", "distribution", "noise_scale", "seed", "mode",
                    "token_noise", "fillers", "distractor_offset", "min_valid_tokens", "patches", "d_in",
                    "distractor_patterns"});
  read(j, "n_pairs", c.n_pairs, s);
  read(j, "frames", c.frames, s);
  read(j, "tokens", c.tokens, s);
  read(j, "dim", c.dim, s);
  if (j.contains("distribution")) {
    const auto& d = j.at("distribution");
    check_keys(d, s + ".distribution", {"up", "middle", "bottom"});
    c.distribution = {0, 0, 0};
    read(d, "up", c.distribution.up, s);
    read(d, "middle", c.distribution.middle, s);
    read(d, "bottom", c.distribution.bottom, s);
  }
  read(j, "noise_scale", c.noise_scale, s);
  read(j, "seed", c.seed, s);
  c.mode = read_enum(j, "mode", c.mode, s, {{"embedding", SynthMode::Embedding}, {"feature", SynthMode::Feature}});
  read(j, "token_noise", c.token_noise, s);
  read(j, "fillers", c.fillers, s);
  read(j, "distractor_offset", c.distractor_offset, s);
  read(j, "min_valid_tokens", c.min_valid_tokens, s);
  read(j, "patches", c.patches, s);
  read(j, "d_in", c.d_in, s);
  read(j, "distractor_patterns", c.distractor_patterns, s);
}

}  // namespace detail

/// Applies RFC 7386 style merge of `patch` onto `base`.
inline nlohmann::json merged(nlohmann::json base, const nlohmann::json& patch) {
  base.merge_patch(patch);
  return base;
}

/// Builds a RunConfig from a parsed document. `seed_override` replaces the top-level seed.
inline RunConfig parse_run_config(const nlohmann::json& doc, std::optional<std::uint64_t> seed_override = {}) {
  RunConfig rc;
  detail::check_keys(doc, "<root>", {"seed", "model", "data", "optim", "eval", "output", "ablation"});
  detail::read(doc, "seed", rc.seed, "<root>");
  if (seed_override) rc.seed = *seed_override;
  if (doc.contains("model")) detail::parse_model(doc.at("model"), rc.model);

  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    detail::check_keys(d, "data", {"source", "synth", "path"});
    rc.data.mode = detail::read_enum(d, "source", rc.data.mode, "data",
                                     {{"synthetic", DataMode::Synthetic}, {"file", DataMode::File}});
    rc.data.synth.seed = rc.seed;
    if (d.contains("synth")) detail::parse_synth(d.at("synth"), rc.data.synth);
    if (d.contains("path")) rc.data.path = d.at("path").get<std::string>();
  } else {
    rc.data.synth.seed = rc.seed;
  }
  if (seed_override) rc.data.synth.seed = *seed_override;

  if (doc.contains("optim")) {
    const auto& o = doc.at("optim");
    detail::check_keys(o, "optim", {"lr_backbone", "lr_stan", "weight_decay", "steps", "batch_size", "checkpoint_every"});
    detail::read(o, "lr_backbone", rc.optim.lr_backbone, "optim");
    detail::read(o, "lr_stan", rc.optim.lr_stan, "optim");
    detail::read(o, "weight_decay", rc.optim.weight_decay, "optim");
    detail::read(o, "steps", rc.optim.steps, "optim");
    detail::read(o, "batch_size", rc.optim.batch_size, "optim");
    detail::read(o, "checkpoint_every", rc.optim.checkpoint_every, "optim");
  }
  if (doc.contains("eval")) {
    const auto& e = doc.at("eval");
    detail::check_keys(e, "eval", {"chunk", "workers", "encode_batch", "audit_scale", "audit_threshold"});
    detail::read(e, "chunk", rc.eval.chunk, "eval");
    detail::read(e, "workers", rc.eval.workers, "eval");
    detail::read(e, "encode_batch", rc.eval.encode_batch, "eval");
    detail::read(e, "audit_scale", rc.eval.audit_scale, "eval");
    detail::read(e, "audit_threshold", rc.eval.audit_threshold, "eval");
  }
  if (doc.contains("output")) {
    const auto& o = doc.at("output");
    detail::check_keys(o, "output", {"dir"});
    if (o.contains("dir")) rc.output_dir = o.at("dir").get<std::string>();
  }
  if (doc.contains("ablation")) {
    const auto& a = doc.at("ablation");
    detail::check_keys(a, "ablation", {"variants", "seeds"});
    if (a.contains("variants")) {
      for (const auto& v : a.at("variants")) {
        detail::check_keys(v, "ablation.variants[]", {"name", "model"});
        Variant var;
        var.name = v.at("name").get<std::string>();
        if (v.contains("model")) var.model_patch = v.at("model");
        rc.variants.push_back(std::move(var));
      }
    }
    detail::read(a, "seeds", rc.ablation_seeds, "ablation");
  }

  // Feature-mode corpora fix the encoder input geometry and vocabulary.
  if (rc.feature_mode()) {
    const auto& s = rc.data.synth;
    const auto& m = doc.contains("model") ? doc.at("model") : nlohmann::json::object();
    auto explicit_key = [&](const char* sec, const char* key) {
      return m.contains(sec) && m.at(sec).contains(key);
    };
    auto fit = [&](std::size_t& slot, std::size_t need, const char* sec, const char* key, bool at_least) {
      if (!explicit_key(sec, key)) {
        slot = need;
      } else if (at_least ? slot < need : slot != need) {
        throw ConfigError(std::string("model.") + sec + "." + key + " = " + std::to_string(slot) +
                          " does not fit the synthetic corpus (needs " + (at_least ? ">= " : "") +
                          std::to_string(need) + ")");
      }
    };
    fit(rc.model.visual.d_in, s.d_in, "visual", "d_in", false);
    fit(rc.model.visual.patches, s.patches, "visual", "patches", false);
    fit(rc.model.text.max_tokens, s.tokens, "text", "max_tokens", false);
    fit(rc.model.text.vocab, s.vocab_size(), "text", "vocab", true);
    if (rc.model.stan.max_frames < s.frames) rc.model.stan.max_frames = s.frames;
  }
  rc.model.validate();
  rc.data.synth.validate();
  if (rc.data.mode == DataMode::File && !std::filesystem::exists(rc.data.path)) {
    throw ConfigError("data.path '" + rc.data.path.string() + "' does not exist");
  }
  if (rc.optim.batch_size < 2) throw ConfigError("optim.batch_size must be at least 2 for contrastive training");
  if (rc.eval.workers == 0) throw ConfigError("eval.workers must be at least 1");
  rc.source = doc;
  rc.source["seed"] = rc.seed;
  return rc;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("invalid JSON in " + path.string() + ": " + e.what(), e.byte);
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = {}) {
  return parse_run_config(read_json_file(path), seed);
}

/// FNV-1a 64 of the canonical (key-sorted) JSON dump, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xF];
  return out;
}

}  // namespace mugstan
