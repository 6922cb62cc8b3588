#pragma once

// End-to-end video-text model: visual encoder with optional STAN branch,
// text encoder, and a Mug (or pooling) similarity head.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mugstan/mug.hpp"
#include "mugstan/optim.hpp"
#include "mugstan/stan.hpp"

namespace mugstan {

enum class SimilarityHead { Mug, MeanPool, ClsPool };

struct ModelConfig {
  VisualEncoderConfig visual;
  TextEncoderConfig text;
  StanConfig stan;
  bool use_stan = true;
  FrameSource frame_source = FrameSource::Cls;
  SimilarityHead head = SimilarityHead::Mug;
  MugConfig mug;
  double logit_scale_init = 100.0;
  double logit_scale_max = 100.0;
  bool learnable_logit_scale = true;

  void validate() const {
    if (visual.width % visual.heads != 0) throw ConfigError("visual heads must divide the width");
    if (text.width % text.heads != 0) throw ConfigError("text heads must divide the width");
    if (use_stan) stan.validate(visual.layers);
    mug.validate();
    if (!(logit_scale_init > 0) || !(logit_scale_max >= logit_scale_init)) {
      throw ConfigError("logit scale must satisfy 0 < init <= max");
    }
  }
};

template <class T>
class MugStanModel {
 public:
  MugStanModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_((cfg.validate(), cfg)), rng_(seed), dropout_rng_(rng_.fork()),
        visual_(cfg.visual, rng_), text_(cfg.text, rng_), stan_(make_stan(cfg, visual_, rng_)),
        log_scale_(Tensor<T>::scalar(static_cast<T>(std::log(cfg.logit_scale_init)),
                                     cfg.learnable_logit_scale)) {}

  const ModelConfig& config() const { return cfg_; }
  const VisualEncoder<T>& visual() const { return visual_; }
  const TextEncoder<T>& text() const { return text_; }
  const StanState<T>& stan() const { return stan_; }

  /// frames: [B, T, L, d_in] -> per-frame joint embeddings [B, T, D_joint].
  FrameBatch<T> encode_videos(const Tensor<T>& frames, bool training) {
    if (frames.rank() != 4) throw DimensionError("encode_videos expects [B, T, L, d_in]");
    const auto grid = visual_.encode(frames);
    FrameBatch<T> out;
    if (cfg_.use_stan) {
      const auto branch = stan_forward(grid, stan_, dropout_rng_, training);
      out.values = fuse(grid.last(), branch, stan_, cfg_.frame_source).values;
    } else {
      out.values = project_frames(grid.last(), stan_, cfg_.frame_source).values;
    }
    return out;
  }

  TextBatch<T> encode_texts(const std::vector<std::vector<std::size_t>>& ids) const {
    return text_.encode_batch(ids);
  }

  /// [B_text, B_video] similarity matrix under the configured head.
  Tensor<T> similarity(const FrameBatch<T>& videos, const TextBatch<T>& texts, PairwiseOptions opt = {}) const {
    switch (cfg_.head) {
      case SimilarityHead::Mug: return pairwise_mug_matrix(videos, texts, cfg_.mug, opt);
      case SimilarityHead::MeanPool: return pooled_similarity_matrix(videos, texts, Pooling::MeanPool);
      case SimilarityHead::ClsPool: return pooled_similarity_matrix(videos, texts, Pooling::ClsPool);
    }
    throw ConfigError("unknown similarity head");
  }

  /// exp(log scale) as a graph node; a constant when the scale is fixed.
  Tensor<T> logit_scale() const { return exp(log_scale_); }
  double logit_scale_value() const { return std::exp(static_cast<double>(log_scale_.item())); }

  void clamp_logit_scale() {
    const T hi = static_cast<T>(std::log(cfg_.logit_scale_max));
    auto d = log_scale_.mutable_data();
    if (d[0] > hi) d[0] = hi;
  }

  /// Encoder weights, joint-space head and logit scale.
  NamedTensors<T> backbone_parameters() const {
    NamedTensors<T> out;
    visual_.collect("visual", out);
    text_.collect("text", out);
    stan_.collect_head("head", out);
    if (cfg_.learnable_logit_scale) out.emplace_back("logit_scale", log_scale_);
    return out;
  }

  NamedTensors<T> stan_parameters() const {
    NamedTensors<T> out;
    if (cfg_.use_stan) stan_.collect_branch("stan", out);
    return out;
  }

  /// Every tensor that defines the model, including a fixed logit scale.
  NamedTensors<T> state() const {
    NamedTensors<T> out;
    visual_.collect("visual", out);
    text_.collect("text", out);
    stan_.collect_head("head", out);
    stan_.collect_branch("stan", out);
    out.emplace_back("logit_scale", log_scale_);
    return out;
  }

  std::vector<ParamGroup<T>> parameter_groups(double lr_backbone, double lr_stan) const {
    std::vector<ParamGroup<T>> g;
    g.push_back({"backbone", lr_backbone, backbone_parameters()});
    if (cfg_.use_stan) g.push_back({"stan", lr_stan, stan_parameters()});
    return g;
  }

 private:
  static StanState<T> make_stan(const ModelConfig& cfg, const VisualEncoder<T>& enc, Rng& rng) {
    StanConfig sc = cfg.stan;
    if (!cfg.use_stan) {
      // Only the head (ln_post, v_proj) is used; build the smallest valid branch.
      sc.layers = 1;
      sc.start_level.reset();
      sc.interval = 1;
      sc.heads = 1;
    }
    return StanState<T>(sc, enc, cfg.text.joint_dim, rng);
  }

  ModelConfig cfg_;
  Rng rng_;
  Rng dropout_rng_;
  VisualEncoder<T> visual_;
  TextEncoder<T> text_;
  StanState<T> stan_;
  Tensor<T> log_scale_;
};

}  // namespace mugstan
