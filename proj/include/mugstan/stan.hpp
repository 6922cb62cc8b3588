#pragma once

// Spatial-temporal branch network. It runs alongside the frame encoder, reads
// the encoder's last K+1 levels and alternates per-frame spatial attention
// with per-position temporal mixing. Its output is added onto the encoder's
// final level before the final LayerNorm and joint-space projection.
//
// All operations accept any number of leading batch axes in front of the
// per-video [T, L(+1), D] layout.

#include <optional>
#include <string>
#include <vector>

#include "mugstan/encoders.hpp"

namespace mugstan {

enum class TemporalStrategy { SelfAttention, DepthwiseConv };

/// Where the residual sits relative to the zero-initialised temporal
/// projection. Outside: Y + P(Temp(Y)). Inside: P(Temp(Y) + Y).
enum class ResidualPlacement { Outside, Inside };

struct StanConfig {
  std::size_t layers = 4;
  std::optional<std::size_t> start_level;  // default: depth - layers * interval
  std::size_t interval = 1;
  std::size_t heads = 4;
  double dropout = 0.1;
  TemporalStrategy temporal = TemporalStrategy::SelfAttention;
  ResidualPlacement residual = ResidualPlacement::Outside;
  double pos_init_std = 0.02;
  double in_proj_init_std = 0.02;
  std::size_t max_frames = 12;
  AttentionScale scaling = AttentionScale::PerHead;

  std::size_t first_level(std::size_t encoder_depth) const {
    if (start_level) return *start_level;
    if (layers * interval > encoder_depth) {
      throw ConfigError("STAN with " + std::to_string(layers) + " layers at interval " +
                        std::to_string(interval) + " needs more than " +
                        std::to_string(encoder_depth) + " encoder blocks");
    }
    return encoder_depth - layers * interval;
  }

  /// Encoder level feeding STAN layer k (1-based).
  std::size_t level_for_layer(std::size_t k, std::size_t encoder_depth) const {
    return first_level(encoder_depth) + (k - 1) * interval;
  }

  void validate(std::size_t encoder_depth) const {
    if (layers == 0) throw ConfigError("STAN needs at least one layer");
    if (interval == 0) throw ConfigError("STAN level interval must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("STAN dropout must lie in [0, 1)");
    if (max_frames == 0) throw ConfigError("STAN max_frames must be positive");
    if (level_for_layer(layers, encoder_depth) >= encoder_depth) {
      throw ConfigError("STAN levels run past the encoder: last input level " +
                        std::to_string(level_for_layer(layers, encoder_depth)) + " with depth " +
                        std::to_string(encoder_depth));
    }
  }
};

/// Whole-video token sequence: one video [CLS] plus T x L patch tokens.
template <class T>
struct VideoSequence {
  Tensor<T> video_cls;  // [..., D]
  Tensor<T> patches;    // [..., T, L, D]
};

template <class T>
struct StanLayer {
  TransformerBlock<T> intra;  // spatial block, copied from the matching encoder block
  Tensor<T> wq, wk, wv;       // temporal attention projections
  Tensor<T> conv;             // [3, D] depthwise temporal kernel
  Tensor<T> w_proj;           // [D, D], zero at init
  Tensor<T> in_proj;          // [D, D] level projection; undefined for layer 1

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    intra.collect(prefix + ".intra", out);
    out.emplace_back(prefix + ".temporal.wq", wq);
    out.emplace_back(prefix + ".temporal.wk", wk);
    out.emplace_back(prefix + ".temporal.wv", wv);
    out.emplace_back(prefix + ".temporal.conv", conv);
    out.emplace_back(prefix + ".temporal.w_proj", w_proj);
    if (in_proj.defined()) out.emplace_back(prefix + ".in_proj", in_proj);
  }
};

template <class T>
struct StanState {
  StanConfig cfg;
  Tensor<T> pos_t;  // [max_frames, D]
  Tensor<T> pos_s;  // [L, D]
  std::vector<StanLayer<T>> layers;
  LayerNorm<T> ln_post;
  Tensor<T> v_proj;  // [D, D_joint]

  /// Fresh state for `encoder`. Spatial blocks start as copies of the
  /// encoder blocks that process the corresponding input levels.
  StanState(const StanConfig& c, const VisualEncoder<T>& encoder, std::size_t joint_dim, Rng& rng)
      : cfg(c) {
    const auto& ec = encoder.config();
    cfg.validate(ec.layers);
    const std::size_t D = ec.width;
    pos_t = param<T>({cfg.max_frames, D}, rng, cfg.pos_init_std);
    pos_s = param<T>({ec.patches, D}, rng, cfg.pos_init_std);
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    for (std::size_t k = 1; k <= cfg.layers; ++k) {
      StanLayer<T> layer;
      layer.intra = encoder.blocks()[cfg.level_for_layer(k, ec.layers)].clone();
      layer.intra.heads = cfg.heads;
      layer.intra.scaling = cfg.scaling;
      if (D % cfg.heads != 0) throw ConfigError("STAN heads must divide the width");
      layer.wq = param<T>({D, D}, rng, s);
      layer.wk = param<T>({D, D}, rng, s);
      layer.wv = param<T>({D, D}, rng, s);
      layer.conv = param<T>({3, D}, rng, 1.0 / std::sqrt(3.0));
      layer.w_proj = zeros_param<T>({D, D});
      if (k > 1) layer.in_proj = param<T>({D, D}, rng, cfg.in_proj_init_std);
      layers.push_back(std::move(layer));
    }
    ln_post = LayerNorm<T>(D);
    v_proj = param<T>({D, joint_dim}, rng, s);
  }

  /// Branch-only parameters (positional embeddings and STAN layers).
  void collect_branch(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".pos_t", pos_t);
    out.emplace_back(prefix + ".pos_s", pos_s);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].collect(prefix + ".layer" + std::to_string(k + 1), out);
    }
  }

  /// Final LayerNorm and joint projection (part of the pretrained encoder head).
  void collect_head(const std::string& prefix, NamedTensors<T>& out) const {
    ln_post.collect(prefix + ".ln_post", out);
    out.emplace_back(prefix + ".v_proj", v_proj);
  }
};

namespace detail {

template <class T>
Shape lead_shape(const Tensor<T>& x, std::size_t trailing) {
  return Shape(x.shape().begin(), x.shape().end() - static_cast<std::ptrdiff_t>(trailing));
}

/// Mean over frames of the per-frame [CLS] rows of a level: [..., T, L+1, D] -> [..., D].
template <class T>
Tensor<T> mean_frame_cls(const Tensor<T>& level) {
  auto cls_rows = slice(level, -2, 0, 1);  // [..., T, 1, D]
  auto m = mean(cls_rows, -3);             // [..., 1, D]
  Shape s = lead_shape(level, 3);
  s.push_back(level.dim(-1));
  return reshape(m, s);
}

template <class T>
Tensor<T> level_patches(const Tensor<T>& level) {
  return slice(level, -2, 1, level.dim(-2) - 1);
}

/// [..., D] -> [..., 1, 1, D], broadcastable against [..., T, L, D].
template <class T>
Tensor<T> as_frame_row(const Tensor<T>& v) {
  Shape s = lead_shape(v, 1);
  s.push_back(1);
  s.push_back(1);
  s.push_back(v.dim(-1));
  return reshape(v, s);
}

}  // namespace detail

/// First layer input: video [CLS] = frame-mean of level-m [CLS] tokens;
/// patches = Dropout(f + Pos_t(t) + Pos_s(l)).
template <class T>
VideoSequence<T> build_first_layer_input(const MultiLevelGrid<T>& grid, std::size_t m,
                                         const StanState<T>& state, Rng& rng, bool training) {
  if (m >= grid.levels.size()) throw ConfigError("start level " + std::to_string(m) + " out of range");
  const auto& level = grid.levels[m];
  const std::size_t Tn = level.dim(-3), L = level.dim(-2) - 1, D = level.dim(-1);
  if (Tn > state.pos_t.dim(0)) {
    throw ConfigError(std::to_string(Tn) + " frames exceed the configured maximum of " +
                      std::to_string(state.pos_t.dim(0)));
  }
  if (L != state.pos_s.dim(0) || D != state.pos_s.dim(1)) {
    throw DimensionError("grid " + to_string(level.shape()) + " does not match spatial positions " +
                         to_string(state.pos_s.shape()));
  }
  VideoSequence<T> out;
  out.video_cls = detail::mean_frame_cls(level);
  auto pos_t = reshape(slice(state.pos_t, 0, 0, Tn), {Tn, 1, D});
  auto pos = add(pos_t, state.pos_s);  // [T, L, D]
  out.patches = dropout(add(detail::level_patches(level), pos), state.cfg.dropout, rng, training);
  return out;
}

/// Input of layer k >= 2: previous output plus the projected level-(m+k-1) tokens.
template <class T>
VideoSequence<T> build_layer_input(const VideoSequence<T>& prev, const Tensor<T>& level,
                                   const Tensor<T>& w_proj) {
  if (level.dim(-1) != prev.patches.dim(-1) || level.dim(-3) != prev.patches.dim(-3) ||
      level.dim(-2) != prev.patches.dim(-2) + 1) {
    throw DimensionError("level " + to_string(level.shape()) + " incompatible with patches " +
                         to_string(prev.patches.shape()));
  }
  VideoSequence<T> out;
  const std::size_t D = level.dim(-1);
  auto level_cls = detail::mean_frame_cls(level);  // [..., D]
  auto projected = matmul(reshape(level_cls, {level_cls.numel() / D, D}), w_proj);
  out.video_cls = add(prev.video_cls, reshape(projected, prev.video_cls.shape()));
  out.patches = add(prev.patches, matmul(detail::level_patches(level), w_proj));
  return out;
}

/// Spatial module: per frame, self-attention block over [video CLS; patches_i];
/// the updated CLS copies are averaged back into one video [CLS].
template <class T>
VideoSequence<T> intra_frame_module(const VideoSequence<T>& x, const StanLayer<T>& layer) {
  const std::size_t D = x.patches.dim(-1);
  Shape cls_shape = detail::lead_shape(x.patches, 2);  // [..., T]
  cls_shape.push_back(1);
  cls_shape.push_back(D);
  auto cls = broadcast_to(detail::as_frame_row(x.video_cls), cls_shape);
  auto tokens = concat<T>({cls, x.patches}, -2);  // [..., T, L+1, D]
  auto y = layer.intra(tokens);
  VideoSequence<T> out;
  out.video_cls = reshape(mean(slice(y, -2, 0, 1), -3), x.video_cls.shape());
  out.patches = slice(y, -2, 1, x.patches.dim(-2));
  return out;
}

/// Temporal module: for every spatial position, mixes the T patch tokens.
/// The video [CLS] passes through unchanged.
template <class T>
VideoSequence<T> cross_frame_module(const VideoSequence<T>& x, const StanLayer<T>& layer,
                                    const StanConfig& cfg) {
  auto y = transpose(x.patches, -3, -2);  // [..., L, T, D]
  Tensor<T> mixed;
  switch (cfg.temporal) {
    case TemporalStrategy::SelfAttention:
      mixed = multi_head_attention(y, y, y, cfg.heads, layer.wq, layer.wk, layer.wv, std::nullopt,
                                   cfg.scaling);
      break;
    case TemporalStrategy::DepthwiseConv: {
      const std::size_t Tn = y.dim(-2), D = y.dim(-1);
      auto tap = [&](std::size_t i) { return reshape(slice(layer.conv, 0, i, 1), {D}); };
      mixed = mul(y, tap(1));
      if (Tn > 1) {
        Shape zshape = y.shape();
        zshape[zshape.size() - 2] = 1;
        const auto zero = Tensor<T>::zeros(zshape);
        auto prev = concat<T>({zero, slice(y, -2, 0, Tn - 1)}, -2);  // y[t-1]
        auto next = concat<T>({slice(y, -2, 1, Tn - 1), zero}, -2);  // y[t+1]
        mixed = add(add(mixed, mul(prev, tap(0))), mul(next, tap(2)));
      }
      break;
    }
    default:
      throw ConfigError("unknown temporal strategy");
  }
  Tensor<T> out_y = cfg.residual == ResidualPlacement::Outside
                        ? add(y, matmul(mixed, layer.w_proj))
                        : matmul(add(mixed, y), layer.w_proj);
  return {x.video_cls, transpose(out_y, -3, -2)};
}

/// Runs the whole branch and returns the last layer's output.
template <class T>
VideoSequence<T> stan_forward(const MultiLevelGrid<T>& grid, const StanState<T>& state, Rng& rng,
                              bool training) {
  const auto& cfg = state.cfg;
  const std::size_t depth = grid.depth();
  cfg.validate(depth);
  if (state.layers.size() != cfg.layers) throw ConfigError("STAN state/config layer count mismatch");
  auto x = build_first_layer_input(grid, cfg.first_level(depth), state, rng, training);
  for (std::size_t k = 1; k <= cfg.layers; ++k) {
    const auto& layer = state.layers[k - 1];
    if (k > 1) x = build_layer_input(x, grid.levels[cfg.level_for_layer(k, depth)], layer.in_proj);
    x = intra_frame_module(x, layer);
    x = cross_frame_module(x, layer, cfg);
  }
  return x;
}

/// Final LayerNorm + joint projection of a token grid, reduced to one
/// embedding per frame. [..., T, L+1, D] -> [..., T, D_joint].
template <class T>
FrameSequence<T> project_frames(const Tensor<T>& grid_level, const StanState<T>& state,
                                FrameSource source = FrameSource::Cls) {
  auto z = matmul(state.ln_post(grid_level), state.v_proj);
  Shape s = detail::lead_shape(z, 2);
  s.push_back(z.dim(-1));
  if (source == FrameSource::Cls) return {reshape(slice(z, -2, 0, 1), s)};
  return {mean(slice(z, -2, 1, z.dim(-2) - 1), -2)};
}

/// Adds the branch output onto the encoder's last level (video [CLS] onto
/// every frame [CLS], patches element-wise), then projects per frame.
template <class T>
FrameSequence<T> fuse(const Tensor<T>& last_level, const VideoSequence<T>& branch,
                      const StanState<T>& state, FrameSource source = FrameSource::Cls) {
  if (last_level.dim(-2) != branch.patches.dim(-2) + 1 || last_level.dim(-3) != branch.patches.dim(-3)) {
    throw DimensionError("fuse: last level " + to_string(last_level.shape()) + " vs branch " +
                         to_string(branch.patches.shape()));
  }
  auto cls = add(slice(last_level, -2, 0, 1), detail::as_frame_row(branch.video_cls));
  auto patches = add(detail::level_patches(last_level), branch.patches);
  return project_frames(concat<T>({cls, patches}, -2), state, source);
}

}  // namespace mugstan
