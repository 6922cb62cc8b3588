#pragma once

// Toy stand-ins for pretrained image-text encoders. The visual encoder runs
// every frame as an independent image and exposes the output of every block;
// the text encoder produces token-wise embeddings in the joint space.

#include <cstdint>
#include <string>
#include <vector>

#include "mugstan/layers.hpp"

namespace mugstan {

/// Per-level per-frame token grids. levels[0] is the embedding level, levels[b + 1]
/// the output of block b. Each level is [..., T, L + 1, D] with the frame [CLS]
/// at token index 0.
template <class T>
struct MultiLevelGrid {
  std::vector<Tensor<T>> levels;

  std::size_t depth() const { return levels.size() - 1; }
  std::size_t frames() const { return levels.front().dim(-3); }
  std::size_t patches() const { return levels.front().dim(-2) - 1; }
  std::size_t width() const { return levels.front().dim(-1); }
  const Tensor<T>& last() const { return levels.back(); }
};

/// Frame-wise video representation, [T, D] (or [..., T, D] when batched).
template <class T>
struct FrameSequence {
  Tensor<T> values;

  std::size_t frames() const { return values.dim(-2); }
};

/// Token-wise text representation with a padding mask and a summary position.
template <class T>
struct TokenSequence {
  Tensor<T> values;                 // [K_tok, D]
  std::vector<std::uint8_t> valid;  // [K_tok]
  std::size_t summary_index = 0;

  std::size_t size() const { return valid.size(); }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v ? 1 : 0;
    return n;
  }

  void validate() const {
    if (!values.defined() || values.rank() != 2 || values.dim(0) != valid.size()) {
      throw DimensionError("token sequence values/mask mismatch");
    }
    if (summary_index >= valid.size() || !valid[summary_index]) {
      throw ContractError("summary index " + std::to_string(summary_index) +
                          " is out of range or masked");
    }
  }
};

enum class SummaryPosition { Last, First };
enum class FrameSource { Cls, MeanPatches };

struct VisualEncoderConfig {
  std::size_t d_in = 16;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 6;
  std::size_t patches = 16;
  std::size_t mlp_ratio = 4;
  AttentionScale scaling = AttentionScale::PerHead;
};

struct TextEncoderConfig {
  std::size_t vocab = 128;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t max_tokens = 8;
  std::size_t mlp_ratio = 4;
  std::size_t joint_dim = 32;
  SummaryPosition summary = SummaryPosition::Last;
  AttentionScale scaling = AttentionScale::PerHead;
};

template <class T>
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(const VisualEncoderConfig& cfg, Rng& rng)
      : cfg_(cfg),
        patch_embed_(cfg.d_in, cfg.width, rng),
        cls_(param<T>({cfg.width}, rng, 0.02)),
        pos_(param<T>({cfg.patches + 1, cfg.width}, rng, 0.02)),
        ln_pre_(cfg.width) {
    if (cfg.layers == 0) throw ConfigError("visual encoder needs at least one block");
    for (std::size_t b = 0; b < cfg.layers; ++b) {
      blocks_.emplace_back(cfg.width, cfg.heads, cfg.mlp_ratio, rng, cfg.scaling);
    }
  }

  const VisualEncoderConfig& config() const { return cfg_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }

  /// frames: [..., T, L, d_in] patch features.
  MultiLevelGrid<T> encode(const Tensor<T>& frames) const {
    if (frames.rank() < 3 || frames.dim(-1) != cfg_.d_in || frames.dim(-2) != cfg_.patches) {
      throw DimensionError("frames " + to_string(frames.shape()) + " do not match encoder (L=" +
                           std::to_string(cfg_.patches) + ", d_in=" + std::to_string(cfg_.d_in) + ")");
    }
    detail::check_finite(frames.impl()->data, "encode_frames input");
    Shape lead(frames.shape().begin(), frames.shape().end() - 2);  // [..., T]
    Shape cls_shape = lead;
    cls_shape.push_back(1);
    cls_shape.push_back(cfg_.width);
    auto tokens = patch_embed_(frames);                             // [..., T, L, D]
    auto cls = broadcast_to(reshape(cls_, {1, cfg_.width}), cls_shape);  // [..., T, 1, D]
    auto x = add(concat<T>({cls, tokens}, -2), pos_);
    x = ln_pre_(x);
    MultiLevelGrid<T> grid;
    grid.levels.push_back(x);
    for (const auto& block : blocks_) {
      x = block(x);
      grid.levels.push_back(x);
    }
    return grid;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    patch_embed_.collect(prefix + ".patch_embed", out);
    out.emplace_back(prefix + ".cls", cls_);
    out.emplace_back(prefix + ".pos", pos_);
    ln_pre_.collect(prefix + ".ln_pre", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
    }
  }

 private:
  VisualEncoderConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> cls_;
  Tensor<T> pos_;
  LayerNorm<T> ln_pre_;
  std::vector<TransformerBlock<T>> blocks_;
};

/// Batched text encoding: values [B, K_tok, D_joint] plus per-sequence masks.
template <class T>
struct TextBatch {
  Tensor<T> values;
  std::vector<std::uint8_t> valid;          // [B * K_tok]
  std::vector<std::size_t> summary_index;   // [B]

  std::size_t batch() const { return summary_index.size(); }
  std::size_t tokens() const { return values.dim(-2); }

  TokenSequence<T> sequence(std::size_t b) const {
    TokenSequence<T> s;
    const std::size_t K = tokens(), D = values.dim(-1);
    s.values = reshape(slice(values, 0, b, 1), {K, D});
    s.valid.assign(valid.begin() + static_cast<std::ptrdiff_t>(b * K),
                   valid.begin() + static_cast<std::ptrdiff_t>((b + 1) * K));
    s.summary_index = summary_index[b];
    return s;
  }
};

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const TextEncoderConfig& cfg, Rng& rng)
      : cfg_(cfg),
        token_embed_(param<T>({cfg.vocab, cfg.width}, rng, 0.02)),
        pos_(param<T>({cfg.max_tokens, cfg.width}, rng, 0.01)),
        ln_final_(cfg.width),
        proj_(cfg.width, cfg.joint_dim, rng, false) {
    for (std::size_t b = 0; b < cfg.layers; ++b) {
      blocks_.emplace_back(cfg.width, cfg.heads, cfg.mlp_ratio, rng, cfg.scaling);
    }
  }

  const TextEncoderConfig& config() const { return cfg_; }

  TextBatch<T> encode_batch(const std::vector<std::vector<std::size_t>>& batch) const {
    if (batch.empty()) throw ContractError("encode_text: empty batch");
    const std::size_t K = cfg_.max_tokens, B = batch.size();
    std::vector<std::size_t> ids(B * K, 0);
    TextBatch<T> out;
    out.valid.assign(B * K, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& seq = batch[b];
      if (seq.empty()) throw ContractError("encode_text: empty token list");
      if (seq.size() > K) {
        throw ContractError("encode_text: " + std::to_string(seq.size()) +
                            " tokens exceed the limit of " + std::to_string(K));
      }
      for (std::size_t j = 0; j < seq.size(); ++j) {
        ids[b * K + j] = seq[j];
        out.valid[b * K + j] = 1;
      }
      out.summary_index.push_back(cfg_.summary == SummaryPosition::Last ? seq.size() - 1 : 0);
    }
    auto x = reshape(embedding(token_embed_, ids), {B, K, cfg_.width});
    x = add(x, pos_);
    const Mask key_mask({B, K}, out.valid);
    for (const auto& block : blocks_) x = block(x, key_mask);
    out.values = proj_(ln_final_(x));
    return out;
  }

  TokenSequence<T> encode(const std::vector<std::size_t>& tokens) const {
    return encode_batch({tokens}).sequence(0);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".token_embed", token_embed_);
    out.emplace_back(prefix + ".pos", pos_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(prefix + ".block" + std::to_string(b), out);
    }
    ln_final_.collect(prefix + ".ln_final", out);
    proj_.collect(prefix + ".proj", out);
  }

 private:
  TextEncoderConfig cfg_;
  Tensor<T> token_embed_;
  Tensor<T> pos_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_final_;
  Linear<T> proj_;
};

}  // namespace mugstan
