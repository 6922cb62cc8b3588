#pragma once

#include <cmath>
#include <optional>

#include "mugstan/ops.hpp"

namespace mugstan {

/// Logit scaling of scaled dot-product attention. PerHead divides by
/// sqrt(D / heads); FullWidth divides by sqrt(D).
enum class AttentionScale { PerHead, FullWidth };

/// Multi-head scaled dot-product attention over projected inputs with heads
/// concatenated (no output projection).
///
/// q: [..., S, D]; k, v: [..., S_kv, D]; projections are [D, D] applied as
/// x . W. `key_mask`, when given, has shape [S_kv] or [prod(...), S_kv] and
/// removes keys from every query's softmax.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, const Tensor<T>& wq, const Tensor<T>& wk,
                               const Tensor<T>& wv, const std::optional<Mask>& key_mask = std::nullopt,
                               AttentionScale scaling = AttentionScale::PerHead) {
  const std::size_t D = q.dim(-1);
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("attention width " + std::to_string(D) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.dim(-1) != D || v.dim(-1) != D || k.dim(-2) != v.dim(-2)) {
    throw DimensionError("attention q/k/v shapes " + to_string(q.shape()) + " " +
                         to_string(k.shape()) + " " + to_string(v.shape()));
  }
  const std::size_t S = q.dim(-2), Skv = k.dim(-2), dh = D / heads;
  const std::size_t batch = q.numel() / (S * D);
  if (k.numel() / (Skv * D) != batch) throw DimensionError("attention batch extents differ");

  auto split = [&](const Tensor<T>& x, const Tensor<T>& w, std::size_t len) {
    auto p = reshape(matmul(x, w), {batch, len, heads, dh});
    return permute(p, {0, 2, 1, 3});  // [B, H, len, dh]
  };
  const auto Q = split(q, wq, S);
  const auto K = split(k, wk, Skv);
  const auto V = split(v, wv, Skv);

  const T denom = std::sqrt(static_cast<T>(scaling == AttentionScale::PerHead ? dh : D));
  auto logits = scale(matmul(Q, transpose(K)), T{1} / denom);  // [B, H, S, Skv]

  std::optional<Mask> m;
  if (key_mask) {
    const auto n = key_mask->keep.size();
    if (n == Skv) {
      m = Mask({1, 1, 1, Skv}, key_mask->keep);
    } else if (n == batch * Skv) {
      m = Mask({batch, 1, 1, Skv}, key_mask->keep);
    } else {
      throw DimensionError("attention key mask " + to_string(key_mask->shape) +
                           " does not match keys " + to_string(k.shape()));
    }
  }
  const auto probs = softmax(logits, -1, m);
  auto ctx = permute(matmul(probs, V), {0, 2, 1, 3});  // [B, S, H, dh]
  return reshape(ctx, q.shape());
}

}  // namespace mugstan
