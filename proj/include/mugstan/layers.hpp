#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mugstan/attention.hpp"

namespace mugstan {

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
Tensor<T> param(Shape shape, Rng& rng, double stddev) {
  return randn<T>(std::move(shape), rng, stddev, true);
}

template <class T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <class T>
Tensor<T> ones_param(Shape shape) {
  return Tensor<T>::full(std::move(shape), T{1}, true);
}

/// Affine map x . W (+ b), W: [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer has no bias

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(param<T>({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))) {
    if (with_bias) bias = zeros_param<T>({out});
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }

  Linear clone() const {
    Linear l;
    l.weight = weight.clone();
    if (bias.defined()) l.bias = bias.clone();
    return l;
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(ones_param<T>({d})), beta(zeros_param<T>({d})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }

  LayerNorm clone() const {
    LayerNorm l;
    l.gamma = gamma.clone();
    l.beta = beta.clone();
    return l;
  }
};

/// Pre-norm transformer block: x + Attn(LN(x)) W_o, then x + MLP(LN(x)).
/// Attention runs over axis -2; all leading axes are independent batches.
template <class T>
struct TransformerBlock {
  std::size_t heads = 1;
  AttentionScale scaling = AttentionScale::PerHead;
  LayerNorm<T> ln1, ln2;
  Tensor<T> wq, wk, wv;
  Linear<T> out_proj, fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t heads_, std::size_t mlp_ratio, Rng& rng,
                   AttentionScale scaling_ = AttentionScale::PerHead)
      : heads(heads_), scaling(scaling_), ln1(width), ln2(width) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("block width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    wq = param<T>({width, width}, rng, s);
    wk = param<T>({width, width}, rng, s);
    wv = param<T>({width, width}, rng, s);
    out_proj = Linear<T>(width, width, rng, false);
    fc1 = Linear<T>(width, width * mlp_ratio, rng);
    fc2 = Linear<T>(width * mlp_ratio, width, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, const std::optional<Mask>& key_mask = std::nullopt) const {
    auto h = ln1(x);
    auto a = multi_head_attention(h, h, h, heads, wq, wk, wv, key_mask, scaling);
    auto y = add(x, out_proj(a));
    return add(y, fc2(gelu(fc1(ln2(y)))));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    ln1.collect(prefix + ".ln1", out);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out_proj.collect(prefix + ".out_proj", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }

  TransformerBlock clone() const {
    TransformerBlock b;
    b.heads = heads;
    b.scaling = scaling;
    b.ln1 = ln1.clone();
    b.ln2 = ln2.clone();
    b.wq = wq.clone();
    b.wk = wk.clone();
    b.wv = wv.clone();
    b.out_proj = out_proj.clone();
    b.fc1 = fc1.clone();
    b.fc2 = fc2.clone();
    return b;
  }
};

}  // namespace mugstan
