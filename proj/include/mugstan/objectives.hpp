#pragma once

// Symmetric contrastive loss over a text x video similarity matrix and the
// recognition loss against fixed class-text embeddings.

#include <string>

#include "mugstan/ops.hpp"

namespace mugstan {

template <class T>
struct LossReport {
  Tensor<T> l_t2v;  // scalar
  Tensor<T> l_v2t;  // scalar
  Tensor<T> l_co;   // scalar, l_t2v + l_v2t
  std::size_t batch = 0;

  double t2v() const { return static_cast<double>(l_t2v.item()); }
  double v2t() const { return static_cast<double>(l_v2t.item()); }
  double total() const { return static_cast<double>(l_co.item()); }
};

/// sim[m, n] is the similarity of text m with video n; positives sit on the
/// diagonal. `logit_scale` multiplies every entry (scalar tensor, may be learnable).
template <class T>
LossReport<T> contrastive_loss(const Tensor<T>& sim, const Tensor<T>& logit_scale) {
  if (sim.rank() != 2 || sim.dim(0) != sim.dim(1)) {
    throw ContractError("contrastive loss needs a square similarity matrix, got " + to_string(sim.shape()));
  }
  if (logit_scale.numel() != 1 || !(logit_scale.item() > T{0})) {
    throw ContractError("contrastive loss needs a positive scalar logit scale");
  }
  const std::size_t B = sim.dim(0);
  const auto logits = mul(sim, reshape(logit_scale, {1, 1}));
  const auto diag = Tensor<T>::eye(B);
  const T inv = T{-1} / static_cast<T>(B);
  LossReport<T> r;
  r.batch = B;
  r.l_t2v = scale(sum_all(mul(log_softmax(logits, 1), diag)), inv);
  r.l_v2t = scale(sum_all(mul(log_softmax(logits, 0), diag)), inv);
  r.l_co = add(r.l_t2v, r.l_v2t);
  return r;
}

template <class T>
LossReport<T> contrastive_loss(const Tensor<T>& sim, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive loss needs tau > 0");
  return contrastive_loss(sim, Tensor<T>::scalar(static_cast<T>(tau)));
}

/// -log softmax(tau [v . c_1, ..., v . c_N])[label]. class_embeddings: [N, D].
template <class T>
Tensor<T> recognition_loss(const Tensor<T>& video, const Tensor<T>& class_embeddings, std::size_t label,
                           double tau) {
  if (class_embeddings.rank() != 2 || video.numel() != class_embeddings.dim(1)) {
    throw DimensionError("recognition loss: video " + to_string(video.shape()) + " vs classes " +
                         to_string(class_embeddings.shape()));
  }
  const std::size_t N = class_embeddings.dim(0);
  if (label >= N) {
    throw ContractError("label " + std::to_string(label) + " out of range for " + std::to_string(N) +
                        " classes");
  }
  if (!(tau > 0.0)) throw ContractError("recognition loss needs tau > 0");
  const auto logits = scale(matmul(reshape(video, {1, video.numel()}), transpose(class_embeddings)),
                            static_cast<T>(tau));
  const auto picked = slice(log_softmax(logits, 1), 1, label, 1);
  return scale(sum_all(picked), T{-1});
}

}  // namespace mugstan
