#pragma once

// Mutual-guided cross-modal alignment.
//
// Frame-wise video embeddings V [T, D] and token-wise text embeddings C [K, D]
// are aggregated into one video and one text vector, each under guidance of
// the other modality:
//
//   S[i,j]  = softmax_j(tau c_j . v_i)          frame-to-token attention
//   cbar_i  = sum_j S[i,j] c_j                   frame-specific text
//   s~_i    = softmax_i(tau cbar_i . v_i)        frame weights
//   v~      = sum_i s~_i v_i                     text-guided video
//
//   S'[i,j] = softmax_i(tau c_j . v_i)          token-to-frame attention
//   vbar_j  = sum_i S'[i,j] v_i                  token-specific video
//   s~'_j   = softmax_j(tau c_j . vbar_j)        token weights
//   c~      = sum_j s~'_j c_j                    video-guided text
//
// The module has no parameters; padded tokens are excluded everywhere.

#include <algorithm>
#include <atomic>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mugstan/diagnostics.hpp"
#include "mugstan/encoders.hpp"

namespace mugstan {

enum class Granularity { FrameToken, FrameText, VideoToken };
enum class Selection { Softmax, TopK, Max };

/// Which softmaxes a hard selection replaces: every one of the four, or only
/// the two aggregation softmaxes (frame weights and token weights).
enum class SelectionScope { All, AggregationOnly };

struct MugConfig {
  double tau = 100.0;
  Granularity granularity = Granularity::FrameToken;
  Selection selection = Selection::Softmax;
  std::size_t top_k = 3;
  SelectionScope scope = SelectionScope::All;
  bool include_summary_token = true;
  // Per-softmax overrides of tau.
  std::optional<double> tau_frame_to_token, tau_frame_weights, tau_token_to_frame, tau_token_weights;

  double tau_s() const { return tau_frame_to_token.value_or(tau); }
  double tau_s_tilde() const { return tau_frame_weights.value_or(tau); }
  double tau_s_prime() const { return tau_token_to_frame.value_or(tau); }
  double tau_s_prime_tilde() const { return tau_token_weights.value_or(tau); }

  void validate() const {
    for (double t : {tau_s(), tau_s_tilde(), tau_s_prime(), tau_s_prime_tilde()}) {
      if (!(t > 0.0)) throw ConfigError("Mug tau must be positive");
    }
    if (selection == Selection::TopK && top_k == 0) throw ConfigError("top-k needs k >= 1");
  }

  std::size_t selected_k() const { return selection == Selection::Max ? 1 : top_k; }
};

template <class T>
struct MugResult {
  Tensor<T> v_tilde;        // [D]
  Tensor<T> c_tilde;        // [D]
  Tensor<T> S;              // [T, K] frame-to-token attention
  Tensor<T> s_tilde;        // [T]
  Tensor<T> S_prime;        // [T, K] token-to-frame attention
  Tensor<T> s_prime_tilde;  // [K]
  Tensor<T> similarity;     // scalar c~ . v~
};

namespace detail {

/// Mask for one softmax under the configured selection. `aggregation` marks
/// the frame-weight and token-weight softmaxes.
template <class T>
std::optional<Mask> selection_mask(const Tensor<T>& logits, int axis, const std::optional<Mask>& base,
                                   const MugConfig& cfg, bool aggregation) {
  if (cfg.selection == Selection::Softmax) return base;
  if (!aggregation && cfg.scope == SelectionScope::AggregationOnly) return base;
  bool clamped = false;
  Mask m = topk_mask(logits, axis, cfg.selected_k(), base, &clamped);
  if (clamped) {
    warn("top-k: k = " + std::to_string(cfg.selected_k()) +
         " exceeds the number of valid entries; clamped");
  }
  return m;
}

}  // namespace detail

/// Token positions that take part in Mug (valid, minus the summary token when excluded).
template <class T>
std::vector<std::uint8_t> mug_token_mask(const TokenSequence<T>& c, const MugConfig& cfg) {
  auto keep = c.valid;
  if (!cfg.include_summary_token && c.summary_index < keep.size()) keep[c.summary_index] = 0;
  if (std::none_of(keep.begin(), keep.end(), [](auto v) { return v != 0; })) {
    throw DegenerateSliceError("Mug: no valid text token");
  }
  return keep;
}

/// Unit-normalises every frame row and every valid token row. Padded rows become zero.
template <class T>
std::pair<FrameSequence<T>, TokenSequence<T>> normalize_inputs(const FrameSequence<T>& v,
                                                               const TokenSequence<T>& c) {
  TokenSequence<T> cn = c;
  cn.values = l2_normalize(c.values, &c.valid);
  return {FrameSequence<T>{l2_normalize(v.values)}, cn};
}

/// S = row-softmax over valid tokens of tau V C^T.
template <class T>
Tensor<T> frame_token_attention(const Tensor<T>& V, const Tensor<T>& C,
                                const std::vector<std::uint8_t>& token_mask, const MugConfig& cfg) {
  const auto K = C.dim(0);
  if (token_mask.size() != K) throw DimensionError("token mask length differs from token count");
  auto logits = scale(matmul(V, transpose(C)), static_cast<T>(cfg.tau_s()));
  const Mask base({1, K}, token_mask);
  return softmax(logits, -1, detail::selection_mask(logits, -1, std::optional<Mask>(base), cfg, false));
}

/// cbar_i = sum_j S[i,j] c_j.
template <class T>
Tensor<T> frame_specific_text(const Tensor<T>& S, const Tensor<T>& C) {
  return matmul(S, C);
}

template <class T>
struct GuidedVideo {
  Tensor<T> v_tilde;  // [D]
  Tensor<T> s_tilde;  // [T]
  Tensor<T> S;        // [T, K]
};

/// Text-guided video embedding. Inputs must already be normalised.
template <class T>
GuidedVideo<T> text_guided_video(const Tensor<T>& V, const Tensor<T>& C,
                                 const std::vector<std::uint8_t>& token_mask, const MugConfig& cfg) {
  GuidedVideo<T> out;
  out.S = frame_token_attention(V, C, token_mask, cfg);
  const auto cbar = frame_specific_text(out.S, C);                                    // [T, D]
  auto logits = scale(sum(mul(cbar, V), -1), static_cast<T>(cfg.tau_s_tilde()));      // [T]
  out.s_tilde = softmax(logits, 0, detail::selection_mask(logits, 0, std::nullopt, cfg, true));
  out.v_tilde = reshape(matmul(reshape(out.s_tilde, {1, V.dim(0)}), V), {V.dim(1)});
  return out;
}

template <class T>
struct GuidedText {
  Tensor<T> c_tilde;        // [D]
  Tensor<T> s_prime_tilde;  // [K]
  Tensor<T> S_prime;        // [T, K]
};

/// Video-guided text embedding. Inputs must already be normalised.
template <class T>
GuidedText<T> video_guided_text(const Tensor<T>& V, const Tensor<T>& C,
                                const std::vector<std::uint8_t>& token_mask, const MugConfig& cfg) {
  const std::size_t K = C.dim(0), D = C.dim(1);
  if (token_mask.size() != K) throw DimensionError("token mask length differs from token count");
  if (std::none_of(token_mask.begin(), token_mask.end(), [](auto v) { return v != 0; })) {
    throw DegenerateSliceError("video_guided_text: every token masked");
  }
  GuidedText<T> out;
  auto logits = scale(matmul(V, transpose(C)), static_cast<T>(cfg.tau_s_prime()));  // [T, K]
  out.S_prime = softmax(logits, 0, detail::selection_mask(logits, 0, std::nullopt, cfg, false));
  const auto vbar = matmul(transpose(out.S_prime), V);                               // [K, D]
  auto tlogits = scale(sum(mul(C, vbar), -1), static_cast<T>(cfg.tau_s_prime_tilde()));
  const Mask base({K}, token_mask);
  out.s_prime_tilde =
      softmax(tlogits, 0, detail::selection_mask(tlogits, 0, std::optional<Mask>(base), cfg, true));
  out.c_tilde = reshape(matmul(reshape(out.s_prime_tilde, {1, K}), C), {D});
  return out;
}

/// Full Mug on one video-text pair, including normalisation of the inputs.
template <class T>
MugResult<T> mug_similarity(const FrameSequence<T>& video, const TokenSequence<T>& text,
                            const MugConfig& cfg) {
  cfg.validate();
  text.validate();
  if (video.values.rank() != 2 || video.values.dim(1) != text.values.dim(1)) {
    throw DimensionError("Mug: video " + to_string(video.values.shape()) + " vs text " +
                         to_string(text.values.shape()));
  }
  const auto [vn, cn] = normalize_inputs(video, text);
  const auto mask = mug_token_mask(cn, cfg);
  const auto& V = vn.values;
  const auto& C = cn.values;

  auto gv = text_guided_video(V, C, mask, cfg);
  auto gt = video_guided_text(V, C, mask, cfg);
  MugResult<T> r;
  r.S = gv.S;
  r.s_tilde = gv.s_tilde;
  r.S_prime = gt.S_prime;
  r.s_prime_tilde = gt.s_prime_tilde;
  r.v_tilde = gv.v_tilde;
  r.c_tilde = gt.c_tilde;
  if (cfg.granularity == Granularity::FrameText) {
    r.c_tilde = reshape(slice(C, 0, cn.summary_index, 1), {C.dim(1)});
  } else if (cfg.granularity == Granularity::VideoToken) {
    r.v_tilde = reshape(mean(V, 0), {V.dim(1)});
  }
  r.similarity = sum_all(mul(r.v_tilde, r.c_tilde));
  return r;
}

// ---------------------------------------------------------------- batched

/// Padded batch of frame sequences: values [B, T, D] with a frame mask.
template <class T>
struct FrameBatch {
  Tensor<T> values;
  std::vector<std::uint8_t> valid;  // [B * T]; empty means every frame is valid

  std::size_t batch() const { return values.dim(0); }
  std::size_t frames() const { return values.dim(1); }
};

template <class T>
FrameBatch<T> stack_frames(const std::vector<FrameSequence<T>>& videos) {
  if (videos.empty()) throw ContractError("empty video batch");
  const std::size_t D = videos.front().values.dim(-1);
  std::size_t Tmax = 0;
  for (const auto& v : videos) {
    if (v.values.rank() != 2 || v.values.dim(1) != D) throw DimensionError("ragged video widths");
    Tmax = std::max(Tmax, v.values.dim(0));
  }
  FrameBatch<T> b;
  std::vector<Tensor<T>> rows;
  bool ragged = false;
  for (const auto& v : videos) {
    const std::size_t Tn = v.values.dim(0);
    auto x = v.values;
    if (Tn < Tmax) {
      ragged = true;
      x = concat<T>({x, Tensor<T>::zeros({Tmax - Tn, D})}, 0);
    }
    rows.push_back(reshape(x, {1, Tmax, D}));
    for (std::size_t t = 0; t < Tmax; ++t) b.valid.push_back(t < Tn ? 1 : 0);
  }
  if (!ragged) b.valid.clear();
  b.values = concat<T>(rows, 0);
  return b;
}

template <class T>
TextBatch<T> stack_texts(const std::vector<TokenSequence<T>>& texts) {
  if (texts.empty()) throw ContractError("empty text batch");
  const std::size_t D = texts.front().values.dim(-1);
  std::size_t Kmax = 0;
  for (const auto& t : texts) {
    t.validate();
    if (t.values.dim(1) != D) throw DimensionError("ragged text widths");
    Kmax = std::max(Kmax, t.values.dim(0));
  }
  TextBatch<T> b;
  std::vector<Tensor<T>> rows;
  for (const auto& t : texts) {
    const std::size_t K = t.values.dim(0);
    auto x = t.values;
    if (K < Kmax) x = concat<T>({x, Tensor<T>::zeros({Kmax - K, D})}, 0);
    rows.push_back(reshape(x, {1, Kmax, D}));
    for (std::size_t j = 0; j < Kmax; ++j) b.valid.push_back(j < K ? t.valid[j] : 0);
    b.summary_index.push_back(t.summary_index);
  }
  b.values = concat<T>(rows, 0);
  return b;
}

namespace detail {

template <class T>
Tensor<T> one_hot_rows(const std::vector<std::size_t>& idx, std::size_t n) {
  auto t = Tensor<T>::zeros({idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r) t.mutable_data()[r * n + idx[r]] = T{1};
  return t;
}

/// Mug similarity block for every (text, video) combination of two batches of
/// already normalised inputs. Returns [Bt, Bv].
template <class T>
Tensor<T> mug_block(const FrameBatch<T>& videos, const TextBatch<T>& texts,
                    const std::vector<std::uint8_t>& token_keep, const MugConfig& cfg) {
  const std::size_t Bv = videos.batch(), Tn = videos.frames(), D = videos.values.dim(-1);
  const std::size_t Bt = texts.batch(), K = texts.tokens();
  const auto V = reshape(videos.values, {1, Bv, Tn, D});
  const auto C = reshape(texts.values, {Bt, 1, K, D});
  const auto Ct = reshape(transpose(texts.values), {Bt, 1, D, K});

  const Mask tok_row({Bt, 1, 1, K}, token_keep);  // masks the token axis of [Bt, Bv, T, K]
  std::optional<Mask> frame_col, frame_vec;
  if (!videos.valid.empty()) {
    frame_col = Mask({1, Bv, Tn, 1}, videos.valid);
    frame_vec = Mask({1, Bv, Tn}, videos.valid);
  }

  const auto dots = matmul(V, Ct);  // [Bt, Bv, T, K]

  // Text-guided video.
  auto l12 = scale(dots, static_cast<T>(cfg.tau_s()));
  auto S = softmax(l12, -1, selection_mask(l12, -1, std::optional<Mask>(tok_row), cfg, false));
  auto cbar = matmul(S, C);                                                       // [Bt, Bv, T, D]
  auto l14 = scale(sum(mul(cbar, V), -1), static_cast<T>(cfg.tau_s_tilde()));    // [Bt, Bv, T]
  auto s_tilde = softmax(l14, -1, selection_mask(l14, -1, frame_vec, cfg, true));
  Tensor<T> v_tilde = matmul(reshape(s_tilde, {Bt, Bv, 1, Tn}), V);              // [Bt, Bv, 1, D]

  // Video-guided text.
  auto l16 = scale(dots, static_cast<T>(cfg.tau_s_prime()));
  auto Sp = softmax(l16, -2, selection_mask(l16, -2, frame_col, cfg, false));
  auto vbar = matmul(transpose(Sp), V);                                            // [Bt, Bv, K, D]
  auto l18 = scale(sum(mul(vbar, C), -1), static_cast<T>(cfg.tau_s_prime_tilde()));  // [Bt, Bv, K]
  const Mask tok_vec({Bt, 1, K}, token_keep);
  auto sp_tilde = softmax(l18, -1, selection_mask(l18, -1, std::optional<Mask>(tok_vec), cfg, true));
  Tensor<T> c_tilde = matmul(reshape(sp_tilde, {Bt, Bv, 1, K}), C);               // [Bt, Bv, 1, D]

  if (cfg.granularity == Granularity::FrameText) {
    auto pick = reshape(one_hot_rows<T>(texts.summary_index, K), {Bt, 1, 1, K});
    c_tilde = matmul(pick, C);  // [Bt, 1, 1, D]
  } else if (cfg.granularity == Granularity::VideoToken) {
    if (videos.valid.empty()) {
      v_tilde = mean(V, -2, true);  // [1, Bv, 1, D]
    } else {
      std::vector<T> w(Bv * Tn);
      for (std::size_t b = 0; b < Bv; ++b) {
        std::size_t n = 0;
        for (std::size_t t = 0; t < Tn; ++t) n += videos.valid[b * Tn + t];
        for (std::size_t t = 0; t < Tn; ++t) w[b * Tn + t] = videos.valid[b * Tn + t] ? T{1} / T(n) : T{0};
      }
      v_tilde = matmul(Tensor<T>({1, Bv, 1, Tn}, std::move(w)), V);
    }
  }
  return reshape(sum(mul(v_tilde, c_tilde), -1), {Bt, Bv});
}

template <class T>
std::vector<std::uint8_t> batch_token_keep(const TextBatch<T>& texts, const MugConfig& cfg) {
  auto keep = texts.valid;
  const std::size_t K = texts.tokens();
  for (std::size_t b = 0; b < texts.batch(); ++b) {
    if (!cfg.include_summary_token) keep[b * K + texts.summary_index[b]] = 0;
    bool any = false;
    for (std::size_t j = 0; j < K; ++j) any = any || keep[b * K + j];
    if (!any) throw DegenerateSliceError("Mug: text " + std::to_string(b) + " has no valid token");
  }
  return keep;
}

template <class T>
TextBatch<T> text_rows(const TextBatch<T>& texts, std::size_t start, std::size_t len) {
  TextBatch<T> out;
  const std::size_t K = texts.tokens();
  out.values = slice(texts.values, 0, start, len);
  out.valid.assign(texts.valid.begin() + static_cast<std::ptrdiff_t>(start * K),
                   texts.valid.begin() + static_cast<std::ptrdiff_t>((start + len) * K));
  out.summary_index.assign(texts.summary_index.begin() + static_cast<std::ptrdiff_t>(start),
                           texts.summary_index.begin() + static_cast<std::ptrdiff_t>(start + len));
  return out;
}

}  // namespace detail

template <class T>
FrameBatch<T> normalize_frames(const FrameBatch<T>& v) {
  FrameBatch<T> out = v;
  out.values = l2_normalize(v.values, v.valid.empty() ? nullptr : &v.valid);
  return out;
}

template <class T>
TextBatch<T> normalize_texts(const TextBatch<T>& c) {
  TextBatch<T> out = c;
  out.values = l2_normalize(c.values, &c.valid);
  return out;
}

struct PairwiseOptions {
  std::size_t chunk = 0;    // texts per block; 0 = all at once
  std::size_t workers = 1;  // threads; forced to 1 while a tape is recording
};

/// Entry (m, n) = Mug similarity of text m with video n. Texts are split into
/// blocks of `chunk` rows, optionally evaluated on worker threads. Every cell is
/// computed independently, so the result does not depend on chunking.
template <class T>
Tensor<T> pairwise_mug_matrix(const FrameBatch<T>& videos, const TextBatch<T>& texts,
                              const MugConfig& cfg, PairwiseOptions opt = {}) {
  cfg.validate();
  if (videos.values.dim(-1) != texts.values.dim(-1)) throw DimensionError("Mug: width mismatch");
  const auto vn = normalize_frames(videos);
  const auto cn = normalize_texts(texts);
  const auto keep = detail::batch_token_keep(cn, cfg);
  const std::size_t Bt = cn.batch(), K = cn.tokens();
  const std::size_t chunk = opt.chunk == 0 ? Bt : std::min(opt.chunk, Bt);
  const std::size_t nchunks = (Bt + chunk - 1) / chunk;

  auto block = [&](std::size_t c) {
    const std::size_t start = c * chunk, len = std::min(chunk, Bt - start);
    std::vector<std::uint8_t> k(keep.begin() + static_cast<std::ptrdiff_t>(start * K),
                                keep.begin() + static_cast<std::ptrdiff_t>((start + len) * K));
    return detail::mug_block(vn, detail::text_rows(cn, start, len), k, cfg);
  };

  std::vector<Tensor<T>> blocks(nchunks);
  const bool recording = Tape<T>::active() != nullptr;
  const std::size_t workers = recording ? 1 : std::max<std::size_t>(1, std::min(opt.workers, nchunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < nchunks; ++c) blocks[c] = block(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c; (c = next.fetch_add(1)) < nchunks;) blocks[c] = block(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return nchunks == 1 ? blocks.front() : concat<T>(blocks, 0);
}

template <class T>
Tensor<T> pairwise_mug_matrix(const std::vector<FrameSequence<T>>& videos,
                              const std::vector<TokenSequence<T>>& texts, const MugConfig& cfg,
                              PairwiseOptions opt = {}) {
  return pairwise_mug_matrix(stack_frames(videos), stack_texts(texts), cfg, opt);
}

/// Pooling baselines without cross-modal guidance.
enum class Pooling { MeanPool, ClsPool };

/// Entry (m, n) = mean(normalised frames of n) . text embedding of m, where
/// the text side is the mean of valid normalised tokens (MeanPool) or the
/// normalised summary token (ClsPool).
template <class T>
Tensor<T> pooled_similarity_matrix(const FrameBatch<T>& videos, const TextBatch<T>& texts,
                                   Pooling pooling) {
  const auto vn = normalize_frames(videos);
  const auto cn = normalize_texts(texts);
  const std::size_t Bv = vn.batch(), Tn = vn.frames(), D = vn.values.dim(-1);
  const std::size_t Bt = cn.batch(), K = cn.tokens();
  std::vector<T> wv(Bv * Tn);
  for (std::size_t b = 0; b < Bv; ++b) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < Tn; ++t) n += vn.valid.empty() ? 1 : vn.valid[b * Tn + t];
    for (std::size_t t = 0; t < Tn; ++t)
      wv[b * Tn + t] = (vn.valid.empty() || vn.valid[b * Tn + t]) ? T{1} / T(n) : T{0};
  }
  std::vector<T> wt(Bt * K, T{0});
  for (std::size_t b = 0; b < Bt; ++b) {
    if (pooling == Pooling::ClsPool) {
      wt[b * K + cn.summary_index[b]] = T{1};
      continue;
    }
    std::size_t n = 0;
    for (std::size_t j = 0; j < K; ++j) n += cn.valid[b * K + j];
    for (std::size_t j = 0; j < K; ++j) wt[b * K + j] = cn.valid[b * K + j] ? T{1} / T(n) : T{0};
  }
  auto vbar = reshape(matmul(Tensor<T>({Bv, 1, Tn}, std::move(wv)), vn.values), {Bv, D});
  auto cbar = reshape(matmul(Tensor<T>({Bt, 1, K}, std::move(wt)), cn.values), {Bt, D});
  return matmul(cbar, transpose(vbar));
}

}  // namespace mugstan
