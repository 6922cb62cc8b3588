#pragma once

// Synthetic video-text pairs with known per-frame alignment, and the
// sigmoid-of-dot misalignment audit.
//
// Embedding mode emits frame and token embeddings directly (unit concept
// vector per pair; aligned frames are the concept plus noise, misaligned
// frames are distractors pointing slightly away from it). Feature mode emits
// raw patch features and token ids for end-to-end training through the encoders.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mugstan/embedding_io.hpp"
#include "mugstan/rng.hpp"

namespace mugstan {

enum class Category { Up = 0, Middle = 1, Bottom = 2 };

inline const char* category_name(Category c) {
  switch (c) {
    case Category::Up: return "up";
    case Category::Middle: return "middle";
    case Category::Bottom: return "bottom";
  }
  return "?";
}

inline Category parse_category(const std::string& s) {
  if (s == "up") return Category::Up;
  if (s == "middle") return Category::Middle;
  if (s == "bottom") return Category::Bottom;
  throw ConfigError("unknown category '" + s + "'");
}

/// Strict 1/3 - 2/3 rule on the aligned fraction, in integer arithmetic.
inline Category categorize(std::size_t aligned, std::size_t frames) {
  if (frames == 0) throw ContractError("categorize: zero frames");
  if (3 * aligned > 2 * frames) return Category::Up;
  if (3 * aligned < frames) return Category::Bottom;
  return Category::Middle;
}

/// Aligned-frame counts that realise `c` for T frames, as [lo, hi]; lo > hi when empty.
/// Bottom prefers at least one aligned frame when that still counts as bottom.
inline std::pair<std::size_t, std::size_t> aligned_range(Category c, std::size_t frames) {
  std::size_t lo = frames + 1, hi = 0;
  for (std::size_t a = 0; a <= frames; ++a) {
    if (categorize(a, frames) != c) continue;
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  if (c == Category::Bottom && lo == 0 && hi >= 1) lo = 1;
  return {lo, hi};
}

struct CategoryDistribution {
  double up = 1.0 / 3.0, middle = 1.0 / 3.0, bottom = 1.0 / 3.0;

  static CategoryDistribution only(Category c) {
    CategoryDistribution d{0, 0, 0};
    d.at(c) = 1.0;
    return d;
  }
  double& at(Category c) { return c == Category::Up ? up : c == Category::Middle ? middle : bottom; }
  double at(Category c) const { return c == Category::Up ? up : c == Category::Middle ? middle : bottom; }
};

enum class SynthMode { Embedding, Feature };

struct SynthConfig {
  std::size_t n_pairs = 64;
  std::size_t frames = 8;
  std::size_t tokens = 8;  // K_tok, padded length
  std::size_t dim = 32;    // embedding width (embedding mode)
  CategoryDistribution distribution;
  double noise_scale = 0.1;
  std::uint64_t seed = 7;
  SynthMode mode = SynthMode::Embedding;

  // Embedding mode.
  double token_noise = 0.3;          // noise on concept-derived tokens
  std::size_t fillers = 8;           // shared filler vectors / filler words
  double distractor_offset = 0.1;    // cosine of distractor frames with the concept is <= -offset
  std::size_t min_valid_tokens = 2;

  // Feature mode.
  std::size_t patches = 4;
  std::size_t d_in = 16;
  std::size_t distractor_patterns = 16;

  void validate() const {
    if (n_pairs == 0) throw ConfigError("synthetic corpus needs at least one pair");
    if (frames == 0 || tokens == 0) throw ConfigError("frames and tokens must be positive");
    const double total = distribution.up + distribution.middle + distribution.bottom;
    if (distribution.up < 0 || distribution.middle < 0 || distribution.bottom < 0 ||
        std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("category distribution must be nonnegative and sum to 1");
    }
    for (auto c : {Category::Up, Category::Middle, Category::Bottom}) {
      const auto [lo, hi] = aligned_range(c, frames);
      if (distribution.at(c) > 0 && lo > hi) {
        throw ConfigError(std::string("category '") + category_name(c) + "' is not realisable with " +
                          std::to_string(frames) + " frames");
      }
    }
    if (!(noise_scale >= 0) || !(token_noise >= 0)) throw ConfigError("noise scales must be >= 0");
    if (mode == SynthMode::Embedding) {
      if (dim < 2) throw ConfigError("embedding width must be at least 2");
      if (!(distractor_offset > 0 && distractor_offset < 1)) {
        throw ConfigError("distractor offset must lie in (0, 1)");
      }
      if (min_valid_tokens == 0 || min_valid_tokens > tokens) {
        throw ConfigError("min_valid_tokens must lie in [1, tokens]");
      }
    } else {
      if (tokens < 2) throw ConfigError("feature mode needs room for a concept word and EOS");
      if (patches == 0 || d_in == 0 || distractor_patterns == 0) {
        throw ConfigError("feature mode needs patches, d_in and distractor patterns");
      }
    }
  }

  /// Feature-mode vocabulary: 0 = padding, then fillers, concept words, EOS.
  std::size_t filler_id(std::size_t f) const { return 1 + f; }
  std::size_t concept_word(std::size_t c) const { return 1 + fillers + c; }
  std::size_t eos_id() const { return 1 + fillers + n_pairs; }
  std::size_t vocab_size() const { return eos_id() + 1; }
};

template <class T>
struct SynthPair {
  // Embedding mode.
  FrameSequence<T> video;  // [T, D]
  TokenSequence<T> text;   // [K_tok, D]
  // Feature mode.
  Tensor<T> frames;                    // [T, L, d_in]
  std::vector<std::size_t> token_ids;  // unpadded
  std::vector<std::uint8_t> aligned_mask;
  Category category = Category::Middle;
  std::size_t concept_id = 0;

  std::size_t aligned_count() const {
    return static_cast<std::size_t>(std::count(aligned_mask.begin(), aligned_mask.end(), 1));
  }
  EmbeddingPair<T> embedding() const { return {video, text}; }
};

namespace detail {

inline std::vector<double> unit_vector(std::size_t D, Rng& rng) {
  std::vector<double> v(D);
  double n2 = 0;
  while (n2 < 1e-12) {
    n2 = 0;
    for (auto& x : v) {
      x = rng.normal();
      n2 += x * x;
    }
  }
  const double n = std::sqrt(n2);
  for (auto& x : v) x /= n;
  return v;
}

/// Unit vector whose cosine with unit `c` is negative: random direction with
/// the `c` component removed, then pushed by -offset along `c`.
inline std::vector<double> distractor(const std::vector<double>& c, double offset, Rng& rng) {
  const std::size_t D = c.size();
  for (;;) {
    auto r = unit_vector(D, rng);
    const double along = std::inner_product(r.begin(), r.end(), c.begin(), 0.0);
    double n2 = 0;
    for (std::size_t d = 0; d < D; ++d) {
      r[d] -= along * c[d];
      n2 += r[d] * r[d];
    }
    if (n2 < 1e-12) continue;
    const double n = std::sqrt(n2);
    const double w = std::sqrt(1.0 - offset * offset);
    for (std::size_t d = 0; d < D; ++d) r[d] = w * r[d] / n - offset * c[d];
    return r;
  }
}

inline void add_noise(std::vector<double>& v, double scale_total, Rng& rng) {
  if (scale_total == 0) return;
  const double s = scale_total / std::sqrt(static_cast<double>(v.size()));
  for (auto& x : v) x += s * rng.normal();
}

template <class T>
Category draw_category(const CategoryDistribution& d, Rng& rng) {
  const double u = rng.uniform();
  if (u < d.up) return Category::Up;
  if (u < d.up + d.middle) return Category::Middle;
  // Guard against rounding when bottom has zero mass.
  if (d.bottom == 0) return d.middle > 0 ? Category::Middle : Category::Up;
  return Category::Bottom;
}

inline std::vector<std::uint8_t> draw_alignment(Category c, std::size_t frames, Rng& rng) {
  const auto [lo, hi] = aligned_range(c, frames);
  const std::size_t a = lo + rng.uniform_int(hi - lo + 1);
  std::vector<std::uint8_t> mask(frames, 0);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(a), 1);
  rng.shuffle(mask.begin(), mask.end());
  return mask;
}

template <class T>
Tensor<T> rows_tensor(const std::vector<std::vector<double>>& rows) {
  const std::size_t D = rows.front().size();
  std::vector<T> data;
  data.reserve(rows.size() * D);
  for (const auto& r : rows)
    for (double x : r) data.push_back(static_cast<T>(x));
  return Tensor<T>({rows.size(), D}, std::move(data));
}

}  // namespace detail

/// Deterministic in every field of `cfg` (seed included).
template <class T>
std::vector<SynthPair<T>> generate_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Rng shared = rng.fork();
  std::vector<SynthPair<T>> pairs;
  pairs.reserve(cfg.n_pairs);

  if (cfg.mode == SynthMode::Embedding) {
    std::vector<std::vector<double>> fillers;
    for (std::size_t f = 0; f < cfg.fillers; ++f) fillers.push_back(detail::unit_vector(cfg.dim, shared));
    for (std::size_t p = 0; p < cfg.n_pairs; ++p) {
      SynthPair<T> sp;
      sp.concept_id = p;
      sp.category = detail::draw_category<T>(cfg.distribution, rng);
      sp.aligned_mask = detail::draw_alignment(sp.category, cfg.frames, rng);
      const auto concept_vec = detail::unit_vector(cfg.dim, rng);

      std::vector<std::vector<double>> frames;
      for (std::size_t t = 0; t < cfg.frames; ++t) {
        auto f = sp.aligned_mask[t] ? concept_vec : detail::distractor(concept_vec, cfg.distractor_offset, rng);
        detail::add_noise(f, cfg.noise_scale, rng);
        frames.push_back(std::move(f));
      }
      sp.video.values = detail::rows_tensor<T>(frames);

      const std::size_t n_valid =
          cfg.min_valid_tokens + rng.uniform_int(cfg.tokens - cfg.min_valid_tokens + 1);
      std::vector<std::vector<double>> tokens;
      for (std::size_t j = 0; j + 1 < n_valid; ++j) {
        if (cfg.fillers > 0 && rng.uniform() < 0.5) {
          tokens.push_back(fillers[rng.uniform_int(cfg.fillers)]);
        } else {
          auto tok = concept_vec;
          detail::add_noise(tok, cfg.token_noise, rng);
          tokens.push_back(std::move(tok));
        }
      }
      tokens.push_back(concept_vec);  // summary token
      while (tokens.size() < cfg.tokens) tokens.push_back(std::vector<double>(cfg.dim, 0.0));
      sp.text.values = detail::rows_tensor<T>(tokens);
      sp.text.valid.assign(cfg.tokens, 0);
      std::fill(sp.text.valid.begin(), sp.text.valid.begin() + static_cast<std::ptrdiff_t>(n_valid), 1);
      sp.text.summary_index = n_valid - 1;
      pairs.push_back(std::move(sp));
    }
    return pairs;
  }

  // Feature mode.
  const std::size_t L = cfg.patches, Din = cfg.d_in;
  auto pattern = [&](Rng& r) {
    std::vector<double> v(L * Din);
    for (auto& x : v) x = r.normal();
    return v;
  };
  std::vector<std::vector<double>> distractors;
  for (std::size_t d = 0; d < cfg.distractor_patterns; ++d) distractors.push_back(pattern(shared));
  for (std::size_t p = 0; p < cfg.n_pairs; ++p) {
    SynthPair<T> sp;
    sp.concept_id = p;
    sp.category = detail::draw_category<T>(cfg.distribution, rng);
    sp.aligned_mask = detail::draw_alignment(sp.category, cfg.frames, rng);
    const auto concept_pattern = pattern(rng);
    std::vector<T> data;
    data.reserve(cfg.frames * L * Din);
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      const auto& base = sp.aligned_mask[t] ? concept_pattern : distractors[rng.uniform_int(distractors.size())];
      for (double x : base) data.push_back(static_cast<T>(x + cfg.noise_scale * rng.normal()));
    }
    sp.frames = Tensor<T>({cfg.frames, L, Din}, std::move(data));

    const std::size_t n_valid = 2 + rng.uniform_int(cfg.tokens - 1);  // concept word + EOS at least
    std::vector<std::size_t> ids;
    const std::size_t word_pos = rng.uniform_int(n_valid - 1);
    for (std::size_t j = 0; j + 1 < n_valid; ++j) {
      if (j == word_pos || cfg.fillers == 0) {
        ids.push_back(cfg.concept_word(p));
      } else {
        ids.push_back(cfg.filler_id(rng.uniform_int(cfg.fillers)));
      }
    }
    ids.push_back(cfg.eos_id());
    sp.token_ids = std::move(ids);
    pairs.push_back(std::move(sp));
  }
  return pairs;
}

// ---------------------------------------------------------------- audit

struct PairAudit {
  std::vector<double> probabilities;
  std::vector<std::uint8_t> flags;
  Category category = Category::Middle;
};

struct AuditReport {
  std::vector<PairAudit> pairs;
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> fractions{};

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pair_count"] = pairs.size();
    for (auto c : {Category::Up, Category::Middle, Category::Bottom}) {
      j["counts"][category_name(c)] = counts[static_cast<int>(c)];
      j["fractions"][category_name(c)] = fractions[static_cast<int>(c)];
    }
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : pairs) {
      j["pairs"].push_back({{"category", category_name(p.category)},
                            {"flags", p.flags},
                            {"probabilities", p.probabilities}});
    }
    return j;
  }
};

/// flag_i = sigmoid(scale * v_i . c) > threshold; inputs are expected to be unit rows.
template <class T>
PairAudit audit_alignment(const FrameSequence<T>& video, const Tensor<T>& text_global, double scale = 1.0,
                          double threshold = 0.5) {
  if (!(scale > 0)) throw ConfigError("audit scale must be positive");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("audit threshold must lie in (0, 1)");
  const auto& V = video.values;
  if (V.rank() != 2 || V.dim(1) != text_global.numel()) {
    throw DimensionError("audit: video " + to_string(V.shape()) + " vs text " + to_string(text_global.shape()));
  }
  const std::size_t Tn = V.dim(0), D = V.dim(1);
  PairAudit a;
  std::size_t aligned = 0;
  for (std::size_t t = 0; t < Tn; ++t) {
    double dot = 0;
    for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(V.data()[t * D + d]) * text_global.data()[d];
    const double p = 1.0 / (1.0 + std::exp(-scale * dot));
    a.probabilities.push_back(p);
    a.flags.push_back(p > threshold ? 1 : 0);
    aligned += a.flags.back();
  }
  a.category = categorize(aligned, Tn);
  return a;
}

/// Pass-through audit of embedding pairs: frames and the summary token are
/// unit-normalised, then audited pair by pair.
template <class T>
AuditReport audit_corpus(const std::vector<EmbeddingPair<T>>& pairs, double scale = 1.0,
                         double threshold = 0.5) {
  if (pairs.empty()) throw ContractError("audit: empty corpus");
  AuditReport r;
  for (const auto& p : pairs) {
    p.text.validate();
    const FrameSequence<T> v{l2_normalize(p.video.values)};
    const auto summary = l2_normalize(slice(p.text.values, 0, p.text.summary_index, 1));
    r.pairs.push_back(audit_alignment(v, summary, scale, threshold));
    ++r.counts[static_cast<int>(r.pairs.back().category)];
  }
  for (std::size_t c = 0; c < 3; ++c) r.fractions[c] = static_cast<double>(r.counts[c]) / pairs.size();
  return r;
}

template <class T>
AuditReport audit_corpus(const std::vector<SynthPair<T>>& pairs, double scale = 1.0, double threshold = 0.5) {
  std::vector<EmbeddingPair<T>> e;
  e.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!p.video.values.defined()) throw ContractError("audit: feature-mode pairs need an encoder");
    e.push_back(p.embedding());
  }
  return audit_corpus(e, scale, threshold);
}

}  // namespace mugstan
