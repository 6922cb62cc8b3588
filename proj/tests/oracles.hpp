#pragma once

// Straightforward loop implementations used as independent references.
// Matrices are row-major std::vector<double> with explicit extents.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  Mat(std::size_t r, std::size_t c, Vec data) : rows(r), cols(c), v(std::move(data)) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  Vec row(std::size_t i) const { return Vec(v.begin() + i * cols, v.begin() + (i + 1) * cols); }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Softmax over the entries with keep[i] != 0; others get 0.
inline Vec softmax(const Vec& x, const std::vector<std::uint8_t>& keep = {}) {
  Vec out(x.size(), 0.0);
  double mx = -INFINITY;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (keep.empty() || keep[i]) mx = std::max(mx, x[i]);
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (keep.empty() || keep[i]) s += std::exp(x[i] - mx);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (keep.empty() || keep[i]) out[i] = std::exp(x[i] - mx) / s;
  return out;
}

inline Vec normalize(const Vec& x) {
  const double n = std::sqrt(dot(x, x));
  Vec o(x);
  for (auto& v : o) v /= n;
  return o;
}

inline Vec layer_norm(const Vec& x, const Vec& g, const Vec& b, double eps = 1e-5) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec o(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return o;
}

/// Multi-head attention by explicit loops over heads, queries and keys.
inline Mat attention(const Mat& x, const Mat& wq, const Mat& wk, const Mat& wv, std::size_t heads,
                     const std::vector<std::uint8_t>& key_keep = {}) {
  const Mat q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  const std::size_t S = x.rows, D = wq.cols, dh = D / heads;
  Mat out(S, D);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < S; ++i) {
      Vec logits(S);
      for (std::size_t j = 0; j < S; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < dh; ++d) s += q(i, h * dh + d) * k(j, h * dh + d);
        logits[j] = s / std::sqrt(static_cast<double>(dh));
      }
      const Vec w = softmax(logits, key_keep);
      for (std::size_t d = 0; d < dh; ++d) {
        double s = 0;
        for (std::size_t j = 0; j < S; ++j) s += w[j] * v(j, h * dh + d);
        out(i, h * dh + d) = s;
      }
    }
  return out;
}

struct MugRef {
  Vec v_tilde, c_tilde, s_tilde, s_prime_tilde;
  Mat S, S_prime;
  double similarity = 0;
};

/// Mutual-guided aggregation written out loop by loop. V: [T, D], C: [K, D]
/// (both already unit rows for valid entries), keep: valid tokens.
inline MugRef mug(const Mat& V, const Mat& C, const std::vector<std::uint8_t>& keep, double tau) {
  const std::size_t T = V.rows, K = C.rows, D = V.cols;
  MugRef r;
  r.S = Mat(T, K);
  for (std::size_t i = 0; i < T; ++i) {
    Vec logits(K);
    for (std::size_t j = 0; j < K; ++j) logits[j] = tau * dot(C.row(j), V.row(i));
    const Vec p = softmax(logits, keep);
    for (std::size_t j = 0; j < K; ++j) r.S(i, j) = p[j];
  }
  Vec frame_logits(T);
  for (std::size_t i = 0; i < T; ++i) {
    Vec cbar(D, 0.0);
    for (std::size_t j = 0; j < K; ++j)
      for (std::size_t d = 0; d < D; ++d) cbar[d] += r.S(i, j) * C(j, d);
    frame_logits[i] = tau * dot(cbar, V.row(i));
  }
  r.s_tilde = softmax(frame_logits);
  r.v_tilde.assign(D, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t d = 0; d < D; ++d) r.v_tilde[d] += r.s_tilde[i] * V(i, d);

  r.S_prime = Mat(T, K);
  for (std::size_t j = 0; j < K; ++j) {
    Vec logits(T);
    for (std::size_t i = 0; i < T; ++i) logits[i] = tau * dot(C.row(j), V.row(i));
    const Vec p = softmax(logits);
    for (std::size_t i = 0; i < T; ++i) r.S_prime(i, j) = keep[j] ? p[i] : 0.0;
  }
  Vec token_logits(K, 0.0);
  for (std::size_t j = 0; j < K; ++j) {
    Vec vbar(D, 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t d = 0; d < D; ++d) vbar[d] += r.S_prime(i, j) * V(i, d);
    token_logits[j] = tau * dot(C.row(j), vbar);
  }
  r.s_prime_tilde = softmax(token_logits, keep);
  r.c_tilde.assign(D, 0.0);
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t d = 0; d < D; ++d) r.c_tilde[d] += r.s_prime_tilde[j] * C(j, d);
  r.similarity = dot(r.v_tilde, r.c_tilde);
  return r;
}

/// Symmetric InfoNCE with diagonal positives.
inline std::pair<double, double> contrastive(const Mat& sim, double tau) {
  const std::size_t B = sim.rows;
  double t2v = 0, v2t = 0;
  for (std::size_t m = 0; m < B; ++m) {
    double s = 0;
    for (std::size_t n = 0; n < B; ++n) s += std::exp(tau * sim(m, n));
    t2v -= std::log(std::exp(tau * sim(m, m)) / s);
  }
  for (std::size_t n = 0; n < B; ++n) {
    double s = 0;
    for (std::size_t m = 0; m < B; ++m) s += std::exp(tau * sim(m, n));
    v2t -= std::log(std::exp(tau * sim(n, n)) / s);
  }
  return {t2v / B, v2t / B};
}

/// Ranks by sorting (score descending, index ascending) and locating the target.
inline std::vector<std::size_t> sorted_ranks(const Mat& scores) {
  std::vector<std::size_t> ranks;
  for (std::size_t m = 0; m < scores.rows; ++m) {
    std::vector<std::size_t> order(scores.cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores(m, a) > scores(m, b); });
    ranks.push_back(static_cast<std::size_t>(std::find(order.begin(), order.end(), m) - order.begin()) + 1);
  }
  return ranks;
}

/// FNV-1a over values printed with 9 significant digits.
inline std::string checksum(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[40];
  for (double v : values) {
    const int n = std::snprintf(buf, sizeof buf, "%.9g;", v == 0.0 ? 0.0 : v);
    for (int i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace oracle
