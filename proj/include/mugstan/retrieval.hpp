#pragma once

// Retrieval metrics from a text x video score matrix whose positives lie on
// the diagonal.

#include <algorithm>
#include <string>
#include <vector>

#include "mugstan/tensor.hpp"

namespace mugstan {

struct MetricsRecord {
  std::string name;
  std::int64_t seed = 0;
  double r1 = 0, r5 = 0, r10 = 0;  // percent
  double mdr = 0;                  // median rank
  double meanr = 0;
  double final_loss = 0;
  double wall_clock_s = 0;
  std::string config_hash;
  std::vector<double> loss_curve;

  bool operator==(const MetricsRecord&) const = default;
};

/// 1-based rank of the paired item for every query row. Higher score ranks
/// first; on equal scores the lower column index ranks first.
template <class T>
std::vector<std::size_t> diagonal_ranks(const Tensor<T>& scores) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
    throw ContractError("retrieval needs a square score matrix, got " + to_string(scores.shape()));
  }
  const std::size_t n = scores.dim(0);
  const auto s = scores.data();
  std::vector<std::size_t> ranks(n);
  for (std::size_t m = 0; m < n; ++m) {
    const T target = s[m * n + m];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T v = s[m * n + j];
      if (v > target || (v == target && j < m)) ++ahead;
    }
    ranks[m] = ahead + 1;
  }
  return ranks;
}

/// Median with the midpoint convention for even counts.
inline double median_rank(std::vector<std::size_t> ranks) {
  if (ranks.empty()) throw ContractError("median of an empty rank list");
  std::sort(ranks.begin(), ranks.end());
  const std::size_t n = ranks.size();
  return n % 2 ? static_cast<double>(ranks[n / 2]) : 0.5 * static_cast<double>(ranks[n / 2 - 1] + ranks[n / 2]);
}

inline MetricsRecord metrics_from_ranks(const std::vector<std::size_t>& ranks) {
  MetricsRecord r;
  const double n = static_cast<double>(ranks.size());
  auto recall = [&](std::size_t k) {
    return 100.0 * static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](auto x) { return x <= k; })) / n;
  };
  r.r1 = recall(1);
  r.r5 = recall(5);
  r.r10 = recall(10);
  r.mdr = median_rank(ranks);
  double sum = 0;
  for (auto x : ranks) sum += static_cast<double>(x);
  r.meanr = sum / n;
  return r;
}

/// Text-to-video metrics: row m of `scores` ranks every video for text m.
template <class T>
MetricsRecord retrieval_metrics(const Tensor<T>& scores) {
  return metrics_from_ranks(diagonal_ranks(scores));
}

}  // namespace mugstan
