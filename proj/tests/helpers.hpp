#pragma once

#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "mugstan/mugstan.hpp"
#include "oracles.hpp"

namespace testing_util {

using mugstan::Tensor;
using Td = Tensor<double>;

inline oracle::Mat to_mat(const Td& t) {
  return oracle::Mat(t.dim(0), t.dim(1), oracle::Vec(t.data().begin(), t.data().end()));
}

inline Td from_mat(const oracle::Mat& m) { return Td({m.rows, m.cols}, m.v); }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Td& a, const Td& b) {
  EXPECT_EQ(a.shape(), b.shape());
  return max_abs_diff(a.data(), b.data());
}

/// Captures warnings for the lifetime of the object.
struct WarningCapture {
  std::vector<std::string> messages;
  mugstan::DiagnosticSink previous;
  WarningCapture() : previous(mugstan::diagnostic_sink()) {
    mugstan::diagnostic_sink() = [this](std::string_view m) { messages.emplace_back(m); };
  }
  ~WarningCapture() { mugstan::diagnostic_sink() = previous; }
};

/// Random token sequence with the first `valid` rows valid and the summary last.
inline mugstan::TokenSequence<double> random_tokens(std::size_t K, std::size_t valid, std::size_t D,
                                                    mugstan::Rng& rng) {
  mugstan::TokenSequence<double> c;
  c.values = mugstan::randn<double>({K, D}, rng);
  c.valid.assign(K, 0);
  for (std::size_t j = 0; j < valid; ++j) c.valid[j] = 1;
  c.summary_index = valid - 1;
  return c;
}

inline mugstan::FrameSequence<double> random_frames(std::size_t T, std::size_t D, mugstan::Rng& rng) {
  return {mugstan::randn<double>({T, D}, rng)};
}

}  // namespace testing_util
