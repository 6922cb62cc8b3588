#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string_view>

namespace mugstan {

using DiagnosticSink = std::function<void(std::string_view)>;

/// Process-wide warning sink; defaults to stderr. Set to an empty function to silence.
inline DiagnosticSink& diagnostic_sink() {
  static DiagnosticSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg) {
  static std::mutex mu;
  std::lock_guard lock(mu);
  if (auto& sink = diagnostic_sink()) sink(msg);
}

}  // namespace mugstan
