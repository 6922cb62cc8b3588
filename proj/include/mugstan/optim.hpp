#pragma once

// AdamW with per-group learning rates.

#include <cmath>
#include <string>
#include <vector>

#include "mugstan/layers.hpp"

namespace mugstan {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

template <class T>
struct ParamGroup {
  std::string name;
  double lr = 1e-3;
  NamedTensors<T> params;
};

template <class T>
class AdamW {
 public:
  AdamW(std::vector<ParamGroup<T>> groups, AdamWConfig cfg = {}) : groups_(std::move(groups)), cfg_(cfg) {
    for (const auto& g : groups_) {
      if (!(g.lr >= 0)) throw ConfigError("learning rate of group '" + g.name + "' must be >= 0");
      for (const auto& [n, p] : g.params) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<ParamGroup<T>>& groups() const { return groups_; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& [n, p] : g.params) p.zero_grad();
  }

  /// One update from the gradients currently held by the parameters.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    for (auto& g : groups_) {
      for (auto& [name, p] : g.params) {
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        if (g.lr == 0 || !p.has_grad()) continue;
        auto w = p.mutable_data();
        const auto& gr = p.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = static_cast<double>(gr[i]);
          m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
          v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
          const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
          const double wi = static_cast<double>(w[i]);
          w[i] = static_cast<T>(wi - g.lr * (upd + cfg_.weight_decay * wi));
        }
        detail::check_finite(p.impl()->data, "AdamW update of " + name);
      }
    }
  }

 private:
  std::vector<ParamGroup<T>> groups_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mugstan
