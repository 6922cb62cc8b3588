#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mugstan/ops.hpp"

namespace mugstan {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor>[<flat index>]"
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

/// Finite-difference rule. FivePoint has O(h^4) truncation error, which allows
/// larger steps on sharply curved losses where roundoff limits Central.
enum class Stencil { Central, FivePoint };

/// Compares reverse-mode gradients of a scalar loss against finite
/// differences on `samples` randomly chosen coordinates spread over `params`.
/// Parameters are perturbed in place and restored.
template <class T>
GradCheckResult grad_check_params(const std::function<Tensor<T>()>& loss_fn,
                                  std::vector<std::pair<std::string, Tensor<T>>> params, T h,
                                  std::size_t samples, Rng& rng, Stencil stencil = Stencil::Central) {
  if (params.empty()) throw ContractError("grad_check: no parameters");
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      typename Tape<T>::Scope scope(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
  }

  auto eval = [&] {
    typename Tape<T>::Pause pause;
    return static_cast<double>(loss_fn().item());
  };

  GradCheckResult res;
  for (std::size_t s = 0; s < samples; ++s) {
    auto& [name, p] = params[rng.uniform_int(params.size())];
    const std::size_t i = rng.uniform_int(p.numel());
    const std::string where = name + "[" + std::to_string(i) + "]";
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()[i]) : 0.0;
    const T saved = p.data()[i];
    auto at = [&](T offset) {
      p.mutable_data()[i] = saved + offset;
      return eval();
    };
    double numeric;
    try {
      const double hd = static_cast<double>(h);
      if (stencil == Stencil::Central) {
        numeric = (at(h) - at(-h)) / (2.0 * hd);
      } else {
        numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * hd);
      }
    } catch (const NumericError& e) {
      p.mutable_data()[i] = saved;
      throw NumericError("grad_check at " + where + ": " + e.what());
    }
    p.mutable_data()[i] = saved;
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
      throw NumericError("grad_check: non-finite derivative at " + where);
    }
    const double err = detail::rel_error(analytic, numeric);
    ++res.checked;
    if (err >= res.max_rel_error) {
      res.max_rel_error = err;
      res.worst = where;
    }
  }
  return res;
}

/// Gradient check of a tensor function at x. Non-scalar outputs are reduced
/// with fixed random weights so every output coordinate contributes.
/// `samples == 0` checks every coordinate of x.
template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& x, T h,
                  std::size_t samples = 0, std::uint64_t seed = 7) {
  Tensor<T> input = x.clone();
  input.set_requires_grad(true);
  Tensor<T> weights;
  {
    typename Tape<T>::Pause pause;
    const auto probe = fn(input);
    Rng wrng(seed);
    weights = probe.numel() == 1 ? Tensor<T>::ones(probe.shape())
                                 : rand_uniform<T>(probe.shape(), wrng, 0.5, 1.5);
  }
  auto loss_fn = [&] { return sum_all(mul(fn(input), weights)); };

  if (samples == 0) {
    input.zero_grad();
    {
      Tape<T> tape;
      Tensor<T> loss;
      {
        typename Tape<T>::Scope scope(tape);
        loss = loss_fn();
      }
      tape.backward(loss);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < input.numel(); ++i) {
      const double analytic = input.has_grad() ? static_cast<double>(input.grad()[i]) : 0.0;
      const T saved = input.data()[i];
      double fp, fm;
      {
        typename Tape<T>::Pause pause;
        try {
          input.mutable_data()[i] = saved + h;
          fp = static_cast<double>(loss_fn().item());
          input.mutable_data()[i] = saved - h;
          fm = static_cast<double>(loss_fn().item());
        } catch (const NumericError& e) {
          input.mutable_data()[i] = saved;
          throw NumericError("grad_check at coordinate " + std::to_string(i) + ": " + e.what());
        }
      }
      input.mutable_data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
        throw NumericError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
      }
      worst = std::max(worst, detail::rel_error(analytic, numeric));
    }
    return worst;
  }
  Rng rng(seed);
  return grad_check_params<T>(loss_fn, {{"x", input}}, h, samples, rng).max_rel_error;
}

}  // namespace mugstan
