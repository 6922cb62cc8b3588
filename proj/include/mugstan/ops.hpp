#pragma once

// Differentiable kernels. Every kernel is a pure function of its inputs,
// checks its output for NaN/Inf, and records a backward rule on the active
// tape when any input requires a gradient. Reductions always run
// sequentially in index order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mugstan/rng.hpp"
#include "mugstan/tensor.hpp"

namespace mugstan {

/// Boolean keep-mask, broadcastable against the tensor it masks.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(Shape s, std::vector<std::uint8_t> k) : shape(std::move(s)), keep(std::move(k)) {
    if (numel(shape) != keep.size()) throw DimensionError("mask shape/data mismatch");
  }
  static Mask all(Shape s) {
    const auto n = numel(s);
    return Mask(std::move(s), std::vector<std::uint8_t>(n, 1));
  }
};

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                           to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  if (in.size() > r) throw DimensionError("broadcast source has higher rank");
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t od = r - 1 - k;
    if (in[d] == out[od]) {
      stride[od] = s;
    } else if (in[d] != 1) {
      throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(out));
    }
    s *= in[d];
  }
  const std::size_t n = numel(out);
  std::vector<std::size_t> offs(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offs[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offs;
}

/// Splits `shape` around `axis` into (outer, n, inner).
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  const std::size_t n = numel(out_shape);
  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  std::vector<std::size_t> ia = same_a ? std::vector<std::size_t>{} : broadcast_offsets(a.shape(), out_shape);
  std::vector<std::size_t> ib = same_b ? std::vector<std::size_t>{} : broadcast_offsets(b.shape(), out_shape);
  const auto& A = a.impl()->data;
  const auto& B = b.impl()->data;
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = f(A[same_a ? i : ia[i]], B[same_b ? i : ib[i]]);
  }
  check_finite(y, op);
  Tensor<T> out(out_shape, std::move(y));
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op<T>(op, {a, b}, out, [ai, bi, oi, ia = std::move(ia), ib = std::move(ib), same_a, same_b, da, db] {
    const auto& g = oi->grad;
    const auto& A = ai->data;
    const auto& B = bi->data;
    const std::size_t n = g.size();
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pa = same_a ? i : ia[i];
        const std::size_t pb = same_b ? i : ib[i];
        ga[pa] += g[i] * da(A[pa], B[pb]);
      }
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pa = same_a ? i : ia[i];
        const std::size_t pb = same_b ? i : ib[i];
        gb[pb] += g[i] * db(A[pa], B[pb]);
      }
    }
  });
  return out;
}

template <class T, class F, class DF>
Tensor<T> unary(std::string_view op, const Tensor<T>& x, F f, DF df) {
  const auto& X = x.impl()->data;
  std::vector<T> y(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = f(X[i]);
  check_finite(y, op);
  Tensor<T> out(x.shape(), std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>(op, {x}, out, [xi, oi, df] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], oi->data[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T, T y) { return y * (T{1} - y); });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> /
                      std::numbers::sqrt2_v<T>;
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------- reductions

/// Sum over one axis, accumulated sequentially in index order.
template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = detail::axis_view(x.shape(), ax);
  const auto& X = x.impl()->data;
  std::vector<T> y(v.outer * v.inner, T{0});
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.n; ++k)
      for (std::size_t i = 0; i < v.inner; ++i) y[o * v.inner + i] += X[(o * v.n + k) * v.inner + i];
  Shape s = x.shape();
  if (keepdim) {
    s[ax] = 1;
  } else {
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(ax));
    if (s.empty()) s = {1};
  }
  detail::check_finite(y, "sum");
  Tensor<T> out(s, std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("sum", {x}, out, [xi, oi, v] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < v.n; ++k)
        for (std::size_t i = 0; i < v.inner; ++i) gx[(o * v.n + k) * v.inner + i] += g[o * v.inner + i];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t n = x.dim(axis);
  return scale(sum(x, axis, keepdim), T{1} / static_cast<T>(n));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto& X = x.impl()->data;
  T acc{0};
  for (auto v : X) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::check_finite(out.impl()->data, "sum_all");
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("sum_all", {x}, out, [xi, oi] {
    auto& gx = xi->grad_buffer();
    const T g = oi->grad[0];
    for (auto& v : gx) v += g;
  });
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T{1} / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.impl()->data);
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("reshape", {x}, out, [xi, oi] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
  });
  return out;
}

/// out.shape[d] = x.shape[perm[d]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch");
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * x.shape()[d + 1];
  Shape os(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (perm[d] >= r) throw DimensionError("permute: bad axis");
    os[d] = x.shape()[perm[d]];
    stride[d] = in_stride[perm[d]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < os[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto& X = x.impl()->data;
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = X[src[i]];
  Tensor<T> out(os, std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("permute", {x}, out, [xi, oi, src = std::move(src)] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += oi->grad[i];
  });
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, int a1 = -2, int a2 = -1) {
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[normalize_axis(a1, x.rank())], perm[normalize_axis(a2, x.rank())]);
  return permute(x, perm);
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = detail::axis_view(x.shape(), ax);
  if (len == 0 || start + len > v.n) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(len) +
                         ") out of range for " + to_string(x.shape()));
  }
  Shape s = x.shape();
  s[ax] = len;
  const auto& X = x.impl()->data;
  std::vector<T> y;
  y.reserve(numel(s));
  for (std::size_t o = 0; o < v.outer; ++o) {
    const auto* base = X.data() + (o * v.n + start) * v.inner;
    y.insert(y.end(), base, base + len * v.inner);
  }
  Tensor<T> out(s, std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("slice", {x}, out, [xi, oi, v, start, len] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    std::size_t p = 0;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < len * v.inner; ++k) gx[(o * v.n + start) * v.inner + k] += g[p++];
  });
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of nothing");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape s = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && ps[d] != s[d]) {
        throw DimensionError("concat: " + to_string(ps) + " vs " + to_string(s));
      }
    }
    total += ps[ax];
  }
  s[ax] = total;
  const auto v = detail::axis_view(s, ax);
  std::vector<T> y(numel(s));
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[ax];
    offsets.push_back(off);
    const auto& P = p.impl()->data;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(P.data() + o * n * v.inner, n * v.inner, y.data() + (o * v.n + off) * v.inner);
    }
    off += n;
  }
  Tensor<T> out(s, std::move(y));
  std::vector<typename Tensor<T>::ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  auto oi = out.impl();
  record_op_list<T>("concat", parts, out, [impls, oi, offsets, v, ax] {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      auto& pi = impls[k];
      if (!pi->requires_grad) continue;
      const std::size_t n = pi->shape[ax];
      auto& gp = pi->grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t q = 0; q < n * v.inner; ++q)
          gp[o * n * v.inner + q] += oi->grad[(o * v.n + offsets[k]) * v.inner + q];
    }
  });
  return out;
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  auto offs = detail::broadcast_offsets(x.shape(), shape);
  const auto& X = x.impl()->data;
  std::vector<T> y(offs.size());
  for (std::size_t i = 0; i < offs.size(); ++i) y[i] = X[offs[i]];
  Tensor<T> out(shape, std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("broadcast_to", {x}, out, [xi, oi, offs = std::move(offs)] {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < offs.size(); ++i) gx[offs[i]] += oi->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------- matmul

/// Batched matrix product: [.., M, K] x [.., K, N] -> [.., M, N] with
/// broadcast batch extents. Inner products accumulate over K in order.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t M = a.dim(-2), K = a.dim(-1), Kb = b.dim(-2), N = b.dim(-1);
  if (K != Kb) {
    throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const Shape ab(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(ab, bb, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch extents not broadcastable: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const std::size_t nb = numel(batch);
  std::vector<std::size_t> ia = detail::broadcast_offsets(ab.empty() ? Shape{1} : ab, batch.empty() ? Shape{1} : batch);
  std::vector<std::size_t> ib = detail::broadcast_offsets(bb.empty() ? Shape{1} : bb, batch.empty() ? Shape{1} : batch);
  const auto& A = a.impl()->data;
  const auto& B = b.impl()->data;
  std::vector<T> y(nb * M * N, T{0});
  for (std::size_t p = 0; p < nb; ++p) {
    const T* pa = A.data() + ia[p] * M * K;
    const T* pb = B.data() + ib[p] * K * N;
    T* py = y.data() + p * M * N;
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const T av = pa[i * K + k];
        for (std::size_t j = 0; j < N; ++j) py[i * N + j] += av * pb[k * N + j];
      }
  }
  detail::check_finite(y, "matmul");
  Shape os = batch;
  os.push_back(M);
  os.push_back(N);
  Tensor<T> out(os, std::move(y));
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op<T>("matmul", {a, b}, out, [ai, bi, oi, ia = std::move(ia), ib = std::move(ib), nb, M, K, N] {
    const auto& G = oi->grad;
    const auto& A = ai->data;
    const auto& B = bi->data;
    if (ai->requires_grad) {
      auto& GA = ai->grad_buffer();  // dA = dC . B^T
      for (std::size_t p = 0; p < nb; ++p) {
        const T* pg = G.data() + p * M * N;
        const T* pb = B.data() + ib[p] * K * N;
        T* pga = GA.data() + ia[p] * M * K;
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            T acc{0};
            for (std::size_t j = 0; j < N; ++j) acc += pg[i * N + j] * pb[k * N + j];
            pga[i * K + k] += acc;
          }
      }
    }
    if (bi->requires_grad) {
      auto& GB = bi->grad_buffer();  // dB = A^T . dC
      for (std::size_t p = 0; p < nb; ++p) {
        const T* pg = G.data() + p * M * N;
        const T* pa = A.data() + ia[p] * M * K;
        T* pgb = GB.data() + ib[p] * K * N;
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            const T av = pa[i * K + k];
            for (std::size_t j = 0; j < N; ++j) pgb[k * N + j] += av * pg[i * N + j];
          }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- softmax

namespace detail {

inline std::vector<std::uint8_t> expand_mask(const Mask& m, const Shape& shape) {
  if (m.shape == shape) return m.keep;
  auto offs = broadcast_offsets(m.shape, shape);
  std::vector<std::uint8_t> keep(offs.size());
  for (std::size_t i = 0; i < offs.size(); ++i) keep[i] = m.keep[offs[i]];
  return keep;
}

}  // namespace detail

/// Softmax along `axis`. Masked positions are excluded and set to exactly 0.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis, const std::optional<Mask>& mask = std::nullopt) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = detail::axis_view(x.shape(), ax);
  const auto& X = x.impl()->data;
  std::vector<std::uint8_t> keep =
      mask ? detail::expand_mask(*mask, x.shape()) : std::vector<std::uint8_t>{};
  std::vector<T> y(X.size(), T{0});
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t k = 0; k < v.n; ++k) {
        const std::size_t p = base + k * v.inner;
        if (!keep.empty() && !keep[p]) continue;
        any = true;
        mx = std::max(mx, X[p]);
      }
      if (!any) {
        throw DegenerateSliceError("softmax: every position masked in slice (outer " +
                                   std::to_string(o) + ", inner " + std::to_string(i) + ")");
      }
      T s{0};
      for (std::size_t k = 0; k < v.n; ++k) {
        const std::size_t p = base + k * v.inner;
        if (!keep.empty() && !keep[p]) continue;
        y[p] = std::exp(X[p] - mx);
        s += y[p];
      }
      for (std::size_t k = 0; k < v.n; ++k) y[base + k * v.inner] /= s;
    }
  detail::check_finite(y, "softmax");
  Tensor<T> out(x.shape(), std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("softmax", {x}, out, [xi, oi, v] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    const auto& Y = oi->data;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        T dot{0};
        for (std::size_t k = 0; k < v.n; ++k) dot += g[base + k * v.inner] * Y[base + k * v.inner];
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t p = base + k * v.inner;
          gx[p] += Y[p] * (g[p] - dot);
        }
      }
  });
  return out;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = detail::axis_view(x.shape(), ax);
  const auto& X = x.impl()->data;
  std::vector<T> y(X.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      T mx = X[base];
      for (std::size_t k = 1; k < v.n; ++k) mx = std::max(mx, X[base + k * v.inner]);
      T s{0};
      for (std::size_t k = 0; k < v.n; ++k) s += std::exp(X[base + k * v.inner] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t k = 0; k < v.n; ++k) y[base + k * v.inner] = X[base + k * v.inner] - lse;
    }
  detail::check_finite(y, "log_softmax");
  Tensor<T> out(x.shape(), std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("log_softmax", {x}, out, [xi, oi, v] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    const auto& Y = oi->data;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        T gs{0};
        for (std::size_t k = 0; k < v.n; ++k) gs += g[base + k * v.inner];
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t p = base + k * v.inner;
          gx[p] += g[p] - std::exp(Y[p]) * gs;
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------- normalisation

/// Layer normalisation over the last axis with population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D) {
    throw DimensionError("layer_norm: affine params " + to_string(gamma.shape()) + "/" +
                         to_string(beta.shape()) + " vs input " + to_string(x.shape()));
  }
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / D;
  const auto& X = x.impl()->data;
  const auto& G = gamma.impl()->data;
  const auto& Bt = beta.impl()->data;
  std::vector<T> xhat(X.size()), y(X.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = X.data() + r * D;
    T mu{0};
    for (std::size_t d = 0; d < D; ++d) mu += px[d];
    mu /= static_cast<T>(D);
    T var{0};
    for (std::size_t d = 0; d < D; ++d) var += (px[d] - mu) * (px[d] - mu);
    var /= static_cast<T>(D);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      xhat[r * D + d] = (px[d] - mu) * rstd[r];
      y[r * D + d] = xhat[r * D + d] * G[d] + Bt[d];
    }
  }
  detail::check_finite(y, "layer_norm");
  Tensor<T> out(x.shape(), std::move(y));
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  record_op<T>("layer_norm", {x, gamma, beta}, out,
               [xi, gi, bi, oi, xhat = std::move(xhat), rstd = std::move(rstd), D, rows] {
                 const auto& g = oi->grad;
                 const auto& G = gi->data;
                 if (gi->requires_grad || bi->requires_grad) {
                   auto& gg = gi->grad_buffer();
                   auto& gb = bi->grad_buffer();
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t d = 0; d < D; ++d) {
                       gg[d] += g[r * D + d] * xhat[r * D + d];
                       gb[d] += g[r * D + d];
                     }
                 }
                 if (xi->requires_grad) {
                   auto& gx = xi->grad_buffer();
                   for (std::size_t r = 0; r < rows; ++r) {
                     T m1{0}, m2{0};
                     for (std::size_t d = 0; d < D; ++d) {
                       const T gh = g[r * D + d] * G[d];
                       m1 += gh;
                       m2 += gh * xhat[r * D + d];
                     }
                     m1 /= static_cast<T>(D);
                     m2 /= static_cast<T>(D);
                     for (std::size_t d = 0; d < D; ++d) {
                       const T gh = g[r * D + d] * G[d];
                       gx[r * D + d] += rstd[r] * (gh - m1 - xhat[r * D + d] * m2);
                     }
                   }
                 }
               });
  return out;
}

/// Scales every last-axis row to unit Euclidean norm. Rows excluded by
/// `row_mask` (one byte per row) become zero and receive no gradient.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, const std::vector<std::uint8_t>* row_mask = nullptr) {
  const std::size_t D = x.dim(-1);
  const std::size_t rows = x.numel() / D;
  if (row_mask != nullptr && row_mask->size() != rows) {
    throw DimensionError("l2_normalize: row mask has " + std::to_string(row_mask->size()) +
                         " entries for " + std::to_string(rows) + " rows");
  }
  const auto& X = x.impl()->data;
  std::vector<T> y(X.size(), T{0}), norms(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_mask != nullptr && !(*row_mask)[r]) continue;
    T s{0};
    for (std::size_t d = 0; d < D; ++d) s += X[r * D + d] * X[r * D + d];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > T{0})) {
      throw NumericError("l2_normalize: row " + std::to_string(r) + " has zero norm");
    }
    for (std::size_t d = 0; d < D; ++d) y[r * D + d] = X[r * D + d] / norms[r];
  }
  detail::check_finite(y, "l2_normalize");
  Tensor<T> out(x.shape(), std::move(y));
  auto xi = x.impl(), oi = out.impl();
  record_op<T>("l2_normalize", {x}, out, [xi, oi, norms = std::move(norms), D, rows] {
    auto& gx = xi->grad_buffer();
    const auto& g = oi->grad;
    const auto& Y = oi->data;
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] == T{0}) continue;
      T dot{0};
      for (std::size_t d = 0; d < D; ++d) dot += g[r * D + d] * Y[r * D + d];
      for (std::size_t d = 0; d < D; ++d) {
        gx[r * D + d] += (g[r * D + d] - Y[r * D + d] * dot) / norms[r];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- misc

/// Rows of `table` [V, D] selected by `ids` -> [ids.size(), D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (ids.empty()) throw ContractError("embedding: empty id list");
  const std::size_t V = table.dim(0), D = table.dim(1);
  const auto& W = table.impl()->data;
  std::vector<T> y(ids.size() * D);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                          std::to_string(V));
    }
    std::copy_n(W.data() + ids[i] * D, D, y.data() + i * D);
  }
  Tensor<T> out(Shape{ids.size(), D}, std::move(y));
  auto ti = table.impl(), oi = out.impl();
  record_op<T>("embedding", {table}, out, [ti, oi, ids, D] {
    auto& gt = ti->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) gt[ids[i] * D + d] += oi->grad[i * D + d];
  });
  return out;
}

/// Inverted dropout. Rate 0 or evaluation mode returns the input handle itself.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = rng.uniform() >= rate ? keep_scale : T{0};
  return mul(x, Tensor<T>(x.shape(), std::move(m)));
}

/// Keep-mask of the k largest entries along `axis`, restricted to `base`.
/// Ties at the k-th value go to the lower index. k is clamped to the number of
/// eligible entries per slice.
template <class T>
Mask topk_mask(const Tensor<T>& x, int axis, std::size_t k, const std::optional<Mask>& base = std::nullopt,
               bool* clamped = nullptr) {
  if (k == 0) throw ConfigError("top-k needs k >= 1");
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = detail::axis_view(x.shape(), ax);
  const auto& X = x.impl()->data;
  std::vector<std::uint8_t> eligible =
      base ? detail::expand_mask(*base, x.shape()) : std::vector<std::uint8_t>(X.size(), 1);
  std::vector<std::uint8_t> keep(X.size(), 0);
  std::vector<std::size_t> order;
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base_off = o * v.n * v.inner + i;
      order.clear();
      for (std::size_t q = 0; q < v.n; ++q)
        if (eligible[base_off + q * v.inner]) order.push_back(q);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return X[base_off + a * v.inner] > X[base_off + b * v.inner];
      });
      const std::size_t take = std::min(k, order.size());
      if (clamped != nullptr && take < k) *clamped = true;
      for (std::size_t q = 0; q < take; ++q) keep[base_off + order[q] * v.inner] = 1;
    }
  return Mask(x.shape(), std::move(keep));
}

}  // namespace mugstan
