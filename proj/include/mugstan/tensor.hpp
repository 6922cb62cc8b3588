#pragma once

// Dense row-major tensors with an explicit reverse-mode recording tape.
//
// A Tensor is a shared handle (like a torch::Tensor): copies alias the same
// storage and gradient buffer. Use clone() or detach() for value copies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mugstan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (heads not dividing width, unknown tags, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, zero-norm rows and similar numeric states.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Softmax slice with every position masked out.
class DegenerateSliceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Maps a possibly negative axis onto [0, rank).
inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + mugstan::to_string(shape));
    }
    if (mugstan::numel(shape) != data.size()) {
      throw DimensionError("shape " + mugstan::to_string(shape) + " holds " +
                           std::to_string(mugstan::numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = mugstan::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T{1}); }
  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }
  static Tensor eye(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = T{1};
    return t;
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(int axis) const { return impl_->shape[normalize_axis(axis, rank())]; }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access; bypasses the tape. Intended for initialisation and optimisers.
  std::span<T> mutable_data() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + mugstan::to_string(shape()));
    }
    return impl_->data[0];
  }

  T operator[](std::size_t flat) const { return impl_->data[flat]; }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) {
      if (v >= impl_->shape[i]) throw DimensionError("index out of range");
      flat = flat * impl_->shape[i] + v;
      ++i;
    }
    return impl_->data[flat];
  }

  /// Fresh storage, no gradient, not recorded.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(impl_->data.begin(), impl_->data.end()));
  }

  const ImplPtr& impl() const { return impl_; }

 private:
  ImplPtr impl_;
};

/// Ordered list of kernel applications. Records are appended in execution
/// order, so the list is already topologically sorted.
template <class T>
class Tape {
 public:
  using ImplPtr = typename Tensor<T>::ImplPtr;

  struct Record {
    std::string op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    std::function<void()> backward;
  };

  /// Makes a tape the active recorder for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  /// Temporarily disables recording on the current thread.
  class Pause {
   public:
    Pause() : prev_(active_) { active_ = nullptr; }
    ~Pause() { active_ = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* prev_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept { return active_; }

  void push(Record r) { records_.push_back(std::move(r)); }
  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }
  void clear() { records_.clear(); }

  /// Reverse replay. Leaf gradients accumulate across calls; intermediate
  /// gradients are reset first so replaying the same tape twice doubles leaf
  /// gradients exactly.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    const bool recorded =
        !loss.is_leaf() && std::any_of(records_.begin(), records_.end(), [&](const Record& r) {
          return r.output == loss.impl();
        });
    if (!recorded && !loss.requires_grad()) {
      throw ContractError("loss is not reachable from the recorded graph");
    }
    for (auto& r : records_) {
      auto& g = r.output->grad_buffer();
      std::fill(g.begin(), g.end(), T{0});
    }
    loss.impl()->grad_buffer()[0] += T{1};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Record> records_;
  static inline thread_local Tape* active_ = nullptr;
};

template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

/// Appends a kernel application to the active tape when any input requires a
/// gradient. The callback reads out->grad and accumulates into inputs.
template <class T, class Fn>
void record_op(std::string_view op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
               Fn&& backward_fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  typename Tape<T>::Record r;
  r.op = std::string(op);
  for (const auto& in : inputs) r.inputs.push_back(in.impl());
  r.output = out.impl();
  r.backward = std::function<void()>(std::forward<Fn>(backward_fn));
  tape->push(std::move(r));
}

template <class T>
void record_op_list(std::string_view op, const std::vector<Tensor<T>>& inputs, Tensor<T>& out,
                    std::function<void()> backward_fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  typename Tape<T>::Record r;
  r.op = std::string(op);
  for (const auto& in : inputs) r.inputs.push_back(in.impl());
  r.output = out.impl();
  r.backward = std::move(backward_fn);
  tape->push(std::move(r));
}

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, std::string_view op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

}  // namespace detail
}  // namespace mugstan
