#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// The scalar type is a template parameter: the artifact runs in float, while
// tests instantiate double to get clean finite-difference oracles out of the
// exact same graph code. Matrix products go through BLAS; everything else is
// plain loops. Every op validates shapes, checks its output for non-finite
// values (hard error), and records a backward closure on the active tape
// when any input requires grad.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "f2/common.hpp"

namespace f2 {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (const int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

namespace detail {

template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until the tensor participates in a backward pass
  bool requires_grad = false;
};

}  // namespace detail

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static TensorT filled(Shape shape, S v, bool requires_grad = false) {
    TensorT t;
    t.p_ = std::make_shared<detail::TensorImpl<S>>();
    t.p_->shape = std::move(shape);
    t.p_->value.assign(shape_numel(t.p_->shape), v);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape))
      throw ValidationError("tensor: data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    TensorT t;
    t.p_ = std::make_shared<detail::TensorImpl<S>>();
    t.p_->shape = std::move(shape);
    t.p_->value = std::move(data);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static TensorT randn(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (S& x : t.p_->value) x = static_cast<S>(rng.next_normal()) * stddev;
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int dim(std::size_t i) const { return p_->shape[i]; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t numel() const { return p_->value.size(); }

  std::span<const S> values() const { return p_->value; }
  // Direct mutation is reserved for parameter initialization and optimizer
  // updates; graph intermediates are never written through this.
  std::span<S> values_mut() { return p_->value; }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  bool has_grad() const { return !p_->grad.empty(); }
  std::span<const S> grad() const { return p_->grad; }
  std::span<S> grad_mut() { return p_->grad; }

  void ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), S(0));
  }
  void zero_grad() {
    std::fill(p_->grad.begin(), p_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw ValidationError("item: tensor is not scalar, shape " + shape_str(shape()));
    return p_->value[0];
  }

  detail::TensorImpl<S>* impl() const { return p_.get(); }
  std::shared_ptr<detail::TensorImpl<S>> impl_ptr() const { return p_; }

 private:
  std::shared_ptr<detail::TensorImpl<S>> p_;
};

// Ordered record of executed differentiable ops. backward() replays the
// closures in exact reverse execution order, which is a valid topological
// order by construction.
template <class S>
class TapeT {
 public:
  void record(const char* op, std::function<void()> backward_fn) {
    entries_.push_back({op, std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  void backward(TensorT<S> loss) {
    if (loss.numel() != 1)
      throw ValidationError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (entries_.empty()) throw ValidationError("backward: tape is empty");
    loss.ensure_grad();
    loss.grad_mut()[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

namespace detail {

template <class S>
inline TapeT<S>*& active_tape_slot() {
  thread_local TapeT<S>* tape = nullptr;
  return tape;
}

}  // namespace detail

template <class S>
TapeT<S>* active_tape() {
  return detail::active_tape_slot<S>();
}

// RAII binding of the tape ops record onto. No tape bound means pure
// inference: outputs do not require grad and nothing is recorded.
template <class S>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<S>& tape) : prev_(detail::active_tape_slot<S>()) {
    detail::active_tape_slot<S>() = &tape;
  }
  ~TapeScopeT() { detail::active_tape_slot<S>() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

namespace ops {

namespace detail {

template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
  for (const S v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <class S, class... Ts>
bool grad_wanted(const Ts&... inputs) {
  if (f2::detail::active_tape_slot<S>() == nullptr) return false;
  return (... || inputs.requires_grad());
}

template <class S>
void prepare(TensorT<S>& out, std::initializer_list<TensorT<S>*> grad_inputs) {
  out.set_requires_grad(true);
  out.ensure_grad();
  for (TensorT<S>* in : grad_inputs)
    if (in->requires_grad()) in->ensure_grad();
}

// C[m,n] += or = A[m,k] * B[k,n], optionally transposing either input.
template <class S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, int lda,
          const S* b, int ldb, S beta, S* c, int ldc) {
  if constexpr (std::is_same_v<S, float>) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else if constexpr (std::is_same_v<S, double>) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        S acc = 0;
        for (int p = 0; p < k; ++p) {
          const S av = trans_a ? a[p * lda + i] : a[i * lda + p];
          const S bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
          acc += av * bv;
        }
        c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
      }
  }
}

template <class S>
void require_2d(const TensorT<S>& t, const char* op) {
  if (t.rank() != 2)
    throw ValidationError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// [m,k] x [k,n] -> [m,n]
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ValidationError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> out = TensorT<S>::zeros({m, n});
  detail::gemm<S>(false, false, m, n, k, S(1), a.values().data(), k, b.values().data(), n, S(0),
                  out.values_mut().data(), n);
  detail::check_finite(out, "matmul");
  if (detail::grad_wanted<S>(a, b)) {
    TensorT<S> ac = a, bc = b, oc = out;
    detail::prepare(out, {&ac, &bc});
    f2::active_tape<S>()->record("matmul", [ac, bc, oc, m, k, n]() mutable {
      if (ac.requires_grad())  // dA += dC * B^T
        detail::gemm<S>(false, true, m, k, n, S(1), oc.grad().data(), n, bc.values().data(), n,
                        S(1), ac.grad_mut().data(), k);
      if (bc.requires_grad())  // dB += A^T * dC
        detail::gemm<S>(true, false, k, n, m, S(1), ac.values().data(), k, oc.grad().data(), n,
                        S(1), bc.grad_mut().data(), n);
    });
  }
  return out;
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ValidationError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] + b.values()[i];
  detail::check_finite(out, "add");
  if (detail::grad_wanted<S>(a, b)) {
    TensorT<S> ac = a, bc = b, oc = out;
    detail::prepare(out, {&ac, &bc});
    f2::active_tape<S>()->record("add", [ac, bc, oc, n]() mutable {
      if (ac.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ac.grad_mut()[i] += oc.grad()[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < n; ++i) bc.grad_mut()[i] += oc.grad()[i];
    });
  }
  return out;
}

// Elementwise product, same shapes.
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ValidationError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * b.values()[i];
  detail::check_finite(out, "mul");
  if (detail::grad_wanted<S>(a, b)) {
    TensorT<S> ac = a, bc = b, oc = out;
    detail::prepare(out, {&ac, &bc});
    f2::active_tape<S>()->record("mul", [ac, bc, oc, n]() mutable {
      if (ac.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ac.grad_mut()[i] += oc.grad()[i] * bc.values()[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < n; ++i) bc.grad_mut()[i] += oc.grad()[i] * ac.values()[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * c;
  detail::check_finite(out, "scale");
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("scale", [ac, oc, c, n]() mutable {
      if (ac.requires_grad())
        for (std::size_t i = 0; i < n; ++i) ac.grad_mut()[i] += oc.grad()[i] * c;
    });
  }
  return out;
}

namespace detail {

template <class S>
std::pair<std::size_t, int> rows_of(const TensorT<S>& t, const char* op) {
  if (t.rank() == 0 || t.shape().back() <= 0)
    throw ValidationError(std::string(op) + ": bad shape " + shape_str(t.shape()));
  const int n = t.shape().back();
  return {t.numel() / static_cast<std::size_t>(n), n};
}

}  // namespace detail

// Softmax over the last dimension; rows sum to 1.
template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& a) {
  const auto [rows, n] = detail::rows_of(a, "softmax_lastdim");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* x = a.values().data() + r * static_cast<std::size_t>(n);
    S* y = out.values_mut().data() + r * static_cast<std::size_t>(n);
    S mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += static_cast<double>(y[i]);
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int i = 0; i < n; ++i) y[i] *= inv;
  }
  detail::check_finite(out, "softmax_lastdim");
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("softmax_lastdim", [ac, oc, rows, n]() mutable {
      if (!ac.requires_grad()) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const S* p = oc.values().data() + r * static_cast<std::size_t>(n);
        const S* dy = oc.grad().data() + r * static_cast<std::size_t>(n);
        S* dx = ac.grad_mut().data() + r * static_cast<std::size_t>(n);
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += static_cast<double>(dy[i]) * p[i];
        for (int i = 0; i < n; ++i) dx[i] += p[i] * (dy[i] - static_cast<S>(dot));
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> log_softmax_lastdim(const TensorT<S>& a) {
  const auto [rows, n] = detail::rows_of(a, "log_softmax_lastdim");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* x = a.values().data() + r * static_cast<std::size_t>(n);
    S* y = out.values_mut().data() + r * static_cast<std::size_t>(n);
    S mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(static_cast<double>(x[i] - mx));
    const S lse = mx + static_cast<S>(std::log(sum));
    for (int i = 0; i < n; ++i) y[i] = x[i] - lse;
  }
  detail::check_finite(out, "log_softmax_lastdim");
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("log_softmax_lastdim", [ac, oc, rows, n]() mutable {
      if (!ac.requires_grad()) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const S* y = oc.values().data() + r * static_cast<std::size_t>(n);
        const S* dy = oc.grad().data() + r * static_cast<std::size_t>(n);
        S* dx = ac.grad_mut().data() + r * static_cast<std::size_t>(n);
        double dsum = 0.0;
        for (int i = 0; i < n; ++i) dsum += static_cast<double>(dy[i]);
        for (int i = 0; i < n; ++i)
          dx[i] += dy[i] - static_cast<S>(std::exp(static_cast<double>(y[i])) * dsum);
      }
    });
  }
  return out;
}

// Normalization over the last dimension with learned gain/offset.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps) {
  const auto [rows, n] = detail::rows_of(x, "layer_norm");
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
    throw ValidationError("layer_norm: gamma/beta must be [" + std::to_string(n) + "], got " +
                          shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  std::vector<S> xhat(x.numel());
  std::vector<S> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.values().data() + r * static_cast<std::size_t>(n);
    S* yr = out.values_mut().data() + r * static_cast<std::size_t>(n);
    S* hr = xhat.data() + r * static_cast<std::size_t>(n);
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += static_cast<double>(xr[i]);
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = static_cast<double>(xr[i]) - mean;
      var += d * d;
    }
    var /= n;
    const S istd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[r] = istd;
    for (int i = 0; i < n; ++i) {
      hr[i] = (xr[i] - static_cast<S>(mean)) * istd;
      yr[i] = hr[i] * gamma.values()[static_cast<std::size_t>(i)] +
              beta.values()[static_cast<std::size_t>(i)];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (detail::grad_wanted<S>(x, gamma, beta)) {
    TensorT<S> xc = x, gc = gamma, bc = beta, oc = out;
    detail::prepare(out, {&xc, &gc, &bc});
    f2::active_tape<S>()->record(
        "layer_norm", [xc, gc, bc, oc, rows, n, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)]() mutable {
          for (std::size_t r = 0; r < rows; ++r) {
            const S* dy = oc.grad().data() + r * static_cast<std::size_t>(n);
            const S* hr = xhat.data() + r * static_cast<std::size_t>(n);
            if (gc.requires_grad() || bc.requires_grad()) {
              for (int i = 0; i < n; ++i) {
                if (gc.requires_grad()) gc.grad_mut()[static_cast<std::size_t>(i)] += dy[i] * hr[i];
                if (bc.requires_grad()) bc.grad_mut()[static_cast<std::size_t>(i)] += dy[i];
              }
            }
            if (xc.requires_grad()) {
              S* dx = xc.grad_mut().data() + r * static_cast<std::size_t>(n);
              double sum_g = 0.0, sum_gh = 0.0;
              for (int i = 0; i < n; ++i) {
                const double g = static_cast<double>(dy[i]) *
                                 gc.values()[static_cast<std::size_t>(i)];
                sum_g += g;
                sum_gh += g * hr[i];
              }
              const double mg = sum_g / n, mgh = sum_gh / n;
              for (int i = 0; i < n; ++i) {
                const double g = static_cast<double>(dy[i]) *
                                 gc.values()[static_cast<std::size_t>(i)];
                dx[i] += static_cast<S>((g - mg - hr[i] * mgh) * inv_std[r]);
              }
            }
          }
        });
  }
  return out;
}

// Exact (erf-based) GELU.
template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = out.numel();
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(a.values()[i]);
    out.values_mut()[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  detail::check_finite(out, "gelu");
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("gelu", [ac, oc, n]() mutable {
      if (!ac.requires_grad()) return;
      constexpr double kInvSqrt2Pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(ac.values()[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ac.grad_mut()[i] += oc.grad()[i] * static_cast<S>(cdf + x * pdf);
      }
    });
  }
  return out;
}

// table [V,d], ids -> [T,d]; gradients scatter-add into the table rows.
template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding_lookup");
  const int v = table.dim(0), d = table.dim(1);
  for (const int id : ids)
    if (id < 0 || id >= v)
      throw ValidationError("embedding_lookup: index " + std::to_string(id) +
                            " out of bounds for table of " + std::to_string(v) + " rows");
  const int t = static_cast<int>(ids.size());
  TensorT<S> out = TensorT<S>::zeros({t, d});
  for (int i = 0; i < t; ++i)
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d,
                d, out.values_mut().data() + static_cast<std::size_t>(i) * d);
  if (detail::grad_wanted<S>(table)) {
    TensorT<S> tc = table, oc = out;
    detail::prepare(out, {&tc});
    f2::active_tape<S>()->record("embedding_lookup", [tc, oc, ids, d]() mutable {
      if (!tc.requires_grad()) return;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* dst = tc.grad_mut().data() + static_cast<std::size_t>(ids[i]) * d;
        const S* src = oc.grad().data() + i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

namespace detail {

template <class S>
TensorT<S> slice2d(const TensorT<S>& a, int dim, int offset, int count, const char* op) {
  require_2d(a, op);
  const int extent = a.dim(static_cast<std::size_t>(dim));
  if (offset < 0 || count <= 0 || offset + count > extent)
    throw ValidationError(std::string(op) + ": range [" + std::to_string(offset) + "," +
                          std::to_string(offset + count) + ") out of bounds for " +
                          shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  const Shape out_shape = dim == 0 ? Shape{count, cols} : Shape{rows, count};
  TensorT<S> out = TensorT<S>::zeros(out_shape);
  if (dim == 0) {
    std::copy_n(a.values().data() + static_cast<std::size_t>(offset) * cols,
                static_cast<std::size_t>(count) * cols, out.values_mut().data());
  } else {
    for (int r = 0; r < rows; ++r)
      std::copy_n(a.values().data() + static_cast<std::size_t>(r) * cols + offset, count,
                  out.values_mut().data() + static_cast<std::size_t>(r) * count);
  }
  if (grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    prepare(out, {&ac});
    f2::active_tape<S>()->record(op, [ac, oc, dim, offset, rows, cols, count]() mutable {
      if (!ac.requires_grad()) return;
      if (dim == 0) {
        S* dst = ac.grad_mut().data() + static_cast<std::size_t>(offset) * cols;
        const S* src = oc.grad().data();
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * cols; ++i) dst[i] += src[i];
      } else {
        for (int r = 0; r < rows; ++r) {
          S* dst = ac.grad_mut().data() + static_cast<std::size_t>(r) * cols + offset;
          const S* src = oc.grad().data() + static_cast<std::size_t>(r) * count;
          for (int i = 0; i < count; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <class S>
TensorT<S> slice_rows(const TensorT<S>& a, int offset, int count) {
  return detail::slice2d(a, 0, offset, count, "slice_rows");
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& a, int offset, int count) {
  return detail::slice2d(a, 1, offset, count, "slice_cols");
}

template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.dim(0) != rows)
      throw ValidationError("concat_cols: row mismatch " + shape_str(p.shape()));
    total += p.dim(1);
  }
  TensorT<S> out = TensorT<S>::zeros({rows, total});
  int col = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    for (int r = 0; r < rows; ++r)
      std::copy_n(p.values().data() + static_cast<std::size_t>(r) * c, c,
                  out.values_mut().data() + static_cast<std::size_t>(r) * total + col);
    col += c;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (f2::active_tape<S>() && any) {
    std::vector<TensorT<S>> pc = parts;
    TensorT<S> oc = out;
    out.set_requires_grad(true);
    out.ensure_grad();
    for (auto& p : pc)
      if (p.requires_grad()) p.ensure_grad();
    f2::active_tape<S>()->record("concat_cols", [pc, oc, rows, total]() mutable {
      int col = 0;
      for (auto& p : pc) {
        const int c = p.dim(1);
        if (p.requires_grad()) {
          for (int r = 0; r < rows; ++r) {
            S* dst = p.grad_mut().data() + static_cast<std::size_t>(r) * c;
            const S* src = oc.grad().data() + static_cast<std::size_t>(r) * total + col;
            for (int i = 0; i < c; ++i) dst[i] += src[i];
          }
        }
        col += c;
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  const int cols = parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.dim(1) != cols)
      throw ValidationError("concat_rows: column mismatch " + shape_str(p.shape()));
    total += p.dim(0);
  }
  TensorT<S> out = TensorT<S>::zeros({total, cols});
  int row = 0;
  for (const auto& p : parts) {
    std::copy_n(p.values().data(), p.numel(),
                out.values_mut().data() + static_cast<std::size_t>(row) * cols);
    row += p.dim(0);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (f2::active_tape<S>() && any) {
    std::vector<TensorT<S>> pc = parts;
    TensorT<S> oc = out;
    out.set_requires_grad(true);
    out.ensure_grad();
    for (auto& p : pc)
      if (p.requires_grad()) p.ensure_grad();
    f2::active_tape<S>()->record("concat_rows", [pc, oc, cols]() mutable {
      int row = 0;
      for (auto& p : pc) {
        if (p.requires_grad()) {
          S* dst = p.grad_mut().data();
          const S* src = oc.grad().data() + static_cast<std::size_t>(row) * cols;
          for (std::size_t i = 0; i < p.numel(); ++i) dst[i] += src[i];
        }
        row += p.dim(0);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> transpose(const TensorT<S>& a) {
  detail::require_2d(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<S> out = TensorT<S>::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.values_mut()[static_cast<std::size_t>(j) * m + i] =
          a.values()[static_cast<std::size_t>(i) * n + j];
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("transpose", [ac, oc, m, n]() mutable {
      if (!ac.requires_grad()) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ac.grad_mut()[static_cast<std::size_t>(i) * n + j] +=
              oc.grad()[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

// a [m,n], ids[m] -> [m]: out[i] = a[i, ids[i]].
template <class S>
TensorT<S> gather_lastdim(const TensorT<S>& a, const std::vector<int>& ids) {
  detail::require_2d(a, "gather_lastdim");
  const int m = a.dim(0), n = a.dim(1);
  if (static_cast<int>(ids.size()) != m)
    throw ValidationError("gather_lastdim: got " + std::to_string(ids.size()) +
                          " indices for " + std::to_string(m) + " rows");
  for (const int id : ids)
    if (id < 0 || id >= n)
      throw ValidationError("gather_lastdim: index " + std::to_string(id) +
                            " out of bounds for row width " + std::to_string(n));
  TensorT<S> out = TensorT<S>::zeros({m});
  for (int i = 0; i < m; ++i)
    out.values_mut()[static_cast<std::size_t>(i)] =
        a.values()[static_cast<std::size_t>(i) * n + ids[static_cast<std::size_t>(i)]];
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("gather_lastdim", [ac, oc, ids, m, n]() mutable {
      if (!ac.requires_grad()) return;
      for (int i = 0; i < m; ++i)
        ac.grad_mut()[static_cast<std::size_t>(i) * n + ids[static_cast<std::size_t>(i)]] +=
            oc.grad()[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// Reduce all elements to a scalar (double accumulation).
template <class S>
TensorT<S> sum(const TensorT<S>& a) {
  double acc = 0.0;
  for (const S v : a.values()) acc += static_cast<double>(v);
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
  detail::check_finite(out, "sum");
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("sum", [ac, oc]() mutable {
      if (!ac.requires_grad()) return;
      const S g = oc.grad()[0];
      for (S& d : ac.grad_mut()) d += g;
    });
  }
  return out;
}

// Inverted dropout; the mask is drawn from the caller's RNG so that training
// runs stay reproducible.
template <class S>
TensorT<S> dropout(const TensorT<S>& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ValidationError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (rate == 0.0) return a;
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = out.numel();
  std::vector<S> mask(n);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.next_double() < rate ? S(0) : keep_scale;
    out.values_mut()[i] = a.values()[i] * mask[i];
  }
  if (detail::grad_wanted<S>(a)) {
    TensorT<S> ac = a, oc = out;
    detail::prepare(out, {&ac});
    f2::active_tape<S>()->record("dropout", [ac, oc, mask = std::move(mask), n]() mutable {
      if (!ac.requires_grad()) return;
      for (std::size_t i = 0; i < n; ++i) ac.grad_mut()[i] += oc.grad()[i] * mask[i];
    });
  }
  return out;
}

}  // namespace ops
}  // namespace f2
