#ifndef EMBRE_NUMERICS_OPS_HPP
#define EMBRE_NUMERICS_OPS_HPP

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "embre/common.hpp"
#include "embre/numerics/tensor.hpp"

namespace embre::num {

namespace detail {

template <class T>
std::vector<T>* grad_of(Node<T>& n) {
  return n.requires_grad ? &n.grad_buffer() : nullptr;
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " + to_string(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) +
                     " vs " + to_string(b));
}

/// Iteration over the 1-D lanes of a rank-1/2 tensor along `axis`.
struct Lanes {
  std::size_t count = 1;
  std::size_t length = 0;
  std::size_t stride = 1;
  std::size_t lane_step = 0;

  std::size_t base(std::size_t lane) const { return lane * lane_step; }
  std::size_t at(std::size_t lane, std::size_t i) const {
    return base(lane) + i * stride;
  }
};

inline Lanes lanes(const Shape& s, std::size_t axis, const char* op) {
  if (s.size() == 1 && axis == 0) return {1, s[0], 1, 0};
  if (s.size() == 2 && axis == 1) return {s[0], s[1], 1, s[1]};
  if (s.size() == 2 && axis == 0) return {s[1], s[0], s[1], 1};
  throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                   " invalid for shape " + to_string(s));
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      if (av == T(0)) continue;
      const T* brow = B + p * n;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return Tensor<T>::make_result(
      {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        const T* G = self.grad.data();
        if (auto* ga = detail::grad_of(A)) {
          // dA = G B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s = T(0);
              const T* grow = G + i * n;
              const T* brow = B.data.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              (*ga)[i * k + p] += s;
            }
        }
        if (auto* gb = detail::grad_of(B)) {
          // dB = A^T G
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T av = A.data[i * k + p];
              if (av == T(0)) continue;
              const T* grow = G + i * n;
              T* gbrow = gb->data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return Tensor<T>::make_result({n, m}, std::move(out), {a},
                                [m, n](Node<T>& self) {
                                  auto* g = detail::grad_of(*self.parents[0]);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                      (*g)[i * n + j] += self.grad[j * m + i];
                                });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [](Node<T>& self) {
                                  for (int k = 0; k < 2; ++k)
                                    if (auto* g = detail::grad_of(*self.parents[k]))
                                      for (std::size_t i = 0; i < g->size(); ++i)
                                        (*g)[i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (auto* g = detail::grad_of(A))
          for (std::size_t i = 0; i < g->size(); ++i)
            (*g)[i] += self.grad[i] * B.data[i];
        if (auto* g = detail::grad_of(B))
          for (std::size_t i = 0; i < g->size(); ++i)
            (*g)[i] += self.grad[i] * A.data[i];
      });
}

namespace detail {

template <class T>
std::size_t row_width(const Tensor<T>& a, const Tensor<T>& row,
                      const char* op) {
  require_rank(a.shape(), 2, op);
  const std::size_t n = a.shape()[1];
  if (row.size() != n || row.rank() > 2 || (row.rank() == 2 && row.shape()[0] != 1))
    throw ShapeError(std::string(op) + ": row shape " + to_string(row.shape()) +
                     " does not broadcast over " + to_string(a.shape()));
  return n;
}

}  // namespace detail

/// a[m,n] + row[n], broadcasting the row over every row of a.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  const std::size_t n = detail::row_width(a, row, "add_row");
  const std::size_t m = a.shape()[0];
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + row[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, row}, [m, n](Node<T>& self) {
        if (auto* g = detail::grad_of(*self.parents[0]))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(*self.parents[1]))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
      });
}

/// a[m,n] * row[n] elementwise, broadcasting the row.
template <class T>
Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& row) {
  const std::size_t n = detail::row_width(a, row, "mul_row");
  const std::size_t m = a.shape()[0];
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * row[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, row}, [m, n](Node<T>& self) {
        auto& A = *self.parents[0];
        auto& R = *self.parents[1];
        if (auto* g = detail::grad_of(A))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              (*g)[i * n + j] += self.grad[i * n + j] * R.data[j];
        if (auto* g = detail::grad_of(R))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              (*g)[j] += self.grad[i * n + j] * A.data[i * n + j];
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [s](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0]))
                                    for (std::size_t i = 0; i < g->size(); ++i)
                                      (*g)[i] += self.grad[i] * s;
                                });
}

/// Rows of table[V,d] selected by ids, shape [len,d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_rank(table.shape(), 2, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw ShapeError("embedding: id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(vocab) + " rows");
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(table.data().data() + rows[i] * d, d, out.data() + i * d);
  return Tensor<T>::make_result(
      {ids.size(), d}, std::move(out), {table},
      [rows = std::move(rows), d](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        if (!g) return;
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            (*g)[rows[i] * d + j] += self.grad[i * d + j];
      });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const auto L = detail::lanes(a.shape(), axis, "softmax");
  std::vector<T> out(a.size());
  for (std::size_t l = 0; l < L.count; ++l) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < L.length; ++i) mx = std::max(mx, a[L.at(l, i)]);
    T sum = T(0);
    for (std::size_t i = 0; i < L.length; ++i) {
      const auto k = L.at(l, i);
      out[k] = std::exp(a[k] - mx);
      sum += out[k];
    }
    for (std::size_t i = 0; i < L.length; ++i) out[L.at(l, i)] /= sum;
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [L](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        if (!g) return;
        const auto& y = self.data;
        for (std::size_t l = 0; l < L.count; ++l) {
          T dot = T(0);
          for (std::size_t i = 0; i < L.length; ++i) {
            const auto k = L.at(l, i);
            dot += self.grad[k] * y[k];
          }
          for (std::size_t i = 0; i < L.length; ++i) {
            const auto k = L.at(l, i);
            (*g)[k] += y[k] * (self.grad[k] - dot);
          }
        }
      });
}

/// Normalises each lane along `axis` to zero mean and unit variance; no
/// affine parameters (compose with mul_row / add_row).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, std::size_t axis, T eps = T(1e-5)) {
  const auto L = detail::lanes(a.shape(), axis, "layer_norm");
  std::vector<T> out(a.size());
  std::vector<T> inv_std(L.count);
  for (std::size_t l = 0; l < L.count; ++l) {
    T mean = T(0);
    for (std::size_t i = 0; i < L.length; ++i) mean += a[L.at(l, i)];
    mean /= static_cast<T>(L.length);
    T var = T(0);
    for (std::size_t i = 0; i < L.length; ++i) {
      const T c = a[L.at(l, i)] - mean;
      var += c * c;
    }
    var /= static_cast<T>(L.length);
    inv_std[l] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < L.length; ++i) {
      const auto k = L.at(l, i);
      out[k] = (a[k] - mean) * inv_std[l];
    }
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a},
      [L, inv_std = std::move(inv_std)](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        if (!g) return;
        const auto& y = self.data;
        const T n = static_cast<T>(L.length);
        for (std::size_t l = 0; l < L.count; ++l) {
          T sum_g = T(0), sum_gy = T(0);
          for (std::size_t i = 0; i < L.length; ++i) {
            const auto k = L.at(l, i);
            sum_g += self.grad[k];
            sum_gy += self.grad[k] * y[k];
          }
          for (std::size_t i = 0; i < L.length; ++i) {
            const auto k = L.at(l, i);
            (*g)[k] += inv_std[l] * (self.grad[k] - sum_g / n - y[k] * sum_gy / n);
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [](Node<T>& self) {
                                  auto& A = *self.parents[0];
                                  if (auto* g = detail::grad_of(A))
                                    for (std::size_t i = 0; i < g->size(); ++i)
                                      if (A.data[i] > T(0)) (*g)[i] += self.grad[i];
                                });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& A = *self.parents[0];
        auto* g = detail::grad_of(A);
        if (!g) return;
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
        for (std::size_t i = 0; i < g->size(); ++i) {
          const T x = A.data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
          (*g)[i] += self.grad[i] * (cdf + x * pdf);
        }
      });
}

/// Mean along `axis`, keeping the reduced dimension with extent 1.
template <class T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis) {
  const auto L = detail::lanes(a.shape(), axis, "mean");
  if (L.length == 0) throw ShapeError("mean: empty axis");
  Shape shape = a.shape();
  shape[axis] = 1;
  std::vector<T> out(L.count, T(0));
  for (std::size_t l = 0; l < L.count; ++l) {
    for (std::size_t i = 0; i < L.length; ++i) out[l] += a[L.at(l, i)];
    out[l] /= static_cast<T>(L.length);
  }
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a},
                                [L](Node<T>& self) {
                                  auto* g = detail::grad_of(*self.parents[0]);
                                  if (!g) return;
                                  const T inv = T(1) / static_cast<T>(L.length);
                                  for (std::size_t l = 0; l < L.count; ++l)
                                    for (std::size_t i = 0; i < L.length; ++i)
                                      (*g)[L.at(l, i)] += self.grad[l] * inv;
                                });
}

/// Sum of all elements as a {1} tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return Tensor<T>::make_result({1}, {s}, {a}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0]))
      for (auto& v : *g) v += self.grad[0];
  });
}

/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank(p.shape(), 2, "concat");
  const std::size_t other = 1 - axis;
  const std::size_t fixed = parts[0].shape()[other];
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[other] != fixed)
      throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) +
                       " vs " + to_string(p.shape()));
    extents.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<T> out(numel(shape));
  const std::size_t out_cols = shape[1];
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pr = p.shape()[0], pc = p.shape()[1];
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t r = axis == 0 ? i + offset : i;
        const std::size_t c = axis == 0 ? j : j + offset;
        out[r * out_cols + c] = p.data()[i * pc + j];
      }
    offset += p.shape()[axis];
  }
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), parts,
      [axis, out_cols](Node<T>& self) {
        std::size_t offset = 0;
        for (auto& pp : self.parents) {
          const std::size_t pr = pp->shape[0], pc = pp->shape[1];
          if (auto* g = detail::grad_of(*pp))
            for (std::size_t i = 0; i < pr; ++i)
              for (std::size_t j = 0; j < pc; ++j) {
                const std::size_t r = axis == 0 ? i + offset : i;
                const std::size_t c = axis == 0 ? j : j + offset;
                (*g)[i * pc + j] += self.grad[r * out_cols + c];
              }
          offset += pp->shape[axis];
        }
      });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a.shape(), 2, "slice_rows");
  const std::size_t n = a.shape()[1];
  if (begin >= end || end > a.shape()[0])
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + to_string(a.shape()));
  std::vector<T> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  return Tensor<T>::make_result({end - begin, n}, std::move(out), {a},
                                [begin, n](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0]))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*g)[begin * n + i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a.shape(), 2, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1], w = end - begin;
  if (begin >= end || end > n)
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + to_string(a.shape()));
  std::vector<T> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().data() + i * n + begin, w, out.data() + i * w);
  return Tensor<T>::make_result({m, w}, std::move(out), {a},
                                [m, n, w, begin](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0]))
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < w; ++j)
                                        (*g)[i * n + begin + j] += self.grad[i * w + j];
                                });
}

/// Inverted dropout; identity when not training or p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, T p, Rng& rng, bool training) {
  if (p < T(0) || p >= T(1)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == T(0)) return a;
  const T keep_scale = T(1) / (T(1) - p);
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = rng.uniform() < static_cast<double>(p) ? T(0) : keep_scale;
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * mask[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [mask = std::move(mask)](Node<T>& self) {
                                  if (auto* g = detail::grad_of(*self.parents[0]))
                                    for (std::size_t i = 0; i < g->size(); ++i)
                                      (*g)[i] += self.grad[i] * mask[i];
                                });
}

/// -log softmax(logits)[target] over all elements of `logits`, computed with
/// log-sum-exp.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t target) {
  const std::size_t k = logits.size();
  if (k < 2) throw ShapeError("cross_entropy: needs at least 2 classes");
  if (target >= k)
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                            " outside " + std::to_string(k) + " classes");
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : logits.data()) mx = std::max(mx, v);
  T sum = T(0);
  for (T v : logits.data()) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  return Tensor<T>::make_result(
      {1}, {lse - logits[target]}, {logits}, [target, lse](Node<T>& self) {
        auto& L = *self.parents[0];
        if (auto* g = detail::grad_of(L))
          for (std::size_t i = 0; i < g->size(); ++i) {
            const T p = std::exp(L.data[i] - lse);
            (*g)[i] += self.grad[0] * (p - (i == target ? T(1) : T(0)));
          }
      });
}

}  // namespace embre::num

#endif  // EMBRE_NUMERICS_OPS_HPP
