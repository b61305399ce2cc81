#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "robustdistill/common.hpp"
#include "robustdistill/thread_pool.hpp"

namespace robustdistill {

using Shape = std::vector<int>;

inline size_t numel_of(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError(cat("non-positive dimension in shape ", shape_str(s)));
    n *= static_cast<size_t>(d);
  }
  return n;
}

// Dense row-major n-dimensional array. Plain data; autodiff lives in Tape.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (numel_of(shape) != v.size())
      throw ShapeError(cat("shape ", shape_str(shape), " does not match ", v.size(), " values"));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T val) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), val);
    return t;
  }
  static Tensor ones(Shape s) { return full(std::move(s), T(1)); }
  static Tensor scalar(T val) { return Tensor({1}, {val}); }
  static Tensor row(std::initializer_list<T> vals) {
    return Tensor({static_cast<int>(vals.size())}, std::vector<T>(vals));
  }

  size_t numel() const { return v.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool is_scalar() const { return numel() == 1; }

  T item() const {
    if (!is_scalar()) throw ContractError(cat("item() on non-scalar tensor ", shape_str(shape)));
    return v[0];
  }

  T& operator()(int i) { return v[static_cast<size_t>(i)]; }
  T operator()(int i) const { return v[static_cast<size_t>(i)]; }
  T& operator()(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
  T operator()(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }

  Tensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw ShapeError(cat("cannot reshape ", shape_str(shape), " to ", shape_str(s)));
    Tensor out = *this;
    out.shape = std::move(s);
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  uint64_t digest() const {
    uint64_t h = fnv1a64(shape.data(), shape.size() * sizeof(int));
    return fnv1a64(v.data(), v.size() * sizeof(T), h);
  }
};

namespace kernels {

// ---- GEMM family. Parallel split is over output rows; every output element
// is accumulated by one task in a fixed order, so results do not depend on
// the worker count.

constexpr size_t kParallelFlops = 1 << 15;

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  auto body = [=](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      const T* arow = a + i * k;
      for (int p = 0; p < k; ++p) {
        T av = arow[p];
        if (av == T(0)) continue;
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  size_t flops = static_cast<size_t>(m) * k * n;
  if (flops >= kParallelFlops && m > 1) {
    size_t grain = std::max<size_t>(1, static_cast<size_t>(m) / 16);
    ThreadPool::instance().parallel_ranges(static_cast<size_t>(m), grain, body);
  } else {
    body(0, static_cast<size_t>(m));
  }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  auto body = [=](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * k;
        T acc = accumulate ? crow[j] : T(0);
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] = acc;
      }
    }
  };
  size_t flops = static_cast<size_t>(m) * k * n;
  if (flops >= kParallelFlops && m > 1) {
    size_t grain = std::max<size_t>(1, static_cast<size_t>(m) / 16);
    ThreadPool::instance().parallel_ranges(static_cast<size_t>(m), grain, body);
  } else {
    body(0, static_cast<size_t>(m));
  }
}

// c[k,n] (+)= a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  auto body = [=](size_t r0, size_t r1) {
    if (!accumulate) {
      for (size_t r = r0; r < r1; ++r) std::fill(c + r * n, c + (r + 1) * n, T(0));
    }
    for (int p = 0; p < m; ++p) {
      const T* brow = b + static_cast<size_t>(p) * n;
      for (size_t r = r0; r < r1; ++r) {
        T av = a[static_cast<size_t>(p) * k + r];
        if (av == T(0)) continue;
        T* crow = c + r * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  size_t flops = static_cast<size_t>(m) * k * n;
  if (flops >= kParallelFlops && k > 1) {
    size_t grain = std::max<size_t>(1, static_cast<size_t>(k) / 16);
    ThreadPool::instance().parallel_ranges(static_cast<size_t>(k), grain, body);
  } else {
    body(0, static_cast<size_t>(k));
  }
}

// ---- im2col / col2im for one example. cols is [C*K*K, OH*OW].
template <typename T>
void im2col(const T* x, int c, int h, int w, int kern, int stride, int pad, int oh, int ow,
            T* cols) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kern; ++ky) {
      for (int kx = 0; kx < kern; ++kx) {
        T* dst = cols + ((static_cast<size_t>(ch) * kern + ky) * kern + kx) *
                            (static_cast<size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            T val = T(0);
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              val = x[(static_cast<size_t>(ch) * h + iy) * w + ix];
            dst[static_cast<size_t>(oy) * ow + ox] = val;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* cols, int c, int h, int w, int kern, int stride, int pad, int oh,
                  int ow, T* x) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kern; ++ky) {
      for (int kx = 0; kx < kern; ++kx) {
        const T* src = cols + ((static_cast<size_t>(ch) * kern + ky) * kern + kx) *
                                  (static_cast<size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<size_t>(ch) * h + iy) * w + ix] +=
                src[static_cast<size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace kernels

// ---- Broadcasting, trailing-axis alignment with size-1 expansion only.

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < ra ? a[ra - 1 - i] : 1;
    int db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(cat("cannot broadcast ", shape_str(a), " with ", shape_str(b)));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Row-major strides padded to rank r; broadcast dims get stride 0.
inline std::vector<size_t> broadcast_strides(const Shape& s, const Shape& out) {
  size_t r = out.size();
  std::vector<size_t> st(r, 0);
  size_t acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t src = s.size() - 1 - i;
    size_t dst = r - 1 - i;
    st[dst] = (s[src] == 1 && out[dst] != 1) ? 0 : acc;
    acc *= static_cast<size_t>(s[src]);
  }
  return st;
}

template <typename T, typename F>
void broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, F&& f) {
  if (a.shape == b.shape) {
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = f(a.v[i], b.v[i]);
    return;
  }
  const Shape& os = out.shape;
  auto sa = broadcast_strides(a.shape, os);
  auto sb = broadcast_strides(b.shape, os);
  size_t r = os.size();
  std::vector<size_t> idx(r, 0);
  size_t n = out.v.size();
  size_t offa = 0, offb = 0;
  for (size_t lin = 0; lin < n; ++lin) {
    out.v[lin] = f(a.v[offa], b.v[offb]);
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      offa += sa[d];
      offb += sb[d];
      if (idx[d] < static_cast<size_t>(os[d])) break;
      offa -= sa[d] * idx[d];
      offb -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Sum `g` (shaped like `out`) back down to `target` shape (inverse of
// broadcast expansion).
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const Shape& target) {
  if (g.shape == target) return g;
  Tensor<T> out(target);
  auto st = broadcast_strides(target, g.shape);
  size_t r = g.shape.size();
  std::vector<size_t> idx(r, 0);
  size_t off = 0;
  for (size_t lin = 0; lin < g.v.size(); ++lin) {
    out.v[off] += g.v[lin];
    for (size_t d = r; d-- > 0;) {
      idx[d]++;
      off += st[d];
      if (idx[d] < static_cast<size_t>(g.shape[d])) break;
      off -= st[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

// ---- Eager tensor math used by data plumbing and attack projection steps.

template <typename T>
Tensor<T> matmul_eager(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(cat("matmul shapes ", shape_str(a.shape), " x ", shape_str(b.shape)));
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.v.data(), b.v.data(), c.v.data(), a.dim(0), a.dim(1), b.dim(1), false);
  return c;
}

template <typename T, typename F>
Tensor<T> map_eager(const Tensor<T>& a, F&& f) {
  Tensor<T> out = a;
  for (auto& x : out.v) x = f(x);
  return out;
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& a) {
  return map_eager(a, [](T x) { return std::min(T(1), std::max(T(0), x)); });
}

}  // namespace robustdistill
