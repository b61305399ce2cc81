#pragma once

#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "robustdistill/tensor.hpp"

namespace robustdistill {

template <typename T>
class Tape;

// Handle to a tape node. Cheap to copy; the value lives on the tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& val() const;
  const Shape& shape() const { return val().shape; }
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction; backward() sweeps once in reverse and
// visits each node at most once. A tape is single-owner: not copyable and
// not shareable across threads.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;  // (tape, own node id)
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(Tensor<T> value, bool requires_grad, std::function<void(Tape&, int)> backward) {
    nodes_.push_back(
        Node{std::move(value), {}, requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  // Accumulate into a node's gradient slot; no-op for non-grad nodes.
  void accum(int id, const Tensor<T>& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.v.empty()) {
      n.grad = g;
      return;
    }
    for (size_t i = 0; i < g.v.size(); ++i) n.grad.v[i] += g.v[i];
  }

  // Gradient buffer for in-place accumulation, allocated on demand.
  Tensor<T>* grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.v.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return &n.grad;
  }

  // Gradient of the last backward() loss w.r.t. a node; zeros for leaves the
  // loss does not reach.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.v.empty()) return Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss is not on this tape");
    const Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.numel() != 1)
      throw ContractError(cat("backward: loss must be scalar, got ", shape_str(ln.value.shape)));
    for (auto& n : nodes_) n.grad.v.clear();
    if (!ln.requires_grad) return;
    nodes_[static_cast<size_t>(loss.id)].grad = Tensor<T>::ones(ln.value.shape);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || n.grad.v.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
  return tape->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->node(id).requires_grad;
}

namespace detail {

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Values are computed eagerly; backward closures capture node ids
// only (node storage may reallocate) plus small op parameters.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = *a.tape;
  Tensor<T> out(broadcast_shape(a.shape(), b.shape()));
  detail::broadcast_binary(a.val(), b.val(), out, [](T x, T y) { return x + y; });
  int ia = a.id, ib = b.id;
  bool rg = a.requires_grad() || b.requires_grad();
  return tp.record(std::move(out), rg, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    if (t.node(ia).requires_grad) t.accum(ia, detail::reduce_to_shape(g, t.value(ia).shape));
    if (t.node(ib).requires_grad) t.accum(ib, detail::reduce_to_shape(g, t.value(ib).shape));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = *a.tape;
  Tensor<T> out(broadcast_shape(a.shape(), b.shape()));
  detail::broadcast_binary(a.val(), b.val(), out, [](T x, T y) { return x - y; });
  int ia = a.id, ib = b.id;
  bool rg = a.requires_grad() || b.requires_grad();
  return tp.record(std::move(out), rg, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    if (t.node(ia).requires_grad) t.accum(ia, detail::reduce_to_shape(g, t.value(ia).shape));
    if (t.node(ib).requires_grad) {
      Tensor<T> neg = g;
      for (auto& x : neg.v) x = -x;
      t.accum(ib, detail::reduce_to_shape(neg, t.value(ib).shape));
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = *a.tape;
  Tensor<T> out(broadcast_shape(a.shape(), b.shape()));
  detail::broadcast_binary(a.val(), b.val(), out, [](T x, T y) { return x * y; });
  int ia = a.id, ib = b.id;
  bool rg = a.requires_grad() || b.requires_grad();
  return tp.record(std::move(out), rg, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    if (t.node(ia).requires_grad) {
      Tensor<T> tmp(g.shape);
      detail::broadcast_binary(g, t.value(ib), tmp, [](T x, T y) { return x * y; });
      t.accum(ia, detail::reduce_to_shape(tmp, t.value(ia).shape));
    }
    if (t.node(ib).requires_grad) {
      Tensor<T> tmp(g.shape);
      detail::broadcast_binary(g, t.value(ia), tmp, [](T x, T y) { return x * y; });
      t.accum(ib, detail::reduce_to_shape(tmp, t.value(ib).shape));
    }
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T s) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  for (auto& x : out.v) x *= s;
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia, s](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i) buf->v[i] += s * g.v[i];
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  for (auto& x : out.v) x += s;
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(),
                   [ia](Tape<T>& t, int self) { t.accum(ia, t.node(self).grad); });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError(cat("matmul shapes ", shape_str(av.shape), " x ", shape_str(bv.shape)));
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm_nn(av.v.data(), bv.v.data(), out.v.data(), m, k, n, false);
  int ia = a.id, ib = b.id;
  bool rg = a.requires_grad() || b.requires_grad();
  return tp.record(std::move(out), rg, [ia, ib, m, k, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    if (Tensor<T>* da = t.grad_buffer(ia))
      kernels::gemm_nt(g.v.data(), t.value(ib).v.data(), da->v.data(), m, n, k, true);
    if (Tensor<T>* db = t.grad_buffer(ib))
      kernels::gemm_tn(t.value(ia).v.data(), g.v.data(), db->v.data(), m, k, n, true);
  });
}

// 2D convolution, NCHW input, OIHW weight, square kernel, zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad) {
  detail::same_tape(x, w);
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  if (xv.rank() != 4 || wv.rank() != 4)
    throw ShapeError(cat("conv2d expects 4-d input and weight, got ", shape_str(xv.shape), " and ",
                         shape_str(wv.shape)));
  if (wv.dim(2) != wv.dim(3)) throw ShapeError("conv2d kernel must be square");
  if (stride < 1 || stride > 2) throw ShapeError(cat("conv2d stride must be 1 or 2, got ", stride));
  if (xv.dim(1) != wv.dim(1))
    throw ShapeError(cat("conv2d channel mismatch: input ", shape_str(xv.shape), " weight ",
                         shape_str(wv.shape)));
  int bsz = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  int oc = wv.dim(0), kern = wv.dim(2);
  int oh = (h + 2 * pad - kern) / stride + 1;
  int ow = (wd + 2 * pad - kern) / stride + 1;
  if (oh <= 0 || ow <= 0)
    throw ShapeError(cat("conv2d output collapses: input ", shape_str(xv.shape), " kernel ", kern,
                         " stride ", stride, " pad ", pad));
  size_t ck2 = static_cast<size_t>(c) * kern * kern;
  size_t ohw = static_cast<size_t>(oh) * ow;
  Tensor<T> out({bsz, oc, oh, ow});
  size_t in_stride = static_cast<size_t>(c) * h * wd;
  size_t out_stride = static_cast<size_t>(oc) * ohw;
  const T* xp = xv.v.data();
  const T* wp = wv.v.data();
  T* op = out.v.data();
  ThreadPool::instance().parallel_ranges(
      static_cast<size_t>(bsz), 4, [&](size_t e0, size_t e1) {
        std::vector<T> cols(ck2 * ohw);
        for (size_t e = e0; e < e1; ++e) {
          kernels::im2col(xp + e * in_stride, c, h, wd, kern, stride, pad, oh, ow, cols.data());
          kernels::gemm_nn(wp, cols.data(), op + e * out_stride, oc, static_cast<int>(ck2),
                           static_cast<int>(ohw), false);
        }
      });
  int ix = x.id, iw = w.id;
  bool rg = x.requires_grad() || w.requires_grad();
  return tp.record(std::move(out), rg,
                   [ix, iw, stride, pad, bsz, c, h, wd, oc, kern, oh, ow](Tape<T>& t, int self) {
    size_t ck2 = static_cast<size_t>(c) * kern * kern;
    size_t ohw = static_cast<size_t>(oh) * ow;
    size_t in_stride = static_cast<size_t>(c) * h * wd;
    size_t out_stride = static_cast<size_t>(oc) * ohw;
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& xv = t.value(ix);
    const Tensor<T>& wv = t.value(iw);
    if (Tensor<T>* dx = t.grad_buffer(ix)) {
      const T* gp = g.v.data();
      const T* wp = wv.v.data();
      T* dxp = dx->v.data();
      ThreadPool::instance().parallel_ranges(
          static_cast<size_t>(bsz), 4, [&](size_t e0, size_t e1) {
            std::vector<T> dcols(ck2 * ohw);
            for (size_t e = e0; e < e1; ++e) {
              kernels::gemm_tn(wp, gp + e * out_stride, dcols.data(), oc, static_cast<int>(ck2),
                               static_cast<int>(ohw), false);
              kernels::col2im_accum(dcols.data(), c, h, wd, kern, stride, pad, oh, ow,
                                    dxp + e * in_stride);
            }
          });
    }
    if (Tensor<T>* dw = t.grad_buffer(iw)) {
      // dW accumulates over examples in index order: deterministic.
      std::vector<T> cols(ck2 * ohw);
      const T* xp = xv.v.data();
      const T* gp = g.v.data();
      for (int e = 0; e < bsz; ++e) {
        kernels::im2col(xp + e * in_stride, c, h, wd, kern, stride, pad, oh, ow, cols.data());
        kernels::gemm_nt(gp + e * out_stride, cols.data(), dw->v.data(), oc,
                         static_cast<int>(ohw), static_cast<int>(ck2), true);
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  // negative-only test keeps NaN flowing instead of silencing it to zero
  for (auto& x : out.v) x = x < T(0) ? T(0) : x;
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& y = t.node(self).value;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i)
      if (y.v[i] > T(0)) buf->v[i] += g.v[i];
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  for (auto& x : out.v) x = std::exp(x);
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& y = t.node(self).value;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i) buf->v[i] += g.v[i] * y.v[i];
  });
}

template <typename T>
Var<T> log(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  for (auto& x : out.v) {
    if (!(x > T(0))) throw DomainError(cat("log of non-positive value ", x));
    x = std::log(x);
  }
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& xin = t.value(ia);
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i) buf->v[i] += g.v[i] / xin.v[i];
  });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val();
  // NaN passes through so divergence cannot be masked by the clip floor.
  for (auto& x : out.v) x = x < lo ? lo : (x > hi ? hi : x);
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia, lo, hi](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& xin = t.value(ia);
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i)
      if (xin.v[i] >= lo && xin.v[i] <= hi) buf->v[i] += g.v[i];
  });
}

template <typename T>
Var<T> clamp_min(Var<T> a, T lo) {
  return clamp(a, lo, std::numeric_limits<T>::max());
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.val().reshaped(s);
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, int self) {
    Tensor<T> g = t.node(self).grad;
    g.shape = t.value(ia).shape;
    t.accum(ia, g);
  });
}

template <typename T>
Var<T> flatten(Var<T> a) {
  const Shape& s = a.shape();
  int rest = 1;
  for (size_t i = 1; i < s.size(); ++i) rest *= s[i];
  return reshape(a, {s[0], rest});
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& tp = *a.tape;
  T acc = 0;
  for (T x : a.val().v) acc += x;
  int ia = a.id;
  return tp.record(Tensor<T>::scalar(acc), a.requires_grad(), [ia](Tape<T>& t, int self) {
    T g = t.node(self).grad.v[0];
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (auto& x : buf->v) x += g;
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Tape<T>& tp = *a.tape;
  T acc = 0;
  for (T x : a.val().v) acc += x;
  T n = static_cast<T>(a.val().numel());
  int ia = a.id;
  return tp.record(Tensor<T>::scalar(acc / n), a.requires_grad(), [ia, n](Tape<T>& t, int self) {
    T g = t.node(self).grad.v[0] / n;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (auto& x : buf->v) x += g;
  });
}

// Sum over one axis of a 2-d tensor.
template <typename T>
Var<T> sum_axis(Var<T> a, int axis) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.val();
  if (av.rank() != 2) throw ShapeError(cat("sum_axis expects 2-d tensor, got ", shape_str(av.shape)));
  if (axis != 0 && axis != 1) throw ParamError(cat("sum_axis axis must be 0 or 1, got ", axis));
  int rows = av.dim(0), cols = av.dim(1);
  Tensor<T> out({axis == 0 ? cols : rows});
  if (axis == 0) {
    for (int j = 0; j < cols; ++j) {
      T acc = 0;
      for (int i = 0; i < rows; ++i) acc += av(i, j);
      out(j) = acc;
    }
  } else {
    for (int i = 0; i < rows; ++i) {
      T acc = 0;
      for (int j = 0; j < cols; ++j) acc += av(i, j);
      out(i) = acc;
    }
  }
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia, axis, rows, cols](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        buf->v[static_cast<size_t>(i) * cols + j] += g.v[static_cast<size_t>(axis == 0 ? j : i)];
  });
}

// Row gather: out[i] = a[i, idx[i]].
template <typename T>
Var<T> gather_rows(Var<T> a, const std::vector<int>& idx) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.val();
  if (av.rank() != 2) throw ShapeError(cat("gather expects 2-d tensor, got ", shape_str(av.shape)));
  int rows = av.dim(0), cols = av.dim(1);
  if (static_cast<int>(idx.size()) != rows)
    throw ShapeError(cat("gather index count ", idx.size(), " != rows ", rows));
  Tensor<T> out({rows});
  for (int i = 0; i < rows; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= cols)
      throw ShapeError(cat("gather index ", idx[static_cast<size_t>(i)], " out of range [0,", cols, ")"));
    out(i) = av(i, idx[static_cast<size_t>(i)]);
  }
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia, idx, cols](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i) buf->v[i * cols + idx[i]] += g.v[i];
  });
}

// Max over one axis of a 2-d tensor. Ties break to the lowest index; the
// subgradient routes to that element.
template <typename T>
Var<T> max_axis(Var<T> a, int axis) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.val();
  if (av.rank() != 2) throw ShapeError(cat("max_axis expects 2-d tensor, got ", shape_str(av.shape)));
  if (axis != 0 && axis != 1) throw ParamError(cat("max_axis axis must be 0 or 1, got ", axis));
  int rows = av.dim(0), cols = av.dim(1);
  int outn = axis == 0 ? cols : rows;
  Tensor<T> out({outn});
  std::vector<int> arg(static_cast<size_t>(outn), 0);
  if (axis == 1) {
    for (int i = 0; i < rows; ++i) {
      T best = av(i, 0);
      int bj = 0;
      for (int j = 1; j < cols; ++j)
        if (av(i, j) > best) {
          best = av(i, j);
          bj = j;
        }
      out(i) = best;
      arg[static_cast<size_t>(i)] = bj;
    }
  } else {
    for (int j = 0; j < cols; ++j) {
      T best = av(0, j);
      int bi = 0;
      for (int i = 1; i < rows; ++i)
        if (av(i, j) > best) {
          best = av(i, j);
          bi = i;
        }
      out(j) = best;
      arg[static_cast<size_t>(j)] = bi;
    }
  }
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(),
                   [ia, axis, cols, arg = std::move(arg)](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (size_t i = 0; i < g.v.size(); ++i) {
      size_t row = axis == 1 ? i : static_cast<size_t>(arg[i]);
      size_t col = axis == 1 ? static_cast<size_t>(arg[i]) : i;
      buf->v[row * cols + col] += g.v[i];
    }
  });
}

// Temperature softmax over the last axis of a 2-d tensor; stabilized by
// row-max subtraction.
template <typename T>
Var<T> softmax_t(Var<T> logits, T tau) {
  if (!(tau > T(0))) throw ParamError(cat("softmax temperature must be > 0, got ", tau));
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& z = logits.val();
  if (z.rank() != 2) throw ShapeError(cat("softmax_t expects 2-d logits, got ", shape_str(z.shape)));
  if (z.dim(1) < 2) throw ShapeError(cat("softmax_t needs class axis >= 2, got ", shape_str(z.shape)));
  int rows = z.dim(0), cols = z.dim(1);
  Tensor<T> out({rows, cols});
  for (int i = 0; i < rows; ++i) {
    T mx = z(i, 0);
    for (int j = 1; j < cols; ++j) mx = std::max(mx, z(i, j));
    T denom = 0;
    for (int j = 0; j < cols; ++j) {
      T e = std::exp((z(i, j) - mx) / tau);
      out(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < cols; ++j) out(i, j) /= denom;
  }
  int ia = logits.id;
  return tp.record(std::move(out), logits.requires_grad(),
                   [ia, tau, rows, cols](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& p = t.node(self).value;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (int i = 0; i < rows; ++i) {
      T dot = 0;
      for (int j = 0; j < cols; ++j) dot += g(i, j) * p(i, j);
      for (int j = 0; j < cols; ++j)
        buf->v[static_cast<size_t>(i) * cols + j] += p(i, j) * (g(i, j) - dot) / tau;
    }
  });
}

// Global average pool: [B,C,H,W] -> [B,C].
template <typename T>
Var<T> avgpool_global(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.val();
  if (av.rank() != 4)
    throw ShapeError(cat("avgpool expects 4-d tensor, got ", shape_str(av.shape)));
  int bsz = av.dim(0), c = av.dim(1), hw = av.dim(2) * av.dim(3);
  Tensor<T> out({bsz, c});
  const T* p = av.v.data();
  for (int e = 0; e < bsz; ++e)
    for (int ch = 0; ch < c; ++ch) {
      T acc = 0;
      const T* src = p + (static_cast<size_t>(e) * c + ch) * hw;
      for (int k = 0; k < hw; ++k) acc += src[k];
      out(e, ch) = acc / static_cast<T>(hw);
    }
  int ia = a.id;
  return tp.record(std::move(out), a.requires_grad(), [ia, bsz, c, hw](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>* buf = t.grad_buffer(ia);
    if (!buf) return;
    for (int e = 0; e < bsz; ++e)
      for (int ch = 0; ch < c; ++ch) {
        T gv = g(e, ch) / static_cast<T>(hw);
        T* dst = buf->v.data() + (static_cast<size_t>(e) * c + ch) * hw;
        for (int k = 0; k < hw; ++k) dst[k] += gv;
      }
  });
}

// ---------------------------------------------------------------------------
// Generic primitive dispatch for the simple arity-1/2 kinds.
// ---------------------------------------------------------------------------

enum class PrimitiveKind { add, sub, mul, matmul, relu, exp, log, sum, mean };

template <typename T>
Var<T> apply_primitive(PrimitiveKind kind, const std::vector<Var<T>>& inputs) {
  auto need = [&](size_t n) {
    if (inputs.size() != n)
      throw ContractError(cat("primitive expects ", n, " inputs, got ", inputs.size()));
  };
  switch (kind) {
    case PrimitiveKind::add: need(2); return add(inputs[0], inputs[1]);
    case PrimitiveKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case PrimitiveKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case PrimitiveKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case PrimitiveKind::relu: need(1); return relu(inputs[0]);
    case PrimitiveKind::exp: need(1); return exp(inputs[0]);
    case PrimitiveKind::log: need(1); return log(inputs[0]);
    case PrimitiveKind::sum: need(1); return sum_all(inputs[0]);
    case PrimitiveKind::mean: need(1); return mean_all(inputs[0]);
  }
  throw ContractError("unknown primitive kind");
}

// ---------------------------------------------------------------------------
// Central finite differences, the gradient oracle. Evaluated coordinate-wise
// in 64-bit regardless of the training scalar type.
// ---------------------------------------------------------------------------

template <typename F>
Tensor<double> finite_difference_gradient(F&& f, const Tensor<double>& x, double h) {
  if (!(h > 0)) throw ParamError(cat("finite difference step must be > 0, got ", h));
  Tensor<double> g(x.shape);
  Tensor<double> probe = x;
  for (size_t i = 0; i < x.v.size(); ++i) {
    double orig = probe.v[i];
    probe.v[i] = orig + h;
    double fp = f(probe);
    probe.v[i] = orig - h;
    double fm = f(probe);
    probe.v[i] = orig;
    g.v[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace robustdistill
