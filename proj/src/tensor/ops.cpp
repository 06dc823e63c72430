// SPDX-License-Identifier: Apache-2.0

#include "deskpt/tensor/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "deskpt/error.hpp"
#include "deskpt/tensor/graph.hpp"

namespace deskpt::ops {

namespace {

template <Real T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <Real T>
using MutMap = Eigen::Map<RowMajor<T>>;

template <Real T>
Tensor<T> finish(OpKind kind, Tensor<T> out, std::vector<Tensor<T>> inputs,
                 typename Graph<T>::BackwardFn backward) {
  if (finite_checks_enabled() && !all_finite<T>(out.data())) {
    throw NumericError(std::string(op_name(kind)) + " produced a non-finite value");
  }
  Graph<T>* graph = active_graph<T>();
  if (graph == nullptr) return out;
  bool track = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor<T>& t) { return t.requires_grad(); });
  if (track) {
    out.set_requires_grad(true);
    graph->record(kind, std::move(inputs), out, std::move(backward));
  }
  return out;
}

int normalize_axis(int axis, int rank) {
  int k = axis < 0 ? axis + rank : axis;
  if (k < 0 || k >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return k;
}

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d) {
    strides[d] = strides[d + 1] * shape[d + 1];
  }
  return strides;
}

// Coalesced iteration space for a binary broadcast.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::int64_t> extents;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  std::int64_t total = 1;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  BroadcastPlan plan;
  plan.out_shape.resize(rank);
  auto sa = contiguous_strides(pa);
  auto sb = contiguous_strides(pb);
  std::vector<std::int64_t> ext, xa, xb;
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    std::int64_t e = std::max(pa[d], pb[d]);
    plan.out_shape[d] = e;
    if (e == 1) continue;
    ext.push_back(e);
    xa.push_back(pa[d] == 1 ? 0 : sa[d]);
    xb.push_back(pb[d] == 1 ? 0 : sb[d]);
  }
  for (std::size_t i = 0; i < ext.size(); ++i) {
    if (!plan.extents.empty()) {
      std::size_t j = plan.extents.size() - 1;
      if (plan.stride_a[j] == xa[i] * ext[i] && plan.stride_b[j] == xb[i] * ext[i]) {
        plan.extents[j] *= ext[i];
        plan.stride_a[j] = xa[i];
        plan.stride_b[j] = xb[i];
        continue;
      }
    }
    plan.extents.push_back(ext[i]);
    plan.stride_a.push_back(xa[i]);
    plan.stride_b.push_back(xb[i]);
  }
  plan.total = shape_numel(plan.out_shape);
  return plan;
}

// f(out_index, a_index, b_index) over the output in row-major order.
template <class F>
void broadcast_loop(const BroadcastPlan& p, F&& f) {
  const int nd = static_cast<int>(p.extents.size());
  if (nd == 0) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  const std::int64_t inner = p.extents[nd - 1];
  const std::int64_t sa = p.stride_a[nd - 1];
  const std::int64_t sb = p.stride_b[nd - 1];
  const std::int64_t outer = p.total / inner;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t ia = 0, ib = 0, io = 0;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t xa = ia, xb = ib;
    for (std::int64_t i = 0; i < inner; ++i, xa += sa, xb += sb) f(io + i, xa, xb);
    io += inner;
    for (int d = nd - 2; d >= 0; --d) {
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (++idx[d] < p.extents[d]) break;
      ia -= p.stride_a[d] * p.extents[d];
      ib -= p.stride_b[d] * p.extents[d];
      idx[d] = 0;
    }
  }
}

// f(out_index, in_index) where the input is read through permuted strides.
template <class F>
void strided_loop(const Shape& extents, const std::vector<std::int64_t>& strides, F&& f) {
  const int nd = static_cast<int>(extents.size());
  const std::int64_t total = shape_numel(extents);
  if (total == 0) return;
  if (nd == 0) {
    f(std::int64_t{0}, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  const std::int64_t inner = extents[nd - 1];
  const std::int64_t s_inner = strides[nd - 1];
  std::int64_t in = 0;
  for (std::int64_t io = 0; io < total; io += inner) {
    std::int64_t x = in;
    for (std::int64_t i = 0; i < inner; ++i, x += s_inner) f(io + i, x);
    for (int d = nd - 2; d >= 0; --d) {
      in += strides[d];
      if (++idx[d] < extents[d]) break;
      in -= strides[d] * extents[d];
      idx[d] = 0;
    }
  }
}

template <Real T, class Fwd, class Bwd>
Tensor<T> binary(OpKind kind, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out_shape);
  {
    auto o = out.mutable_data();
    auto x = a.data();
    auto y = b.data();
    broadcast_loop(plan, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
      o[io] = fwd(x[ia], y[ib]);
    });
  }
  return finish<T>(kind, std::move(out), {a, b},
                   [a, b, plan, bwd](const Tensor<T>& result) {
                     auto g = result.grad();
                     auto x = a.data();
                     auto y = b.data();
                     const bool need_a = a.requires_grad();
                     const bool need_b = b.requires_grad();
                     std::span<T> ga = need_a ? a.mutable_grad() : std::span<T>{};
                     std::span<T> gb = need_b ? b.mutable_grad() : std::span<T>{};
                     broadcast_loop(plan, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                       T da, db;
                       bwd(x[ia], y[ib], g[io], da, db);
                       if (need_a) ga[ia] += da;
                       if (need_b) gb[ib] += db;
                     });
                   });
}

// Elementwise unary op; dfdx(x, y) gives the local derivative from input and output.
template <Real T, class Fwd, class Deriv>
Tensor<T> unary(OpKind kind, const Tensor<T>& x, Fwd fwd, Deriv dfdx) {
  Tensor<T> out(x.shape());
  {
    auto o = out.mutable_data();
    auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
  }
  return finish<T>(kind, std::move(out), {x}, [x, dfdx](const Tensor<T>& result) {
    if (!x.requires_grad()) return;
    auto g = result.grad();
    auto in = x.data();
    auto y = result.data();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g[i] * dfdx(in[i], y[i]);
  });
}

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int d = 0; d < axis; ++d) s.outer *= shape[static_cast<std::size_t>(d)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < shape.size(); ++d) {
    s.inner *= shape[d];
  }
  return s;
}

template <Real T>
Tensor<T> reduce_axis(OpKind kind, const Tensor<T>& x, int axis, bool average) {
  const int ax = normalize_axis(axis, x.rank());
  const auto s = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  Tensor<T> out(out_shape);
  const T factor = average ? T(1) / static_cast<T>(s.n) : T(1);
  {
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::int64_t p = 0; p < s.outer; ++p) {
      for (std::int64_t j = 0; j < s.n; ++j) {
        const T* row = in.data() + (p * s.n + j) * s.inner;
        T* dst = o.data() + p * s.inner;
        for (std::int64_t q = 0; q < s.inner; ++q) dst[q] += row[q];
      }
    }
    if (average) {
      for (auto& v : o) v *= factor;
    }
  }
  return finish<T>(kind, std::move(out), {x}, [x, s, factor](const Tensor<T>& result) {
    if (!x.requires_grad()) return;
    auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::int64_t p = 0; p < s.outer; ++p) {
      for (std::int64_t j = 0; j < s.n; ++j) {
        T* dst = gx.data() + (p * s.n + j) * s.inner;
        const T* src = g.data() + p * s.inner;
        for (std::int64_t q = 0; q < s.inner; ++q) dst[q] += src[q] * factor;
      }
    }
  });
}

template <Real T>
Tensor<T> reduce_all(OpKind kind, const Tensor<T>& x, bool average) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T factor = average ? T(1) / static_cast<T>(std::max<std::int64_t>(1, x.numel())) : T(1);
  Tensor<T> out = Tensor<T>::scalar(acc * factor);
  return finish<T>(kind, std::move(out), {x}, [x, factor](const Tensor<T>& result) {
    if (!x.requires_grad()) return;
    const T g = result.grad()[0] * factor;
    for (auto& v : x.mutable_grad()) v += g;
  });
}

}  // namespace

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const bool shared = b.rank() == 2;
  if (!shared && !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                             b.shape().end() - 2)) {
    throw ShapeError("matmul batch dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  if (!shared && a.rank() != b.rank()) {
    throw ShapeError("matmul batch ranks differ");
  }
  const std::int64_t batch = m * k == 0 ? 0 : a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  const std::int64_t b_rows = transpose_b ? n : k;
  const std::int64_t b_cols = transpose_b ? k : n;
  {
    auto pa = a.data().data();
    auto pb = b.data().data();
    auto pc = out.mutable_data().data();
    const std::int64_t rows = shared ? batch * m : m;
    const std::int64_t reps = shared ? 1 : batch;
    for (std::int64_t r = 0; r < reps; ++r) {
      ConstMap<T> A(pa + r * m * k, rows, k);
      ConstMap<T> B(pb + (shared ? 0 : r * k * n), b_rows, b_cols);
      MutMap<T> C(pc + r * m * n, rows, n);
      if (transpose_b) {
        C.noalias() = A * B.transpose();
      } else {
        C.noalias() = A * B;
      }
    }
  }

  return finish<T>(
      OpKind::matmul, std::move(out), {a, b},
      [a, b, m, k, n, batch, shared, transpose_b, b_rows, b_cols](const Tensor<T>& result) {
        const T* pg = result.grad().data();
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        const std::int64_t rows = shared ? batch * m : m;
        const std::int64_t reps = shared ? 1 : batch;
        T* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
        T* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
        for (std::int64_t r = 0; r < reps; ++r) {
          ConstMap<T> A(pa + r * m * k, rows, k);
          ConstMap<T> B(pb + (shared ? 0 : r * k * n), b_rows, b_cols);
          ConstMap<T> G(pg + r * m * n, rows, n);
          if (ga) {
            MutMap<T> GA(ga + r * m * k, rows, k);
            if (transpose_b) {
              GA.noalias() += G * B;
            } else {
              GA.noalias() += G * B.transpose();
            }
          }
          if (gb) {
            MutMap<T> GB(gb + (shared ? 0 : r * k * n), b_rows, b_cols);
            if (transpose_b) {
              GB.noalias() += G.transpose() * A;
            } else {
              GB.noalias() += A.transpose() * G;
            }
          }
        }
      });
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      OpKind::add, a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      OpKind::sub, a, b, [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      OpKind::mul, a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

template <Real T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      OpKind::div, a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>(
      OpKind::scale, x, [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <Real T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      OpKind::exp, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <Real T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      OpKind::log, x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <Real T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary<T>(
      OpKind::sqrt, x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return T(0.5) / y; });
}

template <Real T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>(
      OpKind::square, x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <Real T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      OpKind::sigmoid, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <Real T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      OpKind::silu, x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <Real T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce_all(OpKind::sum, x, false);
}

template <Real T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  return reduce_axis(OpKind::sum, x, axis, false);
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x) {
  return reduce_all(OpKind::mean, x, true);
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  return reduce_axis(OpKind::mean, x, axis, true);
}

template <Real T>
Tensor<T> rms_normalize(const Tensor<T>& x, double eps) {
  if (x.rank() < 1) throw ShapeError("rms_normalize needs rank >= 1");
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = n == 0 ? 0 : x.numel() / n;
  Tensor<T> out(x.shape());
  std::vector<T> inv_rms(static_cast<std::size_t>(rows));
  {
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* src = in.data() + r * n;
      T* dst = o.data() + r * n;
      T ms = 0;
      for (std::int64_t i = 0; i < n; ++i) ms += src[i] * src[i];
      ms /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(ms + static_cast<T>(eps));
      inv_rms[static_cast<std::size_t>(r)] = inv;
      for (std::int64_t i = 0; i < n; ++i) dst[i] = src[i] * inv;
    }
  }
  return finish<T>(OpKind::rms_normalize, std::move(out), {x},
                   [x, n, rows, inv_rms = std::move(inv_rms)](const Tensor<T>& result) {
                     if (!x.requires_grad()) return;
                     auto g = result.grad();
                     auto y = result.data();
                     auto gx = x.mutable_grad();
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const T* gr = g.data() + r * n;
                       const T* yr = y.data() + r * n;
                       T dot = 0;
                       for (std::int64_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
                       dot /= static_cast<T>(n);
                       const T inv = inv_rms[static_cast<std::size_t>(r)];
                       T* dst = gx.data() + r * n;
                       for (std::int64_t i = 0; i < n; ++i) dst[i] += (gr[i] - yr[i] * dot) * inv;
                     }
                   });
}

template <Real T>
Tensor<T> causal_softmax(const Tensor<T>& scores) {
  if (scores.rank() < 2 || scores.dim(-1) != scores.dim(-2)) {
    throw ShapeError("causal_softmax expects (..., T, T), got " + shape_str(scores.shape()));
  }
  const std::int64_t t = scores.dim(-1);
  const std::int64_t mats = t == 0 ? 0 : scores.numel() / (t * t);
  Tensor<T> out(scores.shape());
  {
    auto in = scores.data();
    auto o = out.mutable_data();
    for (std::int64_t b = 0; b < mats; ++b) {
      for (std::int64_t i = 0; i < t; ++i) {
        const T* src = in.data() + (b * t + i) * t;
        T* dst = o.data() + (b * t + i) * t;
        T mx = src[0];
        for (std::int64_t j = 1; j <= i; ++j) mx = std::max(mx, src[j]);
        T z = 0;
        for (std::int64_t j = 0; j <= i; ++j) {
          dst[j] = std::exp(src[j] - mx);
          z += dst[j];
        }
        const T inv = T(1) / z;
        for (std::int64_t j = 0; j <= i; ++j) dst[j] *= inv;
      }
    }
  }
  return finish<T>(OpKind::causal_softmax, std::move(out), {scores},
                   [scores, t, mats](const Tensor<T>& result) {
                     if (!scores.requires_grad()) return;
                     auto g = result.grad();
                     auto p = result.data();
                     auto gx = scores.mutable_grad();
                     for (std::int64_t b = 0; b < mats; ++b) {
                       for (std::int64_t i = 0; i < t; ++i) {
                         const std::int64_t base = (b * t + i) * t;
                         T dot = 0;
                         for (std::int64_t j = 0; j <= i; ++j) dot += p[base + j] * g[base + j];
                         for (std::int64_t j = 0; j <= i; ++j) {
                           gx[base + j] += p[base + j] * (g[base + j] - dot);
                         }
                       }
                     }
                   });
}

template <Real T>
Tensor<T> embed_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids,
                       const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (shape_numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw ShapeError("id buffer does not fit shape " + shape_str(ids_shape));
  }
  const std::int64_t vocab = table.dim(0);
  const std::int64_t width = table.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  Tensor<T> out(out_shape);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  {
    auto src = table.data();
    auto dst = out.mutable_data();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (saved[i] < 0 || saved[i] >= vocab) {
        throw ShapeError("token id " + std::to_string(saved[i]) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
      std::copy_n(src.data() + saved[i] * width, width,
                  dst.data() + static_cast<std::int64_t>(i) * width);
    }
  }
  return finish<T>(OpKind::embed_lookup, std::move(out), {table},
                   [table, width, saved = std::move(saved)](const Tensor<T>& result) {
                     if (!table.requires_grad()) return;
                     auto g = result.grad();
                     auto gt = table.mutable_grad();
                     for (std::size_t i = 0; i < saved.size(); ++i) {
                       T* dst = gt.data() + saved[i] * width;
                       const T* src = g.data() + static_cast<std::int64_t>(i) * width;
                       for (std::int64_t c = 0; c < width; ++c) dst[c] += src[c];
                     }
                   });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& x, int dim0, int dim1) {
  const int d0 = normalize_axis(dim0, x.rank());
  const int d1 = normalize_axis(dim1, x.rank());
  Shape out_shape = x.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  auto strides = contiguous_strides(x.shape());
  std::swap(strides[d0], strides[d1]);
  Tensor<T> out(out_shape);
  {
    auto in = x.data();
    auto o = out.mutable_data();
    strided_loop(out_shape, strides, [&](std::int64_t io, std::int64_t ii) { o[io] = in[ii]; });
  }
  return finish<T>(OpKind::transpose, std::move(out), {x},
                   [x, out_shape, strides](const Tensor<T>& result) {
                     if (!x.requires_grad()) return;
                     auto g = result.grad();
                     auto gx = x.mutable_grad();
                     strided_loop(out_shape, strides,
                                  [&](std::int64_t io, std::int64_t ii) { gx[ii] += g[io]; });
                   });
}

template <Real T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape allows a single -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("cannot infer reshape of " + shape_str(x.shape()) + " to " +
                       shape_str(shape));
    }
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> copy(x.data().begin(), x.data().end());
  Tensor<T> out(std::move(shape), std::move(copy));
  return finish<T>(OpKind::reshape, std::move(out), {x}, [x](const Tensor<T>& result) {
    if (!x.requires_grad()) return;
    auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <Real T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(axis, x.rank());
  const auto s = split_axis(x.shape(), ax);
  if (start < 0 || length < 0 || start + length > s.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of extent " + std::to_string(s.n));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  Tensor<T> out(out_shape);
  {
    auto in = x.data();
    auto o = out.mutable_data();
    const std::int64_t chunk = length * s.inner;
    for (std::int64_t p = 0; p < s.outer; ++p) {
      std::copy_n(in.data() + (p * s.n + start) * s.inner, chunk, o.data() + p * chunk);
    }
  }
  return finish<T>(OpKind::slice, std::move(out), {x},
                   [x, s, start, length](const Tensor<T>& result) {
                     if (!x.requires_grad()) return;
                     auto g = result.grad();
                     auto gx = x.mutable_grad();
                     const std::int64_t chunk = length * s.inner;
                     for (std::int64_t p = 0; p < s.outer; ++p) {
                       T* dst = gx.data() + (p * s.n + start) * s.inner;
                       const T* src = g.data() + p * chunk;
                       for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                     }
                   });
}

template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int ax = normalize_axis(axis, xs.front().rank());
  Shape out_shape = xs.front().shape();
  std::int64_t total = 0;
  for (const auto& t : xs) {
    if (t.rank() != xs.front().rank()) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < t.rank(); ++d) {
      if (d != ax && t.shape()[d] != out_shape[d]) {
        throw ShapeError("concat extent mismatch: " + shape_str(t.shape()) + " vs " +
                         shape_str(out_shape));
      }
    }
    total += t.shape()[ax];
  }
  out_shape[ax] = total;
  const auto so = split_axis(out_shape, ax);
  Tensor<T> out(out_shape);
  {
    auto o = out.mutable_data();
    std::int64_t offset = 0;
    for (const auto& t : xs) {
      const std::int64_t chunk = t.shape()[ax] * so.inner;
      auto in = t.data();
      for (std::int64_t p = 0; p < so.outer; ++p) {
        std::copy_n(in.data() + p * chunk, chunk, o.data() + p * so.n * so.inner + offset);
      }
      offset += chunk;
    }
  }
  return finish<T>(OpKind::concat, std::move(out), xs, [xs, so, ax](const Tensor<T>& result) {
    auto g = result.grad();
    std::int64_t offset = 0;
    for (const auto& t : xs) {
      const std::int64_t chunk = t.shape()[ax] * so.inner;
      if (t.requires_grad()) {
        auto gt = t.mutable_grad();
        for (std::int64_t p = 0; p < so.outer; ++p) {
          const T* src = g.data() + p * so.n * so.inner + offset;
          T* dst = gt.data() + p * chunk;
          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

template <Real T>
Tensor<T> rotate_half(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(-1) % 2 != 0) {
    throw ShapeError("rotate_half needs an even last axis, got " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  {
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < in.size(); i += 2) {
      o[i] = -in[i + 1];
      o[i + 1] = in[i];
    }
  }
  return finish<T>(OpKind::rotate_half, std::move(out), {x}, [x](const Tensor<T>& result) {
    if (!x.requires_grad()) return;
    auto g = result.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); i += 2) {
      gx[i] += g[i + 1];
      gx[i + 1] -= g[i];
    }
  });
}

#define DESKPT_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> log(const Tensor<T>&);                                                   \
  template Tensor<T> sqrt(const Tensor<T>&);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> silu(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> sum(const Tensor<T>&, int);                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&, int);                                             \
  template Tensor<T> rms_normalize(const Tensor<T>&, double);                                 \
  template Tensor<T> causal_softmax(const Tensor<T>&);                                        \
  template Tensor<T> embed_lookup(const Tensor<T>&, std::span<const std::int32_t>,            \
                                  const Shape&);                                              \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                              \
  template Tensor<T> rotate_half(const Tensor<T>&);

DESKPT_INSTANTIATE_OPS(float)
DESKPT_INSTANTIATE_OPS(double)

#undef DESKPT_INSTANTIATE_OPS

}  // namespace deskpt::ops
