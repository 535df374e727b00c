#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "voxloc/detail/gemm.hpp"
#include "voxloc/tape.hpp"
#include "voxloc/threadpool.hpp"

// Differentiable op set: convolution, transposed convolution, linear,
// elementwise, softmax, pooling, concat, broadcast-add, attention gathers
// and the stochastic/likelihood nodes. Each op appends one tape node whose
// closure accumulates into the inputs' gradient buffers.
namespace voxloc::ops {

namespace detail_ops {

template <typename F>
void for_range(std::size_t n, F&& f) {
  if (n >= 32768) {
    ThreadPool::global().parallel_ranges(n, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) f(i);
    });
  } else {
    for (std::size_t i = 0; i < n; ++i) f(i);
  }
}

// shapes equal, or b broadcast along the batch axis (b.N == 1)
inline bool bcast_ok(const Shape& a, const Shape& b) {
  if (a == b) return true;
  if (a.rank != b.rank || b.d[0] != 1) return false;
  for (int i = 1; i < a.rank; ++i)
    if (a.d[i] != b.d[i]) return false;
  return true;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}

}  // namespace detail_ops

// ---------------------------------------------------------------------------
// elementwise

template <typename T, typename FwdFn, typename BwdFn>
Var elementwise_unary(Tape<T>& tape, Var x, FwdFn fwd, BwdFn dydx_from_xy, const char* name) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  detail_ops::for_range(xv.numel(), [&](std::size_t i) { op[i] = fwd(xp[i]); });
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, name);
  if (ng) {
    auto bw = [x, y, dydx_from_xy](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& xv2 = t.value(x);
      const Tensor<T>& yv2 = t.value(y);
      Tensor<T>& gx = t.grad(x);
      const T* gp = g.data();
      const T* xp2 = xv2.data();
      const T* yp2 = yv2.data();
      T* gxp = gx.data();
      detail_ops::for_range(g.numel(),
                            [&](std::size_t i) { gxp[i] += gp[i] * dydx_from_xy(xp2[i], yp2[i]); });
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  return elementwise_unary(
      tape, x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T, T y) { return y * (T{1} - y); }, "sigmoid");
}

template <typename T>
Var tanh_op(Tape<T>& tape, Var x) {
  return elementwise_unary(
      tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; }, "tanh");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  return elementwise_unary(
      tape, x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; }, "relu");
}

template <typename T>
Var exp_op(Tape<T>& tape, Var x) {
  return elementwise_unary(
      tape, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Var square(Tape<T>& tape, Var x) {
  return elementwise_unary(
      tape, x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; }, "square");
}

template <typename T>
Var scale(Tape<T>& tape, Var x, double k) {
  T kk = static_cast<T>(k);
  return elementwise_unary(
      tape, x, [kk](T v) { return kk * v; }, [kk](T, T) { return kk; }, "scale");
}

template <typename T>
Var add_scalar(Tape<T>& tape, Var x, double k) {
  T kk = static_cast<T>(k);
  return elementwise_unary(
      tape, x, [kk](T v) { return v + kk; }, [](T, T) { return T{1}; }, "add_scalar");
}

namespace detail_ops {

enum class BinKind { Add, Sub, Mul };

template <typename T>
Var binary(Tape<T>& tape, Var a, Var b, BinKind kind, const char* name) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require(bcast_ok(av.shape(), bv.shape()),
          std::string(name) + ": shapes " + av.shape().str() + " vs " + bv.shape().str());
  const bool bc = av.shape() != bv.shape();
  const std::size_t stride = bv.numel();
  Tensor<T> out(av.shape());
  const T* ap = av.data();
  const T* bp = bv.data();
  T* op = out.data();
  detail_ops::for_range(av.numel(), [&](std::size_t i) {
    T x = ap[i], y = bp[bc ? i % stride : i];
    op[i] = kind == BinKind::Add ? x + y : kind == BinKind::Sub ? x - y : x * y;
  });
  bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  Var r = tape.push(std::move(out), ng, nullptr, name);
  if (ng) {
    auto bw = [a, b, r, kind, bc, stride](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      const T* gp = g.data();
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad(a);
        T* gap = ga.data();
        if (kind == BinKind::Mul) {
          const T* bp2 = t.value(b).data();
          detail_ops::for_range(g.numel(),
                                [&](std::size_t i) { gap[i] += gp[i] * bp2[bc ? i % stride : i]; });
        } else {
          detail_ops::for_range(g.numel(), [&](std::size_t i) { gap[i] += gp[i]; });
        }
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        T* gbp = gb.data();
        const T* ap2 = t.value(a).data();
        T sign = kind == BinKind::Sub ? T{-1} : T{1};
        // broadcast reduce in fixed order
        for (std::size_t i = 0; i < g.numel(); ++i) {
          std::size_t j = bc ? i % stride : i;
          if (kind == BinKind::Mul)
            gbp[j] += gp[i] * ap2[i];
          else
            gbp[j] += sign * gp[i];
        }
      }
    };
    tape.set_backward(r, std::function<void(Tape<T>&)>(bw));
  }
  return r;
}

}  // namespace detail_ops

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  return detail_ops::binary(tape, a, b, detail_ops::BinKind::Add, "add");
}
template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  return detail_ops::binary(tape, a, b, detail_ops::BinKind::Sub, "sub");
}
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  return detail_ops::binary(tape, a, b, detail_ops::BinKind::Mul, "mul");
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Var reshape(Tape<T>& tape, Var x, const Shape& s) {
  const Tensor<T>& xv = tape.value(x);
  detail_ops::require(s.numel() == xv.numel(),
                      "reshape: " + xv.shape().str() + " -> " + s.str());
  Tensor<T> out(s, xv.storage());
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "reshape");
  if (ng) {
    auto bw = [x, y](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var concat_channels(Tape<T>& tape, std::span<const Var> xs) {
  detail_ops::require(!xs.empty(), "concat_channels: empty input list");
  const Shape& s0 = tape.value(xs[0]).shape();
  int ctot = 0;
  bool ng = false;
  for (Var v : xs) {
    const Shape& s = tape.value(v).shape();
    detail_ops::require(s.rank == 4 && s.d[0] == s0.d[0] && s.d[2] == s0.d[2] && s.d[3] == s0.d[3],
                        "concat_channels: incompatible " + s.str() + " vs " + s0.str());
    ctot += s.d[1];
    ng = ng || tape.needs_grad(v);
  }
  const int n = s0.d[0], h = s0.d[2], w = s0.d[3];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> out(Shape::nchw(n, ctot, h, w));
  int coff = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = tape.value(v);
    int c = xv.shape().d[1];
    for (int b = 0; b < n; ++b)
      std::copy_n(xv.data() + b * c * hw, c * hw, out.data() + (b * static_cast<std::size_t>(ctot) + coff) * hw);
    coff += c;
  }
  Var y = tape.push(std::move(out), ng, nullptr, "concat_channels");
  if (ng) {
    std::vector<Var> inputs(xs.begin(), xs.end());
    auto bw = [inputs, y, n, ctot, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      int coff2 = 0;
      for (Var v : inputs) {
        int c = t.value(v).shape().d[1];
        if (t.needs_grad(v)) {
          Tensor<T>& gx = t.grad(v);
          for (int b = 0; b < n; ++b) {
            const T* gp = g.data() + (b * static_cast<std::size_t>(ctot) + coff2) * hw;
            T* gxp = gx.data() + b * c * hw;
            for (std::size_t i = 0; i < c * hw; ++i) gxp[i] += gp[i];
          }
        }
        coff2 += c;
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var concat_cols(Tape<T>& tape, std::span<const Var> xs) {
  detail_ops::require(!xs.empty(), "concat_cols: empty input list");
  const int n = tape.value(xs[0]).shape().d[0];
  int ktot = 0;
  bool ng = false;
  for (Var v : xs) {
    const Shape& s = tape.value(v).shape();
    detail_ops::require(s.rank == 2 && s.d[0] == n, "concat_cols: incompatible " + s.str());
    ktot += s.d[1];
    ng = ng || tape.needs_grad(v);
  }
  Tensor<T> out(Shape::mat(n, ktot));
  int koff = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = tape.value(v);
    int k = xv.shape().d[1];
    for (int b = 0; b < n; ++b) std::copy_n(xv.data() + b * k, k, out.data() + b * ktot + koff);
    koff += k;
  }
  Var y = tape.push(std::move(out), ng, nullptr, "concat_cols");
  if (ng) {
    std::vector<Var> inputs(xs.begin(), xs.end());
    auto bw = [inputs, y, n, ktot](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      int koff2 = 0;
      for (Var v : inputs) {
        int k = t.value(v).shape().d[1];
        if (t.needs_grad(v)) {
          Tensor<T>& gx = t.grad(v);
          for (int b = 0; b < n; ++b)
            for (int i = 0; i < k; ++i) gx[b * k + i] += g[b * ktot + koff2 + i];
        }
        koff2 += k;
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var slice_channels(Tape<T>& tape, Var x, int c0, int c1) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 4 && c0 >= 0 && c1 <= s.d[1] && c0 < c1,
                      "slice_channels: [" + std::to_string(c0) + "," + std::to_string(c1) +
                          ") of " + s.str());
  const int n = s.d[0], c = s.d[1], h = s.d[2], w = s.d[3], cs = c1 - c0;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> out(Shape::nchw(n, cs, h, w));
  for (int b = 0; b < n; ++b)
    std::copy_n(xv.data() + (b * static_cast<std::size_t>(c) + c0) * hw, cs * hw,
                out.data() + b * cs * hw);
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "slice_channels");
  if (ng) {
    auto bw = [x, y, n, c, c0, cs, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      for (int b = 0; b < n; ++b) {
        const T* gp = g.data() + b * cs * hw;
        T* gxp = gx.data() + (b * static_cast<std::size_t>(c) + c0) * hw;
        for (std::size_t i = 0; i < cs * hw; ++i) gxp[i] += gp[i];
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b, bool transpose_b = false) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  detail_ops::require(as.rank == 2 && bs.rank == 2, "matmul: rank-2 required");
  int n = as.d[0], k = as.d[1];
  int m = transpose_b ? bs.d[0] : bs.d[1];
  int kb = transpose_b ? bs.d[1] : bs.d[0];
  detail_ops::require(k == kb, "matmul: inner dims " + as.str() + " vs " + bs.str());
  Tensor<T> out(Shape::mat(n, m));
  if (transpose_b)
    detail::gemm_nt(av.data(), bv.data(), out.data(), n, k, m);
  else
    detail::gemm(av.data(), bv.data(), out.data(), n, k, m);
  bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  Var y = tape.push(std::move(out), ng, nullptr, "matmul");
  if (ng) {
    auto bw = [a, b, y, n, k, m, transpose_b](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& av2 = t.value(a);
      const Tensor<T>& bv2 = t.value(b);
      if (t.needs_grad(a)) {
        // dA = dY * B^T (or dY * B when B was transposed)
        if (transpose_b)
          detail::gemm(g.data(), bv2.data(), t.grad(a).data(), n, m, k, true);
        else
          detail::gemm_nt(g.data(), bv2.data(), t.grad(a).data(), n, m, k, true);
      }
      if (t.needs_grad(b)) {
        if (transpose_b)
          detail::gemm_tn(g.data(), av2.data(), t.grad(b).data(), m, n, k, true);
        else
          detail::gemm_tn(av2.data(), g.data(), t.grad(b).data(), k, n, m, true);
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// x (N,in) * w(out,in)^T + b(out)
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const Shape& xs = tape.value(x).shape();
  const Shape& ws = tape.value(w).shape();
  detail_ops::require(xs.rank == 2 && ws.rank == 2 && xs.d[1] == ws.d[1],
                      "linear: " + xs.str() + " vs weight " + ws.str());
  Var y = matmul(tape, x, w, /*transpose_b=*/true);
  // bias as (1,out) broadcast-add
  Var br = reshape(tape, b, Shape::mat(1, tape.value(b).shape().d[0]));
  return add(tape, y, br);
}

// ---------------------------------------------------------------------------
// convolution

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(w);
  const Shape& xs = xv.shape();
  const Shape& ws = wv.shape();
  detail_ops::require(xs.rank == 4 && ws.rank == 4, "conv2d: rank-4 required");
  detail_ops::require(stride >= 1, "conv2d: stride >= 1");
  detail_ops::require(
      xs.d[1] == ws.d[1],
      "conv2d: input channels " + xs.str() + " do not match weights " + ws.str());
  auto d = detail::conv_dims(xs, ws, stride, pad);
  detail_ops::require(d.ho >= 1 && d.wo >= 1, "conv2d: empty output for " + xs.str());
  const std::size_t R = static_cast<std::size_t>(d.n) * d.ho * d.wo;
  const std::size_t K = static_cast<std::size_t>(d.ci) * d.kh * d.kw;

  std::vector<T> col(R * K);
  detail::im2col(xv.data(), col.data(), d);
  std::vector<T> rows(R * d.co);
  detail::gemm_nt(col.data(), wv.data(), rows.data(), R, K, d.co);
  Tensor<T> out(Shape::nchw(d.n, d.co, d.ho, d.wo));
  detail::rows_to_nchw(rows.data(), out.data(), d.n, d.co, d.ho, d.wo);
  if (b.valid()) {
    const Tensor<T>& bv = tape.value(b);
    detail_ops::require(bv.shape().rank == 1 && bv.shape().d[0] == d.co, "conv2d: bias shape");
    const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
    T* op = out.data();
    for (int n = 0; n < d.n; ++n)
      for (int c = 0; c < d.co; ++c) {
        T bias = bv[c];
        T* p = op + (n * static_cast<std::size_t>(d.co) + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] += bias;
      }
  }
  bool ng = tape.needs_grad(x) || tape.needs_grad(w) || (b.valid() && tape.needs_grad(b));
  Var y = tape.push(std::move(out), ng, nullptr, "conv2d");
  if (ng) {
    auto bw = [x, w, b, y, d, R, K](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      std::vector<T> grows(R * d.co);
      detail::nchw_to_rows(g.data(), grows.data(), d.n, d.co, d.ho, d.wo);
      if (t.needs_grad(w) || t.needs_grad(x)) {
        // col is rebuilt rather than cached to keep peak memory flat
        std::vector<T> col2(R * K);
        detail::im2col(t.value(x).data(), col2.data(), d);
        if (t.needs_grad(w))
          detail::gemm_tn(grows.data(), col2.data(), t.grad(w).data(), d.co, R, K, true);
        if (t.needs_grad(x)) {
          std::vector<T> dcol(R * K);
          detail::gemm(grows.data(), t.value(w).data(), dcol.data(), R, d.co, K);
          detail::col2im(dcol.data(), t.grad(x).data(), d);
        }
      }
      if (b.valid() && t.needs_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
        for (int n = 0; n < d.n; ++n)
          for (int c = 0; c < d.co; ++c) {
            const T* p = g.data() + (n * static_cast<std::size_t>(d.co) + c) * hw;
            T acc{0};
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            gb[c] += acc;
          }
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// weights (ci, co, kh, kw); out spatial = (in-1)*stride - 2*pad + k
template <typename T>
Var conv2d_transpose(Tape<T>& tape, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(w);
  const Shape& xs = xv.shape();
  const Shape& ws = wv.shape();
  detail_ops::require(xs.rank == 4 && ws.rank == 4 && xs.d[1] == ws.d[0],
                      "conv2d_transpose: " + xs.str() + " vs weights " + ws.str());
  const int n = xs.d[0], ci = xs.d[1], h = xs.d[2], w_in = xs.d[3];
  const int co = ws.d[1], kh = ws.d[2], kw = ws.d[3];
  const int ho = (h - 1) * stride - 2 * pad + kh;
  const int wo = (w_in - 1) * stride - 2 * pad + kw;
  detail_ops::require(ho >= 1 && wo >= 1, "conv2d_transpose: empty output");

  // mirrored conv geometry: "input" of the dual conv is the output here
  detail::ConvDims d;
  d.n = n; d.ci = co; d.h = ho; d.w = wo;
  d.co = ci; d.kh = kh; d.kw = kw;
  d.stride = stride; d.pad = pad; d.ho = h; d.wo = w_in;

  const std::size_t R = static_cast<std::size_t>(n) * h * w_in;
  const std::size_t K = static_cast<std::size_t>(co) * kh * kw;
  std::vector<T> xrows(R * ci);
  detail::nchw_to_rows(xv.data(), xrows.data(), n, ci, h, w_in);
  std::vector<T> col(R * K);
  detail::gemm(xrows.data(), wv.data(), col.data(), R, ci, K);
  Tensor<T> out(Shape::nchw(n, co, ho, wo));
  detail::col2im(col.data(), out.data(), d);
  if (b.valid()) {
    const Tensor<T>& bv = tape.value(b);
    detail_ops::require(bv.shape().rank == 1 && bv.shape().d[0] == co, "conv2d_transpose: bias shape");
    const std::size_t hw = static_cast<std::size_t>(ho) * wo;
    for (int bn = 0; bn < n; ++bn)
      for (int c = 0; c < co; ++c) {
        T bias = bv[c];
        T* p = out.data() + (bn * static_cast<std::size_t>(co) + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] += bias;
      }
  }
  bool ng = tape.needs_grad(x) || tape.needs_grad(w) || (b.valid() && tape.needs_grad(b));
  Var y = tape.push(std::move(out), ng, nullptr, "conv2d_transpose");
  if (ng) {
    auto bw = [x, w, b, y, d, R, K, n, ci, h, w_in, co, ho, wo](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      std::vector<T> dcol(R * K);
      detail::im2col(g.data(), dcol.data(), d);
      if (t.needs_grad(x)) {
        std::vector<T> dxrows(R * ci);
        detail::gemm_nt(dcol.data(), t.value(w).data(), dxrows.data(), R, K, ci);
        detail::rows_to_nchw(dxrows.data(), t.grad(x).data(), n, ci, h, w_in, true);
      }
      if (t.needs_grad(w)) {
        std::vector<T> xrows2(R * ci);
        detail::nchw_to_rows(t.value(x).data(), xrows2.data(), n, ci, h, w_in);
        detail::gemm_tn(xrows2.data(), dcol.data(), t.grad(w).data(), ci, R, K, true);
      }
      if (b.valid() && t.needs_grad(b)) {
        Tensor<T>& gb = t.grad(b);
        const std::size_t hw = static_cast<std::size_t>(ho) * wo;
        for (int bn = 0; bn < n; ++bn)
          for (int c = 0; c < co; ++c) {
            const T* p = g.data() + (bn * static_cast<std::size_t>(co) + c) * hw;
            T acc{0};
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            gb[c] += acc;
          }
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions, softmax, broadcast

template <typename T>
Var softmax(Tape<T>& tape, Var x, bool log_form = false) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 2, "softmax: rank-2 (rows, classes) required");
  const int n = s.d[0], k = s.d[1];
  Tensor<T> out(s);
  for (int r = 0; r < n; ++r) {
    const T* xr = xv.data() + static_cast<std::size_t>(r) * k;
    T* yr = out.data() + static_cast<std::size_t>(r) * k;
    T mx = xr[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
    double denom = 0.0;
    for (int i = 0; i < k; ++i) denom += std::exp(static_cast<double>(xr[i] - mx));
    if (log_form) {
      T lse = mx + static_cast<T>(std::log(denom));
      for (int i = 0; i < k; ++i) yr[i] = xr[i] - lse;
    } else {
      T inv = static_cast<T>(1.0 / denom);
      for (int i = 0; i < k; ++i) yr[i] = std::exp(xr[i] - mx) * inv;
    }
  }
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, log_form ? "log_softmax" : "softmax");
  if (ng) {
    auto bw = [x, y, n, k, log_form](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& yv = t.value(y);
      Tensor<T>& gx = t.grad(x);
      for (int r = 0; r < n; ++r) {
        const T* gr = g.data() + static_cast<std::size_t>(r) * k;
        const T* yr = yv.data() + static_cast<std::size_t>(r) * k;
        T* gxr = gx.data() + static_cast<std::size_t>(r) * k;
        if (log_form) {
          double gs = 0.0;
          for (int i = 0; i < k; ++i) gs += static_cast<double>(gr[i]);
          for (int i = 0; i < k; ++i)
            gxr[i] += gr[i] - static_cast<T>(std::exp(static_cast<double>(yr[i])) * gs);
        } else {
          double dot = 0.0;
          for (int i = 0; i < k; ++i) dot += static_cast<double>(gr[i]) * yr[i];
          for (int i = 0; i < k; ++i) gxr[i] += yr[i] * (gr[i] - static_cast<T>(dot));
        }
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var log_softmax(Tape<T>& tape, Var x) {
  return softmax(tape, x, /*log_form=*/true);
}

// global average over the spatial axes: (N,C,H,W) -> (N,C)
template <typename T>
Var spatial_mean(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 4, "spatial_mean: rank-4 required");
  const int n = s.d[0], c = s.d[1];
  const std::size_t hw = static_cast<std::size_t>(s.d[2]) * s.d[3];
  Tensor<T> out(Shape::mat(n, c));
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci) {
      const T* p = xv.data() + (b * static_cast<std::size_t>(c) + ci) * hw;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
      out[b * c + ci] = static_cast<T>(acc / static_cast<double>(hw));
    }
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "spatial_mean");
  if (ng) {
    auto bw = [x, y, n, c, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      T inv = static_cast<T>(1.0 / static_cast<double>(hw));
      for (int b = 0; b < n; ++b)
        for (int ci = 0; ci < c; ++ci) {
          T gv = g[b * c + ci] * inv;
          T* p = gx.data() + (b * static_cast<std::size_t>(c) + ci) * hw;
          for (std::size_t i = 0; i < hw; ++i) p[i] += gv;
        }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// (N,C) -> (N,C,H,W), value repeated over the spatial grid
template <typename T>
Var broadcast_spatial(Tape<T>& tape, Var x, int h, int w) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 2, "broadcast_spatial: rank-2 required");
  const int n = s.d[0], c = s.d[1];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> out(Shape::nchw(n, c, h, w));
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci) {
      T v = xv[b * c + ci];
      T* p = out.data() + (b * static_cast<std::size_t>(c) + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] = v;
    }
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "broadcast_spatial");
  if (ng) {
    auto bw = [x, y, n, c, hw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      for (int b = 0; b < n; ++b)
        for (int ci = 0; ci < c; ++ci) {
          const T* p = g.data() + (b * static_cast<std::size_t>(c) + ci) * hw;
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
          gx[b * c + ci] += static_cast<T>(acc);
        }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// sum of groups of `group` consecutive batch entries; double accumulation so
// the result is insensitive to context permutation at the 1e-6 level
template <typename T>
Var group_sum(Tape<T>& tape, Var x, int group) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 4 && s.d[0] % group == 0,
                      "group_sum: batch " + s.str() + " not divisible by group");
  const int n_out = s.d[0] / group;
  const std::size_t chw = static_cast<std::size_t>(s.d[1]) * s.d[2] * s.d[3];
  Tensor<T> out(Shape::nchw(n_out, s.d[1], s.d[2], s.d[3]));
  detail_ops::for_range(static_cast<std::size_t>(n_out) * chw, [&](std::size_t j) {
    std::size_t b = j / chw, i = j % chw;
    double acc = 0.0;
    for (int gidx = 0; gidx < group; ++gidx)
      acc += static_cast<double>(xv[(b * group + gidx) * chw + i]);
    out[j] = static_cast<T>(acc);
  });
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "group_sum");
  if (ng) {
    auto bw = [x, y, group, chw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      const int n_out2 = g.shape().d[0];
      for (int b = 0; b < n_out2; ++b)
        for (int gidx = 0; gidx < group; ++gidx) {
          const T* gp = g.data() + b * chw;
          T* gxp = gx.data() + (static_cast<std::size_t>(b) * group + gidx) * chw;
          for (std::size_t i = 0; i < chw; ++i) gxp[i] += gp[i];
        }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var sum_all(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += static_cast<double>(xv[i]);
  bool ng = tape.needs_grad(x);
  Var y = tape.push(Tensor<T>::scalar(static_cast<T>(acc)), ng, nullptr, "sum_all");
  if (ng) {
    auto bw = [x, y](Tape<T>& t) {
      T g = t.grad(y)[0];
      Tensor<T>& gx = t.grad(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var mean_all(Tape<T>& tape, Var x) {
  return scale(tape, sum_all(tape, x), 1.0 / static_cast<double>(tape.value(x).numel()));
}

// per-row gather: out[r] = x[r, idx[r]]
template <typename T>
Var pick_per_row(Tape<T>& tape, Var x, std::vector<int> idx) {
  const Tensor<T>& xv = tape.value(x);
  const Shape& s = xv.shape();
  detail_ops::require(s.rank == 2 && static_cast<int>(idx.size()) == s.d[0],
                      "pick_per_row: index count vs " + s.str());
  const int n = s.d[0], k = s.d[1];
  Tensor<T> out(Shape::vec(n));
  for (int r = 0; r < n; ++r) {
    detail_ops::require(idx[r] >= 0 && idx[r] < k, "pick_per_row: index out of range");
    out[r] = xv[static_cast<std::size_t>(r) * k + idx[r]];
  }
  bool ng = tape.needs_grad(x);
  Var y = tape.push(std::move(out), ng, nullptr, "pick_per_row");
  if (ng) {
    auto bw = [x, y, idx = std::move(idx), k](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(x);
      for (std::size_t r = 0; r < g.numel(); ++r)
        gx[r * k + idx[r]] += g[r];
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// ---------------------------------------------------------------------------
// attention gathers

// key maps (M,C,G,G) for M = batch*ctx images -> (batch, E=ctx*grid*grid, C)
// taking the top-left-aligned grid x grid sub-lattice of each key map
template <typename T>
Var collect_patch_keys(Tape<T>& tape, Var keymaps, int ctx, int grid) {
  const Tensor<T>& kv = tape.value(keymaps);
  const Shape& s = kv.shape();
  detail_ops::require(s.rank == 4 && s.d[0] % ctx == 0 && grid <= s.d[2] && grid <= s.d[3],
                      "collect_patch_keys: " + s.str());
  const int batch = s.d[0] / ctx, c = s.d[1], kh = s.d[2], kw = s.d[3];
  const int entries = ctx * grid * grid;
  Tensor<T> out(Shape::rank3(batch, entries, c));
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < ctx; ++j)
      for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
          int e = (j * grid + gy) * grid + gx;
          T* dst = out.data() + (static_cast<std::size_t>(b) * entries + e) * c;
          const T* src = kv.data() + ((static_cast<std::size_t>(b) * ctx + j) * c) * kh * kw;
          for (int ci = 0; ci < c; ++ci) dst[ci] = src[ci * kh * kw + gy * kw + gx];
        }
  bool ng = tape.needs_grad(keymaps);
  Var y = tape.push(std::move(out), ng, nullptr, "collect_patch_keys");
  if (ng) {
    auto bw = [keymaps, y, batch, ctx, grid, c, kh, kw](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      Tensor<T>& gx = t.grad(keymaps);
      const int entries = ctx * grid * grid;
      for (int b = 0; b < batch; ++b)
        for (int j = 0; j < ctx; ++j)
          for (int gy = 0; gy < grid; ++gy)
            for (int gxp = 0; gxp < grid; ++gxp) {
              int e = (j * grid + gy) * grid + gxp;
              const T* gp = g.data() + (static_cast<std::size_t>(b) * entries + e) * c;
              T* dst = gx.data() + ((static_cast<std::size_t>(b) * ctx + j) * c) * kh * kw;
              for (int ci = 0; ci < c; ++ci) dst[ci * kh * kw + gy * kw + gxp] += gp[ci];
            }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// scores[b,e] = dot(q[b,:], keys[b|0,e,:]); keys batch of 1 is shared
template <typename T>
Var attend_scores(Tape<T>& tape, Var q, Var keys) {
  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(keys);
  const Shape& qs = qv.shape();
  const Shape& ks = kv.shape();
  detail_ops::require(qs.rank == 2 && ks.rank == 3 && qs.d[1] == ks.d[2] &&
                          (ks.d[0] == qs.d[0] || ks.d[0] == 1),
                      "attend_scores: " + qs.str() + " vs keys " + ks.str());
  const int b = qs.d[0], d = qs.d[1], e = ks.d[1];
  const bool shared = ks.d[0] == 1;
  Tensor<T> out(Shape::mat(b, e));
  if (shared) {
    detail::gemm_nt(qv.data(), kv.data(), out.data(), b, d, e);
  } else {
    for (int r = 0; r < b; ++r)
      detail::gemm_nt(qv.data() + static_cast<std::size_t>(r) * d,
                      kv.data() + static_cast<std::size_t>(r) * e * d,
                      out.data() + static_cast<std::size_t>(r) * e, 1, d, e);
  }
  bool ng = tape.needs_grad(q) || tape.needs_grad(keys);
  Var y = tape.push(std::move(out), ng, nullptr, "attend_scores");
  if (ng) {
    auto bw = [q, keys, y, b, d, e, shared](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& qv2 = t.value(q);
      const Tensor<T>& kv2 = t.value(keys);
      if (t.needs_grad(q)) {
        Tensor<T>& gq = t.grad(q);
        if (shared) {
          detail::gemm(g.data(), kv2.data(), gq.data(), b, e, d, true);
        } else {
          for (int r = 0; r < b; ++r)
            detail::gemm(g.data() + static_cast<std::size_t>(r) * e,
                         kv2.data() + static_cast<std::size_t>(r) * e * d,
                         gq.data() + static_cast<std::size_t>(r) * d, 1, e, d, true);
        }
      }
      if (t.needs_grad(keys)) {
        Tensor<T>& gk = t.grad(keys);
        if (shared) {
          detail::gemm_tn(g.data(), qv2.data(), gk.data(), e, b, d, true);
        } else {
          for (int r = 0; r < b; ++r)
            detail::gemm_tn(g.data() + static_cast<std::size_t>(r) * e,
                            qv2.data() + static_cast<std::size_t>(r) * d,
                            gk.data() + static_cast<std::size_t>(r) * e * d, e, 1, d, true);
        }
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// out[b,:] = sum_e w[b,e] * values[b|0,e,:]
template <typename T>
Var attend_mix(Tape<T>& tape, Var w, Var values) {
  const Tensor<T>& wv = tape.value(w);
  const Tensor<T>& vv = tape.value(values);
  const Shape& wsh = wv.shape();
  const Shape& vsh = vv.shape();
  detail_ops::require(wsh.rank == 2 && vsh.rank == 3 && wsh.d[1] == vsh.d[1] &&
                          (vsh.d[0] == wsh.d[0] || vsh.d[0] == 1),
                      "attend_mix: " + wsh.str() + " vs values " + vsh.str());
  const int b = wsh.d[0], e = wsh.d[1], d = vsh.d[2];
  const bool shared = vsh.d[0] == 1;
  Tensor<T> out(Shape::mat(b, d));
  if (shared) {
    detail::gemm(wv.data(), vv.data(), out.data(), b, e, d);
  } else {
    for (int r = 0; r < b; ++r)
      detail::gemm(wv.data() + static_cast<std::size_t>(r) * e,
                   vv.data() + static_cast<std::size_t>(r) * e * d,
                   out.data() + static_cast<std::size_t>(r) * d, 1, e, d);
  }
  bool ng = tape.needs_grad(w) || tape.needs_grad(values);
  Var y = tape.push(std::move(out), ng, nullptr, "attend_mix");
  if (ng) {
    auto bw = [w, values, y, b, e, d, shared](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& wv2 = t.value(w);
      const Tensor<T>& vv2 = t.value(values);
      if (t.needs_grad(w)) {
        Tensor<T>& gw = t.grad(w);
        if (shared) {
          detail::gemm_nt(g.data(), vv2.data(), gw.data(), b, d, e, true);
        } else {
          for (int r = 0; r < b; ++r)
            detail::gemm_nt(g.data() + static_cast<std::size_t>(r) * d,
                            vv2.data() + static_cast<std::size_t>(r) * e * d,
                            gw.data() + static_cast<std::size_t>(r) * e, 1, d, e, true);
        }
      }
      if (t.needs_grad(values)) {
        Tensor<T>& gv = t.grad(values);
        if (shared) {
          detail::gemm_tn(wv2.data(), g.data(), gv.data(), e, b, d, true);
        } else {
          for (int r = 0; r < b; ++r)
            detail::gemm_tn(wv2.data() + static_cast<std::size_t>(r) * e,
                            g.data() + static_cast<std::size_t>(r) * d,
                            gv.data() + static_cast<std::size_t>(r) * e * d, e, 1, d, true);
        }
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// ---------------------------------------------------------------------------
// stochastic and likelihood nodes

// out = mean + exp(log_std) * eps; eps batch of 1 means common random numbers
template <typename T>
Var gaussian_sample(Tape<T>& tape, Var mean, Var log_std, const Tensor<T>& eps) {
  const Tensor<T>& mv = tape.value(mean);
  const Tensor<T>& sv = tape.value(log_std);
  detail_ops::require(mv.shape() == sv.shape(), "gaussian_sample: mean/log_std shape mismatch");
  detail_ops::require(detail_ops::bcast_ok(mv.shape(), eps.shape()) || mv.shape() == eps.shape(),
                      "gaussian_sample: eps shape " + eps.shape().str());
  const bool bc = mv.shape() != eps.shape();
  const std::size_t stride = eps.numel();
  Tensor<T> out(mv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = mv[i] + std::exp(sv[i]) * eps[bc ? i % stride : i];
  bool ng = tape.needs_grad(mean) || tape.needs_grad(log_std);
  Var y = tape.push(std::move(out), ng, nullptr, "gaussian_sample");
  if (ng) {
    auto bw = [mean, log_std, y](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& mv2 = t.value(mean);
      const Tensor<T>& yv2 = t.value(y);
      if (t.needs_grad(mean)) {
        Tensor<T>& gm = t.grad(mean);
        for (std::size_t i = 0; i < g.numel(); ++i) gm[i] += g[i];
      }
      if (t.needs_grad(log_std)) {
        Tensor<T>& gs = t.grad(log_std);
        for (std::size_t i = 0; i < g.numel(); ++i) gs[i] += g[i] * (yv2[i] - mv2[i]);
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

// per-batch-row KL( N(mq, e^lsq) || N(mp, e^lsp) ), summed over the row
template <typename T>
Var kl_diag_gaussian_rows(Tape<T>& tape, Var mq, Var lsq, Var mp, Var lsp) {
  const Tensor<T>& mqv = tape.value(mq);
  const Tensor<T>& lsqv = tape.value(lsq);
  const Tensor<T>& mpv = tape.value(mp);
  const Tensor<T>& lspv = tape.value(lsp);
  detail_ops::require(mqv.shape() == lsqv.shape() && mqv.shape() == mpv.shape() &&
                          mqv.shape() == lspv.shape(),
                      "kl_diag_gaussian: shape mismatch");
  const int n = mqv.shape().d[0];
  const std::size_t per = mqv.numel() / n;
  Tensor<T> out(Shape::vec(n));
  for (int b = 0; b < n; ++b) {
    double acc = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      double dl = static_cast<double>(lspv[i]) - lsqv[i];
      double vq = std::exp(2.0 * static_cast<double>(lsqv[i]));
      double vp = std::exp(2.0 * static_cast<double>(lspv[i]));
      double dm = static_cast<double>(mqv[i]) - mpv[i];
      acc += dl + (vq + dm * dm) / (2.0 * vp) - 0.5;
    }
    out[b] = static_cast<T>(acc);
  }
  bool ng = tape.needs_grad(mq) || tape.needs_grad(lsq) || tape.needs_grad(mp) || tape.needs_grad(lsp);
  Var y = tape.push(std::move(out), ng, nullptr, "kl_diag_gaussian");
  if (ng) {
    auto bw = [mq, lsq, mp, lsp, y, per](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& mqv2 = t.value(mq);
      const Tensor<T>& lsqv2 = t.value(lsq);
      const Tensor<T>& mpv2 = t.value(mp);
      const Tensor<T>& lspv2 = t.value(lsp);
      for (std::size_t i = 0; i < mqv2.numel(); ++i) {
        T gb = g[i / per];
        T vq = std::exp(T{2} * lsqv2[i]);
        T vp = std::exp(T{2} * lspv2[i]);
        T dm = mqv2[i] - mpv2[i];
        if (t.needs_grad(mq)) t.grad(mq)[i] += gb * dm / vp;
        if (t.needs_grad(mp)) t.grad(mp)[i] -= gb * dm / vp;
        if (t.needs_grad(lsq)) t.grad(lsq)[i] += gb * (vq / vp - T{1});
        if (t.needs_grad(lsp)) t.grad(lsp)[i] += gb * (T{1} - (vq + dm * dm) / vp);
      }
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var kl_diag_gaussian(Tape<T>& tape, Var mq, Var lsq, Var mp, Var lsp) {
  return sum_all(tape, kl_diag_gaussian_rows(tape, mq, lsq, mp, lsp));
}

// per-batch-row Gaussian negative log-likelihood with fixed sigma:
// sum over the row of (x-mu)^2/(2 s^2) + log s + 0.5 log 2pi
template <typename T>
Var gaussian_nll_rows(Tape<T>& tape, Var mu, const Tensor<T>& target, double sigma) {
  const Tensor<T>& mv = tape.value(mu);
  detail_ops::require(detail_ops::bcast_ok(mv.shape(), target.shape()) || mv.shape() == target.shape(),
                      "gaussian_nll: target shape " + target.shape().str() + " vs " +
                          mv.shape().str());
  const bool bc = mv.shape() != target.shape();
  const std::size_t stride = target.numel();
  const int n = mv.shape().d[0];
  const std::size_t per = mv.numel() / n;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  const double log_term = std::log(sigma) + 0.5 * std::log(2.0 * 3.14159265358979323846);
  Tensor<T> out(Shape::vec(n));
  for (int b = 0; b < n; ++b) {
    double acc = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      double r = static_cast<double>(mv[i]) - target[bc ? i % stride : i];
      acc += r * r * inv2s2;
    }
    out[b] = static_cast<T>(acc + static_cast<double>(per) * log_term);
  }
  bool ng = tape.needs_grad(mu);
  Var y = tape.push(std::move(out), ng, nullptr, "gaussian_nll");
  if (ng) {
    Tensor<T> tgt = target;
    auto bw = [mu, y, per, bc, stride, tgt = std::move(tgt), sigma](Tape<T>& t) {
      const Tensor<T>& g = t.grad(y);
      const Tensor<T>& mv2 = t.value(mu);
      Tensor<T>& gm = t.grad(mu);
      T inv = static_cast<T>(1.0 / (sigma * sigma));
      for (std::size_t i = 0; i < mv2.numel(); ++i)
        gm[i] += g[i / per] * (mv2[i] - tgt[bc ? i % stride : i]) * inv;
    };
    tape.set_backward(y, std::function<void(Tape<T>&)>(bw));
  }
  return y;
}

template <typename T>
Var gaussian_nll(Tape<T>& tape, Var mu, const Tensor<T>& target, double sigma) {
  return sum_all(tape, gaussian_nll_rows(tape, mu, target, sigma));
}

}  // namespace voxloc::ops
