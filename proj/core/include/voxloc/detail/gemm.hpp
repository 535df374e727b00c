#pragma once

#include <Eigen/Core>
#include <cstddef>

#include "voxloc/tensor.hpp"
#include "voxloc/threadpool.hpp"

namespace voxloc::detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A(n,k) * B(k,m), partitioned over rows of C. Per-element accumulation
// runs over k in a fixed order, so the result is bitwise independent of the
// partition and thread count.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
          bool accumulate = false) {
  ConstMatMap<T> A(a, n, k);
  ConstMatMap<T> B(b, k, m);
  MatMap<T> C(c, n, m);
  auto work = [&](std::size_t r0, std::size_t r1) {
    if (accumulate)
      C.middleRows(r0, r1 - r0).noalias() += A.middleRows(r0, r1 - r0) * B;
    else
      C.middleRows(r0, r1 - r0).noalias() = A.middleRows(r0, r1 - r0) * B;
  };
  if (n * k * m < 65536) {
    work(0, n);
  } else {
    ThreadPool::global().parallel_ranges(n, work);
  }
}

// C = A(n,k) * B(m,k)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
             bool accumulate = false) {
  ConstMatMap<T> A(a, n, k);
  ConstMatMap<T> B(b, m, k);
  MatMap<T> C(c, n, m);
  auto work = [&](std::size_t r0, std::size_t r1) {
    if (accumulate)
      C.middleRows(r0, r1 - r0).noalias() += A.middleRows(r0, r1 - r0) * B.transpose();
    else
      C.middleRows(r0, r1 - r0).noalias() = A.middleRows(r0, r1 - r0) * B.transpose();
  };
  if (n * k * m < 65536) {
    work(0, n);
  } else {
    ThreadPool::global().parallel_ranges(n, work);
  }
}

// C = A(k,n)^T * B(k,m), partitioned over rows of C (columns of A).
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
             bool accumulate = false) {
  ConstMatMap<T> A(a, k, n);
  ConstMatMap<T> B(b, k, m);
  MatMap<T> C(c, n, m);
  auto work = [&](std::size_t r0, std::size_t r1) {
    if (accumulate)
      C.middleRows(r0, r1 - r0).noalias() += A.middleCols(r0, r1 - r0).transpose() * B;
    else
      C.middleRows(r0, r1 - r0).noalias() = A.middleCols(r0, r1 - r0).transpose() * B;
  };
  if (n * k * m < 65536) {
    work(0, n);
  } else {
    ThreadPool::global().parallel_ranges(n, work);
  }
}

struct ConvDims {
  int n, ci, h, w;
  int co, kh, kw;
  int stride, pad;
  int ho, wo;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
  ConvDims d;
  d.n = x.d[0];
  d.ci = x.d[1];
  d.h = x.d[2];
  d.w = x.d[3];
  d.co = w.d[0];
  d.kh = w.d[2];
  d.kw = w.d[3];
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// col[(n,oy,ox), (ci,ky,kx)] = x[n, ci, oy*s-p+ky, ox*s-p+kx] (0 outside)
template <typename T>
void im2col(const T* x, T* col, const ConvDims& d) {
  const std::size_t K = static_cast<std::size_t>(d.ci) * d.kh * d.kw;
  auto work = [&](std::size_t n0, std::size_t n1) {
    for (std::size_t n = n0; n < n1; ++n) {
      for (int oy = 0; oy < d.ho; ++oy) {
        for (int ox = 0; ox < d.wo; ++ox) {
          T* row = col + ((n * d.ho + oy) * d.wo + ox) * K;
          std::size_t k = 0;
          for (int ci = 0; ci < d.ci; ++ci) {
            const T* xc = x + (n * d.ci + ci) * static_cast<std::size_t>(d.h) * d.w;
            for (int ky = 0; ky < d.kh; ++ky) {
              int iy = oy * d.stride - d.pad + ky;
              for (int kx = 0; kx < d.kw; ++kx, ++k) {
                int ix = ox * d.stride - d.pad + kx;
                row[k] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) ? xc[iy * d.w + ix] : T{0};
              }
            }
          }
        }
      }
    }
  };
  ThreadPool::global().parallel_ranges(static_cast<std::size_t>(d.n), work);
}

// scatter-add transpose of im2col; partitioned over n so writes stay disjoint
template <typename T>
void col2im(const T* col, T* x, const ConvDims& d) {
  const std::size_t K = static_cast<std::size_t>(d.ci) * d.kh * d.kw;
  auto work = [&](std::size_t n0, std::size_t n1) {
    for (std::size_t n = n0; n < n1; ++n) {
      for (int oy = 0; oy < d.ho; ++oy) {
        for (int ox = 0; ox < d.wo; ++ox) {
          const T* row = col + ((n * d.ho + oy) * d.wo + ox) * K;
          std::size_t k = 0;
          for (int ci = 0; ci < d.ci; ++ci) {
            T* xc = x + (n * d.ci + ci) * static_cast<std::size_t>(d.h) * d.w;
            for (int ky = 0; ky < d.kh; ++ky) {
              int iy = oy * d.stride - d.pad + ky;
              for (int kx = 0; kx < d.kw; ++kx, ++k) {
                int ix = ox * d.stride - d.pad + kx;
                if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) xc[iy * d.w + ix] += row[k];
              }
            }
          }
        }
      }
    }
  };
  ThreadPool::global().parallel_ranges(static_cast<std::size_t>(d.n), work);
}

// (n, c, h, w) <-> ((n,h,w), c) permuted copies used around the conv GEMMs
template <typename T>
void nchw_to_rows(const T* x, T* rows, int n, int c, int h, int w) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  auto work = [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const T* xb = x + b * c * hw;
      T* rb = rows + b * hw * c;
      for (int ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < hw; ++p) rb[p * c + ci] = xb[ci * hw + p];
    }
  };
  ThreadPool::global().parallel_ranges(static_cast<std::size_t>(n), work);
}

template <typename T>
void rows_to_nchw(const T* rows, T* x, int n, int c, int h, int w, bool accumulate = false) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  auto work = [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const T* rb = rows + b * hw * c;
      T* xb = x + b * c * hw;
      for (int ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < hw; ++p) {
          if (accumulate)
            xb[ci * hw + p] += rb[p * c + ci];
          else
            xb[ci * hw + p] = rb[p * c + ci];
        }
    }
  };
  ThreadPool::global().parallel_ranges(static_cast<std::size_t>(n), work);
}

}  // namespace voxloc::detail
