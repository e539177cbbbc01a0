#pragma once

#include <cblas.h>

#include <cstring>
#include <vector>

#include "spottunet/core/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace spottunet::detail {

// The BLAS is kept single-threaded: these GEMM shapes are small enough that
// OpenBLAS's own threading loses outright, and single-threaded calls keep the
// fixed-chunk parallel scheme below bit-reproducible. Parallelism happens at
// the chunk level instead.
inline void ensure_single_threaded_blas() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    ensure_single_threaded_blas();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
    ensure_single_threaded_blas();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

template <typename T, int Slot = 0>
std::vector<T>& scratch_buffer() {
    thread_local std::vector<T> buf;
    return buf;
}

/// Rows processed per GEMM chunk. Fixed so results do not depend on the
/// number of worker threads.
constexpr int kGemmChunkRows = 4096;

inline int conv_out_size(int in, int ksize, int stride, int pad) {
    return (in + 2 * pad - ksize) / stride + 1;
}

// Layouts: feature maps are NHWC (B,H,W,C); kernels are HWIO (kh,kw,ci,co),
// i.e. a (K x Cout) matrix with K = kh*kw*ci. Patch matrices are row-major
// (pixels x K), which puts every GEMM of the three conv passes in OpenBLAS's
// preferred tall-matrix orientation.

/// Patch rows for one NHWC image; `cols` must hold ho*wo*ksize*ksize*c.
template <typename T>
void im2row(const T* x, int h, int w, int c, int ksize, int stride, int pad, T* cols,
            int ho, int wo) {
    const std::size_t run = static_cast<std::size_t>(c) * sizeof(T);
    T* dst = cols;
    for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
            for (int kh = 0; kh < ksize; ++kh) {
                const int ih = oh * stride + kh - pad;
                if (ih < 0 || ih >= h) {
                    std::memset(dst, 0, run * ksize);
                    dst += static_cast<std::size_t>(ksize) * c;
                    continue;
                }
                const T* row = x + (static_cast<std::size_t>(ih) * w) * c;
                for (int kw = 0; kw < ksize; ++kw) {
                    const int iw = ow * stride + kw - pad;
                    if (iw < 0 || iw >= w)
                        std::memset(dst, 0, run);
                    else
                        std::memcpy(dst, row + static_cast<std::size_t>(iw) * c, run);
                    dst += c;
                }
            }
        }
    }
}

/// Scatter-adds patch rows back onto one NHWC image.
template <typename T>
void row2im_add(const T* cols, int h, int w, int c, int ksize, int stride, int pad, T* x,
                int ho, int wo) {
    const T* src = cols;
    for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
            for (int kh = 0; kh < ksize; ++kh) {
                const int ih = oh * stride + kh - pad;
                if (ih < 0 || ih >= h) {
                    src += static_cast<std::size_t>(ksize) * c;
                    continue;
                }
                T* row = x + (static_cast<std::size_t>(ih) * w) * c;
                for (int kw = 0; kw < ksize; ++kw) {
                    const int iw = ow * stride + kw - pad;
                    if (iw >= 0 && iw < w) {
                        T* dst = row + static_cast<std::size_t>(iw) * c;
                        for (int ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                    }
                    src += c;
                }
            }
        }
    }
}

template <typename T>
void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                  int ksize, int stride, int pad, Tensor<T>& y) {
    const int b = x.dim(0), h = x.dim(1), wd = x.dim(2), c_in = x.dim(3);
    const int c_out = w.dim(3);
    const int ho = conv_out_size(h, ksize, stride, pad);
    const int wo = conv_out_size(wd, ksize, stride, pad);
    const int k = c_in * ksize * ksize;
    const int rows = b * ho * wo;
    y = Tensor<T>({b, ho, wo, c_out});

    const bool direct = (ksize == 1 && stride == 1);
    const T* cols_ptr = nullptr;
    if (direct) {
        cols_ptr = x.data();
    } else {
        auto& cols = scratch_buffer<T>();
        cols.resize(static_cast<std::size_t>(rows) * k);
        for (int bi = 0; bi < b; ++bi)
            im2row(x.data() + static_cast<std::size_t>(bi) * h * wd * c_in, h, wd, c_in, ksize,
                   stride, pad, cols.data() + static_cast<std::size_t>(bi) * ho * wo * k, ho, wo);
        cols_ptr = cols.data();
    }

    const int nchunks = (rows + kGemmChunkRows - 1) / kGemmChunkRows;
    for (int ch = 0; ch < nchunks; ++ch) {
        const int r0 = ch * kGemmChunkRows;
        const int m = std::min(kGemmChunkRows, rows - r0);
        gemm(false, false, m, c_out, k, T(1), cols_ptr + static_cast<std::size_t>(r0) * k, k,
             w.data(), c_out, T(0), y.data() + static_cast<std::size_t>(r0) * c_out, c_out);
    }

    for (int r = 0; r < rows; ++r) {
        T* yr = y.data() + static_cast<std::size_t>(r) * c_out;
        for (int oc = 0; oc < c_out; ++oc) yr[oc] += bias[oc];
    }
}

/// Accumulates into gx (pre-shaped, may hold prior gradient).
template <typename T>
void conv_backward_input(const Tensor<T>& gy, const Tensor<T>& w, int ksize, int stride,
                         int pad, Tensor<T>& gx) {
    const int b = gx.dim(0), h = gx.dim(1), wd = gx.dim(2), c_in = gx.dim(3);
    const int ho = gy.dim(1), wo = gy.dim(2), c_out = gy.dim(3);
    const int k = c_in * ksize * ksize;
    const int rows = b * ho * wo;

    if (ksize == 1 && stride == 1) {
        const int nchunks = (rows + kGemmChunkRows - 1) / kGemmChunkRows;
        for (int ch = 0; ch < nchunks; ++ch) {
            const int r0 = ch * kGemmChunkRows;
            const int m = std::min(kGemmChunkRows, rows - r0);
            gemm(false, true, m, k, c_out, T(1), gy.data() + static_cast<std::size_t>(r0) * c_out,
                 c_out, w.data(), c_out, T(1), gx.data() + static_cast<std::size_t>(r0) * k, k);
        }
        return;
    }

    auto& cols = scratch_buffer<T>();
    cols.resize(static_cast<std::size_t>(rows) * k);
    const int nchunks = (rows + kGemmChunkRows - 1) / kGemmChunkRows;
    for (int ch = 0; ch < nchunks; ++ch) {
        const int r0 = ch * kGemmChunkRows;
        const int m = std::min(kGemmChunkRows, rows - r0);
        gemm(false, true, m, k, c_out, T(1), gy.data() + static_cast<std::size_t>(r0) * c_out,
             c_out, w.data(), c_out, T(0), cols.data() + static_cast<std::size_t>(r0) * k, k);
    }
    for (int bi = 0; bi < b; ++bi)
        row2im_add(cols.data() + static_cast<std::size_t>(bi) * ho * wo * k, h, wd, c_in, ksize,
                   stride, pad, gx.data() + static_cast<std::size_t>(bi) * h * wd * c_in, ho, wo);
}

/// Accumulates into gw / gb. Chunk partials are reduced in fixed chunk order,
/// keeping sums identical for any thread count.
template <typename T>
void conv_backward_params(const Tensor<T>& gy, const Tensor<T>& x, int ksize, int stride,
                          int pad, Tensor<T>& gw, Tensor<T>& gb) {
    const int b = x.dim(0), h = x.dim(1), wd = x.dim(2), c_in = x.dim(3);
    const int ho = gy.dim(1), wo = gy.dim(2), c_out = gy.dim(3);
    const int k = c_in * ksize * ksize;
    const int rows = b * ho * wo;

    const bool direct = (ksize == 1 && stride == 1);
    const T* cols_ptr = nullptr;
    if (direct) {
        cols_ptr = x.data();
    } else {
        auto& cols = scratch_buffer<T>();
        cols.resize(static_cast<std::size_t>(rows) * k);
        for (int bi = 0; bi < b; ++bi)
            im2row(x.data() + static_cast<std::size_t>(bi) * h * wd * c_in, h, wd, c_in, ksize,
                   stride, pad, cols.data() + static_cast<std::size_t>(bi) * ho * wo * k, ho, wo);
        cols_ptr = cols.data();
    }

    const int nchunks = (rows + kGemmChunkRows - 1) / kGemmChunkRows;
    auto& partials = scratch_buffer<T, 1>();
    partials.assign(static_cast<std::size_t>(nchunks) * k * c_out, T(0));
    for (int ch = 0; ch < nchunks; ++ch) {
        const int r0 = ch * kGemmChunkRows;
        const int m = std::min(kGemmChunkRows, rows - r0);
        gemm(true, false, k, c_out, m, T(1), cols_ptr + static_cast<std::size_t>(r0) * k, k,
             gy.data() + static_cast<std::size_t>(r0) * c_out, c_out, T(0),
             partials.data() + static_cast<std::size_t>(ch) * k * c_out, c_out);
    }
    for (int ch = 0; ch < nchunks; ++ch) {
        const T* p = partials.data() + static_cast<std::size_t>(ch) * k * c_out;
        T* g = gw.data();
        for (std::size_t i = 0; i < static_cast<std::size_t>(k) * c_out; ++i) g[i] += p[i];
    }
    for (int r = 0; r < rows; ++r) {
        const T* gr = gy.data() + static_cast<std::size_t>(r) * c_out;
        for (int oc = 0; oc < c_out; ++oc) gb[oc] += gr[oc];
    }
}

// 2x2 stride-2 transposed convolution: exact x2 upsampling with disjoint taps.
// x (B,H,W,Cin), w (2,2,Cin,Cout), y (B,2H,2W,Cout).
template <typename T>
void conv_transpose2x2_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                               Tensor<T>& y) {
    const int b = x.dim(0), h = x.dim(1), wd = x.dim(2), c_in = x.dim(3);
    const int c_out = w.dim(3);
    const int rows = b * h * wd;
    y = Tensor<T>({b, 2 * h, 2 * wd, c_out});
    auto& tmp = scratch_buffer<T>();
    tmp.resize(static_cast<std::size_t>(rows) * c_out);
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const T* wk = w.data() + (static_cast<std::size_t>(dy) * 2 + dx) * c_in * c_out;
            gemm(false, false, rows, c_out, c_in, T(1), x.data(), c_in, wk, c_out, T(0),
                 tmp.data(), c_out);
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < wd; ++j) {
                        const T* src =
                            tmp.data() + ((static_cast<std::size_t>(bi) * h + i) * wd + j) * c_out;
                        T* dst = y.data() + y.idx4(bi, 2 * i + dy, 2 * j + dx, 0);
                        for (int oc = 0; oc < c_out; ++oc) dst[oc] = src[oc] + bias[oc];
                    }
        }
    }
}

template <typename T>
void conv_transpose2x2_backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& w,
                                Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
    const int b = x.dim(0), h = x.dim(1), wd = x.dim(2), c_in = x.dim(3);
    const int c_out = w.dim(3);
    const int rows = b * h * wd;
    auto& sub = scratch_buffer<T>();
    sub.resize(static_cast<std::size_t>(rows) * c_out);
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            // gather the (dy,dx) quadrant of gy
            for (int bi = 0; bi < b; ++bi)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < wd; ++j) {
                        const T* src = gy.data() + gy.idx4(bi, 2 * i + dy, 2 * j + dx, 0);
                        T* dst =
                            sub.data() + ((static_cast<std::size_t>(bi) * h + i) * wd + j) * c_out;
                        std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(c_out));
                    }
            const std::size_t woff = (static_cast<std::size_t>(dy) * 2 + dx) * c_in * c_out;
            if (gx)
                gemm(false, true, rows, c_in, c_out, T(1), sub.data(), c_out, w.data() + woff,
                     c_out, T(1), gx->data(), c_in);
            if (gw)
                gemm(true, false, c_in, c_out, rows, T(1), x.data(), c_in, sub.data(), c_out, T(1),
                     gw->data() + woff, c_out);
            if (gb) {
                T* gbp = gb->data();
                for (int r = 0; r < rows; ++r) {
                    const T* s = sub.data() + static_cast<std::size_t>(r) * c_out;
                    for (int oc = 0; oc < c_out; ++oc) gbp[oc] += s[oc];
                }
            }
        }
    }
}

}  // namespace spottunet::detail
