#pragma once

#include <cmath>

#include "spottunet/core/kernels.hpp"
#include "spottunet/core/tape.hpp"

// Feature maps flow through these ops in NHWC layout (batch, height, width,
// channels); convolution kernels are HWIO. Public module interfaces convert
// from the (batch, channels, height, width) convention at the boundary.

namespace spottunet::ad {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw std::logic_error("vars belong to different tapes");
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    Tensor<T> y(xv.shape());
    const std::int64_t n = xv.numel();
    const T* xp = xv.data();
    T* yp = y.data();
    for (std::int64_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
    bool rg = tp.requires_grad(x.id);
    int xid = x.id;
    return tp.make(std::move(y), rg, [xid](Tape<T>& t, typename Tape<T>::Node& nd) {
        Tensor<T>& gx = t.accum_grad(xid);
        const Tensor<T>& yv = nd.value;
        const std::int64_t n2 = yv.numel();
        for (std::int64_t i = 0; i < n2; ++i)
            if (yv[i] > T(0)) gx[i] += nd.grad[i];
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    if (!av.same_shape(bv))
        throw DimensionError("add: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                             shape_to_string(bv.shape()));
    Tensor<T> y(av.shape());
    const std::int64_t n = av.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = av[i] + bv[i];
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    int aid = a.id, bid = b.id;
    return tp.make(std::move(y), rg, [aid, bid](Tape<T>& t, typename Tape<T>::Node& nd) {
        if (t.requires_grad(aid)) {
            Tensor<T>& ga = t.accum_grad(aid);
            for (std::int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += nd.grad[i];
        }
        if (t.requires_grad(bid)) {
            Tensor<T>& gb = t.accum_grad(bid);
            for (std::int64_t i = 0; i < nd.grad.numel(); ++i) gb[i] += nd.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    if (!av.same_shape(bv)) throw DimensionError("mul: shape mismatch");
    Tensor<T> y(av.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) y[i] = av[i] * bv[i];
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    int aid = a.id, bid = b.id;
    return tp.make(std::move(y), rg, [aid, bid](Tape<T>& t, typename Tape<T>::Node& nd) {
        const Tensor<T>& av2 = t.node(aid).value;
        const Tensor<T>& bv2 = t.node(bid).value;
        if (t.requires_grad(aid)) {
            Tensor<T>& ga = t.accum_grad(aid);
            for (std::int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += nd.grad[i] * bv2[i];
        }
        if (t.requires_grad(bid)) {
            Tensor<T>& gb = t.accum_grad(bid);
            for (std::int64_t i = 0; i < nd.grad.numel(); ++i) gb[i] += nd.grad[i] * av2[i];
        }
    });
}

template <typename T>
Var<T> one_minus(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    Tensor<T> y(xv.shape());
    for (std::int64_t i = 0; i < xv.numel(); ++i) y[i] = T(1) - xv[i];
    int xid = x.id;
    return tp.make(std::move(y), tp.requires_grad(x.id),
                   [xid](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gx = t.accum_grad(xid);
                       for (std::int64_t i = 0; i < nd.grad.numel(); ++i) gx[i] -= nd.grad[i];
                   });
}

/// NHWC channel concatenation.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(1) != bv.dim(1) ||
        av.dim(2) != bv.dim(2))
        throw DimensionError("concat_channels: incompatible shapes");
    const int ca = av.dim(3), cb = bv.dim(3);
    const std::int64_t pixels = av.numel() / ca;
    Tensor<T> y({av.dim(0), av.dim(1), av.dim(2), ca + cb});
    for (std::int64_t p = 0; p < pixels; ++p) {
        T* dst = y.data() + p * (ca + cb);
        std::memcpy(dst, av.data() + p * ca, sizeof(T) * static_cast<std::size_t>(ca));
        std::memcpy(dst + ca, bv.data() + p * cb, sizeof(T) * static_cast<std::size_t>(cb));
    }
    bool rg = tp.requires_grad(a.id) || tp.requires_grad(b.id);
    int aid = a.id, bid = b.id;
    return tp.make(std::move(y), rg,
                   [aid, bid, ca, cb, pixels](Tape<T>& t, typename Tape<T>::Node& nd) {
                       if (t.requires_grad(aid)) {
                           Tensor<T>& ga = t.accum_grad(aid);
                           for (std::int64_t p = 0; p < pixels; ++p) {
                               const T* g = nd.grad.data() + p * (ca + cb);
                               T* dst = ga.data() + p * ca;
                               for (int i = 0; i < ca; ++i) dst[i] += g[i];
                           }
                       }
                       if (t.requires_grad(bid)) {
                           Tensor<T>& gb = t.accum_grad(bid);
                           for (std::int64_t p = 0; p < pixels; ++p) {
                               const T* g = nd.grad.data() + p * (ca + cb) + ca;
                               T* dst = gb.data() + p * cb;
                               for (int i = 0; i < cb; ++i) dst[i] += g[i];
                           }
                       }
                   });
}

/// x (B,H,W,C) scaled by a per-sample scalar s (B).
template <typename T>
Var<T> scale_per_sample(Var<T> x, Var<T> s) {
    check_same_tape(x, s);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& sv = tp.value(s);
    if (xv.ndim() != 4 || sv.numel() != xv.dim(0))
        throw DimensionError("scale_per_sample: want (B,H,W,C) and (B)");
    const int bsz = xv.dim(0);
    const std::size_t per = static_cast<std::size_t>(xv.numel() / bsz);
    Tensor<T> y(xv.shape());
    for (int bi = 0; bi < bsz; ++bi) {
        const T f = sv[bi];
        const T* xp = xv.data() + bi * per;
        T* yp = y.data() + bi * per;
        for (std::size_t i = 0; i < per; ++i) yp[i] = f * xp[i];
    }
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(s.id);
    int xid = x.id, sid = s.id;
    return tp.make(std::move(y), rg, [xid, sid, bsz, per](Tape<T>& t, typename Tape<T>::Node& nd) {
        const Tensor<T>& xv2 = t.node(xid).value;
        const Tensor<T>& sv2 = t.node(sid).value;
        if (t.requires_grad(xid)) {
            Tensor<T>& gxt = t.accum_grad(xid);
            for (int bi = 0; bi < bsz; ++bi) {
                const T* g = nd.grad.data() + bi * per;
                T* gx = gxt.data() + bi * per;
                const T f = sv2[bi];
                for (std::size_t i = 0; i < per; ++i) gx[i] += f * g[i];
            }
        }
        if (t.requires_grad(sid)) {
            Tensor<T>& gs = t.accum_grad(sid);
            for (int bi = 0; bi < bsz; ++bi) {
                const T* g = nd.grad.data() + bi * per;
                const T* xp = xv2.data() + bi * per;
                T acc = T(0);
                for (std::size_t i = 0; i < per; ++i) acc += g[i] * xp[i];
                gs[bi] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions (NHWC / HWIO)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int ksize, int stride, int pad) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& wv = tp.value(w);
    if (xv.ndim() != 4) throw DimensionError("conv2d: input must be (B,H,W,C)");
    if (wv.ndim() != 4 || wv.dim(0) != ksize || wv.dim(1) != ksize)
        throw DimensionError("conv2d: weight must be (k,k,Cin,Cout)");
    if (wv.dim(2) != xv.dim(3))
        throw DimensionError("conv2d: weight expects " + std::to_string(wv.dim(2)) +
                             " input channels, got " + std::to_string(xv.dim(3)));
    Tensor<T> y;
    detail::conv_forward(xv, wv, tp.value(b), ksize, stride, pad, y);
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(w.id) || tp.requires_grad(b.id);
    int xid = x.id, wid = w.id, bid = b.id;
    return tp.make(std::move(y), rg,
                   [xid, wid, bid, ksize, stride, pad](Tape<T>& t, typename Tape<T>::Node& nd) {
                       const Tensor<T>& xv2 = t.node(xid).value;
                       const Tensor<T>& wv2 = t.node(wid).value;
                       if (t.requires_grad(xid))
                           detail::conv_backward_input(nd.grad, wv2, ksize, stride, pad,
                                                       t.accum_grad(xid));
                       if (t.requires_grad(wid) || t.requires_grad(bid))
                           detail::conv_backward_params(nd.grad, xv2, ksize, stride, pad,
                                                        t.accum_grad(wid), t.accum_grad(bid));
                   });
}

template <typename T>
Var<T> conv3x3(Var<T> x, Var<T> w, Var<T> b, int stride = 1) {
    return conv2d(x, w, b, 3, stride, 1);
}

template <typename T>
Var<T> conv1x1(Var<T> x, Var<T> w, Var<T> b) {
    return conv2d(x, w, b, 1, 1, 0);
}

template <typename T>
Var<T> conv_transpose2x2(Var<T> x, Var<T> w, Var<T> b) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& wv = tp.value(w);
    if (wv.ndim() != 4 || wv.dim(0) != 2 || wv.dim(1) != 2 || wv.dim(2) != xv.dim(3))
        throw DimensionError("conv_transpose2x2: weight must be (2,2,Cin,Cout)");
    Tensor<T> y;
    detail::conv_transpose2x2_forward(xv, wv, tp.value(b), y);
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(w.id) || tp.requires_grad(b.id);
    int xid = x.id, wid = w.id, bid = b.id;
    return tp.make(std::move(y), rg, [xid, wid, bid](Tape<T>& t, typename Tape<T>::Node& nd) {
        const Tensor<T>& xv2 = t.node(xid).value;
        const Tensor<T>& wv2 = t.node(wid).value;
        Tensor<T>* gx = t.requires_grad(xid) ? &t.accum_grad(xid) : nullptr;
        Tensor<T>* gw = t.requires_grad(wid) ? &t.accum_grad(wid) : nullptr;
        Tensor<T>* gb = t.requires_grad(bid) ? &t.accum_grad(bid) : nullptr;
        detail::conv_transpose2x2_backward(nd.grad, xv2, wv2, gx, gw, gb);
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Instance norm: per-sample, per-channel standardization with affine gain/bias.
template <typename T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.ndim() != 4) throw DimensionError("instance_norm: input must be (B,H,W,C)");
    const int bsz = xv.dim(0), c = xv.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    const Tensor<T>& gv = tp.value(gamma);
    const Tensor<T>& bv = tp.value(beta);
    if (gv.numel() != c || bv.numel() != c) throw DimensionError("instance_norm: affine size");

    Tensor<T> y(xv.shape());
    Tensor<T> mean({bsz, c});
    Tensor<T> invstd({bsz, c});
    for (int bi = 0; bi < bsz; ++bi) {
        const T* xb = xv.data() + static_cast<std::size_t>(bi) * plane * c;
        T* mu = mean.data() + static_cast<std::size_t>(bi) * c;
        T* is = invstd.data() + static_cast<std::size_t>(bi) * c;
        std::vector<T> sum(c, T(0)), sumsq(c, T(0));
        for (std::int64_t p = 0; p < plane; ++p) {
            const T* px = xb + p * c;
            for (int ci = 0; ci < c; ++ci) {
                sum[ci] += px[ci];
                sumsq[ci] += px[ci] * px[ci];
            }
        }
        for (int ci = 0; ci < c; ++ci) {
            mu[ci] = sum[ci] / static_cast<T>(plane);
            T var = sumsq[ci] / static_cast<T>(plane) - mu[ci] * mu[ci];
            if (var < T(0)) var = T(0);
            is[ci] = T(1) / std::sqrt(var + eps);
        }
        T* yb = y.data() + static_cast<std::size_t>(bi) * plane * c;
        for (std::int64_t p = 0; p < plane; ++p) {
            const T* px = xb + p * c;
            T* py = yb + p * c;
            for (int ci = 0; ci < c; ++ci) py[ci] = gv[ci] * (px[ci] - mu[ci]) * is[ci] + bv[ci];
        }
    }
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(gamma.id) || tp.requires_grad(beta.id);
    int xid = x.id, gid = gamma.id, bid = beta.id;
    return tp.make(
        std::move(y), rg,
        [xid, gid, bid, bsz, c, plane, mean = std::move(mean),
         invstd = std::move(invstd)](Tape<T>& t, typename Tape<T>::Node& nd) {
            const Tensor<T>& xv2 = t.node(xid).value;
            const Tensor<T>& gv2 = t.node(gid).value;
            const bool need_x = t.requires_grad(xid);
            const bool need_g = t.requires_grad(gid);
            const bool need_b = t.requires_grad(bid);
            Tensor<T> sum_g({bsz, c}), sum_gx({bsz, c});
            Tensor<T>* gxt = need_x ? &t.accum_grad(xid) : nullptr;
            for (int bi = 0; bi < bsz; ++bi) {
                const T* xb = xv2.data() + static_cast<std::size_t>(bi) * plane * c;
                const T* gb = nd.grad.data() + static_cast<std::size_t>(bi) * plane * c;
                const T* mu = mean.data() + static_cast<std::size_t>(bi) * c;
                const T* is = invstd.data() + static_cast<std::size_t>(bi) * c;
                T* sg = sum_g.data() + static_cast<std::size_t>(bi) * c;
                T* sgx = sum_gx.data() + static_cast<std::size_t>(bi) * c;
                for (std::int64_t p = 0; p < plane; ++p) {
                    const T* px = xb + p * c;
                    const T* pg = gb + p * c;
                    for (int ci = 0; ci < c; ++ci) {
                        sg[ci] += pg[ci];
                        sgx[ci] += pg[ci] * (px[ci] - mu[ci]) * is[ci];
                    }
                }
                if (need_x) {
                    T* gx = gxt->data() + static_cast<std::size_t>(bi) * plane * c;
                    for (std::int64_t p = 0; p < plane; ++p) {
                        const T* px = xb + p * c;
                        const T* pg = gb + p * c;
                        T* pgx = gx + p * c;
                        for (int ci = 0; ci < c; ++ci) {
                            T xhat = (px[ci] - mu[ci]) * is[ci];
                            pgx[ci] += gv2[ci] * is[ci] *
                                       (pg[ci] - sg[ci] / static_cast<T>(plane) -
                                        xhat * sgx[ci] / static_cast<T>(plane));
                        }
                    }
                }
            }
            // batch reduction in fixed order
            for (int bi = 0; bi < bsz; ++bi) {
                if (need_b) {
                    Tensor<T>& g = t.accum_grad(bid);
                    for (int ci = 0; ci < c; ++ci) g[ci] += sum_g.at2(bi, ci);
                }
                if (need_g) {
                    Tensor<T>& g = t.accum_grad(gid);
                    for (int ci = 0; ci < c; ++ci) g[ci] += sum_gx.at2(bi, ci);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling / dense
// ---------------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2x2(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const int bsz = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    if (h % 2 || w % 2) throw DimensionError("avg_pool2x2: odd spatial dims");
    Tensor<T> y({bsz, h / 2, w / 2, c});
    for (int bi = 0; bi < bsz; ++bi)
        for (int i = 0; i < h / 2; ++i)
            for (int j = 0; j < w / 2; ++j) {
                const T* a = xv.data() + xv.idx4(bi, 2 * i, 2 * j, 0);
                const T* b = xv.data() + xv.idx4(bi, 2 * i, 2 * j + 1, 0);
                const T* d = xv.data() + xv.idx4(bi, 2 * i + 1, 2 * j, 0);
                const T* e = xv.data() + xv.idx4(bi, 2 * i + 1, 2 * j + 1, 0);
                T* py = y.data() + y.idx4(bi, i, j, 0);
                for (int ci = 0; ci < c; ++ci) py[ci] = (a[ci] + b[ci] + d[ci] + e[ci]) / T(4);
            }
    int xid = x.id;
    return tp.make(std::move(y), tp.requires_grad(x.id),
                   [xid, bsz, h, w, c](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gx = t.accum_grad(xid);
                       for (int bi = 0; bi < bsz; ++bi)
                           for (int i = 0; i < h / 2; ++i)
                               for (int j = 0; j < w / 2; ++j) {
                                   const T* g = nd.grad.data() + nd.grad.idx4(bi, i, j, 0);
                                   for (int ci = 0; ci < c; ++ci) {
                                       T q = g[ci] / T(4);
                                       gx.at4(bi, 2 * i, 2 * j, ci) += q;
                                       gx.at4(bi, 2 * i, 2 * j + 1, ci) += q;
                                       gx.at4(bi, 2 * i + 1, 2 * j, ci) += q;
                                       gx.at4(bi, 2 * i + 1, 2 * j + 1, ci) += q;
                                   }
                               }
                   });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const int bsz = xv.dim(0), c = xv.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor<T> y({bsz, c});
    for (int bi = 0; bi < bsz; ++bi) {
        const T* xb = xv.data() + static_cast<std::size_t>(bi) * plane * c;
        T* py = y.data() + static_cast<std::size_t>(bi) * c;
        for (std::int64_t p = 0; p < plane; ++p)
            for (int ci = 0; ci < c; ++ci) py[ci] += xb[p * c + ci];
        for (int ci = 0; ci < c; ++ci) py[ci] /= static_cast<T>(plane);
    }
    int xid = x.id;
    return tp.make(std::move(y), tp.requires_grad(x.id),
                   [xid, bsz, c, plane](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gx = t.accum_grad(xid);
                       for (int bi = 0; bi < bsz; ++bi) {
                           const T* g = nd.grad.data() + static_cast<std::size_t>(bi) * c;
                           T* gb = gx.data() + static_cast<std::size_t>(bi) * plane * c;
                           for (std::int64_t p = 0; p < plane; ++p)
                               for (int ci = 0; ci < c; ++ci)
                                   gb[p * c + ci] += g[ci] / static_cast<T>(plane);
                       }
                   });
}

/// x (B,I) * w (O,I)^T + b -> (B,O)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& wv = tp.value(w);
    const Tensor<T>& bv = tp.value(b);
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1))
        throw DimensionError("linear: shape mismatch");
    const int bsz = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
    Tensor<T> y({bsz, out});
    detail::gemm(false, true, bsz, out, in, T(1), xv.data(), in, wv.data(), in, T(0), y.data(),
                 out);
    for (int bi = 0; bi < bsz; ++bi)
        for (int oi = 0; oi < out; ++oi) y.at2(bi, oi) += bv[oi];
    bool rg = tp.requires_grad(x.id) || tp.requires_grad(w.id) || tp.requires_grad(b.id);
    int xid = x.id, wid = w.id, bid = b.id;
    return tp.make(std::move(y), rg,
                   [xid, wid, bid, bsz, in, out](Tape<T>& t, typename Tape<T>::Node& nd) {
                       const Tensor<T>& xv2 = t.node(xid).value;
                       const Tensor<T>& wv2 = t.node(wid).value;
                       if (t.requires_grad(xid))
                           detail::gemm(false, false, bsz, in, out, T(1), nd.grad.data(), out,
                                        wv2.data(), in, T(1), t.accum_grad(xid).data(), in);
                       if (t.requires_grad(wid))
                           detail::gemm(true, false, out, in, bsz, T(1), nd.grad.data(), out,
                                        xv2.data(), in, T(1), t.accum_grad(wid).data(), in);
                       if (t.requires_grad(bid)) {
                           Tensor<T>& gb = t.accum_grad(bid);
                           for (int bi = 0; bi < bsz; ++bi)
                               for (int oi = 0; oi < out; ++oi) gb[oi] += nd.grad.at2(bi, oi);
                       }
                   });
}

// ---------------------------------------------------------------------------
// Routing / loss ops
// ---------------------------------------------------------------------------

/// logits (B,2N) as interleaved pairs, noise (B,2N) constant, temperature tau.
/// Returns the relaxed class-0 probability per pair: (B,N) with entries
/// sigmoid(((l0+g0) - (l1+g1)) / tau).
template <typename T>
Var<T> gumbel_pair_soft(Var<T> logits, const Tensor<T>& noise, T tau) {
    if (tau <= T(0)) throw ConfigError("gumbel temperature must be positive");
    Tape<T>& tp = *logits.tape;
    const Tensor<T>& lv = tp.value(logits);
    if (lv.ndim() != 2 || lv.dim(1) % 2 != 0 || !noise.same_shape(lv))
        throw DimensionError("gumbel_pair_soft: want (B,2N) logits and matching noise");
    const int bsz = lv.dim(0), n = lv.dim(1) / 2;
    Tensor<T> y({bsz, n});
    for (int bi = 0; bi < bsz; ++bi)
        for (int l = 0; l < n; ++l) {
            T d = (lv.at2(bi, 2 * l) + noise.at2(bi, 2 * l) - lv.at2(bi, 2 * l + 1) -
                   noise.at2(bi, 2 * l + 1)) /
                  tau;
            y.at2(bi, l) = T(1) / (T(1) + std::exp(-d));
        }
    int lid = logits.id;
    return tp.make(std::move(y), tp.requires_grad(logits.id),
                   [lid, bsz, n, tau](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gl = t.accum_grad(lid);
                       for (int bi = 0; bi < bsz; ++bi)
                           for (int l = 0; l < n; ++l) {
                               T s = nd.value.at2(bi, l);
                               T d = nd.grad.at2(bi, l) * s * (T(1) - s) / tau;
                               gl.at2(bi, 2 * l) += d;
                               gl.at2(bi, 2 * l + 1) -= d;
                           }
                   });
}

/// Column l of a (B,N) matrix as a (B) vector.
template <typename T>
Var<T> select_column(Var<T> x, int col) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.ndim() != 2 || col < 0 || col >= xv.dim(1))
        throw DimensionError("select_column: bad column " + std::to_string(col));
    const int bsz = xv.dim(0), n = xv.dim(1);
    Tensor<T> y({bsz});
    for (int bi = 0; bi < bsz; ++bi) y[bi] = xv.at2(bi, col);
    int xid = x.id;
    return tp.make(std::move(y), tp.requires_grad(x.id),
                   [xid, col, bsz, n](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gx = t.accum_grad(xid);
                       for (int bi = 0; bi < bsz; ++bi)
                           gx[static_cast<std::size_t>(bi) * n + col] += nd.grad[bi];
                   });
}

/// Forward takes the given hard values; gradient passes to the soft input
/// untouched (straight-through estimator).
template <typename T>
Var<T> straight_through(Var<T> soft, Tensor<T> hard) {
    Tape<T>& tp = *soft.tape;
    if (!hard.same_shape(tp.value(soft))) throw DimensionError("straight_through: shape mismatch");
    int sid = soft.id;
    return tp.make(std::move(hard), tp.requires_grad(soft.id),
                   [sid](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gs = t.accum_grad(sid);
                       for (std::int64_t i = 0; i < nd.grad.numel(); ++i) gs[i] += nd.grad[i];
                   });
}

/// Mean binary cross-entropy over all elements, probabilities clamped to
/// [eps, 1-eps]. Targets must be binary.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets, T eps) {
    check_same_tape(logits, targets);
    Tape<T>& tp = *logits.tape;
    const Tensor<T>& zv = tp.value(logits);
    const Tensor<T>& tv = tp.value(targets);
    if (!zv.same_shape(tv))
        throw DimensionError("bce_with_logits: prediction/target shape mismatch " +
                             shape_to_string(zv.shape()) + " vs " + shape_to_string(tv.shape()));
    const std::int64_t n = zv.numel();
    const double de = static_cast<double>(eps);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double p = 1.0 / (1.0 + std::exp(-static_cast<double>(zv[i])));
        double t = static_cast<double>(tv[i]);
        acc += -(t * std::log(std::max(p, de)) + (1.0 - t) * std::log(std::max(1.0 - p, de)));
    }
    Tensor<T> y({1});
    y[0] = static_cast<T>(acc / static_cast<double>(n));
    int zid = logits.id, tid = targets.id;
    return tp.make(std::move(y), tp.requires_grad(logits.id),
                   [zid, tid, n, eps](Tape<T>& t, typename Tape<T>::Node& nd) {
                       const Tensor<T>& zv2 = t.node(zid).value;
                       const Tensor<T>& tv2 = t.node(tid).value;
                       Tensor<T>& gz = t.accum_grad(zid);
                       const T g = nd.grad[0] / static_cast<T>(n);
                       for (std::int64_t i = 0; i < n; ++i) {
                           T p = T(1) / (T(1) + std::exp(-zv2[i]));
                           // flat where the active log term is clamped
                           bool clamped = tv2[i] > T(0.5) ? p < eps : p > T(1) - eps;
                           if (!clamped) gz[i] += g * (p - tv2[i]);
                       }
                   });
}

/// lambda * mean over batch of sum_l (1 - w[b][l]); w is (B,N).
template <typename T>
Var<T> frozen_share_penalty(Var<T> w, T lambda) {
    if (lambda < T(0)) throw ConfigError("lambda must be non-negative");
    Tape<T>& tp = *w.tape;
    const Tensor<T>& wv = tp.value(w);
    if (wv.ndim() != 2) throw DimensionError("frozen_share_penalty: want (B,N)");
    const int bsz = wv.dim(0);
    double acc = 0.0;
    for (std::int64_t i = 0; i < wv.numel(); ++i) acc += 1.0 - static_cast<double>(wv[i]);
    Tensor<T> y({1});
    y[0] = static_cast<T>(lambda * acc / bsz);
    int wid = w.id;
    return tp.make(std::move(y), tp.requires_grad(w.id),
                   [wid, bsz, lambda](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gw = t.accum_grad(wid);
                       const T g = nd.grad[0] * lambda / static_cast<T>(bsz);
                       for (std::int64_t i = 0; i < gw.numel(); ++i) gw[i] -= g;
                   });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    T acc = T(0);
    for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    Tensor<T> y({1});
    y[0] = acc;
    int xid = x.id;
    return tp.make(std::move(y), tp.requires_grad(x.id),
                   [xid](Tape<T>& t, typename Tape<T>::Node& nd) {
                       Tensor<T>& gx = t.accum_grad(xid);
                       for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += nd.grad[0];
                   });
}

}  // namespace spottunet::ad
