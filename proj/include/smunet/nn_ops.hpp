#pragma once

#include <Eigen/Core>

#include "smunet/autodiff.hpp"

namespace smunet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Reused per-thread im2col workspace; conv calls are frequent and large.
template <typename T>
std::vector<T>& conv_scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

/// Lowers one d-slab of a (Cin, D, H, W) map to a (Cin*27, slab*H*W) patch
/// matrix for a 3x3x3 kernel with unit padding. Row order: (cin, kd, kh, kw);
/// columns are the output voxels d in [d0, d0+slab). Convolutions run
/// slab-by-slab so the patch matrix stays cache-resident instead of
/// materializing a volume-sized buffer.
template <typename T>
void im2col3_slab(const T* x, std::int64_t cin, Dims3 sp, std::int64_t d0, std::int64_t slab,
                  T* col) {
    const std::int64_t D = sp.d, H = sp.h, W = sp.w;
    const std::int64_t nvox = D * H * W;
    const std::int64_t ncols = slab * H * W;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < cin; ++c) {
        const T* xc = x + c * nvox;
        for (std::int64_t kd = -1; kd <= 1; ++kd)
            for (std::int64_t kh = -1; kh <= 1; ++kh)
                for (std::int64_t kw = -1; kw <= 1; ++kw, ++row) {
                    T* dst = col + row * ncols;
                    for (std::int64_t od = d0; od < d0 + slab; ++od) {
                        const std::int64_t id = od + kd;
                        T* dslice = dst + (od - d0) * H * W;
                        if (id < 0 || id >= D) {
                            std::fill(dslice, dslice + H * W, T(0));
                            continue;
                        }
                        for (std::int64_t oh = 0; oh < H; ++oh) {
                            const std::int64_t ih = oh + kh;
                            T* drow = dslice + oh * W;
                            if (ih < 0 || ih >= H) {
                                std::fill(drow, drow + W, T(0));
                                continue;
                            }
                            const T* srow = xc + (id * H + ih) * W;
                            if (kw == 0) {
                                std::memcpy(drow, srow, sizeof(T) * W);
                            } else if (kw < 0) {
                                drow[0] = T(0);
                                std::memcpy(drow + 1, srow, sizeof(T) * (W - 1));
                            } else {
                                std::memcpy(drow, srow + 1, sizeof(T) * (W - 1));
                                drow[W - 1] = T(0);
                            }
                        }
                    }
                }
    }
}

/// Adjoint of im2col3_slab: scatter-adds one slab's patch-gradient matrix
/// back into dx.
template <typename T>
void col2im3_slab(const T* col, std::int64_t cin, Dims3 sp, std::int64_t d0, std::int64_t slab,
                  T* dx) {
    const std::int64_t D = sp.d, H = sp.h, W = sp.w;
    const std::int64_t nvox = D * H * W;
    const std::int64_t ncols = slab * H * W;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < cin; ++c) {
        T* xc = dx + c * nvox;
        for (std::int64_t kd = -1; kd <= 1; ++kd)
            for (std::int64_t kh = -1; kh <= 1; ++kh)
                for (std::int64_t kw = -1; kw <= 1; ++kw, ++row) {
                    const T* src = col + row * ncols;
                    for (std::int64_t od = d0; od < d0 + slab; ++od) {
                        const std::int64_t id = od + kd;
                        if (id < 0 || id >= D) continue;
                        const T* sslice = src + (od - d0) * H * W;
                        for (std::int64_t oh = 0; oh < H; ++oh) {
                            const std::int64_t ih = oh + kh;
                            if (ih < 0 || ih >= H) continue;
                            const T* srow = sslice + oh * W;
                            T* drow = xc + (id * H + ih) * W;
                            if (kw == 0) {
                                for (std::int64_t w = 0; w < W; ++w) drow[w] += srow[w];
                            } else if (kw < 0) {
                                for (std::int64_t w = 1; w < W; ++w) drow[w - 1] += srow[w];
                            } else {
                                for (std::int64_t w = 0; w < W - 1; ++w) drow[w + 1] += srow[w];
                            }
                        }
                    }
                }
    }
}

/// Slab thickness targeting a ~1 MiB patch matrix.
inline std::int64_t conv_slab_slices(std::int64_t cin, Dims3 sp, std::size_t scalar_size) {
    const std::int64_t bytes_per_slice = cin * 27 * sp.h * sp.w *
                                         static_cast<std::int64_t>(scalar_size);
    const std::int64_t target = 1 << 20;
    return std::clamp<std::int64_t>(target / std::max<std::int64_t>(bytes_per_slice, 1), 1, sp.d);
}

} // namespace detail

/// 3D convolution, stride 1, "same" output size. Kernel size 1 or 3.
/// Weights are stored flat as (Cout, Cin*k^3), row = output channel.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::int64_t ksize) {
    if (ksize != 1 && ksize != 3) throw std::invalid_argument("conv3d: kernel must be 1 or 3");
    if (x->value.rank() != 4) throw std::invalid_argument("conv3d: input must be (C,d,h,w)");
    const std::int64_t cin = x->value.channels();
    const Dims3 sp = x->value.spatial();
    const std::int64_t nvox = sp.voxels();
    const std::int64_t k3 = ksize * ksize * ksize;
    const std::int64_t cout = w->value.dim(0);
    if (w->value.rank() != 2 || w->value.dim(1) != cin * k3)
        throw std::invalid_argument("conv3d: weight shape mismatch, got " + w->value.shape_str());
    if (b->value.size() != cout) throw std::invalid_argument("conv3d: bias size mismatch");

    Tensor<T> out = Tensor<T>::feature_map(cout, sp);
    const std::int64_t slab = detail::conv_slab_slices(cin, sp, sizeof(T));
    {
        detail::ConstMatMap<T> wm(w->value.data(), cout, cin * k3);
        if (ksize == 1) {
            detail::ConstMatMap<T> xm(x->value.data(), cin, nvox);
            detail::MatMap<T> ym(out.data(), cout, nvox);
            ym.noalias() = wm * xm;
        } else {
            auto& scratch = detail::conv_scratch<T>();
            scratch.resize(static_cast<std::size_t>(cin * 27 * slab * sp.h * sp.w));
            for (std::int64_t d0 = 0; d0 < sp.d; d0 += slab) {
                const std::int64_t s = std::min(slab, sp.d - d0);
                const std::int64_t ncols = s * sp.h * sp.w;
                detail::im2col3_slab(x->value.data(), cin, sp, d0, s, scratch.data());
                detail::ConstMatMap<T> cm(scratch.data(), cin * 27, ncols);
                // Strided view over the output block of these d-slices.
                Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>> ym(
                    out.data() + d0 * sp.h * sp.w, cout, ncols, Eigen::OuterStride<>(nvox));
                ym.noalias() = wm * cm;
            }
        }
        T* y = out.data();
        for (std::int64_t c = 0; c < cout; ++c)
            for (std::int64_t i = 0; i < nvox; ++i) y[c * nvox + i] += b->value[c];
    }

    return make_op(std::move(out), {x, w, b},
                   [x = x.get(), w = w.get(), b = b.get(), cin, cout, sp, nvox, ksize, k3,
                    slab](Node<T>& n) {
                       detail::ConstMatMap<T> gy(n.grad().data(), cout, nvox);
                       if (b->requires_grad) {
                           // Plain double accumulation: vectorized reductions
                           // round differently depending on heap alignment,
                           // which would break bit-level run reproducibility.
                           auto& gb = b->grad();
                           const T* g = n.grad().data();
                           for (std::int64_t c = 0; c < cout; ++c) {
                               double s = 0;
                               for (std::int64_t i = 0; i < nvox; ++i) s += g[c * nvox + i];
                               gb[c] += static_cast<T>(s);
                           }
                       }
                       if (ksize == 1) {
                           detail::ConstMatMap<T> xm(x->value.data(), cin, nvox);
                           if (w->requires_grad) {
                               detail::MatMap<T> gw(w->grad().data(), cout, cin);
                               gw.noalias() += gy * xm.transpose();
                           }
                           if (x->requires_grad) {
                               detail::ConstMatMap<T> wm(w->value.data(), cout, cin);
                               detail::MatMap<T> gx(x->grad().data(), cin, nvox);
                               gx.noalias() += wm.transpose() * gy;
                           }
                           return;
                       }
                       auto& scratch = detail::conv_scratch<T>();
                       scratch.resize(static_cast<std::size_t>(cin * 27 * slab * sp.h * sp.w));
                       for (std::int64_t d0 = 0; d0 < sp.d; d0 += slab) {
                           const std::int64_t s = std::min(slab, sp.d - d0);
                           const std::int64_t ncols = s * sp.h * sp.w;
                           Eigen::Map<const detail::RowMat<T>, 0, Eigen::OuterStride<>> gys(
                               n.grad().data() + d0 * sp.h * sp.w, cout, ncols,
                               Eigen::OuterStride<>(nvox));
                           detail::MatMap<T> cm(scratch.data(), cin * 27, ncols);
                           if (w->requires_grad) {
                               detail::im2col3_slab(x->value.data(), cin, sp, d0, s,
                                                    scratch.data());
                               detail::MatMap<T> gw(w->grad().data(), cout, cin * k3);
                               gw.noalias() += gys * cm.transpose();
                           }
                           if (x->requires_grad) {
                               // dcol = W^T dy for this slab, scattered back.
                               detail::ConstMatMap<T> wm(w->value.data(), cout, cin * k3);
                               cm.noalias() = wm.transpose() * gys;
                               detail::col2im3_slab(scratch.data(), cin, sp, d0, s,
                                                    x->grad().data());
                           }
                       }
                   });
}

/// Dense layer on a vector: y = W x + b with W (out, in).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->value.rank() != 1) throw std::invalid_argument("linear: input must be rank-1");
    const std::int64_t in = x->value.size();
    const std::int64_t out_n = w->value.dim(0);
    if (w->value.rank() != 2 || w->value.dim(1) != in)
        throw std::invalid_argument("linear: weight shape mismatch");
    if (b->value.size() != out_n) throw std::invalid_argument("linear: bias size mismatch");
    // Head-sized layers: explicit loops with double accumulators keep the
    // arithmetic order independent of buffer addresses.
    Tensor<T> out({out_n});
    for (std::int64_t o = 0; o < out_n; ++o) {
        double s = b->value[o];
        const T* wrow = w->value.data() + o * in;
        for (std::int64_t i = 0; i < in; ++i) s += static_cast<double>(wrow[i]) * x->value[i];
        out[o] = static_cast<T>(s);
    }
    return make_op(std::move(out), {x, w, b},
                   [x = x.get(), w = w.get(), b = b.get(), in, out_n](Node<T>& n) {
                       const auto& gy = n.grad();
                       if (b->requires_grad) {
                           auto& gb = b->grad();
                           for (std::int64_t i = 0; i < out_n; ++i) gb[i] += gy[i];
                       }
                       if (w->requires_grad) {
                           auto& gw = w->grad();
                           for (std::int64_t o = 0; o < out_n; ++o)
                               for (std::int64_t i = 0; i < in; ++i)
                                   gw[o * in + i] += gy[o] * x->value[i];
                       }
                       if (x->requires_grad) {
                           auto& gx = x->grad();
                           for (std::int64_t i = 0; i < in; ++i) {
                               double s = 0;
                               for (std::int64_t o = 0; o < out_n; ++o)
                                   s += static_cast<double>(w->value[o * in + i]) * gy[o];
                               gx[i] += static_cast<T>(s);
                           }
                       }
                   });
}

/// Pointwise dense layer over every spatial position: (Cin,sp) -> (Cout,sp).
template <typename T>
Var<T> linear_pointwise(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return conv3d(x, w, b, 1);
}

/// 2x2x2 max pooling with stride 2.
template <typename T>
Var<T> maxpool2(const Var<T>& x) {
    const Dims3 sp = x->value.spatial();
    if (!sp.divisible_by(2)) throw std::invalid_argument("maxpool2: odd spatial dims " + sp.str());
    const std::int64_t c = x->value.channels();
    const Dims3 os = sp.halved();
    const std::int64_t in_vox = sp.voxels(), out_vox = os.voxels();
    Tensor<T> out = Tensor<T>::feature_map(c, os);
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(c * out_vox));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* src = x->value.data() + ch * in_vox;
        T* dst = out.data() + ch * out_vox;
        std::int64_t* am = argmax.data() + ch * out_vox;
        for (std::int64_t od = 0; od < os.d; ++od)
            for (std::int64_t oh = 0; oh < os.h; ++oh)
                for (std::int64_t ow = 0; ow < os.w; ++ow) {
                    // Seed with the first cell so NaN inputs propagate instead
                    // of leaving the argmax unset.
                    std::int64_t besti = ((od * 2) * sp.h + oh * 2) * sp.w + ow * 2;
                    T best = src[besti];
                    for (std::int64_t dd = 0; dd < 2; ++dd)
                        for (std::int64_t dh = 0; dh < 2; ++dh)
                            for (std::int64_t dw = 0; dw < 2; ++dw) {
                                std::int64_t idx = ((od * 2 + dd) * sp.h + oh * 2 + dh) * sp.w +
                                                   ow * 2 + dw;
                                if (src[idx] > best) {
                                    best = src[idx];
                                    besti = idx;
                                }
                            }
                    *dst++ = best;
                    *am++ = besti;
                }
    }
    return make_op(std::move(out), {x},
                   [x = x.get(), argmax = std::move(argmax), c, in_vox, out_vox](Node<T>& n) {
                       const auto& g = n.grad();
                       auto& gx = x->grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T* gs = g.data() + ch * out_vox;
                           const std::int64_t* am = argmax.data() + ch * out_vox;
                           T* gd = gx.data() + ch * in_vox;
                           for (std::int64_t i = 0; i < out_vox; ++i) gd[am[i]] += gs[i];
                       }
                   });
}

namespace detail {

struct LerpAxis {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> t;
};

/// Index/weight table for 2x trilinear upsampling (half-voxel centers,
/// edge-replicated).
inline LerpAxis lerp_axis_2x(std::int64_t n_in) {
    LerpAxis ax;
    const std::int64_t n_out = n_in * 2;
    ax.i0.resize(n_out);
    ax.i1.resize(n_out);
    ax.t.resize(n_out);
    for (std::int64_t o = 0; o < n_out; ++o) {
        double c = (o + 0.5) / 2.0 - 0.5;
        std::int64_t i0 = static_cast<std::int64_t>(std::floor(c));
        double t = c - i0;
        std::int64_t i1 = i0 + 1;
        ax.i0[o] = std::clamp<std::int64_t>(i0, 0, n_in - 1);
        ax.i1[o] = std::clamp<std::int64_t>(i1, 0, n_in - 1);
        ax.t[o] = t;
    }
    return ax;
}

} // namespace detail

/// 2x trilinear upsampling.
template <typename T>
Var<T> upsample_trilinear2(const Var<T>& x) {
    const Dims3 sp = x->value.spatial();
    const std::int64_t c = x->value.channels();
    const Dims3 os = sp.doubled();
    const auto ad = detail::lerp_axis_2x(sp.d);
    const auto ah = detail::lerp_axis_2x(sp.h);
    const auto aw = detail::lerp_axis_2x(sp.w);
    const std::int64_t in_vox = sp.voxels(), out_vox = os.voxels();
    Tensor<T> out = Tensor<T>::feature_map(c, os);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* src = x->value.data() + ch * in_vox;
        T* dst = out.data() + ch * out_vox;
        for (std::int64_t od = 0; od < os.d; ++od) {
            const double td = ad.t[od];
            const std::int64_t d0 = ad.i0[od] * sp.h, d1 = ad.i1[od] * sp.h;
            for (std::int64_t oh = 0; oh < os.h; ++oh) {
                const double th = ah.t[oh];
                const T* r00 = src + (d0 + ah.i0[oh]) * sp.w;
                const T* r01 = src + (d0 + ah.i1[oh]) * sp.w;
                const T* r10 = src + (d1 + ah.i0[oh]) * sp.w;
                const T* r11 = src + (d1 + ah.i1[oh]) * sp.w;
                T* drow = dst + (od * os.h + oh) * os.w;
                for (std::int64_t ow = 0; ow < os.w; ++ow) {
                    const double tw = aw.t[ow];
                    const std::int64_t w0 = aw.i0[ow], w1 = aw.i1[ow];
                    const double v00 = r00[w0] * (1 - tw) + r00[w1] * tw;
                    const double v01 = r01[w0] * (1 - tw) + r01[w1] * tw;
                    const double v10 = r10[w0] * (1 - tw) + r10[w1] * tw;
                    const double v11 = r11[w0] * (1 - tw) + r11[w1] * tw;
                    const double v0 = v00 * (1 - th) + v01 * th;
                    const double v1 = v10 * (1 - th) + v11 * th;
                    drow[ow] = static_cast<T>(v0 * (1 - td) + v1 * td);
                }
            }
        }
    }
    return make_op(
        std::move(out), {x},
        [x = x.get(), ad, ah, aw, c, sp, os, in_vox, out_vox](Node<T>& n) {
            const auto& g = n.grad();
            auto& gx = x->grad();
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T* gs = g.data() + ch * out_vox;
                T* gd = gx.data() + ch * in_vox;
                for (std::int64_t od = 0; od < os.d; ++od) {
                    const double td = ad.t[od];
                    for (std::int64_t oh = 0; oh < os.h; ++oh) {
                        const double th = ah.t[oh];
                        const T* grow = gs + (od * os.h + oh) * os.w;
                        for (std::int64_t ow = 0; ow < os.w; ++ow) {
                            const double tw = aw.t[ow];
                            const double gv = grow[ow];
                            for (int bd = 0; bd < 2; ++bd)
                                for (int bh = 0; bh < 2; ++bh)
                                    for (int bw = 0; bw < 2; ++bw) {
                                        const std::int64_t id = bd ? ad.i1[od] : ad.i0[od];
                                        const std::int64_t ih = bh ? ah.i1[oh] : ah.i0[oh];
                                        const std::int64_t iw = bw ? aw.i1[ow] : aw.i0[ow];
                                        const double wgt = (bd ? td : 1 - td) *
                                                           (bh ? th : 1 - th) *
                                                           (bw ? tw : 1 - tw);
                                        gd[(id * sp.h + ih) * sp.w + iw] +=
                                            static_cast<T>(gv * wgt);
                                    }
                        }
                    }
                }
            }
        });
}

/// Group normalization with learned per-channel affine. groups == channels
/// gives per-channel spatial normalization (batch norm at batch size 1).
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  std::int64_t groups, T eps = T(1e-5)) {
    const std::int64_t c = x->value.channels();
    if (c % groups != 0)
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (gamma->value.size() != c || beta->value.size() != c)
        throw std::invalid_argument("group_norm: affine size mismatch");
    const std::int64_t nvox = x->value.size() / c;
    const std::int64_t cg = c / groups;
    const std::int64_t m = cg * nvox; // elements per group
    Tensor<T> out(x->value.shape());
    std::vector<double> mean(groups), invstd(groups);
    for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
        const T* base = x->value.data() + gidx * m;
        double s = 0, s2 = 0;
        for (std::int64_t i = 0; i < m; ++i) {
            double v = base[i];
            s += v;
            s2 += v * v;
        }
        const double mu = s / m;
        const double var = std::max(0.0, s2 / m - mu * mu);
        mean[gidx] = mu;
        invstd[gidx] = 1.0 / std::sqrt(var + static_cast<double>(eps));
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t gidx = ch / cg;
        const double mu = mean[gidx], is = invstd[gidx];
        const T gm = gamma->value[ch], bt = beta->value[ch];
        const T* src = x->value.data() + ch * nvox;
        T* dst = out.data() + ch * nvox;
        for (std::int64_t i = 0; i < nvox; ++i)
            dst[i] = static_cast<T>((src[i] - mu) * is) * gm + bt;
    }
    return make_op(
        std::move(out), {x, gamma, beta},
        [x = x.get(), gamma = gamma.get(), beta = beta.get(), mean = std::move(mean),
         invstd = std::move(invstd), c, cg, nvox, m, groups](Node<T>& n) {
            const auto& g = n.grad();
            for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
                const double mu = mean[gidx], is = invstd[gidx];
                // Per-group sums of dxhat and dxhat*xhat for the input gradient.
                double sum_dxh = 0, sum_dxh_xh = 0;
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t ch = gidx * cg + cc;
                    const T* gch = g.data() + ch * nvox;
                    const T* xch = x->value.data() + ch * nvox;
                    const double gm = gamma->value[ch];
                    double sg = 0, sgx = 0;
                    for (std::int64_t i = 0; i < nvox; ++i) {
                        const double xh = (xch[i] - mu) * is;
                        const double dy = gch[i];
                        sg += dy;
                        sgx += dy * xh;
                    }
                    if (gamma->requires_grad) gamma->grad()[ch] += static_cast<T>(sgx);
                    if (beta->requires_grad) beta->grad()[ch] += static_cast<T>(sg);
                    sum_dxh += gm * sg;
                    sum_dxh_xh += gm * sgx;
                }
                if (!x->requires_grad) continue;
                auto& gx = x->grad();
                for (std::int64_t cc = 0; cc < cg; ++cc) {
                    const std::int64_t ch = gidx * cg + cc;
                    const T* gch = g.data() + ch * nvox;
                    const T* xch = x->value.data() + ch * nvox;
                    T* gxch = gx.data() + ch * nvox;
                    const double gm = gamma->value[ch];
                    for (std::int64_t i = 0; i < nvox; ++i) {
                        const double xh = (xch[i] - mu) * is;
                        const double dxh = gch[i] * gm;
                        gxch[i] += static_cast<T>(is * (dxh - sum_dxh / m - xh * sum_dxh_xh / m));
                    }
                }
            }
        });
}

/// Gram matrix G = F F^T of the (C, N) channel-by-position flattening.
/// No normalization here; the texture loss carries the 1/(4 C^2 N^2) factor.
template <typename T>
Var<T> gram(const Var<T>& x) {
    const std::int64_t c = x->value.channels();
    const std::int64_t nvox = x->value.size() / c;
    Tensor<T> out({c, c});
    detail::ConstMatMap<T> xm(x->value.data(), c, nvox);
    detail::MatMap<T> gm(out.data(), c, c);
    gm.noalias() = xm * xm.transpose();
    return make_op(std::move(out), {x}, [x = x.get(), c, nvox](Node<T>& n) {
        detail::ConstMatMap<T> gg(n.grad().data(), c, c);
        detail::ConstMatMap<T> xm(x->value.data(), c, nvox);
        detail::MatMap<T> gx(x->grad().data(), c, nvox);
        gx.noalias() += (gg + gg.transpose()) * xm;
    });
}

/// Per-channel mean and std over spatial positions, packed as (2C):
/// [mean_0..mean_{C-1}, std_0..std_{C-1}]. std uses sqrt(var + eps).
template <typename T>
Var<T> channel_stats(const Var<T>& x, T eps = T(1e-5)) {
    const std::int64_t c = x->value.channels();
    const std::int64_t nvox = x->value.size() / c;
    Tensor<T> out({2 * c});
    std::vector<double> mu(c), sd(c);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* src = x->value.data() + ch * nvox;
        double s = 0, s2 = 0;
        for (std::int64_t i = 0; i < nvox; ++i) {
            s += src[i];
            s2 += static_cast<double>(src[i]) * src[i];
        }
        mu[ch] = s / nvox;
        sd[ch] = std::sqrt(std::max(0.0, s2 / nvox - mu[ch] * mu[ch]) + static_cast<double>(eps));
        out[ch] = static_cast<T>(mu[ch]);
        out[c + ch] = static_cast<T>(sd[ch]);
    }
    return make_op(std::move(out), {x},
                   [x = x.get(), mu = std::move(mu), sd = std::move(sd), c, nvox](Node<T>& n) {
                       const auto& g = n.grad();
                       auto& gx = x->grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T* src = x->value.data() + ch * nvox;
                           T* dst = gx.data() + ch * nvox;
                           const double gmu = g[ch] / nvox;
                           const double gsd = g[c + ch] / (nvox * sd[ch]);
                           for (std::int64_t i = 0; i < nvox; ++i)
                               dst[i] += static_cast<T>(gmu + gsd * (src[i] - mu[ch]));
                       }
                   });
}

} // namespace smunet
