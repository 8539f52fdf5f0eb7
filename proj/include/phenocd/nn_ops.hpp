#pragma once

// Structured NCHW operators: convolution, batch normalization, adaptive
// average pooling, bilinear upsampling. Direct loops, no im2col; image sizes
// here are small enough that clarity wins.

#include <cmath>
#include <vector>

#include "phenocd/autodiff.hpp"

namespace phenocd::nn {

// x [n,ci,h,w], weight [co,ci,kh,kw], bias [co] (may be null), zero padding.
template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& x, const NodePtr<T>& weight, const NodePtr<T>& bias,
                  int stride, int pad) {
    const auto& xs = x->value;
    const auto& ws = weight->value;
    if (xs.rank() != 4) throw ShapeError("conv2d: input want rank 4, got " + xs.shape_str());
    if (ws.rank() != 4) throw ShapeError("conv2d: weight want rank 4, got " + ws.shape_str());
    if (xs.shape[1] != ws.shape[1])
        throw ShapeError("conv2d: channel mismatch input " + xs.shape_str() + " weight " +
                         ws.shape_str());
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
    int n = xs.shape[0], ci = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    int co = ws.shape[0], kh = ws.shape[2], kw = ws.shape[3];
    if (bias && (bias->value.rank() != 1 || bias->value.shape[0] != co))
        throw ShapeError("conv2d: bias want [" + std::to_string(co) + "], got " +
                         bias->value.shape_str());
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw ShapeError("conv2d: kernel " + ws.shape_str() + " larger than padded input " +
                         xs.shape_str());

    Tensor<T> out = Tensor<T>::zeros({n, co, oh, ow});
    for (int in = 0; in < n; ++in)
        for (int oc = 0; oc < co; ++oc) {
            T b = bias ? bias->value.data[oc] : T(0);
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    T acc = b;
                    int iy0 = oy * stride - pad;
                    int ix0 = ox * stride - pad;
                    int ky_lo = std::max(0, -iy0), ky_hi = std::min(kh, h - iy0);
                    int kx_lo = std::max(0, -ix0), kx_hi = std::min(kw, w - ix0);
                    for (int ic = 0; ic < ci; ++ic)
                        for (int ky = ky_lo; ky < ky_hi; ++ky) {
                            const T* xrow = &xs.at4(in, ic, iy0 + ky, ix0 + kx_lo);
                            const T* wrow = &ws.at4(oc, ic, ky, kx_lo);
                            for (int kx = kx_lo; kx < kx_hi; ++kx)
                                acc += xrow[kx - kx_lo] * wrow[kx - kx_lo];
                        }
                    out.at4(in, oc, oy, ox) = acc;
                }
        }

    std::vector<NodePtr<T>> ins = {x, weight};
    if (bias) ins.push_back(bias);
    return make_from<T>(std::move(out), std::move(ins),
                        [n, ci, h, w, co, kh, kw, oh, ow, stride, pad](Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& weight = *self.inputs[1];
        Node<T>* bias = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        bool gx = x.requires_grad, gw = weight.requires_grad;
        bool gb = bias && bias->requires_grad;
        if (gx) x.ensure_grad();
        if (gw) weight.ensure_grad();
        if (gb) bias->ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int oc = 0; oc < co; ++oc)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        T g = self.grad.at4(in, oc, oy, ox);
                        if (g == T(0)) continue;
                        if (gb) bias->grad.data[oc] += g;
                        int iy0 = oy * stride - pad;
                        int ix0 = ox * stride - pad;
                        int ky_lo = std::max(0, -iy0), ky_hi = std::min(kh, h - iy0);
                        int kx_lo = std::max(0, -ix0), kx_hi = std::min(kw, w - ix0);
                        for (int ic = 0; ic < ci; ++ic)
                            for (int ky = ky_lo; ky < ky_hi; ++ky)
                                for (int kx = kx_lo; kx < kx_hi; ++kx) {
                                    if (gw)
                                        weight.grad.at4(oc, ic, ky, kx) +=
                                            g * x.value.at4(in, ic, iy0 + ky, ix0 + kx);
                                    if (gx)
                                        x.grad.at4(in, ic, iy0 + ky, ix0 + kx) +=
                                            g * weight.value.at4(oc, ic, ky, kx);
                                }
                    }
    });
}

// Batch normalization over [n,c,h,w] with per-channel affine parameters.
// Training mode normalizes with the biased batch variance and updates the
// running statistics in place with the unbiased variance:
//   running <- (1 - momentum) * running + momentum * batch.
// Eval mode normalizes with the stored running statistics. run_mean/run_var
// must be non-trainable leaves.
template <typename T>
NodePtr<T> batch_norm2d(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                        const NodePtr<T>& run_mean, const NodePtr<T>& run_var, bool training,
                        T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& xs = x->value;
    if (xs.rank() != 4) throw ShapeError("batch_norm2d: input want rank 4, got " + xs.shape_str());
    int n = xs.shape[0], c = xs.shape[1];
    int64_t plane = static_cast<int64_t>(xs.shape[2]) * xs.shape[3];
    int64_t m = n * plane;  // samples per channel
    for (const auto* p : {gamma.get(), beta.get(), run_mean.get(), run_var.get()})
        if (p->value.rank() != 1 || p->value.shape[0] != c)
            throw ShapeError("batch_norm2d: per-channel param want [" + std::to_string(c) +
                             "], got " + p->value.shape_str());
    if (run_mean->requires_grad || run_var->requires_grad)
        throw ShapeError("batch_norm2d: running stats must not require grad");

    std::vector<T> mean(c), inv_std(c);
    if (training) {
        if (m < 2) throw ShapeError("batch_norm2d: training needs >= 2 samples per channel");
        for (int ic = 0; ic < c; ++ic) {
            T acc = T(0);
            for (int in = 0; in < n; ++in) {
                const T* base = xs.data.data() + (static_cast<int64_t>(in) * c + ic) * plane;
                for (int64_t j = 0; j < plane; ++j) acc += base[j];
            }
            T mu = acc / static_cast<T>(m);
            T sq = T(0);
            for (int in = 0; in < n; ++in) {
                const T* base = xs.data.data() + (static_cast<int64_t>(in) * c + ic) * plane;
                for (int64_t j = 0; j < plane; ++j) {
                    T d = base[j] - mu;
                    sq += d * d;
                }
            }
            T var_biased = sq / static_cast<T>(m);
            T var_unbiased = sq / static_cast<T>(m - 1);
            mean[ic] = mu;
            inv_std[ic] = T(1) / std::sqrt(var_biased + eps);
            run_mean->value.data[ic] = (T(1) - momentum) * run_mean->value.data[ic] + momentum * mu;
            run_var->value.data[ic] =
                (T(1) - momentum) * run_var->value.data[ic] + momentum * var_unbiased;
        }
    } else {
        for (int ic = 0; ic < c; ++ic) {
            mean[ic] = run_mean->value.data[ic];
            inv_std[ic] = T(1) / std::sqrt(run_var->value.data[ic] + eps);
        }
    }

    Tensor<T> out = Tensor<T>::zeros(xs.shape);
    Tensor<T> xhat = Tensor<T>::zeros(xs.shape);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
            T g = gamma->value.data[ic], b = beta->value.data[ic];
            for (int64_t j = 0; j < plane; ++j) {
                T xh = (xs.data[base + j] - mean[ic]) * inv_std[ic];
                xhat.data[base + j] = xh;
                out.data[base + j] = g * xh + b;
            }
        }

    return make_from<T>(std::move(out), {x, gamma, beta},
                        [n, c, plane, m, training, inv_std, xhat = std::move(xhat)](Node<T>& self) {
        auto& x = *self.inputs[0];
        auto& gamma = *self.inputs[1];
        auto& beta = *self.inputs[2];
        if (gamma.requires_grad) gamma.ensure_grad();
        if (beta.requires_grad) beta.ensure_grad();
        std::vector<T> sum_gy(c, T(0)), sum_gy_xhat(c, T(0));
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic) {
                int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
                for (int64_t j = 0; j < plane; ++j) {
                    T gy = self.grad.data[base + j];
                    sum_gy[ic] += gy;
                    sum_gy_xhat[ic] += gy * xhat.data[base + j];
                }
            }
        if (gamma.requires_grad)
            for (int ic = 0; ic < c; ++ic) gamma.grad.data[ic] += sum_gy_xhat[ic];
        if (beta.requires_grad)
            for (int ic = 0; ic < c; ++ic) beta.grad.data[ic] += sum_gy[ic];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic) {
                int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
                T gs = gamma.value.data[ic] * inv_std[ic];
                if (training) {
                    T mg = sum_gy[ic] / static_cast<T>(m);
                    T mgx = sum_gy_xhat[ic] / static_cast<T>(m);
                    for (int64_t j = 0; j < plane; ++j)
                        x.grad.data[base + j] += gs * (self.grad.data[base + j] - mg -
                                                       xhat.data[base + j] * mgx);
                } else {
                    for (int64_t j = 0; j < plane; ++j)
                        x.grad.data[base + j] += gs * self.grad.data[base + j];
                }
            }
    });
}

// Adaptive average pooling to (oh, ow). Window for output index i covers
// input rows [floor(i*H/oh), ceil((i+1)*H/oh)).
template <typename T>
NodePtr<T> adaptive_avg_pool2d(const NodePtr<T>& x, int oh, int ow) {
    const auto& xs = x->value;
    if (xs.rank() != 4)
        throw ShapeError("adaptive_avg_pool2d: want rank 4, got " + xs.shape_str());
    if (oh < 1 || ow < 1 || oh > xs.shape[2] || ow > xs.shape[3])
        throw ShapeError("adaptive_avg_pool2d: bad output size " + std::to_string(oh) + "x" +
                         std::to_string(ow) + " for input " + xs.shape_str());
    int n = xs.shape[0], c = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    auto lo = [](int i, int in, int out) { return (i * in) / out; };
    auto hi = [](int i, int in, int out) { return ((i + 1) * in + out - 1) / out; };
    Tensor<T> out = Tensor<T>::zeros({n, c, oh, ow});
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int oy = 0; oy < oh; ++oy) {
                int y0 = lo(oy, h, oh), y1 = hi(oy, h, oh);
                for (int ox = 0; ox < ow; ++ox) {
                    int x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
                    T acc = T(0);
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix) acc += xs.at4(in, ic, iy, ix);
                    out.at4(in, ic, oy, ox) = acc / static_cast<T>((y1 - y0) * (x1 - x0));
                }
            }
    return make_from<T>(std::move(out), {x}, [n, c, h, w, oh, ow, lo, hi](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic)
                for (int oy = 0; oy < oh; ++oy) {
                    int y0 = lo(oy, h, oh), y1 = hi(oy, h, oh);
                    for (int ox = 0; ox < ow; ++ox) {
                        int x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
                        T g = self.grad.at4(in, ic, oy, ox) /
                              static_cast<T>((y1 - y0) * (x1 - x0));
                        for (int iy = y0; iy < y1; ++iy)
                            for (int ix = x0; ix < x1; ++ix) x.grad.at4(in, ic, iy, ix) += g;
                    }
                }
    });
}

namespace detail {

// Source coordinate mapping for align_corners=false bilinear resizing.
struct LerpIdx {
    int i0, i1;
    double w1;  // weight of i1; weight of i0 is 1 - w1
};

inline LerpIdx bilinear_source(int dst, int in_size, int out_size) {
    double src = (dst + 0.5) * (static_cast<double>(in_size) / out_size) - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in_size - 1) i0 = in_size - 1;
    int i1 = std::min(i0 + 1, in_size - 1);
    double w1 = src - i0;
    if (i1 == i0) w1 = 0.0;
    return {i0, i1, w1};
}

}  // namespace detail

// Bilinear resize to (oh, ow), align_corners=false.
template <typename T>
NodePtr<T> upsample_bilinear2d(const NodePtr<T>& x, int oh, int ow) {
    const auto& xs = x->value;
    if (xs.rank() != 4)
        throw ShapeError("upsample_bilinear2d: want rank 4, got " + xs.shape_str());
    if (oh < 1 || ow < 1)
        throw ShapeError("upsample_bilinear2d: bad output size " + std::to_string(oh) + "x" +
                         std::to_string(ow));
    int n = xs.shape[0], c = xs.shape[1], h = xs.shape[2], w = xs.shape[3];
    std::vector<detail::LerpIdx> ys(oh), xsrc(ow);
    for (int i = 0; i < oh; ++i) ys[i] = detail::bilinear_source(i, h, oh);
    for (int i = 0; i < ow; ++i) xsrc[i] = detail::bilinear_source(i, w, ow);
    Tensor<T> out = Tensor<T>::zeros({n, c, oh, ow});
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int oy = 0; oy < oh; ++oy) {
                const auto& sy = ys[oy];
                for (int ox = 0; ox < ow; ++ox) {
                    const auto& sx = xsrc[ox];
                    T v00 = xs.at4(in, ic, sy.i0, sx.i0);
                    T v01 = xs.at4(in, ic, sy.i0, sx.i1);
                    T v10 = xs.at4(in, ic, sy.i1, sx.i0);
                    T v11 = xs.at4(in, ic, sy.i1, sx.i1);
                    double top = (1.0 - sx.w1) * v00 + sx.w1 * v01;
                    double bot = (1.0 - sx.w1) * v10 + sx.w1 * v11;
                    out.at4(in, ic, oy, ox) = static_cast<T>((1.0 - sy.w1) * top + sy.w1 * bot);
                }
            }
    return make_from<T>(std::move(out), {x}, [n, c, oh, ow, ys, xsrc](Node<T>& self) {
        auto& x = *self.inputs[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int in = 0; in < n; ++in)
            for (int ic = 0; ic < c; ++ic)
                for (int oy = 0; oy < oh; ++oy) {
                    const auto& sy = ys[oy];
                    for (int ox = 0; ox < ow; ++ox) {
                        const auto& sx = xsrc[ox];
                        T g = self.grad.at4(in, ic, oy, ox);
                        if (g == T(0)) continue;
                        x.grad.at4(in, ic, sy.i0, sx.i0) +=
                            static_cast<T>((1.0 - sy.w1) * (1.0 - sx.w1)) * g;
                        x.grad.at4(in, ic, sy.i0, sx.i1) +=
                            static_cast<T>((1.0 - sy.w1) * sx.w1) * g;
                        x.grad.at4(in, ic, sy.i1, sx.i0) +=
                            static_cast<T>(sy.w1 * (1.0 - sx.w1)) * g;
                        x.grad.at4(in, ic, sy.i1, sx.i1) += static_cast<T>(sy.w1 * sx.w1) * g;
                    }
                }
    });
}

}  // namespace phenocd::nn
