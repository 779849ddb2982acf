#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "coda/grid.hpp"

// Forward/backward kernels for the differentiable operations. The Tape in
// tape.hpp is a thin layer over these; they are also usable standalone.

namespace coda {

inline int conv_out_dim(int in, int k, int stride, int pad, int dil) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

namespace detail {

// Valid output-x range [lo, hi) such that ix = ox*stride - pad + kx*dil stays
// inside [0, w).
inline void conv_x_range(int w, int ow, int stride, int pad, int kxd, int& lo, int& hi) {
    int num_lo = pad - kxd;
    lo = num_lo > 0 ? (num_lo + stride - 1) / stride : 0;
    int num_hi = w - 1 + pad - kxd;
    hi = num_hi < 0 ? 0 : std::min(ow, num_hi / stride + 1);
    if (hi < lo) hi = lo;
}

inline void check_conv_args(const Shape& in, const Shape& wt, std::int64_t bias_len, int stride,
                            int pad, int dil) {
    if (wt.h != wt.w) throw std::invalid_argument("conv2d: kernel must be square, got " + wt.str());
    if (in.c != wt.c)
        throw std::invalid_argument("conv2d: input channels (" + std::to_string(in.c) +
                                    ") != weight in_ch (" + std::to_string(wt.c) + ")");
    if (bias_len != wt.n)
        throw std::invalid_argument("conv2d: bias length " + std::to_string(bias_len) +
                                    " != out channels " + std::to_string(wt.n));
    if (stride < 1 || dil < 1 || pad < 0)
        throw std::invalid_argument("conv2d: need stride >= 1, dilation >= 1, padding >= 0");
    if (conv_out_dim(in.h, wt.h, stride, pad, dil) < 1 ||
        conv_out_dim(in.w, wt.w, stride, pad, dil) < 1)
        throw std::invalid_argument("conv2d: output would be empty for input " + in.str() +
                                    ", kernel " + std::to_string(wt.h) + ", stride " +
                                    std::to_string(stride) + ", pad " + std::to_string(pad) +
                                    ", dilation " + std::to_string(dil));
}

}  // namespace detail

// Zero-padded 2-D convolution (cross-correlation, the usual CNN convention).
// weight shape (out_ch, in_ch, k, k); bias carries out_ch elements.
template <typename T>
Grid<T> conv2d_forward(const Grid<T>& in, const Grid<T>& wt, const Grid<T>& bias, int stride = 1,
                       int pad = 0, int dil = 1) {
    detail::check_conv_args(in.shape, wt.shape, bias.numel(), stride, pad, dil);
    const int k = wt.shape.h;
    const int oh = conv_out_dim(in.shape.h, k, stride, pad, dil);
    const int ow = conv_out_dim(in.shape.w, k, stride, pad, dil);
    Grid<T> out(Shape{in.shape.n, wt.shape.n, oh, ow});
    for (int n = 0; n < in.shape.n; ++n)
        for (int oc = 0; oc < wt.shape.n; ++oc) {
            T* op = out.plane(n, oc);
            std::fill(op, op + std::int64_t(oh) * ow, bias.data[std::size_t(oc)]);
            for (int ic = 0; ic < in.shape.c; ++ic) {
                const T* ip = in.plane(n, ic);
                const T* wrow = &wt.at(oc, ic, 0, 0);
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wrow[ky * k + kx];
                        int lo, hi;
                        detail::conv_x_range(in.shape.w, ow, stride, pad, kx * dil, lo, hi);
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride - pad + ky * dil;
                            if (iy < 0 || iy >= in.shape.h) continue;
                            T* orow = op + std::int64_t(oy) * ow;
                            const T* irow = ip + std::int64_t(iy) * in.shape.w - pad + kx * dil;
                            if (stride == 1) {
                                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
                            } else {
                                for (int ox = lo; ox < hi; ++ox)
                                    orow[ox] += wv * irow[std::int64_t(ox) * stride];
                            }
                        }
                    }
            }
        }
    return out;
}

// Accumulates into gin/gw/gb (callers pass zero-initialized grids of the
// right shapes, or grids already carrying other contributions).
template <typename T>
void conv2d_backward(const Grid<T>& in, const Grid<T>& wt, const Grid<T>& gout, int stride,
                     int pad, int dil, Grid<T>* gin, Grid<T>* gw, Grid<T>* gb) {
    const int k = wt.shape.h;
    const int oh = gout.shape.h, ow = gout.shape.w;
    if (gb) {
        for (int n = 0; n < in.shape.n; ++n)
            for (int oc = 0; oc < wt.shape.n; ++oc) {
                const T* gp = gout.plane(n, oc);
                double acc = 0.0;
                for (std::int64_t i = 0; i < std::int64_t(oh) * ow; ++i) acc += double(gp[i]);
                gb->data[std::size_t(oc)] += T(acc);
            }
    }
    for (int n = 0; n < in.shape.n; ++n)
        for (int oc = 0; oc < wt.shape.n; ++oc) {
            const T* gp = gout.plane(n, oc);
            for (int ic = 0; ic < in.shape.c; ++ic) {
                const T* ip = in.plane(n, ic);
                T* gip = gin ? gin->plane(n, ic) : nullptr;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wt.at(oc, ic, ky, kx);
                        int lo, hi;
                        detail::conv_x_range(in.shape.w, ow, stride, pad, kx * dil, lo, hi);
                        double wacc = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride - pad + ky * dil;
                            if (iy < 0 || iy >= in.shape.h) continue;
                            const T* grow = gp + std::int64_t(oy) * ow;
                            const std::int64_t base = std::int64_t(iy) * in.shape.w - pad + kx * dil;
                            if (gw) {
                                const T* irow = ip + base;
                                if (stride == 1) {
                                    for (int ox = lo; ox < hi; ++ox)
                                        wacc += double(grow[ox]) * double(irow[ox]);
                                } else {
                                    for (int ox = lo; ox < hi; ++ox)
                                        wacc += double(grow[ox]) * double(irow[std::int64_t(ox) * stride]);
                                }
                            }
                            if (gip) {
                                T* girow = gip + base;
                                if (stride == 1) {
                                    for (int ox = lo; ox < hi; ++ox) girow[ox] += wv * grow[ox];
                                } else {
                                    for (int ox = lo; ox < hi; ++ox)
                                        girow[std::int64_t(ox) * stride] += wv * grow[ox];
                                }
                            }
                        }
                        if (gw) gw->at(oc, ic, ky, kx) += T(wacc);
                    }
            }
        }
}

template <typename T>
Grid<T> relu_forward(const Grid<T>& in) {
    Grid<T> out = in;
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return out;
}

// Gradient is the indicator x > 0; exactly zero at the kink.
template <typename T>
void relu_backward(const Grid<T>& in, const Grid<T>& gout, Grid<T>& gin) {
    for (std::size_t i = 0; i < in.data.size(); ++i)
        if (in.data[i] > T(0)) gin.data[i] += gout.data[i];
}

template <typename T>
Grid<T> leaky_relu_forward(const Grid<T>& in, T slope) {
    Grid<T> out = in;
    for (T& v : out.data) v = v > T(0) ? v : slope * v;
    return out;
}

template <typename T>
void leaky_relu_backward(const Grid<T>& in, T slope, const Grid<T>& gout, Grid<T>& gin) {
    for (std::size_t i = 0; i < in.data.size(); ++i)
        gin.data[i] += (in.data[i] > T(0) ? gout.data[i] : slope * gout.data[i]);
}

// 2x2 non-overlapping max pooling. Ties route the gradient to the first
// maximal element in row-major order, which keeps tests deterministic.
template <typename T>
Grid<T> maxpool2_forward(const Grid<T>& in) {
    if (in.shape.h % 2 != 0 || in.shape.w % 2 != 0)
        throw std::invalid_argument("maxpool2: spatial dims must be even, got " + in.shape.str());
    Grid<T> out(Shape{in.shape.n, in.shape.c, in.shape.h / 2, in.shape.w / 2});
    for (int n = 0; n < in.shape.n; ++n)
        for (int c = 0; c < in.shape.c; ++c) {
            const T* ip = in.plane(n, c);
            T* op = out.plane(n, c);
            for (int oy = 0; oy < out.shape.h; ++oy)
                for (int ox = 0; ox < out.shape.w; ++ox) {
                    const T* r0 = ip + std::int64_t(2 * oy) * in.shape.w + 2 * ox;
                    const T* r1 = r0 + in.shape.w;
                    T m = r0[0];
                    if (r0[1] > m) m = r0[1];
                    if (r1[0] > m) m = r1[0];
                    if (r1[1] > m) m = r1[1];
                    op[std::int64_t(oy) * out.shape.w + ox] = m;
                }
        }
    return out;
}

template <typename T>
void maxpool2_backward(const Grid<T>& in, const Grid<T>& gout, Grid<T>& gin) {
    for (int n = 0; n < gout.shape.n; ++n)
        for (int c = 0; c < gout.shape.c; ++c) {
            const T* ip = in.plane(n, c);
            const T* gp = gout.plane(n, c);
            T* gi = gin.plane(n, c);
            for (int oy = 0; oy < gout.shape.h; ++oy)
                for (int ox = 0; ox < gout.shape.w; ++ox) {
                    const std::int64_t base = std::int64_t(2 * oy) * in.shape.w + 2 * ox;
                    // row-major scan keeps the first maximum on ties
                    std::int64_t best = base;
                    T m = ip[base];
                    if (ip[base + 1] > m) { m = ip[base + 1]; best = base + 1; }
                    if (ip[base + in.shape.w] > m) { m = ip[base + in.shape.w]; best = base + in.shape.w; }
                    if (ip[base + in.shape.w + 1] > m) { best = base + in.shape.w + 1; }
                    gi[best] += gp[std::int64_t(oy) * gout.shape.w + ox];
                }
        }
}

namespace detail {

// Half-pixel-center source coordinate with clamped corner indices.
inline void bilinear_axis(int o, int out_dim, int in_dim, int& i0, int& i1, double& t) {
    double s = (double(o) + 0.5) * (double(in_dim) / double(out_dim)) - 0.5;
    double f = std::floor(s);
    t = s - f;
    i0 = std::clamp(int(f), 0, in_dim - 1);
    i1 = std::clamp(int(f) + 1, 0, in_dim - 1);
}

}  // namespace detail

// Bilinear resize, half-pixel centers (align_corners disabled), border replicate.
template <typename T>
Grid<T> resize_bilinear(const Grid<T>& in, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("resize_bilinear: output dims must be >= 1");
    if (out_h == in.shape.h && out_w == in.shape.w) return in;
    Grid<T> out(Shape{in.shape.n, in.shape.c, out_h, out_w});
    for (int n = 0; n < in.shape.n; ++n)
        for (int c = 0; c < in.shape.c; ++c) {
            const T* ip = in.plane(n, c);
            T* op = out.plane(n, c);
            for (int oy = 0; oy < out_h; ++oy) {
                int y0, y1;
                double ty;
                detail::bilinear_axis(oy, out_h, in.shape.h, y0, y1, ty);
                for (int ox = 0; ox < out_w; ++ox) {
                    int x0, x1;
                    double tx;
                    detail::bilinear_axis(ox, out_w, in.shape.w, x0, x1, tx);
                    double v00 = double(ip[std::int64_t(y0) * in.shape.w + x0]);
                    double v01 = double(ip[std::int64_t(y0) * in.shape.w + x1]);
                    double v10 = double(ip[std::int64_t(y1) * in.shape.w + x0]);
                    double v11 = double(ip[std::int64_t(y1) * in.shape.w + x1]);
                    double top = v00 + (v01 - v00) * tx;
                    double bot = v10 + (v11 - v10) * tx;
                    op[std::int64_t(oy) * out_w + ox] = T(top + (bot - top) * ty);
                }
            }
        }
    return out;
}

template <typename T>
void resize_bilinear_backward(const Shape& in_shape, const Grid<T>& gout, Grid<T>& gin) {
    if (gout.shape.h == in_shape.h && gout.shape.w == in_shape.w) {
        for (std::size_t i = 0; i < gout.data.size(); ++i) gin.data[i] += gout.data[i];
        return;
    }
    for (int n = 0; n < gout.shape.n; ++n)
        for (int c = 0; c < gout.shape.c; ++c) {
            const T* gp = gout.plane(n, c);
            T* gi = gin.plane(n, c);
            for (int oy = 0; oy < gout.shape.h; ++oy) {
                int y0, y1;
                double ty;
                detail::bilinear_axis(oy, gout.shape.h, in_shape.h, y0, y1, ty);
                for (int ox = 0; ox < gout.shape.w; ++ox) {
                    int x0, x1;
                    double tx;
                    detail::bilinear_axis(ox, gout.shape.w, in_shape.w, x0, x1, tx);
                    double g = double(gp[std::int64_t(oy) * gout.shape.w + ox]);
                    gi[std::int64_t(y0) * in_shape.w + x0] += T(g * (1 - ty) * (1 - tx));
                    gi[std::int64_t(y0) * in_shape.w + x1] += T(g * (1 - ty) * tx);
                    gi[std::int64_t(y1) * in_shape.w + x0] += T(g * ty * (1 - tx));
                    gi[std::int64_t(y1) * in_shape.w + x1] += T(g * ty * tx);
                }
            }
        }
}

// log(1 + exp(x)) without overflow; exact enough for |x| up to ~1e4 and beyond.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace coda
