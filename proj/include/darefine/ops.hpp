#ifndef DAREFINE_OPS_HPP
#define DAREFINE_OPS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "autodiff.hpp"

// Differentiable primitives. Every op returns a fresh Var whose backward
// closure accumulates into its inputs' grads.

namespace darefine::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
    std::size_t channels, batch, in_h, in_w, kernel, stride, pad, out_h, out_w;

    std::size_t rows() const { return channels * kernel * kernel; }
    std::size_t cols() const { return batch * out_h * out_w; }
    bool is_pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t m = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * m;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* plane = x + (c * g.batch + n) * g.in_h * g.in_w;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        T* dst = row + (n * g.out_h + oy) * g.out_w;
                        const long iy = long(oy * g.stride + ky) - long(g.pad);
                        if (iy < 0 || iy >= long(g.in_h)) {
                            std::fill_n(dst, g.out_w, T(0));
                            continue;
                        }
                        const T* src = plane + std::size_t(iy) * g.in_w;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = long(ox * g.stride + kx) - long(g.pad);
                            dst[ox] = (ix < 0 || ix >= long(g.in_w)) ? T(0) : src[ix];
                        }
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t m = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * m;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* plane = dx + (c * g.batch + n) * g.in_h * g.in_w;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = long(oy * g.stride + ky) - long(g.pad);
                        if (iy < 0 || iy >= long(g.in_h)) continue;
                        const T* src = row + (n * g.out_h + oy) * g.out_w;
                        T* dst = plane + std::size_t(iy) * g.in_w;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = long(ox * g.stride + kx) - long(g.pad);
                            if (ix >= 0 && ix < long(g.in_w)) dst[ix] += src[ox];
                        }
                    }
                }
            }
}

/// Separable linear-interpolation table, half-pixel centres, edge clamped.
struct LerpAxis {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;

    LerpAxis(std::size_t in, std::size_t out) : lo(out), hi(out), frac(out) {
        const double scale = double(in) / double(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = (double(i) + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            std::size_t l = std::min<std::size_t>(std::size_t(src), in - 1);
            lo[i] = l;
            hi[i] = std::min(l + 1, in - 1);
            frac[i] = src - double(l);
        }
    }
};

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!(a.shape() == b.shape())) throw ConfigError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out = a.value();
    out += b.value();
    return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->grad_buffer() += self.grad;
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!(a.shape() == b.shape())) throw ConfigError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p->value[i] > T(0)) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x.value();
    // Saturated values are pulled back inside the open unit interval.
    const T lo = std::numeric_limits<T>::min(), hi = std::nextafter(T(1), T(0));
    for (auto& v : out.values())
        v = std::clamp(v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)), lo, hi);
    return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.value[i];
            g[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

/// Channel concatenation. Inputs must agree on batch and spatial dims.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ConfigError("concat: no inputs");
    const Shape s0 = parts[0].shape();
    std::size_t channels = 0;
    for (const auto& p : parts) {
        const Shape s = p.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ConfigError("concat: spatial mismatch " + s.str() + " vs " + s0.str());
        channels += s.c;
    }
    Tensor<T> out(Shape{channels, s0.n, s0.h, s0.w});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy_n(p.value().data(), p.value().size(), out.data() + offset);
        offset += p.value().size();
    }
    return Var<T>::make(std::move(out), parts, [](Node<T>& self) {
        std::size_t off = 0;
        for (auto& p : self.parents) {
            const std::size_t len = p->value.size();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

/// 2-D convolution. `weight` is (out, in, k, k); `bias` may be undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    if (ws.h != ws.w) throw ConfigError("conv2d: non-square kernel");
    if (ws.n != xs.c)
        throw ConfigError("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " + std::to_string(ws.n));
    if (xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w) throw ConfigError("conv2d: kernel larger than padded input");
    if (stride == 0) throw ConfigError("conv2d: zero stride");

    detail::ConvGeometry g{xs.c, xs.n, xs.h, xs.w, ws.h, stride, pad,
                           (xs.h + 2 * pad - ws.h) / stride + 1, (xs.w + 2 * pad - ws.w) / stride + 1};
    const std::size_t out_c = ws.c, k = g.rows(), m = g.cols();

    auto cols = std::make_shared<AlignedVector<T>>();
    const T* colp = x.value().data();
    if (!g.is_pointwise()) {
        cols->resize(k * m);
        detail::im2col(x.value().data(), g, cols->data());
        colp = cols->data();
    }

    Tensor<T> out(Shape{out_c, xs.n, g.out_h, g.out_w});
    detail::MatMap<T> om(out.data(), out_c, m);
    detail::ConstMatMap<T> wm(weight.value().data(), out_c, k);
    detail::ConstMatMap<T> cm(colp, k, m);
    om.noalias() = wm * cm;
    if (bias.defined()) {
        if (bias.value().size() != out_c) throw ConfigError("conv2d: bias size mismatch");
        for (std::size_t o = 0; o < out_c; ++o) om.row(o).array() += bias.value()[o];
    }

    std::vector<Var<T>> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    return Var<T>::make(std::move(out), std::move(parents), [g, cols, out_c, k, m](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        detail::ConstMatMap<T> gout(self.grad.data(), out_c, m);
        const T* colp = g.is_pointwise() ? px->value.data() : cols->data();
        if (pw->requires_grad) {
            detail::MatMap<T> gw(pw->grad_buffer().data(), out_c, k);
            gw.noalias() += gout * detail::ConstMatMap<T>(colp, k, m).transpose();
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->grad_buffer();
            for (std::size_t o = 0; o < out_c; ++o) gb[o] += gout.row(o).sum();
        }
        if (px->requires_grad) {
            detail::ConstMatMap<T> wm(pw->value.data(), out_c, k);
            if (g.is_pointwise()) {
                detail::MatMap<T> gx(px->grad_buffer().data(), k, m);
                gx.noalias() += wm.transpose() * gout;
            } else {
                AlignedVector<T> gcols(k * m);
                detail::MatMap<T> gc(gcols.data(), k, m);
                gc.noalias() = wm.transpose() * gout;
                detail::col2im_add(gcols.data(), g, px->grad_buffer().data());
            }
        }
    });
}

/// Stride-1 max pooling over a `window` x `window` neighbourhood; the output
/// keeps the input's spatial size (out-of-image cells never win).
template <class T>
Var<T> max_pool_same(const Var<T>& x, std::size_t window) {
    if (window % 2 == 0) throw ConfigError("max_pool_same: window must be odd");
    const Shape s = x.shape();
    const long r = long(window / 2);
    Tensor<T> out(s);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(s.size());
    const T* in = x.value().data();
    for (std::size_t plane = 0; plane < s.c * s.n; ++plane) {
        const std::size_t base = plane * s.h * s.w;
        for (long y = 0; y < long(s.h); ++y)
            for (long xx = 0; xx < long(s.w); ++xx) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = base + std::size_t(y) * s.w + std::size_t(xx);
                for (long dy = -r; dy <= r; ++dy) {
                    const long iy = y + dy;
                    if (iy < 0 || iy >= long(s.h)) continue;
                    for (long dx = -r; dx <= r; ++dx) {
                        const long ix = xx + dx;
                        if (ix < 0 || ix >= long(s.w)) continue;
                        const std::size_t i = base + std::size_t(iy) * s.w + std::size_t(ix);
                        if (in[i] > best) {
                            best = in[i];
                            best_i = i;
                        }
                    }
                }
                const std::size_t o = base + std::size_t(y) * s.w + std::size_t(xx);
                out[o] = best;
                (*arg)[o] = std::uint32_t(best_i);
            }
    }
    return Var<T>::make(std::move(out), {x}, [arg](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*arg)[i]] += self.grad[i];
    });
}

/// Bilinear resampling to (out_h, out_w) with half-pixel centres.
template <class T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
    const Shape s = x.shape();
    if (s.h == out_h && s.w == out_w) return x;
    auto ay = std::make_shared<detail::LerpAxis>(s.h, out_h);
    auto ax = std::make_shared<detail::LerpAxis>(s.w, out_w);
    Tensor<T> out(Shape{s.c, s.n, out_h, out_w});
    const T* in = x.value().data();
    for (std::size_t plane = 0; plane < s.c * s.n; ++plane) {
        const T* src = in + plane * s.h * s.w;
        T* dst = out.data() + plane * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const T fy = T(ay->frac[y]);
            const T* r0 = src + ay->lo[y] * s.w;
            const T* r1 = src + ay->hi[y] * s.w;
            for (std::size_t xx = 0; xx < out_w; ++xx) {
                const T fx = T(ax->frac[xx]);
                const std::size_t x0 = ax->lo[xx], x1 = ax->hi[xx];
                const T top = r0[x0] + fx * (r0[x1] - r0[x0]);
                const T bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[y * out_w + xx] = top + fy * (bot - top);
            }
        }
    }
    return Var<T>::make(std::move(out), {x}, [ay, ax, s, out_h, out_w](Node<T>& self) {
        T* g = self.parents[0]->grad_buffer().data();
        for (std::size_t plane = 0; plane < s.c * s.n; ++plane) {
            const T* go = self.grad.data() + plane * out_h * out_w;
            T* gi = g + plane * s.h * s.w;
            for (std::size_t y = 0; y < out_h; ++y) {
                const T fy = T(ay->frac[y]);
                T* r0 = gi + ay->lo[y] * s.w;
                T* r1 = gi + ay->hi[y] * s.w;
                for (std::size_t xx = 0; xx < out_w; ++xx) {
                    const T fx = T(ax->frac[xx]);
                    const T v = go[y * out_w + xx];
                    const std::size_t x0 = ax->lo[xx], x1 = ax->hi[xx];
                    r0[x0] += v * (T(1) - fy) * (T(1) - fx);
                    r0[x1] += v * (T(1) - fy) * fx;
                    r1[x0] += v * fy * (T(1) - fx);
                    r1[x1] += v * fy * fx;
                }
            }
        }
    });
}

/// Mean over pixels of the negative log softmax probability of the target
/// class. `targets` is laid out batch-major (n, y, x).
template <class T>
Var<T> softmax_nll(const Var<T>& logits, std::span<const std::uint8_t> targets) {
    const Shape s = logits.shape();
    const std::size_t pixels = s.plane();
    if (targets.size() != pixels) throw ConfigError("softmax_nll: target size does not match logits");
    const T* z = logits.value().data();
    auto probs = std::make_shared<std::vector<T>>(s.size());
    double total = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
        if (targets[p] >= s.c) throw ConfigError("softmax_nll: target class out of range");
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < s.c; ++c) {
            const T v = z[c * pixels + p];
            if (std::isnan(v)) throw NumericError("softmax_nll: NaN in logits");
            mx = std::max(mx, v);
        }
        T denom = 0;
        for (std::size_t c = 0; c < s.c; ++c) {
            const T e = std::exp(z[c * pixels + p] - mx);
            (*probs)[c * pixels + p] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < s.c; ++c) (*probs)[c * pixels + p] /= denom;
        total += -(double(z[targets[p] * pixels + p] - mx) - std::log(double(denom)));
    }
    Tensor<T> out(Shape{1, 1, 1, 1}, T(total / double(pixels)));
    std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
    return Var<T>::make(std::move(out), {logits}, [probs, tgt = std::move(tgt), pixels](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const T scale = self.grad[0] / T(pixels);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (*probs)[i];
        for (std::size_t p = 0; p < pixels; ++p) g[tgt[p] * pixels + p] -= scale;
    });
}

/// Per-pixel softmax over the channel axis, max-subtracted.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
    const Shape s = logits.shape();
    const std::size_t pixels = s.plane();
    Tensor<T> out(s);
    for (std::size_t p = 0; p < pixels; ++p) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits[c * pixels + p]);
        T denom = 0;
        for (std::size_t c = 0; c < s.c; ++c) denom += (out[c * pixels + p] = std::exp(logits[c * pixels + p] - mx));
        for (std::size_t c = 0; c < s.c; ++c) out[c * pixels + p] /= denom;
    }
    return out;
}

/// Scalar sum(x * w) with `w` held constant; used to probe gradients.
template <class T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& w) {
    if (!(x.shape() == w.shape())) throw ConfigError("dot_const: shape mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += x.value()[i] * w[i];
    return Var<T>::make(Tensor<T>(Shape{1, 1, 1, 1}, acc), {x}, [w](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    });
}

}  // namespace darefine::ops

#endif
