#pragma once

// Differentiable operations used by the reconstruction and prediction
// networks. Each op computes its forward value eagerly and registers a
// closure that pushes gradients into its inputs. Convolutions run through
// im2col + sgemm; the column buffer is rebuilt in the backward pass instead
// of being cached, keeping live memory proportional to activations.

#include <cmath>
#include <cstring>

#include "hf2vad/autodiff.hpp"

namespace hf2vad {

// ---------------------------------------------------------------------------
// elementwise

inline Value add(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("add: " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
    Tensor out = a->value;
    out.add_(b->value);
    Value node = make_op(std::move(out), {a, b}, [](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->ensure_grad().add_(self.grad);
        if (self.inputs[1]->requires_grad) self.inputs[1]->ensure_grad().add_(self.grad);
    });
    if (!std::isnan(a->hi_value) && !std::isnan(b->hi_value)) {
        node->hi_value = a->hi_value + b->hi_value;
        node->value[0] = static_cast<float>(node->hi_value);
    }
    return node;
}

inline Value scale(const Value& a, float s) {
    Tensor out = a->value;
    out.scale_(s);
    Value node = make_op(std::move(out), {a}, [s](Node& self) {
        if (self.inputs[0]->requires_grad) self.inputs[0]->ensure_grad().add_(self.grad, s);
    });
    if (!std::isnan(a->hi_value)) {
        node->hi_value = s * a->hi_value;
        node->value[0] = static_cast<float>(node->hi_value);
    }
    return node;
}

inline Value relu(const Value& a) {
    Tensor out = a->value;
    float* p = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) p[i] = p[i] > 0.0f ? p[i] : 0.0f;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& x = *self.inputs[0];
        if (!x.requires_grad) return;
        Tensor& gx = x.ensure_grad();
        const float* xin = x.value.data();
        const float* g = self.grad.data();
        float* gp = gx.data();
        for (int64_t i = 0; i < x.value.numel(); ++i)
            if (xin[i] > 0.0f) gp[i] += g[i];
    });
}

inline Value clamp(const Value& a, float lo, float hi) {
    Tensor out = a->value;
    float* p = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) p[i] = std::min(hi, std::max(lo, p[i]));
    return make_op(std::move(out), {a}, [lo, hi](Node& self) {
        Node& x = *self.inputs[0];
        if (!x.requires_grad) return;
        Tensor& gx = x.ensure_grad();
        const float* xin = x.value.data();
        const float* g = self.grad.data();
        float* gp = gx.data();
        for (int64_t i = 0; i < x.value.numel(); ++i)
            if (xin[i] >= lo && xin[i] <= hi) gp[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// channel concat / slice on (B,C,H,W)

inline Value concat_channels(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input list");
    int64_t b = xs[0]->value.dim(0), h = xs[0]->value.dim(2), w = xs[0]->value.dim(3);
    int64_t ctot = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != 4 || x->value.dim(0) != b || x->value.dim(2) != h ||
            x->value.dim(3) != w)
            throw ShapeError("concat_channels: incompatible shape " +
                             shape_str(x->value.shape()));
        ctot += x->value.dim(1);
    }
    Tensor out = Tensor::uninit({b, ctot, h, w});
    int64_t plane = h * w;
    int64_t c_off = 0;
    for (const auto& x : xs) {
        int64_t c = x->value.dim(1);
        for (int64_t bi = 0; bi < b; ++bi)
            std::memcpy(out.data() + (bi * ctot + c_off) * plane,
                        x->value.data() + bi * c * plane, static_cast<size_t>(c * plane) * 4);
        c_off += c;
    }
    return make_op(std::move(out), xs, [b, plane, ctot](Node& self) {
        int64_t off = 0;
        for (auto& in : self.inputs) {
            int64_t c = in->value.dim(1);
            if (in->requires_grad) {
                Tensor& gx = in->ensure_grad();
                for (int64_t bi = 0; bi < b; ++bi) {
                    const float* src = self.grad.data() + (bi * ctot + off) * plane;
                    float* dst = gx.data() + bi * c * plane;
                    for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
            }
            off += c;
        }
    });
}

inline Value slice_channels(const Value& x, int64_t c0, int64_t c1) {
    if (x->value.ndim() != 4) throw ShapeError("slice_channels expects (B,C,H,W)");
    int64_t b = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeError("slice_channels: bad range");
    int64_t plane = h * w, cs = c1 - c0;
    Tensor out = Tensor::uninit({b, cs, h, w});
    for (int64_t bi = 0; bi < b; ++bi)
        std::memcpy(out.data() + bi * cs * plane, x->value.data() + (bi * c + c0) * plane,
                    static_cast<size_t>(cs * plane) * 4);
    return make_op(std::move(out), {x}, [b, c, c0, cs, plane](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor& gx = in.ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi) {
            const float* src = self.grad.data() + bi * cs * plane;
            float* dst = gx.data() + (bi * c + c0) * plane;
            for (int64_t i = 0; i < cs * plane; ++i) dst[i] += src[i];
        }
    });
}

// ---------------------------------------------------------------------------
// losses

// mean over all elements of (a-b)^2
inline Value mse_mean(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("mse_mean: " + shape_str(a->value.shape()) + " vs " +
                         shape_str(b->value.shape()));
    int64_t n = a->value.numel();
    if (n == 0) throw ShapeError("mse_mean: empty tensors");
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        acc += d * d;
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    Value node = make_op(std::move(out), {a, b}, [n](Node& self) {
        float g = self.grad[0] * 2.0f / static_cast<float>(n);
        Node& a = *self.inputs[0];
        Node& b = *self.inputs[1];
        const float* pa = a.value.data();
        const float* pb = b.value.data();
        if (a.requires_grad) {
            float* ga = a.ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g * (pa[i] - pb[i]);
        }
        if (b.requires_grad) {
            float* gb = b.ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g * (pa[i] - pb[i]);
        }
    });
    node->hi_value = acc / static_cast<double>(n);
    return node;
}

// KL( N(mu_q, e^{lv_q}) || N(mu_p, e^{lv_p}) ), diagonal; summed over feature
// dims, averaged over the leading batch dim.
inline Value kl_diag_gaussian(const Value& mu_q, const Value& lv_q, const Value& mu_p,
                              const Value& lv_p) {
    const Tensor& mq = mu_q->value;
    if (!mq.same_shape(lv_q->value) || !mq.same_shape(mu_p->value) || !mq.same_shape(lv_p->value))
        throw ShapeError("kl_diag_gaussian: parameter shapes differ");
    int64_t b = mq.dim(0);
    int64_t n = mq.numel();
    const float* pmq = mq.data();
    const float* plq = lv_q->value.data();
    const float* pmp = mu_p->value.data();
    const float* plp = lv_p->value.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double dl = static_cast<double>(plq[i]) - static_cast<double>(plp[i]);
        double ivp = std::exp(-static_cast<double>(plp[i]));
        double dm = static_cast<double>(pmq[i]) - static_cast<double>(pmp[i]);
        acc += 0.5 * (-dl + std::exp(dl) + dm * dm * ivp - 1.0);
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(b)));
    Value node = make_op(std::move(out), {mu_q, lv_q, mu_p, lv_p}, [b, n](Node& self) {
        float g = self.grad[0] / static_cast<float>(b);
        Node& mu_q = *self.inputs[0];
        Node& lv_q = *self.inputs[1];
        Node& mu_p = *self.inputs[2];
        Node& lv_p = *self.inputs[3];
        const float* pmq = mu_q.value.data();
        const float* plq = lv_q.value.data();
        const float* pmp = mu_p.value.data();
        const float* plp = lv_p.value.data();
        float* gmq = mu_q.requires_grad ? mu_q.ensure_grad().data() : nullptr;
        float* glq = lv_q.requires_grad ? lv_q.ensure_grad().data() : nullptr;
        float* gmp = mu_p.requires_grad ? mu_p.ensure_grad().data() : nullptr;
        float* glp = lv_p.requires_grad ? lv_p.ensure_grad().data() : nullptr;
        for (int64_t i = 0; i < n; ++i) {
            float vq = std::exp(plq[i]);
            float ivp = std::exp(-plp[i]);
            float dm = pmq[i] - pmp[i];
            if (gmq) gmq[i] += g * dm * ivp;
            if (gmp) gmp[i] -= g * dm * ivp;
            if (glq) glq[i] += g * 0.5f * (vq * ivp - 1.0f);
            if (glp) glp[i] += g * 0.5f * (1.0f - (vq + dm * dm) * ivp);
        }
    });
    node->hi_value = acc / static_cast<double>(b);
    return node;
}

// Image gradient loss: sum over adjacent pixel pairs of the absolute
// difference between gradient magnitudes, vertical plus horizontal terms,
// averaged over the leading batch dim.
inline Value gradient_loss(const Value& x_ref, const Value& x_hat) {
    const Tensor& X = x_ref->value;
    if (!X.same_shape(x_hat->value))
        throw ShapeError("gradient_loss: " + shape_str(X.shape()) + " vs " +
                         shape_str(x_hat->value.shape()));
    if (X.ndim() != 4) throw ShapeError("gradient_loss expects (B,C,H,W)");
    int64_t b = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    const float* px = X.data();
    const float* py = x_hat->value.data();
    double acc = 0.0;
    for (int64_t bc = 0; bc < b * c; ++bc) {
        const float* xp = px + bc * h * w;
        const float* yp = py + bc * h * w;
        for (int64_t i = 1; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                acc += std::abs(std::abs(xp[i * w + j] - xp[(i - 1) * w + j]) -
                                std::abs(yp[i * w + j] - yp[(i - 1) * w + j]));
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 1; j < w; ++j)
                acc += std::abs(std::abs(xp[i * w + j] - xp[i * w + j - 1]) -
                                std::abs(yp[i * w + j] - yp[i * w + j - 1]));
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(b)));
    Value node = make_op(std::move(out), {x_ref, x_hat}, [b, c, h, w](Node& self) {
        float g = self.grad[0] / static_cast<float>(b);
        Node& xr = *self.inputs[0];
        Node& xh = *self.inputs[1];
        const float* px = xr.value.data();
        const float* py = xh.value.data();
        float* gx = xr.requires_grad ? xr.ensure_grad().data() : nullptr;
        float* gy = xh.requires_grad ? xh.ensure_grad().data() : nullptr;
        auto sgn = [](float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); };
        for (int64_t bc = 0; bc < b * c; ++bc) {
            const float* xp = px + bc * h * w;
            const float* yp = py + bc * h * w;
            float* gxp = gx ? gx + bc * h * w : nullptr;
            float* gyp = gy ? gy + bc * h * w : nullptr;
            auto accumulate = [&](int64_t p1, int64_t p0) {
                float dx = xp[p1] - xp[p0];
                float dy = yp[p1] - yp[p0];
                float t = sgn(std::abs(dx) - std::abs(dy)) * g;
                if (gxp) {
                    float s = t * sgn(dx);
                    gxp[p1] += s;
                    gxp[p0] -= s;
                }
                if (gyp) {
                    float s = -t * sgn(dy);
                    gyp[p1] += s;
                    gyp[p0] -= s;
                }
            };
            for (int64_t i = 1; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) accumulate(i * w + j, (i - 1) * w + j);
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 1; j < w; ++j) accumulate(i * w + j, i * w + j - 1);
        }
    });
    node->hi_value = acc / static_cast<double>(b);
    return node;
}

// ---------------------------------------------------------------------------
// reparameterized Gaussian sampling

// z = mu                      (deterministic)
// z = mu + exp(logvar/2) * eps (stochastic; eps supplied by the caller)
inline Value gaussian_sample(const Value& mu, const Value& logvar, const Tensor* eps) {
    if (!mu->value.same_shape(logvar->value))
        throw ShapeError("gaussian_sample: mean/logvar shapes differ");
    if (eps == nullptr) {
        Tensor out = mu->value;
        return make_op(std::move(out), {mu, logvar}, [](Node& self) {
            if (self.inputs[0]->requires_grad) self.inputs[0]->ensure_grad().add_(self.grad);
        });
    }
    if (!eps->same_shape(mu->value)) throw ShapeError("gaussian_sample: eps shape mismatch");
    Tensor out = mu->value;
    Tensor noise = *eps;
    int64_t n = out.numel();
    const float* lv = logvar->value.data();
    const float* ep = noise.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] += std::exp(0.5f * lv[i]) * ep[i];
    return make_op(std::move(out), {mu, logvar}, [noise = std::move(noise), n](Node& self) {
        Node& mu = *self.inputs[0];
        Node& lv = *self.inputs[1];
        const float* g = self.grad.data();
        if (mu.requires_grad) mu.ensure_grad().add_(self.grad);
        if (lv.requires_grad) {
            float* gl = lv.ensure_grad().data();
            const float* plv = lv.value.data();
            const float* ep = noise.data();
            for (int64_t i = 0; i < n; ++i)
                gl[i] += g[i] * 0.5f * std::exp(0.5f * plv[i]) * ep[i];
        }
    });
}

// ---------------------------------------------------------------------------
// im2col convolution kernels

namespace detail {

inline void im2col_one(const float* x, int64_t c, int64_t h, int64_t w, int64_t k, int64_t stride,
                       int64_t pad, int64_t ho, int64_t wo, float* col, int64_t ncols,
                       int64_t col0) {
    for (int64_t ch = 0; ch < c; ++ch) {
        const float* plane = x + ch * h * w;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                float* row = col + ((ch * k + ki) * k + kj) * ncols + col0;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t y = oy * stride - pad + ki;
                    float* dst = row + oy * wo;
                    if (y < 0 || y >= h) {
                        std::memset(dst, 0, static_cast<size_t>(wo) * 4);
                        continue;
                    }
                    const float* src = plane + y * w;
                    if (stride == 1) {
                        int64_t x0 = -pad + kj;
                        int64_t lo = std::min(wo, std::max<int64_t>(0, -x0));
                        int64_t hi = std::min(wo, std::max<int64_t>(0, w - x0));
                        if (lo > 0) std::memset(dst, 0, static_cast<size_t>(lo) * 4);
                        if (hi > lo)
                            std::memcpy(dst + lo, src + x0 + lo,
                                        static_cast<size_t>(hi - lo) * 4);
                        if (wo > hi) std::memset(dst + hi, 0, static_cast<size_t>(wo - hi) * 4);
                    } else {
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            int64_t xx = ox * stride - pad + kj;
                            dst[ox] = (xx >= 0 && xx < w) ? src[xx] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_one(const float* col, int64_t c, int64_t h, int64_t w, int64_t k,
                       int64_t stride, int64_t pad, int64_t ho, int64_t wo, float* x,
                       int64_t ncols, int64_t col0) {
    for (int64_t ch = 0; ch < c; ++ch) {
        float* plane = x + ch * h * w;
        for (int64_t ki = 0; ki < k; ++ki) {
            for (int64_t kj = 0; kj < k; ++kj) {
                const float* row = col + ((ch * k + ki) * k + kj) * ncols + col0;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t y = oy * stride - pad + ki;
                    if (y < 0 || y >= h) continue;
                    float* dst = plane + y * w;
                    const float* src = row + oy * wo;
                    if (stride == 1) {
                        int64_t x0 = -pad + kj;
                        int64_t lo = std::min(wo, std::max<int64_t>(0, -x0));
                        int64_t hi = std::min(wo, std::max<int64_t>(0, w - x0));
                        for (int64_t ox = lo; ox < hi; ++ox) dst[x0 + ox] += src[ox];
                    } else {
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            int64_t xx = ox * stride - pad + kj;
                            if (xx >= 0 && xx < w) dst[xx] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

// chunk size keeping the column buffer under ~128 MB
inline int64_t conv_chunk(int64_t b, int64_t rows, int64_t cols_per_sample) {
    int64_t budget = 128ll * 1024 * 1024 / 4;
    int64_t per = std::max<int64_t>(1, rows * cols_per_sample);
    return std::max<int64_t>(1, std::min(b, budget / per));
}

}  // namespace detail

struct Conv2dSpec {
    int64_t stride = 1;
    int64_t pad = 1;
};

// x: (B,Cin,H,W), w: (Cout,Cin,k,k), bias: (Cout) optional (pass nullptr Value{})
inline Value conv2d(const Value& x, const Value& w, const Value& bias, Conv2dSpec spec) {
    const Tensor& X = x->value;
    const Tensor& W = w->value;
    if (X.ndim() != 4 || W.ndim() != 4) throw ShapeError("conv2d expects 4-d input and weight");
    int64_t b = X.dim(0), cin = X.dim(1), h = X.dim(2), wd = X.dim(3);
    int64_t cout = W.dim(0), k = W.dim(2);
    if (W.dim(1) != cin || W.dim(3) != k)
        throw ShapeError("conv2d: weight " + shape_str(W.shape()) + " does not match input " +
                         shape_str(X.shape()));
    int64_t ho = (h + 2 * spec.pad - k) / spec.stride + 1;
    int64_t wo = (wd + 2 * spec.pad - k) / spec.stride + 1;
    int64_t rows = cin * k * k, plane = ho * wo;

    Tensor out = Tensor::uninit({b, cout, ho, wo});
    int64_t chunk = detail::conv_chunk(b, rows, plane);
    float* col = scratch_buffer(0, static_cast<size_t>(rows * chunk * plane));
    float* yflat = scratch_buffer(1, static_cast<size_t>(cout * chunk * plane));
    for (int64_t b0 = 0; b0 < b; b0 += chunk) {
        int64_t bn = std::min(chunk, b - b0);
        int64_t ncols = bn * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < bn; ++i)
            detail::im2col_one(X.data() + (b0 + i) * cin * h * wd, cin, h, wd, k, spec.stride,
                               spec.pad, ho, wo, col, ncols, i * plane);
        sgemm(false, false, cout, ncols, rows, 1.0f, W.data(), rows, col, ncols, 0.0f,
              yflat, ncols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < bn; ++i)
            for (int64_t co = 0; co < cout; ++co)
                std::memcpy(out.data() + ((b0 + i) * cout + co) * plane,
                            yflat + co * ncols + i * plane,
                            static_cast<size_t>(plane) * 4);
    }
    if (bias && bias->value.numel() > 0) {
        const float* pb = bias->value.data();
        float* po = out.data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t co = 0; co < cout; ++co) {
                float add = pb[co];
                float* dst = po + (bi * cout + co) * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] += add;
            }
    }

    std::vector<Value> inputs = {x, w};
    if (bias) inputs.push_back(bias);
    auto back = [b, cin, h, wd, cout, k, ho, wo, rows, plane, spec](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node* bn_node = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const Tensor& G = self.grad;

        if (bn_node && bn_node->requires_grad) {
            float* gb = bn_node->ensure_grad().data();
            const float* g = G.data();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    const float* src = g + (bi * cout + co) * plane;
                    for (int64_t i = 0; i < plane; ++i) acc += src[i];
                    gb[co] += static_cast<float>(acc);
                }
        }
        if (!xn.requires_grad && !wn.requires_grad) return;

        int64_t chunk = detail::conv_chunk(b, rows, plane);
        float* col = scratch_buffer(0, static_cast<size_t>(rows * chunk * plane));
        float* gflat = scratch_buffer(1, static_cast<size_t>(cout * chunk * plane));
        float* gcol = xn.requires_grad
                          ? scratch_buffer(2, static_cast<size_t>(rows * chunk * plane))
                          : nullptr;
        Tensor* gw = wn.requires_grad ? &wn.ensure_grad() : nullptr;
        Tensor* gx = xn.requires_grad ? &xn.ensure_grad() : nullptr;
        for (int64_t b0 = 0; b0 < b; b0 += chunk) {
            int64_t bn = std::min(chunk, b - b0);
            int64_t ncols = bn * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < bn; ++i)
                for (int64_t co = 0; co < cout; ++co)
                    std::memcpy(gflat + co * ncols + i * plane,
                                G.data() + ((b0 + i) * cout + co) * plane,
                                static_cast<size_t>(plane) * 4);
            if (gw) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int64_t i = 0; i < bn; ++i)
                    detail::im2col_one(xn.value.data() + (b0 + i) * cin * h * wd, cin, h, wd, k,
                                       spec.stride, spec.pad, ho, wo, col, ncols,
                                       i * plane);
                sgemm_weight_grad(cout, rows, ncols, gflat, col, gw->data(), rows);
            }
            if (gx) {
                sgemm(true, false, rows, ncols, cout, 1.0f, wn.value.data(), rows, gflat,
                      ncols, 0.0f, gcol, ncols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int64_t i = 0; i < bn; ++i)
                    detail::col2im_one(gcol, cin, h, wd, k, spec.stride, spec.pad, ho, wo,
                                       gx->data() + (b0 + i) * cin * h * wd, ncols, i * plane);
            }
        }
    };
    return make_op(std::move(out), std::move(inputs), std::move(back));
}

// Transposed convolution, stride 2, kernel 3, pad 1, output_padding 1:
// doubles the spatial size. Weight layout (Cin, Cout, k, k).
inline Value conv_transpose2d(const Value& x, const Value& w, const Value& bias) {
    const Tensor& X = x->value;
    const Tensor& W = w->value;
    if (X.ndim() != 4 || W.ndim() != 4)
        throw ShapeError("conv_transpose2d expects 4-d input and weight");
    int64_t b = X.dim(0), cin = X.dim(1), h = X.dim(2), wd = X.dim(3);
    int64_t cout = W.dim(1), k = W.dim(2);
    if (W.dim(0) != cin || k != 3) throw ShapeError("conv_transpose2d: bad weight shape");
    const int64_t stride = 2, pad = 1;
    int64_t ho = h * 2, wo = wd * 2;
    int64_t rows = cout * k * k, plane = h * wd;

    // out = col2im( W^T x ), the adjoint of a stride-2 conv from (ho,wo) to (h,wd);
    // col2im accumulates, so the output starts at the bias value
    Tensor out = Tensor::uninit({b, cout, ho, wo});
    {
        int64_t oplane = ho * wo;
        const float* pb = bias && bias->value.numel() > 0 ? bias->value.data() : nullptr;
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t co = 0; co < cout; ++co) {
                float v = pb ? pb[co] : 0.0f;
                float* dst = out.data() + (bi * cout + co) * oplane;
                std::fill(dst, dst + oplane, v);
            }
    }
    int64_t chunk = detail::conv_chunk(b, std::max(rows, cin), plane);
    float* xflat = scratch_buffer(3, static_cast<size_t>(cin * chunk * plane));
    float* coly = scratch_buffer(4, static_cast<size_t>(rows * chunk * plane));
    for (int64_t b0 = 0; b0 < b; b0 += chunk) {
        int64_t bn = std::min(chunk, b - b0);
        int64_t ncols = bn * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < bn; ++i)
            for (int64_t ci = 0; ci < cin; ++ci)
                std::memcpy(xflat + ci * ncols + i * plane,
                            X.data() + ((b0 + i) * cin + ci) * plane,
                            static_cast<size_t>(plane) * 4);
        // (Cin, Cout*k*k)^T x (Cin, ncols) -> (Cout*k*k, ncols)
        sgemm(true, false, rows, ncols, cin, 1.0f, W.data(), rows, xflat, ncols, 0.0f,
              coly, ncols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t i = 0; i < bn; ++i)
            detail::col2im_one(coly, cout, ho, wo, k, stride, pad, h, wd,
                               out.data() + (b0 + i) * cout * ho * wo, ncols, i * plane);
    }
    std::vector<Value> inputs = {x, w};
    if (bias) inputs.push_back(bias);
    auto back = [b, cin, h, wd, cout, k, ho, wo, rows, plane](Node& self) {
        const int64_t stride = 2, pad = 1;
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node* bn_node = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        const Tensor& G = self.grad;
        int64_t oplane = ho * wo;

        if (bn_node && bn_node->requires_grad) {
            float* gb = bn_node->ensure_grad().data();
            const float* g = G.data();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    const float* src = g + (bi * cout + co) * oplane;
                    for (int64_t i = 0; i < oplane; ++i) acc += src[i];
                    gb[co] += static_cast<float>(acc);
                }
        }
        if (!xn.requires_grad && !wn.requires_grad) return;

        // dX = conv(G) with the same geometry; dW[ci,cokk] = Xflat . im2col(G)^T
        int64_t chunk = detail::conv_chunk(b, std::max(rows, cin), plane);
        float* colg = scratch_buffer(4, static_cast<size_t>(rows * chunk * plane));
        float* xflat = scratch_buffer(3, static_cast<size_t>(cin * chunk * plane));
        Tensor* gw = wn.requires_grad ? &wn.ensure_grad() : nullptr;
        Tensor* gx = xn.requires_grad ? &xn.ensure_grad() : nullptr;
        for (int64_t b0 = 0; b0 < b; b0 += chunk) {
            int64_t bn = std::min(chunk, b - b0);
            int64_t ncols = bn * plane;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int64_t i = 0; i < bn; ++i)
                detail::im2col_one(G.data() + (b0 + i) * cout * oplane, cout, ho, wo, k, stride,
                                   pad, h, wd, colg, ncols, i * plane);
            if (gx) {
                float* gxflat = scratch_buffer(5, static_cast<size_t>(cin * ncols));
                sgemm(false, false, cin, ncols, rows, 1.0f, wn.value.data(), rows, colg,
                      ncols, 0.0f, gxflat, ncols);
                for (int64_t i = 0; i < bn; ++i)
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const float* src = gxflat + ci * ncols + i * plane;
                        float* dst = gx->data() + ((b0 + i) * cin + ci) * plane;
                        for (int64_t p = 0; p < plane; ++p) dst[p] += src[p];
                    }
            }
            if (gw) {
                for (int64_t i = 0; i < bn; ++i)
                    for (int64_t ci = 0; ci < cin; ++ci)
                        std::memcpy(xflat + ci * ncols + i * plane,
                                    xn.value.data() + ((b0 + i) * cin + ci) * plane,
                                    static_cast<size_t>(plane) * 4);
                sgemm_weight_grad(cin, rows, ncols, xflat, colg, gw->data(), rows);
            }
        }
    };
    return make_op(std::move(out), std::move(inputs), std::move(back));
}

// ---------------------------------------------------------------------------
// batch normalization (NCHW, per channel)

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;
};

inline Value batch_norm2d(const Value& x, const Value& gamma, const Value& beta,
                          BatchNormState& state, bool training, bool fuse_relu = false) {
    const Tensor& X = x->value;
    if (X.ndim() != 4) throw ShapeError("batch_norm2d expects (B,C,H,W)");
    int64_t b = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw ShapeError("batch_norm2d: affine parameter size mismatch");
    int64_t plane = h * w, n = b * plane;

    Tensor mean = Tensor::uninit({c});
    Tensor invstd = Tensor::uninit({c});
    if (training) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t ch = 0; ch < c; ++ch) {
            double sum = 0.0, sumsq = 0.0;
            for (int64_t bi = 0; bi < b; ++bi) {
                const float* p = X.data() + (bi * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sumsq += static_cast<double>(p[i]) * p[i];
                }
            }
            double mu = sum / static_cast<double>(n);
            double var = std::max(0.0, sumsq / static_cast<double>(n) - mu * mu);
            mean[ch] = static_cast<float>(mu);
            invstd[ch] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
            float unbiased = n > 1 ? static_cast<float>(var) * static_cast<float>(n) /
                                         static_cast<float>(n - 1)
                                   : static_cast<float>(var);
            state.running_mean[ch] =
                (1.0f - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
            state.running_var[ch] =
                (1.0f - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[ch] = state.running_mean[ch];
            invstd[ch] = 1.0f / std::sqrt(state.running_var[ch] + state.eps);
        }
    }

    Tensor out = Tensor::uninit(X.shape());
    const float* pg = gamma->value.data();
    const float* pb = beta->value.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* src = X.data() + (bi * c + ch) * plane;
            float* dst = out.data() + (bi * c + ch) * plane;
            float scale = pg[ch] * invstd[ch];
            float shift = pb[ch] - mean[ch] * scale;
            if (fuse_relu) {
                for (int64_t i = 0; i < plane; ++i)
                    dst[i] = std::max(0.0f, src[i] * scale + shift);
            } else {
                for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
            }
        }

    auto back = [b, c, plane, n, mean = std::move(mean), invstd = std::move(invstd), training,
                 fuse_relu](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const Tensor& G = self.grad;
        const Tensor& Y = self.value;
        const float* pg = gn.value.data();

        // per-channel sums of (masked) g and g*xhat
        std::vector<double> sum_g(static_cast<size_t>(c), 0.0);
        std::vector<double> sum_gx(static_cast<size_t>(c), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t ch = 0; ch < c; ++ch) {
            double sg_all = 0.0, sgx_all = 0.0;
            float m = mean[ch], is = invstd[ch];
            for (int64_t bi = 0; bi < b; ++bi) {
                const float* g = G.data() + (bi * c + ch) * plane;
                const float* xv = xn.value.data() + (bi * c + ch) * plane;
                const float* yv = Y.data() + (bi * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    float ge = fuse_relu ? (yv[i] > 0.0f ? g[i] : 0.0f) : g[i];
                    sg_all += ge;
                    sgx_all += static_cast<double>(ge) * (xv[i] - m) * is;
                }
            }
            sum_g[static_cast<size_t>(ch)] = sg_all;
            sum_gx[static_cast<size_t>(ch)] = sgx_all;
        }
        if (gn.requires_grad) {
            float* gg = gn.ensure_grad().data();
            for (int64_t ch = 0; ch < c; ++ch)
                gg[ch] += static_cast<float>(sum_gx[static_cast<size_t>(ch)]);
        }
        if (bn.requires_grad) {
            float* gb = bn.ensure_grad().data();
            for (int64_t ch = 0; ch < c; ++ch)
                gb[ch] += static_cast<float>(sum_g[static_cast<size_t>(ch)]);
        }
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch) {
                const float* g = G.data() + (bi * c + ch) * plane;
                const float* xv = xn.value.data() + (bi * c + ch) * plane;
                const float* yv = Y.data() + (bi * c + ch) * plane;
                float* dst = gx.data() + (bi * c + ch) * plane;
                float m = mean[ch], is = invstd[ch], ga = pg[ch];
                if (training) {
                    float mg = static_cast<float>(sum_g[static_cast<size_t>(ch)] /
                                                  static_cast<double>(n));
                    float mgx = static_cast<float>(sum_gx[static_cast<size_t>(ch)] /
                                                   static_cast<double>(n));
                    for (int64_t i = 0; i < plane; ++i) {
                        float ge = fuse_relu ? (yv[i] > 0.0f ? g[i] : 0.0f) : g[i];
                        float xhat = (xv[i] - m) * is;
                        dst[i] += ga * is * (ge - mg - xhat * mgx);
                    }
                } else {
                    for (int64_t i = 0; i < plane; ++i) {
                        float ge = fuse_relu ? (yv[i] > 0.0f ? g[i] : 0.0f) : g[i];
                        dst[i] += ga * is * ge;
                    }
                }
            }
    };
    return make_op(std::move(out), {x, gamma, beta}, std::move(back));
}

// ---------------------------------------------------------------------------
// pixel shuffle (subpixel upsampling), factor r: (B, C*r^2, H, W) -> (B, C, H*r, W*r)

inline Value pixel_shuffle(const Value& x, int64_t r) {
    const Tensor& X = x->value;
    if (X.ndim() != 4 || X.dim(1) % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels must be divisible by r^2");
    int64_t b = X.dim(0), c = X.dim(1) / (r * r), h = X.dim(2), w = X.dim(3);
    Tensor out = Tensor::uninit({b, c, h * r, w * r});
    int64_t ho = h * r, wo = w * r;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < ho; ++oy) {
                int64_t iy = oy / r, ry = oy % r;
                float* dst = out.data() + ((bi * c + ch) * ho + oy) * wo;
                for (int64_t ox = 0; ox < wo; ++ox) {
                    int64_t ix = ox / r, rx = ox % r;
                    int64_t ci = ch * r * r + ry * r + rx;
                    dst[ox] = X[((bi * c * r * r + ci) * h + iy) * w + ix];
                }
            }
    return make_op(std::move(out), {x}, [b, c, h, w, r](Node& self) {
        Node& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
        int64_t ho = h * r, wo = w * r;
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t iy = oy / r, ry = oy % r;
                    const float* src = self.grad.data() + ((bi * c + ch) * ho + oy) * wo;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        int64_t ix = ox / r, rx = ox % r;
                        int64_t ci = ch * r * r + ry * r + rx;
                        gx[((bi * c * r * r + ci) * h + iy) * w + ix] += src[ox];
                    }
                }
    });
}

}  // namespace hf2vad
