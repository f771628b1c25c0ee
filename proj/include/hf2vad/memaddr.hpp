#pragma once

// Memory module: slot bank, softmax-over-cosine addressing, per-location map
// addressing on feature maps, and the entropy regularizer on matching
// probabilities.
//
// The differentiable map addressing is split into two ops:
//   weights = address_weights(features, slots)   rows are softmax(cos(q, m_k))
//   out     = address_retrieve(weights, slots, shape)
// so that gradients arriving through the retrieved features and through the
// entropy loss are both accumulated into the weights node before the
// softmax/cosine backward runs.

#include <vector>

#include "hf2vad/ops.hpp"
#include "hf2vad/simd_math.hpp"

namespace hf2vad {

struct MemoryBank {
    Tensor slots;  // (N, C)

    MemoryBank() = default;
    MemoryBank(int64_t n, int64_t c, Rng& rng) {
        if (n < 1 || c < 1) throw ConfigError("MemoryBank: N and C must be >= 1");
        float bound = 1.0f / std::sqrt(static_cast<float>(c));
        slots = Tensor::uniform({n, c}, -bound, bound, rng);
    }
    explicit MemoryBank(Tensor s) : slots(std::move(s)) {
        if (slots.ndim() != 2 || slots.dim(0) < 1) throw ConfigError("MemoryBank: bad slot matrix");
        if (!slots.all_finite()) throw ValueError("MemoryBank: slots must be finite");
    }

    int64_t n() const { return slots.dim(0); }
    int64_t c() const { return slots.dim(1); }
};

// Cosine similarity with clamped norms: zero-norm vectors yield similarity 0,
// and the map stays continuous as a vector shrinks toward zero.
inline constexpr float kNormEps = 1e-8f;

inline float cosine_sim(const float* a, const float* b, int64_t n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    return static_cast<float>(dot / (std::max(std::sqrt(na), static_cast<double>(kNormEps)) *
                                     std::max(std::sqrt(nb), static_cast<double>(kNormEps))));
}

struct AddressResult {
    Tensor retrieved;  // (C)
    Tensor weights;    // (N), nonnegative, sums to 1
};

// Optional hard shrinkage: weights below `shrink_threshold` are zeroed and the
// rest renormalized. A threshold of 0 disables it (the default).
inline AddressResult address(const Tensor& query, const MemoryBank& bank,
                             float shrink_threshold = 0.0f) {
    if (query.ndim() != 1 || query.dim(0) != bank.c())
        throw ShapeError("address: query width must equal bank width");
    if (!query.all_finite()) throw ValueError("address: query must be finite");
    int64_t n = bank.n(), c = bank.c();
    Tensor sims({n});
    for (int64_t k = 0; k < n; ++k)
        sims[k] = cosine_sim(query.data(), bank.slots.data() + k * c, c);
    // softmax
    float mx = sims[0];
    for (int64_t k = 1; k < n; ++k) mx = std::max(mx, sims[k]);
    Tensor w({n});
    double z = 0.0;
    for (int64_t k = 0; k < n; ++k) {
        w[k] = std::exp(sims[k] - mx);
        z += w[k];
    }
    for (int64_t k = 0; k < n; ++k) w[k] = static_cast<float>(w[k] / z);
    if (shrink_threshold > 0.0f) {
        double kept = 0.0;
        for (int64_t k = 0; k < n; ++k) kept += w[k] >= shrink_threshold ? w[k] : 0.0;
        if (kept > 0.0) {
            for (int64_t k = 0; k < n; ++k)
                w[k] = w[k] >= shrink_threshold ? static_cast<float>(w[k] / kept) : 0.0f;
        }
    }
    Tensor r({c});
    for (int64_t k = 0; k < n; ++k)
        if (w[k] != 0.0f)
            for (int64_t i = 0; i < c; ++i) r[i] += w[k] * bank.slots[k * c + i];
    return {std::move(r), std::move(w)};
}

// Entropy of weight vectors, 0*log 0 := 0. For a (rows, N) matrix returns the
// per-row entropies summed over slots and averaged over rows.
inline float entropy_of_weights(const Tensor& w, int64_t rows, int64_t n) {
    double acc = 0.0;
    const float* p = w.data();
    for (int64_t l = 0; l < rows; ++l)
        for (int64_t k = 0; k < n; ++k) {
            float v = p[l * n + k];
            if (v < 0.0f) throw ValueError("entropy: negative weight");
            if (v > 0.0f) acc -= static_cast<double>(v) * std::log(static_cast<double>(v));
        }
    return static_cast<float>(acc / static_cast<double>(rows));
}

// ---------------------------------------------------------------------------
// differentiable map addressing

namespace detail {

// (B,C,H,W) -> (B*H*W, C)
inline void gather_queries(const Tensor& x, float* q) {
    int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t bi = 0; bi < b; ++bi) {
        const float* src = x.data() + bi * c * plane;
        float* dst = q + bi * plane * c;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t s = 0; s < plane; ++s) dst[s * c + ch] = src[ch * plane + s];
    }
}

// (B*H*W, C) -> (B,C,H,W)
inline void scatter_features(const float* r, Tensor& out) {
    int64_t b = out.dim(0), c = out.dim(1), plane = out.dim(2) * out.dim(3);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t bi = 0; bi < b; ++bi) {
        const float* src = r + bi * plane * c;
        float* dst = out.data() + bi * c * plane;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t s = 0; s < plane; ++s) dst[ch * plane + s] = src[s * c + ch];
    }
}

}  // namespace detail

// weights node: value shape (B*H*W, N); each row is an addressing
// distribution for one spatial location (row-major over B,H,W).
inline Value address_weights(const Value& features, const Value& slots,
                             float shrink_threshold = 0.0f) {
    const Tensor& X = features->value;
    const Tensor& M = slots->value;
    if (X.ndim() != 4) throw ShapeError("address_weights expects (B,C,H,W) features");
    if (M.ndim() != 2 || M.dim(1) != X.dim(1))
        throw ShapeError("address_weights: feature channels " + std::to_string(X.dim(1)) +
                         " != bank width " + std::to_string(M.dim(1)));
    int64_t c = X.dim(1), n = M.dim(0);
    int64_t rows = X.dim(0) * X.dim(2) * X.dim(3);

    float* q = scratch_buffer(6, static_cast<size_t>(rows * c));
    detail::gather_queries(X, q);
    Tensor qinv({rows}), minv({n});
    Tensor qclamped({rows}), mclamped({n});
    for (int64_t l = 0; l < rows; ++l) {
        double s = 0.0;
        for (int64_t i = 0; i < c; ++i) s += static_cast<double>(q[l * c + i]) * q[l * c + i];
        double norm = std::sqrt(s);
        qclamped[l] = norm < kNormEps ? 1.0f : 0.0f;
        qinv[l] = static_cast<float>(1.0 / std::max(norm, static_cast<double>(kNormEps)));
    }
    for (int64_t k = 0; k < n; ++k) {
        double s = 0.0;
        const float* m = M.data() + k * c;
        for (int64_t i = 0; i < c; ++i) s += static_cast<double>(m[i]) * m[i];
        double norm = std::sqrt(s);
        mclamped[k] = norm < kNormEps ? 1.0f : 0.0f;
        minv[k] = static_cast<float>(1.0 / std::max(norm, static_cast<double>(kNormEps)));
    }

    Tensor sims = Tensor::uninit({rows, n});
    sgemm(false, true, rows, n, c, 1.0f, q, c, M.data(), c, 0.0f, sims.data(), n);
    for (int64_t l = 0; l < rows; ++l)
        for (int64_t k = 0; k < n; ++k) sims[l * n + k] *= qinv[l] * minv[k];

    Tensor w = Tensor::uninit({rows, n});
    Tensor wsoft;  // pre-shrink softmax, kept only when shrinkage is active
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t l = 0; l < rows; ++l) {
        const float* s = sims.data() + l * n;
        float* wp = w.data() + l * n;
        float mx = s[0];
        for (int64_t k = 1; k < n; ++k) mx = std::max(mx, s[k]);
        for (int64_t k = 0; k < n; ++k) wp[k] = s[k] - mx;
        vexp(wp, wp, n);
        double z = 0.0;
        for (int64_t k = 0; k < n; ++k) z += wp[k];
        float zi = static_cast<float>(1.0 / z);
        for (int64_t k = 0; k < n; ++k) wp[k] *= zi;
    }
    if (shrink_threshold > 0.0f) {
        wsoft = w;
        for (int64_t l = 0; l < rows; ++l) {
            float* wp = w.data() + l * n;
            double kept = 0.0;
            for (int64_t k = 0; k < n; ++k) kept += wp[k] >= shrink_threshold ? wp[k] : 0.0;
            if (kept > 0.0)
                for (int64_t k = 0; k < n; ++k)
                    wp[k] = wp[k] >= shrink_threshold ? static_cast<float>(wp[k] / kept) : 0.0f;
        }
    }

    auto back = [rows, n, c, sims = std::move(sims), qinv = std::move(qinv),
                 minv = std::move(minv), qclamped = std::move(qclamped),
                 mclamped = std::move(mclamped), wsoft = std::move(wsoft),
                 shrink_threshold](Node& self) {
        Node& xn = *self.inputs[0];
        Node& mn = *self.inputs[1];
        const Tensor& M = mn.value;

        // gradient w.r.t. the softmax output
        const Tensor& wfinal = self.value;
        const Tensor& wref = shrink_threshold > 0.0f ? wsoft : wfinal;
        Tensor gw_shrunk;
        const float* gwp = self.grad.data();
        if (shrink_threshold > 0.0f) {
            // renormalization backward on kept entries
            gw_shrunk = self.grad;
            for (int64_t l = 0; l < rows; ++l) {
                const float* ws = wsoft.data() + l * n;
                const float* wf = wfinal.data() + l * n;
                float* g = gw_shrunk.data() + l * n;
                double kept = 0.0;
                for (int64_t k = 0; k < n; ++k) kept += ws[k] >= shrink_threshold ? ws[k] : 0.0;
                if (kept <= 0.0) continue;
                double dot = 0.0;
                for (int64_t k = 0; k < n; ++k)
                    if (ws[k] >= shrink_threshold) dot += static_cast<double>(g[k]) * wf[k];
                for (int64_t k = 0; k < n; ++k)
                    g[k] = ws[k] >= shrink_threshold
                               ? static_cast<float>((g[k] - dot) / kept)
                               : 0.0f;
            }
            gwp = gw_shrunk.data();
        }

        // softmax backward: gS = W .* (gW - rowdot(gW, W))
        Tensor gs = Tensor::uninit({rows, n});
        for (int64_t l = 0; l < rows; ++l) {
            const float* wp = wref.data() + l * n;
            const float* g = gwp + l * n;
            float* d = gs.data() + l * n;
            double dot = 0.0;
            for (int64_t k = 0; k < n; ++k) dot += static_cast<double>(g[k]) * wp[k];
            for (int64_t k = 0; k < n; ++k)
                d[k] = wp[k] * (g[k] - static_cast<float>(dot));
        }

        // cosine backward. gA = gS * qinv_l * minv_k
        Tensor ga = Tensor::uninit({rows, n});
        for (int64_t l = 0; l < rows; ++l)
            for (int64_t k = 0; k < n; ++k) ga[l * n + k] = gs[l * n + k] * qinv[l] * minv[k];

        float* q = scratch_buffer(6, static_cast<size_t>(rows * c));
        detail::gather_queries(xn.value, q);

        if (xn.requires_grad) {
            // gQ = gA M - diag(c_l * qinv^2) Q, c_l = sum_k gS*S
            float* gq = scratch_buffer(7, static_cast<size_t>(rows * c));
            sgemm(false, false, rows, c, n, 1.0f, ga.data(), n, M.data(), c, 0.0f, gq, c);
            for (int64_t l = 0; l < rows; ++l) {
                if (qclamped[l] != 0.0f) continue;  // inverse norm is constant here
                double cl = 0.0;
                for (int64_t k = 0; k < n; ++k)
                    cl += static_cast<double>(gs[l * n + k]) * sims[l * n + k];
                float coef = static_cast<float>(cl) * qinv[l] * qinv[l];
                for (int64_t i = 0; i < c; ++i) gq[l * c + i] -= coef * q[l * c + i];
            }
            Tensor gx_add(xn.value.shape());
            detail::scatter_features(gq, gx_add);
            xn.ensure_grad().add_(gx_add);
        }
        if (mn.requires_grad) {
            Tensor& gm = mn.ensure_grad();
            // gM = gA^T Q - diag(d_k * minv^2) M
            sgemm(true, false, n, c, rows, 1.0f, ga.data(), n, q, c, 1.0f, gm.data(), c);
            for (int64_t k = 0; k < n; ++k) {
                if (mclamped[k] != 0.0f) continue;
                double dk = 0.0;
                for (int64_t l = 0; l < rows; ++l)
                    dk += static_cast<double>(gs[l * n + k]) * sims[l * n + k];
                float coef = static_cast<float>(dk) * minv[k] * minv[k];
                const float* m = M.data() + k * c;
                float* g = gm.data() + k * c;
                for (int64_t i = 0; i < c; ++i) g[i] -= coef * m[i];
            }
        }
    };
    return make_op(std::move(w), {features, slots}, std::move(back));
}

// retrieved features from addressing weights: out[b,:,h,w] = w_row . M
inline Value address_retrieve(const Value& weights, const Value& slots, int64_t b, int64_t h,
                              int64_t w) {
    const Tensor& W = weights->value;
    const Tensor& M = slots->value;
    int64_t rows = W.dim(0), n = W.dim(1), c = M.dim(1);
    if (rows != b * h * w) throw ShapeError("address_retrieve: row/shape mismatch");
    if (M.dim(0) != n) throw ShapeError("address_retrieve: slot count mismatch");
    float* r = scratch_buffer(8, static_cast<size_t>(rows * c));
    sgemm(false, false, rows, c, n, 1.0f, W.data(), n, M.data(), c, 0.0f, r, c);
    Tensor out = Tensor::uninit({b, c, h, w});
    detail::scatter_features(r, out);
    return make_op(std::move(out), {weights, slots}, [rows, n, c](Node& self) {
        Node& wn = *self.inputs[0];
        Node& mn = *self.inputs[1];
        float* gr = scratch_buffer(9, static_cast<size_t>(rows * c));
        detail::gather_queries(self.grad, gr);
        if (wn.requires_grad) {
            Tensor& gw = wn.ensure_grad();
            sgemm(false, true, rows, n, c, 1.0f, gr, c, mn.value.data(), c, 1.0f,
                  gw.data(), n);
        }
        if (mn.requires_grad) {
            Tensor& gm = mn.ensure_grad();
            sgemm(true, false, n, c, rows, 1.0f, wn.value.data(), n, gr, c, 1.0f,
                  gm.data(), c);
        }
    });
}

// Entropy of the matching probabilities: sum over slots, averaged over the
// rows (batch x spatial positions) of one memory module.
inline Value entropy_loss_rows(const Value& weights) {
    const Tensor& W = weights->value;
    if (W.ndim() != 2) throw ShapeError("entropy_loss_rows expects (rows, N)");
    int64_t rows = W.dim(0), n = W.dim(1);
    int64_t total = rows * n;
    const float* wp = W.data();
    float* lg = scratch_buffer(10, static_cast<size_t>(total));
    vlog(wp, lg, total);
    double acc = 0.0;
    for (int64_t i = 0; i < total; ++i) {
        if (wp[i] < 0.0f) throw ValueError("entropy: negative weight");
        if (wp[i] > 0.0f) acc -= static_cast<double>(wp[i]) * lg[i];
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(rows)));
    Value node = make_op(std::move(out), {weights}, [rows, n](Node& self) {
        Node& wn = *self.inputs[0];
        if (!wn.requires_grad) return;
        float g = self.grad[0] / static_cast<float>(rows);
        int64_t total = rows * n;
        const float* wp = wn.value.data();
        float* lg = scratch_buffer(10, static_cast<size_t>(total));
        vlog(wp, lg, total);
        float* gw = wn.ensure_grad().data();
        for (int64_t i = 0; i < total; ++i)
            if (wp[i] > 1e-30f) gw[i] -= g * (lg[i] + 1.0f);
    });
    node->hi_value = acc / static_cast<double>(rows);
    return node;
}

// Sum of per-module averaged entropies (Eq. 2 with per-module averaging).
inline Value entropy_loss(const std::vector<Value>& weight_nodes) {
    if (weight_nodes.empty()) return make_leaf(Tensor::scalar(0.0f));
    Value total = entropy_loss_rows(weight_nodes[0]);
    for (size_t i = 1; i < weight_nodes.size(); ++i)
        total = add(total, entropy_loss_rows(weight_nodes[i]));
    return total;
}

// Non-differentiable convenience matching the per-sample map contract:
// features (C,H,W) -> retrieved (C,H,W) and weight map (N,H,W).
struct AddressMapResult {
    Tensor out;         // (C,H,W)
    Tensor weight_map;  // (N,H,W)
};

inline AddressMapResult address_map(const Tensor& features, const MemoryBank& bank,
                                    float shrink_threshold = 0.0f) {
    if (features.ndim() != 3) throw ShapeError("address_map expects (C,H,W)");
    NoGradGuard ng;
    int64_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
    Value x = make_leaf(features.reshaped({1, c, h, w}));
    Value m = make_leaf(bank.slots);
    Value wv = address_weights(x, m, shrink_threshold);
    Value out = address_retrieve(wv, m, 1, h, w);
    AddressMapResult res;
    res.out = out->value.reshaped({c, h, w});
    res.weight_map = Tensor({bank.n(), h, w});
    // rows are (h,w) major; transpose to (N,H,W)
    for (int64_t s = 0; s < h * w; ++s)
        for (int64_t k = 0; k < bank.n(); ++k)
            res.weight_map[k * h * w + s] = wv->value[s * bank.n() + k];
    return res;
}

}  // namespace hf2vad
