#pragma once

// Dense row-major float32 tensor. This is deliberately minimal: contiguous
// storage, value semantics, and the handful of helpers the network code
// needs. Heavy lifting (matrix products) goes through OpenBLAS.

#include <cblas.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "hf2vad/core.hpp"

namespace hf2vad {

#ifdef __GLIBC__
namespace detail {
// Large activation/gradient buffers churn every training step; keeping them
// inside the main arena instead of per-allocation mmap avoids refaulting the
// same pages thousands of times.
struct MallocTuner {
    MallocTuner() {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    }
};
inline MallocTuner malloc_tuner_instance;
}  // namespace detail
#endif

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ')';
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
        n *= d;
    }
    return n;
}

// Owned float storage with optional uninitialized allocation. Large network
// buffers are written in full right after allocation, so the default
// zero-fill of std::vector would be pure overhead on this memory-bound path.
class FloatBuffer {
public:
    FloatBuffer() = default;
    FloatBuffer(size_t n, bool zero) : p_(zero ? new float[n]() : new float[n]), n_(n) {}
    FloatBuffer(const FloatBuffer& o) : p_(o.n_ ? new float[o.n_] : nullptr), n_(o.n_) {
        if (n_) std::memcpy(p_.get(), o.p_.get(), n_ * sizeof(float));
    }
    FloatBuffer(FloatBuffer&&) noexcept = default;
    FloatBuffer& operator=(const FloatBuffer& o) {
        if (this != &o) {
            if (n_ != o.n_) {
                p_.reset(o.n_ ? new float[o.n_] : nullptr);
                n_ = o.n_;
            }
            if (n_) std::memcpy(p_.get(), o.p_.get(), n_ * sizeof(float));
        }
        return *this;
    }
    FloatBuffer& operator=(FloatBuffer&&) noexcept = default;

    size_t size() const { return n_; }
    float* data() { return p_.get(); }
    const float* data() const { return p_.get(); }
    float& operator[](size_t i) { return p_[i]; }
    float operator[](size_t i) const { return p_[i]; }

private:
    std::unique_ptr<float[]> p_;
    size_t n_ = 0;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), true) {}
    Tensor(Shape shape, float fill)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), false) {
        std::fill(data_.data(), data_.data() + data_.size(), fill);
    }
    Tensor(Shape shape, const std::vector<float>& data)
        : shape_(std::move(shape)), data_(data.size(), false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape_))
            throw ShapeError("data size does not match shape " + shape_str(shape_));
        if (!data.empty()) std::memcpy(data_.data(), data.data(), data.size() * sizeof(float));
    }

    // skips zero-initialization; caller promises to write every element
    static Tensor uninit(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = FloatBuffer(static_cast<size_t>(shape_numel(t.shape_)), false);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

    static Tensor uniform(Shape shape, float lo, float hi, Rng& rng) {
        Tensor t = uninit(std::move(shape));
        for (size_t i = 0; i < t.data_.size(); ++i) t.data_[i] = rng.uniform(lo, hi);
        return t;
    }
    static Tensor normal(Shape shape, float mean, float sd, Rng& rng) {
        Tensor t = uninit(std::move(shape));
        for (size_t i = 0; i < t.data_.size(); ++i) t.data_[i] = rng.normal(mean, sd);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.size() == 0; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    float& at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
    float at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    void fill(float v) { std::fill(data_.data(), data_.data() + data_.size(), v); }

    bool all_finite() const {
        for (size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(data_[i])) return false;
        return true;
    }

    float sum() const {
        double acc = 0.0;
        for (size_t i = 0; i < data_.size(); ++i) acc += data_[i];
        return static_cast<float>(acc);
    }
    float mean() const { return numel() ? sum() / static_cast<float>(numel()) : 0.0f; }
    float max_abs() const {
        float m = 0.0f;
        for (size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i]));
        return m;
    }

    // in-place helpers used by the optimizer and gradient accumulation
    void add_(const Tensor& o, float scale = 1.0f) {
        require_same(o);
        const float* p = o.data();
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * p[i];
    }
    void scale_(float s) {
        for (size_t i = 0; i < data_.size(); ++i) data_[i] *= s;
    }

private:
    size_t offset(std::initializer_list<int64_t> idx) const {
        if (static_cast<int>(idx.size()) != ndim())
            throw ShapeError("index rank mismatch for " + shape_str(shape_));
        int64_t off = 0;
        int i = 0;
        for (int64_t v : idx) {
            off = off * shape_[static_cast<size_t>(i)] + v;
            ++i;
        }
        return static_cast<size_t>(off);
    }
    void require_same(const Tensor& o) const {
        if (!same_shape(o))
            throw ShapeError("shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    }

    Shape shape_;
    FloatBuffer data_;
};

// C = alpha * op(A) * op(B) + beta * C, row-major. Thread count is chosen by
// problem size: small products run single-threaded (thread fan-out costs more
// than it saves there), and the choice depends only on the shape, so results
// stay deterministic run to run.
inline void sgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
                  const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
                  int64_t ldc) {
    thread_local int current_threads = 0;
    int want = (m * n * k >= (1ll << 20)) ? 2 : 1;
    if (want != current_threads) {
        openblas_set_num_threads(want);
        current_threads = want;
    }
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

// C(m x n) += A(m x K) * B(n x K)^T with rows of A and B contiguous over K.
// Weight gradients have this shape: a tiny output driven by an enormous
// reduction dimension, which generic GEMM handles poorly. K is blocked so the
// A panel stays in L2 while B streams through RAM exactly once.
#if defined(__AVX512F__)
inline void gemm_abt_acc(int64_t m, int64_t n, int64_t K, const float* A, const float* B,
                         float* C, int64_t ldc) {
    constexpr int64_t KB = 2048;
    int64_t ktail = K - K % 16;
    for (int64_t k0 = 0; k0 < K; k0 += KB) {
        int64_t k1 = std::min(K, k0 + KB);
        for (int64_t i0 = 0; i0 < m; i0 += 8) {
            int64_t ib = std::min<int64_t>(8, m - i0);
            for (int64_t j0 = 0; j0 < n; j0 += 2) {
                int64_t jb = std::min<int64_t>(2, n - j0);
                __m512 acc[8][2];
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 2; ++j) acc[i][j] = _mm512_setzero_ps();
                const float* b0 = B + j0 * K;
                const float* b1 = B + (j0 + jb - 1) * K;
                int64_t k = k0;
                int64_t kend = std::min(k1, ktail);
                for (; k < kend; k += 16) {
                    __m512 vb0 = _mm512_loadu_ps(b0 + k);
                    __m512 vb1 = _mm512_loadu_ps(b1 + k);
                    for (int i = 0; i < ib; ++i) {
                        __m512 va = _mm512_loadu_ps(A + (i0 + i) * K + k);
                        acc[i][0] = _mm512_fmadd_ps(va, vb0, acc[i][0]);
                        acc[i][1] = _mm512_fmadd_ps(va, vb1, acc[i][1]);
                    }
                }
                float tail[8][2] = {};
                for (; k < k1; ++k)
                    for (int i = 0; i < ib; ++i) {
                        tail[i][0] += A[(i0 + i) * K + k] * b0[k];
                        tail[i][1] += A[(i0 + i) * K + k] * b1[k];
                    }
                for (int i = 0; i < ib; ++i) {
                    C[(i0 + i) * ldc + j0] += _mm512_reduce_add_ps(acc[i][0]) + tail[i][0];
                    if (jb > 1)
                        C[(i0 + i) * ldc + j0 + 1] +=
                            _mm512_reduce_add_ps(acc[i][1]) + tail[i][1];
                }
            }
        }
    }
}
#endif

// weight-gradient dispatch: C(m x n) += A(m x K) B(n x K)^T
inline void sgemm_weight_grad(int64_t m, int64_t n, int64_t K, const float* A, const float* B,
                              float* C, int64_t ldc) {
#if defined(__AVX512F__)
    if (K >= 16384) {
        gemm_abt_acc(m, n, K, A, B, C, ldc);
        return;
    }
#endif
    sgemm(false, true, m, n, K, 1.0f, A, K, B, K, 1.0f, C, ldc);
}

// Reusable per-thread scratch buffers for convolution column matrices and
// similar transients. Indexed slots avoid reallocating tens of megabytes per
// op call; contents are always fully overwritten by the user.
inline float* scratch_buffer(int slot, size_t n) {
    constexpr int kSlots = 12;
    thread_local std::array<std::unique_ptr<float[]>, kSlots> bufs;
    thread_local std::array<size_t, kSlots> caps = {};
    auto& ptr = bufs.at(static_cast<size_t>(slot));
    auto& cap = caps.at(static_cast<size_t>(slot));
    if (cap < n) {
        ptr.reset(new float[n]);
        cap = n;
    }
    return ptr.get();
}

}  // namespace hf2vad
