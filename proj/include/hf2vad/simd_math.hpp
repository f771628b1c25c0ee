#pragma once

// Vectorized elementwise exp/log for the softmax-addressing and entropy hot
// paths. Cephes-style polynomial approximations, accurate to a few ulps over
// the float range, with scalar fallbacks when AVX-512 is unavailable.

#include <cmath>
#include <cstdint>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace hf2vad {

#if defined(__AVX512F__)

namespace detail {

inline __m512 exp512(__m512 x) {
    const __m512 hi = _mm512_set1_ps(88.3762626647950f);
    const __m512 lo = _mm512_set1_ps(-87.3365478515625f);
    x = _mm512_min_ps(_mm512_max_ps(x, lo), hi);

    const __m512 log2e = _mm512_set1_ps(1.44269504088896341f);
    __m512 fx = _mm512_roundscale_ps(_mm512_mul_ps(x, log2e),
                                     _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    const __m512 c1 = _mm512_set1_ps(0.693359375f);
    const __m512 c2 = _mm512_set1_ps(-2.12194440e-4f);
    __m512 r = _mm512_fnmadd_ps(fx, c1, x);
    r = _mm512_fnmadd_ps(fx, c2, r);

    __m512 p = _mm512_set1_ps(1.9875691500e-4f);
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
    p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
    __m512 r2 = _mm512_mul_ps(r, r);
    p = _mm512_fmadd_ps(p, r2, r);
    p = _mm512_add_ps(p, _mm512_set1_ps(1.0f));

    __m512i n = _mm512_cvtps_epi32(fx);
    n = _mm512_add_epi32(n, _mm512_set1_epi32(127));
    n = _mm512_slli_epi32(n, 23);
    return _mm512_mul_ps(p, _mm512_castsi512_ps(n));
}

inline __m512 log512(__m512 x) {
    const __m512 min_norm = _mm512_set1_ps(1.17549435e-38f);
    x = _mm512_max_ps(x, min_norm);  // callers guard zero/negative inputs

    __m512i xi = _mm512_castps_si512(x);
    __m512i e = _mm512_sub_epi32(_mm512_srli_epi32(xi, 23), _mm512_set1_epi32(126));
    // mantissa in [0.5, 1)
    xi = _mm512_or_si512(_mm512_and_si512(xi, _mm512_set1_epi32(0x007fffff)),
                         _mm512_set1_epi32(0x3f000000));
    __m512 m = _mm512_castsi512_ps(xi);
    __m512 ef = _mm512_cvtepi32_ps(e);
    // shift mantissa to [sqrt(1/2), sqrt(2)) around 1
    __mmask16 mask = _mm512_cmp_ps_mask(m, _mm512_set1_ps(0.707106781186547524f), _CMP_LT_OQ);
    m = _mm512_mask_add_ps(m, mask, m, m);
    ef = _mm512_mask_sub_ps(ef, mask, ef, _mm512_set1_ps(1.0f));
    m = _mm512_sub_ps(m, _mm512_set1_ps(1.0f));

    __m512 p = _mm512_set1_ps(7.0376836292e-2f);
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(-1.1514610310e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(1.1676998740e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(-1.2420140846e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(1.4249322787e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(-1.6668057665e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(2.0000714765e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(-2.4999993993e-1f));
    p = _mm512_fmadd_ps(p, m, _mm512_set1_ps(3.3333331174e-1f));
    __m512 m2 = _mm512_mul_ps(m, m);
    __m512 m3 = _mm512_mul_ps(m2, m);
    __m512 r = _mm512_mul_ps(p, m3);
    r = _mm512_fmadd_ps(ef, _mm512_set1_ps(-2.12194440e-4f), r);
    r = _mm512_fnmadd_ps(m2, _mm512_set1_ps(0.5f), r);
    r = _mm512_add_ps(r, m);
    r = _mm512_fmadd_ps(ef, _mm512_set1_ps(0.693359375f), r);
    return r;
}

}  // namespace detail

inline void vexp(const float* x, float* y, int64_t n) {
    int64_t i = 0;
    for (; i + 16 <= n; i += 16)
        _mm512_storeu_ps(y + i, detail::exp512(_mm512_loadu_ps(x + i)));
    for (; i < n; ++i) y[i] = std::exp(x[i]);
}

inline void vlog(const float* x, float* y, int64_t n) {
    int64_t i = 0;
    for (; i + 16 <= n; i += 16)
        _mm512_storeu_ps(y + i, detail::log512(_mm512_loadu_ps(x + i)));
    for (; i < n; ++i) y[i] = std::log(std::max(x[i], 1.17549435e-38f));
}

#else

inline void vexp(const float* x, float* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

inline void vlog(const float* x, float* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = std::log(std::max(x[i], 1.17549435e-38f));
}

#endif

}  // namespace hf2vad
