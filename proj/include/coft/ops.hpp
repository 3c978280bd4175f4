#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "coft/tensor.hpp"

// Dense kernels. The OpenMP versions parallelize only across independent
// output rows; every output element is produced by the same fixed-order
// serial reduction as the serial_ref versions, so results are bit-identical
// for any thread count. serial_ref is kept as the test oracle and for the
// kernel benchmark.

namespace coft {

template <typename R>
void check_finite(const TensorT<R>& t, const char* what) {
    bool bad = false;
    const R* p = t.data.data();
    const int64_t n = t.numel();
#pragma omp parallel for reduction(|| : bad) schedule(static)
    for (int64_t i = 0; i < n; ++i) bad = bad || !std::isfinite(p[i]);
    if (bad) throw NonFinite(std::string(what) + " produced a non-finite value");
}

namespace serial_ref {

template <typename R>
TensorT<R> matmul(const TensorT<R>& a, const TensorT<R>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw DimMismatch("matmul " + a.shape_str() + " x " + b.shape_str());
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<R> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        R* ci = c.row_ptr(i);
        const R* ai = a.row_ptr(i);
        for (int64_t l = 0; l < k; ++l) {
            const R ail = ai[l];
            const R* bl = b.row_ptr(l);
            for (int64_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
    return c;
}

template <typename R>
TensorT<R> softmax_lastdim(const TensorT<R>& x) {
    TensorT<R> y(x.shape);
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        const R* in = x.data.data() + r * d;
        R* out = y.data.data() + r * d;
        R mx = in[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        R sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const R inv = R(1) / sum;
        for (int64_t j = 0; j < d; ++j) out[j] *= inv;
    }
    return y;
}

template <typename R>
TensorT<R> rmsnorm(const TensorT<R>& x, const TensorT<R>& w, R eps) {
    const int64_t d = x.shape.back();
    if (w.ndim() != 1 || w.shape[0] != d)
        throw DimMismatch("rmsnorm weight " + w.shape_str() + " vs last dim " + std::to_string(d));
    TensorT<R> y(x.shape);
    const int64_t rows = x.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
        const R* in = x.data.data() + r * d;
        R* out = y.data.data() + r * d;
        R ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += in[j] * in[j];
        ms /= R(d);
        const R inv = R(1) / std::sqrt(ms + eps);
        for (int64_t j = 0; j < d; ++j) out[j] = w.data[size_t(j)] * in[j] * inv;
    }
    return y;
}

template <typename R>
TensorT<R> silu(const TensorT<R>& x) {
    TensorT<R> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const R v = x.data[size_t(i)];
        y.data[size_t(i)] = v / (R(1) + std::exp(-v));
    }
    return y;
}

} // namespace serial_ref

namespace detail {

constexpr int64_t kMatmulJB = 16;

// Register-tiled 4x16 micro-kernel: four independent accumulator chains per
// lane hide the FMA latency. Every output element still sums in ascending k
// order, so results are bit-identical to the serial reference.
template <typename R>
inline void matmul_tile4(const TensorT<R>& a, const TensorT<R>& b, TensorT<R>& c, int64_t i0, int64_t j0, int64_t k) {
    R acc0[kMatmulJB] = {}, acc1[kMatmulJB] = {}, acc2[kMatmulJB] = {}, acc3[kMatmulJB] = {};
    const R* __restrict a0 = a.row_ptr(i0);
    const R* __restrict a1 = a.row_ptr(i0 + 1);
    const R* __restrict a2 = a.row_ptr(i0 + 2);
    const R* __restrict a3 = a.row_ptr(i0 + 3);
    const R* __restrict bp = b.data.data() + j0;
    const int64_t ldb = b.cols();
    for (int64_t l = 0; l < k; ++l) {
        const R* __restrict bl = bp + l * ldb;
        const R w0 = a0[l], w1 = a1[l], w2 = a2[l], w3 = a3[l];
#pragma omp simd
        for (int64_t j = 0; j < kMatmulJB; ++j) {
            acc0[j] += w0 * bl[j];
            acc1[j] += w1 * bl[j];
            acc2[j] += w2 * bl[j];
            acc3[j] += w3 * bl[j];
        }
    }
    std::copy(acc0, acc0 + kMatmulJB, c.row_ptr(i0) + j0);
    std::copy(acc1, acc1 + kMatmulJB, c.row_ptr(i0 + 1) + j0);
    std::copy(acc2, acc2 + kMatmulJB, c.row_ptr(i0 + 2) + j0);
    std::copy(acc3, acc3 + kMatmulJB, c.row_ptr(i0 + 3) + j0);
}

// generic edge path, same ascending-k order
template <typename R>
inline void matmul_edge(const TensorT<R>& a, const TensorT<R>& b, TensorT<R>& c, int64_t i0, int64_t i1, int64_t j0,
                        int64_t j1) {
    const int64_t k = a.cols();
    for (int64_t i = i0; i < i1; ++i) {
        R* __restrict ci = c.row_ptr(i);
        const R* __restrict ai = a.row_ptr(i);
        for (int64_t l = 0; l < k; ++l) {
            const R ail = ai[l];
            const R* __restrict bl = b.row_ptr(l);
            for (int64_t j = j0; j < j1; ++j) ci[j] += ail * bl[j];
        }
    }
}

template <typename R>
void matmul_panel(const TensorT<R>& a, const TensorT<R>& b, TensorT<R>& c, int64_t i0, int64_t i1) {
    const int64_t k = a.cols(), n = b.cols();
    const int64_t jfull = n - n % kMatmulJB;
    if (i1 - i0 == 4) {
        for (int64_t j0 = 0; j0 < jfull; j0 += kMatmulJB) matmul_tile4(a, b, c, i0, j0, k);
        if (jfull < n) matmul_edge(a, b, c, i0, i1, jfull, n);
    } else {
        matmul_edge(a, b, c, i0, i1, 0, n);
    }
}

} // namespace detail

template <typename R>
TensorT<R> matmul(const TensorT<R>& a, const TensorT<R>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw DimMismatch("matmul " + a.shape_str() + " x " + b.shape_str());
    const int64_t m = a.rows(), n = b.cols();
    TensorT<R> c({m, n});
#pragma omp parallel for schedule(static)
    for (int64_t i0 = 0; i0 < m; i0 += 4) detail::matmul_panel(a, b, c, i0, std::min(m, i0 + 4));
    check_finite(c, "matmul");
    return c;
}

template <typename R>
TensorT<R> transpose(const TensorT<R>& a) {
    if (a.ndim() != 2) throw DimMismatch("transpose expects 2-d, got " + a.shape_str());
    const int64_t m = a.rows(), n = a.cols();
    TensorT<R> t({n, m});
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) t.data[size_t(j * m + i)] = a.data[size_t(i * n + j)];
    return t;
}

template <typename R>
TensorT<R> softmax_lastdim(const TensorT<R>& x) {
    TensorT<R> y(x.shape);
    const int64_t d = x.shape.back();
    const int64_t rows = x.numel() / d;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const R* in = x.data.data() + r * d;
        R* out = y.data.data() + r * d;
        R mx = in[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        R sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const R inv = R(1) / sum;
        for (int64_t j = 0; j < d; ++j) out[j] *= inv;
    }
    check_finite(y, "softmax");
    return y;
}

template <typename R>
TensorT<R> rmsnorm(const TensorT<R>& x, const TensorT<R>& w, R eps) {
    const int64_t d = x.shape.back();
    if (w.ndim() != 1 || w.shape[0] != d)
        throw DimMismatch("rmsnorm weight " + w.shape_str() + " vs last dim " + std::to_string(d));
    TensorT<R> y(x.shape);
    const int64_t rows = x.numel() / d;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const R* __restrict in = x.data.data() + r * d;
        R* __restrict out = y.data.data() + r * d;
        R ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += in[j] * in[j];
        ms /= R(d);
        const R inv = R(1) / std::sqrt(ms + eps);
        for (int64_t j = 0; j < d; ++j) out[j] = w.data[size_t(j)] * in[j] * inv;
    }
    check_finite(y, "rmsnorm");
    return y;
}

template <typename R>
TensorT<R> silu(const TensorT<R>& x) {
    TensorT<R> y(x.shape);
    const int64_t n = x.numel();
    const R* __restrict in = x.data.data();
    R* __restrict out = y.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = in[i] / (R(1) + std::exp(-in[i]));
    check_finite(y, "silu");
    return y;
}

// Inverted dropout: entries are 0 with probability p, else 1/(1-p), so that
// eval mode needs no rescaling. Mask generation is sequential in the rng.
template <typename R>
TensorT<R> dropout_mask(const std::vector<int64_t>& shape, double p, SeededRng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw BadProbability("dropout p must be in [0,1), got " + std::to_string(p));
    TensorT<R> m(shape);
    if (p == 0.0) {
        std::fill(m.data.begin(), m.data.end(), R(1));
        return m;
    }
    const R keep = R(1.0 / (1.0 - p));
    for (auto& v : m.data) v = (rng.uniform() < p) ? R(0) : keep;
    return m;
}

template <typename R>
TensorT<R> add(const TensorT<R>& a, const TensorT<R>& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("add " + a.shape_str() + " vs " + b.shape_str());
    TensorT<R> c(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) c.data[size_t(i)] = a.data[size_t(i)] + b.data[size_t(i)];
    return c;
}

template <typename R>
void add_inplace(TensorT<R>& a, const TensorT<R>& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("add_inplace " + a.shape_str() + " vs " + b.shape_str());
    for (int64_t i = 0; i < a.numel(); ++i) a.data[size_t(i)] += b.data[size_t(i)];
}

template <typename R>
TensorT<R> hadamard(const TensorT<R>& a, const TensorT<R>& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("hadamard " + a.shape_str() + " vs " + b.shape_str());
    TensorT<R> c(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) c.data[size_t(i)] = a.data[size_t(i)] * b.data[size_t(i)];
    return c;
}

template <typename R>
TensorT<R> scale(const TensorT<R>& a, R s) {
    TensorT<R> c(a.shape);
    for (int64_t i = 0; i < a.numel(); ++i) c.data[size_t(i)] = a.data[size_t(i)] * s;
    return c;
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void cap_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

} // namespace coft
