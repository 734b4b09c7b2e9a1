#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>

#include "snapcache/error.hpp"
#include "snapcache/tensor.hpp"

namespace snapcache {

// Additive-mask surrogate for -infinity. exp() of it underflows to exactly 0
// after max-subtraction, so masked entries never carry mass and never make NaN.
inline constexpr double kMaskValue = -1e9;

enum class PoolMode { max, avg };

inline std::string_view to_string(PoolMode mode) { return mode == PoolMode::max ? "max" : "avg"; }

template <typename T>
void check_finite(const Tensor<T>& t, std::string_view op) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i])) {
            throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

// Dot product with four independent accumulators. Every attention path in
// the library goes through this so prefill and decode round identically.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T s0{0}, s1{0}, s2{0}, s3{0};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

namespace detail {

// Numpy-style broadcast of two leading-dimension lists.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view what) {
    const std::size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(what) + ": cannot broadcast " + shape_string(a) + " with " +
                             shape_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Flat index into a tensor of shape `src` for the multi-index `idx` of the
// broadcast shape `dst` (src right-aligned against dst).
inline std::size_t broadcast_offset(const Shape& src, const Shape& dst, std::span<const std::size_t> idx) {
    std::size_t flat = 0;
    const std::size_t skip = dst.size() - src.size();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const std::size_t j = src[i] == 1 ? 0 : idx[i + skip];
        flat = flat * src[i] + j;
    }
    return flat;
}

inline void increment(std::vector<std::size_t>& idx, const Shape& shape) {
    for (std::size_t i = shape.size(); i-- > 0;) {
        if (++idx[i] < shape[i]) return;
        idx[i] = 0;
    }
}

} // namespace detail

// Matrix product over the last two axes, batched and broadcast over up to two
// leading axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || a.rank() > 4 || b.rank() < 2 || b.rank() > 4) {
        throw ShapeError("matmul: operands must have rank 2..4, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2);
    const std::size_t n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    const Shape lead = detail::broadcast_shapes(lead_a, lead_b, "matmul");

    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);

    const std::size_t batches = shape_size(lead);
    std::vector<std::size_t> idx(lead.size(), 0);
    for (std::size_t batch = 0; batch < batches; ++batch) {
        const T* pa = a.data().data() + detail::broadcast_offset(lead_a, lead, idx) * m * k;
        const T* pb = b.data().data() + detail::broadcast_offset(lead_b, lead, idx) * k * n;
        T* po = out.data().data() + batch * m * n;
        // i-p-j order keeps the inner loop contiguous in both b and out.
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const T aip = pa[i * k + p];
                const T* brow = pb + p * n;
                T* orow = po + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
        }
        detail::increment(idx, lead);
    }
    check_finite(out, "matmul");
    return out;
}

// Numerically stable softmax over one row, in place. Throws when every entry
// is at or below the mask surrogate.
template <typename T>
void softmax_inplace(std::span<T> row) {
    if (row.empty()) throw NumericError("softmax: empty row");
    const T top = *std::max_element(row.begin(), row.end());
    if (!std::isfinite(top)) throw NumericError("softmax: non-finite logit");
    if (top <= static_cast<T>(kMaskValue / 2)) {
        throw NumericError("softmax: fully masked row has no defined distribution");
    }
    T total{0};
    for (T& x : row) {
        x = std::exp(x - top);
        total += x;
    }
    for (T& x : row) x /= total;
}

// Softmax along the last axis of a rank 2..4 tensor, optionally after adding
// a broadcastable additive mask of 0 / kMaskValue entries.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m, const Tensor<T>* mask = nullptr) {
    if (m.rank() < 2 || m.rank() > 4) {
        throw ShapeError("softmax_rows: rank must be 2..4, got " + shape_string(m.shape()));
    }
    Tensor<T> out = m;
    if (mask != nullptr) {
        if (mask->rank() > m.rank()) {
            throw ShapeError("softmax_rows: mask " + shape_string(mask->shape()) + " does not broadcast to " +
                             shape_string(m.shape()));
        }
        const Shape joined = detail::broadcast_shapes(m.shape(), mask->shape(), "softmax_rows");
        if (joined != m.shape()) {
            throw ShapeError("softmax_rows: mask " + shape_string(mask->shape()) + " does not broadcast to " +
                             shape_string(m.shape()));
        }
        std::vector<std::size_t> idx(m.rank(), 0);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += (*mask)[detail::broadcast_offset(mask->shape(), m.shape(), idx)];
            detail::increment(idx, m.shape());
        }
    }
    for (std::size_t r = 0; r < out.rows(); ++r) {
        try {
            softmax_inplace(out.row(r));
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (row " + std::to_string(r) + ")");
        }
    }
    check_finite(out, "softmax_rows");
    return out;
}

inline void check_pool_kernel(std::size_t kernel) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw ConfigError("pool1d: kernel size must be odd and positive, got " + std::to_string(kernel));
    }
}

// Stride-1 pooling with symmetric padding kernel/2, so output length equals
// input length. Max mode pads with kMaskValue; avg mode pads with zero and
// always divides by the full kernel size.
template <typename T>
void pool1d_row(std::span<const T> in, std::span<T> out, std::size_t kernel, PoolMode mode) {
    check_pool_kernel(kernel);
    if (in.size() != out.size()) throw ShapeError("pool1d: output length differs from input");
    const std::size_t n = in.size();
    const std::size_t half = kernel / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + half);
        const bool padded = i < half || i + half >= n;
        if (mode == PoolMode::max) {
            T best = padded ? static_cast<T>(kMaskValue) : std::numeric_limits<T>::lowest();
            for (std::size_t j = lo; j <= hi; ++j) best = std::max(best, in[j]);
            out[i] = best;
        } else {
            T sum{0};
            for (std::size_t j = lo; j <= hi; ++j) sum += in[j];
            out[i] = sum / static_cast<T>(kernel);
        }
    }
}

template <typename T>
Tensor<T> pool1d(const Tensor<T>& v, std::size_t kernel, PoolMode mode) {
    check_pool_kernel(kernel);
    if (v.rank() == 0) throw ShapeError("pool1d: scalar input");
    Tensor<T> out(v.shape());
    for (std::size_t r = 0; r < v.rows(); ++r) pool1d_row<T>(v.row(r), out.row(r), kernel, mode);
    check_finite(out, "pool1d");
    return out;
}

} // namespace snapcache
