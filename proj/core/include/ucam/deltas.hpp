#pragma once

#include <cstddef>

#include "ucam/norm.hpp"
#include "ucam/tensor.hpp"

namespace ucam {

// Regression deltas over a +-2 frame window with edge frames replicated:
//   d[t] = ((x[t+1] - x[t-1]) + 2 (x[t+2] - x[t-2])) / 10
// x and out are [rows, stride] row-major; only frames [0, len) are read or
// written. Shared by the feature pipeline and the differentiable op so both
// produce identical bits.
template <typename T>
void regression_delta(const T* x, std::size_t rows, std::size_t len, std::size_t stride, T* out) {
    const long last = static_cast<long>(len) - 1;
    auto at = [&](const T* row, long t) { return row[t < 0 ? 0 : (t > last ? last : t)]; };
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * stride;
        T* yr = out + r * stride;
        for (long t = 0; t <= last; ++t) {
            yr[t] = ((at(xr, t + 1) - at(xr, t - 1)) + T(2) * (at(xr, t + 2) - at(xr, t - 2))) / T(10);
        }
    }
}

// Adjoint of regression_delta: accumulates into gx.
template <typename T>
void regression_delta_adjoint(const T* gy, std::size_t rows, std::size_t len, std::size_t stride, T* gx) {
    const long last = static_cast<long>(len) - 1;
    auto clamp = [&](long t) { return t < 0 ? 0 : (t > last ? last : t); };
    for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = gy + r * stride;
        T* xr = gx + r * stride;
        for (long t = 0; t <= last; ++t) {
            const T g = gr[t] / T(10);
            xr[clamp(t + 1)] += g;
            xr[clamp(t - 1)] -= g;
            xr[clamp(t + 2)] += T(2) * g;
            xr[clamp(t - 2)] -= T(2) * g;
        }
    }
}

/// statics[B,F,T] -> [B,3,F,T] holding (static, delta, delta-delta) per
/// utterance over its valid frames; padded frames are zero. Differentiable
/// in the statics.
template <typename T>
Tensor<T> stack_deltas(const Tensor<T>& statics, const SequenceMask& mask);

}  // namespace ucam
