#pragma once

// Internal math primitives shared by the cached inference path and the
// training path. Loop orders are fixed; both paths must accumulate in the
// same order so their outputs agree to rounding.

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace kvzip::detail {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

// Y = X @ W, X: n x in, W: in x out (row-major), Y: n x out
inline void matmul(const float* X, const float* W, float* Y, size_t n, size_t in, size_t out) {
    for (size_t i = 0; i < n; ++i) {
        float* y = Y + i * out;
        for (size_t j = 0; j < out; ++j) y[j] = 0.0f;
        const float* x = X + i * in;
        for (size_t k = 0; k < in; ++k) {
            const float xv = x[k];
            const float* w = W + k * out;
            for (size_t j = 0; j < out; ++j) y[j] += xv * w[j];
        }
    }
}

// dX = dY @ W^T
inline void matmul_nt(const float* dY, const float* W, float* dX, size_t n, size_t in, size_t out) {
    for (size_t i = 0; i < n; ++i) {
        const float* dy = dY + i * out;
        float* dx = dX + i * in;
        for (size_t k = 0; k < in; ++k) {
            const float* w = W + k * out;
            float acc = 0.0f;
            for (size_t j = 0; j < out; ++j) acc += dy[j] * w[j];
            dx[k] = acc;
        }
    }
}

// dW += X^T @ dY
inline void matmul_tn_acc(const float* X, const float* dY, float* dW, size_t n, size_t in,
                          size_t out) {
    for (size_t i = 0; i < n; ++i) {
        const float* x = X + i * in;
        const float* dy = dY + i * out;
        for (size_t k = 0; k < in; ++k) {
            const float xv = x[k];
            float* dw = dW + k * out;
            for (size_t j = 0; j < out; ++j) dw[j] += xv * dy[j];
        }
    }
}

inline float rms_of(const float* x, size_t n) {
    float ss = 0.0f;
    for (size_t i = 0; i < n; ++i) ss += x[i] * x[i];
    return std::sqrt(ss / static_cast<float>(n) + kNormEps);
}

inline void rmsnorm_row(const float* x, const float* g, float* y, size_t n) {
    const float inv = 1.0f / rms_of(x, n);
    for (size_t i = 0; i < n; ++i) y[i] = x[i] * inv * g[i];
}

// In-place rotary embedding over consecutive pairs; odd trailing element
// (odd head_dim) passes through.
inline void rope_row(float* v, uint32_t d, int64_t pos) {
    const uint32_t half = d / 2;
    for (uint32_t p = 0; p < half; ++p) {
        const double freq = std::pow(kRopeBase, -2.0 * p / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float e = v[2 * p];
        const float o = v[2 * p + 1];
        v[2 * p] = e * c - o * s;
        v[2 * p + 1] = e * s + o * c;
    }
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace kvzip::detail
