#pragma once

#include "vitdec/tensor.hpp"

#include <cmath>
#include <functional>

namespace vitdec {

// Small dense helpers shared by the trainer and the analysis passes.
// Loops run in fixed ascending order so repeated runs are bit-identical.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0) == k ? b.dim(1) : -1;
    if (n < 0) throw std::invalid_argument("matmul: " + a.shape_str() + " x " + b.shape_str());
    Tensor y({m, n});
    // j-inner form: unit-stride access on both b and y rows
    for (int i = 0; i < m; ++i) {
        float* yr = y.data.data() + static_cast<size_t>(i) * n;
        const float* ar = a.data.data() + static_cast<size_t>(i) * k;
        for (int t = 0; t < k; ++t) {
            const float av = ar[t];
            const float* br = b.data.data() + static_cast<size_t>(t) * n;
            for (int j = 0; j < n; ++j) yr[j] += av * br[j];
        }
    }
    return y;
}

inline Tensor matmul_tn(const Tensor& a, const Tensor& b) { // a^T b
    const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw std::invalid_argument("matmul_tn: " + a.shape_str() + " x " + b.shape_str());
    Tensor y({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int t = 0; t < k; ++t) acc += a.at(t, i) * b.at(t, j);
            y.at(i, j) = acc;
        }
    return y;
}

inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { // a b^T
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) throw std::invalid_argument("matmul_nt: " + a.shape_str() + " x " + b.shape_str());
    Tensor y({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int t = 0; t < k; ++t) acc += a.at(i, t) * b.at(j, t);
            y.at(i, j) = acc;
        }
    return y;
}

inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int rows = x.dim(0), in = x.dim(1), out = w.dim(1);
    if (w.dim(0) != in) throw std::invalid_argument("affine: " + x.shape_str() + " x " + w.shape_str());
    Tensor y({rows, out});
    for (int r = 0; r < rows; ++r) {
        float* yr = y.data.data() + static_cast<size_t>(r) * out;
        if (!b.data.empty())
            for (int j = 0; j < out; ++j) yr[j] = b.data[static_cast<size_t>(j)];
        const float* xr = x.data.data() + static_cast<size_t>(r) * in;
        for (int k = 0; k < in; ++k) {
            const float xv = xr[k];
            const float* wr = w.data.data() + static_cast<size_t>(k) * out;
            for (int j = 0; j < out; ++j) yr[j] += xv * wr[j];
        }
    }
    return y;
}

inline Tensor transpose(const Tensor& x) {
    Tensor y({x.dim(1), x.dim(0)});
    for (int r = 0; r < x.dim(0); ++r)
        for (int j = 0; j < x.dim(1); ++j) y.at(j, r) = x.at(r, j);
    return y;
}

inline void softmax_rows_inplace(Tensor& x) {
    for (int r = 0; r < x.dim(0); ++r) {
        float mx = x.at(r, 0);
        for (int j = 1; j < x.dim(1); ++j) mx = std::max(mx, x.at(r, j));
        float denom = 0.0f;
        for (int j = 0; j < x.dim(1); ++j) denom += std::exp(x.at(r, j) - mx);
        for (int j = 0; j < x.dim(1); ++j) x.at(r, j) = std::exp(x.at(r, j) - mx) / denom;
    }
}

inline float gelu_value(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f)); }

inline float gelu_grad(float x) {
    const float kInvSqrt2Pi = 0.39894228040143267794f;
    float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752440f));
    float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
    return cdf + x * pdf;
}

/// Row-wise layernorm; mu/sigma outputs are per row, sigma includes eps.
inline Tensor layernorm_fwd(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                            Tensor* mu_out = nullptr, Tensor* sigma_out = nullptr) {
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor y(x.shape), mu({rows}), sigma({rows});
    for (int r = 0; r < rows; ++r) {
        float m = 0.0f;
        for (int j = 0; j < cols; ++j) m += x.at(r, j);
        m /= static_cast<float>(cols);
        float var = 0.0f;
        for (int j = 0; j < cols; ++j) {
            float d = x.at(r, j) - m;
            var += d * d;
        }
        var /= static_cast<float>(cols);
        float s = std::sqrt(var + eps);
        mu.data[r] = m;
        sigma.data[r] = s;
        for (int j = 0; j < cols; ++j) y.at(r, j) = gamma.data[j] * ((x.at(r, j) - m) / s) + beta.data[j];
    }
    if (mu_out) *mu_out = std::move(mu);
    if (sigma_out) *sigma_out = std::move(sigma);
    return y;
}

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
    return s;
}

inline double cosine(const Tensor& a, const Tensor& b) {
    double na = l2_norm(a), nb = l2_norm(b);
    if (na < 1e-30 || nb < 1e-30) throw std::invalid_argument("cosine: zero-norm operand");
    return dot(a, b) / (na * nb);
}

/// Deterministic parallel map over [0, n): results land in caller-owned
/// slots, so scheduling order never shows in the output.
void parallel_for(int n, const std::function<void(int)>& fn);

} // namespace vitdec
