#pragma once

#include <algorithm>
#include <cmath>

#include "fives/tensor.hpp"

// Value-level numerical kernels. The tape in autodiff.hpp wraps these
// (or shaped variants of them) with backward rules; everything here is
// deterministic with a fixed reduction order.

namespace fives::ad {

inline constexpr double kLogitClip = 1e-12;

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit_scalar(double p) {
    const double q = std::clamp(p, kLogitClip, 1.0 - kLogitClip);
    return std::log(q) - std::log1p(-q);
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

inline Tensor logit(const Tensor& p) {
    Tensor y(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) y[i] = logit_scalar(p[i]);
    return y;
}

// W x + b for W [r,c], x [c], b [r].
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
    if (W.rank() != 2 || x.rank() != 1 || b.rank() != 1 || W.dim(1) != x.dim(0) ||
        W.dim(0) != b.dim(0))
        throw DimensionError("linear: W " + W.shape_str() + " x " + x.shape_str() + " b " +
                             b.shape_str());
    const std::size_t r = W.dim(0), c = W.dim(1);
    Tensor y({r});
    for (std::size_t i = 0; i < r; ++i) {
        double acc = b[i];
        for (std::size_t j = 0; j < c; ++j) acc += W.at(i, j) * x[j];
        y[i] = acc;
    }
    return y;
}

// (sum_j w_j msg_j) / max(sum_j w_j, eps) over rows of msg [m,d].
// With binary weights this is the plain mean over the selected rows;
// an all-zero weight row yields the zero vector.
inline Tensor weighted_mean_aggregate(const Tensor& messages, const Tensor& weights,
                                      double eps) {
    if (messages.rank() != 2 || weights.rank() != 1 || weights.dim(0) != messages.dim(0))
        throw DimensionError("weighted_mean_aggregate: messages " + messages.shape_str() +
                             " weights " + weights.shape_str());
    const std::size_t m = messages.dim(0), d = messages.dim(1);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += weights[j];
    const double den = std::max(total, eps);
    Tensor out({d});
    for (std::size_t j = 0; j < m; ++j) {
        const double w = weights[j];
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) out[k] += w * messages.at(j, k);
    }
    for (std::size_t k = 0; k < d; ++k) out[k] /= den;
    return out;
}

}  // namespace fives::ad
