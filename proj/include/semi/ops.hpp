#pragma once

#include <cmath>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

inline constexpr double kGeluCoeff = 0.044715;
inline constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687; // sqrt(2/pi)

// tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline double gelu_approx(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_approx_grad(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// PE(pos, 2i) = sin(pos / 10000^(2i/dim)), PE(pos, 2i+1) = cos(...)
inline DenseMatrix sinusoidal_pe(int length, int dim) {
    if (dim % 2 != 0) throw ConfigError("sinusoidal_pe: dim must be even");
    DenseMatrix pe(length, dim);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; 2 * i < dim; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / dim);
            pe.at(pos, 2 * i) = std::sin(pos * freq);
            pe.at(pos, 2 * i + 1) = std::cos(pos * freq);
        }
    }
    return pe;
}

struct CrossEntropyResult {
    double loss = 0.0;        // mean over rows
    DenseMatrix grad_logits;  // (softmax - onehot)/B
};

// Row-stabilized softmax cross entropy, mean over the batch dimension.
inline CrossEntropyResult softmax_cross_entropy(const DenseMatrix& logits,
                                                const std::vector<int>& targets) {
    const int b = logits.rows;
    const int v = logits.cols;
    if (static_cast<int>(targets.size()) != b)
        throw InputError("softmax_cross_entropy: one target per row required");
    for (int t : targets)
        if (t < 0 || t >= v) throw InputError("softmax_cross_entropy: target index out of range");
    if (b < 1) throw InputError("softmax_cross_entropy: empty batch");

    CrossEntropyResult out;
    out.grad_logits = DenseMatrix(b, v);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        double mx = logits.at(i, 0);
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(logits.at(i, j) - mx);
        const double logz = std::log(z) + mx;
        total += logz - logits.at(i, targets[i]);
        for (int j = 0; j < v; ++j)
            out.grad_logits.at(i, j) = std::exp(logits.at(i, j) - logz) / b;
        out.grad_logits.at(i, targets[i]) -= 1.0 / b;
    }
    out.loss = total / b;
    return out;
}

inline DenseMatrix softmax_rows(const DenseMatrix& x) {
    DenseMatrix p(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mx = x.at(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
        double z = 0.0;
        for (int j = 0; j < x.cols; ++j) z += std::exp(x.at(i, j) - mx);
        for (int j = 0; j < x.cols; ++j) p.at(i, j) = std::exp(x.at(i, j) - mx) / z;
    }
    return p;
}

// Two-sample Kolmogorov-Smirnov statistic, sup |F1 - F2|.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const std::size_t n = a.size(), m = b.size();
    if (n == 0 || m == 0) throw InputError("ks_two_sample: empty sample");
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < n && j < m) {
        if (a[i] <= b[j])
            ++i;
        else
            ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    return d;
}

// Critical value for the two-sample KS test at significance alpha (1% -> c = 1.628).
inline double ks_two_sample_critical(std::size_t n, std::size_t m, double c_alpha = 1.628) {
    return c_alpha * std::sqrt(static_cast<double>(n + m) / (static_cast<double>(n) * m));
}

} // namespace semi
