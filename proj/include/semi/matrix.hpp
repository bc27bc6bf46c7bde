#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "semi/errors.hpp"
#include "semi/rng.hpp"

namespace semi {

// Row-major real64 matrix. Row vectors are [1 x n], column vectors [n x 1].
struct DenseMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
    DenseMatrix(int r, int c, std::vector<double> v) : rows(r), cols(c), data(std::move(v)) {
        if (data.size() != static_cast<std::size_t>(r) * c)
            throw InputError("DenseMatrix: data length does not match rows*cols");
    }

    static DenseMatrix zeros(int r, int c) { return DenseMatrix(r, c); }

    static DenseMatrix identity(int n) {
        DenseMatrix m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static DenseMatrix gaussian(int r, int c, Rng& rng, double stddev = 1.0) {
        DenseMatrix m(r, c);
        for (auto& v : m.data) v = stddev * rng.gaussian();
        return m;
    }

    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    DenseMatrix row(int i) const {
        DenseMatrix r(1, cols);
        std::copy_n(data.begin() + static_cast<std::size_t>(i) * cols, cols, r.data.begin());
        return r;
    }

    void set_row(int i, const DenseMatrix& r) {
        std::copy_n(r.data.begin(), cols, data.begin() + static_cast<std::size_t>(i) * cols);
    }

    // keeps columns [0, k)
    DenseMatrix left_cols(int k) const {
        DenseMatrix out(rows, k);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < k; ++j) out.at(i, j) = at(i, j);
        return out;
    }

    bool operator==(const DenseMatrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }

    DenseMatrix reshaped(int r, int c) const {
        if (static_cast<std::size_t>(r) * c != size())
            throw InputError("reshape: element count mismatch");
        DenseMatrix out = *this;
        out.rows = r;
        out.cols = c;
        return out;
    }
};

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) throw InputError("matmul: inner dimension mismatch");
    DenseMatrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<std::size_t>(i) * a.cols];
        double* crow = &c.data[static_cast<std::size_t>(i) * c.cols];
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &b.data[static_cast<std::size_t>(k) * b.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// a * b^T
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.cols) throw InputError("matmul_nt: inner dimension mismatch");
    DenseMatrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<std::size_t>(i) * a.cols];
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = &b.data[static_cast<std::size_t>(j) * b.cols];
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            c.at(i, j) = s;
        }
    }
    return c;
}

// a^T * b
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows) throw InputError("matmul_tn: inner dimension mismatch");
    DenseMatrix c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = &a.data[static_cast<std::size_t>(k) * a.cols];
        const double* brow = &b.data[static_cast<std::size_t>(k) * b.cols];
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = &c.data[static_cast<std::size_t>(i) * c.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw InputError("add: shape mismatch");
    DenseMatrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw InputError("sub: shape mismatch");
    DenseMatrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline DenseMatrix scale(const DenseMatrix& a, double s) {
    DenseMatrix c = a;
    for (auto& v : c.data) v *= s;
    return c;
}

// a += s * b
inline void axpy(DenseMatrix& a, double s, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw InputError("axpy: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += s * b.data[i];
}

inline double max_abs(const DenseMatrix& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw InputError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline double frob_norm(const DenseMatrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double vec_norm(const DenseMatrix& a) { return frob_norm(a); }

inline double dot(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.size() != b.size()) throw InputError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Round every entry through float32. Frozen components quantize at build time
// so a rebuilt component matches its checkpoint bit for bit.
inline DenseMatrix quantize_f32(DenseMatrix a) {
    for (auto& v : a.data) v = static_cast<double>(static_cast<float>(v));
    return a;
}

struct QrResult {
    DenseMatrix q; // [n x n] orthogonal
    DenseMatrix r; // [n x n] upper triangular
};

// Householder QR of a square matrix.
inline QrResult qr_decompose(const DenseMatrix& a) {
    if (a.rows != a.cols) throw InputError("qr_decompose: square input required");
    const int n = a.rows;
    DenseMatrix r = a;
    DenseMatrix q = DenseMatrix::identity(n);
    std::vector<double> v(n);
    for (int k = 0; k < n - 1; ++k) {
        double norm = 0.0;
        for (int i = k; i < n; ++i) norm += r.at(i, k) * r.at(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = r.at(k, k) >= 0 ? -norm : norm;
        double vnorm2 = 0.0;
        for (int i = k; i < n; ++i) {
            v[i] = r.at(i, k) - (i == k ? alpha : 0.0);
            vnorm2 += v[i] * v[i];
        }
        if (vnorm2 == 0.0) continue;
        // R <- (I - 2 v v^T / v^T v) R ; Q <- Q (I - 2 v v^T / v^T v)
        for (int j = k; j < n; ++j) {
            double s = 0.0;
            for (int i = k; i < n; ++i) s += v[i] * r.at(i, j);
            s = 2.0 * s / vnorm2;
            for (int i = k; i < n; ++i) r.at(i, j) -= s * v[i];
        }
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = k; j < n; ++j) s += q.at(i, j) * v[j];
            s = 2.0 * s / vnorm2;
            for (int j = k; j < n; ++j) q.at(i, j) -= s * v[j];
        }
    }
    return {std::move(q), std::move(r)};
}

struct SymmetricEigen {
    std::vector<double> values;  // descending
    DenseMatrix vectors;         // columns, matching order
};

// Cyclic Jacobi for symmetric matrices.
inline SymmetricEigen jacobi_eigen_symmetric(const DenseMatrix& a, int max_sweeps = 64) {
    if (a.rows != a.cols) throw InputError("jacobi_eigen_symmetric: square input required");
    const int n = a.rows;
    DenseMatrix m = a;
    DenseMatrix vmat = DenseMatrix::identity(n);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += m.at(i, j) * m.at(i, j);
        if (off < 1e-26) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = m.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double mkp = m.at(k, p), mkq = m.at(k, q);
                    m.at(k, p) = c * mkp - s * mkq;
                    m.at(k, q) = s * mkp + c * mkq;
                }
                for (int k = 0; k < n; ++k) {
                    const double mpk = m.at(p, k), mqk = m.at(q, k);
                    m.at(p, k) = c * mpk - s * mqk;
                    m.at(q, k) = s * mpk + c * mqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = vmat.at(k, p), vkq = vmat.at(k, q);
                    vmat.at(k, p) = c * vkp - s * vkq;
                    vmat.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return m.at(i, i) > m.at(j, j); });
    SymmetricEigen out;
    out.values.resize(n);
    out.vectors = DenseMatrix(n, n);
    for (int j = 0; j < n; ++j) {
        out.values[j] = m.at(order[j], order[j]);
        for (int i = 0; i < n; ++i) out.vectors.at(i, j) = vmat.at(i, order[j]);
    }
    return out;
}

// Gaussian elimination with partial pivoting; solves A X = B.
inline DenseMatrix solve_linear(DenseMatrix a, DenseMatrix b) {
    if (a.rows != a.cols || a.rows != b.rows) throw InputError("solve_linear: shape mismatch");
    const int n = a.rows;
    const int m = b.cols;
    for (int k = 0; k < n; ++k) {
        int piv = k;
        for (int i = k + 1; i < n; ++i)
            if (std::abs(a.at(i, k)) > std::abs(a.at(piv, k))) piv = i;
        if (std::abs(a.at(piv, k)) < 1e-300) throw NumericError("solve_linear: singular system");
        if (piv != k) {
            for (int j = 0; j < n; ++j) std::swap(a.at(k, j), a.at(piv, j));
            for (int j = 0; j < m; ++j) std::swap(b.at(k, j), b.at(piv, j));
        }
        const double d = a.at(k, k);
        for (int i = k + 1; i < n; ++i) {
            const double f = a.at(i, k) / d;
            if (f == 0.0) continue;
            for (int j = k; j < n; ++j) a.at(i, j) -= f * a.at(k, j);
            for (int j = 0; j < m; ++j) b.at(i, j) -= f * b.at(k, j);
        }
    }
    DenseMatrix x(n, m);
    for (int i = n - 1; i >= 0; --i) {
        for (int j = 0; j < m; ++j) {
            double s = b.at(i, j);
            for (int k = i + 1; k < n; ++k) s -= a.at(i, k) * x.at(k, j);
            x.at(i, j) = s / a.at(i, i);
        }
    }
    return x;
}

// Singular values of X, descending. One-sided Jacobi keeps tiny singular
// values accurate (they come out as column norms, not square roots of noisy
// Gram eigenvalues).
inline std::vector<double> singular_values(const DenseMatrix& x) {
    DenseMatrix a = x.rows >= x.cols ? x : transpose(x);
    const int n = a.rows, d = a.cols;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool converged = true;
        for (int p = 0; p < d - 1; ++p) {
            for (int q = p + 1; q < d; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int i = 0; i < n; ++i) {
                    app += a.at(i, p) * a.at(i, p);
                    aqq += a.at(i, q) * a.at(i, q);
                    apq += a.at(i, p) * a.at(i, q);
                }
                if (app * aqq == 0.0 || std::abs(apq) <= 1e-15 * std::sqrt(app * aqq)) continue;
                converged = false;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double vip = a.at(i, p), viq = a.at(i, q);
                    a.at(i, p) = c * vip - s * viq;
                    a.at(i, q) = s * vip + c * viq;
                }
            }
        }
        if (converged) break;
    }
    std::vector<double> sv(d);
    for (int j = 0; j < d; ++j) {
        double ss = 0.0;
        for (int i = 0; i < n; ++i) ss += a.at(i, j) * a.at(i, j);
        sv[j] = std::sqrt(ss);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

// FNV-1a over raw bytes, for subset hashes and config fingerprints.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const DenseMatrix& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
    h = fnv1a(&m.rows, sizeof(m.rows), h);
    h = fnv1a(&m.cols, sizeof(m.cols), h);
    return fnv1a(m.data.data(), m.data.size() * sizeof(double), h);
}

} // namespace semi
