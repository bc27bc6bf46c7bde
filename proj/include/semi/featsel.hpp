#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

// Feature-graph adjacency for Inf-FS: features are min-max normalized, then
// A_ij = beta * max(sigma_i, sigma_j) + (1 - beta) * |corr(f_i, f_j)|.
// Pairs involving a constant feature take correlation 0.
inline DenseMatrix inffs_adjacency(const DenseMatrix& x, double beta) {
    const int n = x.rows, d = x.cols;
    if (n < 2) throw InputError("inffs_adjacency: need at least 2 samples");
    if (!(beta > 0.0 && beta < 1.0)) throw InputError("inffs_adjacency: beta must lie in (0, 1)");

    DenseMatrix z = x;
    for (int j = 0; j < d; ++j) {
        double lo = z.at(0, j), hi = z.at(0, j);
        for (int i = 1; i < n; ++i) {
            lo = std::min(lo, z.at(i, j));
            hi = std::max(hi, z.at(i, j));
        }
        const double span = hi - lo;
        for (int i = 0; i < n; ++i) z.at(i, j) = span > 0.0 ? (z.at(i, j) - lo) / span : 0.0;
    }

    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < n; ++i) mean[j] += z.at(i, j);
        mean[j] /= n;
        for (int i = 0; i < n; ++i) {
            const double c = z.at(i, j) - mean[j];
            sd[j] += c * c;
        }
        sd[j] = std::sqrt(sd[j] / n);
    }

    DenseMatrix a(d, d);
    for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j) {
            double corr = 0.0;
            if (sd[i] > 0.0 && sd[j] > 0.0) {
                double cov = 0.0;
                for (int t = 0; t < n; ++t) cov += (z.at(t, i) - mean[i]) * (z.at(t, j) - mean[j]);
                corr = cov / (n * sd[i] * sd[j]);
            }
            const double v = beta * std::max(sd[i], sd[j]) + (1.0 - beta) * std::abs(corr);
            a.at(i, j) = v;
            a.at(j, i) = v;
        }
    }
    return a;
}

// largest eigenvalue of a symmetric non-negative matrix by power iteration
inline double spectral_radius(const DenseMatrix& a, int iters = 200) {
    const int d = a.rows;
    DenseMatrix v(d, 1);
    for (int i = 0; i < d; ++i) v.at(i, 0) = 1.0 / std::sqrt(static_cast<double>(d));
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        DenseMatrix w = matmul(a, v);
        const double norm = frob_norm(w);
        if (norm == 0.0) return 0.0;
        lambda = norm;
        v = scale(w, 1.0 / norm);
    }
    return lambda;
}

struct InfFsResult {
    std::vector<double> scores; // path-energy row sums
    double gamma_used = 0.0;    // after the spectral rescale, if any
    double spectral = 0.0;      // rho(A)
};

// Infinite Feature Selection: S = (I - gamma A)^-1 - I accumulates weighted
// paths of every length; score_i = sum_j S_ij. gamma is rescaled to
// 0.9 / rho(A) whenever gamma * rho(A) would reach 1.
inline InfFsResult inffs_scores(const DenseMatrix& x, double gamma, double beta) {
    const DenseMatrix a = inffs_adjacency(x, beta);
    const int d = a.rows;
    InfFsResult out;
    out.spectral = spectral_radius(a);
    out.gamma_used = gamma;
    if (out.spectral > 0.0 && gamma * out.spectral >= 1.0) out.gamma_used = 0.9 / out.spectral;

    DenseMatrix system = DenseMatrix::identity(d);
    axpy(system, -out.gamma_used, a);
    DenseMatrix inv = solve_linear(system, DenseMatrix::identity(d));
    out.scores.resize(d);
    for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += inv.at(i, j) - (i == j ? 1.0 : 0.0);
        out.scores[i] = s;
    }
    return out;
}

// indices of the k largest scores; ties break toward the lower index
inline std::vector<int> select_top(const std::vector<double>& scores, int k) {
    if (k > static_cast<int>(scores.size())) throw InputError("select_top: k exceeds feature count");
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) { return scores[i] > scores[j]; });
    idx.resize(k);
    return idx;
}

// top-k right singular directions of the column-centered data, as an
// orthonormal [d x k] basis
inline DenseMatrix pca_reduce(const DenseMatrix& x, int k) {
    if (k > x.cols) throw InputError("pca_reduce: k exceeds feature count");
    DenseMatrix c = x;
    for (int j = 0; j < c.cols; ++j) {
        double mu = 0.0;
        for (int i = 0; i < c.rows; ++i) mu += c.at(i, j);
        mu /= c.rows;
        for (int i = 0; i < c.rows; ++i) c.at(i, j) -= mu;
    }
    auto eig = jacobi_eigen_symmetric(matmul_tn(c, c));
    DenseMatrix basis(x.cols, k);
    for (int j = 0; j < k; ++j) {
        double norm = 0.0;
        for (int i = 0; i < x.cols; ++i) norm += eig.vectors.at(i, j) * eig.vectors.at(i, j);
        norm = std::sqrt(norm);
        for (int i = 0; i < x.cols; ++i)
            basis.at(i, j) = norm > 0.0 ? eig.vectors.at(i, j) / norm : 0.0;
    }
    return basis;
}

// numerical rank: singular values above tol * sigma_max
inline int embedding_rank(const DenseMatrix& x, double tol) {
    if (!(tol > 0.0)) throw InputError("embedding_rank: tol must be positive");
    const auto sv = singular_values(x);
    if (sv.empty() || sv.front() == 0.0) return 0;
    int rank = 0;
    for (double s : sv)
        if (s > tol * sv.front()) ++rank;
    return rank;
}

// Fitted dimensionality handling for one modality, serialized alongside the
// adapted projector so evaluation applies the identical reduction.
struct FeatureSelection {
    std::string method;        // "inf-fs" | "pca" | "none"
    std::vector<int> indices;  // inf-fs column choice, descending score order
    DenseMatrix basis;         // pca projection [d_e x k]
    std::vector<double> scores;
    int n_fit = 0, d_e = 0, d_out = 0;

    DenseMatrix apply(const DenseMatrix& rows) const {
        if (method == "none") return rows;
        if (method == "inf-fs") {
            DenseMatrix out(rows.rows, static_cast<int>(indices.size()));
            for (int i = 0; i < rows.rows; ++i)
                for (std::size_t j = 0; j < indices.size(); ++j)
                    out.at(i, static_cast<int>(j)) = rows.at(i, indices[j]);
            return out;
        }
        if (method == "pca") return matmul(rows, basis);
        throw ConfigError("FeatureSelection: unknown method " + method);
    }
};

inline FeatureSelection fit_inffs(const DenseMatrix& x, int k, double gamma, double beta) {
    FeatureSelection fs;
    fs.method = "inf-fs";
    auto result = inffs_scores(x, gamma, beta);
    fs.scores = result.scores;
    fs.indices = select_top(result.scores, k);
    fs.n_fit = x.rows;
    fs.d_e = x.cols;
    fs.d_out = k;
    return fs;
}

inline FeatureSelection fit_pca(const DenseMatrix& x, int k) {
    FeatureSelection fs;
    fs.method = "pca";
    fs.basis = pca_reduce(x, k);
    fs.n_fit = x.rows;
    fs.d_e = x.cols;
    fs.d_out = k;
    return fs;
}

} // namespace semi
