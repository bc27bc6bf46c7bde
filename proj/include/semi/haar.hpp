#pragma once

#include <cstdint>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/rng.hpp"

namespace semi {

// Orthogonal matrix plus provenance. Construction validates orthogonality
// (||Q^T Q - I||_max < 1e-9) and |det Q| = 1 within 1e-6.
struct IsometricTransform {
    DenseMatrix q;
    int dim = 0;
    std::uint64_t seed = 0;

    IsometricTransform(DenseMatrix q_in, int d, std::uint64_t s)
        : q(std::move(q_in)), dim(d), seed(s) {
        const DenseMatrix gram = matmul_tn(q, q);
        if (max_abs_diff(gram, DenseMatrix::identity(dim)) >= 1e-9)
            throw NumericError("IsometricTransform: Q is not orthogonal");
        // orthogonal Q has det +-1; the product of R's diagonal after QR of Q
        // recovers |det| without a separate determinant routine
        double logdet = 0.0;
        const QrResult qr = qr_decompose(q);
        for (int i = 0; i < dim; ++i) logdet += std::log(std::abs(qr.r.at(i, i)));
        if (std::abs(std::exp(logdet) - 1.0) >= 1e-6)
            throw NumericError("IsometricTransform: |det Q| deviates from 1");
    }

    // applies Q to a row vector (or a batch of row vectors): rows of x map to rows of x Q^T
    DenseMatrix apply_rows(const DenseMatrix& x) const { return matmul_nt(x, q); }
};

// Haar-uniform orthogonal matrix: QR of a Gaussian matrix with each column of
// the orthogonal factor multiplied by the sign of the matching R diagonal
// entry (Mezzadri correction). Deterministic per seed.
inline IsometricTransform sample_haar_orthogonal(int dim, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("sample_haar_orthogonal: dim must be >= 1");
    Rng rng(seed);
    DenseMatrix g = DenseMatrix::gaussian(dim, dim, rng);
    QrResult qr = qr_decompose(g);
    for (int j = 0; j < dim; ++j) {
        const double s = qr.r.at(j, j) >= 0.0 ? 1.0 : -1.0;
        for (int i = 0; i < dim; ++i) qr.q.at(i, j) *= s;
    }
    return IsometricTransform(std::move(qr.q), dim, seed);
}

inline IsometricTransform identity_transform(int dim) {
    return IsometricTransform(DenseMatrix::identity(dim), dim, 0);
}

} // namespace semi
