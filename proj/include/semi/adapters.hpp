#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

// Rank-r factor pair targeting the projector's first layer. The materialized
// delta carries the alpha/r scale, so merging is plain addition.
struct LoraAdapter {
    DenseMatrix a; // [r x d_in]
    DenseMatrix b; // [d_hid x r]
    int rank = 0;
    double alpha = 0.0;

    LoraAdapter() = default;
    LoraAdapter(DenseMatrix a_in, DenseMatrix b_in, int r, double alpha_in)
        : a(std::move(a_in)), b(std::move(b_in)), rank(r), alpha(alpha_in) {
        validate();
    }

    void validate() const {
        if (rank < 1) throw ConfigError("LoraAdapter: rank must be >= 1");
        if (a.rows != rank || b.cols != rank)
            throw ConfigError("LoraAdapter: factor shapes do not carry rank r");
        if (rank > std::min(a.cols, b.rows))
            throw ConfigError("LoraAdapter: rank exceeds min(d_in, d_hid)");
        if (!std::isfinite(alpha / rank)) throw ConfigError("LoraAdapter: scale alpha/r not finite");
    }

    double scale() const { return alpha / rank; }
};

inline DenseMatrix lora_delta(const LoraAdapter& adapter) {
    adapter.validate();
    return scale(matmul(adapter.b, adapter.a), adapter.scale());
}

struct AdapterSet {
    std::vector<LoraAdapter> adapters;
    std::vector<int> provenance; // source batch indices

    void push(LoraAdapter adapter, int batch_index) {
        if (!adapters.empty()) {
            const auto& first = adapters.front();
            if (adapter.rank != first.rank || adapter.alpha != first.alpha ||
                !adapter.a.same_shape(first.a) || !adapter.b.same_shape(first.b))
                throw ConfigError("AdapterSet: members must share rank, alpha and shapes");
        }
        adapters.push_back(std::move(adapter));
        provenance.push_back(batch_index);
    }
};

// Element-wise mean over materialized deltas; averaging factors instead would
// not preserve any member's function.
inline DenseMatrix average_adapters(const AdapterSet& set) {
    if (set.adapters.empty()) throw InputError("average_adapters: empty set");
    DenseMatrix mean = lora_delta(set.adapters.front());
    for (std::size_t i = 1; i < set.adapters.size(); ++i) axpy(mean, 1.0, lora_delta(set.adapters[i]));
    return scale(mean, 1.0 / static_cast<double>(set.adapters.size()));
}

namespace detail {
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a)
        throw NumericError("generation_param_count: overflow");
    return a * b;
}
} // namespace detail

// Size of the factorized generation heads: (N + M) * R * K.
inline std::uint64_t generation_param_count(std::uint64_t n, std::uint64_t m, std::uint64_t r,
                                            std::uint64_t k) {
    if (n < 1 || m < 1 || r < 1 || k < 1)
        throw InputError("generation_param_count: all dimensions must be >= 1");
    return detail::checked_mul(detail::checked_mul(n + m, r), k);
}

// Size of a head that would emit the full N x M matrix, for comparison.
inline std::uint64_t full_matrix_param_count(std::uint64_t n, std::uint64_t m, std::uint64_t k) {
    if (n < 1 || m < 1 || k < 1)
        throw InputError("full_matrix_param_count: all dimensions must be >= 1");
    return detail::checked_mul(detail::checked_mul(n, m), k);
}

} // namespace semi
