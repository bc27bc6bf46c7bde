#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

namespace detail {

using Ngram = std::vector<int>;

inline std::map<Ngram, int> ngram_counts(const std::vector<int>& tokens, int n) {
    std::map<Ngram, int> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
        ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
    return counts;
}

} // namespace detail

// BLEU-4: geometric mean of modified 1..4-gram precisions times the brevity
// penalty. Zero numerators are floored at 1e-9; multiple references clip by
// the per-n-gram maximum.
inline double bleu4(const std::vector<int>& candidate,
                    const std::vector<std::vector<int>>& references) {
    if (candidate.empty()) return 0.0;
    if (references.empty()) throw InputError("bleu4: at least one reference required");
    constexpr double kEps = 1e-9;

    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const auto cand = detail::ngram_counts(candidate, n);
        std::map<detail::Ngram, int> clip;
        for (const auto& ref : references)
            for (const auto& [gram, count] : detail::ngram_counts(ref, n))
                clip[gram] = std::max(clip[gram], count);
        double total = 0.0, matched = 0.0;
        for (const auto& [gram, count] : cand) {
            total += count;
            auto it = clip.find(gram);
            if (it != clip.end()) matched += std::min(count, it->second);
        }
        const double precision = total > 0.0 ? std::max(matched / total, kEps) : kEps;
        log_sum += 0.25 * std::log(precision);
    }

    std::size_t closest_ref = references.front().size();
    for (const auto& ref : references)
        if (std::llabs(static_cast<long long>(ref.size()) - static_cast<long long>(candidate.size())) <
            std::llabs(static_cast<long long>(closest_ref) - static_cast<long long>(candidate.size())))
            closest_ref = ref.size();
    const double bp = candidate.size() >= closest_ref
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(closest_ref) / candidate.size());
    return bp * std::exp(log_sum);
}

// ROUGE-L: F-measure from the longest common subsequence.
inline double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference) {
    if (candidate.empty() || reference.empty()) return 0.0;
    const std::size_t n = candidate.size(), m = reference.size();
    std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            dp[i][j] = candidate[i - 1] == reference[j - 1]
                           ? dp[i - 1][j - 1] + 1
                           : std::max(dp[i - 1][j], dp[i][j - 1]);
    const double lcs = dp[n][m];
    if (lcs == 0.0) return 0.0;
    const double p = lcs / n;
    const double r = lcs / m;
    return 2.0 * p * r / (p + r);
}

// Exact-position match ratio. Positions are compared up to the shorter
// length; the longer length is the denominator, so truncated or overlong
// candidates are penalized.
inline double token_accuracy(const std::vector<int>& candidate, const std::vector<int>& target) {
    if (candidate.empty() && target.empty()) return 1.0;
    const std::size_t upto = std::min(candidate.size(), target.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < upto; ++i)
        if (candidate[i] == target[i]) ++hits;
    return static_cast<double>(hits) / std::max(candidate.size(), target.size());
}

// Linear CKA on column-centered representations:
// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F); 0 when either norm vanishes.
inline double linear_cka(DenseMatrix x, DenseMatrix y) {
    if (x.rows != y.rows) throw InputError("linear_cka: row counts must match");
    if (x.rows < 2) throw InputError("linear_cka: need at least 2 rows");
    auto center_cols = [](DenseMatrix& m) {
        for (int j = 0; j < m.cols; ++j) {
            double mu = 0.0;
            for (int i = 0; i < m.rows; ++i) mu += m.at(i, j);
            mu /= m.rows;
            for (int i = 0; i < m.rows; ++i) m.at(i, j) -= mu;
        }
    };
    center_cols(x);
    center_cols(y);
    const double cross = frob_norm(matmul_tn(y, x));
    const double nx = frob_norm(matmul_tn(x, x));
    const double ny = frob_norm(matmul_tn(y, y));
    if (nx == 0.0 || ny == 0.0) return 0.0;
    return cross * cross / (nx * ny);
}

} // namespace semi
