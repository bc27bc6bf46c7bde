#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "semi/adapters.hpp"
#include "semi/matrix.hpp"
#include "semi/projector.hpp"
#include "semi/rng.hpp"

using namespace semi;

namespace {

LoraAdapter random_adapter(int r, int d_in, int d_hid, double alpha, std::uint64_t seed) {
    Rng rng(seed);
    return LoraAdapter(DenseMatrix::gaussian(r, d_in, rng), DenseMatrix::gaussian(d_hid, r, rng), r,
                       alpha);
}

} // namespace

TEST_CASE("lora_delta") {
    SUBCASE("zero B gives a zero delta") {
        Rng rng(1);
        LoraAdapter a(DenseMatrix::gaussian(2, 5, rng), DenseMatrix(4, 2), 2, 8.0);
        CHECK(max_abs(lora_delta(a)) == 0.0);
    }
    SUBCASE("rank-1 outer product closed form") {
        const int r = 3;
        DenseMatrix a(r, 4);
        for (int j = 0; j < 4; ++j) a.at(0, j) = j + 1.0; // only first factor row active
        DenseMatrix b(5, r);
        b.at(2, 0) = 1.0; // e_3 column
        LoraAdapter adapter(a, b, r, 3.0); // alpha == r, scale 1
        DenseMatrix d = lora_delta(adapter);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 4; ++j) CHECK(d.at(i, j) == (i == 2 ? j + 1.0 : 0.0));
    }
    SUBCASE("matches a naive triple loop") {
        auto adapter = random_adapter(4, 6, 7, 16.0, 12);
        DenseMatrix expect(7, 6);
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 6; ++j) {
                double s = 0.0;
                for (int k = 0; k < 4; ++k) s += adapter.b.at(i, k) * adapter.a.at(k, j);
                expect.at(i, j) = s * adapter.alpha / adapter.rank;
            }
        CHECK(max_abs_diff(lora_delta(adapter), expect) < 1e-12);
    }
    SUBCASE("scaling alpha scales the delta exactly") {
        auto adapter = random_adapter(3, 5, 5, 6.0, 4);
        auto doubled = adapter;
        doubled.alpha = 12.0;
        CHECK(max_abs_diff(scale(lora_delta(adapter), 2.0), lora_delta(doubled)) < 1e-12);
    }
    SUBCASE("invariant violations are rejected") {
        Rng rng(3);
        CHECK_THROWS_AS(LoraAdapter(DenseMatrix::gaussian(0, 4, rng), DenseMatrix::gaussian(4, 0, rng),
                                    0, 1.0),
                        ConfigError);
        CHECK_THROWS_AS(LoraAdapter(DenseMatrix::gaussian(5, 4, rng), DenseMatrix::gaussian(4, 5, rng),
                                    5, 1.0),
                        ConfigError);
    }
}

TEST_CASE("average_adapters") {
    SUBCASE("single adapter averages to its own delta") {
        AdapterSet set;
        set.push(random_adapter(2, 4, 4, 4.0, 9), 0);
        CHECK(max_abs_diff(average_adapters(set), lora_delta(set.adapters[0])) == 0.0);
    }
    SUBCASE("negated factors cancel") {
        auto a1 = random_adapter(3, 4, 6, 9.0, 17);
        auto a2 = a1;
        a2.b = scale(a1.b, -1.0);
        AdapterSet set;
        set.push(a1, 0);
        set.push(a2, 1);
        CHECK(max_abs(average_adapters(set)) < 1e-15);
    }
    SUBCASE("three random adapters match the summation oracle") {
        AdapterSet set;
        for (int i = 0; i < 3; ++i) set.push(random_adapter(4, 5, 6, 8.0, 100 + i), i);
        DenseMatrix expect(6, 5);
        for (const auto& a : set.adapters) axpy(expect, 1.0 / 3.0, lora_delta(a));
        CHECK(max_abs_diff(average_adapters(set), expect) < 1e-12);
    }
    SUBCASE("n copies average to the member delta; empty set rejected") {
        AdapterSet set;
        auto adapter = random_adapter(2, 5, 5, 2.0, 33);
        for (int i = 0; i < 5; ++i) set.push(adapter, i);
        CHECK(max_abs_diff(average_adapters(set), lora_delta(adapter)) < 1e-12);
        CHECK_THROWS_AS(average_adapters(AdapterSet{}), InputError);
    }
    SUBCASE("mixed shapes are rejected") {
        AdapterSet set;
        set.push(random_adapter(2, 4, 4, 4.0, 1), 0);
        CHECK_THROWS_AS(set.push(random_adapter(2, 5, 4, 4.0, 2), 1), ConfigError);
    }
}

TEST_CASE("generation_param_count") {
    CHECK(generation_param_count(768, 768, 32, 768) == 37748736ULL);
    CHECK(generation_param_count(64, 64, 8, 64) == 65536ULL);
    // with r = m the factorized count is no smaller than dense when n <= m
    CHECK(generation_param_count(64, 64, 64, 64) >= full_matrix_param_count(64, 64, 64));
    CHECK_THROWS_AS(generation_param_count(0, 1, 1, 1), InputError);
    CHECK_THROWS_AS(generation_param_count(1ULL << 62, 1ULL << 62, 4, 4), NumericError);
}

TEST_CASE("merge") {
    Rng rng(5);
    ProjectorParams psi = make_projector(6, 5, 1, 4, 0.0, 77);
    const DenseMatrix x = DenseMatrix::gaussian(1, 6, rng);

    SUBCASE("zero delta leaves the forward untouched") {
        ProjectorParams merged = merge(psi, DenseMatrix(5, 6));
        CHECK(max_abs_diff(project_forward(merged, x), project_forward(psi, x)) == 0.0);
    }
    SUBCASE("merging a delta and its negation restores the original") {
        DenseMatrix d = DenseMatrix::gaussian(5, 6, rng);
        ProjectorParams roundtrip = merge(merge(psi, d), scale(d, -1.0));
        CHECK(max_abs_diff(roundtrip.w1, psi.w1) < 1e-12);
    }
    SUBCASE("merge is associative with delta addition") {
        DenseMatrix d1 = DenseMatrix::gaussian(5, 6, rng);
        DenseMatrix d2 = DenseMatrix::gaussian(5, 6, rng);
        ProjectorParams lhs = merge(psi, add(d1, d2));
        ProjectorParams rhs = merge(merge(psi, d1), d2);
        CHECK(max_abs_diff(lhs.w1, rhs.w1) < 1e-12);
    }
    SUBCASE("merged forward equals the adapter-path forward") {
        auto adapter = random_adapter(3, 6, 5, 6.0, 21);
        ProjectorParams merged = merge(psi, lora_delta(adapter));
        CHECK(max_abs_diff(project_forward(merged, x), project_forward(psi, x, &adapter)) < 1e-10);
    }
    SUBCASE("shape mismatch is rejected") {
        CHECK_THROWS_AS(merge(psi, DenseMatrix(4, 6)), ConfigError);
    }
    SUBCASE("original psi is not modified") {
        DenseMatrix before = psi.w1;
        auto merged = merge(psi, DenseMatrix::gaussian(5, 6, rng));
        CHECK(max_abs_diff(psi.w1, before) == 0.0);
        (void)merged;
    }
}
