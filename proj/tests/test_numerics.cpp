#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "semi/autodiff.hpp"
#include "semi/finite_diff.hpp"
#include "semi/haar.hpp"
#include "semi/matrix.hpp"
#include "semi/ops.hpp"
#include "semi/optim.hpp"
#include "semi/rng.hpp"

using namespace semi;

namespace {

// extended-precision oracle for the tanh-form GELU
long double gelu_ref(long double x) {
    const long double c = sqrtl(2.0L / 3.14159265358979323846264338327950288L);
    const long double u = c * (x + 0.044715L * x * x * x);
    return 0.5L * x * (1.0L + tanhl(u));
}

double ce_bruteforce(const DenseMatrix& logits, const std::vector<int>& targets) {
    long double total = 0.0L;
    for (int i = 0; i < logits.rows; ++i) {
        long double z = 0.0L;
        for (int j = 0; j < logits.cols; ++j) z += expl(static_cast<long double>(logits.at(i, j)));
        total += logl(z) - static_cast<long double>(logits.at(i, targets[i]));
    }
    return static_cast<double>(total / logits.rows);
}

} // namespace

TEST_CASE("gelu_approx matches the closed formula") {
    CHECK(gelu_approx(0.0) == 0.0);
    CHECK(gelu_approx(10.0) == doctest::Approx(10.0).epsilon(1e-7));
    CHECK(gelu_approx(1.0) == doctest::Approx(static_cast<double>(gelu_ref(1.0L))).epsilon(1e-12));
    for (int i = -40; i <= 40; ++i) {
        const double x = 0.25 * i;
        CHECK(gelu_approx(x) ==
              doctest::Approx(static_cast<double>(gelu_ref(static_cast<long double>(x)))).epsilon(1e-12));
    }
}

TEST_CASE("softmax_cross_entropy values and gradient") {
    SUBCASE("uniform logits give ln V") {
        DenseMatrix logits(2, 4);
        auto r = softmax_cross_entropy(logits, {1, 3});
        CHECK(r.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("near-one-hot logits give near-zero loss") {
        DenseMatrix logits(1, 4);
        logits.at(0, 2) = 1e4;
        auto r = softmax_cross_entropy(logits, {2});
        CHECK(r.loss < 1e-6);
    }
    SUBCASE("random logits match extended-precision summation") {
        Rng rng(7);
        DenseMatrix logits = DenseMatrix::gaussian(3, 5, rng, 2.0);
        std::vector<int> targets = {0, 4, 2};
        auto r = softmax_cross_entropy(logits, targets);
        CHECK(r.loss == doctest::Approx(ce_bruteforce(logits, targets)).epsilon(1e-10));
    }
    SUBCASE("row-constant shift leaves the loss unchanged") {
        Rng rng(11);
        for (int trial = 0; trial < 20; ++trial) {
            DenseMatrix logits = DenseMatrix::gaussian(4, 6, rng, 3.0);
            std::vector<int> targets = {5, 0, 3, 2};
            const double base = softmax_cross_entropy(logits, targets).loss;
            DenseMatrix shifted = logits;
            for (int i = 0; i < shifted.rows; ++i) {
                const double c = rng.gaussian();
                for (int j = 0; j < shifted.cols; ++j) shifted.at(i, j) += c;
            }
            CHECK(std::abs(softmax_cross_entropy(shifted, targets).loss - base) < 1e-10);
        }
    }
    SUBCASE("out-of-range target is rejected") {
        DenseMatrix logits(1, 4);
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {4}), InputError);
    }
    SUBCASE("gradient is softmax minus onehot over batch") {
        Rng rng(3);
        DenseMatrix logits = DenseMatrix::gaussian(2, 3, rng);
        auto r = softmax_cross_entropy(logits, {1, 0});
        DenseMatrix p = softmax_rows(logits);
        p.at(0, 1) -= 1.0;
        p.at(1, 0) -= 1.0;
        CHECK(max_abs_diff(r.grad_logits, scale(p, 0.5)) < 1e-14);
    }
}

TEST_CASE("sinusoidal_pe") {
    auto pe = sinusoidal_pe(8, 8);
    for (int i = 0; 2 * i < 8; ++i) {
        CHECK(pe.at(0, 2 * i) == 0.0);
        CHECK(pe.at(0, 2 * i + 1) == 1.0);
    }
    CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    for (int i = 0; 2 * i < 8; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / 8.0);
        CHECK(pe.at(7, 2 * i) == doctest::Approx(std::sin(7.0 * freq)).epsilon(1e-12));
        CHECK(pe.at(7, 2 * i + 1) == doctest::Approx(std::cos(7.0 * freq)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(sinusoidal_pe(4, 7), ConfigError);
}

TEST_CASE("haar orthogonal sampling") {
    SUBCASE("orthogonality, isometry, determinant, determinism") {
        for (std::uint64_t seed = 1; seed <= 12; ++seed) {
            const int dim = 2 + static_cast<int>(seed % 7);
            auto t = sample_haar_orthogonal(dim, seed);
            CHECK(max_abs_diff(matmul_tn(t.q, t.q), DenseMatrix::identity(dim)) < 1e-9);
            Rng rng(seed * 31 + 1);
            DenseMatrix x = DenseMatrix::gaussian(1, dim, rng);
            CHECK(std::abs(vec_norm(t.apply_rows(x)) - vec_norm(x)) <= 1e-9 * vec_norm(x));
            auto t2 = sample_haar_orthogonal(dim, seed);
            CHECK(max_abs_diff(t.q, t2.q) == 0.0);
        }
        CHECK_THROWS_AS(sample_haar_orthogonal(0, 1), ConfigError);
    }
    SUBCASE("Q[0,0] distribution matches normalized Gaussian first coordinates") {
        const int n = 10000;
        std::vector<double> sample_a, sample_b;
        sample_a.reserve(n);
        sample_b.reserve(n);
        for (int i = 0; i < n; ++i)
            sample_a.push_back(sample_haar_orthogonal(3, 1000 + i).q.at(0, 0));
        Rng rng(99);
        for (int i = 0; i < n; ++i) {
            double g[3] = {rng.gaussian(), rng.gaussian(), rng.gaussian()};
            const double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
            sample_b.push_back(g[0] / norm);
        }
        const double stat = ks_two_sample(sample_a, sample_b);
        CHECK(stat < ks_two_sample_critical(n, n));
    }
}

TEST_CASE("tape gradients match finite differences") {
    SUBCASE("linear loss is exact") {
        Rng rng(5);
        ParamMap params;
        params["w"] = DenseMatrix::gaussian(1, 6, rng);
        const DenseMatrix x = DenseMatrix::gaussian(1, 6, rng);
        auto loss_fn = [&](const ParamMap& p) { return dot(p.at("w"), x); };
        GradContext ctx;
        NodeId w = ctx.param("w", params["w"]);
        NodeId loss = ctx.matmul_nt(w, ctx.constant(x));
        ctx.backward(loss);
        auto report = finite_diff_check(loss_fn, params, ctx.gradients(), 1e-5);
        CHECK(report.max_rel_error < 1e-10);
    }

    SUBCASE("two-layer GELU MLP with cross entropy, 20 seeds") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed * 101 + 13);
            const int b = 3, d_in = 5, d_hid = 7, v = 6;
            ParamMap params;
            params["W1"] = DenseMatrix::gaussian(d_hid, d_in, rng, 0.7);
            params["b1"] = DenseMatrix::gaussian(1, d_hid, rng, 0.2);
            params["W2"] = DenseMatrix::gaussian(v, d_hid, rng, 0.7);
            params["b2"] = DenseMatrix::gaussian(1, v, rng, 0.2);
            const DenseMatrix x = DenseMatrix::gaussian(b, d_in, rng);
            std::vector<int> targets;
            for (int i = 0; i < b; ++i) targets.push_back(rng.uniform_int(v));

            auto loss_fn = [&](const ParamMap& p) {
                GradContext ctx;
                NodeId xin = ctx.constant(x);
                NodeId h = ctx.gelu(ctx.add_rowvec(ctx.matmul_nt(xin, ctx.constant(p.at("W1"))),
                                                   ctx.constant(p.at("b1"))));
                NodeId logits = ctx.add_rowvec(ctx.matmul_nt(h, ctx.constant(p.at("W2"))),
                                               ctx.constant(p.at("b2")));
                return ctx.scalar(ctx.cross_entropy_mean(logits, targets));
            };

            GradContext ctx;
            NodeId xin = ctx.constant(x);
            NodeId h = ctx.gelu(ctx.add_rowvec(ctx.matmul_nt(xin, ctx.param("W1", params["W1"])),
                                               ctx.param("b1", params["b1"])));
            NodeId logits = ctx.add_rowvec(ctx.matmul_nt(h, ctx.param("W2", params["W2"])),
                                           ctx.param("b2", params["b2"]));
            ctx.backward(ctx.cross_entropy_mean(logits, targets));
            auto report = finite_diff_check(loss_fn, params, ctx.gradients(), 1e-5);
            CHECK(report.max_rel_error < 1e-4);
        }
    }

    SUBCASE("attention-style primitives, 20 seeds") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed * 977 + 3);
            const int l = 4, d = 6;
            ParamMap params;
            params["Wq"] = DenseMatrix::gaussian(d, d, rng, 0.5);
            params["Wv"] = DenseMatrix::gaussian(d, d, rng, 0.5);
            const DenseMatrix x = DenseMatrix::gaussian(l, d, rng);
            std::vector<int> targets = {1, 0, 3, 2};

            auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
                NodeId xin = ctx.constant(x);
                NodeId xn = ctx.layernorm_rows(xin);
                NodeId q = ctx.matmul_nt(xn, ctx.lift("Wq", p.at("Wq"), trainable));
                NodeId att = ctx.softmax_rows(ctx.scale(ctx.matmul_nt(q, xn), 1.0 / std::sqrt(d)), true);
                NodeId v = ctx.matmul_nt(xn, ctx.lift("Wv", p.at("Wv"), trainable));
                NodeId out = ctx.add(xin, ctx.matmul(att, v));
                return ctx.cross_entropy_mean(out, targets);
            };

            auto loss_fn = [&](const ParamMap& p) {
                GradContext ctx;
                return ctx.scalar(build(ctx, p, false));
            };
            GradContext ctx;
            ctx.backward(build(ctx, params, true));
            auto report = finite_diff_check(loss_fn, params, ctx.gradients(), 1e-5);
            CHECK(report.max_rel_error < 1e-4);
        }
    }

    SUBCASE("gather and weighted sum") {
        Rng rng(21);
        ParamMap params;
        params["table"] = DenseMatrix::gaussian(5, 4, rng);
        std::vector<int> idx = {3, 0, 3, 1};
        std::vector<int> targets = {1, 2, 0, 3};
        auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
            NodeId t = ctx.lift("table", p.at("table"), trainable);
            NodeId seq = ctx.gather_rows(t, idx);
            NodeId a = ctx.cross_entropy_mean(seq, targets);
            NodeId b = ctx.cross_entropy_mean(ctx.scale(seq, 2.0), targets);
            const NodeId xs[] = {a, b};
            const double ws[] = {0.25, 0.75};
            return ctx.weighted_sum(xs, ws);
        };
        auto loss_fn = [&](const ParamMap& p) {
            GradContext ctx;
            return ctx.scalar(build(ctx, p, false));
        };
        GradContext ctx;
        ctx.backward(build(ctx, params, true));
        auto report = finite_diff_check(loss_fn, params, ctx.gradients(), 1e-5);
        CHECK(report.max_rel_error < 1e-4);
    }

    SUBCASE("epsilon outside the sanctioned window is rejected") {
        ParamMap params;
        params["w"] = DenseMatrix(1, 1);
        auto fn = [](const ParamMap&) { return 0.0; };
        CHECK_THROWS_AS(finite_diff_check(fn, params, params, 1e-2), InputError);
        CHECK_THROWS_AS(finite_diff_check(fn, params, params, 1e-8), InputError);
    }
}

TEST_CASE("tape bookkeeping") {
    SUBCASE("backward twice is an error") {
        GradContext ctx;
        NodeId w = ctx.param("w", DenseMatrix(1, 1));
        NodeId loss = ctx.scale(w, 2.0);
        ctx.backward(loss);
        CHECK_THROWS_AS(ctx.backward(loss), InputError);
    }
    SUBCASE("every registered parameter gets a gradient of matching shape") {
        GradContext ctx;
        NodeId used = ctx.param("used", DenseMatrix(2, 3));
        ctx.param("unused", DenseMatrix(4, 1));
        NodeId logits = ctx.matmul_nt(ctx.constant(DenseMatrix::identity(3)), used);
        ctx.backward(ctx.cross_entropy_mean(logits, {0, 1, 0}));
        auto grads = ctx.gradients();
        CHECK(grads.at("used").rows == 2);
        CHECK(grads.at("used").cols == 3);
        CHECK(grads.at("unused").rows == 4);
        CHECK(grads.at("unused").cols == 1);
        CHECK(max_abs(grads.at("unused")) == 0.0);
    }
    SUBCASE("dropout backward routes through the stored mask") {
        Rng rng(9);
        GradContext ctx;
        NodeId w = ctx.param("w", DenseMatrix::gaussian(4, 4, rng));
        Rng drop_rng(17);
        NodeId d = ctx.dropout(w, 0.5, drop_rng);
        ctx.backward(ctx.cross_entropy_mean(d, {0, 1, 2, 3}));
        const auto& g = ctx.grad_of("w");
        const auto& dv = ctx.value(d);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (dv.at(i, j) == 0.0 && ctx.value(w).at(i, j) != 0.0) CHECK(g.at(i, j) == 0.0);
    }
}

TEST_CASE("adamw with schedule") {
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.schedule = LrSchedule::WarmupCosine;
    cfg.warmup_steps = 10;
    cfg.total_steps = 110;
    CHECK(lr_at_step(cfg, 0) == doctest::Approx(0.01));
    CHECK(lr_at_step(cfg, 9) == doctest::Approx(0.1));
    CHECK(lr_at_step(cfg, 60) == doctest::Approx(0.05).epsilon(1e-9));
    CHECK(lr_at_step(cfg, 109) < 1e-4);

    // quadratic bowl converges
    OptimizerConfig bowl;
    bowl.lr = 0.05;
    bowl.weight_decay = 0.0;
    AdamW opt(bowl);
    ParamMap p;
    p["x"] = DenseMatrix(1, 2, {3.0, -2.0});
    for (int i = 0; i < 400; ++i) {
        ParamMap g;
        g["x"] = scale(p["x"], 2.0);
        opt.step(p, g);
    }
    CHECK(max_abs(p["x"]) < 1e-3);
}

TEST_CASE("qr and jacobi helpers") {
    Rng rng(31);
    DenseMatrix a = DenseMatrix::gaussian(6, 6, rng);
    auto qr = qr_decompose(a);
    CHECK(max_abs_diff(matmul(qr.q, qr.r), a) < 1e-10);
    CHECK(max_abs_diff(matmul_tn(qr.q, qr.q), DenseMatrix::identity(6)) < 1e-10);

    DenseMatrix s = add(a, transpose(a));
    auto eig = jacobi_eigen_symmetric(s);
    for (int j = 0; j < 6; ++j) {
        DenseMatrix v(6, 1);
        for (int i = 0; i < 6; ++i) v.at(i, 0) = eig.vectors.at(i, j);
        CHECK(max_abs_diff(matmul(s, v), scale(v, eig.values[j])) < 1e-8);
    }

    DenseMatrix b = DenseMatrix::gaussian(6, 2, rng);
    DenseMatrix x = solve_linear(s, b);
    CHECK(max_abs_diff(matmul(s, x), b) < 1e-9);
}
