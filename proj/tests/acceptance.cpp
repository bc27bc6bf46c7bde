// Acceptance suite: runs the full pipeline on the default configuration and
// checks every acceptance criterion at its stated tolerance, printing one
// pass/fail line per criterion.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semi/benchmark.hpp"
#include "semi/finite_diff.hpp"
#include "semi/pipeline.hpp"

using namespace semi;

namespace {

struct Checker {
    std::vector<std::string> failures;

    void require(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    template <typename T>
    void require_lt(T a, T b, const std::string& what) {
        if (!(a < b)) {
            std::ostringstream os;
            os << what << " (" << a << " !< " << b << ")";
            failures.push_back(os.str());
        }
    }
    template <typename T>
    void require_le(T a, T b, const std::string& what) {
        if (!(a <= b)) {
            std::ostringstream os;
            os << what << " (" << a << " !<= " << b << ")";
            failures.push_back(os.str());
        }
    }
};

int g_failed = 0;

void run_block(const std::string& label, const std::function<void(Checker&)>& body) {
    Checker check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(check);
    } catch (const std::exception& e) {
        check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (check.failures.empty()) {
        std::printf("[PASS] %s (%.1fs)\n", label.c_str(), secs);
    } else {
        ++g_failed;
        std::printf("[FAIL] %s (%.1fs)\n", label.c_str(), secs);
        for (const auto& f : check.failures) std::printf("       - %s\n", f.c_str());
    }
    std::fflush(stdout);
}

void criterion(int id, const std::string& name, const std::function<void(Checker&)>& body) {
    char label[256];
    std::snprintf(label, sizeof(label), "criterion %2d: %s", id, name.c_str());
    run_block(label, body);
}

// ---- tiny fixtures for the math criteria ------------------------------------

WorldConfig tiny_world_cfg() {
    WorldConfig cfg;
    cfg.vocab_size = 24;
    cfg.num_concepts = 6;
    cfg.d_latent = 4;
    cfg.max_len = 8;
    cfg.min_caption_words = 3;
    cfg.sigma_noise = 0.1;
    cfg.n_train = 4;
    cfg.n_val = 1;
    cfg.n_test = 1;
    cfg.instr_len = 2;
    return cfg;
}

struct TinyStack {
    ConceptWorld world;
    std::vector<SyntheticEncoder> encoders;
    FrozenTextEncoder text_enc;
    FrozenDecoder decoder;
    ProjectorParams psi;
    HypernetConfig hcfg;

    explicit TinyStack(std::uint64_t seed, int d_h = 8)
        : world(tiny_world_cfg(), seed),
          encoders({make_encoder(world, d_h, seed + 1, 0), make_encoder(world, d_h, seed + 2, 1)}),
          text_enc(make_text_encoder(world, d_h)),
          decoder([&] {
              DecoderConfig dcfg;
              dcfg.d_model = d_h;
              return make_decoder_skeleton(world, dcfg, seed);
          }()),
          psi(make_projector(d_h, d_h, 1, d_h, 0.0, seed)) {
        hcfg.d_h = d_h;
        hcfg.context_pairs = 2;
        hcfg.supervision_batch = 2;
        hcfg.rank = 2;
        hcfg.alpha = 2.0;
        hcfg.d_in = d_h;
        hcfg.d_hid = d_h;
        hcfg.out2 = d_h;
        hcfg.dropout = 0.0;
    }
};

double fd_check_projector_pipeline(std::uint64_t seed) {
    TinyStack t(1000 + seed);
    Rng rng(2000 + seed);
    auto sample = sample_pair(t.world, t.encoders[0], t.world.train_ids(), rng);
    const auto instr = t.world.instruction_pool(0)[0];
    auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
        ProjectorParams local = t.psi;
        local.from_params(p);
        auto nodes = local.lift(ctx, trainable);
        auto dn = t.decoder.lift(ctx, false);
        NodeId out = projector_forward(ctx, local, nodes, ctx.constant(sample.x));
        return projected_caption_loss(ctx, t.decoder, dn, local, out, instr, sample.y);
    };
    auto loss_fn = [&](const ParamMap& p) {
        GradContext ctx;
        return ctx.scalar(build(ctx, p, false));
    };
    GradContext ctx;
    ctx.backward(build(ctx, t.psi.to_params(), true));
    return finite_diff_check(loss_fn, t.psi.to_params(), ctx.gradients(), 1e-5).max_rel_error;
}

double fd_check_hypernet_pipeline(std::uint64_t seed) {
    TinyStack t(3000 + seed);
    HypernetParams theta = make_hypernet(t.hcfg, 100 + seed);
    Rng perturb(200 + seed);
    theta.head_b = DenseMatrix::gaussian(theta.head_b.rows, theta.head_b.cols, perturb, 0.1);
    Rng rng(300 + seed);
    auto q = sample_haar_orthogonal(t.hcfg.d_h, 400 + seed);
    Stage2Batch batch = draw_stage2_batch(t.world, t.encoders, t.text_enc, t.hcfg, rng, &q);
    auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
        HypernetParams local = theta;
        local.from_params(p);
        auto nodes = local.lift(ctx, trainable);
        return stage2_step_loss(ctx, local, nodes, t.psi, t.decoder, batch.episode,
                                batch.supervision_view, batch.supervision_x, batch.instr_tokens,
                                false, nullptr);
    };
    auto loss_fn = [&](const ParamMap& p) {
        GradContext ctx;
        return ctx.scalar(build(ctx, p, false));
    };
    GradContext ctx;
    ctx.backward(build(ctx, theta.to_params(), true));
    return finite_diff_check(loss_fn, theta.to_params(), ctx.gradients(), 1e-5).max_rel_error;
}

double fd_check_lora_baseline(std::uint64_t seed) {
    TinyStack t(5000 + seed);
    Rng rng(6000 + seed);
    auto sample = sample_pair(t.world, t.encoders[0], t.world.train_ids(), rng);
    const auto instr = t.world.instruction_pool(0)[0];
    ParamMap lora;
    lora["lora.a"] = DenseMatrix::gaussian(2, t.psi.d_in, rng, 0.4);
    lora["lora.b"] = DenseMatrix::gaussian(t.psi.d_hid, 2, rng, 0.4);
    auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
        NodeId a = ctx.lift("lora.a", p.at("lora.a"), trainable);
        NodeId b = ctx.lift("lora.b", p.at("lora.b"), trainable);
        NodeId delta = ctx.scale(ctx.matmul(b, a), 2.0 / 2.0);
        auto nodes = t.psi.lift(ctx, false);
        auto dn = t.decoder.lift(ctx, false);
        NodeId out = projector_forward(ctx, t.psi, nodes, ctx.constant(sample.x), delta);
        return projected_caption_loss(ctx, t.decoder, dn, t.psi, out, instr, sample.y);
    };
    auto loss_fn = [&](const ParamMap& p) {
        GradContext ctx;
        return ctx.scalar(build(ctx, p, false));
    };
    GradContext ctx;
    ctx.backward(build(ctx, lora, true));
    return finite_diff_check(loss_fn, lora, ctx.gradients(), 1e-5).max_rel_error;
}

double fd_check_decoder(std::uint64_t seed) {
    TinyStack t(7000 + seed);
    const auto& caption = t.world.concept_at(0).caption;
    const DenseMatrix prefix = t.decoder.ideal_prefix(t.world.concept_at(0).latent);
    auto build = [&](GradContext& ctx, const ParamMap& p, bool trainable) {
        FrozenDecoder local = t.decoder;
        local.from_params(p);
        auto nodes = local.lift(ctx, trainable);
        return local.caption_loss(ctx, nodes, ctx.constant(prefix), caption);
    };
    ParamMap params = t.decoder.to_params();
    params.erase("dec.prefix_map");
    auto with_map = [&](const ParamMap& p) {
        ParamMap full = p;
        full["dec.prefix_map"] = t.decoder.prefix_map;
        return full;
    };
    auto loss_fn = [&](const ParamMap& p) {
        GradContext ctx;
        return ctx.scalar(build(ctx, with_map(p), false));
    };
    GradContext ctx;
    ctx.backward(build(ctx, with_map(params), true));
    ParamMap grads = ctx.gradients();
    return finite_diff_check(loss_fn, params, grads, 1e-5).max_rel_error;
}

std::vector<std::vector<double>> parse_metrics_csv(const std::string& text,
                                                   std::vector<std::string>* methods = nullptr,
                                                   std::vector<int>* dims = nullptr,
                                                   std::vector<int>* shots = nullptr) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line != metrics_csv_header()) throw InputError("benchmark csv header mismatch: " + line);
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 9) throw InputError("benchmark csv row width: " + line);
        if (methods) methods->push_back(fields[0]);
        if (dims) dims->push_back(std::stoi(fields[2]));
        if (shots) shots->push_back(std::stoi(fields[3]));
        rows.push_back({std::stod(fields[3]), std::stod(fields[4]), std::stod(fields[5]),
                        std::stod(fields[6]), std::stod(fields[7]), std::stod(fields[8])});
    }
    return rows;
}

std::string strip_runtime_column(const std::string& csv) {
    std::istringstream is(csv);
    std::string line, out;
    while (std::getline(is, line)) {
        const auto pos = line.rfind(',');
        out += line.substr(0, pos) + "\n";
    }
    return out;
}

struct BenchmarkView {
    // (enc_dim, shots, method) -> mean token accuracy over seeds
    std::map<std::tuple<int, int, std::string>, double> mean_acc;
    std::set<std::string> methods;
    std::set<int> dims, shot_counts;
    int row_count = 0;
};

BenchmarkView view_of(const std::string& csv_text) {
    BenchmarkView v;
    std::istringstream is(csv_text);
    std::string line;
    std::getline(is, line);
    std::map<std::tuple<int, int, std::string>, std::pair<double, int>> acc;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string f;
        std::vector<std::string> fields;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        const std::string method = fields[0];
        const int dim = std::stoi(fields[2]);
        const int shots = std::stoi(fields[3]);
        const double token_acc = std::stod(fields[5]);
        auto& slot = acc[{dim, shots, method}];
        slot.first += token_acc;
        slot.second += 1;
        v.methods.insert(method);
        v.dims.insert(dim);
        v.shot_counts.insert(shots);
        ++v.row_count;
    }
    for (const auto& [key, sum_count] : acc) v.mean_acc[key] = sum_count.first / sum_count.second;
    return v;
}

} // namespace

int main() {
    const auto suite_start = std::chrono::steady_clock::now();

    std::filesystem::path work = std::filesystem::temp_directory_path() / "semi_acceptance";
    if (const char* env = std::getenv("SEMI_ACCEPT_DIR")) work = env;
    std::filesystem::remove_all(work);
    std::filesystem::create_directories(work);

    // ---- criterion 1: gradient correctness ---------------------------------
    criterion(1, "gradient correctness for every trainable module (1e-4, >=20 seeds)", [&](Checker& c) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::uint64_t s = 0; s < 20; ++s)
            c.require_lt(fd_check_projector_pipeline(s), 1e-4, "projector gradients, seed " + std::to_string(s));
        for (std::uint64_t s = 0; s < 20; ++s)
            c.require_lt(fd_check_hypernet_pipeline(s), 1e-4, "hypernet gradients, seed " + std::to_string(s));
        for (std::uint64_t s = 0; s < 20; ++s)
            c.require_lt(fd_check_lora_baseline(s), 1e-4, "lora baseline gradients, seed " + std::to_string(s));
        for (std::uint64_t s = 0; s < 20; ++s)
            c.require_lt(fd_check_decoder(s), 1e-4, "decoder gradients, seed " + std::to_string(s));
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        c.require_lt(secs, 60.0, "criterion 1 runtime budget (s)");
    });

    // ---- criterion 2: Haar sampler ------------------------------------------
    criterion(2, "Haar sampler orthogonality, determinant, isometry, KS", [&](Checker& c) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::uint64_t seed = 1; seed <= 25; ++seed) {
            const int dim = 2 + static_cast<int>(seed % 9);
            auto t = sample_haar_orthogonal(dim, seed);
            c.require_lt(max_abs_diff(matmul_tn(t.q, t.q), DenseMatrix::identity(dim)), 1e-9,
                         "orthogonality");
            double logdet = 0.0;
            auto qr = qr_decompose(t.q);
            for (int i = 0; i < dim; ++i) logdet += std::log(std::abs(qr.r.at(i, i)));
            c.require_lt(std::abs(std::exp(logdet) - 1.0), 1e-6, "determinant magnitude");
            Rng rng(seed * 77 + 5);
            DenseMatrix x = DenseMatrix::gaussian(1, dim, rng);
            c.require_le(std::abs(vec_norm(t.apply_rows(x)) - vec_norm(x)), 1e-9 * vec_norm(x),
                         "isometry");
        }
        const int n = 10000;
        std::vector<double> haar_samples, oracle;
        haar_samples.reserve(n);
        oracle.reserve(n);
        for (int i = 0; i < n; ++i)
            haar_samples.push_back(sample_haar_orthogonal(3, 50000 + i).q.at(0, 0));
        Rng rng(424242);
        for (int i = 0; i < n; ++i) {
            const double g0 = rng.gaussian(), g1 = rng.gaussian(), g2 = rng.gaussian();
            oracle.push_back(g0 / std::sqrt(g0 * g0 + g1 * g1 + g2 * g2));
        }
        c.require_lt(ks_two_sample(haar_samples, oracle), ks_two_sample_critical(n, n),
                     "KS statistic at the 1% level");
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        c.require_lt(secs, 30.0, "criterion 2 runtime budget (s)");
    });

    // ---- criterion 3: LoRA algebra ------------------------------------------
    criterion(3, "LoRA algebra and generation parameter count", [&](Checker& c) {
        for (std::uint64_t s = 0; s < 10; ++s) {
            Rng rng(900 + s);
            ProjectorParams psi = make_projector(7, 6, 2, 4, 0.0, s);
            LoraAdapter adapter(DenseMatrix::gaussian(3, 7, rng), DenseMatrix::gaussian(6, 3, rng), 3,
                                5.0);
            DenseMatrix x = DenseMatrix::gaussian(1, 7, rng);
            ProjectorParams merged = merge(psi, lora_delta(adapter));
            c.require_lt(max_abs_diff(project_forward(psi, x, &adapter), project_forward(merged, x)),
                         1e-10, "adapter path equals dense merge");
        }
        Rng rng(77);
        ProjectorParams psi = make_projector(6, 5, 1, 4, 0.0, 3);
        DenseMatrix d1 = DenseMatrix::gaussian(5, 6, rng);
        DenseMatrix d2 = DenseMatrix::gaussian(5, 6, rng);
        c.require(max_abs_diff(merge(psi, DenseMatrix(5, 6)).w1, psi.w1) == 0.0, "zero-delta merge");
        c.require_lt(max_abs_diff(merge(merge(psi, d1), scale(d1, -1.0)).w1, psi.w1), 1e-12,
                     "inverse merge");
        c.require_lt(max_abs_diff(merge(psi, add(d1, d2)).w1, merge(merge(psi, d1), d2).w1), 1e-12,
                     "merge associativity");
        AdapterSet single;
        single.push(LoraAdapter(DenseMatrix::gaussian(2, 6, rng), DenseMatrix::gaussian(5, 2, rng), 2,
                                4.0),
                    0);
        c.require(max_abs_diff(average_adapters(single), lora_delta(single.adapters[0])) == 0.0,
                  "single-element average");
        c.require(generation_param_count(768, 768, 32, 768) == 37748736ULL,
                  "paper-dimension generation head count");
        c.require(generation_param_count(64, 64, 8, 64) == 65536ULL, "desk-scale head count");
    });

    // ---- criterion 4: zero-init contract ------------------------------------
    criterion(4, "zero-init: delta == 0 and stage-2 step-0 loss equals stage-1", [&](Checker& c) {
        WorldConfig wcfg; // desk-scale dims
        ConceptWorld world(wcfg, 2024);
        std::vector<SyntheticEncoder> encoders = {make_encoder(world, 64, 11, 0),
                                                  make_encoder(world, 64, 12, 1),
                                                  make_encoder(world, 64, 13, 2)};
        FrozenTextEncoder text_enc = make_text_encoder(world, 64);
        DecoderConfig dcfg;
        FrozenDecoder dec = make_decoder_skeleton(world, dcfg, 2024);
        ProjectorParams psi = make_projector(64, 64, 1, 64, 0.1, 2024);
        HypernetConfig hcfg;
        HypernetParams theta = make_hypernet(hcfg, 2024);

        for (std::uint64_t s = 0; s < 4; ++s) {
            Rng rng(100 + s);
            auto q = sample_haar_orthogonal(64, 300 + s);
            Stage2Batch batch = draw_stage2_batch(world, encoders, text_enc, hcfg, rng, &q);
            GeneratedAdapter gen = hypernet_forward(theta, batch.episode);
            c.require(max_abs(lora_delta(gen.layer1)) == 0.0, "generated delta is exactly zero");
            GradContext ctx;
            auto nodes = theta.lift(ctx, false);
            const double stage2 = ctx.scalar(
                stage2_step_loss(ctx, theta, nodes, psi, dec, batch.episode, batch.supervision_view,
                                 batch.supervision_x, batch.instr_tokens, false, nullptr));
            const double stage1 = stage1_batch_loss(psi, dec, batch.supervision_view,
                                                    batch.supervision_x, batch.instr_tokens);
            c.require_lt(std::abs(stage2 - stage1), 1e-8, "step-0 loss equality");
        }
    });

    // ---- criterion 5: Inf-FS -------------------------------------------------
    criterion(5, "Inf-FS series identity and rank demonstration", [&](Checker& c) {
        int literal_50_cases = 0;
        for (int inst = 0; inst < 100; ++inst) {
            Rng rng(5000 + inst);
            const int d = 4 + rng.uniform_int(9); // 4..12 features
            const int n = 8 + rng.uniform_int(17);
            DenseMatrix x = DenseMatrix::gaussian(n, d, rng);
            DenseMatrix a = inffs_adjacency(x, 0.5);
            const double rho = spectral_radius(a);
            const double target = 0.1 + 0.8 * rng.uniform(); // gamma*rho in (0.1, 0.9]
            const double gamma = target / rho;
            auto closed = inffs_scores(x, gamma, 0.5);
            // series depth: geometric tail below 1e-10 (>= 50 terms always)
            int terms = std::max(50, static_cast<int>(std::ceil(
                                          std::log(1e-10 * (1.0 - target)) / std::log(target))));
            DenseMatrix power = DenseMatrix::identity(d);
            std::vector<double> series(d, 0.0);
            for (int l = 1; l <= terms; ++l) {
                power = matmul(power, a);
                const double g = std::pow(gamma, l);
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j) series[i] += g * power.at(i, j);
            }
            double max_err = 0.0;
            for (int i = 0; i < d; ++i) max_err = std::max(max_err, std::abs(series[i] - closed.scores[i]));
            c.require_lt(max_err, 1e-8, "series identity, instance " + std::to_string(inst));
            if (target <= 0.65 && terms == 50) ++literal_50_cases;
        }
        c.require(literal_50_cases >= 20, "literal 50-term cases are well represented");

        Rng rng(999);
        const int n = 8, d_e = 96, d_h = 32;
        DenseMatrix x = DenseMatrix::gaussian(n, d_e, rng);
        auto fs = fit_inffs(x, d_h, 1e9, 0.5);
        const int selected_rank = embedding_rank(fs.apply(x), 1e-9);
        DenseMatrix centered = x;
        for (int j = 0; j < centered.cols; ++j) {
            double mu = 0.0;
            for (int i = 0; i < centered.rows; ++i) mu += centered.at(i, j);
            mu /= centered.rows;
            for (int i = 0; i < centered.rows; ++i) centered.at(i, j) -= mu;
        }
        const int pca_rank = embedding_rank(matmul(centered, pca_reduce(x, d_h)), 1e-9);
        c.require_le(pca_rank, n, "PCA output rank limited by sample count");
        c.require(selected_rank == std::min(d_h, embedding_rank(x, 1e-9)),
                  "selected-feature rank reaches min(d_h, rank(X))");
        c.require(selected_rank > pca_rank, "selection strictly beats N-limited PCA");
    });

    // ---- full pipeline for criteria 6-10 ------------------------------------
    const std::filesystem::path run1 = work / "run1";
    const std::filesystem::path run2 = work / "run2";
    ExperimentConfig cfg = parse_config(Json{{"out_dir", run1.string()}});
    ExperimentConfig cfg2 = parse_config(Json{{"out_dir", run2.string()}});

    std::printf("-- running full pipeline (stage1, stage2, benchmark) for criteria 6-10\n");
    std::fflush(stdout);
    const auto bench_t0 = std::chrono::steady_clock::now();
    cmd_stage1(cfg);
    cmd_stage2(cfg);
    BenchmarkResult bench = cmd_benchmark(cfg);
    const double bench_secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - bench_t0).count();
    const BenchmarkView view = view_of(bench.csv_text);
    const int shots_low = *view.shot_counts.begin();

    // golden baselines recorded by the stage runs themselves
    run_block("golden: stage-1 validation decode accuracy > 0.9", [&](Checker& c) {
        ConceptWorld world = build_world_from(cfg);
        FrozenDecoder dec = ensure_decoder(cfg, world);
        ProjectorParams psi = load_projector(load_checkpoint(run_paths(cfg).psi_ckpt()));
        double acc = 0.0;
        int n = 0;
        for (const auto& enc : build_train_encoders(cfg, world)) {
            Rng rng(mix_seed(cfg.seed, 0x90D1ULL, enc.modality_id));
            const auto instr = world.instruction_pool(enc.modality_id)[0];
            for (int i = 0; i < 16; ++i) {
                auto s = sample_pair(world, enc, world.train_ids(), rng);
                acc += token_accuracy(decode_sample(psi, s.x, dec, instr, cfg.adapt.max_decode_len),
                                      s.y);
                ++n;
            }
        }
        c.require_lt(0.9, acc / n, "stage-1 greedy-decode validation accuracy");
    });
    run_block("golden: stage-2 validation loss drops >= 10% from step 0", [&](Checker& c) {
        ConceptWorld world = build_world_from(cfg);
        FrozenDecoder dec = ensure_decoder(cfg, world);
        ProjectorParams psi = load_projector(load_checkpoint(run_paths(cfg).psi_ckpt()));
        HypernetParams theta = load_hypernet(load_checkpoint(run_paths(cfg).theta_ckpt()));
        auto encoders = build_train_encoders(cfg, world);
        FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);
        HypernetParams init = make_hypernet(theta.cfg, cfg.seed);
        const double v0 = hypernet_validation_loss(init, world, encoders, text_enc, psi, dec, 16, 4242);
        const double v1 = hypernet_validation_loss(theta, world, encoders, text_enc, psi, dec, 16, 4242);
        c.require_le(0.10, (v0 - v1) / v0, "relative validation-loss decrease");
    });

    // ---- criterion 6: CKA -----------------------------------------------------
    criterion(6, "linear CKA identities and the four-stage grid direction", [&](Checker& c) {
        Rng rng(31337);
        DenseMatrix x = DenseMatrix::gaussian(64, 7, rng);
        c.require_lt(std::abs(linear_cka(x, x) - 1.0), 1e-12, "CKA(X, X) == 1");
        DenseMatrix y = DenseMatrix::gaussian(64, 5, rng);
        auto q = sample_haar_orthogonal(7, 99);
        c.require_lt(std::abs(linear_cka(x, y) - linear_cka(matmul_nt(x, q.q), scale(y, 2.5))), 1e-9,
                     "orthogonal/scale invariance");
        Rng ra(1), rb(2);
        c.require_lt(linear_cka(DenseMatrix::gaussian(2000, 8, ra), DenseMatrix::gaussian(2000, 8, rb)),
                     0.05, "independent data near zero");

        for (const char* stage : kCkaStages)
            c.require(bench.cka_grid.contains(stage), std::string("grid emits stage ") + stage);
        const std::string modality = "heldout_d" + std::to_string(cfg.d_h);
        c.require(bench.cka_grid.at("Pre-Merge").contains(modality), "grid has the held-out modality");
        const double pre = bench.cka_grid.at("Pre-Merge").at(modality);
        const double post_ft = bench.cka_grid.at("Post-Finetune").at(modality);
        for (const char* stage : kCkaStages)
            for (const auto& [name, value] : bench.cka_grid.at(stage).items())
                c.require(value.get<double>() >= -1e-9 && value.get<double>() <= 1.0 + 1e-9,
                          "grid values in [0, 1]");
        c.require_le(pre, post_ft, "Post-Finetune >= Pre-Merge (seed mean)");
    });

    // ---- criterion 7: sample-efficiency orderings ----------------------------
    criterion(7, "desk-scale sample-efficiency benchmark orderings", [&](Checker& c) {
        const int expected_rows = static_cast<int>(cfg.heldout_dims.size() * cfg.shots.size() *
                                                   cfg.methods.size() * cfg.seeds.size());
        c.require(view.row_count == expected_rows, "row count matches the grid");

        const int d = cfg.d_h; // the default held-out modality
        const double semi = view.mean_acc.at({d, shots_low, "semi"});
        const double scratch = view.mean_acc.at({d, shots_low, "projector"});
        c.require_lt(scratch, semi, "(a) low-shot mean accuracy: semi beats projector-from-scratch");
        for (const std::string m : {"ft_projector", "projector", "lora"})
            c.require_le(view.mean_acc.at({d, shots_low, m}), semi,
                         "(b) semi >= " + m + " at the lowest shot count");

        // every method consumed the byte-identical few-shot subset per cell
        {
            std::ifstream journal(run_paths(cfg).cells_jsonl());
            std::string line;
            std::map<std::string, std::set<std::uint64_t>> hashes;
            while (std::getline(journal, line)) {
                if (line.empty()) continue;
                Json j = Json::parse(line);
                hashes[j.at("modality").get<std::string>() + "/" + std::to_string(j.at("shots").get<int>()) +
                       "/" + std::to_string(j.at("seed").get<std::uint64_t>())]
                    .insert(j.at("few_hash").get<std::uint64_t>());
            }
            c.require(!hashes.empty(), "cell journal records subset hashes");
            for (const auto& [key, set] : hashes)
                c.require(set.size() == 1, "identical few-shot subset across methods at " + key);
        }

        // (c) per-method curves non-decreasing in shots, one inversion tolerated
        std::vector<int> ladder(view.shot_counts.begin(), view.shot_counts.end());
        for (const auto& method : cfg.methods) {
            for (int dim : cfg.heldout_dims) {
                int inversions = 0;
                for (std::size_t i = 1; i < ladder.size(); ++i)
                    if (view.mean_acc.at({dim, ladder[i], method}) <
                        view.mean_acc.at({dim, ladder[i - 1], method}))
                        ++inversions;
                c.require_le(inversions, 1, "(c) " + method + " at d_e=" + std::to_string(dim) +
                                                " non-decreasing up to one inversion");
            }
        }
        c.require_lt(bench_secs, 1800.0, "benchmark wall time under 30 minutes");
    });

    // ---- criterion 8: arbitrary-dimensionality paths --------------------------
    criterion(8, "pruning and Inf-FS paths complete and keep the low-shot ordering", [&](Checker& c) {
        c.require(cfg.heldout_dims == std::vector<int>{cfg.d_h - 16, cfg.d_h, cfg.d_h + 32},
                  "default variant dims are d_h-16, d_h, d_h+32");
        for (int dim : cfg.heldout_dims) {
            const double semi = view.mean_acc.at({dim, shots_low, "semi"});
            const double scratch = view.mean_acc.at({dim, shots_low, "projector"});
            c.require_lt(scratch, semi,
                         "criterion 7(a) at d_e=" + std::to_string(dim));
        }
        // the routing itself: pruning accepts narrower inputs, selection reduces wider ones
        ProjectorParams psi = load_projector(load_checkpoint(run_paths(cfg).psi_ckpt()));
        ProjectorParams pruned = prune_projector(psi, cfg.d_h - 16);
        c.require(pruned.d_in == cfg.d_h - 16, "pruned projector consumes d_e inputs");
        Rng rng(404);
        DenseMatrix wide = DenseMatrix::gaussian(12, cfg.d_h + 32, rng);
        auto fs = fit_inffs(wide, cfg.d_h, cfg.featsel_gamma, cfg.featsel_beta);
        c.require(fs.apply(wide).cols == cfg.d_h, "feature selection reduces to d_h");
    });

    // ---- criterion 9: ablation harness ----------------------------------------
    criterion(9, "ablation matrix runs to completion with schema-valid output", [&](Checker& c) {
        auto rows = cmd_ablate(cfg);
        c.require(rows.size() == ablation_matrix().size(), "every ablation variant emits a row");
        const std::string csv = read_file(run_paths(cfg).ablations_csv());
        std::vector<std::string> methods;
        auto parsed = parse_metrics_csv(csv, &methods);
        c.require(parsed.size() == rows.size(), "ablation CSV row count");
        std::set<std::string> names(methods.begin(), methods.end());
        for (const auto& variant : ablation_matrix())
            c.require(names.count(variant.name) == 1, "ablation CSV has variant " + variant.name);
        for (const auto& row : parsed)
            for (int k = 2; k <= 4; ++k)
                c.require(row[k] >= 0.0 && row[k] <= 1.0, "ablation metrics within [0, 1]");

        // single- and multi-adapter modes coincide exactly when n_fewshot == S
        ConceptWorld world = build_world_from(cfg);
        FrozenDecoder dec = ensure_decoder(cfg, world);
        FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);
        ProjectorParams psi = load_projector(load_checkpoint(run_paths(cfg).psi_ckpt()));
        HypernetParams theta = load_hypernet(load_checkpoint(run_paths(cfg).theta_ckpt()));
        HeldoutModality heldout = build_heldout_modality(cfg, world, text_enc, cfg.d_h);
        FewshotData fs;
        fs.samples.assign(heldout.pools.at(0).begin(),
                          heldout.pools.at(0).begin() + theta.cfg.context_pairs);
        fs.instruction = heldout.instruction;
        fs.instruction_emb = heldout.instruction_emb;
        AdaptConfig acfg = cfg.adapt;
        acfg.steps = 20;
        acfg.eval_interval = 10;
        acfg.early_stop = EarlyStopMetric::TrainLoss;
        acfg.single_adapter = false;
        auto multi = adapt_few_shot(theta, psi, fs, heldout.val_raw, dec, text_enc, acfg, 5);
        acfg.single_adapter = true;
        auto single = adapt_few_shot(theta, psi, fs, heldout.val_raw, dec, text_enc, acfg, 5);
        c.require(max_abs_diff(multi.final_params.w1, single.final_params.w1) == 0.0 &&
                      max_abs_diff(multi.final_params.w2, single.final_params.w2) == 0.0,
                  "single == multi when the few-shot set is one chunk");
    });

    // ---- criterion 10: determinism and persistence ----------------------------
    criterion(10, "determinism across reruns; bit-exact checkpoints; resume", [&](Checker& c) {
        // full pipeline rerun under an identical config reproduces the CSV
        cmd_stage1(cfg2);
        cmd_stage2(cfg2);
        BenchmarkResult again = cmd_benchmark(cfg2);
        c.require(strip_runtime_column(bench.csv_text) == strip_runtime_column(again.csv_text),
                  "benchmark CSV identical across full reruns (runtime column aside)");
        c.require(bench.cka_grid == again.cka_grid, "CKA grid identical across reruns");

        Checkpoint psi_a = load_checkpoint(run_paths(cfg).psi_ckpt());
        Checkpoint psi_b = load_checkpoint(run_paths(cfg2).psi_ckpt());
        c.require(psi_a.tensors == psi_b.tensors, "stage-1 checkpoints identical across reruns");
        c.require(deserialize_checkpoint(serialize_checkpoint(psi_a)) == psi_a,
                  "checkpoint round trip is bit-exact");

        // resume: dropping the final CSV but keeping the journal reproduces it
        std::filesystem::remove(run_paths(cfg2).benchmark_csv());
        const auto resume_t0 = std::chrono::steady_clock::now();
        BenchmarkResult resumed = cmd_benchmark(cfg2);
        const double resume_secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - resume_t0).count();
        c.require(strip_runtime_column(resumed.csv_text) == strip_runtime_column(again.csv_text),
                  "resumed benchmark reproduces the CSV from the journal");
        c.require_lt(resume_secs, 30.0, "resume skips completed cells");
    });

    const double total =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - suite_start).count();
    std::printf("%s: %d criterion(s) failed, total %.1fs\n", g_failed == 0 ? "OK" : "FAILED",
                g_failed, total);
    return g_failed == 0 ? 0 : 1;
}
