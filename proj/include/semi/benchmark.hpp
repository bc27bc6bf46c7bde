#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "semi/adapt.hpp"
#include "semi/checkpoint.hpp"
#include "semi/config.hpp"
#include "semi/featsel.hpp"
#include "semi/metrics.hpp"

namespace semi {

struct MetricsRow {
    std::string method;
    std::string modality;
    int enc_dim = 0;
    int shots = 0;
    std::uint64_t seed = 0;
    double token_accuracy = 0.0;
    double bleu4 = 0.0;
    double rougeL = 0.0;
    double runtime_s = 0.0;
};

inline std::string metrics_csv_header() {
    return "method,modality,enc_dim,shots,seed,token_accuracy,bleu4,rougeL,runtime_s";
}

inline std::string format_metrics_row(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%llu,%.6f,%.6f,%.6f,%.3f", r.method.c_str(),
                  r.modality.c_str(), r.enc_dim, r.shots,
                  static_cast<unsigned long long>(r.seed), r.token_accuracy, r.bleu4, r.rougeL,
                  r.runtime_s);
    return buf;
}

inline const char* kCkaStages[4] = {"Encoder", "Pre-Merge", "Post-Merge", "Post-Finetune"};

// Held-out modality bundle: one synthetic encoder over the test concepts plus
// fixed validation/test draws and a per-seed few-shot pool. Few-shot subsets
// are nested prefixes of the pool, so every shot count and every method sees
// byte-identical data.
struct HeldoutModality {
    SyntheticEncoder encoder;
    std::string name;
    std::vector<SamplePair> val_raw;
    std::vector<SamplePair> test_raw;
    std::map<std::uint64_t, std::vector<SamplePair>> pools;
    std::vector<int> instruction;
    DenseMatrix instruction_emb;
};

inline HeldoutModality build_heldout_modality(const ExperimentConfig& cfg, const ConceptWorld& world,
                                              const FrozenTextEncoder& text_enc, int d_e) {
    HeldoutModality h;
    h.encoder = make_encoder(world, d_e, mix_seed(cfg.seed, 0x8E1D0ULL, d_e), 1000 + d_e);
    h.name = "heldout_d" + std::to_string(d_e);
    Rng val_rng(mix_seed(cfg.seed, 0x8E1D1ULL, d_e));
    for (int i = 0; i < cfg.val_size; ++i)
        h.val_raw.push_back(sample_pair(world, h.encoder, world.test_ids(), val_rng));
    Rng test_rng(mix_seed(cfg.seed, 0x8E1D2ULL, d_e));
    for (int i = 0; i < cfg.test_size; ++i)
        h.test_raw.push_back(sample_pair(world, h.encoder, world.test_ids(), test_rng));
    int max_shots = 0;
    for (int s : cfg.shots) max_shots = std::max(max_shots, s);
    for (std::uint64_t seed : cfg.seeds) {
        Rng pool_rng(mix_seed(cfg.seed, 0x8E1D3ULL, d_e, seed));
        std::vector<SamplePair> pool;
        for (int i = 0; i < max_shots; ++i)
            pool.push_back(sample_pair(world, h.encoder, world.test_ids(), pool_rng));
        h.pools.emplace(seed, std::move(pool));
    }
    h.instruction = world.instruction_pool(h.encoder.modality_id)[0];
    h.instruction_emb = text_enc.encode(h.instruction);
    return h;
}

inline std::uint64_t subset_hash(const std::vector<SamplePair>& subset) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& s : subset) {
        h = fnv1a(s.x, h);
        h = fnv1a(s.y.data(), s.y.size() * sizeof(int), h);
        h = fnv1a(&s.concept_id, sizeof(s.concept_id), h);
    }
    return h;
}

struct CellKey {
    int enc_dim = 0;
    int shots = 0;
    std::string method;
    std::uint64_t seed = 0;

    std::string id() const {
        return method + "/d" + std::to_string(enc_dim) + "/s" + std::to_string(shots) + "/r" +
               std::to_string(seed);
    }
};

struct CellResult {
    MetricsRow row;
    std::uint64_t few_hash = 0;
    bool has_cka = false;
    double cka[4] = {0, 0, 0, 0}; // Encoder, Pre-Merge, Post-Merge, Post-Finetune
    // in-memory extras for single-cell callers; not journaled
    std::optional<ProjectorParams> adapted;
    std::optional<FeatureSelection> selection;
};

struct BenchmarkInputs {
    const ExperimentConfig& cfg;
    const ConceptWorld& world;
    const FrozenTextEncoder& text_enc;
    const FrozenDecoder& decoder;
    const ProjectorParams& psi_star;
    const HypernetParams& theta;
};

namespace detail {

inline std::vector<SamplePair> apply_selection(const std::vector<SamplePair>& raw,
                                               const FeatureSelection& fs) {
    std::vector<SamplePair> out = raw;
    for (auto& s : out) s.x = fs.apply(s.x);
    return out;
}

inline DenseMatrix rows_of(const std::vector<SamplePair>& samples,
                           const std::function<DenseMatrix(const SamplePair&)>& fn) {
    DenseMatrix first = fn(samples.front());
    DenseMatrix out(static_cast<int>(samples.size()), first.cols);
    out.set_row(0, first);
    for (std::size_t i = 1; i < samples.size(); ++i) out.set_row(static_cast<int>(i), fn(samples[i]));
    return out;
}

inline DenseMatrix projector_rows(const ProjectorParams& psi, const std::vector<SamplePair>& samples) {
    return rows_of(samples, [&](const SamplePair& s) {
        return project_forward(psi, s.x).reshaped(1, psi.p * psi.d_d);
    });
}

} // namespace detail

// One benchmark grid cell: route the encoder dimensionality, run the method,
// evaluate on the shared test split, and (for the hypernetwork method)
// compute the per-stage CKA values against text embeddings.
inline CellResult run_benchmark_cell(const BenchmarkInputs& in, const HeldoutModality& heldout,
                                     const CellKey& key) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig& cfg = in.cfg;
    const int d_e = key.enc_dim;
    const int d_h = cfg.d_h;

    const auto& pool = heldout.pools.at(key.seed);
    if (key.shots > static_cast<int>(pool.size()))
        throw ConfigError("run_benchmark_cell: shots exceed the generated pool");
    std::vector<SamplePair> few_raw(pool.begin(), pool.begin() + key.shots);

    CellResult result;
    result.few_hash = subset_hash(few_raw);

    // dimensionality routing: prune below d_h, select features above it
    ProjectorParams psi_c = in.psi_star;
    std::optional<FeatureSelection> fs;
    if (d_e < d_h) {
        psi_c = prune_projector(in.psi_star, d_e);
    } else if (d_e > d_h) {
        DenseMatrix few_x(static_cast<int>(few_raw.size()), d_e);
        for (std::size_t i = 0; i < few_raw.size(); ++i)
            few_x.set_row(static_cast<int>(i), few_raw[i].x);
        fs = fit_inffs(few_x, d_h, cfg.featsel_gamma, cfg.featsel_beta);
    }

    const std::vector<SamplePair> few = fs ? detail::apply_selection(few_raw, *fs) : few_raw;
    const std::vector<SamplePair> val = fs ? detail::apply_selection(heldout.val_raw, *fs)
                                           : heldout.val_raw;
    const std::vector<SamplePair> test = fs ? detail::apply_selection(heldout.test_raw, *fs)
                                            : heldout.test_raw;

    FewshotData fewshot;
    fewshot.samples = few;
    fewshot.instruction = heldout.instruction;
    fewshot.instruction_emb = heldout.instruction_emb;

    // method-independent run seed: every method trains with identical batch
    // order and dropout draws, mirroring the shared-seed evaluation protocol
    const std::uint64_t run_seed = mix_seed(cfg.seed, 0xCE11ULL, d_e, mix_seed(key.shots, key.seed));
    ProjectorParams adapted;
    const std::vector<SamplePair>* eval_set = &test;

    if (key.method == "semi") {
        AdaptResult ar = adapt_few_shot(in.theta, psi_c, fewshot, val, in.decoder, in.text_enc,
                                        cfg.adapt, run_seed);
        adapted = ar.final_params;
        result.has_cka = true;
        const DenseMatrix text_y = detail::rows_of(
            test, [&](const SamplePair& s) { return in.text_enc.encode(s.y); });
        const DenseMatrix enc_x = detail::rows_of(
            heldout.test_raw, [](const SamplePair& s) { return s.x; });
        result.cka[0] = linear_cka(enc_x, text_y);
        result.cka[1] = linear_cka(detail::projector_rows(psi_c, test), text_y);
        result.cka[2] = linear_cka(detail::projector_rows(ar.merged, test), text_y);
        result.cka[3] = linear_cka(detail::projector_rows(ar.final_params, test), text_y);
    } else if (key.method == "ft_projector") {
        adapted = baseline_ft_projector(psi_c, fewshot, val, in.decoder, cfg.adapt, run_seed);
    } else if (key.method == "lora") {
        adapted = baseline_lora(psi_c, fewshot, val, in.decoder, in.theta.cfg.rank,
                                in.theta.cfg.alpha, cfg.adapt, run_seed);
    } else if (key.method == "projector") {
        // built directly at the encoder's native width, raw inputs
        FewshotData raw_fewshot;
        raw_fewshot.samples = few_raw;
        raw_fewshot.instruction = heldout.instruction;
        raw_fewshot.instruction_emb = heldout.instruction_emb;
        adapted = baseline_projector_scratch(raw_fewshot, heldout.val_raw, in.decoder, d_e,
                                             cfg.d_hid, cfg.stage1_dropout, cfg.adapt, run_seed);
        eval_set = &heldout.test_raw;
    } else {
        throw ConfigError("run_benchmark_cell: unknown method " + key.method);
    }

    const EvalScores scores = evaluate_projector(adapted, *eval_set, in.decoder,
                                                 heldout.instruction, cfg.adapt.max_decode_len);
    for (double v : {scores.token_acc, scores.bleu, scores.rouge})
        if (v < 0.0 || v > 1.0) throw NumericError("run_benchmark_cell: metric out of [0,1]");

    result.adapted = adapted;
    if (fs) result.selection = *fs;

    result.row.method = key.method;
    result.row.modality = heldout.name;
    result.row.enc_dim = d_e;
    result.row.shots = key.shots;
    result.row.seed = key.seed;
    result.row.token_accuracy = scores.token_acc;
    result.row.bleu4 = scores.bleu;
    result.row.rougeL = scores.rouge;
    result.row.runtime_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

struct BenchmarkResult {
    std::vector<MetricsRow> rows;
    Json cka_grid; // {stage: {modality: mean value over seeds at the largest shot count}}
    std::string csv_text;
};

inline Json cell_to_json(const CellResult& r) {
    Json j{{"method", r.row.method},     {"modality", r.row.modality},
           {"enc_dim", r.row.enc_dim},   {"shots", r.row.shots},
           {"seed", r.row.seed},         {"token_accuracy", r.row.token_accuracy},
           {"bleu4", r.row.bleu4},       {"rougeL", r.row.rougeL},
           {"runtime_s", r.row.runtime_s}, {"few_hash", r.few_hash}};
    if (r.has_cka) j["cka"] = Json::array({r.cka[0], r.cka[1], r.cka[2], r.cka[3]});
    return j;
}

inline CellResult cell_from_json(const Json& j) {
    CellResult r;
    r.row.method = j.at("method");
    r.row.modality = j.at("modality");
    r.row.enc_dim = j.at("enc_dim");
    r.row.shots = j.at("shots");
    r.row.seed = j.at("seed");
    r.row.token_accuracy = j.at("token_accuracy");
    r.row.bleu4 = j.at("bleu4");
    r.row.rougeL = j.at("rougeL");
    r.row.runtime_s = j.at("runtime_s");
    r.few_hash = j.at("few_hash");
    if (j.contains("cka")) {
        r.has_cka = true;
        for (int i = 0; i < 4; ++i) r.cka[i] = j.at("cka")[i];
    }
    return r;
}

// Full evaluation sweep. Grid cells are independent; a bounded worker pool
// runs them and a single writer appends finished cells to `cells_path`, which
// doubles as the resume journal (completed cells are skipped on rerun).
inline BenchmarkResult run_benchmark(const BenchmarkInputs& in,
                                     const std::filesystem::path& cells_path, int jobs = 0) {
    const ExperimentConfig& cfg = in.cfg;

    std::map<std::string, CellResult> done;
    if (!cells_path.empty() && std::filesystem::exists(cells_path)) {
        std::ifstream journal(cells_path);
        std::string line;
        while (std::getline(journal, line)) {
            if (line.empty()) continue;
            Json j = Json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;
            CellResult r = cell_from_json(j);
            done[CellKey{r.row.enc_dim, r.row.shots, r.row.method, r.row.seed}.id()] = r;
        }
    }

    std::map<int, HeldoutModality> heldout;
    for (int d_e : cfg.heldout_dims)
        heldout.emplace(d_e, build_heldout_modality(cfg, in.world, in.text_enc, d_e));

    std::vector<CellKey> todo;
    for (int d_e : cfg.heldout_dims)
        for (int shots : cfg.shots)
            for (const auto& method : cfg.methods)
                for (std::uint64_t seed : cfg.seeds) {
                    CellKey key{d_e, shots, method, seed};
                    if (!done.count(key.id())) todo.push_back(key);
                }

    std::mutex io_mutex;
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= todo.size()) return;
            try {
                CellResult r = run_benchmark_cell(in, heldout.at(todo[i].enc_dim), todo[i]);
                std::lock_guard<std::mutex> lock(io_mutex);
                done[todo[i].id()] = r;
                if (!cells_path.empty()) {
                    std::ofstream journal(cells_path, std::ios::app);
                    journal << cell_to_json(r).dump() << "\n";
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(io_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };

    int n_workers = jobs > 0 ? jobs : static_cast<int>(std::thread::hardware_concurrency());
    n_workers = std::max(1, std::min<int>(n_workers, 8));
    if (!cells_path.empty()) std::filesystem::create_directories(cells_path.parent_path());
    std::vector<std::thread> threads;
    for (int t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);

    BenchmarkResult out;
    for (int d_e : cfg.heldout_dims)
        for (int shots : cfg.shots)
            for (const auto& method : cfg.methods)
                for (std::uint64_t seed : cfg.seeds)
                    out.rows.push_back(done.at(CellKey{d_e, shots, method, seed}.id()).row);

    std::string csv = metrics_csv_header() + "\n";
    for (const auto& row : out.rows) csv += format_metrics_row(row) + "\n";
    out.csv_text = std::move(csv);

    // CKA grid at the largest shot count, seed-averaged, from the hypernetwork cells
    int max_shots = 0;
    for (int s : cfg.shots) max_shots = std::max(max_shots, s);
    Json grid = Json::object();
    for (int stage = 0; stage < 4; ++stage) grid[kCkaStages[stage]] = Json::object();
    for (int d_e : cfg.heldout_dims) {
        double sums[4] = {0, 0, 0, 0};
        int count = 0;
        for (std::uint64_t seed : cfg.seeds) {
            auto it = done.find(CellKey{d_e, max_shots, "semi", seed}.id());
            if (it == done.end() || !it->second.has_cka) continue;
            for (int stage = 0; stage < 4; ++stage) sums[stage] += it->second.cka[stage];
            ++count;
        }
        if (count == 0) continue;
        const std::string name = "heldout_d" + std::to_string(d_e);
        for (int stage = 0; stage < 4; ++stage) grid[kCkaStages[stage]][name] = sums[stage] / count;
    }
    out.cka_grid = grid;
    return out;
}

} // namespace semi
