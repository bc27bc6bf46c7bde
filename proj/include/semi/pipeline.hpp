#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "semi/benchmark.hpp"
#include "semi/checkpoint.hpp"
#include "semi/config.hpp"

namespace semi {

struct RunPaths {
    std::filesystem::path out_dir;

    std::filesystem::path decoder_ckpt() const { return out_dir / "decoder.ckpt"; }
    std::filesystem::path psi_ckpt() const { return out_dir / "psi_star.ckpt"; }
    std::filesystem::path theta_ckpt(const std::string& tag = "") const {
        return out_dir / ("theta" + (tag.empty() ? "" : "_" + tag) + ".ckpt");
    }
    std::filesystem::path stage1_log() const { return out_dir / "stage1_loss.csv"; }
    std::filesystem::path stage2_log(const std::string& tag = "") const {
        return out_dir / ("stage2_loss" + (tag.empty() ? "" : "_" + tag) + ".csv");
    }
    std::filesystem::path benchmark_csv() const { return out_dir / "benchmark.csv"; }
    std::filesystem::path cka_json() const { return out_dir / "cka.json"; }
    std::filesystem::path cells_jsonl() const { return out_dir / "cells.jsonl"; }
    std::filesystem::path ablations_csv() const { return out_dir / "ablations.csv"; }
    std::filesystem::path adapt_csv() const { return out_dir / "adapt.csv"; }
    std::filesystem::path adapted_ckpt(const std::string& tag) const {
        return out_dir / ("adapted_" + tag + ".ckpt");
    }
};

inline RunPaths run_paths(const ExperimentConfig& cfg) { return RunPaths{cfg.out_dir}; }

// every subcommand drops a manifest so CSV/JSON artifacts trace back to the
// exact config and seeds that produced them
inline void write_run_manifest(const ExperimentConfig& cfg) {
    Json manifest{{"config_hash", cfg.config_hash},
                  {"seed", cfg.seed},
                  {"benchmark_seeds", cfg.seeds},
                  {"config", cfg.raw}};
    write_file_atomic(cfg.out_dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::string checkpoint_meta(const ExperimentConfig& cfg) {
    Json meta{{"config_hash", cfg.config_hash},
              {"seed", cfg.seed},
              {"created_unix",
               std::chrono::duration_cast<std::chrono::seconds>(
                   std::chrono::system_clock::now().time_since_epoch())
                   .count()}};
    return meta.dump();
}

inline void warn_on_hash_mismatch(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                  const std::string& what) {
    Json meta = Json::parse(ckpt.meta_json, nullptr, false);
    if (meta.is_discarded() || !meta.contains("config_hash")) return;
    if (meta.at("config_hash") != cfg.config_hash)
        std::cerr << "warning: " << what << " was produced under a different config (hash "
                  << meta.at("config_hash").get<std::string>() << " != " << cfg.config_hash
                  << ")\n";
}

// ---- component (de)serialization ------------------------------------------

inline Checkpoint checkpoint_decoder(const FrozenDecoder& dec, const ExperimentConfig& cfg) {
    Checkpoint ckpt;
    Json meta = Json::parse(checkpoint_meta(cfg));
    meta["decoder"] = {{"d_model", dec.cfg.d_model},     {"n_blocks", dec.cfg.n_blocks},
                       {"ffn_mult", dec.cfg.ffn_mult},   {"prefix_slots", dec.cfg.prefix_slots},
                       {"max_seq", dec.cfg.max_seq},     {"vocab", dec.vocab},
                       {"d_latent", dec.d_latent}};
    ckpt.meta_json = meta.dump();
    ckpt.put_all(dec.to_params());
    return ckpt;
}

inline FrozenDecoder load_decoder(const Checkpoint& ckpt) {
    Json meta = Json::parse(ckpt.meta_json);
    const Json& d = meta.at("decoder");
    FrozenDecoder dec;
    dec.cfg.d_model = d.at("d_model");
    dec.cfg.n_blocks = d.at("n_blocks");
    dec.cfg.ffn_mult = d.at("ffn_mult");
    dec.cfg.prefix_slots = d.at("prefix_slots");
    dec.cfg.max_seq = d.at("max_seq");
    dec.vocab = d.at("vocab");
    dec.d_latent = d.at("d_latent");
    dec.blocks.resize(dec.cfg.n_blocks);
    ParamMap params(ckpt.tensors.begin(), ckpt.tensors.end());
    dec.from_params(params);
    dec.frozen = true;
    return dec;
}

inline Checkpoint checkpoint_projector(const ProjectorParams& psi, const ExperimentConfig& cfg) {
    Checkpoint ckpt;
    Json meta = Json::parse(checkpoint_meta(cfg));
    meta["projector"] = {{"d_in", psi.d_in}, {"d_hid", psi.d_hid}, {"p", psi.p},
                         {"d_d", psi.d_d},   {"dropout", psi.dropout}};
    ckpt.meta_json = meta.dump();
    ckpt.put_all(psi.to_params());
    return ckpt;
}

inline ProjectorParams load_projector(const Checkpoint& ckpt) {
    Json meta = Json::parse(ckpt.meta_json);
    const Json& p = meta.at("projector");
    ProjectorParams psi;
    psi.d_in = p.at("d_in");
    psi.d_hid = p.at("d_hid");
    psi.p = p.at("p");
    psi.d_d = p.at("d_d");
    psi.dropout = p.at("dropout");
    ParamMap params(ckpt.tensors.begin(), ckpt.tensors.end());
    psi.from_params(params);
    return psi;
}

inline Checkpoint checkpoint_hypernet(const HypernetParams& theta, const ExperimentConfig& cfg) {
    Checkpoint ckpt;
    Json meta = Json::parse(checkpoint_meta(cfg));
    meta["hypernet"] = {{"d_h", theta.cfg.d_h},
                        {"context_pairs", theta.cfg.context_pairs},
                        {"supervision_batch", theta.cfg.supervision_batch},
                        {"rank", theta.cfg.rank},
                        {"alpha", theta.cfg.alpha},
                        {"adapter_layers", theta.cfg.adapter_layers},
                        {"backbone_depth", theta.cfg.backbone_depth},
                        {"dropout", theta.cfg.dropout},
                        {"text_grounding", theta.cfg.text_grounding},
                        {"iso_transforms", theta.cfg.iso_transforms},
                        {"context_capacity", theta.cfg.context_capacity},
                        {"d_in", theta.cfg.d_in},
                        {"d_hid", theta.cfg.d_hid},
                        {"out2", theta.cfg.out2}};
    ckpt.meta_json = meta.dump();
    ckpt.put_all(theta.to_params());
    return ckpt;
}

inline HypernetParams load_hypernet(const Checkpoint& ckpt) {
    Json meta = Json::parse(ckpt.meta_json);
    const Json& h = meta.at("hypernet");
    HypernetConfig cfg;
    cfg.d_h = h.at("d_h");
    cfg.context_pairs = h.at("context_pairs");
    cfg.supervision_batch = h.at("supervision_batch");
    cfg.rank = h.at("rank");
    cfg.alpha = h.at("alpha");
    cfg.adapter_layers = h.at("adapter_layers");
    cfg.backbone_depth = h.at("backbone_depth");
    cfg.dropout = h.at("dropout");
    cfg.text_grounding = h.at("text_grounding");
    cfg.iso_transforms = h.at("iso_transforms");
    cfg.context_capacity = h.at("context_capacity");
    cfg.d_in = h.at("d_in");
    cfg.d_hid = h.at("d_hid");
    cfg.out2 = h.at("out2");
    HypernetParams theta = make_hypernet(cfg, 0);
    ParamMap params(ckpt.tensors.begin(), ckpt.tensors.end());
    theta.from_params(params);
    return theta;
}

// ---- shared construction ---------------------------------------------------

inline ConceptWorld build_world_from(const ExperimentConfig& cfg) {
    return ConceptWorld(cfg.world, cfg.seed);
}

inline std::vector<SyntheticEncoder> build_train_encoders(const ExperimentConfig& cfg,
                                                          const ConceptWorld& world) {
    std::vector<SyntheticEncoder> encoders;
    for (int m = 0; m < cfg.n_train_modalities; ++m)
        encoders.push_back(make_encoder(world, cfg.d_h, mix_seed(cfg.seed, 0xE2CULL, m), m));
    return encoders;
}

// loads the frozen decoder, pre-training it first when absent
inline FrozenDecoder ensure_decoder(const ExperimentConfig& cfg, const ConceptWorld& world) {
    const RunPaths paths = run_paths(cfg);
    if (std::filesystem::exists(paths.decoder_ckpt())) {
        Checkpoint ckpt = load_checkpoint(paths.decoder_ckpt());
        warn_on_hash_mismatch(ckpt, cfg, "decoder checkpoint");
        return load_decoder(ckpt);
    }
    FrozenDecoder dec = pretrain_frozen_decoder(world, cfg.decoder, cfg.seed);
    save_checkpoint(paths.decoder_ckpt(), checkpoint_decoder(dec, cfg));
    return dec;
}

inline std::string step_log_csv(const std::vector<StepLogRow>& log) {
    std::string out = "step,modality,loss\n";
    char buf[96];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.10f\n", row.step, row.modality, row.loss);
        out += buf;
    }
    return out;
}

inline std::string stage2_log_csv(const std::vector<Stage2LogRow>& log) {
    std::string out = "step,loss,text_grounding,iso_transforms\n";
    char buf[96];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.10f,%d,%d\n", row.step, row.loss,
                      row.text_grounding ? 1 : 0, row.iso_transforms ? 1 : 0);
        out += buf;
    }
    return out;
}

// ---- stage commands ---------------------------------------------------------

// Stage 1: build the frozen world, pre-train the decoder if needed, train the
// shared projector, and persist psi* plus the loss log. Skips cleanly when
// the artifact already exists.
inline ProjectorParams cmd_stage1(const ExperimentConfig& cfg) {
    write_run_manifest(cfg);
    const RunPaths paths = run_paths(cfg);
    ConceptWorld world = build_world_from(cfg);
    FrozenDecoder decoder = ensure_decoder(cfg, world);
    if (std::filesystem::exists(paths.psi_ckpt())) {
        Checkpoint ckpt = load_checkpoint(paths.psi_ckpt());
        warn_on_hash_mismatch(ckpt, cfg, "psi* checkpoint");
        std::cerr << "stage1: existing checkpoint found, skipping training\n";
        return load_projector(ckpt);
    }
    std::vector<SyntheticEncoder> encoders = build_train_encoders(cfg, world);
    std::vector<StepLogRow> log;
    ProjectorParams psi;
    try {
        psi = pretrain_projector(world, encoders, decoder, cfg.stage1, cfg.stage1_dropout, cfg.seed,
                                 &log);
    } catch (const DivergenceError& e) {
        ProjectorParams last;
        last.d_in = cfg.d_h;
        last.d_hid = cfg.d_hid;
        last.p = cfg.prefix_slots;
        last.d_d = cfg.d_d;
        last.dropout = cfg.stage1_dropout;
        last.from_params(e.last_good);
        save_checkpoint(paths.out_dir / "psi_last_good.ckpt", checkpoint_projector(last, cfg));
        throw;
    }
    save_checkpoint(paths.psi_ckpt(), checkpoint_projector(psi, cfg));
    write_file_atomic(paths.stage1_log(), step_log_csv(log));
    return load_projector(load_checkpoint(paths.psi_ckpt()));
}

// Stage 2: train the hypernetwork against the frozen psi* checkpoint.
inline HypernetParams cmd_stage2(const ExperimentConfig& cfg, const std::string& tag = "",
                                 const HypernetConfig* override_cfg = nullptr,
                                 int override_steps = 0) {
    write_run_manifest(cfg);
    const RunPaths paths = run_paths(cfg);
    if (!std::filesystem::exists(paths.psi_ckpt()))
        throw ConfigError("stage2: psi* checkpoint missing; run stage1 first");
    if (std::filesystem::exists(paths.theta_ckpt(tag))) {
        Checkpoint ckpt = load_checkpoint(paths.theta_ckpt(tag));
        warn_on_hash_mismatch(ckpt, cfg, "theta checkpoint");
        std::cerr << "stage2" << (tag.empty() ? "" : " [" + tag + "]")
                  << ": existing checkpoint found, skipping training\n";
        return load_hypernet(ckpt);
    }
    ConceptWorld world = build_world_from(cfg);
    FrozenDecoder decoder = ensure_decoder(cfg, world);
    ProjectorParams psi = load_projector(load_checkpoint(paths.psi_ckpt()));
    std::vector<SyntheticEncoder> encoders = build_train_encoders(cfg, world);
    FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);

    HypernetConfig hcfg = override_cfg ? *override_cfg : cfg.hypernet;
    HypernetTrainConfig tcfg = cfg.stage2;
    if (override_steps > 0) tcfg.steps = override_steps;
    HypernetParams theta = make_hypernet(hcfg, cfg.seed);
    std::vector<Stage2LogRow> log;
    try {
        theta = train_hypernet(theta, world, encoders, text_enc, psi, decoder, tcfg,
                               mix_seed(cfg.seed, fnv1a(tag.data(), tag.size())), &log);
    } catch (const DivergenceError& e) {
        HypernetParams last = make_hypernet(hcfg, cfg.seed);
        last.from_params(e.last_good);
        save_checkpoint(paths.out_dir / ("theta_last_good" + (tag.empty() ? "" : "_" + tag) + ".ckpt"),
                        checkpoint_hypernet(last, cfg));
        throw;
    }
    save_checkpoint(paths.theta_ckpt(tag), checkpoint_hypernet(theta, cfg));
    write_file_atomic(paths.stage2_log(tag), stage2_log_csv(log));
    return load_hypernet(load_checkpoint(paths.theta_ckpt(tag)));
}

// Single adaptation run on the held-out modality: routes d_e through pruning
// or feature selection, runs one method, evaluates, persists the adapted
// projector and a CSV row.
inline MetricsRow cmd_adapt(const ExperimentConfig& cfg, const std::string& method, int d_e,
                            int shots, std::uint64_t seed) {
    write_run_manifest(cfg);
    const RunPaths paths = run_paths(cfg);
    if (!std::filesystem::exists(paths.psi_ckpt()) || !std::filesystem::exists(paths.theta_ckpt()))
        throw ConfigError("adapt: stage-1/2 checkpoints missing; run stage1 and stage2 first");
    ConceptWorld world = build_world_from(cfg);
    FrozenDecoder decoder = ensure_decoder(cfg, world);
    ProjectorParams psi = load_projector(load_checkpoint(paths.psi_ckpt()));
    HypernetParams theta = load_hypernet(load_checkpoint(paths.theta_ckpt()));
    FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);

    ExperimentConfig cell_cfg = cfg;
    cell_cfg.shots = {shots};
    cell_cfg.seeds = {seed};
    cell_cfg.methods = {method};
    cell_cfg.heldout_dims = {d_e};
    BenchmarkInputs inputs{cell_cfg, world, text_enc, decoder, psi, theta};
    HeldoutModality heldout = build_heldout_modality(cell_cfg, world, text_enc, d_e);
    if (d_e < cfg.d_h)
        std::cerr << "adapt: routing through weight pruning (d_e " << d_e << " < d_h " << cfg.d_h
                  << ")\n";
    else if (d_e > cfg.d_h)
        std::cerr << "adapt: routing through feature selection (d_e " << d_e << " > d_h " << cfg.d_h
                  << ")\n";
    CellResult result = run_benchmark_cell(inputs, heldout, CellKey{d_e, shots, method, seed});

    // persist the adapted projector with the identical input reduction
    if (result.adapted) {
        Checkpoint ckpt = checkpoint_projector(*result.adapted, cfg);
        Json meta = Json::parse(ckpt.meta_json);
        meta["adapt"] = {{"method", method}, {"enc_dim", d_e}, {"shots", shots}, {"seed", seed}};
        if (result.selection) {
            meta["featsel"] = {{"method", result.selection->method},
                               {"indices", result.selection->indices},
                               {"n_fit", result.selection->n_fit},
                               {"d_e", result.selection->d_e},
                               {"d_out", result.selection->d_out}};
            if (result.selection->method == "pca") ckpt.put("featsel.basis", result.selection->basis);
        }
        ckpt.meta_json = meta.dump();
        const std::string tag = method + "_d" + std::to_string(d_e) + "_s" + std::to_string(shots) +
                                "_r" + std::to_string(seed);
        save_checkpoint(paths.adapted_ckpt(tag), ckpt);
    }
    std::string csv = metrics_csv_header() + "\n" + format_metrics_row(result.row) + "\n";
    write_file_atomic(paths.adapt_csv(), csv);
    return result.row;
}

// Full sample-efficiency benchmark; resumable through the cell journal.
inline BenchmarkResult cmd_benchmark(const ExperimentConfig& cfg) {
    write_run_manifest(cfg);
    const RunPaths paths = run_paths(cfg);
    if (!std::filesystem::exists(paths.psi_ckpt()) || !std::filesystem::exists(paths.theta_ckpt()))
        throw ConfigError("benchmark: stage-1/2 checkpoints missing; run stage1 and stage2 first");
    ConceptWorld world = build_world_from(cfg);
    FrozenDecoder decoder = ensure_decoder(cfg, world);
    ProjectorParams psi = load_projector(load_checkpoint(paths.psi_ckpt()));
    HypernetParams theta = load_hypernet(load_checkpoint(paths.theta_ckpt()));
    FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);

    BenchmarkInputs inputs{cfg, world, text_enc, decoder, psi, theta};
    BenchmarkResult result = run_benchmark(inputs, paths.cells_jsonl(), cfg.jobs);
    write_file_atomic(paths.benchmark_csv(), result.csv_text);
    write_file_atomic(paths.cka_json(), result.cka_grid.dump(2) + "\n");
    return result;
}

// Ablation matrix: the four text/isometry toggles, the larger backbone, the
// larger context, the two-layer adapter mode, and single-adapter generation.
struct AblationVariant {
    std::string name;
    bool text_grounding = true;
    bool iso_transforms = true;
    int backbone_depth = 1;
    int context_scale = 1;
    int adapter_layers = 1;
    bool single_adapter = false;
};

inline std::vector<AblationVariant> ablation_matrix() {
    return {
        {"base", true, true, 1, 1, 1, false},
        {"wo_text", false, true, 1, 1, 1, false},
        {"wo_isotransf", true, false, 1, 1, 1, false},
        {"wo_text_isotransf", false, false, 1, 1, 1, false},
        {"larger_hypernet", true, true, 2, 1, 1, false},
        {"larger_ctx", true, true, 1, 2, 1, false},
        {"adapter_layers_2", true, true, 1, 1, 2, false},
        {"single_adapter", true, true, 1, 1, 1, true},
    };
}

inline std::vector<MetricsRow> cmd_ablate(const ExperimentConfig& cfg) {
    write_run_manifest(cfg);
    const RunPaths paths = run_paths(cfg);
    if (!std::filesystem::exists(paths.psi_ckpt()))
        throw ConfigError("ablate: psi* checkpoint missing; run stage1 first");
    ConceptWorld world = build_world_from(cfg);
    FrozenDecoder decoder = ensure_decoder(cfg, world);
    FrozenTextEncoder text_enc = make_text_encoder(world, cfg.d_h);
    ProjectorParams psi = load_projector(load_checkpoint(paths.psi_ckpt()));

    std::vector<MetricsRow> rows;
    const int d_e = cfg.d_h;
    for (const AblationVariant& variant : ablation_matrix()) {
        HypernetConfig hcfg = cfg.hypernet;
        hcfg.text_grounding = variant.text_grounding;
        hcfg.iso_transforms = variant.iso_transforms;
        hcfg.backbone_depth = variant.backbone_depth;
        hcfg.adapter_layers = variant.adapter_layers;
        hcfg.context_pairs = cfg.hypernet.context_pairs * variant.context_scale;
        hcfg.context_capacity =
            std::max(cfg.hypernet.context_capacity, hcfg.episode_len(hcfg.context_pairs) + 1);

        // the single-adapter variant reuses the base variant's hypernetwork
        const std::string tag = variant.single_adapter ? "ablate_base" : "ablate_" + variant.name;
        HypernetParams theta = cmd_stage2(cfg, tag, &hcfg, cfg.ablate_stage2_steps);

        ExperimentConfig cell_cfg = cfg;
        cell_cfg.adapt.single_adapter = variant.single_adapter;
        cell_cfg.shots = {cfg.ablate_shots};
        cell_cfg.seeds = {cfg.ablate_seed};
        BenchmarkInputs inputs{cell_cfg, world, text_enc, decoder, psi, theta};
        HeldoutModality heldout = build_heldout_modality(cell_cfg, world, text_enc, d_e);
        CellResult r = run_benchmark_cell(inputs, heldout,
                                          CellKey{d_e, cfg.ablate_shots, "semi", cfg.ablate_seed});
        r.row.method = variant.name;
        rows.push_back(r.row);
    }
    std::string csv = metrics_csv_header() + "\n";
    for (const auto& row : rows) csv += format_metrics_row(row) + "\n";
    write_file_atomic(paths.ablations_csv(), csv);
    return rows;
}

} // namespace semi
