#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "semi/adapters.hpp"
#include "semi/autodiff.hpp"
#include "semi/decoder.hpp"
#include "semi/encoders.hpp"
#include "semi/errors.hpp"
#include "semi/haar.hpp"
#include "semi/matrix.hpp"
#include "semi/ops.hpp"
#include "semi/optim.hpp"
#include "semi/projector.hpp"
#include "semi/rng.hpp"
#include "semi/world.hpp"

namespace semi {

struct HypernetConfig {
    int d_h = 64;              // hypernetwork width; equals the text-encoder dim
    int context_pairs = 8;     // S, interleaved (modality, text) pairs per episode
    int supervision_batch = 8; // B, decoder batch per step
    int rank = 8;
    double alpha = 8.0;
    int adapter_layers = 1;    // 2 enables the both-layers ablation
    int backbone_depth = 1;    // attention blocks; 2 is the larger-backbone ablation
    double dropout = 0.1;
    bool text_grounding = true;
    bool iso_transforms = true;
    int context_capacity = 80;
    int d_in = 64;             // projector input width the A head emits
    int d_hid = 64;            // projector hidden width the B head emits
    int out2 = 64;             // projector output width (P*d_d), layer-2 head target

    int n_special() const { return adapter_layers == 2 ? 4 : 2; }
    int episode_len(int s) const { return n_special() + 1 + 2 * s; }

    void validate() const {
        if (adapter_layers != 1 && adapter_layers != 2)
            throw ConfigError("HypernetConfig: adapter_layers must be 1 or 2");
        if (backbone_depth != 1 && backbone_depth != 2)
            throw ConfigError("HypernetConfig: backbone_depth must be 1 or 2");
        if (rank < 1 || rank > std::min(d_in, d_hid))
            throw ConfigError("HypernetConfig: rank out of range");
        if (d_h % 2 != 0) throw ConfigError("HypernetConfig: d_h must be even for sinusoidal PE");
        if (episode_len(context_pairs) > context_capacity)
            throw ConfigError("HypernetConfig: episode exceeds context capacity");
    }
};

// Hypernetwork: learned special-token embeddings, a pre-norm residual
// self-attention backbone, and linear generation heads that emit the LoRA
// factor pair from the contextualized special tokens.
struct HypernetParams {
    HypernetConfig cfg;
    DenseMatrix special; // [n_special x d_h]
    struct Block {
        DenseMatrix wq, wk, wv, wo; // [d_h x d_h]
    };
    std::vector<Block> blocks;
    DenseMatrix head_a;  // [r*d_in x d_h]
    DenseMatrix head_b;  // [d_hid*r x d_h], zero-initialized
    DenseMatrix head_a2; // [r*d_hid x d_h], two-layer mode
    DenseMatrix head_b2; // [out2*r x d_h], two-layer mode, zero-initialized

    struct Nodes {
        NodeId special;
        struct B {
            NodeId wq, wk, wv, wo;
        };
        std::vector<B> blocks;
        NodeId head_a, head_b;
        NodeId head_a2 = -1, head_b2 = -1;
    };

    Nodes lift(GradContext& ctx, bool trainable, const std::string& prefix = "theta.") const {
        Nodes n;
        n.special = ctx.lift(prefix + "special", special, trainable);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            n.blocks.push_back({ctx.lift(bp + "wq", blocks[i].wq, trainable),
                                ctx.lift(bp + "wk", blocks[i].wk, trainable),
                                ctx.lift(bp + "wv", blocks[i].wv, trainable),
                                ctx.lift(bp + "wo", blocks[i].wo, trainable)});
        }
        n.head_a = ctx.lift(prefix + "head_a", head_a, trainable);
        n.head_b = ctx.lift(prefix + "head_b", head_b, trainable);
        if (cfg.adapter_layers == 2) {
            n.head_a2 = ctx.lift(prefix + "head_a2", head_a2, trainable);
            n.head_b2 = ctx.lift(prefix + "head_b2", head_b2, trainable);
        }
        return n;
    }

    ParamMap to_params(const std::string& prefix = "theta.") const {
        ParamMap p;
        p[prefix + "special"] = special;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            p[bp + "wq"] = blocks[i].wq;
            p[bp + "wk"] = blocks[i].wk;
            p[bp + "wv"] = blocks[i].wv;
            p[bp + "wo"] = blocks[i].wo;
        }
        p[prefix + "head_a"] = head_a;
        p[prefix + "head_b"] = head_b;
        if (cfg.adapter_layers == 2) {
            p[prefix + "head_a2"] = head_a2;
            p[prefix + "head_b2"] = head_b2;
        }
        return p;
    }

    void from_params(const ParamMap& p, const std::string& prefix = "theta.") {
        special = p.at(prefix + "special");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            blocks[i].wq = p.at(bp + "wq");
            blocks[i].wk = p.at(bp + "wk");
            blocks[i].wv = p.at(bp + "wv");
            blocks[i].wo = p.at(bp + "wo");
        }
        head_a = p.at(prefix + "head_a");
        head_b = p.at(prefix + "head_b");
        if (cfg.adapter_layers == 2) {
            head_a2 = p.at(prefix + "head_a2");
            head_b2 = p.at(prefix + "head_b2");
        }
    }
};

// head_B starts at zero so the generated delta vanishes before any update;
// head_A starts small-Gaussian.
inline HypernetParams make_hypernet(const HypernetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    HypernetParams theta;
    theta.cfg = cfg;
    Rng rng(mix_seed(seed, 0x87E7AULL));
    theta.special = DenseMatrix::gaussian(cfg.n_special(), cfg.d_h, rng, 0.5);
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
    const double out_scale = attn_scale / std::sqrt(2.0 * cfg.backbone_depth);
    for (int i = 0; i < cfg.backbone_depth; ++i) {
        HypernetParams::Block b;
        b.wq = DenseMatrix::gaussian(cfg.d_h, cfg.d_h, rng, attn_scale);
        b.wk = DenseMatrix::gaussian(cfg.d_h, cfg.d_h, rng, attn_scale);
        b.wv = DenseMatrix::gaussian(cfg.d_h, cfg.d_h, rng, attn_scale);
        b.wo = DenseMatrix::gaussian(cfg.d_h, cfg.d_h, rng, out_scale);
        theta.blocks.push_back(std::move(b));
    }
    theta.head_a = DenseMatrix::gaussian(cfg.rank * cfg.d_in, cfg.d_h, rng, 0.02);
    theta.head_b = DenseMatrix(cfg.d_hid * cfg.rank, cfg.d_h);
    theta.head_a2 = DenseMatrix::gaussian(cfg.rank * cfg.d_hid, cfg.d_h, rng, 0.02);
    theta.head_b2 = DenseMatrix(cfg.out2 * cfg.rank, cfg.d_h);
    return theta;
}

// Conditioning data for one adapter generation: instruction embedding plus S
// interleaved (modality, text) embedding rows, all of width d_h.
struct Episode {
    DenseMatrix instruction; // [1 x d_h]
    std::vector<std::pair<DenseMatrix, DenseMatrix>> pairs;
};

// rows below the special block: [instruction, mod_1, txt_1, ..., mod_S, txt_S]
inline DenseMatrix episode_rest(const Episode& e, int d_h) {
    if (e.instruction.cols != d_h) throw InputError("episode_rest: instruction width mismatch");
    DenseMatrix rest(1 + 2 * static_cast<int>(e.pairs.size()), d_h);
    rest.set_row(0, e.instruction);
    for (std::size_t i = 0; i < e.pairs.size(); ++i) {
        if (e.pairs[i].first.cols != d_h || e.pairs[i].second.cols != d_h)
            throw InputError("episode_rest: pair width mismatch");
        rest.set_row(1 + 2 * static_cast<int>(i), e.pairs[i].first);
        rest.set_row(2 + 2 * static_cast<int>(i), e.pairs[i].second);
    }
    return rest;
}

// full sequence [special_1..n, instruction, (mod, txt)_1..S] with sinusoidal
// position encodings added element-wise
inline DenseMatrix build_episode(const DenseMatrix& special, const Episode& e, int capacity) {
    const int d_h = special.cols;
    const DenseMatrix rest = episode_rest(e, d_h);
    const int len = special.rows + rest.rows;
    if (len > capacity) throw ConfigError("build_episode: sequence exceeds context capacity");
    DenseMatrix seq(len, d_h);
    for (int i = 0; i < special.rows; ++i) seq.set_row(i, special.row(i));
    for (int i = 0; i < rest.rows; ++i) seq.set_row(special.rows + i, rest.row(i));
    return add(seq, sinusoidal_pe(len, d_h));
}

struct GeneratedDeltaNodes {
    NodeId a = -1, b = -1;
    NodeId delta = -1;  // (alpha/r) B A, ready to add onto W1
    NodeId a2 = -1, b2 = -1;
    NodeId delta2 = -1; // layer-2 delta in two-layer mode
};

// Single forward pass: pre-norm residual self-attention over the episode,
// then the generation heads read the contextualized special tokens.
// `use_pe=false` is a diagnostic mode for permutation-invariance checks.
inline GeneratedDeltaNodes hypernet_generate(GradContext& ctx, const HypernetParams& theta,
                                             const HypernetParams::Nodes& nodes,
                                             const Episode& episode, bool train = false,
                                             Rng* dropout_rng = nullptr, bool use_pe = true) {
    const HypernetConfig& cfg = theta.cfg;
    const DenseMatrix rest = episode_rest(episode, cfg.d_h);
    const int len = cfg.n_special() + rest.rows;
    if (len > cfg.context_capacity) throw ConfigError("hypernet_generate: context capacity exceeded");

    const NodeId parts[] = {nodes.special, ctx.constant(rest)};
    NodeId h = ctx.concat_rows(parts);
    if (use_pe) h = ctx.add(h, ctx.constant(sinusoidal_pe(len, cfg.d_h)));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
    for (const auto& b : nodes.blocks) {
        NodeId hn = ctx.layernorm_rows(h);
        NodeId q = ctx.matmul_nt(hn, b.wq);
        NodeId k = ctx.matmul_nt(hn, b.wk);
        NodeId v = ctx.matmul_nt(hn, b.wv);
        NodeId att = ctx.softmax_rows(ctx.scale(ctx.matmul_nt(q, k), inv_sqrt_d));
        NodeId mixed = ctx.matmul_nt(ctx.matmul(att, v), b.wo);
        if (train && cfg.dropout > 0.0) {
            if (!dropout_rng) throw InputError("hypernet_generate: train mode needs a dropout rng");
            mixed = ctx.dropout(mixed, cfg.dropout, *dropout_rng);
        }
        h = ctx.add(h, mixed);
    }

    GeneratedDeltaNodes out;
    NodeId s1 = ctx.slice_rows(h, 0, 1);
    NodeId s2 = ctx.slice_rows(h, 1, 2);
    out.a = ctx.reshape(ctx.matmul_nt(s1, nodes.head_a), cfg.rank, cfg.d_in);
    out.b = ctx.reshape(ctx.matmul_nt(s2, nodes.head_b), cfg.d_hid, cfg.rank);
    out.delta = ctx.scale(ctx.matmul(out.b, out.a), cfg.alpha / cfg.rank);
    if (cfg.adapter_layers == 2) {
        NodeId s3 = ctx.slice_rows(h, 2, 3);
        NodeId s4 = ctx.slice_rows(h, 3, 4);
        out.a2 = ctx.reshape(ctx.matmul_nt(s3, nodes.head_a2), cfg.rank, cfg.d_hid);
        out.b2 = ctx.reshape(ctx.matmul_nt(s4, nodes.head_b2), cfg.out2, cfg.rank);
        out.delta2 = ctx.scale(ctx.matmul(out.b2, out.a2), cfg.alpha / cfg.rank);
    }
    return out;
}

struct GeneratedAdapter {
    LoraAdapter layer1;
    std::optional<LoraAdapter> layer2;
};

// evaluation-mode generation: theta frozen, no dropout
inline GeneratedAdapter hypernet_forward(const HypernetParams& theta, const Episode& episode,
                                         bool use_pe = true) {
    GradContext ctx;
    auto nodes = theta.lift(ctx, false);
    auto gen = hypernet_generate(ctx, theta, nodes, episode, false, nullptr, use_pe);
    if (!ctx.value(gen.a).all_finite() || !ctx.value(gen.b).all_finite())
        throw NumericError("hypernet_forward: non-finite activations");
    GeneratedAdapter out;
    out.layer1 = LoraAdapter(ctx.value(gen.a), ctx.value(gen.b), theta.cfg.rank, theta.cfg.alpha);
    if (theta.cfg.adapter_layers == 2)
        out.layer2 = LoraAdapter(ctx.value(gen.a2), ctx.value(gen.b2), theta.cfg.rank, theta.cfg.alpha);
    return out;
}

// Episode assembly used by stage 2 and stage 3. Modality embeddings narrower
// than d_h are zero-padded; wider ones must be reduced before they get here.
inline DenseMatrix fit_width(const DenseMatrix& row, int d_h) {
    if (row.cols == d_h) return row;
    if (row.cols > d_h) throw InputError("fit_width: embedding wider than d_h; reduce it first");
    DenseMatrix out(1, d_h);
    for (int j = 0; j < row.cols; ++j) out.at(0, j) = row.at(0, j);
    return out;
}

inline Episode assemble_episode(const DenseMatrix& instruction_emb,
                                const std::vector<const SamplePair*>& pairs,
                                const FrozenTextEncoder& text_enc, int d_h, bool text_grounding,
                                const IsometricTransform* q = nullptr) {
    Episode ep;
    ep.instruction = text_grounding ? instruction_emb : DenseMatrix(1, d_h);
    for (const SamplePair* s : pairs) {
        DenseMatrix mod = q ? q->apply_rows(s->x) : s->x;
        mod = fit_width(mod, d_h);
        DenseMatrix txt = text_grounding ? text_enc.encode(s->y) : DenseMatrix(1, d_h);
        ep.pairs.emplace_back(std::move(mod), std::move(txt));
    }
    return ep;
}


struct HypernetTrainConfig {
    int steps = 1500;
    double lr = 1e-3;
    int warmup_steps = 100;
    int snapshot_interval = 50;
    int eval_interval = 100; // model selection cadence
    int eval_batches = 8;
    bool model_selection = true; // keep the best merged-quality checkpoint

    OptimizerConfig optimizer() const {
        OptimizerConfig o;
        o.lr = lr;
        o.beta1 = 0.9;
        o.beta2 = 0.95;
        o.weight_decay = 5e-6;
        o.schedule = LrSchedule::WarmupCosine;
        o.warmup_steps = warmup_steps;
        o.total_steps = steps;
        return o;
    }
};

struct Stage2LogRow {
    int step = 0;
    double loss = 0.0;
    bool text_grounding = true;
    bool iso_transforms = true;
};

// One stage-2 objective evaluation: given a conditioning episode and a
// supervision batch (already transformed by the same Q), generate the delta,
// apply it to the frozen psi*, and take the decoder cross entropy.
inline NodeId stage2_step_loss(GradContext& ctx, const HypernetParams& theta,
                               const HypernetParams::Nodes& theta_nodes,
                               const ProjectorParams& psi, const FrozenDecoder& decoder,
                               const Episode& episode,
                               const std::vector<const SamplePair*>& supervision,
                               const DenseMatrix& supervision_x, // [B x d_in], Q applied
                               const std::vector<int>& instr_tokens, bool train, Rng* rng) {
    auto gen = hypernet_generate(ctx, theta, theta_nodes, episode, train, rng);
    auto psi_nodes = psi.lift(ctx, /*trainable=*/false);
    auto dec_nodes = decoder.lift(ctx, /*trainable=*/false);
    NodeId prefixes = projector_forward(ctx, psi, psi_nodes, ctx.constant(supervision_x), gen.delta,
                                        gen.delta2, train, rng);
    std::vector<NodeId> losses;
    std::vector<double> weights;
    double total_tokens = 0.0;
    for (std::size_t b = 0; b < supervision.size(); ++b) {
        NodeId row = ctx.slice_rows(prefixes, static_cast<int>(b), static_cast<int>(b) + 1);
        losses.push_back(projected_caption_loss(ctx, decoder, dec_nodes, psi, row, instr_tokens,
                                                supervision[b]->y));
        weights.push_back(static_cast<double>(supervision[b]->y.size()));
        total_tokens += weights.back();
    }
    for (auto& w : weights) w /= total_tokens;
    return ctx.weighted_sum(losses, weights);
}

// Stage-1 objective on the same batch with the plain projector; used to pin
// the zero-init contract (step-0 stage-2 loss == this).
inline double stage1_batch_loss(const ProjectorParams& psi, const FrozenDecoder& decoder,
                                const std::vector<const SamplePair*>& supervision,
                                const DenseMatrix& supervision_x,
                                const std::vector<int>& instr_tokens) {
    GradContext ctx;
    auto psi_nodes = psi.lift(ctx, false);
    auto dec_nodes = decoder.lift(ctx, false);
    NodeId prefixes = projector_forward(ctx, psi, psi_nodes, ctx.constant(supervision_x));
    std::vector<NodeId> losses;
    std::vector<double> weights;
    double total_tokens = 0.0;
    for (std::size_t b = 0; b < supervision.size(); ++b) {
        NodeId row = ctx.slice_rows(prefixes, static_cast<int>(b), static_cast<int>(b) + 1);
        losses.push_back(projected_caption_loss(ctx, decoder, dec_nodes, psi, row, instr_tokens,
                                                supervision[b]->y));
        weights.push_back(static_cast<double>(supervision[b]->y.size()));
        total_tokens += weights.back();
    }
    for (auto& w : weights) w /= total_tokens;
    return ctx.scalar(ctx.weighted_sum(losses, weights));
}

struct Stage2Batch {
    Episode episode;
    std::vector<SamplePair> conditioning;
    std::vector<SamplePair> supervision;
    std::vector<const SamplePair*> supervision_view;
    DenseMatrix supervision_x;
    std::vector<int> instr_tokens;
};

// Draws one full stage-2 step: modality, instruction, conditioning sample,
// supervision batch, and the per-step isometry applied to both.
inline Stage2Batch draw_stage2_batch(const ConceptWorld& world,
                                     const std::vector<SyntheticEncoder>& encoders,
                                     const FrozenTextEncoder& text_enc, const HypernetConfig& cfg,
                                     Rng& rng, const IsometricTransform* q,
                                     const std::vector<int>* concept_split = nullptr) {
    Stage2Batch out;
    const int m = rng.uniform_int(static_cast<int>(encoders.size()));
    const auto& enc = encoders[m];
    const auto pool = world.instruction_pool(enc.modality_id);
    out.instr_tokens = pool[rng.uniform_int(static_cast<int>(pool.size()))];

    const std::vector<int>& split = concept_split ? *concept_split : world.train_ids();
    for (int i = 0; i < cfg.context_pairs; ++i)
        out.conditioning.push_back(sample_pair(world, enc, split, rng));
    for (int b = 0; b < cfg.supervision_batch; ++b)
        out.supervision.push_back(sample_pair(world, enc, split, rng));

    std::vector<const SamplePair*> cond_view;
    for (const auto& s : out.conditioning) cond_view.push_back(&s);
    const DenseMatrix instr_emb = text_enc.encode(out.instr_tokens);
    out.episode = assemble_episode(instr_emb, cond_view, text_enc, cfg.d_h, cfg.text_grounding, q);

    out.supervision_x = DenseMatrix(cfg.supervision_batch, enc.out_dim);
    for (int b = 0; b < cfg.supervision_batch; ++b) {
        DenseMatrix x = q ? q->apply_rows(out.supervision[b].x) : out.supervision[b].x;
        out.supervision_x.set_row(b, x);
    }
    for (const auto& s : out.supervision) out.supervision_view.push_back(&s);
    return out;
}

// Deterministic stage-2 validation objective: fixed episodes drawn from fresh
// samples (train concepts by default, or any concept split), evaluated
// without dropout.
inline double hypernet_validation_loss(const HypernetParams& theta, const ConceptWorld& world,
                                       const std::vector<SyntheticEncoder>& encoders,
                                       const FrozenTextEncoder& text_enc, const ProjectorParams& psi,
                                       const FrozenDecoder& decoder, int n_batches,
                                       std::uint64_t seed,
                                       const std::vector<int>* concept_split = nullptr,
                                       bool use_iso = true) {
    double total = 0.0;
    for (int i = 0; i < n_batches; ++i) {
        Rng rng(mix_seed(seed, 0x7A1ULL, i));
        std::optional<IsometricTransform> q;
        if (use_iso && theta.cfg.iso_transforms)
            q.emplace(sample_haar_orthogonal(theta.cfg.d_h, mix_seed(seed, 0x7A2ULL, i)));
        Stage2Batch batch = draw_stage2_batch(world, encoders, text_enc, theta.cfg, rng,
                                              q ? &*q : nullptr, concept_split);
        GradContext ctx;
        auto theta_nodes = theta.lift(ctx, false);
        NodeId loss = stage2_step_loss(ctx, theta, theta_nodes, psi, decoder, batch.episode,
                                       batch.supervision_view, batch.supervision_x,
                                       batch.instr_tokens, /*train=*/false, nullptr);
        total += ctx.scalar(loss);
    }
    return total / n_batches;
}

// Stage-2 training (the decoder, encoders, text encoder and psi* all frozen).
// A fresh Haar orthogonal map is drawn every step when iso_transforms is on;
// q_seeds records one seed per step for the no-repeat bookkeeping property.
inline HypernetParams train_hypernet(HypernetParams theta, const ConceptWorld& world,
                                     const std::vector<SyntheticEncoder>& encoders,
                                     const FrozenTextEncoder& text_enc, const ProjectorParams& psi,
                                     const FrozenDecoder& decoder, const HypernetTrainConfig& tcfg,
                                     std::uint64_t seed, std::vector<Stage2LogRow>* log = nullptr,
                                     std::vector<std::uint64_t>* q_seeds = nullptr) {
    const HypernetConfig& cfg = theta.cfg;
    cfg.validate();
    for (const auto& enc : encoders)
        if (enc.out_dim != cfg.d_h)
            throw ConfigError("train_hypernet: training encoders must have out_dim == d_h");
    if (psi.d_in != cfg.d_in || psi.d_hid != cfg.d_hid)
        throw ConfigError("train_hypernet: psi* does not match the generation head shapes");

    AdamW opt(tcfg.optimizer());
    Rng rng(mix_seed(seed, 0x57A6E2ULL));
    ParamMap last_good = theta.to_params();
    int last_good_step = 0;

    // Model selection mirrors the downstream use: on validation encoders
    // (fresh random maps never trained on, over held-out concepts), generate
    // an adapter from a fixed conditioning set, merge it into psi*, and score
    // the merged projector on fresh samples. The delta-zero init is always a
    // candidate, so a run whose adapters never transfer falls back to psi*.
    const std::uint64_t val_seed = mix_seed(seed, 0x5E1EC7ULL);
    auto merged_probe_loss = [&](const HypernetParams& t, const SyntheticEncoder& enc,
                                 const std::vector<int>& split, std::uint64_t probe_seed,
                                 const IsometricTransform* q) {
        const auto pool = world.instruction_pool(enc.modality_id);
        Rng rng(probe_seed);
        std::vector<SamplePair> conditioning;
        for (int i = 0; i < cfg.context_pairs; ++i) {
            conditioning.push_back(sample_pair(world, enc, split, rng));
            if (q) conditioning.back().x = q->apply_rows(conditioning.back().x);
        }
        std::vector<const SamplePair*> cond_view;
        for (const auto& s : conditioning) cond_view.push_back(&s);
        const Episode episode = assemble_episode(text_enc.encode(pool[0]), cond_view, text_enc,
                                                 cfg.d_h, cfg.text_grounding);
        GeneratedAdapter gen = hypernet_forward(t, episode);
        ProjectorParams merged = merge(psi, lora_delta(gen.layer1));
        if (gen.layer2) axpy(merged.w2, 1.0, lora_delta(*gen.layer2));
        std::vector<SamplePair> probe;
        for (int i = 0; i < 2 * tcfg.eval_batches; ++i) {
            probe.push_back(sample_pair(world, enc, split, rng));
            if (q) probe.back().x = q->apply_rows(probe.back().x);
        }
        std::vector<const SamplePair*> probe_view;
        DenseMatrix probe_x(static_cast<int>(probe.size()), cfg.d_h);
        for (std::size_t i = 0; i < probe.size(); ++i) {
            probe_view.push_back(&probe[i]);
            probe_x.set_row(static_cast<int>(i), probe[i].x);
        }
        return stage1_batch_loss(merged, decoder, probe_view, probe_x, pool[0]);
    };
    auto selection_loss = [&](const HypernetParams& t) {
        double total = 0.0;
        // stage-3-like probes: unseen encoders, no isometry
        for (int j = 0; j < 3; ++j) {
            SyntheticEncoder val_enc =
                make_encoder(world, cfg.d_h, mix_seed(val_seed, 0xE4CULL, j), 900 + j);
            total += merged_probe_loss(t, val_enc, world.val_ids(), mix_seed(val_seed, 0xF00DULL, j),
                                       nullptr);
        }
        // in-distribution probes: training encoders under fresh isometries
        std::optional<IsometricTransform> qs[3];
        for (int j = 0; j < 3; ++j) {
            if (cfg.iso_transforms)
                qs[j].emplace(sample_haar_orthogonal(cfg.d_h, mix_seed(val_seed, 0x9A4ULL, j)));
            total += merged_probe_loss(t, encoders[j % encoders.size()], world.train_ids(),
                                       mix_seed(val_seed, 0xF00EULL, j), qs[j] ? &*qs[j] : nullptr);
        }
        return total / 6.0;
    };
    HypernetParams best = theta;
    double best_val = selection_loss(theta);

    for (int step = 0; step < tcfg.steps; ++step) {
        std::optional<IsometricTransform> q;
        if (cfg.iso_transforms) {
            const std::uint64_t qseed = mix_seed(seed, 0x0A4FULL, step);
            if (q_seeds) q_seeds->push_back(qseed);
            q.emplace(sample_haar_orthogonal(cfg.d_h, qseed));
        }
        Stage2Batch batch = draw_stage2_batch(world, encoders, text_enc, cfg, rng,
                                              q ? &*q : nullptr);

        GradContext ctx;
        auto theta_nodes = theta.lift(ctx, /*trainable=*/true);
        NodeId loss = stage2_step_loss(ctx, theta, theta_nodes, psi, decoder, batch.episode,
                                       batch.supervision_view, batch.supervision_x,
                                       batch.instr_tokens, /*train=*/true, &rng);
        const double loss_val = ctx.scalar(loss);
        if (!std::isfinite(loss_val))
            throw DivergenceError("train_hypernet: loss diverged", std::move(last_good),
                                  last_good_step);
        if (log) log->push_back({step, loss_val, cfg.text_grounding, cfg.iso_transforms});

        ctx.backward(loss);
        ParamMap params = theta.to_params();
        opt.step(params, ctx.gradients());
        theta.from_params(params);

        if ((step + 1) % tcfg.snapshot_interval == 0) {
            last_good = theta.to_params();
            last_good_step = step + 1;
        }
        if (tcfg.model_selection && ((step + 1) % tcfg.eval_interval == 0 || step + 1 == tcfg.steps)) {
            const double v = selection_loss(theta);
            if (v < best_val) {
                best_val = v;
                best = theta;
            }
        }
    }
    return tcfg.model_selection ? best : theta;
}


} // namespace semi
