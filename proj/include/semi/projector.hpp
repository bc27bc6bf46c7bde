#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semi/adapters.hpp"
#include "semi/autodiff.hpp"
#include "semi/decoder.hpp"
#include "semi/encoders.hpp"
#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/optim.hpp"
#include "semi/rng.hpp"
#include "semi/world.hpp"

namespace semi {

// Shared two-layer GELU MLP between encoder space and decoder prefix space.
// Weights are stored [out x in]; row vectors multiply as x * W^T.
struct ProjectorParams {
    DenseMatrix w1; // [d_hid x d_in]
    DenseMatrix b1; // [1 x d_hid]
    DenseMatrix w2; // [P*d_d x d_hid]
    DenseMatrix b2; // [1 x P*d_d]
    double dropout = 0.1;
    int d_in = 0, d_hid = 0, p = 1, d_d = 0;

    struct Nodes {
        NodeId w1, b1, w2, b2;
    };

    Nodes lift(GradContext& ctx, bool trainable, const std::string& prefix = "psi.") const {
        return {ctx.lift(prefix + "w1", w1, trainable), ctx.lift(prefix + "b1", b1, trainable),
                ctx.lift(prefix + "w2", w2, trainable), ctx.lift(prefix + "b2", b2, trainable)};
    }

    ParamMap to_params(const std::string& prefix = "psi.") const {
        return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
    }

    void from_params(const ParamMap& p_in, const std::string& prefix = "psi.") {
        w1 = p_in.at(prefix + "w1");
        b1 = p_in.at(prefix + "b1");
        w2 = p_in.at(prefix + "w2");
        b2 = p_in.at(prefix + "b2");
    }
};

inline ProjectorParams make_projector(int d_in, int d_hid, int p, int d_d, double dropout,
                                      std::uint64_t seed) {
    ProjectorParams psi;
    psi.d_in = d_in;
    psi.d_hid = d_hid;
    psi.p = p;
    psi.d_d = d_d;
    psi.dropout = dropout;
    Rng rng(mix_seed(seed, 0x9120ULL));
    psi.w1 = DenseMatrix::gaussian(d_hid, d_in, rng, 1.0 / std::sqrt(d_in));
    psi.b1 = DenseMatrix(1, d_hid);
    psi.w2 = DenseMatrix::gaussian(p * d_d, d_hid, rng, 1.0 / std::sqrt(d_hid));
    psi.b2 = DenseMatrix(1, p * d_d);
    return psi;
}

// x: [B x d_in] -> [B x P*d_d]. delta (optional, scaled) adds onto W1;
// delta2 (two-layer adapter mode) adds onto W2. Dropout only in train mode.
inline NodeId projector_forward(GradContext& ctx, const ProjectorParams& psi,
                                const ProjectorParams::Nodes& nodes, NodeId x,
                                NodeId delta = -1, NodeId delta2 = -1, bool train = false,
                                Rng* dropout_rng = nullptr) {
    if (ctx.value(x).cols != psi.d_in) throw ConfigError("projector_forward: input width mismatch");
    NodeId w1 = delta >= 0 ? ctx.add(nodes.w1, delta) : nodes.w1;
    NodeId w2 = delta2 >= 0 ? ctx.add(nodes.w2, delta2) : nodes.w2;
    NodeId h = ctx.gelu(ctx.add_rowvec(ctx.matmul_nt(x, w1), nodes.b1));
    if (train && psi.dropout > 0.0) {
        if (!dropout_rng) throw InputError("projector_forward: train mode needs a dropout rng");
        h = ctx.dropout(h, psi.dropout, *dropout_rng);
    }
    return ctx.add_rowvec(ctx.matmul_nt(h, w2), nodes.b2);
}

// Spec-facing single-input forward: [1 x d_in] -> prefix block [P x d_d].
inline DenseMatrix project_forward(const ProjectorParams& psi, const DenseMatrix& x,
                                   const LoraAdapter* adapter = nullptr, bool train = false,
                                   Rng* dropout_rng = nullptr) {
    GradContext ctx;
    auto nodes = psi.lift(ctx, false);
    NodeId delta = -1;
    if (adapter) {
        if (adapter->a.cols != psi.d_in || adapter->b.rows != psi.d_hid)
            throw ConfigError("project_forward: adapter does not fit W1");
        delta = ctx.constant(lora_delta(*adapter));
    }
    NodeId out = projector_forward(ctx, psi, nodes, ctx.constant(x), delta, -1, train, dropout_rng);
    return ctx.value(out).reshaped(psi.p * x.rows, psi.d_d);
}

// W1 keeps its first d_e input columns; everything else is untouched.
inline ProjectorParams prune_projector(const ProjectorParams& psi, int d_e) {
    if (d_e >= psi.d_in)
        throw InputError("prune_projector: d_e must be strictly below d_in; use feature selection");
    if (d_e < 1) throw InputError("prune_projector: d_e must be >= 1");
    ProjectorParams out = psi;
    out.w1 = psi.w1.left_cols(d_e);
    out.d_in = d_e;
    return out;
}

// merge: W1 <- W1 + delta_bar, other parameters copied (adapters module op)
inline ProjectorParams merge(const ProjectorParams& psi, const DenseMatrix& delta_bar) {
    if (!delta_bar.same_shape(psi.w1)) throw ConfigError("merge: delta shape must match W1");
    ProjectorParams out = psi;
    axpy(out.w1, 1.0, delta_bar);
    return out;
}

struct ProjectorTrainConfig {
    int steps = 2000;
    int batch = 8;
    double lr = 2e-3;
    int warmup_steps = 100;
    int snapshot_interval = 50;

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

struct StepLogRow {
    int step = 0;
    int modality = -1;
    double loss = 0.0;
};

// Builds decoder input rows for one sample and returns its caption loss node.
// Layout: projected prefix block, then instruction token embeddings, then the
// teacher-forced caption (handled inside the decoder).
inline NodeId projected_caption_loss(GradContext& ctx, const FrozenDecoder& dec,
                                     const FrozenDecoder::Nodes& dec_nodes,
                                     const ProjectorParams& psi, NodeId prefix_flat_row,
                                     const std::vector<int>& instr, const std::vector<int>& caption) {
    NodeId prefix_rows = ctx.reshape(prefix_flat_row, psi.p, psi.d_d);
    const NodeId parts[] = {prefix_rows, ctx.gather_rows(dec_nodes.tok_emb, instr)};
    return dec.caption_loss(ctx, dec_nodes, ctx.concat_rows(parts), caption);
}

// Stage-1 training: the decoder and encoders stay frozen, gradients reach only
// the projector. One modality is drawn per step and a batch of its pairs is
// teacher-forced through the decoder.
inline ProjectorParams pretrain_projector(const ConceptWorld& world,
                                          const std::vector<SyntheticEncoder>& encoders,
                                          const FrozenDecoder& decoder,
                                          const ProjectorTrainConfig& cfg, double dropout,
                                          std::uint64_t seed,
                                          std::vector<StepLogRow>* log = nullptr) {
    if (encoders.size() < 2) throw ConfigError("pretrain_projector: need at least 2 training modalities");
    const int d_in = encoders.front().out_dim;
    for (const auto& e : encoders)
        if (e.out_dim != d_in) throw ConfigError("pretrain_projector: training encoders must share d_e");

    ProjectorParams psi = make_projector(d_in, decoder.cfg.d_model, decoder.cfg.prefix_slots,
                                         decoder.cfg.d_model, dropout, seed);
    AdamW opt(cfg.optimizer());
    Rng rng(mix_seed(seed, 0x57A6E1ULL));
    ParamMap last_good = psi.to_params();
    int last_good_step = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        const int m = rng.uniform_int(static_cast<int>(encoders.size()));
        const auto pool = world.instruction_pool(encoders[m].modality_id);

        GradContext ctx;
        auto psi_nodes = psi.lift(ctx, /*trainable=*/true);
        auto dec_nodes = decoder.lift(ctx, /*trainable=*/false);

        DenseMatrix xb(cfg.batch, d_in);
        std::vector<SamplePair> samples;
        for (int b = 0; b < cfg.batch; ++b) {
            samples.push_back(sample_pair(world, encoders[m], world.train_ids(), rng));
            xb.set_row(b, samples.back().x);
        }
        NodeId prefixes = projector_forward(ctx, psi, psi_nodes, ctx.constant(xb), -1, -1,
                                            /*train=*/true, &rng);
        std::vector<NodeId> losses;
        std::vector<double> weights;
        double total_tokens = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& instr = pool[rng.uniform_int(static_cast<int>(pool.size()))];
            NodeId row = ctx.slice_rows(prefixes, b, b + 1);
            losses.push_back(projected_caption_loss(ctx, decoder, dec_nodes, psi, row, instr,
                                                    samples[b].y));
            weights.push_back(static_cast<double>(samples[b].y.size()));
            total_tokens += weights.back();
        }
        for (auto& w : weights) w /= total_tokens;
        NodeId loss = ctx.weighted_sum(losses, weights);
        const double loss_val = ctx.scalar(loss);
        if (!std::isfinite(loss_val))
            throw DivergenceError("pretrain_projector: loss diverged", std::move(last_good),
                                  last_good_step);
        if (log) log->push_back({step, encoders[m].modality_id, loss_val});

        ctx.backward(loss);
        ParamMap params = psi.to_params();
        opt.step(params, ctx.gradients());
        psi.from_params(params);

        if ((step + 1) % cfg.snapshot_interval == 0) {
            last_good = psi.to_params();
            last_good_step = step + 1;
        }
    }
    return psi;
}

} // namespace semi
