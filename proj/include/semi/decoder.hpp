#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semi/autodiff.hpp"
#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/ops.hpp"
#include "semi/optim.hpp"
#include "semi/rng.hpp"
#include "semi/world.hpp"

namespace semi {

struct DecoderConfig {
    int d_model = 64;      // decoder width d_d, equals the projector output space
    int n_blocks = 1;      // causal self-attention blocks
    int ffn_mult = 2;
    int prefix_slots = 1;  // P
    int max_seq = 96;      // context capacity
    int train_steps = 6000;
    int batch = 8;
    double lr = 2e-3;
    int warmup_steps = 50;
    int eval_interval = 250;
    double target_exact_match = 0.95;
};

// Tiny causal transformer standing in for the frozen LLM decoder. Pre-trained
// once on (ideal prefix -> caption) pairs, then frozen; every later stage
// treats its weights as constants.
struct FrozenDecoder {
    DecoderConfig cfg;
    int vocab = 0;
    int d_latent = 0;
    bool frozen = false;

    DenseMatrix tok_emb;    // [V x d]
    struct Block {
        DenseMatrix wq, wk, wv, wo;   // [d x d]
        DenseMatrix wf1, wf2;         // [f x d], [d x f]
        DenseMatrix bf1, bf2;         // [1 x f], [1 x d]
    };
    std::vector<Block> blocks;
    DenseMatrix head;       // [V x d]
    DenseMatrix prefix_map; // [P*d x d_latent], the ideal-prefix embedding

    struct Nodes {
        NodeId tok_emb;
        struct B {
            NodeId wq, wk, wv, wo, wf1, wf2, bf1, bf2;
        };
        std::vector<B> blocks;
        NodeId head;
    };

    Nodes lift(GradContext& ctx, bool trainable, const std::string& prefix = "dec.") const {
        Nodes n;
        n.tok_emb = ctx.lift(prefix + "tok_emb", tok_emb, trainable);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            const Block& b = blocks[i];
            n.blocks.push_back({ctx.lift(bp + "wq", b.wq, trainable),
                                ctx.lift(bp + "wk", b.wk, trainable),
                                ctx.lift(bp + "wv", b.wv, trainable),
                                ctx.lift(bp + "wo", b.wo, trainable),
                                ctx.lift(bp + "wf1", b.wf1, trainable),
                                ctx.lift(bp + "wf2", b.wf2, trainable),
                                ctx.lift(bp + "bf1", b.bf1, trainable),
                                ctx.lift(bp + "bf2", b.bf2, trainable)});
        }
        n.head = ctx.lift(prefix + "head", head, trainable);
        return n;
    }

    // x: [L x d] input embeddings without position information. Post-norm
    // blocks: attention and FFN read the raw residual stream, so the decoder
    // has a preferred input scale (the scale its pre-training data had) and
    // off-scale prefixes degrade instead of being silently renormalized.
    NodeId forward_logits(GradContext& ctx, const Nodes& n, NodeId x) const {
        const int len = ctx.value(x).rows;
        if (len > cfg.max_seq) throw ConfigError("FrozenDecoder: sequence exceeds context capacity");
        NodeId h = ctx.add(x, ctx.constant(sinusoidal_pe(len, cfg.d_model)));
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        for (const auto& b : n.blocks) {
            NodeId q = ctx.matmul_nt(h, b.wq);
            NodeId k = ctx.matmul_nt(h, b.wk);
            NodeId v = ctx.matmul_nt(h, b.wv);
            NodeId att = ctx.softmax_rows(ctx.scale(ctx.matmul_nt(q, k), inv_sqrt_d), /*causal=*/true);
            h = ctx.layernorm_rows(ctx.add(h, ctx.matmul_nt(ctx.matmul(att, v), b.wo)));
            NodeId f = ctx.gelu(ctx.add_rowvec(ctx.matmul_nt(h, b.wf1), b.bf1));
            h = ctx.layernorm_rows(ctx.add(h, ctx.add_rowvec(ctx.matmul_nt(f, b.wf2), b.bf2)));
        }
        return ctx.matmul_nt(h, n.head);
    }

    // teacher-forced mean cross entropy of one caption given leading soft rows
    NodeId caption_loss(GradContext& ctx, const Nodes& n, NodeId soft_prefix,
                        const std::vector<int>& caption) const {
        if (caption.empty()) throw InputError("FrozenDecoder: empty caption");
        std::vector<int> inputs = {kBosToken};
        inputs.insert(inputs.end(), caption.begin(), caption.end() - 1);
        const NodeId parts[] = {soft_prefix, ctx.gather_rows(n.tok_emb, inputs)};
        NodeId x = ctx.concat_rows(parts);
        NodeId logits = this->forward_logits(ctx, n, x);
        const int pre = ctx.value(soft_prefix).rows;
        NodeId tail = ctx.slice_rows(logits, pre, pre + static_cast<int>(caption.size()));
        return ctx.cross_entropy_mean(tail, caption);
    }

    DenseMatrix token_embeddings(const std::vector<int>& tokens) const {
        DenseMatrix out(static_cast<int>(tokens.size()), cfg.d_model);
        for (std::size_t i = 0; i < tokens.size(); ++i)
            for (int j = 0; j < cfg.d_model; ++j) out.at(static_cast<int>(i), j) = tok_emb.at(tokens[i], j);
        return out;
    }

    // fixed random linear embedding of a concept latent into the P prefix slots
    DenseMatrix ideal_prefix(const DenseMatrix& latent) const {
        return matmul_nt(latent, prefix_map).reshaped(cfg.prefix_slots, cfg.d_model);
    }

    ParamMap to_params(const std::string& prefix = "dec.") const {
        ParamMap p;
        p[prefix + "tok_emb"] = tok_emb;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            const Block& b = blocks[i];
            p[bp + "wq"] = b.wq;
            p[bp + "wk"] = b.wk;
            p[bp + "wv"] = b.wv;
            p[bp + "wo"] = b.wo;
            p[bp + "wf1"] = b.wf1;
            p[bp + "wf2"] = b.wf2;
            p[bp + "bf1"] = b.bf1;
            p[bp + "bf2"] = b.bf2;
        }
        p[prefix + "head"] = head;
        p[prefix + "prefix_map"] = prefix_map;
        return p;
    }

    void from_params(const ParamMap& p, const std::string& prefix = "dec.") {
        tok_emb = p.at(prefix + "tok_emb");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = prefix + "b" + std::to_string(i) + ".";
            Block& b = blocks[i];
            b.wq = p.at(bp + "wq");
            b.wk = p.at(bp + "wk");
            b.wv = p.at(bp + "wv");
            b.wo = p.at(bp + "wo");
            b.wf1 = p.at(bp + "wf1");
            b.wf2 = p.at(bp + "wf2");
            b.bf1 = p.at(bp + "bf1");
            b.bf2 = p.at(bp + "bf2");
        }
        head = p.at(prefix + "head");
        prefix_map = p.at(prefix + "prefix_map");
    }

    void quantize() {
        ParamMap p = to_params();
        for (auto& [k, v] : p) v = quantize_f32(v);
        from_params(p);
    }
};

inline FrozenDecoder make_decoder_skeleton(const ConceptWorld& world, const DecoderConfig& cfg,
                                           std::uint64_t seed) {
    FrozenDecoder dec;
    dec.cfg = cfg;
    dec.vocab = world.vocab_size();
    dec.d_latent = world.config().d_latent;
    Rng rng(mix_seed(seed, 0xDEC0DEULL));
    const int d = cfg.d_model;
    const int f = cfg.ffn_mult * d;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double res_scale = attn_scale / std::sqrt(2.0 * cfg.n_blocks);
    dec.tok_emb = DenseMatrix::gaussian(world.vocab_size(), d, rng, 0.5);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        FrozenDecoder::Block b;
        b.wq = DenseMatrix::gaussian(d, d, rng, attn_scale);
        b.wk = DenseMatrix::gaussian(d, d, rng, attn_scale);
        b.wv = DenseMatrix::gaussian(d, d, rng, attn_scale);
        b.wo = DenseMatrix::gaussian(d, d, rng, res_scale);
        b.wf1 = DenseMatrix::gaussian(f, d, rng, attn_scale);
        b.wf2 = DenseMatrix::gaussian(d, f, rng, res_scale);
        b.bf1 = DenseMatrix(1, f);
        b.bf2 = DenseMatrix(1, d);
        dec.blocks.push_back(std::move(b));
    }
    dec.head = DenseMatrix::gaussian(world.vocab_size(), d, rng, attn_scale);
    dec.prefix_map = quantize_f32(DenseMatrix::gaussian(
        cfg.prefix_slots * d, world.config().d_latent, rng, 1.0 / std::sqrt(world.config().d_latent)));
    return dec;
}

// argmax decoding; ties resolve to the lowest token index
inline std::vector<int> greedy_decode(const FrozenDecoder& dec, const DenseMatrix& soft_prefix,
                                      int max_len) {
    if (max_len < 1) throw InputError("greedy_decode: max_len must be >= 1");
    std::vector<int> out;
    std::vector<int> fed = {kBosToken};
    while (static_cast<int>(out.size()) < max_len) {
        GradContext ctx;
        const NodeId parts[] = {ctx.constant(soft_prefix),
                                ctx.gather_rows(ctx.constant(dec.tok_emb), fed)};
        NodeId logits = dec.forward_logits(ctx, dec.lift(ctx, false), ctx.concat_rows(parts));
        const DenseMatrix& lv = ctx.value(logits);
        const int last = lv.rows - 1;
        int best = 0;
        for (int j = 1; j < lv.cols; ++j)
            if (lv.at(last, j) > lv.at(last, best)) best = j;
        out.push_back(best);
        if (best == kEosToken) break;
        fed.push_back(best);
    }
    return out;
}

// eval logits for an explicit token tail (used by causality checks)
inline DenseMatrix decoder_logits(const FrozenDecoder& dec, const DenseMatrix& soft_prefix,
                                  const std::vector<int>& tokens) {
    GradContext ctx;
    const NodeId parts[] = {ctx.constant(soft_prefix),
                            ctx.gather_rows(ctx.constant(dec.tok_emb), tokens)};
    NodeId logits = dec.forward_logits(ctx, dec.lift(ctx, false), ctx.concat_rows(parts));
    return ctx.value(logits);
}

namespace detail {
inline std::vector<int> random_instruction(const ConceptWorld& world, Rng& rng) {
    std::vector<int> instr;
    for (int t = 0; t < world.config().instr_len; ++t)
        instr.push_back(kFirstWordToken + rng.uniform_int(world.vocab_size() - kFirstWordToken));
    return instr;
}
} // namespace detail

// exact-match caption reproduction rate over all concepts, decoding from
// ideal prefixes with a per-concept deterministic instruction
inline double decoder_exact_match(const FrozenDecoder& dec, const ConceptWorld& world) {
    int hits = 0;
    for (int k = 0; k < world.config().num_concepts; ++k) {
        Rng irng(mix_seed(world.seed(), 0x1D0CULL, k));
        const std::vector<int> instr = detail::random_instruction(world, irng);
        DenseMatrix soft(dec.cfg.prefix_slots + static_cast<int>(instr.size()), dec.cfg.d_model);
        const DenseMatrix pre = dec.ideal_prefix(world.concept_at(k).latent);
        const DenseMatrix iemb = dec.token_embeddings(instr);
        for (int i = 0; i < pre.rows; ++i) soft.set_row(i, pre.row(i));
        for (int i = 0; i < iemb.rows; ++i) soft.set_row(pre.rows + i, iemb.row(i));
        if (greedy_decode(dec, soft, world.config().max_len) == world.concept_at(k).caption) ++hits;
    }
    return static_cast<double>(hits) / world.config().num_concepts;
}

// Teacher-forced pre-training on (ideal prefix -> caption) pairs over every
// concept; stops once greedy decoding reproduces the target fraction of
// captions, then quantizes and freezes.
inline FrozenDecoder pretrain_frozen_decoder(const ConceptWorld& world, const DecoderConfig& cfg,
                                             std::uint64_t seed) {
    FrozenDecoder dec = make_decoder_skeleton(world, cfg, seed);
    OptimizerConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.beta1 = 0.9;
    ocfg.beta2 = 0.95;
    ocfg.weight_decay = 5e-6;
    ocfg.schedule = LrSchedule::WarmupCosine;
    ocfg.warmup_steps = cfg.warmup_steps;
    ocfg.total_steps = cfg.train_steps;
    AdamW opt(ocfg);
    Rng rng(mix_seed(seed, 0x7124177ULL));

    double best_match = 0.0;
    for (int step = 0; step < cfg.train_steps; ++step) {
        GradContext ctx;
        FrozenDecoder::Nodes nodes = dec.lift(ctx, /*trainable=*/true);
        std::vector<NodeId> losses;
        std::vector<double> weights;
        double total_tokens = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const int k = rng.uniform_int(world.config().num_concepts);
            const std::vector<int> instr = detail::random_instruction(world, rng);
            const NodeId soft_parts[] = {ctx.constant(dec.ideal_prefix(world.concept_at(k).latent)),
                                         ctx.gather_rows(nodes.tok_emb, instr)};
            const auto& caption = world.concept_at(k).caption;
            losses.push_back(dec.caption_loss(ctx, nodes, ctx.concat_rows(soft_parts), caption));
            weights.push_back(static_cast<double>(caption.size()));
            total_tokens += static_cast<double>(caption.size());
        }
        for (auto& w : weights) w /= total_tokens;
        NodeId loss = ctx.weighted_sum(losses, weights);
        const double loss_val = ctx.scalar(loss);
        if (!std::isfinite(loss_val))
            throw TrainingError("pretrain_frozen_decoder: loss diverged at step " + std::to_string(step));
        ctx.backward(loss);
        ParamMap params = dec.to_params();
        params.erase("dec.prefix_map"); // the ideal-prefix map stays fixed
        opt.step(params, ctx.gradients());
        params["dec.prefix_map"] = dec.prefix_map;
        dec.from_params(params);

        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.train_steps) {
            const double match = decoder_exact_match(dec, world);
            best_match = std::max(best_match, match);
            if (match >= cfg.target_exact_match) {
                dec.quantize();
                if (decoder_exact_match(dec, world) >= cfg.target_exact_match) {
                    dec.frozen = true;
                    return dec;
                }
            }
        }
    }
    throw TrainingError("pretrain_frozen_decoder: exact-match target not reached; best fraction " +
                        std::to_string(best_match));
}

} // namespace semi
