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
#include "semi/hypernet.hpp"
#include "semi/matrix.hpp"
#include "semi/metrics.hpp"
#include "semi/optim.hpp"
#include "semi/projector.hpp"
#include "semi/world.hpp"

namespace semi {

// Few-shot labelled set for one modality. Sample embeddings are already in
// the projector-consumable width (pruned or feature-selected upstream).
struct FewshotData {
    std::vector<SamplePair> samples;
    std::vector<int> instruction;  // i_m tokens
    DenseMatrix instruction_emb;   // enc_text(i_m)
};

enum class EarlyStopMetric { ValBleu, TrainLoss };

struct AdaptConfig {
    int steps = 300;
    int batch = 8;
    double lr = 1e-3;
    LrSchedule schedule = LrSchedule::Constant; // scratch baseline overrides to warmup+cosine
    int warmup_steps = 20;
    int eval_interval = 25;
    EarlyStopMetric early_stop = EarlyStopMetric::ValBleu;
    bool single_adapter = false; // use only the first chunk's adapter
    int max_decode_len = 16;

    OptimizerConfig optimizer() const {
        OptimizerConfig o;
        o.lr = lr;
        o.beta1 = 0.9;
        o.beta2 = 0.999;
        o.weight_decay = 5e-6;
        o.schedule = schedule;
        o.warmup_steps = warmup_steps;
        o.total_steps = steps;
        return o;
    }
};

inline DenseMatrix soft_prefix_for(const ProjectorParams& psi, const DenseMatrix& x,
                                   const FrozenDecoder& dec, const std::vector<int>& instr) {
    const DenseMatrix prefix = project_forward(psi, x); // [P x d_d]
    DenseMatrix soft(prefix.rows + static_cast<int>(instr.size()), dec.cfg.d_model);
    for (int i = 0; i < prefix.rows; ++i) soft.set_row(i, prefix.row(i));
    const DenseMatrix iemb = dec.token_embeddings(instr);
    for (int i = 0; i < iemb.rows; ++i) soft.set_row(prefix.rows + i, iemb.row(i));
    return soft;
}

inline std::vector<int> decode_sample(const ProjectorParams& psi, const DenseMatrix& x,
                                      const FrozenDecoder& dec, const std::vector<int>& instr,
                                      int max_len) {
    return greedy_decode(dec, soft_prefix_for(psi, x, dec, instr), max_len);
}

struct EvalScores {
    double token_acc = 0.0;
    double bleu = 0.0;
    double rouge = 0.0;
};

inline EvalScores evaluate_projector(const ProjectorParams& psi,
                                     const std::vector<SamplePair>& samples,
                                     const FrozenDecoder& dec, const std::vector<int>& instr,
                                     int max_len) {
    EvalScores s;
    if (samples.empty()) return s;
    for (const auto& sample : samples) {
        const auto decoded = decode_sample(psi, sample.x, dec, instr, max_len);
        s.token_acc += token_accuracy(decoded, sample.y);
        s.bleu += bleu4(decoded, {sample.y});
        s.rouge += rouge_l(decoded, sample.y);
    }
    const double n = static_cast<double>(samples.size());
    s.token_acc /= n;
    s.bleu /= n;
    s.rouge /= n;
    return s;
}

// mean teacher-forced cross entropy over a sample set, eval mode
inline double teacher_loss(const ProjectorParams& psi, const std::vector<SamplePair>& samples,
                           const FrozenDecoder& dec, const std::vector<int>& instr) {
    double total = 0.0, tokens = 0.0;
    for (const auto& s : samples) {
        GradContext ctx;
        auto psi_nodes = psi.lift(ctx, false);
        auto dec_nodes = dec.lift(ctx, false);
        NodeId out = projector_forward(ctx, psi, psi_nodes, ctx.constant(s.x));
        const double l = ctx.scalar(
            projected_caption_loss(ctx, dec, dec_nodes, psi, out, instr, s.y));
        total += l * static_cast<double>(s.y.size());
        tokens += static_cast<double>(s.y.size());
    }
    return tokens > 0.0 ? total / tokens : 0.0;
}

struct GeneratedAdapters {
    AdapterSet layer1;
    AdapterSet layer2; // populated only in two-layer adapter mode
};

// Alg.-3 chunking: partition the few-shot data into ceil(n/S) consecutive
// chunks (final chunk may be shorter) and generate one adapter per chunk.
// Generated A factors are column-pruned when psi consumes fewer inputs than
// the generation head emits.
inline GeneratedAdapters generate_adapters(const HypernetParams& theta, const ProjectorParams& psi,
                                           const FewshotData& fewshot,
                                           const FrozenTextEncoder& text_enc, int chunk_size,
                                           bool single_adapter = false) {
    if (fewshot.samples.empty()) throw InputError("generate_adapters: empty few-shot set");
    if (chunk_size < 1) throw InputError("generate_adapters: chunk size must be >= 1");
    if (psi.d_in > theta.cfg.d_in)
        throw ConfigError("generate_adapters: psi consumes more inputs than the head emits");

    GeneratedAdapters out;
    const int n = static_cast<int>(fewshot.samples.size());
    for (int start = 0, batch_index = 0; start < n; start += chunk_size, ++batch_index) {
        const int stop = std::min(n, start + chunk_size);
        std::vector<const SamplePair*> chunk;
        for (int i = start; i < stop; ++i) chunk.push_back(&fewshot.samples[i]);
        const Episode episode = assemble_episode(fewshot.instruction_emb, chunk, text_enc,
                                                 theta.cfg.d_h, theta.cfg.text_grounding);
        GeneratedAdapter gen = hypernet_forward(theta, episode);
        if (psi.d_in < theta.cfg.d_in)
            gen.layer1 = LoraAdapter(gen.layer1.a.left_cols(psi.d_in), gen.layer1.b,
                                     gen.layer1.rank, gen.layer1.alpha);
        out.layer1.push(std::move(gen.layer1), batch_index);
        if (gen.layer2) out.layer2.push(std::move(*gen.layer2), batch_index);
        if (single_adapter) break;
    }
    return out;
}

// Full fine-tuning of every projector parameter with periodic early-stopping
// snapshots; the initial state is a candidate, so zero steps returns it.
inline ProjectorParams finetune_projector(ProjectorParams psi, const FewshotData& fewshot,
                                          const std::vector<SamplePair>& val_set,
                                          const FrozenDecoder& dec, const AdaptConfig& cfg,
                                          std::uint64_t seed) {
    if (cfg.steps == 0) return psi;
    AdamW opt(cfg.optimizer());
    Rng rng(mix_seed(seed, 0xF7ULL));
    const int n = static_cast<int>(fewshot.samples.size());

    auto score = [&](const ProjectorParams& p) {
        if (cfg.early_stop == EarlyStopMetric::ValBleu)
            return evaluate_projector(p, val_set, dec, fewshot.instruction, cfg.max_decode_len).bleu;
        return -teacher_loss(p, fewshot.samples, dec, fewshot.instruction);
    };

    ProjectorParams best = psi;
    double best_score = score(psi);
    for (int step = 0; step < cfg.steps; ++step) {
        GradContext ctx;
        auto psi_nodes = psi.lift(ctx, true);
        auto dec_nodes = dec.lift(ctx, false);
        const int batch = std::min(cfg.batch, n);
        DenseMatrix xb(batch, psi.d_in);
        std::vector<const SamplePair*> picks;
        for (int b = 0; b < batch; ++b) {
            picks.push_back(&fewshot.samples[rng.uniform_int(n)]);
            xb.set_row(b, picks.back()->x);
        }
        NodeId prefixes = projector_forward(ctx, psi, psi_nodes, ctx.constant(xb), -1, -1,
                                            /*train=*/true, &rng);
        std::vector<NodeId> losses;
        std::vector<double> weights;
        double tokens = 0.0;
        for (int b = 0; b < batch; ++b) {
            NodeId row = ctx.slice_rows(prefixes, b, b + 1);
            losses.push_back(projected_caption_loss(ctx, dec, dec_nodes, psi, row,
                                                    fewshot.instruction, picks[b]->y));
            weights.push_back(static_cast<double>(picks[b]->y.size()));
            tokens += weights.back();
        }
        for (auto& w : weights) w /= tokens;
        NodeId loss = ctx.weighted_sum(losses, weights);
        if (!std::isfinite(ctx.scalar(loss)))
            throw DivergenceError("finetune_projector: loss diverged", best.to_params(), step);
        ctx.backward(loss);
        ParamMap params = psi.to_params();
        opt.step(params, ctx.gradients());
        psi.from_params(params);

        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
            const double s = score(psi);
            if (s > best_score) {
                best_score = s;
                best = psi;
            }
        }
    }
    return best;
}

struct AdaptResult {
    ProjectorParams merged; // psi* + averaged delta, before fine-tuning
    ProjectorParams final_params;
    DenseMatrix delta_bar;
    int n_adapters = 0;
};

// Alg. 3: generate adapters per chunk, average the materialized deltas, merge
// into the frozen psi*, then fine-tune every merged parameter on the same
// few-shot samples.
inline AdaptResult adapt_few_shot(const HypernetParams& theta, const ProjectorParams& psi_star,
                                  const FewshotData& fewshot, const std::vector<SamplePair>& val_set,
                                  const FrozenDecoder& dec, const FrozenTextEncoder& text_enc,
                                  const AdaptConfig& cfg, std::uint64_t seed) {
    GeneratedAdapters sets = generate_adapters(theta, psi_star, fewshot, text_enc,
                                               theta.cfg.context_pairs, cfg.single_adapter);
    AdaptResult out;
    out.n_adapters = static_cast<int>(sets.layer1.adapters.size());
    out.delta_bar = average_adapters(sets.layer1);
    out.merged = merge(psi_star, out.delta_bar);
    if (theta.cfg.adapter_layers == 2 && !sets.layer2.adapters.empty()) {
        const DenseMatrix delta2 = average_adapters(sets.layer2);
        if (!delta2.same_shape(out.merged.w2))
            throw ConfigError("adapt_few_shot: layer-2 delta does not fit W2");
        axpy(out.merged.w2, 1.0, delta2);
    }
    out.final_params = finetune_projector(out.merged, fewshot, val_set, dec, cfg, seed);
    return out;
}

// Baseline "Projector": a randomly initialised projector at the encoder's own
// width, trained on the few-shot examples only. Hidden width follows the
// configured value but never exceeds the encoder dimension.
inline ProjectorParams baseline_projector_scratch(const FewshotData& fewshot,
                                                  const std::vector<SamplePair>& val_set,
                                                  const FrozenDecoder& dec, int d_e, int d_hid_cfg,
                                                  double dropout, AdaptConfig cfg,
                                                  std::uint64_t seed) {
    ProjectorParams psi = make_projector(d_e, std::min(d_hid_cfg, d_e), dec.cfg.prefix_slots,
                                         dec.cfg.d_model, dropout, seed);
    cfg.schedule = LrSchedule::WarmupCosine;
    return finetune_projector(std::move(psi), fewshot, val_set, dec, cfg, seed);
}

// Baseline "FT Projector": fully fine-tunes the pre-trained shared projector
// (already pruned or fed feature-selected inputs upstream).
inline ProjectorParams baseline_ft_projector(const ProjectorParams& psi_star,
                                             const FewshotData& fewshot,
                                             const std::vector<SamplePair>& val_set,
                                             const FrozenDecoder& dec, const AdaptConfig& cfg,
                                             std::uint64_t seed) {
    return finetune_projector(psi_star, fewshot, val_set, dec, cfg, seed);
}

// Baseline "LoRA": trains a fresh adapter (A Gaussian, B zero) on layer 1 of
// the frozen psi*, early-stops like the others, then merges.
inline ProjectorParams baseline_lora(const ProjectorParams& psi_star, const FewshotData& fewshot,
                                     const std::vector<SamplePair>& val_set,
                                     const FrozenDecoder& dec, int rank, double alpha,
                                     const AdaptConfig& cfg, std::uint64_t seed) {
    Rng init_rng(mix_seed(seed, 0x10AAULL));
    ParamMap lora;
    lora["lora.a"] = DenseMatrix::gaussian(rank, psi_star.d_in, init_rng,
                                           1.0 / std::sqrt(psi_star.d_in));
    lora["lora.b"] = DenseMatrix(psi_star.d_hid, rank);

    auto merged_with = [&](const ParamMap& p) {
        return merge(psi_star, lora_delta(LoraAdapter(p.at("lora.a"), p.at("lora.b"), rank, alpha)));
    };
    auto score = [&](const ParamMap& p) {
        if (cfg.early_stop == EarlyStopMetric::ValBleu)
            return evaluate_projector(merged_with(p), val_set, dec, fewshot.instruction,
                                      cfg.max_decode_len)
                .bleu;
        return -teacher_loss(merged_with(p), fewshot.samples, dec, fewshot.instruction);
    };

    AdamW opt(cfg.optimizer());
    Rng rng(mix_seed(seed, 0xF8ULL));
    const int n = static_cast<int>(fewshot.samples.size());
    ParamMap best = lora;
    double best_score = score(lora);

    for (int step = 0; step < cfg.steps; ++step) {
        GradContext ctx;
        NodeId a = ctx.param("lora.a", lora.at("lora.a"));
        NodeId b = ctx.param("lora.b", lora.at("lora.b"));
        NodeId delta = ctx.scale(ctx.matmul(b, a), alpha / rank);
        auto psi_nodes = psi_star.lift(ctx, false);
        auto dec_nodes = dec.lift(ctx, false);
        const int batch = std::min(cfg.batch, n);
        DenseMatrix xb(batch, psi_star.d_in);
        std::vector<const SamplePair*> picks;
        for (int bi = 0; bi < batch; ++bi) {
            picks.push_back(&fewshot.samples[rng.uniform_int(n)]);
            xb.set_row(bi, picks.back()->x);
        }
        NodeId prefixes = projector_forward(ctx, psi_star, psi_nodes, ctx.constant(xb), delta, -1,
                                            /*train=*/true, &rng);
        std::vector<NodeId> losses;
        std::vector<double> weights;
        double tokens = 0.0;
        for (int bi = 0; bi < batch; ++bi) {
            NodeId row = ctx.slice_rows(prefixes, bi, bi + 1);
            losses.push_back(projected_caption_loss(ctx, dec, dec_nodes, psi_star, row,
                                                    fewshot.instruction, picks[bi]->y));
            weights.push_back(static_cast<double>(picks[bi]->y.size()));
            tokens += weights.back();
        }
        for (auto& w : weights) w /= tokens;
        NodeId loss = ctx.weighted_sum(losses, weights);
        if (!std::isfinite(ctx.scalar(loss)))
            throw DivergenceError("baseline_lora: loss diverged", best, step);
        ctx.backward(loss);
        opt.step(lora, ctx.gradients());

        if ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
            const double s = score(lora);
            if (s > best_score) {
                best_score = s;
                best = lora;
            }
        }
    }
    return merged_with(best);
}

} // namespace semi
