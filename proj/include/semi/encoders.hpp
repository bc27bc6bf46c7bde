#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/ops.hpp"
#include "semi/rng.hpp"
#include "semi/world.hpp"

namespace semi {

// Frozen per-modality feature extractor: fixed random affine map out of the
// shared latent space followed by a mild elementwise nonlinearity, plus
// isotropic Gaussian observation noise in embedding space.
struct SyntheticEncoder {
    int modality_id = 0;
    int out_dim = 0;
    std::uint64_t seed = 0;
    double noise_scale = 0.0;
    double nonlin_gain = 0.15;
    DenseMatrix w; // [out_dim x d_latent]
    DenseMatrix b; // [1 x out_dim]

    DenseMatrix encode_clean(const DenseMatrix& latent) const {
        DenseMatrix y = add(matmul_nt(latent, w), b);
        for (auto& v : y.data) v = v + nonlin_gain * std::tanh(v);
        return y;
    }

    DenseMatrix encode(const DenseMatrix& latent, Rng& noise_rng) const {
        DenseMatrix y = encode_clean(latent);
        for (auto& v : y.data) v += noise_scale * noise_rng.gaussian();
        return y;
    }
};

inline SyntheticEncoder make_encoder(const ConceptWorld& world, int d_e, std::uint64_t modality_seed,
                                     int modality_id = 0) {
    if (d_e < 4) throw ConfigError("make_encoder: output dimension must be >= 4");
    const auto& cfg = world.config();
    const double min_required = 4.0 * cfg.sigma_noise;
    for (int attempt = 0; attempt < 32; ++attempt) {
        SyntheticEncoder enc;
        enc.modality_id = modality_id;
        enc.out_dim = d_e;
        enc.seed = modality_seed;
        enc.noise_scale = cfg.sigma_noise;
        Rng rng(mix_seed(modality_seed, 0xE4C0DE5ULL, attempt));
        enc.w = quantize_f32(DenseMatrix::gaussian(d_e, cfg.d_latent, rng,
                                                   1.0 / std::sqrt(cfg.d_latent)));
        enc.b = quantize_f32(DenseMatrix::gaussian(1, d_e, rng, 0.02));

        double min_dist = 1e300;
        const int k = cfg.num_concepts;
        std::vector<DenseMatrix> clean;
        clean.reserve(k);
        for (int i = 0; i < k; ++i) clean.push_back(enc.encode_clean(world.concept_at(i).latent));
        for (int i = 0; i < k; ++i)
            for (int j = i + 1; j < k; ++j)
                min_dist = std::min(min_dist, vec_norm(sub(clean[i], clean[j])));
        if (min_dist > min_required) return enc;
    }
    throw GenerationError("make_encoder: could not separate concepts after bounded retries");
}

struct SamplePair {
    DenseMatrix x;           // [1 x d_e]
    std::vector<int> y;      // caption tokens, EOS-terminated
    int concept_id = -1;
};

inline SamplePair sample_pair(const ConceptWorld& world, const SyntheticEncoder& encoder,
                              const std::vector<int>& concept_split, Rng& rng) {
    if (concept_split.empty()) throw InputError("sample_pair: empty concept split");
    SamplePair out;
    out.concept_id = concept_split[rng.uniform_int(static_cast<int>(concept_split.size()))];
    const Concept& c = world.concept_at(out.concept_id);
    out.x = encoder.encode(c.latent, rng);
    out.y = c.caption;
    return out;
}

// Frozen toy text encoder: mean over token embeddings mixed with sinusoidal
// position encodings. Output dimension is the hypernetwork width d_h.
struct FrozenTextEncoder {
    DenseMatrix tok_emb; // [V x d_h]
    int d_h = 0;

    DenseMatrix encode(const std::vector<int>& tokens) const {
        DenseMatrix out(1, d_h);
        if (tokens.empty()) return out;
        const DenseMatrix pe = sinusoidal_pe(static_cast<int>(tokens.size()), d_h);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= tok_emb.rows)
                throw InputError("FrozenTextEncoder: token out of range");
            for (int j = 0; j < d_h; ++j)
                out.at(0, j) += tok_emb.at(tokens[i], j) + pe.at(static_cast<int>(i), j);
        }
        for (auto& v : out.data) v /= static_cast<double>(tokens.size());
        return out;
    }
};

inline FrozenTextEncoder make_text_encoder(const ConceptWorld& world, int d_h) {
    FrozenTextEncoder enc;
    enc.d_h = d_h;
    Rng rng(mix_seed(world.seed(), 0x7E87ULL));
    enc.tok_emb = quantize_f32(DenseMatrix::gaussian(world.vocab_size(), d_h, rng));
    return enc;
}

} // namespace semi
