#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semi/errors.hpp"
#include "semi/matrix.hpp"
#include "semi/rng.hpp"

namespace semi {

inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kFirstWordToken = 3;

struct WorldConfig {
    int vocab_size = 48;       // includes PAD/BOS/EOS
    int num_concepts = 16;     // K
    int d_latent = 8;
    int max_len = 12;          // caption budget, EOS included
    int min_caption_words = 4; // content words before EOS
    double sigma_noise = 0.25;
    int n_train = 10;
    int n_val = 3;
    int n_test = 3;
    int instr_pool_size = 2;   // phrasings per modality
    int instr_len = 3;
};

struct Concept {
    DenseMatrix latent;        // [1 x d_latent]
    std::vector<int> caption;  // word tokens, terminated by EOS
};

// Deterministic toy semantic space shared by every synthetic modality.
// Frozen real-valued fields are quantized to float32 at construction so a
// world rebuilt from its seed matches one loaded from a checkpoint exactly.
class ConceptWorld {
public:
    ConceptWorld(WorldConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
        if (cfg.num_concepts < 4) throw ConfigError("ConceptWorld: need at least 4 concepts");
        if (cfg.n_train + cfg.n_val + cfg.n_test != cfg.num_concepts)
            throw ConfigError("ConceptWorld: split sizes must add up to num_concepts");
        if (cfg.vocab_size <= kFirstWordToken + 8)
            throw ConfigError("ConceptWorld: vocabulary too small");
        if (cfg.d_latent + 1 > cfg.max_len)
            throw ConfigError("ConceptWorld: captions cannot fit max_len");
        if (cfg.vocab_size - kFirstWordToken < 3 * cfg.d_latent)
            throw ConfigError("ConceptWorld: vocabulary too small for the caption slots");

        vocab_.reserve(cfg.vocab_size);
        vocab_.push_back("<pad>");
        vocab_.push_back("<bos>");
        vocab_.push_back("<eos>");
        for (int i = kFirstWordToken; i < cfg.vocab_size; ++i) {
            std::ostringstream os;
            os << "w" << i;
            vocab_.push_back(os.str());
        }

        // One caption word per latent dimension, chosen by quantile bucket, so
        // lexical overlap mirrors latent proximity: concepts close in the
        // shared semantic space share most caption words. Slot word lists are
        // drawn once from the world seed (the style seed).
        Rng style_rng(mix_seed(seed, 0xD1C7ULL));
        const int n_words = cfg.vocab_size - kFirstWordToken;
        slot_words_.assign(cfg.d_latent, std::vector<int>(kBucketsPerSlot));
        std::vector<int> word_order(n_words);
        std::iota(word_order.begin(), word_order.end(), 0);
        for (int i = n_words - 1; i > 0; --i)
            std::swap(word_order[i], word_order[style_rng.uniform_int(i + 1)]);
        for (int j = 0; j < cfg.d_latent; ++j)
            for (int b = 0; b < kBucketsPerSlot; ++b)
                slot_words_[j][b] =
                    kFirstWordToken + word_order[(j * kBucketsPerSlot + b) % n_words];

        Rng rng(mix_seed(seed, 0xC0CEBULL));
        std::set<std::vector<int>> seen;
        for (int k = 0; k < cfg.num_concepts; ++k) {
            Concept c;
            for (int attempt = 0; attempt < 256; ++attempt) {
                c.latent = quantize_f32(DenseMatrix::gaussian(1, cfg.d_latent, rng));
                c.caption = caption_for_latent(c.latent);
                if (!seen.count(c.caption)) break;
            }
            if (seen.count(c.caption)) throw GenerationError("ConceptWorld: caption collision persisted");
            seen.insert(c.caption);
            concepts_.push_back(std::move(c));
        }

        std::vector<int> order(cfg.num_concepts);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(seed, 0x5B117ULL));
        for (int i = cfg.num_concepts - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        train_ids_.assign(order.begin(), order.begin() + cfg.n_train);
        val_ids_.assign(order.begin() + cfg.n_train, order.begin() + cfg.n_train + cfg.n_val);
        test_ids_.assign(order.begin() + cfg.n_train + cfg.n_val, order.end());
    }

    const WorldConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    int vocab_size() const { return static_cast<int>(vocab_.size()); }
    const std::vector<std::string>& vocab() const { return vocab_; }
    const std::vector<Concept>& concepts() const { return concepts_; }
    const Concept& concept_at(int id) const { return concepts_.at(id); }
    const std::vector<int>& train_ids() const { return train_ids_; }
    const std::vector<int>& val_ids() const { return val_ids_; }
    const std::vector<int>& test_ids() const { return test_ids_; }

    std::string render(const std::vector<int>& tokens) const {
        std::string out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) out += ' ';
            out += vocab_.at(tokens[i]);
        }
        return out;
    }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        std::istringstream is(text);
        std::string word;
        while (is >> word) {
            auto it = std::find(vocab_.begin(), vocab_.end(), word);
            if (it == vocab_.end()) throw InputError("ConceptWorld: unknown word " + word);
            out.push_back(static_cast<int>(it - vocab_.begin()));
        }
        return out;
    }

    // >= 2 instruction phrasings per modality, deterministic in (seed, modality)
    std::vector<std::vector<int>> instruction_pool(int modality_id) const {
        std::vector<std::vector<int>> pool;
        for (int j = 0; j < cfg_.instr_pool_size; ++j) {
            Rng rng(mix_seed(seed_, 0x1257AULL, static_cast<std::uint64_t>(modality_id), j));
            std::vector<int> instr;
            for (int t = 0; t < cfg_.instr_len; ++t)
                instr.push_back(kFirstWordToken + rng.uniform_int(vocab_size() - kFirstWordToken));
            pool.push_back(std::move(instr));
        }
        return pool;
    }

    // tertile boundaries of the standard normal
    std::vector<int> caption_for_latent(const DenseMatrix& latent) const {
        std::vector<int> caption;
        for (int j = 0; j < cfg_.d_latent; ++j) {
            const double z = latent.at(0, j);
            const int bucket = z < -0.4307 ? 0 : (z < 0.4307 ? 1 : 2);
            caption.push_back(slot_words_[j][bucket]);
        }
        caption.push_back(kEosToken);
        return caption;
    }

private:
    static constexpr int kBucketsPerSlot = 3;

    WorldConfig cfg_;
    std::uint64_t seed_;
    std::vector<std::string> vocab_;
    std::vector<std::vector<int>> slot_words_; // [d_latent][bucket] -> word token
    std::vector<Concept> concepts_;
    std::vector<int> train_ids_, val_ids_, test_ids_;
};

inline ConceptWorld build_world(const WorldConfig& cfg, std::uint64_t seed) {
    return ConceptWorld(cfg, seed);
}

} // namespace semi
