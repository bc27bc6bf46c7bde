#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "semi/decoder.hpp"
#include "semi/encoders.hpp"
#include "semi/ops.hpp"
#include "semi/world.hpp"

using namespace semi;

namespace {

WorldConfig tiny_world_config() {
    WorldConfig cfg;
    cfg.vocab_size = 32;
    cfg.num_concepts = 8;
    cfg.d_latent = 6;
    cfg.max_len = 10;
    cfg.min_caption_words = 4;
    cfg.sigma_noise = 0.2;
    cfg.n_train = 5;
    cfg.n_val = 2;
    cfg.n_test = 1;
    cfg.instr_len = 2;
    return cfg;
}

DecoderConfig tiny_decoder_config() {
    DecoderConfig cfg;
    cfg.d_model = 32;
    cfg.train_steps = 6000;
    cfg.batch = 8;
    cfg.eval_interval = 200;
    return cfg;
}

const FrozenDecoder& shared_tiny_decoder() {
    static const FrozenDecoder dec = [] {
        ConceptWorld world(tiny_world_config(), 42);
        return pretrain_frozen_decoder(world, tiny_decoder_config(), 42);
    }();
    return dec;
}

} // namespace

TEST_CASE("world construction is deterministic and well-formed") {
    WorldConfig cfg = tiny_world_config();
    ConceptWorld a(cfg, 7), b(cfg, 7);
    for (int k = 0; k < cfg.num_concepts; ++k) {
        CHECK(max_abs_diff(a.concept_at(k).latent, b.concept_at(k).latent) == 0.0);
        CHECK(a.concept_at(k).caption == b.concept_at(k).caption);
    }
    CHECK(a.train_ids() == b.train_ids());

    std::set<int> train(a.train_ids().begin(), a.train_ids().end());
    std::set<int> test(a.test_ids().begin(), a.test_ids().end());
    for (int id : test) CHECK(train.count(id) == 0);
    CHECK(static_cast<int>(a.train_ids().size() + a.val_ids().size() + a.test_ids().size()) ==
          cfg.num_concepts);

    for (int k = 0; k < cfg.num_concepts; ++k) {
        const auto& caption = a.concept_at(k).caption;
        CHECK(static_cast<int>(caption.size()) <= cfg.max_len);
        CHECK(caption.back() == kEosToken);
        CHECK(a.tokenize(a.render(caption)) == caption);
    }

    WorldConfig bad = cfg;
    bad.num_concepts = 3;
    bad.n_train = 1;
    bad.n_val = 1;
    bad.n_test = 1;
    CHECK_THROWS_AS(ConceptWorld(bad, 7), ConfigError);
}

TEST_CASE("bigger vocab world renders within budget") {
    WorldConfig cfg;
    cfg.vocab_size = 32;
    cfg.num_concepts = 16;
    cfg.n_train = 10;
    cfg.n_val = 3;
    cfg.n_test = 3;
    ConceptWorld world(cfg, 3);
    for (int k = 0; k < cfg.num_concepts; ++k)
        CHECK(static_cast<int>(world.tokenize(world.render(world.concept_at(k).caption)).size()) <=
              cfg.max_len);
}

TEST_CASE("synthetic encoders") {
    ConceptWorld world(tiny_world_config(), 11);

    SUBCASE("same seed gives identical mapping") {
        auto e1 = make_encoder(world, 32, 5, 0);
        auto e2 = make_encoder(world, 32, 5, 0);
        CHECK(max_abs_diff(e1.w, e2.w) == 0.0);
        CHECK(max_abs_diff(e1.b, e2.b) == 0.0);
    }
    SUBCASE("output dimension follows the request") {
        CHECK(make_encoder(world, 64, 5).out_dim == 64);
        CHECK_THROWS_AS(make_encoder(world, 3, 5), ConfigError);
    }
    SUBCASE("concept separation across an encoder-dimension family") {
        const double sigma = world.config().sigma_noise;
        for (int d_e : {24, 32, 48}) {
            auto enc = make_encoder(world, d_e, 77 + d_e);
            double min_dist = 1e300;
            for (int i = 0; i < world.config().num_concepts; ++i)
                for (int j = i + 1; j < world.config().num_concepts; ++j)
                    min_dist = std::min(min_dist,
                                        vec_norm(sub(enc.encode_clean(world.concept_at(i).latent),
                                                     enc.encode_clean(world.concept_at(j).latent))));
            CHECK(min_dist > 4.0 * sigma);
        }
    }
    SUBCASE("nearest clean mean classifies clean embeddings perfectly") {
        auto enc = make_encoder(world, 32, 13);
        std::vector<DenseMatrix> clean;
        for (int k = 0; k < world.config().num_concepts; ++k)
            clean.push_back(enc.encode_clean(world.concept_at(k).latent));
        for (int k = 0; k < world.config().num_concepts; ++k) {
            int best = -1;
            double best_dist = 1e300;
            for (int j = 0; j < world.config().num_concepts; ++j) {
                const double d = vec_norm(sub(clean[k], clean[j]));
                if (d < best_dist) {
                    best_dist = d;
                    best = j;
                }
            }
            CHECK(best == k);
        }
    }
}

TEST_CASE("sample_pair") {
    SUBCASE("zero noise reproduces the clean embedding; captions end with EOS") {
        WorldConfig cfg = tiny_world_config();
        cfg.sigma_noise = 0.0;
        ConceptWorld world(cfg, 19);
        auto enc = make_encoder(world, 24, 3);
        Rng rng(5);
        for (int i = 0; i < 16; ++i) {
            auto s = sample_pair(world, enc, world.train_ids(), rng);
            CHECK(max_abs_diff(s.x, enc.encode_clean(world.concept_at(s.concept_id).latent)) == 0.0);
            CHECK(s.y.back() == kEosToken);
        }
    }
    SUBCASE("noise norm follows a scaled chi distribution") {
        ConceptWorld world(tiny_world_config(), 23);
        auto enc = make_encoder(world, 24, 9);
        const int n = 10000;
        Rng rng(31);
        std::vector<double> observed;
        observed.reserve(n);
        std::vector<DenseMatrix> clean;
        for (int k = 0; k < world.config().num_concepts; ++k)
            clean.push_back(enc.encode_clean(world.concept_at(k).latent));
        for (int i = 0; i < n; ++i) {
            auto s = sample_pair(world, enc, world.train_ids(), rng);
            observed.push_back(vec_norm(sub(s.x, clean[s.concept_id])));
        }
        Rng oracle_rng(57);
        std::vector<double> oracle;
        oracle.reserve(n);
        for (int i = 0; i < n; ++i) {
            double ss = 0.0;
            for (int j = 0; j < enc.out_dim; ++j) {
                const double g = oracle_rng.gaussian();
                ss += g * g;
            }
            oracle.push_back(world.config().sigma_noise * std::sqrt(ss));
        }
        CHECK(ks_two_sample(observed, oracle) < ks_two_sample_critical(n, n));
    }
}

TEST_CASE("frozen text encoder is a pure function of the token sequence") {
    ConceptWorld world(tiny_world_config(), 29);
    auto text_enc = make_text_encoder(world, 32);
    const std::vector<int> tokens = {4, 9, 4, 17};
    CHECK(max_abs_diff(text_enc.encode(tokens), text_enc.encode(tokens)) == 0.0);
    CHECK(text_enc.encode(tokens).cols == 32);
    // position mixing makes order matter
    CHECK(max_abs_diff(text_enc.encode({4, 9}), text_enc.encode({9, 4})) > 0.0);
}

TEST_CASE("frozen decoder pre-training reaches the reproduction target") {
    ConceptWorld world(tiny_world_config(), 42);
    const FrozenDecoder& dec = shared_tiny_decoder();
    CHECK(dec.frozen);
    CHECK(decoder_exact_match(dec, world) >= 0.95);
}

TEST_CASE("frozen decoder is causal and deterministic") {
    ConceptWorld world(tiny_world_config(), 42);
    const FrozenDecoder& dec = shared_tiny_decoder();
    const DenseMatrix prefix = dec.ideal_prefix(world.concept_at(0).latent);

    std::vector<int> tokens = {kBosToken, 5, 9, 13, 7, 21};
    std::vector<int> permuted = tokens;
    std::swap(permuted[4], permuted[5]); // positions after t = 3
    const DenseMatrix full = decoder_logits(dec, prefix, tokens);
    const DenseMatrix perm = decoder_logits(dec, prefix, permuted);
    const int t = prefix.rows + 3;
    for (int pos = 0; pos <= t; ++pos)
        for (int j = 0; j < full.cols; ++j)
            CHECK(full.at(pos, j) == perm.at(pos, j));

    CHECK(max_abs_diff(decoder_logits(dec, prefix, tokens), full) == 0.0);
    CHECK(greedy_decode(dec, prefix, 10) == greedy_decode(dec, prefix, 10));
}

TEST_CASE("greedy decode tie-breaking on an all-zero head") {
    ConceptWorld world(tiny_world_config(), 42);
    FrozenDecoder dec = shared_tiny_decoder();
    dec.head = DenseMatrix(dec.vocab, dec.cfg.d_model);
    const DenseMatrix prefix = dec.ideal_prefix(world.concept_at(0).latent);
    const auto out = greedy_decode(dec, prefix, 6);
    CHECK(out == std::vector<int>(6, kPadToken));
}
