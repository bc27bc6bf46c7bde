#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "semi/adapt.hpp"
#include "semi/checkpoint.hpp"
#include "semi/decoder.hpp"
#include "semi/errors.hpp"
#include "semi/hypernet.hpp"
#include "semi/projector.hpp"
#include "semi/world.hpp"

namespace semi {

using Json = nlohmann::json;

inline Json default_config_json() {
    return Json{
        {"seed", 1234},
        {"out_dir", "runs/default"},
        {"world",
         {{"vocab_size", 48},
          {"num_concepts", 24},
          {"d_latent", 8},
          {"max_len", 12},
          {"min_caption_words", 4},
          {"sigma_noise", 0.8},
          {"n_train", 12},
          {"n_val", 4},
          {"n_test", 8},
          {"instr_pool_size", 2},
          {"instr_len", 3}}},
        {"dims", {{"d_h", 64}, {"d_hid", 64}, {"d_d", 64}, {"prefix_slots", 1}}},
        {"modalities", {{"n_train_modalities", 3}, {"heldout_dims", Json::array({48, 64, 96})}}},
        {"decoder",
         {{"n_blocks", 1},
          {"ffn_mult", 2},
          {"max_seq", 96},
          {"train_steps", 6000},
          {"batch", 8},
          {"lr", 2e-3},
          {"warmup_steps", 50},
          {"eval_interval", 250},
          {"target_exact_match", 0.95}}},
        {"stage1", {{"steps", 2000}, {"batch", 8}, {"lr", 2e-3}, {"warmup_steps", 100}, {"dropout", 0.1}}},
        {"stage2",
         {{"steps", 6000},
          {"lr", 1e-3},
          {"warmup_steps", 100},
          {"context_pairs", 8},
          {"supervision_batch", 8},
          {"rank", 8},
          {"alpha", 8.0},
          {"adapter_layers", 1},
          {"backbone_depth", 1},
          {"dropout", 0.1},
          {"text_grounding", true},
          {"iso_transforms", true},
          {"context_capacity", 80}}},
        {"adapt",
         {{"steps", 240},
          {"batch", 8},
          {"lr", 1e-3},
          {"warmup_steps", 20},
          {"eval_interval", 40},
          {"early_stop", "bleu"},
          {"single_adapter", false},
          {"max_decode_len", 16}}},
        {"featsel", {{"gamma", 1e9}, {"beta", 0.5}}},
        {"benchmark",
         {{"shots", Json::array({8, 32, 128})},
          {"seeds", Json::array({0, 1, 2})},
          {"methods", Json::array({"semi", "ft_projector", "projector", "lora"})},
          {"val_size", 24},
          {"test_size", 48},
          {"jobs", 0}}},
        {"ablate", {{"stage2_steps", 400}, {"shots", 16}, {"seed", 0}}},
    };
}

namespace detail {

inline void reject_unknown_keys(const Json& user, const Json& schema, const std::string& path) {
    if (!user.is_object()) return;
    for (const auto& [key, value] : user.items()) {
        if (!schema.contains(key))
            throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) + "'");
        if (value.is_object()) reject_unknown_keys(value, schema.at(key), path.empty() ? key : path + "." + key);
    }
}

inline void deep_merge(Json& base, const Json& user) {
    for (const auto& [key, value] : user.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object())
            deep_merge(base[key], value);
        else
            base[key] = value;
    }
}

} // namespace detail

struct ExperimentConfig {
    WorldConfig world;
    int d_h = 64, d_hid = 64, d_d = 64, prefix_slots = 1;
    int n_train_modalities = 3;
    std::vector<int> heldout_dims;
    DecoderConfig decoder;
    ProjectorTrainConfig stage1;
    double stage1_dropout = 0.1;
    HypernetConfig hypernet;
    HypernetTrainConfig stage2;
    AdaptConfig adapt;
    double featsel_gamma = 1e9;
    double featsel_beta = 0.5;
    std::vector<int> shots;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> methods;
    int val_size = 16, test_size = 32, jobs = 0;
    int ablate_stage2_steps = 400, ablate_shots = 16;
    std::uint64_t ablate_seed = 0;
    std::uint64_t seed = 1234;
    std::filesystem::path out_dir;
    std::string config_hash;
    Json raw;
};

inline std::string hash_hex(const std::string& bytes) {
    const std::uint64_t h = fnv1a(bytes.data(), bytes.size());
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

// Validates against the default schema (unknown keys rejected), merges over
// the defaults, and materializes the typed config.
inline ExperimentConfig parse_config(const Json& user) {
    Json merged = default_config_json();
    detail::reject_unknown_keys(user, merged, "");
    detail::deep_merge(merged, user);

    ExperimentConfig cfg;
    cfg.raw = merged;
    cfg.config_hash = hash_hex(merged.dump());

    const Json& w = merged.at("world");
    cfg.world.vocab_size = w.at("vocab_size");
    cfg.world.num_concepts = w.at("num_concepts");
    cfg.world.d_latent = w.at("d_latent");
    cfg.world.max_len = w.at("max_len");
    cfg.world.min_caption_words = w.at("min_caption_words");
    cfg.world.sigma_noise = w.at("sigma_noise");
    cfg.world.n_train = w.at("n_train");
    cfg.world.n_val = w.at("n_val");
    cfg.world.n_test = w.at("n_test");
    cfg.world.instr_pool_size = w.at("instr_pool_size");
    cfg.world.instr_len = w.at("instr_len");

    const Json& d = merged.at("dims");
    cfg.d_h = d.at("d_h");
    cfg.d_hid = d.at("d_hid");
    cfg.d_d = d.at("d_d");
    cfg.prefix_slots = d.at("prefix_slots");
    if (cfg.d_hid > 768) throw ConfigError("config: d_hid exceeds the 768 cap");
    if (cfg.d_h % 2 != 0 || cfg.d_d % 2 != 0)
        throw ConfigError("config: d_h and d_d must be even for sinusoidal encodings");

    const Json& m = merged.at("modalities");
    cfg.n_train_modalities = m.at("n_train_modalities");
    if (cfg.n_train_modalities < 2) throw ConfigError("config: need at least 2 training modalities");
    for (int v : m.at("heldout_dims")) cfg.heldout_dims.push_back(v);
    if (cfg.heldout_dims.empty()) throw ConfigError("config: heldout_dims must not be empty");

    const Json& dec = merged.at("decoder");
    cfg.decoder.d_model = cfg.d_d;
    cfg.decoder.n_blocks = dec.at("n_blocks");
    cfg.decoder.ffn_mult = dec.at("ffn_mult");
    cfg.decoder.prefix_slots = cfg.prefix_slots;
    cfg.decoder.max_seq = dec.at("max_seq");
    cfg.decoder.train_steps = dec.at("train_steps");
    cfg.decoder.batch = dec.at("batch");
    cfg.decoder.lr = dec.at("lr");
    cfg.decoder.warmup_steps = dec.at("warmup_steps");
    cfg.decoder.eval_interval = dec.at("eval_interval");
    cfg.decoder.target_exact_match = dec.at("target_exact_match");

    const Json& s1 = merged.at("stage1");
    cfg.stage1.steps = s1.at("steps");
    cfg.stage1.batch = s1.at("batch");
    cfg.stage1.lr = s1.at("lr");
    cfg.stage1.warmup_steps = s1.at("warmup_steps");
    cfg.stage1_dropout = s1.at("dropout");

    const Json& s2 = merged.at("stage2");
    cfg.hypernet.d_h = cfg.d_h;
    cfg.hypernet.context_pairs = s2.at("context_pairs");
    cfg.hypernet.supervision_batch = s2.at("supervision_batch");
    cfg.hypernet.rank = s2.at("rank");
    cfg.hypernet.alpha = s2.at("alpha");
    cfg.hypernet.adapter_layers = s2.at("adapter_layers");
    cfg.hypernet.backbone_depth = s2.at("backbone_depth");
    cfg.hypernet.dropout = s2.at("dropout");
    cfg.hypernet.text_grounding = s2.at("text_grounding");
    cfg.hypernet.iso_transforms = s2.at("iso_transforms");
    cfg.hypernet.context_capacity = s2.at("context_capacity");
    cfg.hypernet.d_in = cfg.d_h;
    cfg.hypernet.d_hid = cfg.d_hid;
    cfg.hypernet.out2 = cfg.prefix_slots * cfg.d_d;
    cfg.hypernet.validate();
    cfg.stage2.steps = s2.at("steps");
    cfg.stage2.lr = s2.at("lr");
    cfg.stage2.warmup_steps = s2.at("warmup_steps");

    const Json& ad = merged.at("adapt");
    cfg.adapt.steps = ad.at("steps");
    cfg.adapt.batch = ad.at("batch");
    cfg.adapt.lr = ad.at("lr");
    cfg.adapt.warmup_steps = ad.at("warmup_steps");
    cfg.adapt.eval_interval = ad.at("eval_interval");
    const std::string stop = ad.at("early_stop");
    if (stop == "bleu")
        cfg.adapt.early_stop = EarlyStopMetric::ValBleu;
    else if (stop == "train_loss")
        cfg.adapt.early_stop = EarlyStopMetric::TrainLoss;
    else
        throw ConfigError("config: adapt.early_stop must be 'bleu' or 'train_loss'");
    cfg.adapt.single_adapter = ad.at("single_adapter");
    cfg.adapt.max_decode_len = ad.at("max_decode_len");

    const Json& fs = merged.at("featsel");
    cfg.featsel_gamma = fs.at("gamma");
    cfg.featsel_beta = fs.at("beta");

    const Json& b = merged.at("benchmark");
    for (int v : b.at("shots")) cfg.shots.push_back(v);
    for (std::uint64_t v : b.at("seeds")) cfg.seeds.push_back(v);
    for (const auto& v : b.at("methods")) cfg.methods.push_back(v.get<std::string>());
    cfg.val_size = b.at("val_size");
    cfg.test_size = b.at("test_size");
    cfg.jobs = b.at("jobs");
    for (const auto& method : cfg.methods)
        if (method != "semi" && method != "ft_projector" && method != "projector" && method != "lora")
            throw ConfigError("config: unknown benchmark method '" + method + "'");
    if (cfg.shots.empty() || cfg.seeds.empty() || cfg.methods.empty())
        throw ConfigError("config: benchmark grid must not be empty");

    const Json& abl = merged.at("ablate");
    cfg.ablate_stage2_steps = abl.at("stage2_steps");
    cfg.ablate_shots = abl.at("shots");
    cfg.ablate_seed = abl.at("seed");

    cfg.seed = merged.at("seed");
    std::filesystem::path out = merged.at("out_dir").get<std::string>();
    if (const char* root = std::getenv("SEMI_OUT_ROOT"); root && out.is_relative())
        out = std::filesystem::path(root) / out;
    cfg.out_dir = out;
    return cfg;
}

// key=value overrides with dotted paths, e.g. stage2.rank=16
inline Json apply_overrides(Json user, const std::vector<std::string>& overrides) {
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + kv);
        const std::string path = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        Json* node = &user;
        std::istringstream is(path);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(is, part, '.')) parts.push_back(part);
        if (parts.empty()) throw ConfigError("override has an empty key path: " + kv);
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]]);
        Json parsed = Json::parse(value, nullptr, false);
        (*node)[parts.back()] = parsed.is_discarded() ? Json(value) : parsed;
    }
    return user;
}

inline ExperimentConfig load_config(const std::filesystem::path& file,
                                    const std::vector<std::string>& overrides = {}) {
    Json user = Json::object();
    if (!file.empty()) {
        Json parsed = Json::parse(read_file(file), nullptr, false);
        if (parsed.is_discarded()) throw ConfigError("config: invalid JSON in " + file.string());
        user = std::move(parsed);
    }
    return parse_config(apply_overrides(std::move(user), overrides));
}

} // namespace semi
