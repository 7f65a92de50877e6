#pragma once

#include <cstdint>
#include <string>

#include "tora2/binding.hpp"
#include "tora2/dit.hpp"
#include "tora2/personalization.hpp"

namespace tora2 {

// Run configuration, one JSON file per run. Every field has a default, so
// "{}" is a valid config; parsing rejects unknown keys with the full key
// path (typos must never silently fall back to defaults). Enum-valued
// strings are validated at parse time.

struct DataConfig {
    int64_t frames = 8;
    int64_t height = 64, width = 64;
    int64_t ref_res = 32;       // reference image resolution
    int64_t max_entities = 3;   // sprites per scene
    int64_t train_scenes = 64;  // synthetic corpus size
    int64_t eval_scenes = 16;   // held-out scenes
    uint64_t seed = 1;          // corpus generation seed
};

struct ModelConfig {
    int64_t patch = 4;
    int64_t d = 64;
    int depth = 4;
    int heads = 4;
    int64_t vocab = 64;
    int64_t max_text = 16;
    int64_t c_m = 16;
    int64_t m_hidden = 32;
    std::string injection_order = "M_then_P";
    std::string personalization = "full";
    std::string binding = "gated";
    int64_t schedule_steps = 1000;
    double cosine_s = 0.008;
    // personalization extractor widths
    int64_t d_prior = 32;
    int64_t k_prior = 4;
    int64_t d_global = 32;
    int64_t k_global = 16;
    int64_t l_p = 8;
    int64_t n_qf = 2;
};

struct LossConfig {
    double lambda_contrast = 0.2;
    double tau = 0.07;
};

struct DropoutConfig {
    double caption = 0.50;
    double references = 0.33;
    double trajectories = 0.33;
};

struct TrainConfig {
    int64_t steps = 200;
    int64_t batch = 4;
    double lr = 1e-4;
    double weight_decay = 0.01;
    uint64_t seed = 7;
    bool freeze_backbone = false;
    int64_t log_every = 10;
};

struct SamplerConfig {
    int64_t steps = 50;      // reverse process steps
    double guidance = 6.0;   // classifier-free guidance scale
    uint64_t seed = 1234;
};

struct EvalConfig {
    int64_t scenes = 16;
    uint64_t seed = 1717;
    int64_t sample_steps = 20;  // cheaper than the default sampler for sweeps
    double guidance = 2.0;
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;
    LossConfig loss;
    DropoutConfig dropout;
    TrainConfig train;
    SamplerConfig sampler;
    EvalConfig eval;
};

// Parses a JSON object with optional sections {data, model, loss, dropout,
// train, sampler, eval}. Unknown keys anywhere raise ConfigError naming the
// full path ("model.dd"); wrong JSON types and out-of-range values raise
// ConfigError naming the key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig run_config_from_file(const std::string& path);  // ConfigError if unreadable

// Canonical JSON dump with every field present and keys sorted; two configs
// are equal iff their dumps are equal.
std::string run_config_json(const RunConfig& cfg);

// FNV-1a over the canonical dump; stable across key order and whitespace of
// the input text.
uint64_t config_hash(const RunConfig& cfg);

// Typed views of the model section.
DiTConfig dit_config(const RunConfig& cfg);
DpeConfig dpe_config(const RunConfig& cfg);
PersonalizationMode personalization_mode(const RunConfig& cfg);
BindingMode binding_mode(const RunConfig& cfg);

}  // namespace tora2
