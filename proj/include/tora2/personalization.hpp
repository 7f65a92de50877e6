#pragma once

#include <string>
#include <vector>

#include "tora2/autograd.hpp"
#include "tora2/nn.hpp"
#include "tora2/tensor.hpp"

namespace tora2 {

enum class EntityClass { human, object };

EntityClass entity_class_from_string(const std::string& s);  // ConfigError on unknown tag
std::string entity_class_to_string(EntityClass c);

// Reference image: (res, res, 3) pixels in [0,1] plus its class tag.
struct ReferenceImage {
    Tensor pixels;
    EntityClass entity_class = EntityClass::object;
};

// Pluggable identity-feature backbone: encode(image, class) -> (k_prior, d_prior).
class PriorProvider {
public:
    virtual ~PriorProvider() = default;
    virtual Tensor encode(const Tensor& pixels, EntityClass cls) = 0;
};

struct DpeConfig {
    int64_t ref_res = 32;   // square reference resolution
    int64_t d = 64;         // model width
    int64_t d_prior = 32;   // prior feature width
    int64_t k_prior = 4;    // prior tokens per image
    int64_t d_global = 32;  // global feature width
    int64_t k_global = 16;  // global tokens per image
    int64_t l_p = 8;        // personalization embedding length
    int64_t n_qf = 2;       // query blocks
    int heads = 4;
};

// How reference features become personalization tokens. The full path is
// class-priors + global features queried by learned tokens; the reduced modes
// exist for the ablation harnesses.
enum class PersonalizationMode {
    global_only,             // global features alone, mean-pooled to l_p tokens
    global_reid,             // + object-prior branch through a linear adapter
    global_reid_face,        // + class dispatch, still linear adapters, no queries
    full,                    // decoupled extraction with queries (the real path)
};

PersonalizationMode personalization_mode_from_string(const std::string& s);
std::string personalization_mode_to_string(PersonalizationMode m);

// Learned query tokens cross-attending to a variable-length corpus; output is
// always (l_p, d). Keys/values carry no positional encoding, so the output is
// invariant to corpus row order.
struct QFormer {
    int queries = -1;
    struct Block {
        LayerNormParams ln_q, ln_kv, ln_ff;
        MultiHeadAttention xattn;
        Mlp ff;
    };
    std::vector<Block> blocks;

    static QFormer create(ParamStore& ps, const std::string& name, const DpeConfig& cfg,
                          Rng& rng);
    Var forward(Tape& t, ParamStore& ps, Var corpus) const;
};

// Decoupled personalization extractor. The prior encoders and the global
// encoder are frozen random-feature convnets (parameters live in the store
// under <name>.face_prior / .reid_prior / .global_enc so the freeze contract
// and checkpoints can address them); adapters, the global width projection,
// and the queries are trainable.
struct PersonalizationExtractor {
    DpeConfig cfg;
    PersonalizationMode mode = PersonalizationMode::full;

    // frozen feature extractors
    int face_w1 = -1, face_b1 = -1, face_w2 = -1, face_b2 = -1;
    int reid_w1 = -1, reid_b1 = -1, reid_w2 = -1, reid_b2 = -1;
    int global_w = -1, global_b = -1;
    // trainable
    Mlp face_adapter, reid_adapter;        // d_prior -> d (mode full)
    Linear face_linear, reid_linear;       // d_prior -> d (linear-adapter modes)
    Linear global_proj;                    // d_global -> d
    QFormer qformer;

    mutable std::vector<EntityClass> dispatch_log;  // appended by extract_prior

    static PersonalizationExtractor create(ParamStore& ps, const std::string& name,
                                           const DpeConfig& cfg, Rng& rng,
                                           PersonalizationMode mode = PersonalizationMode::full);

    // Parameter-name prefixes that must stay frozen during training.
    static std::vector<std::string> frozen_prefixes(const std::string& name);

    // Frozen high-frequency identity features: (k_prior, d_prior).
    Tensor extract_prior(ParamStore& ps, const Tensor& pixels, EntityClass cls) const;
    // Frozen low-frequency semantic features: (k_global, d_global).
    Tensor extract_global(ParamStore& ps, const Tensor& pixels) const;

    // Learned per-class projection of prior features to width d.
    Var adapt(Tape& t, ParamStore& ps, Var prior, EntityClass cls) const;
    // Adapted-first row concatenation into one visual corpus.
    static Var compose(Var adapted, Var global_tokens);

    // Full path for one reference image: (l_p, d) personalization tokens.
    Var forward(Tape& t, ParamStore& ps, const ReferenceImage& ref,
                PriorProvider* provider = nullptr) const;
};

}  // namespace tora2
